#pragma once

#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "reflectkit/errors.hpp"
#include "reflectkit/forward.hpp"
#include "reflectkit/geometry.hpp"

namespace reflectkit {

/// Frequencies where R = -1 (Phi = 0) inside the grid range.
///
/// A + to - sign change of arg(-R) between neighbours with |arg(-R)| < pi/2
/// on both sides brackets a resonance; it is refined on a polynomial
/// interpolant of the phase through up to six surrounding samples. Two
/// resonances closer than one grid step are not resolved.
std::vector<double> detect_resonances(const ReflectionTrace& trace);

struct AssignedResonance {
    int order = 0;
    double lambda = 0.0;
};

struct BranchResonances {
    double tau = 0.0;
    int multiplicity = 1;
    std::vector<AssignedResonance> entries; ///< increasing order
};

struct ResonanceTable {
    BoundarySetting setting = BoundarySetting::Neumann;
    std::vector<BranchResonances> branches; ///< one per geometry group
    std::vector<double> unassigned;
};

/// Unperturbed resonance of order i >= 1: (2i - 1) pi / (2 tau) for Neumann
/// terminals, i pi / tau for Dirichlet.
double free_resonance(double tau, int order, BoundarySetting setting);

/// Greedy nearest-candidate assignment. A resonance is kept only when the
/// runner-up candidate is at least twice as far and the gap is below
/// pi / (4 max tau); a group of multiplicity n keeps at most n resonances
/// per order.
ResonanceTable assign_resonances(const std::vector<double>& resonances,
                                 const GeometryEstimate& geometry, BoundarySetting setting);

struct IntegralEstimate {
    double tau = 0.0;
    int multiplicity = 1;
    double integral_hat = 0.0;  ///< per branch; the group mean when n > 1
    double shift_coefficient = 0.0; ///< a in lambda_i - mu_i ~ a / mu_i
    double fit_residual = 0.0;  ///< rms of mu_i (lambda_i - mu_i) - a
    std::size_t points = 0;
    bool model_mismatch = false;
};

/// Weighted least squares of the shifts against a / mu_i with weights mu_i^2;
/// the integral follows as 2 tau a. Needs at least `min_points` resonances
/// per group.
std::vector<IntegralEstimate> estimate_potential_integrals(const ResonanceTable& table,
                                                           std::size_t min_points = 10);

/// sum_j prod_{k != j} phi_k(0) phi~_k(0) * int (q~_j - q_j) phi_j phi~_j dx
/// per frequency. Both networks must share traveling times and sample counts.
Eigen::VectorXd characteristic_residual(const StarNetwork& network, const StarNetwork& candidate,
                                        const Eigen::VectorXd& omegas, BoundarySetting setting);

enum class BasisKind {
    Sine,     ///< sin(2 pi k x / tau), k = 1..m
    HalfSine, ///< m full-period sine modes on each half; first-half modes listed first
};

struct BasisSpec {
    int modes = 3;
    BasisKind kind = BasisKind::Sine;
    Eigen::Index samples_per_branch = 101;

    int size() const { return kind == BasisKind::Sine ? modes : 2 * modes; }
};

/// Basis function `index` sampled on the branch grid.
Eigen::VectorXd basis_function(const BasisSpec& spec, double tau, int index);

Eigen::VectorXd synthesize_potential(const BasisSpec& spec, double tau,
                                     const Eigen::Ref<const Eigen::VectorXd>& coefficients);

/// Freeze mask over all branch coefficients that fixes the first-half modes.
std::vector<bool> first_half_freeze_mask(const BasisSpec& spec, std::size_t branch_count);

struct FitOptions {
    double jacobian_step = 1e-6;
    int max_iterations = 200;
    double step_tolerance = 1e-10;
    double stagnation_misfit = 1e-4;
    /// Starting coefficients, all branches concatenated; empty means zero.
    /// Frozen coefficients keep these values.
    Eigen::VectorXd initial;
};

struct BranchPotential {
    double tau = 0.0;
    Eigen::VectorXd coefficients;
    Eigen::VectorXd std_errors;
    Eigen::VectorXd q_samples;
    double integral_hat = 0.0;
};

struct PotentialEstimate {
    std::vector<BranchPotential> branches;
    double misfit = 0.0; ///< rms of |R_model - R_meas| over all samples
    int iterations = 0;
    std::vector<std::string> flags;
    std::vector<double> objective_history; ///< accepted iterates only

    bool has_flag(std::string_view flag) const;
};

/// Raised when the misfit stalls above the stagnation level; carries the best
/// iterate found.
class FitNonConvergence : public Error {
public:
    FitNonConvergence(const std::string& message, PotentialEstimate best);
    const PotentialEstimate& best() const { return best_; }

private:
    PotentialEstimate best_;
};

/// Levenberg-Marquardt damped Gauss-Newton on Re/Im residuals of the model
/// reflection coefficient against one or two traces (distinct settings, same
/// grid). The model network uses the traces' coupling constant.
PotentialEstimate fit_potentials(std::span<const ReflectionTrace> traces,
                                 std::span<const double> taus, const BasisSpec& basis,
                                 const std::vector<bool>& freeze_mask, const FitOptions& options = {});

/// sqrt(sum_j int (a_j - b_j)^2) / sqrt(sum_j int b_j^2), trapezoid per branch.
double relative_l2_error(const std::vector<Eigen::VectorXd>& estimate,
                         const std::vector<Eigen::VectorXd>& truth, std::span<const double> taus);

} // namespace reflectkit
