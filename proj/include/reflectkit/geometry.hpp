#pragma once

#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "reflectkit/forward.hpp"

namespace reflectkit {

/// f(w) = (H - iw(1 - R)/(1 + R)) / w, i.e. (1/w) sum_j phi_j'(0)/phi_j(0).
/// For a homogeneous Neumann network f = sum_j n_j tan(w tau_j).
struct TanSumSamples {
    Eigen::VectorXd omegas;
    Eigen::VectorXd f_values;
    std::vector<bool> mask; ///< true = excluded (near-pole)
    BoundarySetting setting = BoundarySetting::Neumann;
    double imag_residue = 0.0; ///< max |Im f| / max(1, |f|) before discarding
};

/// Samples with |1 + R| < 1e-6 are masked; more than half masked is an error.
TanSumSamples tan_sum_from_trace(const ReflectionTrace& trace, double h_coupling);

struct GeometryGroup {
    double tau = 0.0;
    int multiplicity = 0;
};

struct GeometryEstimate {
    std::vector<GeometryGroup> groups; ///< decreasing tau
    double residual_sup = 0.0;
    std::pair<double, double> window{0.0, 0.0};
    std::vector<std::string> flags;

    bool has_flag(std::string_view flag) const;
    int branch_count() const;
};

struct PeelOptions {
    /// Largest traveling time searched for; 0 derives it from the grid
    /// (64 samples per quarter period of the longest branch).
    double max_tau = 0.0;
    /// A + to - jump between neighbors counts as a pole only if it exceeds
    /// this multiple of the median |f| (and the grid-derived floor).
    double pole_jump_factor = 20.0;
    /// Samples with |cos(w tau)| below this are dropped after a group is peeled.
    double detection_guard = 0.05;
    /// Samples closer than this (in |cos(w tau)|) to a peeled pole are left
    /// out of the residual sup-norm.
    double residual_guard = 0.3;
    /// Fraction of predicted poles of a candidate train that must be observed.
    double match_fraction = 0.9;
    int max_groups = 32;
};

/// Pole-peeling reconstruction of (tau_j, n_j) from samples of f.
///
/// Each round takes the smallest detected pole, finds the longest pole train
/// (odd multiples of pi/(2 tau) for Neumann, even for Dirichlet) consistent
/// with the detected poles, fits tau by least squares over the train,
/// estimates the multiplicity from the limit of sin(tau (w* - w)) f(w) at
/// the train's poles, and subtracts n tan(w tau) before the next round. With
/// a window starting below the first pole this reduces to tau = pi/(2 w*).
GeometryEstimate peel_geometry(const TanSumSamples& samples, double tolerance,
                               const PeelOptions& options = {});

struct GeometryOptions {
    PeelOptions peel;
    /// c in the loosened acceptance threshold tolerance + c / w_min, absorbing
    /// the O(1/w) effect of nonzero potentials.
    double remainder_constant = 40.0;
};

GeometryEstimate identify_geometry(const ReflectionTrace& trace, double h_coupling,
                                   double omega_min, double omega_max, double tolerance,
                                   const GeometryOptions& options = {});

/// True when some ratio of traveling times lies within `distance` of an integer.
bool b1_violated(const std::vector<GeometryGroup>& groups, double distance = 0.05);

/// First `count` continued-fraction convergents p/q of x.
std::vector<std::pair<long long, long long>> continued_fraction_convergents(double x, int count);

} // namespace reflectkit
