#pragma once

#include <complex>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace reflectkit {

/// Terminal condition at the far end of every finite branch.
enum class BoundarySetting {
    Neumann,   ///< open circuit, y'(tau) = 0
    Dirichlet, ///< short circuit, y(tau) = 0
};

std::string_view to_string(BoundarySetting setting);
BoundarySetting parse_boundary(std::string_view text);

/// Physical line parameters sampled on a uniform z grid.
struct LineProfile {
    Eigen::VectorXd z;           ///< meters, strictly increasing, uniform
    Eigen::VectorXd inductance;  ///< H/m
    Eigen::VectorXd capacitance; ///< F/m
};

struct ProfileChecks {
    /// Relative flatness required of Zc over the first and last three
    /// samples (local uniformity near the extremities). Disabled when empty.
    std::optional<double> end_flatness = 1e-9;
};

void validate(const LineProfile& profile, const ProfileChecks& checks = {});

/// One branch in traveling-time coordinates. The potential is sampled on a
/// uniform grid over [0, tau] and interpolated linearly between samples.
struct BranchSpec {
    double tau = 0.0;             ///< seconds
    Eigen::VectorXd q;            ///< s^-2
    double zc_at_node = 1.0;      ///< ohms
    double zc_slope_at_node = 0.0;///< ohms/s, dZc/dx at x = 0
    Eigen::VectorXd zc;           ///< resampled Zc(x); empty unless built from a profile

    Eigen::Index samples() const { return q.size(); }
    double step() const { return tau / static_cast<double>(q.size() - 1); }
};

BranchSpec make_branch(double tau, Eigen::VectorXd q, double zc_at_node = 1.0,
                       double zc_slope_at_node = 0.0);

/// Uniform branch of traveling time tau (q == 0).
BranchSpec uniform_branch(double tau, Eigen::Index samples = 2, double zc = 1.0);

void validate(const BranchSpec& branch);

/// Branches joined at a central node, probed through a uniform test line of
/// impedance zc0.
struct StarNetwork {
    std::vector<BranchSpec> branches;
    double coupling_h = 0.0; ///< s^-1
    double zc0 = 1.0;        ///< ohms

    double total_tau() const;
};

/// Builds a network, checking impedance continuity at the node. H is taken
/// from node_coupling unless an explicit override is given.
StarNetwork make_network(std::vector<BranchSpec> branches, double zc0,
                         std::optional<double> coupling_override = std::nullopt);

/// Liouville change of variables x = int sqrt(LC) dz. Zc is resampled on a
/// uniform x grid and q = sqrt(Zc) (1/sqrt(Zc))'' by finite differences.
BranchSpec liouville_transform(const LineProfile& profile, int resample_count,
                               const ProfileChecks& checks = {});

/// H = -(1/2) sum_j Zc_j'(0) / zc0.
double node_coupling(std::span<const BranchSpec> branches, double zc0);

/// Q(x) = Zc'/(2 Zc) on the branch grid, reconstructed from q and the node
/// data by solving w'' = q w with w = Zc^{-1/2}.
Eigen::VectorXd impedance_log_derivative(const BranchSpec& branch);

/// Integrates the reflection-coefficient Riccati equation
///   R' = e^{-2iwx} Q R^2 - Q e^{2iwx}
/// from x = tau (value terminal_r) down to x = 0 with fixed-step RK4.
/// Throws SingularTrajectory if |1 + R| drops below 1e-12.
std::complex<double> riccati_check(const BranchSpec& branch, double omega,
                                   std::complex<double> terminal_r);

} // namespace reflectkit
