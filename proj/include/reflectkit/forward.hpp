#pragma once

#include <complex>
#include <limits>
#include <vector>

#include <Eigen/Dense>

#include "reflectkit/line_model.hpp"

namespace reflectkit {

/// Node data (phi(0, w), phi'(0, w)) of a branch fundamental solution.
struct FundamentalSolutionEval {
    double value_at_0 = 0.0;
    double deriv_at_0 = 0.0;
    double omega = 0.0;
    BoundarySetting setting = BoundarySetting::Neumann;
    /// max over cell boundaries of |W(phi_N, phi_D) - 1|
    double wronskian_drift = 0.0;
};

/// Propagates -y'' + q y = w^2 y from x = tau to x = 0 with the exact
/// per-cell constant-potential propagator. Terminal data: Neumann (1, 0),
/// Dirichlet (0, 1). Both columns are carried jointly so the Wronskian
/// drift is always available.
FundamentalSolutionEval fundamental_solution(const BranchSpec& branch, double omega,
                                             BoundarySetting setting);

struct FundamentalPair {
    FundamentalSolutionEval neumann;
    FundamentalSolutionEval dirichlet;
};

FundamentalPair fundamental_pair(const BranchSpec& branch, double omega);

/// Fundamental solution sampled at every branch grid node.
struct FundamentalTrace {
    Eigen::VectorXd value;
    Eigen::VectorXd deriv;
};

FundamentalTrace fundamental_trace(const BranchSpec& branch, double omega, BoundarySetting setting);

/// Phi = prod_j phi_j(0), Psi = d/dx prod_j phi_j(x) at x = 0.
struct CharFunctionsEval {
    double phi = 0.0;
    double psi = 0.0;
    double omega = 0.0;
    BoundarySetting setting = BoundarySetting::Neumann;
};

CharFunctionsEval char_functions(const StarNetwork& network, double omega, BoundarySetting setting);

/// R = (iw Phi - H Phi + Psi) / (iw Phi + H Phi - Psi); equals -1 where Phi = 0.
std::complex<double> reflection_coefficient(const StarNetwork& network, double omega,
                                            BoundarySetting setting);

struct ScatteringSolution {
    std::complex<double> r;
    std::vector<std::complex<double>> alphas;
    double continuity_residual = 0.0; ///< max_j |alpha_j phi_j(0) - (1 + R)|
    double current_residual = 0.0;    ///< |sum alpha_j phi_j'(0) + iw(1 - R) - H(1 + R)|
    bool extrapolated = false;
};

ScatteringSolution scattering_solution(const StarNetwork& network, double omega,
                                       BoundarySetting setting);

struct ReflectionTrace {
    Eigen::VectorXd omegas;
    Eigen::VectorXcd values;
    BoundarySetting setting = BoundarySetting::Neumann;
    double h_coupling = 0.0;

    Eigen::Index size() const { return omegas.size(); }
};

void validate_grid(const Eigen::VectorXd& omegas);

Eigen::VectorXd linear_grid(double omega_min, double omega_max, Eigen::Index count);

/// Element-wise reflection_coefficient over a strictly increasing, nonzero grid.
ReflectionTrace sweep(const StarNetwork& network, const Eigen::VectorXd& omegas,
                      BoundarySetting setting);

/// A real function sampled on a grid, with excluded samples masked out.
struct SampledFunction {
    Eigen::VectorXd omegas;
    Eigen::VectorXd values;
    std::vector<bool> mask; ///< true = excluded
};

/// h(w) = H + iw(R - 1)/(1 + R), real for lossless traces. Samples with
/// |1 + R| <= 1e-9 are masked as resonances.
SampledFunction h_function(const ReflectionTrace& trace);

struct Spectrum {
    std::vector<double> roots;
    std::vector<double> tangencies; ///< near-double roots seen without a sign change
};

/// Positive roots lambda <= lambda_max of Psi(lambda) = h Phi(lambda).
/// An infinite h solves Phi(lambda) = 0 instead.
Spectrum compact_spectrum(const StarNetwork& network, double h_value, BoundarySetting setting,
                          double lambda_max);

} // namespace reflectkit
