#include "reflectkit/forward.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>

#include "reflectkit/errors.hpp"
#include "reflectkit/propagator.hpp"

namespace reflectkit {

namespace {

using cd = std::complex<double>;

std::string omega_text(double omega)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", omega);
    return buf;
}

// Joint propagation of both fundamental solutions from tau down to 0.
// Consecutive cells with identical potential are merged into one step.
Transfer<double> node_transfer(const BranchSpec& branch, double omega, double* drift)
{
    const Eigen::Index cells = branch.samples() - 1;
    const double h = branch.step();
    const double w2 = omega * omega;
    Transfer<double> s = Transfer<double>::Identity();
    double worst = 0.0;
    Eigen::Index i = cells - 1;
    while (i >= 0) {
        const double qc = cell_potential(branch.q, i);
        Eigen::Index run = 1;
        while (i - run >= 0 && cell_potential(branch.q, i - run) == qc)
            ++run;
        s = cell_transfer(w2 - qc, -h * static_cast<double>(run)) * s;
        worst = std::max(worst, std::abs(s.determinant() - 1.0));
        i -= run;
    }
    if (drift)
        *drift = worst;
    return s;
}

FundamentalSolutionEval column(const Transfer<double>& s, int col, double omega,
                               BoundarySetting setting, double drift)
{
    FundamentalSolutionEval e;
    e.value_at_0 = s(0, col);
    e.deriv_at_0 = s(1, col);
    e.omega = omega;
    e.setting = setting;
    e.wronskian_drift = drift;
    return e;
}

cd rational_reflection(double phi, double psi, double h, double omega)
{
    const cd iw(0.0, omega);
    const cd num = iw * phi - h * phi + psi;
    const cd den = iw * phi + h * phi - psi;
    if (den == cd(0.0, 0.0))
        return cd(-1.0, 0.0);
    return num / den;
}

std::vector<FundamentalSolutionEval> node_data(const StarNetwork& network, double omega,
                                               BoundarySetting setting)
{
    std::vector<FundamentalSolutionEval> out;
    out.reserve(network.branches.size());
    for (const auto& b : network.branches)
        out.push_back(fundamental_solution(b, omega, setting));
    return out;
}

CharFunctionsEval combine(const std::vector<FundamentalSolutionEval>& data, double omega,
                          BoundarySetting setting)
{
    CharFunctionsEval c;
    c.omega = omega;
    c.setting = setting;
    c.phi = 1.0;
    for (const auto& d : data)
        c.phi *= d.value_at_0;
    c.psi = 0.0;
    for (std::size_t j = 0; j < data.size(); ++j) {
        double term = data[j].deriv_at_0;
        for (std::size_t k = 0; k < data.size(); ++k)
            if (k != j)
                term *= data[k].value_at_0;
        c.psi += term;
    }
    return c;
}

} // namespace

FundamentalPair fundamental_pair(const BranchSpec& branch, double omega)
{
    double drift = 0.0;
    const Transfer<double> s = node_transfer(branch, omega, &drift);
    return {column(s, 0, omega, BoundarySetting::Neumann, drift),
            column(s, 1, omega, BoundarySetting::Dirichlet, drift)};
}

FundamentalSolutionEval fundamental_solution(const BranchSpec& branch, double omega,
                                             BoundarySetting setting)
{
    double drift = 0.0;
    const Transfer<double> s = node_transfer(branch, omega, &drift);
    return column(s, setting == BoundarySetting::Neumann ? 0 : 1, omega, setting, drift);
}

FundamentalTrace fundamental_trace(const BranchSpec& branch, double omega, BoundarySetting setting)
{
    const Eigen::Index n = branch.samples();
    const double h = branch.step();
    const double w2 = omega * omega;
    FundamentalTrace t{Eigen::VectorXd(n), Eigen::VectorXd(n)};
    CauchyData<double> y = setting == BoundarySetting::Neumann ? CauchyData<double>(1.0, 0.0)
                                                               : CauchyData<double>(0.0, 1.0);
    t.value(n - 1) = y(0);
    t.deriv(n - 1) = y(1);
    for (Eigen::Index i = n - 2; i >= 0; --i) {
        y = cell_transfer(w2 - cell_potential(branch.q, i), -h) * y;
        t.value(i) = y(0);
        t.deriv(i) = y(1);
    }
    return t;
}

CharFunctionsEval char_functions(const StarNetwork& network, double omega, BoundarySetting setting)
{
    return combine(node_data(network, omega, setting), omega, setting);
}

std::complex<double> reflection_coefficient(const StarNetwork& network, double omega,
                                            BoundarySetting setting)
{
    require(omega != 0.0, ErrorCode::Parameter, "reflection coefficient is undefined at omega = 0");
    const CharFunctionsEval c = char_functions(network, omega, setting);
    return rational_reflection(c.phi, c.psi, network.coupling_h, omega);
}

ScatteringSolution scattering_solution(const StarNetwork& network, double omega,
                                       BoundarySetting setting)
{
    require(omega != 0.0, ErrorCode::Parameter, "scattering solution is undefined at omega = 0");
    const auto data = node_data(network, omega, setting);
    const CharFunctionsEval c = combine(data, omega, setting);

    ScatteringSolution sol;
    sol.r = rational_reflection(c.phi, c.psi, network.coupling_h, omega);

    double max_tau = 0.0;
    for (const auto& b : network.branches)
        max_tau = std::max(max_tau, b.tau);
    const double scale = std::max(std::abs(omega), 1.0);

    auto singular = [&](const FundamentalSolutionEval& d) {
        const double norm = std::hypot(d.value_at_0, d.deriv_at_0 / scale);
        return std::abs(d.value_at_0) <= 1e-8 * norm;
    };

    // alpha_j at a shifted frequency, computed directly.
    auto direct_alpha = [&](std::size_t j, double w) {
        const auto shifted = node_data(network, w, setting);
        if (singular(shifted[j]))
            throw Error(ErrorCode::DegenerateFrequency,
                        "fundamental solution vanishes near omega = " + omega_text(omega));
        const CharFunctionsEval cs = combine(shifted, w, setting);
        const cd rs = rational_reflection(cs.phi, cs.psi, network.coupling_h, w);
        return (1.0 + rs) / shifted[j].value_at_0;
    };

    sol.alphas.resize(data.size());
    for (std::size_t j = 0; j < data.size(); ++j) {
        if (!singular(data[j])) {
            sol.alphas[j] = (1.0 + sol.r) / data[j].value_at_0;
            continue;
        }
        // One Richardson step on symmetric averages.
        const double delta = 1e-3 / max_tau;
        require(omega - 2.0 * delta != 0.0 && (omega - 2.0 * delta) * omega > 0.0,
                ErrorCode::DegenerateFrequency, "cannot extrapolate across omega = 0");
        const cd a1 = 0.5 * (direct_alpha(j, omega + delta) + direct_alpha(j, omega - delta));
        const cd a2 = 0.5 * (direct_alpha(j, omega + 2.0 * delta) + direct_alpha(j, omega - 2.0 * delta));
        sol.alphas[j] = (4.0 * a1 - a2) / 3.0;
        sol.extrapolated = true;
    }

    cd current(0.0, 0.0);
    for (std::size_t j = 0; j < data.size(); ++j) {
        sol.continuity_residual = std::max(sol.continuity_residual,
                                           std::abs(sol.alphas[j] * data[j].value_at_0 - (1.0 + sol.r)));
        current += sol.alphas[j] * data[j].deriv_at_0;
    }
    current += cd(0.0, omega) * (1.0 - sol.r) - network.coupling_h * (1.0 + sol.r);
    sol.current_residual = std::abs(current);
    return sol;
}

void validate_grid(const Eigen::VectorXd& omegas)
{
    require(omegas.size() >= 1, ErrorCode::Parameter, "frequency grid is empty");
    for (Eigen::Index k = 0; k < omegas.size(); ++k) {
        require(std::isfinite(omegas(k)) && omegas(k) != 0.0, ErrorCode::Parameter,
                "frequency grid must be finite and exclude omega = 0");
        if (k > 0)
            require(omegas(k) > omegas(k - 1), ErrorCode::Parameter,
                    "frequency grid must be strictly increasing");
    }
}

Eigen::VectorXd linear_grid(double omega_min, double omega_max, Eigen::Index count)
{
    require(count >= 2, ErrorCode::Parameter, "grid needs at least 2 points");
    require(omega_max > omega_min, ErrorCode::Parameter, "grid bounds must be increasing");
    return Eigen::VectorXd::LinSpaced(count, omega_min, omega_max);
}

ReflectionTrace sweep(const StarNetwork& network, const Eigen::VectorXd& omegas,
                      BoundarySetting setting)
{
    validate_grid(omegas);
    ReflectionTrace trace;
    trace.omegas = omegas;
    trace.values.resize(omegas.size());
    trace.setting = setting;
    trace.h_coupling = network.coupling_h;
    for (Eigen::Index k = 0; k < omegas.size(); ++k) {
        try {
            trace.values(k) = reflection_coefficient(network, omegas(k), setting);
        } catch (const Error& e) {
            throw Error(e.code(), std::string(e.what()) + " (omega = " + omega_text(omegas(k)) + ")");
        }
    }
    return trace;
}

SampledFunction h_function(const ReflectionTrace& trace)
{
    validate_grid(trace.omegas);
    SampledFunction out;
    out.omegas = trace.omegas;
    out.values = Eigen::VectorXd::Zero(trace.size());
    out.mask.assign(static_cast<std::size_t>(trace.size()), false);
    for (Eigen::Index k = 0; k < trace.size(); ++k) {
        const cd r = trace.values(k);
        if (std::abs(1.0 + r) <= 1e-9) {
            out.mask[static_cast<std::size_t>(k)] = true;
            continue;
        }
        const cd h = trace.h_coupling + cd(0.0, trace.omegas(k)) * (r - 1.0) / (1.0 + r);
        if (std::abs(h.imag()) >= 1e-6 * std::max(1.0, std::abs(h)))
            throw Error(ErrorCode::Parameter,
                        "h(omega) is not real; trace is not lossless at omega = " +
                            omega_text(trace.omegas(k)));
        out.values(k) = h.real();
    }
    return out;
}

Spectrum compact_spectrum(const StarNetwork& network, double h_value, BoundarySetting setting,
                          double lambda_max)
{
    require(lambda_max > 0.0, ErrorCode::Parameter, "lambda_max must be positive");
    const bool phi_only = std::isinf(h_value);
    auto g = [&](double lambda) {
        const CharFunctionsEval c = char_functions(network, lambda, setting);
        return phi_only ? c.phi : c.psi - h_value * c.phi;
    };

    const double step = M_PI / (8.0 * network.total_tau());
    Spectrum spec;

    auto bisect = [&](double a, double b, double ga) {
        while (b - a > 1e-10) {
            const double mid = 0.5 * (a + b);
            const double gm = g(mid);
            if (gm == 0.0)
                return mid;
            if ((gm > 0.0) == (ga > 0.0)) {
                a = mid;
                ga = gm;
            } else {
                b = mid;
            }
        }
        return 0.5 * (a + b);
    };

    // Flags a tangency when |g| dips to (near) zero inside [a, b] without a
    // sign change; golden-section search on |g|.
    auto tangency = [&](double a, double b, double scale) {
        const double ratio = 0.5 * (std::sqrt(5.0) - 1.0);
        double c = b - ratio * (b - a), d = a + ratio * (b - a);
        double gc = std::abs(g(c)), gd = std::abs(g(d));
        while (b - a > 1e-10) {
            if (gc < gd) {
                b = d; d = c; gd = gc;
                c = b - ratio * (b - a); gc = std::abs(g(c));
            } else {
                a = c; c = d; gc = gd;
                d = a + ratio * (b - a); gd = std::abs(g(d));
            }
        }
        const double x = 0.5 * (a + b);
        if (std::abs(g(x)) <= 1e-9 * scale)
            spec.tangencies.push_back(x);
    };

    double prev_lambda = 1e-3 * step;
    double prev = g(prev_lambda);
    double prev_prev = std::numeric_limits<double>::quiet_NaN();
    double prev_prev_lambda = 0.0;
    for (long k = 1;; ++k) {
        const double lambda = std::min(static_cast<double>(k) * step, lambda_max);
        const double cur = g(lambda);
        if (cur == 0.0) {
            spec.roots.push_back(lambda);
        } else if (prev != 0.0 && (cur > 0.0) != (prev > 0.0)) {
            spec.roots.push_back(bisect(prev_lambda, lambda, prev));
        } else if (!std::isnan(prev_prev) && prev != 0.0 && (prev > 0.0) == (prev_prev > 0.0) &&
                   (cur > 0.0) == (prev > 0.0) && std::abs(prev) < std::abs(cur) &&
                   std::abs(prev) < std::abs(prev_prev)) {
            const double scale = std::max({std::abs(cur), std::abs(prev_prev), 1e-300});
            tangency(prev_prev_lambda, lambda, scale);
        }
        prev_prev = prev;
        prev_prev_lambda = prev_lambda;
        prev = cur;
        prev_lambda = lambda;
        if (lambda >= lambda_max)
            break;
    }
    return spec;
}

} // namespace reflectkit
