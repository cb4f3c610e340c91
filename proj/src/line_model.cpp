#include "reflectkit/line_model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "reflectkit/errors.hpp"
#include "reflectkit/propagator.hpp"

namespace reflectkit {

namespace {

bool near_relative(double a, double b, double rel)
{
    return std::abs(a - b) <= rel * std::max(std::abs(a), std::abs(b));
}

void check_uniform_grid(const Eigen::VectorXd& z)
{
    const Eigen::Index n = z.size();
    const double h = (z(n - 1) - z(0)) / static_cast<double>(n - 1);
    require(h > 0.0, ErrorCode::InvalidProfile, "z grid must be strictly increasing");
    for (Eigen::Index i = 1; i < n; ++i) {
        const double d = z(i) - z(i - 1);
        require(d > 0.0, ErrorCode::InvalidProfile, "z grid must be strictly increasing");
        require(std::abs(d - h) <= 1e-12 * std::abs(h) + 1e-12 * std::abs(z(i)),
                ErrorCode::InvalidProfile, "z grid must be uniform");
    }
}

// Cubic Lagrange interpolation through the four knots around t.
double lagrange4(const Eigen::VectorXd& knots, const Eigen::VectorXd& values, double t)
{
    const Eigen::Index n = knots.size();
    auto it = std::upper_bound(knots.data(), knots.data() + n, t);
    Eigen::Index cell = std::clamp<Eigen::Index>((it - knots.data()) - 1, 0, n - 2);
    const Eigen::Index first = std::clamp<Eigen::Index>(cell - 1, 0, n - 4);
    double result = 0.0;
    for (Eigen::Index a = first; a < first + 4; ++a) {
        double weight = 1.0;
        for (Eigen::Index b = first; b < first + 4; ++b)
            if (b != a)
                weight *= (t - knots(b)) / (knots(a) - knots(b));
        result += weight * values(a);
    }
    return result;
}

// Second derivative on a uniform grid: centered interior, one-sided
// 4-point stencil at both ends.
Eigen::VectorXd second_derivative(const Eigen::VectorXd& f, double h)
{
    const Eigen::Index n = f.size();
    Eigen::VectorXd d2(n);
    const double inv = 1.0 / (h * h);
    for (Eigen::Index i = 1; i + 1 < n; ++i)
        d2(i) = (f(i - 1) - 2.0 * f(i) + f(i + 1)) * inv;
    d2(0) = (2.0 * f(0) - 5.0 * f(1) + 4.0 * f(2) - f(3)) * inv;
    d2(n - 1) = (2.0 * f(n - 1) - 5.0 * f(n - 2) + 4.0 * f(n - 3) - f(n - 4)) * inv;
    return d2;
}

double linear_sample(const Eigen::VectorXd& v, double step, double x)
{
    const Eigen::Index n = v.size();
    const double s = std::clamp(x / step, 0.0, static_cast<double>(n - 1));
    const Eigen::Index i = std::min<Eigen::Index>(static_cast<Eigen::Index>(s), n - 2);
    const double t = s - static_cast<double>(i);
    return (1.0 - t) * v(i) + t * v(i + 1);
}

} // namespace

std::string_view to_string(BoundarySetting setting)
{
    return setting == BoundarySetting::Neumann ? "neumann" : "dirichlet";
}

BoundarySetting parse_boundary(std::string_view text)
{
    if (text == "neumann")
        return BoundarySetting::Neumann;
    if (text == "dirichlet")
        return BoundarySetting::Dirichlet;
    throw Error(ErrorCode::Parameter, "unknown boundary setting '" + std::string(text) + "'");
}

void validate(const LineProfile& profile, const ProfileChecks& checks)
{
    const Eigen::Index n = profile.z.size();
    require(n >= 4, ErrorCode::InvalidProfile, "line profile needs at least 4 samples");
    require(profile.inductance.size() == n && profile.capacitance.size() == n,
            ErrorCode::InvalidProfile, "L, C and z must have the same length");
    require((profile.inductance.array() > 0.0).all(), ErrorCode::InvalidProfile,
            "inductance must be strictly positive");
    require((profile.capacitance.array() > 0.0).all(), ErrorCode::InvalidProfile,
            "capacitance must be strictly positive");
    check_uniform_grid(profile.z);

    if (checks.end_flatness) {
        const Eigen::ArrayXd zc = (profile.inductance.array() / profile.capacitance.array()).sqrt();
        const double tol = *checks.end_flatness;
        for (Eigen::Index i = 1; i < 3; ++i) {
            require(near_relative(zc(i), zc(0), tol), ErrorCode::InvalidProfile,
                    "Zc must be uniform near the node end of the line");
            require(near_relative(zc(n - 1 - i), zc(n - 1), tol), ErrorCode::InvalidProfile,
                    "Zc must be uniform near the terminal end of the line");
        }
    }
}

void validate(const BranchSpec& branch)
{
    require(std::isfinite(branch.tau) && branch.tau > 0.0, ErrorCode::Parameter,
            "branch traveling time must be positive");
    require(branch.q.size() >= 4, ErrorCode::Parameter, "branch potential needs at least 4 samples");
    require(branch.q.allFinite(), ErrorCode::Parameter, "branch potential must be finite");
    require(branch.zc_at_node > 0.0, ErrorCode::Parameter, "node impedance must be positive");
}

BranchSpec make_branch(double tau, Eigen::VectorXd q, double zc_at_node, double zc_slope_at_node)
{
    BranchSpec b;
    b.tau = tau;
    b.q = std::move(q);
    b.zc_at_node = zc_at_node;
    b.zc_slope_at_node = zc_slope_at_node;
    validate(b);
    return b;
}

BranchSpec uniform_branch(double tau, Eigen::Index samples, double zc)
{
    return make_branch(tau, Eigen::VectorXd::Zero(std::max<Eigen::Index>(samples, 4)), zc, 0.0);
}

double StarNetwork::total_tau() const
{
    double sum = 0.0;
    for (const auto& b : branches)
        sum += b.tau;
    return sum;
}

StarNetwork make_network(std::vector<BranchSpec> branches, double zc0,
                         std::optional<double> coupling_override)
{
    require(!branches.empty(), ErrorCode::Parameter, "network needs at least one branch");
    require(zc0 > 0.0, ErrorCode::Parameter, "zc0 must be positive");
    for (const auto& b : branches) {
        validate(b);
        require(near_relative(b.zc_at_node, zc0, 1e-9), ErrorCode::Parameter,
                "branch impedance at the node must equal zc0");
    }
    StarNetwork net;
    net.zc0 = zc0;
    net.coupling_h = coupling_override ? *coupling_override : node_coupling(branches, zc0);
    net.branches = std::move(branches);
    return net;
}

double node_coupling(std::span<const BranchSpec> branches, double zc0)
{
    require(zc0 > 0.0, ErrorCode::Parameter, "zc0 must be positive");
    double slope_sum = 0.0;
    for (const auto& b : branches)
        slope_sum += b.zc_slope_at_node;
    return -0.5 * slope_sum / zc0;
}

BranchSpec liouville_transform(const LineProfile& profile, int resample_count,
                               const ProfileChecks& checks)
{
    require(resample_count >= 8, ErrorCode::Parameter, "resample_count must be at least 8");
    validate(profile, checks);

    const Eigen::Index n = profile.z.size();
    const Eigen::ArrayXd slowness = (profile.inductance.array() * profile.capacitance.array()).sqrt();
    const Eigen::VectorXd zc = (profile.inductance.array() / profile.capacitance.array()).sqrt();

    Eigen::VectorXd x(n);
    x(0) = 0.0;
    for (Eigen::Index i = 1; i < n; ++i)
        x(i) = x(i - 1) + 0.5 * (slowness(i - 1) + slowness(i)) * (profile.z(i) - profile.z(i - 1));
    const double tau = x(n - 1);

    const Eigen::Index m = resample_count;
    const double h = tau / static_cast<double>(m - 1);
    Eigen::VectorXd zc_x(m);
    for (Eigen::Index k = 0; k < m; ++k)
        zc_x(k) = k == 0 ? zc(0) : (k == m - 1 ? zc(n - 1) : lagrange4(x, zc, h * static_cast<double>(k)));

    const Eigen::VectorXd w = zc_x.array().rsqrt();
    const Eigen::VectorXd q = (second_derivative(w, h).array() / w.array()).matrix();

    BranchSpec b;
    b.tau = tau;
    b.q = q;
    b.zc_at_node = zc_x(0);
    b.zc_slope_at_node = (-3.0 * zc_x(0) + 4.0 * zc_x(1) - zc_x(2)) / (2.0 * h);
    b.zc = zc_x;
    validate(b);
    return b;
}

Eigen::VectorXd impedance_log_derivative(const BranchSpec& branch)
{
    validate(branch);
    const Eigen::Index n = branch.samples();
    const double h = branch.step();
    Eigen::VectorXd big_q(n);
    // w = Zc^{-1/2} up to scale: w(0) = 1, w'(0) = -Q(0).
    CauchyData<double> w(1.0, -0.5 * branch.zc_slope_at_node / branch.zc_at_node);
    big_q(0) = -w(1) / w(0);
    for (Eigen::Index i = 0; i + 1 < n; ++i) {
        w = cell_transfer(-cell_potential(branch.q, i), h) * w;
        require(w(0) > 0.0, ErrorCode::Parameter,
                "potential is inconsistent with a positive impedance profile");
        big_q(i + 1) = -w(1) / w(0);
    }
    return big_q;
}

std::complex<double> riccati_check(const BranchSpec& branch, double omega,
                                   std::complex<double> terminal_r)
{
    validate(branch);
    using cd = std::complex<double>;
    const Eigen::VectorXd big_q = impedance_log_derivative(branch);
    const double grid_step = branch.step();
    const double tau = branch.tau;

    const auto steps = static_cast<long>(std::ceil(std::max(2000.0, 20.0 * std::abs(omega) * tau)));
    const double dx = -tau / static_cast<double>(steps);

    auto rhs = [&](double x, cd r) {
        const double qx = linear_sample(big_q, grid_step, x);
        const cd phase = std::polar(1.0, 2.0 * omega * x);
        return std::conj(phase) * qx * r * r - qx * phase;
    };

    cd r = terminal_r;
    double x = tau;
    for (long s = 0; s < steps; ++s) {
        const cd k1 = rhs(x, r);
        const cd k2 = rhs(x + 0.5 * dx, r + 0.5 * dx * k1);
        const cd k3 = rhs(x + 0.5 * dx, r + 0.5 * dx * k2);
        const cd k4 = rhs(x + dx, r + dx * k3);
        r += dx / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        x = tau + static_cast<double>(s + 1) * dx;
        if (std::abs(1.0 + r) < 1e-12)
            throw Error(ErrorCode::SingularTrajectory,
                        "Riccati trajectory reached R = -1 at x = " + std::to_string(x));
    }
    return r;
}

} // namespace reflectkit
