#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "reflectkit/errors.hpp"
#include "reflectkit/forward.hpp"
#include "reflectkit/line_model.hpp"

using namespace reflectkit;

namespace {

// L = Zc / v and C = 1 / (Zc v): travel speed v, impedance Zc(z).
template <class Zc>
LineProfile profile_from_impedance(Zc zc, double z_max, double v, Eigen::Index n)
{
    LineProfile p;
    p.z = Eigen::VectorXd::LinSpaced(n, 0.0, z_max);
    p.inductance.resize(n);
    p.capacitance.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        p.inductance(i) = zc(p.z(i)) / v;
        p.capacitance(i) = 1.0 / (zc(p.z(i)) * v);
    }
    return p;
}

// Smooth bump on [za, zb], exactly flat outside, so an open end is a true
// Neumann condition.
double bump(double z, double zc0, double b, double za, double zb)
{
    if (z <= za || z >= zb)
        return zc0;
    const double s = 1.0 - std::cos(2.0 * M_PI * (z - za) / (zb - za));
    return zc0 * std::exp(b * s * s);
}

} // namespace

TEST_CASE("uniform line maps to a free branch")
{
    const LineProfile p = profile_from_impedance([](double) { return 50.0; }, 3.0, 2.0, 301);
    const BranchSpec b = liouville_transform(p, 101);
    CHECK(b.tau == doctest::Approx(1.5).epsilon(1e-14));
    CHECK(b.q.cwiseAbs().maxCoeff() < 1e-9);
    CHECK(b.zc_at_node == doctest::Approx(50.0));
    CHECK(std::abs(b.zc_slope_at_node) < 1e-9);

    const StarNetwork net = make_network({b}, 50.0);
    CHECK(net.coupling_h == 0.0);
    for (double w : {0.3, 4.0, 17.5})
        CHECK(std::abs(reflection_coefficient(net, w, BoundarySetting::Neumann) -
                       oracle::free_reflection(w, 1.5, BoundarySetting::Neumann)) < 1e-12);
}

TEST_CASE("exponential taper has a constant potential and a nonzero coupling")
{
    // Zc = Z0 exp(alpha z), v = 1: q = alpha^2 / 4, Q = alpha / 2, H = -alpha / 2.
    const double alpha = 0.6;
    const LineProfile p =
        profile_from_impedance([&](double z) { return 75.0 * std::exp(alpha * z); }, 2.0, 1.0, 2001);
    ProfileChecks loose;
    loose.end_flatness.reset();
    CHECK_THROWS_AS(liouville_transform(p, 201), Error);
    const BranchSpec b = liouville_transform(p, 201, loose);

    CHECK(b.tau == doctest::Approx(2.0).epsilon(1e-12));
    CHECK((b.q.array() - alpha * alpha / 4.0).abs().maxCoeff() < 1e-4);
    CHECK(b.zc_slope_at_node / b.zc_at_node == doctest::Approx(alpha).epsilon(1e-3));

    const StarNetwork net = make_network({b}, b.zc_at_node);
    CHECK(net.coupling_h == doctest::Approx(-alpha / 2.0).epsilon(1e-3));

    const Eigen::VectorXd big_q = impedance_log_derivative(b);
    CHECK((big_q.array() - alpha / 2.0).abs().maxCoeff() < 1e-3);
}

TEST_CASE("profile validation")
{
    LineProfile p = profile_from_impedance([](double) { return 1.0; }, 1.0, 1.0, 20);
    SUBCASE("non-positive inductance")
    {
        p.inductance(4) = -1.0;
        CHECK_THROWS_WITH_AS(validate(p), doctest::Contains("inductance"), Error);
    }
    SUBCASE("non-uniform grid")
    {
        p.z(5) += 0.01;
        CHECK_THROWS_WITH_AS(validate(p), doctest::Contains("uniform"), Error);
    }
    SUBCASE("length mismatch")
    {
        p.capacitance.conservativeResize(10);
        CHECK_THROWS_AS(validate(p), Error);
    }
    SUBCASE("error code")
    {
        p.capacitance(0) = 0.0;
        try {
            validate(p);
            FAIL("expected an error");
        } catch (const Error& e) {
            CHECK(e.code() == ErrorCode::InvalidProfile);
        }
    }
    SUBCASE("resample count")
    {
        try {
            liouville_transform(p, 4);
            FAIL("expected an error");
        } catch (const Error& e) {
            CHECK(e.code() == ErrorCode::Parameter);
        }
    }
}

TEST_CASE("network assembly")
{
    CHECK_THROWS_AS(make_network({}, 1.0), Error);
    CHECK_THROWS_AS(make_network({uniform_branch(1.0, 4, 50.0)}, 75.0), Error);
    CHECK_THROWS_AS(make_branch(-1.0, Eigen::VectorXd::Zero(8)), Error);

    BranchSpec a = uniform_branch(1.0);
    BranchSpec b = uniform_branch(2.0);
    a.zc_slope_at_node = 0.4;
    b.zc_slope_at_node = -1.0;
    const std::vector<BranchSpec> both{a, b};
    CHECK(node_coupling(both, 2.0) == doctest::Approx(0.15));
    CHECK(make_network(both, 1.0).coupling_h == doctest::Approx(0.3));
    CHECK(make_network(both, 1.0, -0.2).coupling_h == -0.2);
    CHECK(make_network(both, 1.0).total_tau() == 3.0);
}

TEST_CASE("boundary setting names")
{
    CHECK(parse_boundary("neumann") == BoundarySetting::Neumann);
    CHECK(parse_boundary("dirichlet") == BoundarySetting::Dirichlet);
    CHECK(to_string(BoundarySetting::Dirichlet) == "dirichlet");
    CHECK_THROWS_AS(parse_boundary("open"), Error);
}

TEST_CASE("Riccati integration agrees with the transfer-matrix reflection")
{
    // The Riccati equation is written for a test line entering the node from
    // the other side, so it yields the complex conjugate of the forward R.
    SUBCASE("bump profile with an open end")
    {
        const LineProfile p = profile_from_impedance(
            [](double z) { return bump(z, 50.0, 0.15, 0.4, 1.6); }, 2.0, 1.0, 8001);
        // Both integrators are second order in the branch grid step, so the
        // gap shrinks by about 4 per refinement.
        double previous = 0.0;
        for (int n : {1001, 2001}) {
            const BranchSpec b = liouville_transform(p, n);
            CHECK(b.q.cwiseAbs().maxCoeff() > 0.1);
            const StarNetwork net = make_network({b}, b.zc_at_node);
            CHECK(std::abs(net.coupling_h) < 1e-9);
            double gap = 0.0;
            for (double w : {0.5, 2.0, 7.3}) {
                const auto terminal = std::polar(1.0, 2.0 * w * b.tau);
                const auto r_ric = riccati_check(b, w, terminal);
                const auto r_fwd = reflection_coefficient(net, w, BoundarySetting::Neumann);
                gap = std::max(gap, std::abs(r_ric - std::conj(r_fwd)));
                CHECK(std::abs(std::abs(r_ric) - 1.0) < 1e-8);
            }
            CHECK(gap < 2e-4);
            if (previous > 0.0)
                CHECK(previous / gap > 3.5);
            previous = gap;
        }
    }
    SUBCASE("exponential taper needs the impedance-matched terminal value")
    {
        const double alpha = 0.5;
        const LineProfile p =
            profile_from_impedance([&](double z) { return std::exp(alpha * z); }, 1.5, 1.0, 3001);
        ProfileChecks loose;
        loose.end_flatness.reset();
        const BranchSpec b = liouville_transform(p, 1501, loose);
        const StarNetwork net = make_network({b}, b.zc_at_node);
        const Eigen::VectorXd big_q = impedance_log_derivative(b);
        const double q_end = big_q(big_q.size() - 1);
        for (double w : {0.8, 3.0}) {
            // An open end is y' = Q y for the Schroedinger variable, which
            // is Neumann only when Q vanishes there.
            const std::complex<double> iw(0.0, w);
            const auto terminal = std::polar(1.0, 2.0 * w * b.tau) * (iw - q_end) / (iw + q_end);
            const auto r_ric = riccati_check(b, w, terminal);
            const auto r_fwd = reflection_coefficient(net, w, BoundarySetting::Neumann);
            CHECK(std::abs(r_ric - std::conj(r_fwd)) < 1e-5);
        }
    }
}

TEST_CASE("Riccati trajectory through R = -1 is reported")
{
    // With Q = 0 the trajectory is constant, so starting at -1 stays there.
    const BranchSpec b = uniform_branch(1.0, 16);
    try {
        riccati_check(b, 1.0, {-1.0, 0.0});
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::SingularTrajectory);
    }
}
