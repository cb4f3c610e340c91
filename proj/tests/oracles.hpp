// Independent reference computations and random generators shared by the
// unit tests and the acceptance suite. Nothing here touches the transfer
// matrices used by the library.
#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <numeric>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "reflectkit/line_model.hpp"

namespace oracle {

using reflectkit::BoundarySetting;

/// Lumped-mass linear finite elements for -y'' + q y = lambda^2 y on a star
/// graph: continuity at the centre, sum_j y_j'(0) = h y(0), Neumann or
/// Dirichlet at the far ends. The generalized problem K u = lambda^2 M u with
/// diagonal M is scaled to A = M^{-1/2} K M^{-1/2}, which is tridiagonal along
/// each branch plus the couplings to the centre node. Eigenvalue counts come
/// from the inertia of A - s I, eliminated leaf to centre; bisection on the
/// count gives individual eigenvalues.
class StarFem {
public:
    /// q_of(j, x) returns the potential of branch j at x in [0, tau_j].
    template <class PotentialFn>
    StarFem(const std::vector<double>& taus, PotentialFn q_of, double h_coupling,
            BoundarySetting setting, int total_points)
    {
        const double total = std::accumulate(taus.begin(), taus.end(), 0.0);
        double centre_mass = 0.0;
        double centre_stiff = h_coupling;
        for (std::size_t j = 0; j < taus.size(); ++j) {
            const int cells = std::max(4, static_cast<int>(std::lround(total_points * taus[j] / total)));
            const double hx = taus[j] / cells;
            // Nodes 1..cells along the branch (0 is the centre).
            const int last = setting == BoundarySetting::Neumann ? cells : cells - 1;
            Branch b;
            b.diag.resize(static_cast<std::size_t>(last));
            b.off.resize(static_cast<std::size_t>(last));
            std::vector<double> mass(static_cast<std::size_t>(last));
            for (int k = 1; k <= last; ++k) {
                const bool end = k == cells;
                const double m = end ? 0.5 * hx : hx;
                mass[static_cast<std::size_t>(k - 1)] = m;
                b.diag[static_cast<std::size_t>(k - 1)] = (end ? 1.0 : 2.0) / hx + q_of(j, k * hx) * m;
            }
            centre_mass += 0.5 * hx;
            centre_stiff += 1.0 / hx + q_of(j, 0.0) * 0.5 * hx;
            b.centre_link = -1.0 / hx;
            for (int k = 1; k <= last; ++k) {
                const std::size_t i = static_cast<std::size_t>(k - 1);
                b.diag[i] /= mass[i];
                if (k < last)
                    b.off[i] = -1.0 / hx / std::sqrt(mass[i] * mass[i + 1]);
            }
            b.first_mass = mass[0];
            branches_.push_back(std::move(b));
        }
        centre_ = centre_stiff / centre_mass;
        for (auto& b : branches_)
            b.centre_link /= std::sqrt(centre_mass * b.first_mass);
    }

    /// Number of eigenvalues (of A, i.e. lambda^2) strictly below s.
    int count_below(double s) const
    {
        int negatives = 0;
        double centre = centre_ - s;
        for (const auto& b : branches_) {
            const std::size_t n = b.diag.size();
            double d = b.diag[n - 1] - s;
            d = guard(d);
            negatives += d < 0.0;
            for (std::size_t i = n - 1; i-- > 0;) {
                d = guard(b.diag[i] - s - b.off[i] * b.off[i] / d);
                negatives += d < 0.0;
            }
            centre -= b.centre_link * b.centre_link / d;
        }
        negatives += guard(centre) < 0.0;
        return negatives;
    }

    /// First `count` values of lambda = sqrt(eigenvalue), ascending.
    std::vector<double> lambdas(int count) const
    {
        std::vector<double> out;
        double hi = 1.0;
        while (count_below(hi) < count)
            hi *= 2.0;
        for (int i = 0; i < count; ++i) {
            double lo = -1e3, up = hi;
            for (int it = 0; it < 200 && up - lo > 1e-14 * std::max(1.0, std::abs(up)); ++it) {
                const double mid = 0.5 * (lo + up);
                if (count_below(mid) > i)
                    up = mid;
                else
                    lo = mid;
            }
            out.push_back(std::sqrt(std::max(0.0, 0.5 * (lo + up))));
        }
        return out;
    }

    /// Dense matrix A, for cross-checking the inertia count on small problems.
    Eigen::MatrixXd dense() const
    {
        Eigen::Index n = 1;
        for (const auto& b : branches_)
            n += static_cast<Eigen::Index>(b.diag.size());
        Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n, n);
        a(0, 0) = centre_;
        Eigen::Index at = 1;
        for (const auto& b : branches_) {
            a(0, at) = a(at, 0) = b.centre_link;
            for (std::size_t i = 0; i < b.diag.size(); ++i) {
                const Eigen::Index r = at + static_cast<Eigen::Index>(i);
                a(r, r) = b.diag[i];
                if (i + 1 < b.diag.size())
                    a(r, r + 1) = a(r + 1, r) = b.off[i];
            }
            at += static_cast<Eigen::Index>(b.diag.size());
        }
        return a;
    }

private:
    struct Branch {
        std::vector<double> diag;
        std::vector<double> off; // off[i] couples node i+1 and i+2
        double centre_link = 0.0;
        double first_mass = 0.0;
    };

    static double guard(double d) { return d == 0.0 ? -1e-300 : d; }

    std::vector<Branch> branches_;
    double centre_ = 0.0;
};

/// Closed form for a uniform branch with H = 0: R_N = e^{-2 i w tau},
/// R_D = -e^{-2 i w tau}.
inline std::complex<double> free_reflection(double omega, double tau, BoundarySetting s)
{
    const std::complex<double> r = std::polar(1.0, -2.0 * omega * tau);
    return s == BoundarySetting::Neumann ? r : -r;
}

/// Resonances of a single branch with constant potential c and Neumann end:
/// sqrt(c + ((2i - 1) pi / (2 tau))^2).
inline double constant_potential_resonance(double c, double tau, int order)
{
    const double mu = (2.0 * order - 1.0) * M_PI / (2.0 * tau);
    return std::sqrt(c + mu * mu);
}

inline double trapezoid(const Eigen::VectorXd& f, double h)
{
    return h * (f.sum() - 0.5 * (f(0) + f(f.size() - 1)));
}

class Random {
public:
    explicit Random(std::uint64_t seed) : rng_(seed) {}

    double uniform(double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng_); }
    int integer(int a, int b) { return std::uniform_int_distribution<int>(a, b)(rng_); }

    /// Smooth (H^1) potential: an offset plus four random Fourier modes,
    /// rescaled so that max |q| is `bound` times a factor in [0.3, 1].
    Eigen::VectorXd smooth_potential(Eigen::Index samples, double bound, bool zero_ends = false)
    {
        const double c0 = zero_ends ? 0.0 : uniform(-1.0, 1.0);
        double a[4], ph[4];
        for (int k = 0; k < 4; ++k) {
            a[k] = uniform(-1.0, 1.0) / (k + 1);
            ph[k] = zero_ends ? 0.0 : uniform(0.0, 2.0 * M_PI);
        }
        Eigen::VectorXd q(samples);
        for (Eigen::Index i = 0; i < samples; ++i) {
            const double s = static_cast<double>(i) / static_cast<double>(samples - 1);
            double v = c0;
            for (int k = 0; k < 4; ++k)
                v += a[k] * std::sin(M_PI * (k + 1) * s + ph[k]);
            q(i) = v;
        }
        const double m = q.cwiseAbs().maxCoeff();
        return m > 0.0 ? Eigen::VectorXd(q * (bound * uniform(0.3, 1.0) / m)) : q;
    }

    /// Traveling times in [lo, hi] whose pairwise ratios stay `gap` away
    /// from every integer.
    std::vector<double> separated_taus(int count, double lo, double hi, double gap)
    {
        for (;;) {
            std::vector<double> t;
            for (int i = 0; i < count; ++i)
                t.push_back(uniform(lo, hi));
            bool ok = true;
            for (int i = 0; i < count && ok; ++i)
                for (int j = 0; j < count && ok; ++j) {
                    if (i == j)
                        continue;
                    const double r = t[static_cast<std::size_t>(i)] / t[static_cast<std::size_t>(j)];
                    if (r >= 1.0 - gap && std::abs(r - std::round(r)) < gap)
                        ok = false;
                }
            if (ok)
                return t;
        }
    }

    std::mt19937_64& engine() { return rng_; }

private:
    std::mt19937_64 rng_;
};

} // namespace oracle
