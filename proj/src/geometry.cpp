#include "reflectkit/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "reflectkit/errors.hpp"

namespace reflectkit {

namespace {

using cd = std::complex<double>;

double median_abs(const Eigen::VectorXd& v, const std::vector<bool>& mask)
{
    std::vector<double> a;
    a.reserve(static_cast<std::size_t>(v.size()));
    for (Eigen::Index k = 0; k < v.size(); ++k)
        if (!mask[static_cast<std::size_t>(k)])
            a.push_back(std::abs(v(k)));
    if (a.empty())
        return 0.0;
    auto mid = a.begin() + static_cast<std::ptrdiff_t>(a.size() / 2);
    std::nth_element(a.begin(), mid, a.end());
    return *mid;
}

double lagrange(const std::vector<double>& xs, const std::vector<double>& ys, double t)
{
    double result = 0.0;
    for (std::size_t a = 0; a < xs.size(); ++a) {
        double w = 1.0;
        for (std::size_t b = 0; b < xs.size(); ++b)
            if (b != a)
                w *= (t - xs[b]) / (xs[a] - xs[b]);
        result += w * ys[a];
    }
    return result;
}

// Up to `per_side` unmasked sample indices on each side of the interval
// (left, right), searching at most `reach` indices away.
std::vector<Eigen::Index> neighbours(const std::vector<bool>& mask, Eigen::Index left,
                                     Eigen::Index right, int per_side, int reach)
{
    std::vector<Eigen::Index> out;
    const auto n = static_cast<Eigen::Index>(mask.size());
    int found = 0;
    for (Eigen::Index k = left; k >= 0 && k > left - reach && found < per_side; --k)
        if (!mask[static_cast<std::size_t>(k)]) {
            out.push_back(k);
            ++found;
        }
    std::reverse(out.begin(), out.end());
    found = 0;
    for (Eigen::Index k = right; k < n && k < right + reach && found < per_side; ++k)
        if (!mask[static_cast<std::size_t>(k)]) {
            out.push_back(k);
            ++found;
        }
    return out;
}

struct Pole {
    double omega;
    Eigen::Index left;  // last unmasked sample before the pole
    Eigen::Index right; // first unmasked sample after the pole
};

// Sign flip from + to - with a large jump between neighbouring unmasked
// samples, refined by bisection on a quintic interpolant of 1/f.
std::vector<Pole> detect_poles(const Eigen::VectorXd& w, const Eigen::VectorXd& r,
                               const std::vector<bool>& mask, double jump_factor, double floor)
{
    const double threshold = std::max(jump_factor * median_abs(r, mask), floor);
    std::vector<Pole> poles;
    Eigen::Index prev = -1;
    for (Eigen::Index k = 0; k < w.size(); ++k) {
        if (mask[static_cast<std::size_t>(k)])
            continue;
        if (prev >= 0 && k - prev <= 3 && r(prev) > 0.0 && r(k) < 0.0 && r(prev) - r(k) > threshold) {
            const auto idx = neighbours(mask, prev, k, 3, 5);
            std::vector<double> xs, ys;
            for (auto i : idx) {
                xs.push_back(w(i));
                ys.push_back(1.0 / r(i));
            }
            double a = w(prev), b = w(k);
            double fa = 1.0 / r(prev);
            for (int it = 0; it < 100 && b - a > 1e-13 * std::abs(b); ++it) {
                const double mid = 0.5 * (a + b);
                const double fm = lagrange(xs, ys, mid);
                if ((fm > 0.0) == (fa > 0.0)) {
                    a = mid;
                    fa = fm;
                } else {
                    b = mid;
                }
            }
            poles.push_back({0.5 * (a + b), prev, k});
        }
        prev = k;
    }
    return poles;
}

struct TrainFit {
    double c = 0.0; // pole spacing / 2, i.e. pi / (2 tau)
    double b = 0.0; // O(1/w) shift coefficient
    std::vector<std::pair<int, std::size_t>> matched; // (order, pole index)
};

void refit(TrainFit& fit, const std::vector<Pole>& poles)
{
    const std::size_t m = fit.matched.size();
    if (m < 3) {
        double num = 0.0, den = 0.0;
        for (auto [order, idx] : fit.matched) {
            num += order * poles[idx].omega;
            den += static_cast<double>(order) * order;
        }
        fit.c = num / den;
        fit.b = 0.0;
        return;
    }
    // p = c o + b / o, linear least squares in (c, b).
    Eigen::MatrixXd a(m, 2);
    Eigen::VectorXd y(m);
    for (std::size_t i = 0; i < m; ++i) {
        const double o = fit.matched[i].first;
        a(static_cast<Eigen::Index>(i), 0) = o;
        a(static_cast<Eigen::Index>(i), 1) = 1.0 / o;
        y(static_cast<Eigen::Index>(i)) = poles[fit.matched[i].second].omega;
    }
    const Eigen::Vector2d sol = a.colPivHouseholderQr().solve(y);
    fit.c = sol(0);
    fit.b = sol(1);
}

double predict(const TrainFit& fit, int order)
{
    return fit.c * order + fit.b / order;
}

// A pole sitting next to a pole of another train is located poorly and
// drags the fit; drop matches far off the train and refit.
void trim_outliers(TrainFit& fit, const std::vector<Pole>& poles, double scale)
{
    for (int pass = 0; pass < 4 && fit.matched.size() > 3; ++pass) {
        std::vector<double> dev;
        for (auto [order, idx] : fit.matched)
            dev.push_back(std::abs(poles[idx].omega - predict(fit, order)));
        std::vector<double> sorted = dev;
        auto mid = sorted.begin() + static_cast<std::ptrdiff_t>(sorted.size() / 2);
        std::nth_element(sorted.begin(), mid, sorted.end());
        const double cut = std::max(5.0 * *mid, 1e-12 * scale);
        decltype(fit.matched) kept;
        for (std::size_t m = 0; m < fit.matched.size(); ++m)
            if (dev[m] <= cut)
                kept.push_back(fit.matched[m]);
        if (kept.size() == fit.matched.size() || kept.size() < 3)
            break;
        fit.matched = std::move(kept);
        refit(fit, poles);
    }
}

double pole_term(BoundarySetting setting, double omega, double tau)
{
    return setting == BoundarySetting::Neumann ? std::tan(omega * tau) : -1.0 / std::tan(omega * tau);
}

double pole_distance(BoundarySetting setting, double omega, double tau)
{
    return setting == BoundarySetting::Neumann ? std::abs(std::cos(omega * tau))
                                               : std::abs(std::sin(omega * tau));
}

} // namespace

bool GeometryEstimate::has_flag(std::string_view flag) const
{
    return std::find(flags.begin(), flags.end(), flag) != flags.end();
}

int GeometryEstimate::branch_count() const
{
    int n = 0;
    for (const auto& g : groups)
        n += g.multiplicity;
    return n;
}

TanSumSamples tan_sum_from_trace(const ReflectionTrace& trace, double h_coupling)
{
    validate_grid(trace.omegas);
    TanSumSamples s;
    s.omegas = trace.omegas;
    s.f_values = Eigen::VectorXd::Zero(trace.size());
    s.mask.assign(static_cast<std::size_t>(trace.size()), false);
    s.setting = trace.setting;
    std::size_t masked = 0;
    for (Eigen::Index k = 0; k < trace.size(); ++k) {
        const cd r = trace.values(k);
        const double w = trace.omegas(k);
        if (std::abs(1.0 + r) < 1e-6) {
            s.mask[static_cast<std::size_t>(k)] = true;
            ++masked;
            continue;
        }
        const cd f = (h_coupling - cd(0.0, w) * (1.0 - r) / (1.0 + r)) / w;
        s.imag_residue = std::max(s.imag_residue, std::abs(f.imag()) / std::max(1.0, std::abs(f)));
        s.f_values(k) = f.real();
    }
    require(2 * masked <= static_cast<std::size_t>(trace.size()), ErrorCode::TraceTooCoarse,
            "more than half of the trace samples sit on resonances");
    return s;
}

GeometryEstimate peel_geometry(const TanSumSamples& samples, double tolerance,
                               const PeelOptions& options)
{
    require(tolerance > 0.0, ErrorCode::Parameter, "tolerance must be positive");
    const Eigen::Index n = samples.omegas.size();
    require(n >= 8 && samples.f_values.size() == n && samples.mask.size() == static_cast<std::size_t>(n),
            ErrorCode::Parameter, "tan-sum samples are malformed");

    const Eigen::VectorXd& w = samples.omegas;
    const double lo = w(0), hi = w(n - 1);
    const double step = (hi - lo) / static_cast<double>(n - 1);
    const double max_tau = options.max_tau > 0.0 ? options.max_tau : M_PI / (128.0 * step);
    const double floor = 1.0 / (max_tau * step);
    const double edge = 2.0 * step;
    const int parity = samples.setting == BoundarySetting::Neumann ? 1 : 0;

    GeometryEstimate est;
    est.window = {lo, hi};
    Eigen::VectorXd r = samples.f_values;
    std::vector<bool> mask = samples.mask;

    // A predicted pole next to a masked stretch (a resonance sample or a
    // peeled pole of another train) may be hidden, so it is not a miss.
    auto masked_near = [&](double omega) {
        const auto k = static_cast<Eigen::Index>(std::lround((omega - lo) / step));
        for (Eigen::Index i = k - 3; i <= k + 3; ++i)
            if (i < 0 || i >= n || mask[static_cast<std::size_t>(i)])
                return true;
        return false;
    };

    // Multiplicity estimate at one pole: limit of sin(tau (p - w)) f(w) as
    // w -> p, from a local interpolant and one Richardson sweep.
    auto local_limit = [&](const Pole& pole, double tau, double* out) {
        const auto idx = neighbours(mask, pole.left, pole.right, 2, 4);
        int left = 0, right = 0;
        for (auto i : idx)
            (w(i) < pole.omega ? left : right)++;
        if (left < 2 || right < 2)
            return false;
        std::vector<double> xs, ys;
        for (auto i : idx) {
            xs.push_back(w(i));
            ys.push_back(std::sin(tau * (pole.omega - w(i))) * r(i));
        }
        const double delta = std::min(1e-3 * pole.omega, step / 8.0);
        auto sym = [&](double d) {
            return 0.5 * (lagrange(xs, ys, pole.omega + d) + lagrange(xs, ys, pole.omega - d));
        };
        const double a1 = sym(delta), a2 = sym(2.0 * delta), a4 = sym(4.0 * delta);
        const double b1 = (4.0 * a1 - a2) / 3.0, b2 = (4.0 * a2 - a4) / 3.0;
        *out = (16.0 * b1 - b2) / 15.0;
        return true;
    };

    std::vector<double> group_taus;
    for (int round = 0; round < options.max_groups; ++round) {
        const auto poles = detect_poles(w, r, mask, options.pole_jump_factor, floor);
        if (poles.empty())
            break;

        TrainFit best;
        bool accepted = false;
        for (std::size_t first = 0; first < poles.size() && !accepted; ++first) {
            const double w1 = poles[first].omega;
            // Slack of one order: potentials shift poles by O(1/w).
            int top = static_cast<int>(std::floor(2.0 * max_tau * w1 / M_PI)) + 1;
            if ((top % 2) != parity)
                --top;
            for (int order = top; order >= 1 && !accepted; order -= 2) {
                TrainFit fit;
                fit.matched.push_back({order, first});
                refit(fit, poles);
                const double tol = std::max(3.0 * step, 0.1 * fit.c);
                int hits = 1, misses = 0;
                for (int o = order - 2; o >= 1; o -= 2) {
                    const double p = predict(fit, o);
                    if (p < lo + edge)
                        break;
                    if (!masked_near(p))
                        ++misses;
                }
                for (int o = order + 2;; o += 2) {
                    const double p = predict(fit, o);
                    if (p > hi - edge)
                        break;
                    std::size_t nearest = poles.size();
                    double dist = std::numeric_limits<double>::infinity();
                    for (std::size_t i = first; i < poles.size(); ++i) {
                        const double d = std::abs(poles[i].omega - p);
                        if (d < dist) {
                            dist = d;
                            nearest = i;
                        }
                        if (poles[i].omega > p + tol)
                            break;
                    }
                    if (dist <= tol) {
                        ++hits;
                        fit.matched.push_back({o, nearest});
                        refit(fit, poles);
                    } else if (!masked_near(p)) {
                        ++misses;
                    }
                    if (misses > 3 && misses > (1.0 - options.match_fraction) * (hits + misses))
                        break;
                }
                // A correction larger than half the pole spacing means the
                // order assignment is off and b is absorbing it.
                const bool plausible = std::abs(fit.b) < 0.5 * fit.c * order;
                if (plausible && static_cast<double>(hits) >= options.match_fraction * (hits + misses)) {
                    best = std::move(fit);
                    accepted = true;
                }
            }
            if (!accepted) {
                // The smallest pole is not explained by any train; drop it.
                est.flags.emplace_back("unexplained_pole");
                for (Eigen::Index k = poles[first].left; k <= poles[first].right; ++k)
                    mask[static_cast<std::size_t>(k)] = true;
            }
        }
        if (!accepted)
            break;

        trim_outliers(best, poles, hi);

        const double tau = M_PI / (2.0 * best.c);
        std::vector<double> limits;
        for (std::size_t m = 0; m < best.matched.size() && limits.size() < 7; ++m) {
            double value = 0.0;
            if (local_limit(poles[best.matched[m].second], tau, &value))
                limits.push_back(value);
        }
        if (limits.empty())
            throw Error(ErrorCode::AmbiguousMultiplicity,
                        "no clean pole available to estimate the multiplicity at tau = " +
                            std::to_string(tau));
        auto mid = limits.begin() + static_cast<std::ptrdiff_t>(limits.size() / 2);
        std::nth_element(limits.begin(), mid, limits.end());
        const double limit = *mid;
        const long mult = std::lround(limit);
        if (mult < 1 || std::abs(limit - static_cast<double>(mult)) > 0.25)
            throw Error(ErrorCode::AmbiguousMultiplicity,
                        "multiplicity limit " + std::to_string(limit) + " at tau = " +
                            std::to_string(tau) + " is not close to a positive integer");

        for (Eigen::Index k = 0; k < n; ++k) {
            r(k) -= static_cast<double>(mult) * pole_term(samples.setting, w(k), tau);
            if (pole_distance(samples.setting, w(k), tau) < options.detection_guard)
                mask[static_cast<std::size_t>(k)] = true;
        }
        est.groups.push_back({tau, static_cast<int>(mult)});
        group_taus.push_back(tau);
    }

    // Backfitting: each train is fitted again on the residual with only its
    // own poles restored and the other trains masked, so neighbouring poles
    // of other trains no longer disturb it.
    for (int pass = 0; pass < 2 && est.groups.size() > 1; ++pass) {
        for (std::size_t g = 0; g < est.groups.size(); ++g) {
            const double old_tau = est.groups[g].tau;
            const double mult = est.groups[g].multiplicity;
            Eigen::VectorXd rg = r;
            std::vector<bool> mg = samples.mask;
            for (Eigen::Index k = 0; k < n; ++k) {
                rg(k) += mult * pole_term(samples.setting, w(k), old_tau);
                for (std::size_t o = 0; o < est.groups.size(); ++o)
                    if (o != g && pole_distance(samples.setting, w(k), est.groups[o].tau) < options.detection_guard)
                        mg[static_cast<std::size_t>(k)] = true;
            }
            const auto poles = detect_poles(w, rg, mg, options.pole_jump_factor, floor);
            TrainFit fit;
            const double c = M_PI / (2.0 * old_tau);
            for (std::size_t i = 0; i < poles.size(); ++i) {
                const long order = std::lround(poles[i].omega / c);
                if (order >= 1 && order % 2 == parity && std::abs(poles[i].omega - c * static_cast<double>(order)) < 0.1 * c)
                    fit.matched.push_back({static_cast<int>(order), i});
            }
            if (fit.matched.size() < 3)
                continue;
            refit(fit, poles);
            trim_outliers(fit, poles, hi);
            const double tau = M_PI / (2.0 * fit.c);
            for (Eigen::Index k = 0; k < n; ++k)
                r(k) = rg(k) - mult * pole_term(samples.setting, w(k), tau);
            est.groups[g].tau = tau;
            group_taus[g] = tau;
        }
    }

    double sup = 0.0;
    for (Eigen::Index k = 0; k < n; ++k) {
        if (samples.mask[static_cast<std::size_t>(k)])
            continue;
        bool guarded = false;
        for (double tau : group_taus)
            guarded = guarded || pole_distance(samples.setting, w(k), tau) < options.residual_guard;
        if (!guarded)
            sup = std::max(sup, std::abs(r(k)));
    }
    est.residual_sup = sup;

    // Groups that resolve to the same length are merged.
    std::sort(est.groups.begin(), est.groups.end(),
              [](const GeometryGroup& a, const GeometryGroup& b) { return a.tau > b.tau; });
    std::vector<GeometryGroup> merged;
    for (const auto& g : est.groups) {
        if (!merged.empty() && std::abs(merged.back().tau - g.tau) < 1e-4 * g.tau) {
            merged.back().multiplicity += g.multiplicity;
            est.flags.emplace_back("merged_groups");
        } else {
            merged.push_back(g);
        }
    }
    est.groups = std::move(merged);
    if (b1_violated(est.groups))
        est.flags.emplace_back("b1_violated");

    if (sup >= tolerance)
        throw Error(ErrorCode::WindowTooSmall,
                    "peeled residual " + std::to_string(sup) + " stays above tolerance " +
                        std::to_string(tolerance) + " with no further pole in the window");
    return est;
}

GeometryEstimate identify_geometry(const ReflectionTrace& trace, double h_coupling,
                                   double omega_min, double omega_max, double tolerance,
                                   const GeometryOptions& options)
{
    require(omega_min > 0.0 && omega_max > omega_min, ErrorCode::Parameter,
            "window must satisfy 0 < omega_min < omega_max");
    std::vector<Eigen::Index> keep;
    for (Eigen::Index k = 0; k < trace.size(); ++k)
        if (trace.omegas(k) >= omega_min && trace.omegas(k) <= omega_max)
            keep.push_back(k);
    require(keep.size() >= 8, ErrorCode::TraceTooCoarse, "window holds fewer than 8 samples");

    ReflectionTrace windowed;
    windowed.setting = trace.setting;
    windowed.h_coupling = trace.h_coupling;
    windowed.omegas.resize(static_cast<Eigen::Index>(keep.size()));
    windowed.values.resize(static_cast<Eigen::Index>(keep.size()));
    for (std::size_t i = 0; i < keep.size(); ++i) {
        windowed.omegas(static_cast<Eigen::Index>(i)) = trace.omegas(keep[i]);
        windowed.values(static_cast<Eigen::Index>(i)) = trace.values(keep[i]);
    }

    const TanSumSamples samples = tan_sum_from_trace(windowed, h_coupling);
    const double loosened = tolerance + options.remainder_constant / windowed.omegas(0);
    GeometryEstimate est = peel_geometry(samples, loosened, options.peel);
    est.window = {omega_min, omega_max};
    return est;
}

bool b1_violated(const std::vector<GeometryGroup>& groups, double distance)
{
    for (std::size_t a = 0; a < groups.size(); ++a) {
        if (groups[a].multiplicity > 1)
            return true;
        for (std::size_t b = 0; b < groups.size(); ++b) {
            if (a == b)
                continue;
            const double ratio = groups[a].tau / groups[b].tau;
            if (ratio >= 1.0 - distance && std::abs(ratio - std::round(ratio)) < distance)
                return true;
        }
    }
    return false;
}

std::vector<std::pair<long long, long long>> continued_fraction_convergents(double x, int count)
{
    std::vector<std::pair<long long, long long>> out;
    long long p_prev = 1, q_prev = 0, p = static_cast<long long>(std::floor(x)), q = 1;
    double rem = x - std::floor(x);
    out.emplace_back(p, q);
    for (int i = 1; i < count && rem > 1e-12; ++i) {
        const double inv = 1.0 / rem;
        const auto a = static_cast<long long>(std::floor(inv));
        rem = inv - static_cast<double>(a);
        const long long p_next = a * p + p_prev, q_next = a * q + q_prev;
        p_prev = p;
        q_prev = q;
        p = p_next;
        q = q_next;
        out.emplace_back(p, q);
    }
    return out;
}

} // namespace reflectkit
