#include "reflectkit/potential.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

namespace reflectkit {

namespace {

using cd = std::complex<double>;

// Root in [a, b] of the polynomial through (xs, ys), by bisection.
double interpolated_root(const std::vector<double>& xs, const std::vector<double>& ys, double a, double b)
{
    auto eval = [&](double t) {
        double result = 0.0;
        for (std::size_t i = 0; i < xs.size(); ++i) {
            double w = 1.0;
            for (std::size_t j = 0; j < xs.size(); ++j)
                if (j != i)
                    w *= (t - xs[j]) / (xs[i] - xs[j]);
            result += w * ys[i];
        }
        return result;
    };
    double fa = eval(a);
    for (int it = 0; it < 200 && b - a > 1e-14 * std::abs(b); ++it) {
        const double mid = 0.5 * (a + b);
        const double fm = eval(mid);
        if (fm == 0.0)
            return mid;
        if ((fm > 0.0) == (fa > 0.0)) {
            a = mid;
            fa = fm;
        } else {
            b = mid;
        }
    }
    return 0.5 * (a + b);
}

constexpr double kNodePhase = 2.5;
constexpr double kNodeStep = 1.0;

double trapezoid(const Eigen::VectorXd& f, double h)
{
    const Eigen::Index n = f.size();
    if (n < 2)
        return 0.0;
    return h * (f.sum() - 0.5 * (f(0) + f(n - 1)));
}

} // namespace

std::vector<double> detect_resonances(const ReflectionTrace& trace)
{
    validate_grid(trace.omegas);
    const Eigen::Index n = trace.size();
    std::vector<double> out;
    // theta = arg(-R) vanishes at a resonance and is smooth in between, so
    // the phase is interpolated rather than |1 + R|.
    Eigen::VectorXd theta(n);
    for (Eigen::Index k = 0; k < n; ++k)
        theta(k) = std::arg(-trace.values(k));

    // The phase of a lossless reflection decreases with frequency, so a
    // resonance is a + to - crossing; - to + is a wrap through pi. Nodes for
    // the interpolant stay on the monotone stretch around the crossing and
    // away from the wrap.
    auto usable = [&](Eigen::Index i, Eigen::Index toward) {
        return std::abs(theta(i)) < kNodePhase && std::abs(theta(i) - theta(toward)) < kNodeStep &&
               (i < toward ? theta(i) > theta(toward) : theta(i) < theta(toward));
    };
    for (Eigen::Index k = 0; k + 1 < n; ++k) {
        if (theta(k) == 0.0) {
            out.push_back(trace.omegas(k));
            continue;
        }
        if (!(theta(k) > 0.0 && theta(k + 1) < 0.0) || theta(k) >= 0.5 * M_PI || theta(k + 1) <= -0.5 * M_PI)
            continue;
        Eigen::Index lo = k, hi = k + 1;
        while (lo > 0 && k - lo < 2 && usable(lo - 1, lo))
            --lo;
        while (hi + 1 < n && hi - k < 3 && usable(hi + 1, hi))
            ++hi;
        std::vector<double> xs, ys;
        for (Eigen::Index i = lo; i <= hi; ++i) {
            xs.push_back(trace.omegas(i));
            ys.push_back(theta(i));
        }
        out.push_back(interpolated_root(xs, ys, trace.omegas(k), trace.omegas(k + 1)));
    }
    if (n > 0 && theta(n - 1) == 0.0)
        out.push_back(trace.omegas(n - 1));
    return out;
}

double free_resonance(double tau, int order, BoundarySetting setting)
{
    return setting == BoundarySetting::Neumann ? (2.0 * order - 1.0) * M_PI / (2.0 * tau)
                                               : order * M_PI / tau;
}

ResonanceTable assign_resonances(const std::vector<double>& resonances,
                                 const GeometryEstimate& geometry, BoundarySetting setting)
{
    require(!geometry.groups.empty(), ErrorCode::Parameter, "geometry has no branches");
    ResonanceTable table;
    table.setting = setting;
    double max_tau = 0.0;
    for (const auto& g : geometry.groups) {
        require(g.tau > 0.0 && g.multiplicity >= 1, ErrorCode::Parameter, "invalid geometry group");
        table.branches.push_back({g.tau, g.multiplicity, {}});
        max_tau = std::max(max_tau, g.tau);
    }
    const double max_gap = M_PI / (4.0 * max_tau);

    // (group, order) -> claimed resonances with their distance
    std::map<std::pair<std::size_t, int>, std::vector<std::pair<double, double>>> claims;
    for (double lambda : resonances) {
        double best = std::numeric_limits<double>::infinity(), second = best;
        std::pair<std::size_t, int> best_key{0, 0};
        for (std::size_t j = 0; j < table.branches.size(); ++j) {
            const double tau = table.branches[j].tau;
            // The two orders bracketing lambda are the only candidates that
            // can be nearest or runner-up within this group.
            const double spacing = M_PI / tau;
            const double offset = setting == BoundarySetting::Neumann ? 0.5 : 1.0;
            const int centre = static_cast<int>(std::floor(lambda / spacing + offset));
            for (int order = std::max(1, centre - 1); order <= centre + 1; ++order) {
                const double d = std::abs(lambda - free_resonance(tau, order, setting));
                if (d < best) {
                    second = best;
                    best = d;
                    best_key = {j, order};
                } else if (d < second) {
                    second = d;
                }
            }
        }
        if (best < max_gap && second >= 2.0 * best)
            claims[best_key].push_back({best, lambda});
        else
            table.unassigned.push_back(lambda);
    }

    for (auto& [key, list] : claims) {
        std::sort(list.begin(), list.end());
        const auto keep = static_cast<std::size_t>(table.branches[key.first].multiplicity);
        for (std::size_t i = 0; i < list.size(); ++i) {
            if (i < keep)
                table.branches[key.first].entries.push_back({key.second, list[i].second});
            else
                table.unassigned.push_back(list[i].second);
        }
    }
    for (auto& b : table.branches)
        std::sort(b.entries.begin(), b.entries.end(), [](const auto& a, const auto& c) {
            return a.order != c.order ? a.order < c.order : a.lambda < c.lambda;
        });
    std::sort(table.unassigned.begin(), table.unassigned.end());

    if (!resonances.empty() && 5 * table.unassigned.size() > resonances.size())
        throw Error(ErrorCode::GeometryMismatch,
                    std::to_string(table.unassigned.size()) + " of " + std::to_string(resonances.size()) +
                        " resonances do not fit the geometry");
    return table;
}

std::vector<IntegralEstimate> estimate_potential_integrals(const ResonanceTable& table,
                                                           std::size_t min_points)
{
    std::vector<IntegralEstimate> out;
    for (const auto& b : table.branches) {
        require(b.entries.size() >= min_points, ErrorCode::InsufficientData,
                "branch with tau = " + std::to_string(b.tau) + " has " + std::to_string(b.entries.size()) +
                    " assigned resonances, need " + std::to_string(min_points));
        // With weights mu^2 the fit of delta = a / mu reduces to the mean of mu delta.
        Eigen::VectorXd scaled(static_cast<Eigen::Index>(b.entries.size()));
        for (std::size_t i = 0; i < b.entries.size(); ++i) {
            const double mu = free_resonance(b.tau, b.entries[i].order, table.setting);
            scaled(static_cast<Eigen::Index>(i)) = mu * (b.entries[i].lambda - mu);
        }
        IntegralEstimate e;
        e.tau = b.tau;
        e.multiplicity = b.multiplicity;
        e.points = b.entries.size();
        e.shift_coefficient = scaled.mean();
        e.integral_hat = 2.0 * b.tau * e.shift_coefficient;
        e.fit_residual = std::sqrt((scaled.array() - e.shift_coefficient).square().mean());
        e.model_mismatch = e.fit_residual > std::max(0.5 * std::abs(e.shift_coefficient), 0.02);
        out.push_back(e);
    }
    return out;
}

Eigen::VectorXd characteristic_residual(const StarNetwork& network, const StarNetwork& candidate,
                                        const Eigen::VectorXd& omegas, BoundarySetting setting)
{
    const std::size_t nb = network.branches.size();
    require(candidate.branches.size() == nb, ErrorCode::Parameter,
            "networks have different branch counts");
    for (std::size_t j = 0; j < nb; ++j) {
        const auto& a = network.branches[j];
        const auto& b = candidate.branches[j];
        require(std::abs(a.tau - b.tau) <= 1e-12 * a.tau && a.samples() == b.samples(),
                ErrorCode::Parameter, "networks must share traveling times and branch grids");
    }

    Eigen::VectorXd out(omegas.size());
    std::vector<double> node_product(nb);
    std::vector<double> integral(nb);
    for (Eigen::Index k = 0; k < omegas.size(); ++k) {
        for (std::size_t j = 0; j < nb; ++j) {
            const auto& a = network.branches[j];
            const auto& b = candidate.branches[j];
            const FundamentalTrace ta = fundamental_trace(a, omegas(k), setting);
            const FundamentalTrace tb = fundamental_trace(b, omegas(k), setting);
            node_product[j] = ta.value(0) * tb.value(0);
            const Eigen::VectorXd integrand =
                ((b.q - a.q).array() * ta.value.array() * tb.value.array()).matrix();
            integral[j] = trapezoid(integrand, a.step());
        }
        double sum = 0.0;
        for (std::size_t j = 0; j < nb; ++j) {
            double term = integral[j];
            for (std::size_t m = 0; m < nb; ++m)
                if (m != j)
                    term *= node_product[m];
            sum += term;
        }
        out(k) = sum;
    }
    return out;
}

Eigen::VectorXd basis_function(const BasisSpec& spec, double tau, int index)
{
    require(spec.modes >= 1 && spec.samples_per_branch >= 4, ErrorCode::Parameter,
            "basis needs at least one mode and four samples");
    require(index >= 0 && index < spec.size(), ErrorCode::Parameter, "basis index out of range");
    const Eigen::Index n = spec.samples_per_branch;
    Eigen::VectorXd f(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double s = static_cast<double>(i) / static_cast<double>(n - 1); // x / tau
        if (spec.kind == BasisKind::Sine) {
            f(i) = std::sin(2.0 * M_PI * (index + 1) * s);
        } else {
            const bool first = index < spec.modes;
            const int k = (first ? index : index - spec.modes) + 1;
            const double local = first ? 2.0 * s : 2.0 * s - 1.0;
            f(i) = (local >= 0.0 && local <= 1.0) ? std::sin(2.0 * M_PI * k * local) : 0.0;
        }
    }
    (void)tau; // the basis is defined in x / tau
    return f;
}

Eigen::VectorXd synthesize_potential(const BasisSpec& spec, double tau,
                                     const Eigen::Ref<const Eigen::VectorXd>& coefficients)
{
    require(coefficients.size() == spec.size(), ErrorCode::Parameter,
            "coefficient count does not match the basis");
    Eigen::VectorXd q = Eigen::VectorXd::Zero(spec.samples_per_branch);
    for (int k = 0; k < spec.size(); ++k)
        if (coefficients(k) != 0.0)
            q += coefficients(k) * basis_function(spec, tau, k);
    return q;
}

std::vector<bool> first_half_freeze_mask(const BasisSpec& spec, std::size_t branch_count)
{
    require(spec.kind == BasisKind::HalfSine, ErrorCode::Parameter,
            "a first-half freeze mask needs the half-supported basis");
    std::vector<bool> mask;
    for (std::size_t j = 0; j < branch_count; ++j)
        for (int k = 0; k < spec.size(); ++k)
            mask.push_back(k < spec.modes);
    return mask;
}

bool PotentialEstimate::has_flag(std::string_view flag) const
{
    return std::find(flags.begin(), flags.end(), flag) != flags.end();
}

FitNonConvergence::FitNonConvergence(const std::string& message, PotentialEstimate best)
    : Error(ErrorCode::NonConvergence, message), best_(std::move(best))
{
}

namespace {

class TwinModel {
public:
    TwinModel(std::span<const ReflectionTrace> traces, std::span<const double> taus,
              const BasisSpec& basis)
        : traces_(traces), taus_(taus.begin(), taus.end()), basis_(basis)
    {
        for (double tau : taus_)
            for (int k = 0; k < basis.size(); ++k)
                columns_.push_back(basis_function(basis, tau, k));
    }

    Eigen::Index coefficient_count() const { return static_cast<Eigen::Index>(columns_.size()); }

    std::vector<BranchSpec> branches(const Eigen::VectorXd& c) const
    {
        std::vector<BranchSpec> out;
        const int m = basis_.size();
        for (std::size_t j = 0; j < taus_.size(); ++j) {
            Eigen::VectorXd q = Eigen::VectorXd::Zero(basis_.samples_per_branch);
            for (int k = 0; k < m; ++k)
                q += c(static_cast<Eigen::Index>(j) * m + k) * columns_[j * m + k];
            out.push_back(make_branch(taus_[j], std::move(q)));
        }
        return out;
    }

    // Stacked [Re; Im] of R_model - R_meas over all traces.
    Eigen::VectorXd residual(const Eigen::VectorXd& c) const
    {
        const StarNetwork net = make_network(branches(c), 1.0, traces_[0].h_coupling);
        const Eigen::Index per = traces_[0].size();
        Eigen::VectorXd r(2 * per * static_cast<Eigen::Index>(traces_.size()));
        Eigen::Index row = 0;
        for (const auto& t : traces_) {
            for (Eigen::Index k = 0; k < per; ++k) {
                const cd d = reflection_coefficient(net, t.omegas(k), t.setting) - t.values(k);
                r(row++) = d.real();
                r(row++) = d.imag();
            }
        }
        return r;
    }

    std::size_t sample_count() const { return traces_.size() * static_cast<std::size_t>(traces_[0].size()); }

private:
    std::span<const ReflectionTrace> traces_;
    std::vector<double> taus_;
    BasisSpec basis_;
    std::vector<Eigen::VectorXd> columns_;
};

} // namespace

PotentialEstimate fit_potentials(std::span<const ReflectionTrace> traces,
                                 std::span<const double> taus, const BasisSpec& basis,
                                 const std::vector<bool>& freeze_mask, const FitOptions& options)
{
    require(!traces.empty() && traces.size() <= 2, ErrorCode::Parameter, "fit needs one or two traces");
    require(!taus.empty(), ErrorCode::Parameter, "fit needs at least one branch");
    for (const auto& t : traces)
        validate_grid(t.omegas);
    if (traces.size() == 2) {
        require(traces[0].setting != traces[1].setting, ErrorCode::Parameter,
                "two traces must use different terminal settings");
        require(traces[0].size() == traces[1].size() &&
                    (traces[0].omegas - traces[1].omegas).cwiseAbs().maxCoeff() <=
                        1e-12 * traces[0].omegas.cwiseAbs().maxCoeff(),
                ErrorCode::Parameter, "the two traces must share one frequency grid");
        require(traces[0].h_coupling == traces[1].h_coupling, ErrorCode::Parameter,
                "the two traces disagree on the coupling constant");
    }

    const TwinModel model(traces, taus, basis);
    const Eigen::Index nc = model.coefficient_count();
    std::vector<bool> frozen = freeze_mask.empty() ? std::vector<bool>(static_cast<std::size_t>(nc), false)
                                                   : freeze_mask;
    require(static_cast<Eigen::Index>(frozen.size()) == nc, ErrorCode::Parameter,
            "freeze mask has " + std::to_string(frozen.size()) + " entries, basis has " + std::to_string(nc));
    require(options.initial.size() == 0 || options.initial.size() == nc, ErrorCode::Parameter,
            "initial coefficients do not match the basis");

    std::vector<Eigen::Index> free;
    for (Eigen::Index i = 0; i < nc; ++i)
        if (!frozen[static_cast<std::size_t>(i)])
            free.push_back(i);
    const auto nf = static_cast<Eigen::Index>(free.size());

    PotentialEstimate est;
    if (traces.size() == 1 && std::none_of(frozen.begin(), frozen.end(), [](bool b) { return b; }))
        est.flags.emplace_back("single_trace_unconstrained");

    Eigen::VectorXd c = options.initial.size() == nc ? options.initial : Eigen::VectorXd::Zero(nc);
    Eigen::VectorXd r = model.residual(c);
    double objective = r.squaredNorm();
    est.objective_history.push_back(objective);
    const double samples = static_cast<double>(model.sample_count());
    auto misfit_of = [&](double obj) { return std::sqrt(obj / samples); };

    double damping = 1e-3;
    Eigen::MatrixXd jac(r.size(), nf);
    int iter = 0;
    bool converged = nf == 0;
    for (; iter < options.max_iterations && !converged; ++iter) {
        for (Eigen::Index f = 0; f < nf; ++f) {
            Eigen::VectorXd cp = c;
            const double h = options.jacobian_step * std::max(1.0, std::abs(c(free[f])));
            cp(free[f]) += h;
            jac.col(f) = (model.residual(cp) - r) / h;
        }
        const Eigen::MatrixXd jtj = jac.transpose() * jac;
        const Eigen::VectorXd grad = jac.transpose() * r;
        Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(jac);

        bool accepted = false;
        Eigen::VectorXd step;
        if (qr.rank() == nf) {
            for (int attempt = 0; attempt < 30 && !accepted; ++attempt) {
                Eigen::MatrixXd lhs = jtj;
                lhs.diagonal() += damping * jtj.diagonal().cwiseMax(1e-12);
                step = lhs.ldlt().solve(-grad);
                Eigen::VectorXd trial = c;
                for (Eigen::Index f = 0; f < nf; ++f)
                    trial(free[f]) += step(f);
                const Eigen::VectorXd rt = model.residual(trial);
                const double obj = rt.squaredNorm();
                if (obj < objective) {
                    c = trial;
                    r = rt;
                    objective = obj;
                    damping = std::max(damping / 3.0, 1e-12);
                    accepted = true;
                } else {
                    damping *= 4.0;
                }
            }
        } else {
            // Coordinate search when the Jacobian loses rank.
            est.flags.emplace_back("rank_deficient_jacobian");
            step = Eigen::VectorXd::Zero(nf);
            double s = 1e-2;
            for (int shrink = 0; shrink < 20 && !accepted; ++shrink, s *= 0.25) {
                for (Eigen::Index f = 0; f < nf; ++f) {
                    for (double sign : {1.0, -1.0}) {
                        Eigen::VectorXd trial = c;
                        trial(free[f]) += sign * s;
                        const Eigen::VectorXd rt = model.residual(trial);
                        const double obj = rt.squaredNorm();
                        if (obj < objective) {
                            c = trial;
                            r = rt;
                            objective = obj;
                            step(f) += sign * s;
                            accepted = true;
                        }
                    }
                }
            }
        }
        if (!accepted)
            break;
        est.objective_history.push_back(objective);
        if (step.norm() < options.step_tolerance)
            converged = true;
    }

    est.iterations = iter;
    est.misfit = misfit_of(objective);

    // Standard errors from the last Jacobian at the final iterate.
    Eigen::VectorXd se = Eigen::VectorXd::Zero(nc);
    if (nf > 0) {
        for (Eigen::Index f = 0; f < nf; ++f) {
            Eigen::VectorXd cp = c;
            const double h = options.jacobian_step * std::max(1.0, std::abs(c(free[f])));
            cp(free[f]) += h;
            jac.col(f) = (model.residual(cp) - r) / h;
        }
        const double dof = std::max<double>(1.0, static_cast<double>(r.size() - nf));
        Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(jac);
        if (qr.rank() == nf) {
            const Eigen::MatrixXd cov = (jac.transpose() * jac).inverse() * (objective / dof);
            for (Eigen::Index f = 0; f < nf; ++f)
                se(free[f]) = std::sqrt(std::max(0.0, cov(f, f)));
        } else {
            for (Eigen::Index f = 0; f < nf; ++f)
                se(free[f]) = std::numeric_limits<double>::infinity();
        }
    }

    const int m = basis.size();
    double q_max = 0.0;
    for (std::size_t j = 0; j < taus.size(); ++j) {
        BranchPotential b;
        b.tau = taus[j];
        b.coefficients = c.segment(static_cast<Eigen::Index>(j) * m, m);
        b.std_errors = se.segment(static_cast<Eigen::Index>(j) * m, m);
        b.q_samples = synthesize_potential(basis, b.tau, b.coefficients);
        b.integral_hat = trapezoid(b.q_samples, b.tau / static_cast<double>(b.q_samples.size() - 1));
        q_max = std::max(q_max, b.q_samples.cwiseAbs().maxCoeff());
        est.branches.push_back(std::move(b));
    }
    if (q_max > 0.2)
        est.flags.emplace_back("potential_exceeds_small_regime");

    if (est.misfit > options.stagnation_misfit)
        throw FitNonConvergence("misfit stalled at " + std::to_string(est.misfit) + " after " +
                                    std::to_string(iter) + " iterations",
                                std::move(est));
    return est;
}

double relative_l2_error(const std::vector<Eigen::VectorXd>& estimate,
                         const std::vector<Eigen::VectorXd>& truth, std::span<const double> taus)
{
    require(estimate.size() == truth.size() && truth.size() == taus.size(), ErrorCode::Parameter,
            "branch counts differ");
    double num = 0.0, den = 0.0;
    for (std::size_t j = 0; j < truth.size(); ++j) {
        require(estimate[j].size() == truth[j].size() && truth[j].size() >= 2, ErrorCode::Parameter,
                "sample counts differ");
        const double h = taus[j] / static_cast<double>(truth[j].size() - 1);
        num += trapezoid((estimate[j] - truth[j]).array().square().matrix(), h);
        den += trapezoid(truth[j].array().square().matrix(), h);
    }
    require(den > 0.0, ErrorCode::Parameter, "reference potential is identically zero");
    return std::sqrt(num / den);
}

} // namespace reflectkit
