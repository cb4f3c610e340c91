#include "reflectkit/cli.hpp"

#include <chrono>
#include <cstdio>
#include <iostream>
#include <set>

#include <CLI11.hpp>

#include "reflectkit/trace_io.hpp"

#ifndef REFLECTKIT_VERSION
#define REFLECTKIT_VERSION "0.0.0"
#endif

namespace reflectkit::cli {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

[[noreturn]] void bad_field(const std::string& field, const std::string& what)
{
    throw Error(ErrorCode::Usage, "config field '" + field + "': " + what);
}

double number_at(const json& obj, const std::string& key, const std::string& field)
{
    const auto it = obj.find(key);
    if (it == obj.end())
        bad_field(field, "missing");
    if (!it->is_number())
        bad_field(field, "must be a number");
    return it->get<double>();
}

double number_or(const json& obj, const std::string& key, double fallback, const std::string& field)
{
    return obj.contains(key) ? number_at(obj, key, field) : fallback;
}

Eigen::VectorXd vector_at(const json& obj, const std::string& key, const std::string& field)
{
    const auto it = obj.find(key);
    if (it == obj.end())
        bad_field(field, "missing");
    if (!it->is_array())
        bad_field(field, "must be an array of numbers");
    Eigen::VectorXd v(static_cast<Eigen::Index>(it->size()));
    for (std::size_t i = 0; i < it->size(); ++i) {
        if (!(*it)[i].is_number())
            bad_field(field, "must be an array of numbers");
        v(static_cast<Eigen::Index>(i)) = (*it)[i].get<double>();
    }
    return v;
}

const json& object_at(const json& obj, const std::string& key, const std::string& field)
{
    const auto it = obj.find(key);
    if (it == obj.end() || !it->is_object())
        bad_field(field, "must be an object");
    return *it;
}

BoundarySetting setting_from(const json& value, const std::string& field)
{
    if (!value.is_string())
        bad_field(field, "must be \"neumann\" or \"dirichlet\"");
    const std::string s = value.get<std::string>();
    if (s == "neumann")
        return BoundarySetting::Neumann;
    if (s == "dirichlet")
        return BoundarySetting::Dirichlet;
    bad_field(field, "must be \"neumann\" or \"dirichlet\", got \"" + s + "\"");
}

json read_json(const fs::path& path)
{
    const std::string text = read_file(path);
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw Error(ErrorCode::Usage, path.string() + ": invalid JSON: " + e.what());
    }
}

BranchSpec parse_branch(const json& b, const std::string& field, double zc0)
{
    if (!b.is_object())
        bad_field(field, "must be an object");
    try {
        if (b.contains("L_samples")) {
            const Eigen::VectorXd l = vector_at(b, "L_samples", field + ".L_samples");
            const Eigen::VectorXd c = vector_at(b, "C_samples", field + ".C_samples");
            const double z_max = number_at(b, "z_max", field + ".z_max");
            LineProfile p;
            p.z = Eigen::VectorXd::LinSpaced(l.size(), 0.0, z_max);
            p.inductance = l;
            p.capacitance = c;
            const double resample = number_or(b, "resample_count", 201, field + ".resample_count");
            return liouville_transform(p, static_cast<int>(resample));
        }
        const double tau = number_at(b, "tau", field + ".tau");
        Eigen::VectorXd q;
        if (b.contains("q_samples")) {
            q = vector_at(b, "q_samples", field + ".q_samples");
        } else {
            const double level = number_or(b, "q_constant", 0.0, field + ".q_constant");
            const double count = number_or(b, "sample_count", 101, field + ".sample_count");
            if (count < 4 || count != std::floor(count))
                bad_field(field + ".sample_count", "must be an integer >= 4");
            q = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(count), level);
        }
        return make_branch(tau, std::move(q), zc0);
    } catch (const Error& e) {
        if (e.code() == ErrorCode::Usage)
            throw;
        throw Error(ErrorCode::Usage, "config field '" + field + "': " + e.what());
    }
}

StarNetwork parse_network(const json& net)
{
    const auto it = net.find("branches");
    if (it == net.end() || !it->is_array() || it->empty())
        bad_field("network.branches", "must be a non-empty array");
    std::optional<double> zc0;
    if (net.contains("zc0"))
        zc0 = number_at(net, "zc0", "network.zc0");
    std::vector<BranchSpec> branches;
    for (std::size_t j = 0; j < it->size(); ++j) {
        const std::string field = "network.branches[" + std::to_string(j) + "]";
        BranchSpec b = parse_branch((*it)[j], field, zc0.value_or(1.0));
        if (!zc0)
            zc0 = b.zc_at_node;
        branches.push_back(std::move(b));
    }
    std::optional<double> h;
    if (net.contains("H"))
        h = number_at(net, "H", "network.H");
    try {
        return make_network(std::move(branches), *zc0, h);
    } catch (const Error& e) {
        throw Error(ErrorCode::Usage, std::string("config field 'network': ") + e.what());
    }
}

std::vector<GeometryGroup> groups_of(const StarNetwork& net)
{
    std::vector<GeometryGroup> groups;
    for (const auto& b : net.branches) {
        auto it = std::find_if(groups.begin(), groups.end(),
                               [&](const GeometryGroup& g) { return std::abs(g.tau - b.tau) <= 1e-12 * b.tau; });
        if (it == groups.end())
            groups.push_back({b.tau, 1});
        else
            ++it->multiplicity;
    }
    std::sort(groups.begin(), groups.end(), [](const auto& a, const auto& b) { return a.tau > b.tau; });
    return groups;
}

} // namespace

ExperimentConfig parse_config(const json& input, const fs::path& base_dir)
{
    if (!input.is_object())
        throw Error(ErrorCode::Usage, "config must be a JSON object");
    const json& doc = input.contains("command") && input.contains("config") ? input.at("config") : input;
    if (!doc.is_object())
        throw Error(ErrorCode::Usage, "config must be a JSON object");

    ExperimentConfig cfg;
    cfg.echo = doc;

    if (doc.contains("network")) {
        json net = doc.at("network");
        if (net.is_string()) {
            fs::path p = net.get<std::string>();
            if (p.is_relative())
                p = base_dir / p;
            net = read_json(p);
            cfg.echo["network"] = net;
        }
        if (!net.is_object())
            bad_field("network", "must be an object or a file path");
        cfg.network = parse_network(net);
        if (net.contains("boundary"))
            cfg.settings = {setting_from(net.at("boundary"), "network.boundary")};
    }

    if (doc.contains("settings")) {
        const json& s = doc.at("settings");
        if (!s.is_array() || s.empty())
            bad_field("settings", "must be a non-empty array");
        cfg.settings.clear();
        for (std::size_t i = 0; i < s.size(); ++i) {
            const BoundarySetting b = setting_from(s[i], "settings[" + std::to_string(i) + "]");
            if (std::find(cfg.settings.begin(), cfg.settings.end(), b) != cfg.settings.end())
                bad_field("settings", "lists a setting twice");
            cfg.settings.push_back(b);
        }
    }

    if (doc.contains("grid")) {
        const json& g = object_at(doc, "grid", "grid");
        GridSpec grid;
        grid.omega_min = number_at(g, "omega_min", "grid.omega_min");
        grid.omega_max = number_at(g, "omega_max", "grid.omega_max");
        const double count = number_at(g, "count", "grid.count");
        if (grid.omega_min <= 0.0)
            bad_field("grid.omega_min", "must be > 0");
        if (grid.omega_max <= grid.omega_min)
            bad_field("grid.omega_max", "must exceed grid.omega_min");
        if (count < 2 || count != std::floor(count))
            bad_field("grid.count", "must be an integer >= 2");
        grid.count = static_cast<Eigen::Index>(count);
        if (g.contains("spacing") && g.at("spacing") != "linear")
            bad_field("grid.spacing", "only \"linear\" grids are supported");
        cfg.grid = grid;
    }

    if (doc.contains("noise")) {
        const json& n = object_at(doc, "noise", "noise");
        cfg.noise_sigma = number_or(n, "sigma", 0.0, "noise.sigma");
        if (!(cfg.noise_sigma >= 0.0))
            bad_field("noise.sigma", "must be >= 0");
        if (n.contains("seed")) {
            if (!n.at("seed").is_number_unsigned())
                bad_field("noise.seed", "must be a non-negative integer");
            cfg.noise_seed = n.at("seed").get<std::uint64_t>();
        }
    }

    if (doc.contains("tolerances")) {
        const json& t = object_at(doc, "tolerances", "tolerances");
        cfg.geometry_tolerance = number_or(t, "geometry", cfg.geometry_tolerance, "tolerances.geometry");
        if (cfg.geometry_tolerance <= 0.0)
            bad_field("tolerances.geometry", "must be > 0");
        const double mr = number_or(t, "min_resonances", 10, "tolerances.min_resonances");
        if (mr < 1 || mr != std::floor(mr))
            bad_field("tolerances.min_resonances", "must be a positive integer");
        cfg.min_resonances = static_cast<std::size_t>(mr);
        cfg.fit.stagnation_misfit = number_or(t, "fit_misfit", cfg.fit.stagnation_misfit, "tolerances.fit_misfit");
        cfg.fit.step_tolerance = number_or(t, "fit_step", cfg.fit.step_tolerance, "tolerances.fit_step");
    }

    if (doc.contains("geometry")) {
        const json& g = object_at(doc, "geometry", "geometry");
        if (g.contains("window")) {
            const Eigen::VectorXd w = vector_at(g, "window", "geometry.window");
            if (w.size() != 2 || w(0) <= 0.0 || w(1) <= w(0))
                bad_field("geometry.window", "must be [min, max] with 0 < min < max");
            cfg.window = std::pair{w(0), w(1)};
        }
        cfg.geometry.remainder_constant =
            number_or(g, "remainder_constant", cfg.geometry.remainder_constant, "geometry.remainder_constant");
        cfg.geometry.peel.max_tau = number_or(g, "max_tau", 0.0, "geometry.max_tau");
        if (g.contains("taus")) {
            const Eigen::VectorXd taus = vector_at(g, "taus", "geometry.taus");
            Eigen::VectorXd mult = Eigen::VectorXd::Ones(taus.size());
            if (g.contains("multiplicities"))
                mult = vector_at(g, "multiplicities", "geometry.multiplicities");
            if (mult.size() != taus.size())
                bad_field("geometry.multiplicities", "must match geometry.taus in length");
            for (Eigen::Index i = 0; i < taus.size(); ++i) {
                if (taus(i) <= 0.0)
                    bad_field("geometry.taus", "must be positive");
                if (mult(i) < 1 || mult(i) != std::floor(mult(i)))
                    bad_field("geometry.multiplicities", "must be positive integers");
                cfg.groups.push_back({taus(i), static_cast<int>(mult(i))});
            }
        }
    }
    if (cfg.groups.empty() && cfg.network)
        cfg.groups = groups_of(*cfg.network);

    bool freeze_first_half = false;
    if (doc.contains("fit")) {
        const json& f = object_at(doc, "fit", "fit");
        const double modes = number_or(f, "modes", cfg.basis.modes, "fit.modes");
        if (modes < 1 || modes != std::floor(modes))
            bad_field("fit.modes", "must be a positive integer");
        cfg.basis.modes = static_cast<int>(modes);
        const double spb = number_or(f, "samples_per_branch", 101, "fit.samples_per_branch");
        if (spb < 4 || spb != std::floor(spb))
            bad_field("fit.samples_per_branch", "must be an integer >= 4");
        cfg.basis.samples_per_branch = static_cast<Eigen::Index>(spb);
        if (f.contains("basis")) {
            const json& kind = f.at("basis");
            if (kind == "sine")
                cfg.basis.kind = BasisKind::Sine;
            else if (kind == "half-sine")
                cfg.basis.kind = BasisKind::HalfSine;
            else
                bad_field("fit.basis", "must be \"sine\" or \"half-sine\"");
        }
        const double iters = number_or(f, "max_iterations", cfg.fit.max_iterations, "fit.max_iterations");
        if (iters < 1 || iters != std::floor(iters))
            bad_field("fit.max_iterations", "must be a positive integer");
        cfg.fit.max_iterations = static_cast<int>(iters);
        cfg.fit.jacobian_step = number_or(f, "jacobian_step", cfg.fit.jacobian_step, "fit.jacobian_step");
        if (f.contains("taus")) {
            const Eigen::VectorXd t = vector_at(f, "taus", "fit.taus");
            cfg.fit_taus.assign(t.data(), t.data() + t.size());
        }
        if (f.contains("initial"))
            cfg.fit.initial = vector_at(f, "initial", "fit.initial");
        if (f.contains("freeze")) {
            const json& fr = f.at("freeze");
            if (fr == "first-half") {
                if (cfg.basis.kind != BasisKind::HalfSine)
                    bad_field("fit.freeze", "\"first-half\" needs fit.basis = \"half-sine\"");
                freeze_first_half = true;
            } else if (fr.is_array()) {
                for (const auto& v : fr) {
                    if (!v.is_boolean())
                        bad_field("fit.freeze", "must be \"first-half\" or an array of booleans");
                    cfg.freeze_mask.push_back(v.get<bool>());
                }
            } else if (!fr.is_null()) {
                bad_field("fit.freeze", "must be \"first-half\" or an array of booleans");
            }
        }
    }
    if (cfg.fit_taus.empty() && cfg.network)
        for (const auto& b : cfg.network->branches)
            cfg.fit_taus.push_back(b.tau);
    // The branch count is only known once the taus are resolved.
    if (freeze_first_half)
        cfg.freeze_mask = first_half_freeze_mask(cfg.basis, cfg.fit_taus.size());

    if (doc.contains("outputs")) {
        const json& o = object_at(doc, "outputs", "outputs");
        if (o.contains("dir")) {
            if (!o.at("dir").is_string())
                bad_field("outputs.dir", "must be a string");
            cfg.out_dir = o.at("dir").get<std::string>();
        }
    }
    return cfg;
}

ExperimentConfig load_config(const fs::path& path)
{
    return parse_config(read_json(path), path.parent_path().empty() ? fs::path(".") : path.parent_path());
}

int exit_code(ErrorCode code)
{
    switch (code) {
    case ErrorCode::Usage:
    case ErrorCode::Parameter:
    case ErrorCode::InvalidProfile:
        return 2;
    case ErrorCode::Io:
        return 4;
    default:
        return 3;
    }
}

namespace {

struct Arguments {
    std::string config;
    std::vector<std::string> traces;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::string window;
    std::optional<double> tolerance;
    bool json_output = false;
};

struct RunResult {
    json payload;
    std::vector<std::string> outputs;
    std::vector<std::string> warnings;
    std::string summary;
};

std::string fmt(const char* f, double v)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

std::pair<double, double> parse_window(const std::string& text)
{
    const auto colon = text.find(':');
    if (colon == std::string::npos)
        throw Error(ErrorCode::Usage, "--window expects MIN:MAX, got '" + text + "'");
    try {
        std::size_t used = 0;
        const double lo = std::stod(text.substr(0, colon), &used);
        if (used != colon)
            throw std::invalid_argument("");
        const std::string hi_text = text.substr(colon + 1);
        const double hi = std::stod(hi_text, &used);
        if (used != hi_text.size())
            throw std::invalid_argument("");
        if (!(lo > 0.0 && hi > lo))
            throw Error(ErrorCode::Usage, "--window needs 0 < MIN < MAX");
        return {lo, hi};
    } catch (const std::logic_error&) {
        throw Error(ErrorCode::Usage, "--window expects MIN:MAX, got '" + text + "'");
    }
}

ExperimentConfig config_from(const Arguments& args, bool required)
{
    ExperimentConfig cfg;
    if (!args.config.empty())
        cfg = load_config(args.config);
    else if (required)
        throw Error(ErrorCode::Usage, "--config is required for this command");
    if (!args.out.empty())
        cfg.out_dir = args.out;
    if (args.seed)
        cfg.noise_seed = args.seed;
    if (!args.window.empty())
        cfg.window = parse_window(args.window);
    if (args.tolerance) {
        if (!(*args.tolerance > 0.0))
            throw Error(ErrorCode::Usage, "--tolerance must be > 0");
        cfg.geometry_tolerance = *args.tolerance;
    }
    return cfg;
}

double coupling_of(const ExperimentConfig& cfg)
{
    if (cfg.network)
        return cfg.network->coupling_h;
    if (cfg.echo.contains("H") && cfg.echo.at("H").is_number())
        return cfg.echo.at("H").get<double>();
    return 0.0;
}

std::vector<ReflectionTrace> load_traces(const Arguments& args, const ExperimentConfig& cfg)
{
    std::vector<ReflectionTrace> traces;
    for (const auto& p : args.traces) {
        traces.push_back(read_trace_csv(p));
        traces.back().h_coupling = coupling_of(cfg);
    }
    return traces;
}

json geometry_json(const GeometryEstimate& g)
{
    json groups = json::array();
    for (const auto& grp : g.groups)
        groups.push_back({{"tau", grp.tau}, {"n", grp.multiplicity}});
    json ratios = json::array();
    for (std::size_t a = 0; a < g.groups.size(); ++a)
        for (std::size_t b = a + 1; b < g.groups.size(); ++b) {
            const double r = g.groups[a].tau / g.groups[b].tau;
            json conv = json::array();
            for (const auto& [p, q] : continued_fraction_convergents(r, 6))
                conv.push_back({p, q});
            ratios.push_back({{"i", a},
                              {"j", b},
                              {"ratio", r},
                              {"near_integer", std::abs(r - std::round(r)) < 0.05},
                              {"convergents", conv}});
        }
    return {{"groups", groups},
            {"residual_sup", g.residual_sup},
            {"window", {g.window.first, g.window.second}},
            {"flags", g.flags},
            {"ratios", ratios}};
}

RunResult cmd_simulate(const Arguments& args, ExperimentConfig& cfg)
{
    if (!cfg.network)
        throw Error(ErrorCode::Usage, "config field 'network': missing");
    if (!cfg.grid)
        throw Error(ErrorCode::Usage, "config field 'grid': missing");
    if (cfg.noise_sigma > 0.0 && !cfg.noise_seed)
        throw Error(ErrorCode::Usage, "config field 'noise.seed': required when noise.sigma > 0 (or pass --seed)");
    (void)args;
    const Eigen::VectorXd omegas = linear_grid(cfg.grid->omega_min, cfg.grid->omega_max, cfg.grid->count);

    RunResult res;
    json traces = json::array();
    for (std::size_t i = 0; i < cfg.settings.size(); ++i) {
        ReflectionTrace t = sweep(*cfg.network, omegas, cfg.settings[i]);
        const std::uint64_t seed = cfg.noise_seed.value_or(0) + i;
        add_measurement_noise(t, cfg.noise_sigma, seed);
        const std::string name = "trace_" + std::string(to_string(cfg.settings[i])) + ".csv";
        write_file_atomic(cfg.out_dir / name, format_trace_csv(t));
        res.outputs.push_back(name);
        traces.push_back({{"file", name},
                          {"setting", to_string(cfg.settings[i])},
                          {"samples", t.size()},
                          {"noise_seed", cfg.noise_sigma > 0.0 ? json(seed) : json()}});
        res.summary += "wrote " + (cfg.out_dir / name).string() + "\n";
    }
    res.payload = {{"traces", traces},
                   {"H", cfg.network->coupling_h},
                   {"branches", cfg.network->branches.size()},
                   {"noise_sigma", cfg.noise_sigma}};
    return res;
}

GeometryEstimate run_geometry(const ReflectionTrace& t, const ExperimentConfig& cfg)
{
    const auto window = cfg.window.value_or(std::pair{t.omegas(0), t.omegas(t.size() - 1)});
    GeometryOptions opts = cfg.geometry;
    // Without a window the caller is treating the trace as q = 0 data.
    if (!cfg.window)
        opts.remainder_constant = 0.0;
    return identify_geometry(t, t.h_coupling, window.first, window.second, cfg.geometry_tolerance, opts);
}

RunResult cmd_identify_geometry(const Arguments& args, ExperimentConfig& cfg)
{
    if (args.traces.size() != 1)
        throw Error(ErrorCode::Usage, "identify-geometry takes exactly one --trace");
    const auto traces = load_traces(args, cfg);
    const GeometryEstimate g = run_geometry(traces[0], cfg);

    RunResult res;
    res.payload = geometry_json(g);
    res.warnings = g.flags;
    write_file_atomic(cfg.out_dir / "geometry.json", res.payload.dump(2) + "\n");
    res.outputs.push_back("geometry.json");
    for (const auto& grp : g.groups)
        res.summary += "tau = " + fmt("%.10g", grp.tau) + "  n = " + std::to_string(grp.multiplicity) + "\n";
    res.summary += "residual_sup = " + fmt("%.3g", g.residual_sup) + "\n";
    for (const auto& f : g.flags)
        res.summary += "flag: " + f + "\n";
    return res;
}

RunResult cmd_estimate_integrals(const Arguments& args, ExperimentConfig& cfg)
{
    if (args.traces.empty())
        throw Error(ErrorCode::Usage, "estimate-integrals needs at least one --trace");
    const auto traces = load_traces(args, cfg);

    GeometryEstimate geometry;
    if (!cfg.groups.empty()) {
        geometry.groups = cfg.groups;
    } else {
        geometry = run_geometry(traces[0], cfg);
    }

    RunResult res;
    json per_trace = json::array();
    for (std::size_t i = 0; i < traces.size(); ++i) {
        const auto& t = traces[i];
        const auto lambdas = detect_resonances(t);
        const ResonanceTable table = assign_resonances(lambdas, geometry, t.setting);
        const auto est = estimate_potential_integrals(table, cfg.min_resonances);
        json branches = json::array();
        for (const auto& e : est) {
            branches.push_back({{"tau", e.tau},
                                {"n", e.multiplicity},
                                {"integral_hat", e.integral_hat},
                                {"shift_coefficient", e.shift_coefficient},
                                {"fit_residual", e.fit_residual},
                                {"points", e.points},
                                {"model_mismatch", e.model_mismatch}});
            if (e.model_mismatch)
                res.warnings.push_back("model_mismatch tau=" + fmt("%.6g", e.tau));
            res.summary += std::string(to_string(t.setting)) + "  tau = " + fmt("%.8g", e.tau) +
                           "  integral_hat = " + fmt("%.6g", e.integral_hat) + "\n";
        }
        per_trace.push_back({{"trace", args.traces[i]},
                             {"setting", to_string(t.setting)},
                             {"resonances", lambdas.size()},
                             {"unassigned", table.unassigned},
                             {"branches", branches}});
    }
    res.payload = {{"traces", per_trace}};
    write_file_atomic(cfg.out_dir / "integrals.json", res.payload.dump(2) + "\n");
    res.outputs.push_back("integrals.json");
    return res;
}

json estimate_json(const PotentialEstimate& e, const std::string& mode)
{
    json branches = json::array();
    for (const auto& b : e.branches) {
        branches.push_back({{"tau", b.tau},
                            {"coeffs", std::vector<double>(b.coefficients.data(), b.coefficients.data() + b.coefficients.size())},
                            {"std_errors", std::vector<double>(b.std_errors.data(), b.std_errors.data() + b.std_errors.size())},
                            {"integral_hat", b.integral_hat},
                            {"q_samples", std::vector<double>(b.q_samples.data(), b.q_samples.data() + b.q_samples.size())}});
    }
    return {{"mode", mode},
            {"branches", branches},
            {"misfit", e.misfit},
            {"iterations", e.iterations},
            {"flags", e.flags}};
}

RunResult cmd_fit_potentials(const Arguments& args, ExperimentConfig& cfg)
{
    const bool frozen_any = std::any_of(cfg.freeze_mask.begin(), cfg.freeze_mask.end(), [](bool b) { return b; });
    std::string mode;
    if (args.traces.size() == 2) {
        mode = "two-trace";
    } else if (args.traces.size() == 1 && frozen_any) {
        mode = "half-known";
    } else if (args.traces.size() == 1) {
        throw Error(ErrorCode::Usage,
                    "one trace requires the half-known mode (fit.freeze fixing the first-half "
                    "coefficients); otherwise pass both a Neumann and a Dirichlet trace for the two-trace mode");
    } else {
        throw Error(ErrorCode::Usage,
                    "fit-potentials takes two traces (Neumann + Dirichlet, two-trace mode) or one trace "
                    "with fit.freeze (half-known mode)");
    }
    if (cfg.fit_taus.empty())
        throw Error(ErrorCode::Usage, "config field 'fit.taus': missing (and no network to take them from)");
    auto traces = load_traces(args, cfg);
    if (mode == "two-trace" && traces[0].setting == traces[1].setting)
        throw Error(ErrorCode::Usage, "the two-trace mode needs one Neumann and one Dirichlet trace");

    RunResult res;
    PotentialEstimate est;
    try {
        est = fit_potentials(traces, cfg.fit_taus, cfg.basis, cfg.freeze_mask, cfg.fit);
    } catch (const FitNonConvergence& e) {
        // Keep the best iterate on disk before reporting the failure.
        write_file_atomic(cfg.out_dir / "potentials.json", estimate_json(e.best(), mode).dump(2) + "\n");
        throw;
    }
    res.payload = estimate_json(est, mode);
    res.warnings = est.flags;
    write_file_atomic(cfg.out_dir / "potentials.json", res.payload.dump(2) + "\n");
    res.outputs.push_back("potentials.json");
    for (std::size_t j = 0; j < est.branches.size(); ++j) {
        const auto& b = est.branches[j];
        std::string csv = "x,q\n";
        const Eigen::Index n = b.q_samples.size();
        char buf[96];
        for (Eigen::Index i = 0; i < n; ++i) {
            std::snprintf(buf, sizeof buf, "%.17g,%.17g\n", b.tau * static_cast<double>(i) / static_cast<double>(n - 1),
                          b.q_samples(i));
            csv += buf;
        }
        const std::string name = "q_branch_" + std::to_string(j) + ".csv";
        write_file_atomic(cfg.out_dir / name, csv);
        res.outputs.push_back(name);
    }
    res.summary = "mode " + mode + ", misfit " + fmt("%.3g", est.misfit) + " after " +
                  std::to_string(est.iterations) + " iterations\n";
    return res;
}

RunResult cmd_check(const Arguments&, ExperimentConfig& cfg)
{
    if (!cfg.network)
        throw Error(ErrorCode::Usage, "config field 'network': missing");
    const GridSpec grid = cfg.grid.value_or(GridSpec{0.1, 200.0, 2000});
    const Eigen::VectorXd omegas = linear_grid(grid.omega_min, grid.omega_max, grid.count);
    const StarNetwork& net = *cfg.network;

    double unitarity = 0.0, wronskian = 0.0, scattering = 0.0;
    for (const BoundarySetting s : {BoundarySetting::Neumann, BoundarySetting::Dirichlet}) {
        for (Eigen::Index k = 0; k < omegas.size(); ++k) {
            const ScatteringSolution sol = scattering_solution(net, omegas(k), s);
            unitarity = std::max(unitarity, std::abs(std::abs(sol.r) - 1.0));
            scattering = std::max(scattering, std::max(sol.continuity_residual, sol.current_residual) /
                                                  (1.0 + std::abs(omegas(k))));
        }
    }
    for (const auto& b : net.branches)
        for (Eigen::Index k = 0; k < omegas.size(); ++k)
            wronskian = std::max(wronskian, fundamental_solution(b, omegas(k), BoundarySetting::Neumann).wronskian_drift);

    json checks = json::array();
    bool all = true;
    auto add = [&](const char* name, double value, double limit) {
        const bool pass = value < limit;
        all = all && pass;
        checks.push_back({{"name", name}, {"value", value}, {"limit", limit}, {"pass", pass}});
    };
    add("unitarity", unitarity, 1e-9);
    add("wronskian", wronskian, 1e-8);
    add("scattering_residual", scattering, 1e-8);

    RunResult res;
    res.payload = {{"checks", checks}, {"pass", all}};
    write_file_atomic(cfg.out_dir / "check.json", res.payload.dump(2) + "\n");
    res.outputs.push_back("check.json");
    for (const auto& c : checks)
        res.summary += std::string(c["pass"].get<bool>() ? "PASS " : "FAIL ") + c["name"].get<std::string>() +
                       " = " + fmt("%.3g", c["value"].get<double>()) + "\n";
    if (!all)
        res.warnings.push_back("check_failed");
    return res;
}

void print_error(const std::string& code, const std::string& message)
{
    std::string flat = message;
    std::replace(flat.begin(), flat.end(), '\n', ' ');
    std::fprintf(stderr, "error: code=%s message=%s\n", code.c_str(), flat.c_str());
}

} // namespace

int run(int argc, const char* const* argv)
{
    CLI::App app{"Frequency-domain reflectometry on star networks of lossless lines", "reflectkit"};
    app.set_version_flag("--version", std::string(REFLECTKIT_VERSION));
    app.require_subcommand(1);

    Arguments args;
    struct Spec {
        const char* name;
        const char* help;
        RunResult (*fn)(const Arguments&, ExperimentConfig&);
        bool needs_config;
    };
    const Spec specs[] = {
        {"simulate", "Sweep the configured network and write trace CSVs", cmd_simulate, true},
        {"identify-geometry", "Recover traveling times and multiplicities from one trace", cmd_identify_geometry, false},
        {"estimate-integrals", "Estimate per-branch potential integrals from resonances", cmd_estimate_integrals, false},
        {"fit-potentials", "Fit branch potentials to one or two traces", cmd_fit_potentials, true},
        {"check", "Run the numerical invariant checks on the configured network", cmd_check, true},
    };
    for (const auto& s : specs) {
        CLI::App* sub = app.add_subcommand(s.name, s.help);
        sub->add_option("--config", args.config, "Experiment config (JSON)");
        sub->add_option("--trace", args.traces, "Trace CSV (repeatable)");
        sub->add_option("--out", args.out, "Output directory");
        sub->add_option("--seed", args.seed, "Noise seed");
        sub->add_option("--window", args.window, "Frequency window MIN:MAX");
        sub->add_option("--tolerance", args.tolerance, "Geometry residual tolerance");
        sub->add_flag("--json", args.json_output, "Print the result payload as JSON");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::CallForVersion&) {
        std::cout << REFLECTKIT_VERSION << "\n";
        return 0;
    } catch (const CLI::ParseError& e) {
        print_error("usage", e.what());
        return 2;
    }

    const Spec* chosen = nullptr;
    for (const auto& s : specs)
        if (app.got_subcommand(s.name))
            chosen = &s;

    const auto start = std::chrono::steady_clock::now();
    ExperimentConfig cfg;
    json report = {{"command", chosen->name}, {"version", REFLECTKIT_VERSION}};
    report["arguments"] = {{"config", args.config},
                           {"traces", args.traces},
                           {"out", args.out},
                           {"seed", args.seed ? json(*args.seed) : json()},
                           {"window", args.window},
                           {"tolerance", args.tolerance ? json(*args.tolerance) : json()}};
    bool have_out = false;
    int status = 0;
    try {
        cfg = config_from(args, chosen->needs_config);
        report["config"] = cfg.echo;
        std::error_code ec;
        fs::create_directories(cfg.out_dir, ec);
        if (ec)
            throw Error(ErrorCode::Io, "cannot create output directory '" + cfg.out_dir.string() + "'");
        have_out = true;

        RunResult res = chosen->fn(args, cfg);
        report["status"] = "ok";
        report["warnings"] = res.warnings;
        report["outputs"] = res.outputs;
        report["result"] = res.payload;
        if (args.json_output)
            std::cout << res.payload.dump(2) << "\n";
        else
            std::cout << res.summary;
        if (std::find(res.warnings.begin(), res.warnings.end(), "check_failed") != res.warnings.end()) {
            print_error("check-failed", "one or more invariant checks failed");
            status = 3;
        }
    } catch (const Error& e) {
        report["status"] = "error";
        report["error"] = {{"code", to_string(e.code())}, {"message", e.what()}};
        print_error(std::string(to_string(e.code())), e.what());
        status = exit_code(e.code());
    } catch (const std::exception& e) {
        report["status"] = "error";
        report["error"] = {{"code", "internal"}, {"message", e.what()}};
        print_error("internal", e.what());
        status = 3;
    }

    // Wall time goes to stderr only so that report files stay byte-reproducible.
    const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (have_out) {
        const std::string name = std::string(chosen->name) + "_report.json";
        try {
            write_file_atomic(cfg.out_dir / name, report.dump(2) + "\n");
        } catch (const Error& e) {
            if (status == 0) {
                print_error(std::string(to_string(e.code())), e.what());
                status = exit_code(e.code());
            }
        }
    }
    std::fprintf(stderr, "reflectkit %s: %s in %.3f s\n", chosen->name, status == 0 ? "done" : "failed", elapsed);
    return status;
}

} // namespace reflectkit::cli
