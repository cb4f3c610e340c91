#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <sys/wait.h>
#include <unistd.h>

#include <json.hpp>

#include "oracles.hpp"
#include "reflectkit/trace_io.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace reflectkit;

namespace {

struct Outcome {
    int status = -1;
    std::string out;
    std::string err;
};

fs::path scratch(const std::string& name)
{
    const fs::path dir = fs::temp_directory_path() / ("reflectkit_cli_" + std::to_string(::getpid())) / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void dump(const fs::path& p, const std::string& text)
{
    std::ofstream(p, std::ios::binary) << text;
}

Outcome run(const std::string& args, const fs::path& dir)
{
    const fs::path out = dir / "stdout.txt", err = dir / "stderr.txt";
    const std::string cmd = std::string(REFLECTKIT_BIN) + " " + args + " > '" + out.string() + "' 2> '" + err.string() + "'";
    const int raw = std::system(cmd.c_str());
    Outcome o;
    o.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    o.out = slurp(out);
    o.err = slurp(err);
    return o;
}

json branch(double tau, double q = 0.0)
{
    return {{"tau", tau}, {"q_constant", q}, {"sample_count", 101}};
}

fs::path write_config(const fs::path& dir, const json& network, const json& grid, const json& extra = json::object())
{
    json cfg = {{"network", network}, {"grid", grid}, {"outputs", {{"dir", (dir / "out").string()}}}};
    cfg.update(extra);
    const fs::path p = dir / "config.json";
    dump(p, cfg.dump(2));
    return p;
}

} // namespace

TEST_CASE("simulate writes the closed-form trace")
{
    const fs::path dir = scratch("closed_form");
    const fs::path cfg = write_config(dir, {{"branches", {branch(1.0)}}},
                                      {{"omega_min", 0.1}, {"omega_max", 50.0}, {"count", 500}},
                                      {{"settings", {"neumann", "dirichlet"}}});
    const Outcome o = run("simulate --config " + cfg.string(), dir);
    REQUIRE(o.status == 0);
    for (const BoundarySetting s : {BoundarySetting::Neumann, BoundarySetting::Dirichlet}) {
        const ReflectionTrace t = read_trace_csv(dir / "out" / ("trace_" + std::string(to_string(s)) + ".csv"));
        CHECK(t.setting == s);
        REQUIRE(t.size() == 500);
        double err = 0.0;
        for (Eigen::Index k = 0; k < t.size(); ++k)
            err = std::max(err, std::abs(t.values(k) - oracle::free_reflection(t.omegas(k), 1.0, s)));
        CHECK(err < 1e-10);
    }
    const json report = json::parse(slurp(dir / "out" / "simulate_report.json"));
    CHECK(report["status"] == "ok");
    CHECK(report["command"] == "simulate");
    CHECK(report["outputs"].size() == 2);
    CHECK(report["config"]["grid"]["count"] == 500);
}

TEST_CASE("simulate is deterministic")
{
    for (double sigma : {0.0, 0.01}) {
        const fs::path dir = scratch("determinism");
        const fs::path cfg = write_config(
            dir, {{"branches", {branch(1.0, 0.1), branch(1.7)}}, {"H", 0.2}},
            {{"omega_min", 0.1}, {"omega_max", 40.0}, {"count", 400}},
            {{"settings", {"neumann", "dirichlet"}}, {"noise", {{"sigma", sigma}, {"seed", 7}}}});
        REQUIRE(run("simulate --config " + cfg.string(), dir).status == 0);
        const std::string first = slurp(dir / "out" / "trace_neumann.csv");
        const std::string first_d = slurp(dir / "out" / "trace_dirichlet.csv");
        const std::string first_report = slurp(dir / "out" / "simulate_report.json");
        REQUIRE(run("simulate --config " + cfg.string(), dir).status == 0);
        CHECK(slurp(dir / "out" / "trace_neumann.csv") == first);
        CHECK(slurp(dir / "out" / "trace_dirichlet.csv") == first_d);
        CHECK(slurp(dir / "out" / "simulate_report.json") == first_report);
        if (sigma > 0.0) {
            REQUIRE(run("simulate --config " + cfg.string() + " --seed 8", dir).status == 0);
            CHECK(slurp(dir / "out" / "trace_neumann.csv") != first);
        }
    }
}

TEST_CASE("identify-geometry from a simulated trace")
{
    const fs::path dir = scratch("geometry");
    const double step = M_PI / (128.0 * 1.5);
    const fs::path cfg = write_config(dir, {{"branches", {branch(1.0), branch(1.5)}}},
                                      {{"omega_min", 0.5}, {"omega_max", 20.0}, {"count", static_cast<int>(19.5 / step) + 2}},
                                      {{"settings", {"neumann"}}});
    REQUIRE(run("simulate --config " + cfg.string(), dir).status == 0);
    const fs::path trace = dir / "out" / "trace_neumann.csv";
    const Outcome o = run("identify-geometry --trace " + trace.string() + " --out " + (dir / "geo").string() + " --json", dir);
    REQUIRE(o.status == 0);
    const json g = json::parse(slurp(dir / "geo" / "geometry.json"));
    CHECK(json::parse(o.out) == g);
    REQUIRE(g["groups"].size() == 2);
    CHECK(std::abs(g["groups"][0]["tau"].get<double>() - 1.5) < 1e-6);
    CHECK(g["groups"][0]["n"] == 1);
    CHECK(std::abs(g["groups"][1]["tau"].get<double>() - 1.0) < 1e-6);
    CHECK(g["flags"].empty());
    REQUIRE(g["ratios"].size() == 1);
    CHECK(g["ratios"][0]["convergents"][1] == json::array({3, 2}));

    SUBCASE("integer ratio raises the flag")
    {
        const fs::path d2 = scratch("geometry_b1");
        const double s2 = M_PI / (128.0 * 2.0);
        const fs::path c2 = write_config(d2, {{"branches", {branch(1.0), branch(2.0)}}},
                                         {{"omega_min", 0.5}, {"omega_max", 20.0}, {"count", static_cast<int>(19.5 / s2) + 2}},
                                         {{"settings", {"neumann"}}});
        REQUIRE(run("simulate --config " + c2.string(), d2).status == 0);
        REQUIRE(run("identify-geometry --trace " + (d2 / "out" / "trace_neumann.csv").string() + " --out " +
                        (d2 / "geo").string(),
                    d2)
                    .status == 0);
        const json gb = json::parse(slurp(d2 / "geo" / "geometry.json"));
        CHECK(std::find(gb["flags"].begin(), gb["flags"].end(), "b1_violated") != gb["flags"].end());
        const json report = json::parse(slurp(d2 / "geo" / "identify-geometry_report.json"));
        CHECK(report["warnings"] == json::array({"b1_violated"}));
    }
    SUBCASE("a report replays its config")
    {
        const fs::path d3 = scratch("replay");
        REQUIRE(run("simulate --config " + (dir / "out" / "simulate_report.json").string() + " --out " + (d3 / "a").string(),
                    d3)
                    .status == 0);
        CHECK(slurp(d3 / "a" / "trace_neumann.csv") == slurp(trace));
    }
}

TEST_CASE("simulate then fit recovers the planted potential")
{
    const fs::path dir = scratch("pipeline");
    json q = json::array();
    for (int i = 0; i < 101; ++i)
        q.push_back(0.1 * std::sin(2.0 * M_PI * i / 100.0));
    const json network = {{"branches", {{{"tau", 1.0}, {"q_samples", q}}, branch(1.41421356)}}};
    const fs::path cfg = write_config(dir, network, {{"omega_min", 0.1}, {"omega_max", 30.0}, {"count", 300}},
                                      {{"settings", {"neumann", "dirichlet"}}, {"fit", {{"modes", 3}}}});
    REQUIRE(run("simulate --config " + cfg.string(), dir).status == 0);
    const std::string traces = " --trace " + (dir / "out" / "trace_neumann.csv").string() + " --trace " +
                               (dir / "out" / "trace_dirichlet.csv").string();
    const Outcome o = run("fit-potentials --config " + cfg.string() + traces, dir);
    REQUIRE(o.status == 0);
    const json p = json::parse(slurp(dir / "out" / "potentials.json"));
    CHECK(p["mode"] == "two-trace");
    REQUIRE(p["branches"].size() == 2);
    CHECK(p["branches"][0]["coeffs"][0].get<double>() == doctest::Approx(0.1).epsilon(1e-4));
    CHECK(std::abs(p["branches"][1]["coeffs"][0].get<double>()) < 1e-5);
    CHECK(p["misfit"].get<double>() < 1e-6);
    CHECK(fs::exists(dir / "out" / "q_branch_0.csv"));
    CHECK(slurp(dir / "out" / "q_branch_1.csv").rfind("x,q\n", 0) == 0);
}

TEST_CASE("error exits")
{
    const fs::path dir = scratch("errors");
    const fs::path cfg = write_config(dir, {{"branches", {branch(1.0), branch(1.5)}}},
                                      {{"omega_min", 0.1}, {"omega_max", 30.0}, {"count", 300}},
                                      {{"settings", {"neumann", "dirichlet"}}});
    REQUIRE(run("simulate --config " + cfg.string(), dir).status == 0);
    const std::string neumann = (dir / "out" / "trace_neumann.csv").string();

    SUBCASE("empty trace file is a usage error")
    {
        dump(dir / "empty.csv", "");
        const Outcome o = run("identify-geometry --trace " + (dir / "empty.csv").string() + " --out " + (dir / "o").string(), dir);
        CHECK(o.status == 2);
        CHECK(o.err.find("error: code=usage message=") != std::string::npos);
    }
    SUBCASE("one trace without a freeze mask")
    {
        const Outcome o = run("fit-potentials --config " + cfg.string() + " --trace " + neumann, dir);
        CHECK(o.status == 2);
        CHECK(o.err.find("half-known") != std::string::npos);
        CHECK(o.err.find("two-trace") != std::string::npos);
    }
    SUBCASE("traces on different grids")
    {
        const fs::path other = dir / "other";
        fs::create_directories(other);
        const fs::path c2 = write_config(other, {{"branches", {branch(1.0), branch(1.5)}}},
                                         {{"omega_min", 0.1}, {"omega_max", 31.0}, {"count", 300}},
                                         {{"settings", {"dirichlet"}}});
        REQUIRE(run("simulate --config " + c2.string(), other).status == 0);
        const Outcome o = run("fit-potentials --config " + cfg.string() + " --trace " + neumann + " --trace " +
                                  (other / "out" / "trace_dirichlet.csv").string(),
                              dir);
        CHECK(o.status == 2);
        CHECK(o.err.find("code=parameter") != std::string::npos);
    }
    SUBCASE("missing file is an I/O error")
    {
        const Outcome o = run("estimate-integrals --trace " + (dir / "nope.csv").string() + " --out " + (dir / "o").string(), dir);
        CHECK(o.status == 4);
        CHECK(o.err.find("code=io") != std::string::npos);
        const json report = json::parse(slurp(dir / "o" / "estimate-integrals_report.json"));
        CHECK(report["status"] == "error");
        CHECK(report["error"]["code"] == "io");
    }
    SUBCASE("bad config fields are named")
    {
        const fs::path bad = write_config(dir, {{"branches", {branch(1.0)}}}, {{"omega_min", 0.1}, {"omega_max", 30.0}});
        const Outcome o = run("simulate --config " + bad.string(), dir);
        CHECK(o.status == 2);
        CHECK(o.err.find("grid.count") != std::string::npos);
    }
    SUBCASE("unknown subcommand and bad window")
    {
        CHECK(run("frobnicate", dir).status == 2);
        const Outcome o = run("identify-geometry --trace " + neumann + " --window 5", dir);
        CHECK(o.status == 2);
        CHECK(o.err.find("MIN:MAX") != std::string::npos);
    }
    SUBCASE("geometry failure is a numerical error")
    {
        const Outcome o = run("identify-geometry --trace " + neumann + " --window 29:30 --out " + (dir / "o").string(), dir);
        CHECK(o.status == 3);
    }
}

TEST_CASE("check and estimate-integrals")
{
    const fs::path dir = scratch("check");
    const double step = M_PI / (16.0 * 1.3);
    const fs::path cfg = write_config(
        dir, {{"branches", {branch(1.3, 0.2)}}},
        {{"omega_min", 0.05}, {"omega_max", 60.0}, {"count", static_cast<int>(60.0 / step) + 1}},
        {{"settings", {"neumann"}}, {"geometry", {{"taus", {1.3}}}}});
    const Outcome c = run("check --config " + cfg.string(), dir);
    CHECK(c.status == 0);
    const json checks = json::parse(slurp(dir / "out" / "check.json"));
    CHECK(checks["pass"] == true);
    CHECK(checks["checks"].size() == 3);

    REQUIRE(run("simulate --config " + cfg.string(), dir).status == 0);
    const Outcome e =
        run("estimate-integrals --config " + cfg.string() + " --trace " + (dir / "out" / "trace_neumann.csv").string(), dir);
    REQUIRE(e.status == 0);
    const json ints = json::parse(slurp(dir / "out" / "integrals.json"));
    const double hat = ints["traces"][0]["branches"][0]["integral_hat"].get<double>();
    CHECK(hat == doctest::Approx(0.2 * 1.3).epsilon(0.02));
}
