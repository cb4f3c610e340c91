#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "reflectkit/errors.hpp"
#include "reflectkit/forward.hpp"
#include "reflectkit/geometry.hpp"
#include "reflectkit/potential.hpp"

namespace reflectkit::cli {

struct GridSpec {
    double omega_min = 0.0;
    double omega_max = 0.0;
    Eigen::Index count = 0;
};

struct ExperimentConfig {
    /// The config as parsed, with a file-referenced network inlined, so a run
    /// report can be replayed without the original files.
    nlohmann::json echo;

    std::optional<StarNetwork> network;
    std::vector<BoundarySetting> settings{BoundarySetting::Neumann};
    std::optional<GridSpec> grid;

    double noise_sigma = 0.0;
    std::optional<std::uint64_t> noise_seed;

    double geometry_tolerance = 1e-3;
    std::optional<std::pair<double, double>> window;
    GeometryOptions geometry;
    /// Explicit geometry for the potential commands; falls back to the network.
    std::vector<GeometryGroup> groups;

    std::size_t min_resonances = 10;

    BasisSpec basis;
    FitOptions fit;
    std::vector<bool> freeze_mask;
    std::vector<double> fit_taus;

    std::filesystem::path out_dir = ".";
};

/// Builds a config from JSON. Relative file references resolve against
/// `base_dir`. A run report is accepted too and replays its config echo.
/// Bad fields raise usage errors naming the field.
ExperimentConfig parse_config(const nlohmann::json& doc, const std::filesystem::path& base_dir = ".");

ExperimentConfig load_config(const std::filesystem::path& path);

/// 2 for usage and parameter errors, 3 for numerical failures, 4 for I/O.
int exit_code(ErrorCode code);

/// Entry point of the `reflectkit` executable; returns the process status.
int run(int argc, const char* const* argv);

} // namespace reflectkit::cli
