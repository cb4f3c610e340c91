#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "reflectkit/forward.hpp"

namespace reflectkit {

/// CSV with header `omega,re,im,setting`, 17 significant digits per number.
std::string format_trace_csv(const ReflectionTrace& trace);

/// Inverse of format_trace_csv. All rows must name the same setting. The
/// coupling constant is not part of the file and is left at 0. An empty or
/// malformed file is a usage error; `origin` only labels messages.
ReflectionTrace parse_trace_csv(std::string_view text, std::string_view origin = "<memory>");

ReflectionTrace read_trace_csv(const std::filesystem::path& path);

/// Writes through a sibling temporary file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);

std::string read_file(const std::filesystem::path& path);

/// R <- R (1 + sigma (g1 + i g2)) with unit normals from mt19937_64(seed),
/// then scaled back onto |R| <= 1.
void add_measurement_noise(ReflectionTrace& trace, double sigma, std::uint64_t seed);

} // namespace reflectkit
