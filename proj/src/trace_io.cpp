#include "reflectkit/trace_io.hpp"

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <cmath>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <vector>

#include <unistd.h>

#include "reflectkit/errors.hpp"

namespace reflectkit {

namespace {

std::string_view trim(std::string_view s)
{
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r'))
        s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
        s.remove_suffix(1);
    return s;
}

std::vector<std::string_view> split(std::string_view line, char sep)
{
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (;;) {
        const std::size_t pos = line.find(sep, start);
        out.push_back(trim(line.substr(start, pos - start)));
        if (pos == std::string_view::npos)
            break;
        start = pos + 1;
    }
    return out;
}

double parse_number(std::string_view field, std::string_view origin, std::size_t line)
{
    const std::string text(field);
    char* end = nullptr;
    errno = 0;
    const double v = std::strtod(text.c_str(), &end);
    if (text.empty() || end != text.c_str() + text.size() || errno == ERANGE)
        throw Error(ErrorCode::Usage, std::string(origin) + ":" + std::to_string(line) +
                                          ": '" + text + "' is not a number");
    return v;
}

} // namespace

std::string format_trace_csv(const ReflectionTrace& trace)
{
    std::string out = "omega,re,im,setting\n";
    const std::string_view name = to_string(trace.setting);
    char buf[128];
    for (Eigen::Index k = 0; k < trace.size(); ++k) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,", trace.omegas(k), trace.values(k).real(),
                      trace.values(k).imag());
        out += buf;
        out += name;
        out += '\n';
    }
    return out;
}

ReflectionTrace parse_trace_csv(std::string_view text, std::string_view origin)
{
    std::vector<double> w, re, im;
    std::optional<BoundarySetting> setting;
    std::size_t line_no = 0;
    bool header_seen = false;
    while (!text.empty()) {
        const std::size_t nl = text.find('\n');
        const std::string_view line = trim(text.substr(0, nl));
        text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
        ++line_no;
        if (line.empty())
            continue;
        if (!header_seen) {
            if (line != "omega,re,im,setting")
                throw Error(ErrorCode::Usage, std::string(origin) +
                                                  ": expected header 'omega,re,im,setting'");
            header_seen = true;
            continue;
        }
        const auto fields = split(line, ',');
        if (fields.size() != 4)
            throw Error(ErrorCode::Usage, std::string(origin) + ":" + std::to_string(line_no) +
                                              ": expected 4 fields");
        w.push_back(parse_number(fields[0], origin, line_no));
        re.push_back(parse_number(fields[1], origin, line_no));
        im.push_back(parse_number(fields[2], origin, line_no));
        BoundarySetting s;
        try {
            s = parse_boundary(fields[3]);
        } catch (const Error&) {
            throw Error(ErrorCode::Usage, std::string(origin) + ":" + std::to_string(line_no) +
                                              ": unknown setting '" + std::string(fields[3]) + "'");
        }
        if (setting && *setting != s)
            throw Error(ErrorCode::Usage, std::string(origin) + ": rows mix boundary settings");
        setting = s;
    }
    if (w.empty())
        throw Error(ErrorCode::Usage, std::string(origin) + ": trace file holds no samples");

    ReflectionTrace trace;
    trace.setting = *setting;
    trace.omegas = Eigen::Map<const Eigen::VectorXd>(w.data(), static_cast<Eigen::Index>(w.size()));
    trace.values.resize(static_cast<Eigen::Index>(w.size()));
    for (std::size_t k = 0; k < w.size(); ++k)
        trace.values(static_cast<Eigen::Index>(k)) = {re[k], im[k]};
    try {
        validate_grid(trace.omegas);
    } catch (const Error& e) {
        throw Error(ErrorCode::Usage, std::string(origin) + ": " + e.what());
    }
    return trace;
}

std::string read_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw Error(ErrorCode::Io, "cannot open '" + path.string() + "': " + std::strerror(errno));
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad())
        throw Error(ErrorCode::Io, "read failed on '" + path.string() + "'");
    return ss.str();
}

ReflectionTrace read_trace_csv(const std::filesystem::path& path)
{
    return parse_trace_csv(read_file(path), path.string());
}

void write_file_atomic(const std::filesystem::path& path, std::string_view content)
{
    std::filesystem::path tmp = path;
    tmp += ".tmp" + std::to_string(::getpid());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out)
            throw Error(ErrorCode::Io, "cannot write '" + tmp.string() + "': " + std::strerror(errno));
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        out.flush();
        if (!out)
            throw Error(ErrorCode::Io, "write failed on '" + tmp.string() + "'");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        throw Error(ErrorCode::Io, "cannot move '" + tmp.string() + "' to '" + path.string() + "'");
    }
}

void add_measurement_noise(ReflectionTrace& trace, double sigma, std::uint64_t seed)
{
    require(sigma >= 0.0 && std::isfinite(sigma), ErrorCode::Parameter, "noise sigma must be >= 0");
    if (sigma == 0.0)
        return;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> unit(0.0, 1.0);
    for (Eigen::Index k = 0; k < trace.size(); ++k) {
        const double g1 = unit(rng);
        const double g2 = unit(rng);
        std::complex<double> r = trace.values(k) * std::complex<double>(1.0 + sigma * g1, sigma * g2);
        const double mag = std::abs(r);
        if (mag > 1.0)
            r /= mag;
        trace.values(k) = r;
    }
}

} // namespace reflectkit
