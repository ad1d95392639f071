#include "nowcast/baselines.hpp"

#include <cmath>
#include <fstream>
#include <set>

namespace nowcast {

std::vector<std::vector<PrecipClass>> persistence_nowcast(const std::vector<PrecipClass>& current,
                                                          int lead_count) {
    std::vector<std::vector<PrecipClass>> out(current.size());
    for (std::size_t i = 0; i < current.size(); ++i) {
        out[i].assign(lead_count, current[i]);
    }
    return out;
}

double zr_rate(double dbz, const ZRParams& params) {
    if (std::isnan(dbz)) return 0.0;
    const double z = std::pow(10.0, dbz / 10.0);
    return std::pow(z / params.a, 1.0 / params.b);
}

double zr_dbz(double rate_mm_per_hr, const ZRParams& params) {
    require(rate_mm_per_hr > 0.0, ErrorCode::InvalidArgument, "rate must be positive");
    return 10.0 * std::log10(params.a * std::pow(rate_mm_per_hr, params.b));
}

ZRParams fit_zr(const std::vector<std::pair<double, double>>& dbz_rate_pairs) {
    // regression of dbz/10 on log10(rate)
    std::vector<std::pair<double, double>> usable;
    for (const auto& [dbz, rate] : dbz_rate_pairs) {
        if (rate >= kZrFitFloorMmPerHr && std::isfinite(dbz)) {
            usable.emplace_back(std::log10(rate), dbz / 10.0);
        }
    }
    require(usable.size() >= 2, ErrorCode::InsufficientData,
            "need at least two pairs above the rate floor");

    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (const auto& [x, y] : usable) {
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    const double n = double(usable.size());
    const double var = sxx - sx * sx / n;
    require(var > 1e-15 * std::max(1.0, sxx), ErrorCode::DegenerateData,
            "all usable rates are identical");
    const double slope = (sxy - sx * sy / n) / var;
    const double intercept = (sy - slope * sx) / n;
    ZRParams p;
    p.b = slope;
    p.a = std::pow(10.0, intercept);
    require(p.a > 0 && p.b > 0, ErrorCode::DegenerateData, "fit produced a non-positive parameter");
    return p;
}

HourlyEstimate zr_hourly_estimate(const std::vector<RadarGrid>& frames, const ZRParams& params,
                                  std::int64_t pixel_row, std::int64_t pixel_col) {
    require(frames.size() == std::size_t(kFramesPerSample), ErrorCode::InvalidArgument,
            "hourly estimate needs exactly 7 frames");
    double sum = 0.0;
    int missing = 0;
    for (const RadarGrid& g : frames) {
        require(pixel_row >= 0 && pixel_col >= 0 && pixel_row < std::int64_t(g.height) &&
                    pixel_col < std::int64_t(g.width),
                ErrorCode::OutOfRange, "pixel outside frame");
        const float v = g.at(std::uint32_t(pixel_row), std::uint32_t(pixel_col));
        if (std::isnan(v)) ++missing;
        sum += zr_rate(v, params);
    }
    HourlyEstimate e;
    e.accum_mm = sum / double(kFramesPerSample);
    e.all_missing = missing == kFramesPerSample;
    if (e.all_missing) e.accum_mm = 0.0;
    return e;
}

void write_zr_params(const ZRParams& params, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    require(out.good(), ErrorCode::IoFailure, "cannot open for writing: " + path.string());
    out.precision(17);
    out << "a=" << params.a << "\n" << "b=" << params.b << "\n";
    require(out.good(), ErrorCode::IoFailure, "write failed: " + path.string());
}

ZRParams read_zr_params(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(in.good(), ErrorCode::IoFailure, "cannot open " + path.string());
    ZRParams p;
    std::string line;
    bool got_a = false, got_b = false;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.rfind("a=", 0) == 0) {
            p.a = std::stod(line.substr(2));
            got_a = true;
        } else if (line.rfind("b=", 0) == 0) {
            p.b = std::stod(line.substr(2));
            got_b = true;
        }
    }
    require(got_a && got_b, ErrorCode::ParseError, "expected a= and b= lines");
    return p;
}

}  // namespace nowcast
