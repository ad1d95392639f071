#pragma once

#include <filesystem>
#include <vector>

#include "nowcast/dataset.hpp"
#include "nowcast/grid.hpp"

namespace nowcast {

/// Z = a * R^b with Z linear reflectivity and R in mm/hr.
struct ZRParams {
    double a = 200.0;
    double b = 1.49;
};

/// Identity heuristic: each station keeps its current class at every lead
/// time.
std::vector<std::vector<PrecipClass>> persistence_nowcast(const std::vector<PrecipClass>& current,
                                                          int lead_count = kLeadCount);

/// Inverts the power law: R = (10^(dbz/10) / a)^(1/b). NaN maps to 0.
double zr_rate(double dbz, const ZRParams& params);

/// Forward direction, dBZ of a given rate.
double zr_dbz(double rate_mm_per_hr, const ZRParams& params);

/// Least squares in (log10 R, dbz/10) space. Pairs with rate below
/// 0.1 mm/hr are excluded; at least two usable, non-identical rates are
/// required.
ZRParams fit_zr(const std::vector<std::pair<double, double>>& dbz_rate_pairs);

constexpr double kZrFitFloorMmPerHr = 0.1;

struct HourlyEstimate {
    double accum_mm = 0.0;
    bool all_missing = false;
};

/// Mean rate over the 7 frame values at one pixel, read as mm over one
/// hour. Missing values count as zero rain; a fully missing pixel is
/// flagged.
HourlyEstimate zr_hourly_estimate(const std::vector<RadarGrid>& frames, const ZRParams& params,
                                  std::int64_t pixel_row, std::int64_t pixel_col);

/// Two-line plain text: a=<value> / b=<value>.
void write_zr_params(const ZRParams& params, const std::filesystem::path& path);
ZRParams read_zr_params(const std::filesystem::path& path);

}  // namespace nowcast
