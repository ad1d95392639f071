#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "nowcast/errors.hpp"

namespace nowcast {

/// Kilometres per degree of latitude (and of longitude at the equator)
/// for the sphere used throughout: pi * 6371.0088 / 180.
constexpr double kKmPerDegree = 111.19492664455873;

constexpr int kDefaultReflectivityMax = 100;  // dBZ class count for clamping

/// One timestamped 2-D field of radar reflectivity in dBZ.
/// Missing cells are quiet NaN. Rows run north to south; the geo reference
/// is a flat equirectangular grid anchored at the north-west cell center.
/// Immutable by convention once built; safe to share across threads.
struct RadarGrid {
    std::int64_t timestamp_min = 0;  // minutes since Unix epoch, UTC
    std::uint32_t height = 0;
    std::uint32_t width = 0;
    float resolution_km = 1.0f;
    double origin_lat = 0.0;  // NW cell center
    double origin_lon = 0.0;
    std::vector<float> values;  // row-major, height * width

    float at(std::uint32_t row, std::uint32_t col) const { return values[std::size_t(row) * width + col]; }
    float& at(std::uint32_t row, std::uint32_t col) { return values[std::size_t(row) * width + col]; }

    void validate() const;
};

struct Station {
    std::string id;
    double lat = 0.0;
    double lon = 0.0;
    // set once bound to a grid geometry, -1 before
    std::int64_t pixel_row = -1;
    std::int64_t pixel_col = -1;
};

struct StationTable {
    std::vector<Station> entries;
};

/// RGR1 container, little-endian:
///   magic "RGR1", version u8=1, height u32, width u32, resolution_km f32,
///   timestamp i64 (minutes since epoch), origin_lat f64, origin_lon f64,
///   then height*width f32 values row-major. NaN payload bits preserved.
RadarGrid read_radar_grid(const std::filesystem::path& path);
void write_radar_grid(const RadarGrid& grid, const std::filesystem::path& path);

constexpr std::size_t kRgr1HeaderBytes = 4 + 1 + 4 + 4 + 4 + 8 + 8 + 8;

/// min(max(-0.5, r), r_max - 0.5). NaN passes through unchanged.
float clamp_reflectivity(float r, int r_max = kDefaultReflectivityMax);

/// Returns a copy of the grid with every value clamped.
RadarGrid clamp_grid(const RadarGrid& grid, int r_max = kDefaultReflectivityMax);

/// Block mean over factor x factor cells, ignoring NaN cells; an all-NaN
/// block stays NaN. Output resolution_km is multiplied by factor and the
/// origin moves to the center of the first block. factor must be 2 or 4
/// and both dimensions must be divisible by it.
RadarGrid mean_pool(const RadarGrid& grid, int factor);

/// station_id unique, CSV header `station_id,lat,lon`.
StationTable read_station_table(const std::filesystem::path& path);
void write_station_table(const StationTable& table, const std::filesystem::path& path);

/// Fractional pixel coordinates of a lat/lon point in the grid's local
/// equirectangular frame (longitude scale fixed at the grid origin).
void geo_to_fractional_pixel(const RadarGrid& grid, double lat, double lon, double& row, double& col);

}  // namespace nowcast
