#include "nowcast/grid.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

namespace nowcast {

const char* error_code_name(ErrorCode code) {
    switch (code) {
        case ErrorCode::BadMagic: return "BadMagic";
        case ErrorCode::BadVersion: return "BadVersion";
        case ErrorCode::TruncatedPayload: return "TruncatedPayload";
        case ErrorCode::PayloadMismatch: return "PayloadMismatch";
        case ErrorCode::IoFailure: return "IoFailure";
        case ErrorCode::InvalidArgument: return "InvalidArgument";
        case ErrorCode::OutOfRange: return "OutOfRange";
        case ErrorCode::ShapeMismatch: return "ShapeMismatch";
        case ErrorCode::ParseError: return "ParseError";
        case ErrorCode::InsufficientData: return "InsufficientData";
        case ErrorCode::DegenerateData: return "DegenerateData";
        case ErrorCode::InfeasibleConfig: return "InfeasibleConfig";
        case ErrorCode::EmptyInput: return "EmptyInput";
    }
    return "Unknown";
}

void RadarGrid::validate() const {
    require(height > 0 && width > 0, ErrorCode::InvalidArgument, "grid dimensions must be positive");
    require(values.size() == std::size_t(height) * width, ErrorCode::ShapeMismatch,
            "value count does not match height*width");
    require(resolution_km > 0.0f, ErrorCode::InvalidArgument, "resolution must be positive");
}

namespace {

void put_bytes(std::string& out, const void* p, std::size_t n) {
    out.append(static_cast<const char*>(p), n);
}

template <typename T>
void put_le(std::string& out, T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
        std::reverse(bytes, bytes + sizeof(T));
    }
    put_bytes(out, bytes, sizeof(T));
}

template <typename T>
T get_le(const std::string& in, std::size_t& pos) {
    require(pos + sizeof(T) <= in.size(), ErrorCode::TruncatedPayload, "file ends inside header");
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, in.data() + pos, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
        std::reverse(bytes, bytes + sizeof(T));
    }
    T value;
    std::memcpy(&value, bytes, sizeof(T));
    pos += sizeof(T);
    return value;
}

}  // namespace

RadarGrid read_radar_grid(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorCode::IoFailure, "cannot open " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    const std::string bytes = buf.str();

    require(bytes.size() >= 4, ErrorCode::TruncatedPayload, "file shorter than magic");
    require(bytes.compare(0, 4, "RGR1") == 0, ErrorCode::BadMagic, "not an RGR1 file: " + path.string());
    std::size_t pos = 4;

    const auto version = get_le<std::uint8_t>(bytes, pos);
    require(version == 1, ErrorCode::BadVersion, "unsupported RGR1 version " + std::to_string(version));

    RadarGrid g;
    g.height = get_le<std::uint32_t>(bytes, pos);
    g.width = get_le<std::uint32_t>(bytes, pos);
    g.resolution_km = get_le<float>(bytes, pos);
    g.timestamp_min = get_le<std::int64_t>(bytes, pos);
    g.origin_lat = get_le<double>(bytes, pos);
    g.origin_lon = get_le<double>(bytes, pos);

    const std::size_t cells = std::size_t(g.height) * g.width;
    const std::size_t payload = bytes.size() - pos;
    require(payload == cells * sizeof(float), ErrorCode::PayloadMismatch,
            "header says " + std::to_string(cells) + " cells but payload holds " +
                std::to_string(payload / sizeof(float)) + " floats");
    g.values.resize(cells);
    for (std::size_t i = 0; i < cells; ++i) {
        g.values[i] = get_le<float>(bytes, pos);
    }
    g.validate();
    return g;
}

void write_radar_grid(const RadarGrid& grid, const std::filesystem::path& path) {
    grid.validate();
    std::string bytes;
    bytes.reserve(kRgr1HeaderBytes + grid.values.size() * sizeof(float));
    bytes.append("RGR1");
    put_le<std::uint8_t>(bytes, 1);
    put_le<std::uint32_t>(bytes, grid.height);
    put_le<std::uint32_t>(bytes, grid.width);
    put_le<float>(bytes, grid.resolution_km);
    put_le<std::int64_t>(bytes, grid.timestamp_min);
    put_le<double>(bytes, grid.origin_lat);
    put_le<double>(bytes, grid.origin_lon);
    for (float v : grid.values) put_le<float>(bytes, v);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(out.good(), ErrorCode::IoFailure, "cannot open for writing: " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    require(out.good(), ErrorCode::IoFailure, "write failed: " + path.string());
}

float clamp_reflectivity(float r, int r_max) {
    require(r_max >= 1, ErrorCode::InvalidArgument, "r_max must be at least 1");
    if (std::isnan(r)) return r;  // missing stays missing
    const float hi = static_cast<float>(r_max) - 0.5f;
    return std::min(std::max(-0.5f, r), hi);
}

RadarGrid clamp_grid(const RadarGrid& grid, int r_max) {
    RadarGrid out = grid;
    for (float& v : out.values) v = clamp_reflectivity(v, r_max);
    return out;
}

RadarGrid mean_pool(const RadarGrid& grid, int factor) {
    grid.validate();
    require(factor == 2 || factor == 4, ErrorCode::InvalidArgument, "pooling factor must be 2 or 4");
    require(grid.height % factor == 0 && grid.width % factor == 0, ErrorCode::ShapeMismatch,
            "grid dimensions not divisible by pooling factor");

    RadarGrid out;
    out.timestamp_min = grid.timestamp_min;
    out.height = grid.height / factor;
    out.width = grid.width / factor;
    out.resolution_km = grid.resolution_km * static_cast<float>(factor);
    // new cell centers sit at the centers of the factor x factor blocks
    const double shift_km = 0.5 * (factor - 1) * grid.resolution_km;
    out.origin_lat = grid.origin_lat - shift_km / kKmPerDegree;
    out.origin_lon = grid.origin_lon + shift_km / (kKmPerDegree * std::cos(grid.origin_lat * M_PI / 180.0));
    out.values.resize(std::size_t(out.height) * out.width);

    for (std::uint32_t r = 0; r < out.height; ++r) {
        for (std::uint32_t c = 0; c < out.width; ++c) {
            double sum = 0.0;
            int present = 0;
            for (int dr = 0; dr < factor; ++dr) {
                for (int dc = 0; dc < factor; ++dc) {
                    const float v = grid.at(r * factor + dr, c * factor + dc);
                    if (!std::isnan(v)) {
                        sum += v;
                        ++present;
                    }
                }
            }
            out.at(r, c) = present == 0 ? std::numeric_limits<float>::quiet_NaN()
                                        : static_cast<float>(sum / present);
        }
    }
    return out;
}

StationTable read_station_table(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(in.good(), ErrorCode::IoFailure, "cannot open " + path.string());
    std::string line;
    require(static_cast<bool>(std::getline(in, line)), ErrorCode::ParseError, "empty station table");
    // tolerate trailing CR from foreign line endings
    if (!line.empty() && line.back() == '\r') line.pop_back();
    require(line == "station_id,lat,lon", ErrorCode::ParseError,
            "unexpected station table header: " + line);

    StationTable table;
    std::set<std::string> seen;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::istringstream ss(line);
        Station s;
        std::string lat_s, lon_s;
        if (!std::getline(ss, s.id, ',') || !std::getline(ss, lat_s, ',') || !std::getline(ss, lon_s)) {
            fail(ErrorCode::ParseError, "bad station row at line " + std::to_string(line_no));
        }
        try {
            s.lat = std::stod(lat_s);
            s.lon = std::stod(lon_s);
        } catch (const std::exception&) {
            fail(ErrorCode::ParseError, "bad coordinate at line " + std::to_string(line_no));
        }
        require(seen.insert(s.id).second, ErrorCode::InvalidArgument, "duplicate station id " + s.id);
        table.entries.push_back(std::move(s));
    }
    return table;
}

void write_station_table(const StationTable& table, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    require(out.good(), ErrorCode::IoFailure, "cannot open for writing: " + path.string());
    out << "station_id,lat,lon\n";
    out.precision(10);
    for (const Station& s : table.entries) {
        out << s.id << ',' << s.lat << ',' << s.lon << '\n';
    }
    require(out.good(), ErrorCode::IoFailure, "write failed: " + path.string());
}

void geo_to_fractional_pixel(const RadarGrid& grid, double lat, double lon, double& row, double& col) {
    const double km_per_deg_lon = kKmPerDegree * std::cos(grid.origin_lat * M_PI / 180.0);
    row = (grid.origin_lat - lat) * kKmPerDegree / grid.resolution_km;
    col = (lon - grid.origin_lon) * km_per_deg_lon / grid.resolution_km;
}

}  // namespace nowcast
