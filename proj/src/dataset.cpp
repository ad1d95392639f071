#include "nowcast/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace nowcast {

PrecipClass precip_class(double rate_mm_per_hr) {
    require(std::isfinite(rate_mm_per_hr), ErrorCode::InvalidArgument, "precipitation rate must be finite");
    require(rate_mm_per_hr >= 0.0, ErrorCode::InvalidArgument, "precipitation rate must be non-negative");
    if (rate_mm_per_hr < 1.0) return PrecipClass::Others;
    if (rate_mm_per_hr < 10.0) return PrecipClass::Light;
    return PrecipClass::Heavy;
}

void NowcastSample::validate() const {
    require(frames.size() == kFramesPerSample, ErrorCode::InvalidArgument, "sample needs exactly 7 frames");
    require(target_index >= 1 && target_index <= kLeadCount, ErrorCode::OutOfRange,
            "target index out of 1..6");
    for (std::size_t i = 1; i < frames.size(); ++i) {
        require(frames[i].timestamp_min - frames[i - 1].timestamp_min == kFrameStepMinutes,
                ErrorCode::InvalidArgument, "frames must be 10 minutes apart, oldest first");
        require(frames[i].height == frames[0].height && frames[i].width == frames[0].width,
                ErrorCode::ShapeMismatch, "frame dimensions differ within sample");
    }
}

void EstimationSample::validate() const {
    require(frames.size() == kFramesPerSample, ErrorCode::InvalidArgument, "sample needs exactly 7 frames");
    for (std::size_t i = 1; i < frames.size(); ++i) {
        require(frames[i].timestamp_min - frames[i - 1].timestamp_min == kFrameStepMinutes,
                ErrorCode::InvalidArgument, "frames must be 10 minutes apart, oldest first");
        require(frames[i].height == frames[0].height && frames[i].width == frames[0].width,
                ErrorCode::ShapeMismatch, "frame dimensions differ within sample");
    }
    for (const StationTarget& t : targets) {
        require(std::isfinite(t.accum_mm) && t.accum_mm >= 0.0, ErrorCode::InvalidArgument,
                "accumulation must be finite and non-negative");
    }
}

Tensor encode_target_time(int target_index, int height, int width) {
    require(target_index >= 1 && target_index <= kLeadCount, ErrorCode::OutOfRange,
            "target index out of 1..6");
    Tensor t(1, kLeadCount, height, width);
    double* p = t.plane(0, target_index - 1);
    std::fill(p, p + std::size_t(height) * width, 1.0);
    return t;
}

namespace {

void copy_frames(const std::vector<RadarGrid>& frames, Tensor& out) {
    const int h = out.h, w = out.w;
    for (int f = 0; f < kFramesPerSample; ++f) {
        const RadarGrid& g = frames[f];
        require(int(g.height) == h && int(g.width) == w, ErrorCode::ShapeMismatch,
                "frame dimensions differ within sample");
        double* p = out.plane(0, f);
        for (std::size_t i = 0; i < g.values.size(); ++i) p[i] = g.values[i];
    }
}

}  // namespace

Tensor assemble_nowcast_input(const NowcastSample& sample) {
    sample.validate();
    const int h = int(sample.frames[0].height);
    const int w = int(sample.frames[0].width);
    Tensor input(1, kFramesPerSample + kLeadCount, h, w);
    copy_frames(sample.frames, input);
    double* p = input.plane(0, kFramesPerSample + sample.target_index - 1);
    std::fill(p, p + std::size_t(h) * w, 1.0);
    return input;
}

Tensor assemble_estimation_input(const EstimationSample& sample) {
    sample.validate();
    const int h = int(sample.frames[0].height);
    const int w = int(sample.frames[0].width);
    Tensor input(1, kFramesPerSample, h, w);
    copy_frames(sample.frames, input);
    return input;
}

StationTable bind_stations(const StationTable& table, const RadarGrid& geometry) {
    StationTable bound = table;
    std::string outside;
    for (Station& s : bound.entries) {
        double fr, fc;
        geo_to_fractional_pixel(geometry, s.lat, s.lon, fr, fc);
        // nearest cell center, exact half-cell ties toward the smaller index
        const double rbase = std::floor(fr), cbase = std::floor(fc);
        const std::int64_t row = std::int64_t(rbase) + ((fr - rbase) <= 0.5 ? 0 : 1);
        const std::int64_t col = std::int64_t(cbase) + ((fc - cbase) <= 0.5 ? 0 : 1);
        if (row < 0 || col < 0 || row >= std::int64_t(geometry.height) || col >= std::int64_t(geometry.width)) {
            outside += outside.empty() ? s.id : ", " + s.id;
            continue;
        }
        s.pixel_row = row;
        s.pixel_col = col;
    }
    require(outside.empty(), ErrorCode::OutOfRange, "stations outside the grid: " + outside);
    return bound;
}

// civil-calendar conversion on the proleptic Gregorian calendar
namespace {

std::int64_t days_from_civil(int y, unsigned m, unsigned d) {
    y -= m <= 2;
    const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
    const unsigned yoe = static_cast<unsigned>(y - era * 400);
    const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

CivilDate civil_from_days(std::int64_t z) {
    z += 719468;
    const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
    const unsigned doe = static_cast<unsigned>(z - era * 146097);
    const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    const std::int64_t y = static_cast<std::int64_t>(yoe) + era * 400;
    const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    const unsigned mp = (5 * doy + 2) / 153;
    const unsigned d = doy - (153 * mp + 2) / 5 + 1;
    const unsigned m = mp + (mp < 10 ? 3 : -9);
    return {static_cast<int>(y + (m <= 2)), m, d};
}

}  // namespace

CivilDate civil_from_timestamp(std::int64_t timestamp_min) {
    std::int64_t days = timestamp_min / 1440;
    if (timestamp_min < 0 && timestamp_min % 1440 != 0) --days;
    return civil_from_days(days);
}

std::int64_t timestamp_from_civil(int year, unsigned month, unsigned day, unsigned hour, unsigned minute) {
    return days_from_civil(year, month, day) * 1440 + std::int64_t(hour) * 60 + minute;
}

namespace {

bool is_summer(unsigned month) { return month >= 6 && month <= 9; }

}  // namespace

SplitCatalog make_splits(const std::vector<std::int64_t>& timestamps_min, Phase phase) {
    SplitCatalog cat;
    for (std::int64_t t : timestamps_min) {
        const CivilDate d = civil_from_timestamp(t);
        if (phase == Phase::Pretrain) {
            if (d.year >= 2014 && d.year <= 2018) cat.pretrain_train.push_back(t);
            else if (d.year == 2019) cat.pretrain_val.push_back(t);
        } else {
            if (!is_summer(d.month)) continue;
            if (d.year >= 2014 && d.year <= 2018) cat.finetune_train.push_back(t);
            else if (d.year == 2019) cat.finetune_val.push_back(t);
            else if (d.year == 2020) cat.test.push_back(t);
        }
    }
    return cat;
}

SplitCatalog make_splits(const std::vector<std::int64_t>& timestamps_min) {
    SplitCatalog cat = make_splits(timestamps_min, Phase::Pretrain);
    SplitCatalog fine = make_splits(timestamps_min, Phase::Finetune);
    cat.finetune_train = std::move(fine.finetune_train);
    cat.finetune_val = std::move(fine.finetune_val);
    cat.test = std::move(fine.test);
    return cat;
}

void write_split(const std::vector<std::int64_t>& timestamps, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    require(out.good(), ErrorCode::IoFailure, "cannot open for writing: " + path.string());
    for (std::int64_t t : timestamps) out << t << '\n';
    require(out.good(), ErrorCode::IoFailure, "write failed: " + path.string());
}

std::vector<std::int64_t> read_split(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(in.good(), ErrorCode::IoFailure, "cannot open " + path.string());
    std::vector<std::int64_t> out;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        try {
            out.push_back(std::stoll(line));
        } catch (const std::exception&) {
            fail(ErrorCode::ParseError, "bad timestamp at line " + std::to_string(line_no));
        }
    }
    return out;
}

std::vector<Observation> read_observations(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(in.good(), ErrorCode::IoFailure, "cannot open " + path.string());
    std::string line;
    require(static_cast<bool>(std::getline(in, line)), ErrorCode::ParseError, "empty observation file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    require(line == "station_id,timestamp_minutes,accum_mm_60min", ErrorCode::ParseError,
            "unexpected observation header: " + line);
    std::vector<Observation> rows;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::istringstream ss(line);
        Observation o;
        std::string ts, mm;
        if (!std::getline(ss, o.station_id, ',') || !std::getline(ss, ts, ',') || !std::getline(ss, mm)) {
            fail(ErrorCode::ParseError, "bad observation row at line " + std::to_string(line_no));
        }
        try {
            o.timestamp_min = std::stoll(ts);
            o.accum_mm = std::stod(mm);
        } catch (const std::exception&) {
            fail(ErrorCode::ParseError, "bad observation value at line " + std::to_string(line_no));
        }
        rows.push_back(std::move(o));
    }
    return rows;
}

void write_observations(const std::vector<Observation>& rows, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    require(out.good(), ErrorCode::IoFailure, "cannot open for writing: " + path.string());
    out << "station_id,timestamp_minutes,accum_mm_60min\n";
    out.precision(10);
    for (const Observation& o : rows) {
        out << o.station_id << ',' << o.timestamp_min << ',' << o.accum_mm << '\n';
    }
    require(out.good(), ErrorCode::IoFailure, "write failed: " + path.string());
}

}  // namespace nowcast
