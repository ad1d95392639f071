#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <vector>

#include "nowcast/grid.hpp"
#include "nowcast/tensor.hpp"

namespace nowcast {

constexpr int kFramesPerSample = 7;     // input frames t-60..t
constexpr int kFrameStepMinutes = 10;
constexpr int kLeadCount = 6;           // target times t+60..t+360
constexpr int kLeadStepMinutes = 60;

/// Ordinal precipitation class. RAIN is the derived union LIGHT + HEAVY.
enum class PrecipClass : int { Others = 0, Light = 1, Heavy = 2 };

/// Binary event used for scoring and the differentiable loss.
enum class EventClass : int { Rain = 0, Heavy = 1 };

/// <1 mm/hr -> Others, [1,10) -> Light, >=10 -> Heavy.
PrecipClass precip_class(double rate_mm_per_hr);

struct StationLabel {
    std::int64_t pixel_row = 0;  // input-grid coordinates
    std::int64_t pixel_col = 0;
    PrecipClass cls = PrecipClass::Others;
};

struct StationTarget {
    std::int64_t pixel_row = 0;
    std::int64_t pixel_col = 0;
    double accum_mm = 0.0;  // precipitation accumulated over the past hour
};

/// Seven consecutive frames plus one target lead time and sparse labels.
struct NowcastSample {
    std::vector<RadarGrid> frames;  // oldest to newest, 10-minute spacing
    int target_index = 1;           // 1..6, lead = 60 * target_index minutes
    std::vector<StationLabel> labels;

    void validate() const;
};

struct EstimationSample {
    std::vector<RadarGrid> frames;
    std::vector<StationTarget> targets;

    void validate() const;
};

struct SplitCatalog {
    std::vector<std::int64_t> pretrain_train;
    std::vector<std::int64_t> pretrain_val;
    std::vector<std::int64_t> finetune_train;
    std::vector<std::int64_t> finetune_val;
    std::vector<std::int64_t> test;
};

enum class Phase { Pretrain, Finetune };

/// 6 x h x w field with channel (target_index - 1) all ones, rest zero.
Tensor encode_target_time(int target_index, int height, int width);

/// Channels 1..7 are the frames oldest to newest, channels 8..13 the
/// target-time encoding. Frames must share dimensions.
Tensor assemble_nowcast_input(const NowcastSample& sample);

/// Frames only, 7 channels.
Tensor assemble_estimation_input(const EstimationSample& sample);

/// Binds every station to the nearest cell center of the grid geometry.
/// Ties go to the smaller row, then the smaller column. Stations outside
/// the grid raise an error listing the offending ids.
StationTable bind_stations(const StationTable& table, const RadarGrid& geometry);

/// Calendar splits. Pretraining uses 2014-2018 for training and 2019 for
/// validation, all months. Fine-tuning restricts to June-September and
/// adds the 2020 summer as the test split. Timestamps outside the ranges
/// are dropped. Only the requested phase's lists are populated.
SplitCatalog make_splits(const std::vector<std::int64_t>& timestamps_min, Phase phase);

/// Both phases at once.
SplitCatalog make_splits(const std::vector<std::int64_t>& timestamps_min);

struct CivilDate {
    int year;
    unsigned month;  // 1..12
    unsigned day;    // 1..31
};

CivilDate civil_from_timestamp(std::int64_t timestamp_min);
std::int64_t timestamp_from_civil(int year, unsigned month, unsigned day,
                                  unsigned hour = 0, unsigned minute = 0);

/// Plain-text split serialization: one timestamp per line.
void write_split(const std::vector<std::int64_t>& timestamps, const std::filesystem::path& path);
std::vector<std::int64_t> read_split(const std::filesystem::path& path);

/// Precipitation observations CSV: station_id,timestamp_minutes,accum_mm_60min
struct Observation {
    std::string station_id;
    std::int64_t timestamp_min = 0;
    double accum_mm = 0.0;
};

std::vector<Observation> read_observations(const std::filesystem::path& path);
void write_observations(const std::vector<Observation>& rows, const std::filesystem::path& path);

}  // namespace nowcast
