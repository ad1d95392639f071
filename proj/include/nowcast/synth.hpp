#pragma once

#include <cstdint>
#include <vector>

#include "nowcast/baselines.hpp"
#include "nowcast/dataset.hpp"
#include "nowcast/grid.hpp"

namespace nowcast {

/// Deterministic generator of advecting-Gaussian reflectivity fields with
/// exactly known rain rates, standing in for real radar archives at desk
/// scale.
struct SynthScenario {
    std::uint64_t seed = 1;
    int grid_hw = 64;
    int cell_count = 3;              // Gaussian bumps per episode
    double amp_min_dbz = 20.0;       // per-bump peak range
    double amp_max_dbz = 34.0;
    double heavy_amp_dbz = 44.0;     // peak used for heavy-event bumps
    double heavy_width = 5.0;        // heavy-bump sigma, in cells
    double width_min = 3.0;          // bump sigma range, in cells
    double width_max = 6.0;
    double speed_max = 1.2;          // cells per 10-minute step
    double background_dbz = 3.0;
    double heavy_prevalence = 0.02;  // target fraction of HEAVY station labels
    double heavy_event_rate = 0.05;  // per-episode chance of one heavy bump; tuned by the generator
    int r_max = kDefaultReflectivityMax;
    ZRParams zr{200.0, 1.49};
    double origin_lat = 38.0;
    double origin_lon = 126.0;
    double resolution_km = 1.0;

    void validate() const;
};

struct SynthSequence {
    std::vector<RadarGrid> frames;              // reflectivity, clamped
    std::vector<std::vector<double>> rates;     // true mm/hr per pixel per frame
};

/// Frames at 10-minute spacing starting at start_time_min. Bit-identical
/// for identical (scenario, start time, length).
SynthSequence gen_sequence(const SynthScenario& scenario, std::int64_t start_time_min, int length);

struct StationTruth {
    double accum_mm = 0.0;
    PrecipClass cls = PrecipClass::Others;
};

/// 60-minute accumulation and class per station from the true rates of
/// the 7 frames ending the window, mirroring the hourly-mean convention
/// of the ZR baseline.
std::vector<StationTruth> gen_station_truth(const SynthSequence& seq, std::size_t window_end_frame,
                                            const StationTable& bound_stations);

struct LabeledEpisode {
    std::int64_t t0 = 0;                       // newest input frame time
    SynthSequence seq;                          // frames t0-60 .. t0+360
    // station truths per lead index 0..5 (window ending at t0 + 60*(k+1))
    std::vector<std::vector<StationTruth>> truths_per_lead;
    std::vector<StationTruth> truth_now;        // window ending at t0 (estimation)
};

struct SynthDataset {
    SynthScenario scenario;
    StationTable stations;  // bound to the episode grid geometry
    std::vector<LabeledEpisode> episodes;

    /// Fraction of HEAVY labels across all leads and stations.
    double heavy_fraction() const;
};

/// Places stations inside the given central patch and generates
/// episodes at the scenario's fixed heavy-event rate, one day apart.
SynthDataset gen_labeled_set(const SynthScenario& scenario, int episode_count, int station_count,
                             int patch_offset, int patch_hw, std::int64_t first_t0);

/// Same, but retunes the heavy-event rate until the HEAVY label fraction
/// lands within 20% relative of scenario.heavy_prevalence; errors after a
/// bounded number of attempts.
SynthDataset gen_imbalanced_set(const SynthScenario& scenario, int episode_count, int station_count,
                                int patch_offset, int patch_hw, std::int64_t first_t0);

}  // namespace nowcast
