#include "nowcast/synth.hpp"

#include <cmath>
#include <string>

#include "nowcast/rng.hpp"

namespace nowcast {

namespace {

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 0x7f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

struct Bump {
    double row, col;       // center at the first frame
    double vrow, vcol;     // cells per frame
    double amp_dbz;
    double sigma;
};

}  // namespace

void SynthScenario::validate() const {
    require(grid_hw >= 8, ErrorCode::InvalidArgument, "grid too small");
    require(cell_count >= 1, ErrorCode::InvalidArgument, "at least one rain cell required");
    require(heavy_prevalence > 0.0 && heavy_prevalence < 1.0, ErrorCode::InvalidArgument,
            "heavy prevalence must lie strictly between 0 and 1");
    require(amp_min_dbz >= 0.0 && amp_max_dbz >= amp_min_dbz, ErrorCode::InvalidArgument,
            "bad amplitude range");
    require(heavy_amp_dbz + background_dbz <= double(r_max) - 0.5, ErrorCode::InvalidArgument,
            "amplitudes must stay below the clamping ceiling");
    require(width_min > 0.0 && width_max >= width_min, ErrorCode::InvalidArgument, "bad width range");
    require(heavy_width > 0.0, ErrorCode::InvalidArgument, "heavy width must be positive");
    require(speed_max >= 0.0, ErrorCode::InvalidArgument, "speed must be non-negative");
}

SynthSequence gen_sequence(const SynthScenario& scenario, std::int64_t start_time_min, int length) {
    scenario.validate();
    require(length >= 1, ErrorCode::InvalidArgument, "sequence length must be positive");

    Rng rng(mix_seed(scenario.seed, std::uint64_t(start_time_min)));
    const double hw = double(scenario.grid_hw);
    // keep centers away from the border so advected mass stays on-grid
    const double pad = hw / 4.0;

    std::vector<Bump> bumps(scenario.cell_count);
    const bool heavy_episode = rng.uniform() < scenario.heavy_event_rate;
    for (int k = 0; k < scenario.cell_count; ++k) {
        Bump& b = bumps[k];
        b.row = rng.uniform(pad, hw - pad);
        b.col = rng.uniform(pad, hw - pad);
        b.vrow = rng.uniform(-scenario.speed_max, scenario.speed_max);
        b.vcol = rng.uniform(-scenario.speed_max, scenario.speed_max);
        b.amp_dbz = rng.uniform(scenario.amp_min_dbz, scenario.amp_max_dbz);
        b.sigma = rng.uniform(scenario.width_min, scenario.width_max);
        if (k == 0 && heavy_episode) {
            b.amp_dbz = scenario.heavy_amp_dbz;
            b.sigma = scenario.heavy_width;
        }
    }

    SynthSequence seq;
    seq.frames.reserve(length);
    seq.rates.reserve(length);
    for (int f = 0; f < length; ++f) {
        RadarGrid g;
        g.timestamp_min = start_time_min + std::int64_t(f) * kFrameStepMinutes;
        g.height = g.width = std::uint32_t(scenario.grid_hw);
        g.resolution_km = float(scenario.resolution_km);
        g.origin_lat = scenario.origin_lat;
        g.origin_lon = scenario.origin_lon;
        g.values.resize(std::size_t(scenario.grid_hw) * scenario.grid_hw);
        std::vector<double> rates(g.values.size());
        for (int r = 0; r < scenario.grid_hw; ++r) {
            for (int c = 0; c < scenario.grid_hw; ++c) {
                double v = scenario.background_dbz;
                for (const Bump& b : bumps) {
                    const double dr = r - (b.row + b.vrow * f);
                    const double dc = c - (b.col + b.vcol * f);
                    v += b.amp_dbz * std::exp(-(dr * dr + dc * dc) / (2.0 * b.sigma * b.sigma));
                }
                const float stored = clamp_reflectivity(float(v), scenario.r_max);
                g.values[std::size_t(r) * scenario.grid_hw + c] = stored;
                rates[std::size_t(r) * scenario.grid_hw + c] = zr_rate(double(stored), scenario.zr);
            }
        }
        seq.frames.push_back(std::move(g));
        seq.rates.push_back(std::move(rates));
    }
    return seq;
}

std::vector<StationTruth> gen_station_truth(const SynthSequence& seq, std::size_t window_end_frame,
                                            const StationTable& bound_stations) {
    require(window_end_frame + 1 >= std::size_t(kFramesPerSample) &&
                window_end_frame < seq.frames.size(),
            ErrorCode::OutOfRange, "window does not fit the sequence");
    const std::uint32_t width = seq.frames[0].width;
    std::vector<StationTruth> out;
    out.reserve(bound_stations.entries.size());
    for (const Station& s : bound_stations.entries) {
        require(s.pixel_row >= 0 && s.pixel_col >= 0, ErrorCode::InvalidArgument,
                "stations must be bound first");
        const std::size_t pix = std::size_t(s.pixel_row) * width + std::size_t(s.pixel_col);
        double sum = 0.0;
        for (int k = kFramesPerSample - 1; k >= 0; --k) {
            sum += seq.rates[window_end_frame - std::size_t(k)][pix];
        }
        StationTruth t;
        t.accum_mm = sum / double(kFramesPerSample);
        t.cls = precip_class(t.accum_mm);
        out.push_back(t);
    }
    return out;
}

double SynthDataset::heavy_fraction() const {
    std::size_t heavy = 0, total = 0;
    for (const LabeledEpisode& ep : episodes) {
        for (const auto& lead : ep.truths_per_lead) {
            for (const StationTruth& t : lead) {
                ++total;
                if (t.cls == PrecipClass::Heavy) ++heavy;
            }
        }
    }
    return total == 0 ? 0.0 : double(heavy) / double(total);
}

namespace {

constexpr int kEpisodeFrames = kFramesPerSample + kLeadCount * (kLeadStepMinutes / kFrameStepMinutes);

SynthDataset build_dataset(const SynthScenario& scenario, int episode_count, int station_count,
                           int patch_offset, int patch_hw, std::int64_t first_t0) {
    SynthDataset ds;
    ds.scenario = scenario;

    // stations on cell centers spread over the output patch
    RadarGrid geometry;
    geometry.height = geometry.width = std::uint32_t(scenario.grid_hw);
    geometry.resolution_km = float(scenario.resolution_km);
    geometry.origin_lat = scenario.origin_lat;
    geometry.origin_lon = scenario.origin_lon;
    geometry.values.assign(std::size_t(scenario.grid_hw) * scenario.grid_hw, 0.0f);

    Rng srng(mix_seed(scenario.seed, 0x57a71035ULL));
    StationTable table;
    for (int i = 0; i < station_count; ++i) {
        const std::int64_t row = patch_offset + std::int64_t(srng.below(std::uint64_t(patch_hw)));
        const std::int64_t col = patch_offset + std::int64_t(srng.below(std::uint64_t(patch_hw)));
        Station s;
        s.id = "S" + std::to_string(i);
        s.lat = scenario.origin_lat - double(row) * scenario.resolution_km / kKmPerDegree;
        s.lon = scenario.origin_lon + double(col) * scenario.resolution_km /
                                          (kKmPerDegree * std::cos(scenario.origin_lat * M_PI / 180.0));
        table.entries.push_back(std::move(s));
    }
    ds.stations = bind_stations(table, geometry);

    for (int e = 0; e < episode_count; ++e) {
        LabeledEpisode ep;
        ep.t0 = first_t0 + std::int64_t(e) * 1440;  // one day per episode
        const std::int64_t start = ep.t0 - (kFramesPerSample - 1) * kFrameStepMinutes;
        ep.seq = gen_sequence(scenario, start, kEpisodeFrames);
        ep.truth_now = gen_station_truth(ep.seq, kFramesPerSample - 1, ds.stations);
        for (int lead = 1; lead <= kLeadCount; ++lead) {
            const std::size_t end = std::size_t(kFramesPerSample - 1 + lead * 6);
            ep.truths_per_lead.push_back(gen_station_truth(ep.seq, end, ds.stations));
        }
        ds.episodes.push_back(std::move(ep));
    }
    return ds;
}

}  // namespace

namespace {

void check_set_arguments(const SynthScenario& scenario, int episode_count, int station_count,
                         int patch_offset, int patch_hw) {
    scenario.validate();
    require(episode_count >= 1 && station_count >= 1, ErrorCode::InvalidArgument,
            "need at least one episode and one station");
    require(patch_offset >= 0 && patch_hw >= 1 && patch_offset + patch_hw <= scenario.grid_hw,
            ErrorCode::OutOfRange, "station patch outside the grid");
}

}  // namespace

SynthDataset gen_labeled_set(const SynthScenario& scenario, int episode_count, int station_count,
                             int patch_offset, int patch_hw, std::int64_t first_t0) {
    check_set_arguments(scenario, episode_count, station_count, patch_offset, patch_hw);
    return build_dataset(scenario, episode_count, station_count, patch_offset, patch_hw, first_t0);
}

SynthDataset gen_imbalanced_set(const SynthScenario& scenario, int episode_count, int station_count,
                                int patch_offset, int patch_hw, std::int64_t first_t0) {
    check_set_arguments(scenario, episode_count, station_count, patch_offset, patch_hw);

    SynthScenario tuned = scenario;
    const double target = scenario.heavy_prevalence;
    constexpr int kMaxAttempts = 24;
    // the label fraction is a step function of the event rate (each
    // episode flips at its own draw), so a bracket plus bisection reaches
    // single-episode granularity when plain rescaling oscillates
    double rate_under = -1.0, rate_over = -1.0;
    std::string history;
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
        SynthDataset ds = build_dataset(tuned, episode_count, station_count, patch_offset, patch_hw,
                                        first_t0);
        const double f = ds.heavy_fraction();
        if (f >= 0.8 * target && f <= 1.2 * target) return ds;
        history += " (" + std::to_string(tuned.heavy_event_rate) + " -> " + std::to_string(f) + ")";
        if (f < 0.8 * target) rate_under = std::max(rate_under, tuned.heavy_event_rate);
        else rate_over = rate_over < 0 ? tuned.heavy_event_rate
                                       : std::min(rate_over, tuned.heavy_event_rate);
        double next;
        if (rate_under >= 0 && rate_over >= 0) {
            next = 0.5 * (rate_under + rate_over);
        } else {
            const double adjust = f <= 0.0 ? 4.0 : target / f;
            next = tuned.heavy_event_rate * adjust;
        }
        tuned.heavy_event_rate = std::min(1.0, std::max(1e-4, next));
    }
    fail(ErrorCode::DegenerateData, "could not reach heavy prevalence " + std::to_string(target) +
                                        "; attempts:" + history);
}

}  // namespace nowcast
