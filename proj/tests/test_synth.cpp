#include <cmath>

#include "doctest.h"
#include "nowcast/synth.hpp"

using namespace nowcast;

namespace {

SynthScenario small_scenario() {
    SynthScenario s;
    s.seed = 404;
    s.grid_hw = 48;
    s.cell_count = 2;
    s.speed_max = 0.2;
    return s;
}

}  // namespace

TEST_CASE("sequences are deterministic in seed and start time") {
    const SynthScenario s = small_scenario();
    const SynthSequence a = gen_sequence(s, 10000, 10);
    const SynthSequence b = gen_sequence(s, 10000, 10);
    REQUIRE(a.frames.size() == b.frames.size());
    for (std::size_t f = 0; f < a.frames.size(); ++f) {
        CHECK(a.frames[f].values == b.frames[f].values);
        CHECK(a.rates[f] == b.rates[f]);
    }
    const SynthSequence c = gen_sequence(s, 11000, 10);
    CHECK(a.frames[0].values != c.frames[0].values);
}

TEST_CASE("zero velocity freezes the field") {
    SynthScenario s = small_scenario();
    s.speed_max = 0.0;
    const SynthSequence seq = gen_sequence(s, 5000, 8);
    for (std::size_t f = 1; f < seq.frames.size(); ++f) {
        CHECK(seq.frames[f].values == seq.frames[0].values);
    }
}

TEST_CASE("above-background mass is conserved while bumps stay inside") {
    SynthScenario s = small_scenario();
    s.grid_hw = 64;
    s.speed_max = 0.15;
    const SynthSequence seq = gen_sequence(s, 777 * 1440, 43);
    std::vector<double> masses;
    for (const RadarGrid& g : seq.frames) {
        double mass = 0.0;
        for (float v : g.values) mass += double(v) - s.background_dbz;
        masses.push_back(mass);
    }
    for (double m : masses) {
        CHECK(m == doctest::Approx(masses.front()).epsilon(0.01));
    }
}

TEST_CASE("station truth follows the window mean") {
    SynthScenario s = small_scenario();
    const int hw = s.grid_hw;
    StationTable stations;
    stations.entries.push_back({"S0", 0, 0, hw / 2, hw / 2});

    SynthSequence seq;
    seq.frames.resize(7);
    seq.rates.resize(7);
    for (int f = 0; f < 7; ++f) {
        seq.frames[f].height = seq.frames[f].width = std::uint32_t(hw);
        seq.frames[f].values.assign(std::size_t(hw) * hw, 0.0f);
        seq.rates[f].assign(std::size_t(hw) * hw, 0.0);
    }
    const std::size_t pix = std::size_t(hw / 2) * hw + hw / 2;

    SUBCASE("constant 2 mm/hr is LIGHT") {
        for (int f = 0; f < 7; ++f) seq.rates[f][pix] = 2.0;
        const auto truth = gen_station_truth(seq, 6, stations);
        CHECK(truth[0].accum_mm == doctest::Approx(2.0));
        CHECK(truth[0].cls == PrecipClass::Light);
    }
    SUBCASE("constant 12 mm/hr is HEAVY") {
        for (int f = 0; f < 7; ++f) seq.rates[f][pix] = 12.0;
        const auto truth = gen_station_truth(seq, 6, stations);
        CHECK(truth[0].cls == PrecipClass::Heavy);
    }
    SUBCASE("a 0..14 ramp averages to 7, LIGHT") {
        for (int f = 0; f < 7; ++f) seq.rates[f][pix] = 14.0 * f / 6.0;
        const auto truth = gen_station_truth(seq, 6, stations);
        CHECK(truth[0].accum_mm == doctest::Approx(7.0));
        CHECK(truth[0].cls == PrecipClass::Light);
    }
}

TEST_CASE("synthetic truth is consistent with the zr baseline") {
    // the baseline applied with the generating law must reproduce the
    // stored accumulations exactly
    SynthScenario s = small_scenario();
    s.amp_min_dbz = 20.0;
    s.amp_max_dbz = 28.0;
    s.width_min = 2.0;
    s.width_max = 4.0;
    s.heavy_event_rate = 0.6;
    s.heavy_prevalence = 0.05;
    const SynthDataset ds = gen_imbalanced_set(s, 12, 8, 12, 24, 1440 * 100);
    for (const LabeledEpisode& ep : ds.episodes) {
        std::vector<RadarGrid> window(ep.seq.frames.begin(),
                                      ep.seq.frames.begin() + kFramesPerSample);
        for (std::size_t i = 0; i < ds.stations.entries.size(); ++i) {
            const Station& st = ds.stations.entries[i];
            const HourlyEstimate e = zr_hourly_estimate(window, s.zr, st.pixel_row, st.pixel_col);
            CHECK(std::abs(e.accum_mm - ep.truth_now[i].accum_mm) < 1e-9);
        }
    }
}

TEST_CASE("imbalanced sets hit the prevalence target") {
    SynthScenario s = small_scenario();
    s.amp_min_dbz = 20.0;
    s.amp_max_dbz = 28.0;
    s.width_min = 2.0;
    s.width_max = 4.0;
    s.heavy_prevalence = 0.02;
    const SynthDataset ds = gen_imbalanced_set(s, 60, 8, 12, 24, 1440 * 10);
    const double f = ds.heavy_fraction();
    CHECK(f >= 0.8 * 0.02);
    CHECK(f <= 1.2 * 0.02);

    SUBCASE("deterministic per seed") {
        const SynthDataset again = gen_imbalanced_set(s, 60, 8, 12, 24, 1440 * 10);
        CHECK(again.heavy_fraction() == f);
        REQUIRE(again.episodes.size() == ds.episodes.size());
        CHECK(again.episodes[5].seq.frames[0].values == ds.episodes[5].seq.frames[0].values);
    }
}

TEST_CASE("invalid prevalence targets are rejected") {
    SynthScenario s = small_scenario();
    s.heavy_prevalence = 0.0;
    CHECK_THROWS_AS(s.validate(), Error);
    s.heavy_prevalence = 1.0;
    CHECK_THROWS_AS(s.validate(), Error);
}
