#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "nowcast/dataset.hpp"
#include "nowcast/rng.hpp"

using namespace nowcast;

namespace {

RadarGrid frame_at(std::int64_t t, std::uint32_t hw = 4) {
    RadarGrid g;
    g.timestamp_min = t;
    g.height = g.width = hw;
    g.resolution_km = 1.0f;
    g.origin_lat = 38.0;
    g.origin_lon = 126.0;
    g.values.assign(std::size_t(hw) * hw, float(t % 97));
    return g;
}

NowcastSample sample_at(std::int64_t t0, int target_index) {
    NowcastSample s;
    for (int f = 0; f < kFramesPerSample; ++f) {
        s.frames.push_back(frame_at(t0 - (kFramesPerSample - 1 - f) * kFrameStepMinutes));
    }
    s.target_index = target_index;
    return s;
}

}  // namespace

TEST_CASE("precipitation classes") {
    CHECK(precip_class(0.5) == PrecipClass::Others);
    CHECK(precip_class(10.0) == PrecipClass::Heavy);
    CHECK(precip_class(1.0) == PrecipClass::Light);
    CHECK(precip_class(0.0) == PrecipClass::Others);
    CHECK(precip_class(9.999) == PrecipClass::Light);
    CHECK_THROWS_AS(precip_class(-0.1), Error);
    CHECK_THROWS_AS(precip_class(std::nan("")), Error);
}

TEST_CASE("precip_class is monotone in the rate") {
    Rng rng(5);
    for (int i = 0; i < 300; ++i) {
        const double a = rng.uniform(0, 20), b = rng.uniform(0, 20);
        const double lo = std::min(a, b), hi = std::max(a, b);
        CHECK(int(precip_class(lo)) <= int(precip_class(hi)));
    }
}

TEST_CASE("target time encoding is one-hot per pixel") {
    const Tensor t = encode_target_time(3, 2, 2);
    CHECK(t.c == 6);
    CHECK(t.h == 2);
    for (int i = 0; i < 2; ++i) {
        for (int j = 0; j < 2; ++j) {
            double sum = 0;
            for (int c = 0; c < 6; ++c) sum += t.at(0, c, i, j);
            CHECK(sum == 1.0);
            CHECK(t.at(0, 2, i, j) == 1.0);
        }
    }
    const Tensor single = encode_target_time(1, 1, 1);
    CHECK(single.at(0, 0, 0, 0) == 1.0);
    for (int c = 1; c < 6; ++c) CHECK(single.at(0, c, 0, 0) == 0.0);
    CHECK_THROWS_AS(encode_target_time(0, 2, 2), Error);
    CHECK_THROWS_AS(encode_target_time(7, 2, 2), Error);
}

TEST_CASE("nowcast input assembly") {
    NowcastSample s = sample_at(600, 2);
    const Tensor input = assemble_nowcast_input(s);
    CHECK(input.c == 13);
    // channel 7 (index 6) is the newest frame
    CHECK(input.at(0, 6, 1, 1) == doctest::Approx(double(s.frames[6].values[0])));
    // time channel 8+1 set, others clear
    CHECK(input.at(0, 7 + 1, 0, 0) == 1.0);
    CHECK(input.at(0, 7, 0, 0) == 0.0);

    SUBCASE("distinct target times produce distinct encodings") {
        NowcastSample s2 = sample_at(600, 5);
        const Tensor other = assemble_nowcast_input(s2);
        CHECK(input.data != other.data);
    }

    SUBCASE("mismatched frame dimensions are an error") {
        s.frames[3] = frame_at(s.frames[3].timestamp_min, 5);
        CHECK_THROWS_AS(assemble_nowcast_input(s), Error);
    }

    SUBCASE("frames must be ten minutes apart") {
        s.frames[2].timestamp_min += 5;
        CHECK_THROWS_AS(assemble_nowcast_input(s), Error);
    }
}

TEST_CASE("estimation input assembly has 7 channels") {
    EstimationSample s;
    for (int f = 0; f < kFramesPerSample; ++f) {
        s.frames.push_back(frame_at(600 - (kFramesPerSample - 1 - f) * kFrameStepMinutes));
    }
    const Tensor input = assemble_estimation_input(s);
    CHECK(input.c == 7);
    CHECK(input.at(0, 0, 0, 0) == doctest::Approx(double(s.frames[0].values[0])));
}

TEST_CASE("station binding picks the nearest cell center") {
    RadarGrid g = frame_at(0, 10);
    StationTable t;
    const double cell_deg_lat = g.resolution_km / kKmPerDegree;
    const double cell_deg_lon =
        g.resolution_km / (kKmPerDegree * std::cos(g.origin_lat * M_PI / 180.0));

    SUBCASE("exact cell center and the origin") {
        t.entries.push_back({"center", g.origin_lat - 3 * cell_deg_lat,
                             g.origin_lon + 4 * cell_deg_lon, -1, -1});
        t.entries.push_back({"origin", g.origin_lat, g.origin_lon, -1, -1});
        const StationTable bound = bind_stations(t, g);
        CHECK(bound.entries[0].pixel_row == 3);
        CHECK(bound.entries[0].pixel_col == 4);
        CHECK(bound.entries[1].pixel_row == 0);
        CHECK(bound.entries[1].pixel_col == 0);
    }

    SUBCASE("0.6 cells east rounds to the next column") {
        t.entries.push_back({"east", g.origin_lat - 2 * cell_deg_lat,
                             g.origin_lon + (5 + 0.6) * cell_deg_lon, -1, -1});
        const StationTable bound = bind_stations(t, g);
        CHECK(bound.entries[0].pixel_row == 2);
        CHECK(bound.entries[0].pixel_col == 6);
    }

    SUBCASE("half-cell ties go to the smaller index") {
        t.entries.push_back({"tie", g.origin_lat - 2.5 * cell_deg_lat,
                             g.origin_lon + 2 * cell_deg_lon, -1, -1});
        const StationTable bound = bind_stations(t, g);
        CHECK(bound.entries[0].pixel_row == 2);
    }

    SUBCASE("stations outside the grid are reported by id") {
        t.entries.push_back({"gone", g.origin_lat + 5.0, g.origin_lon, -1, -1});
        t.entries.push_back({"ok", g.origin_lat, g.origin_lon, -1, -1});
        CHECK_THROWS_WITH_AS(bind_stations(t, g), doctest::Contains("gone"), Error);
    }
}

TEST_CASE("calendar conversion round trips") {
    const std::int64_t t = timestamp_from_civil(2017, 3, 15, 12, 30);
    const CivilDate d = civil_from_timestamp(t);
    CHECK(d.year == 2017);
    CHECK(d.month == 3);
    CHECK(d.day == 15);
    CHECK(t % 1440 == 12 * 60 + 30);
}

TEST_CASE("temporal splits follow the phase rules") {
    const std::int64_t march_2017 = timestamp_from_civil(2017, 3, 15);
    const std::int64_t july_2020 = timestamp_from_civil(2020, 7, 1);
    const std::int64_t aug_2019 = timestamp_from_civil(2019, 8, 1);
    const std::int64_t jan_2021 = timestamp_from_civil(2021, 1, 1);
    const std::vector<std::int64_t> all = {march_2017, july_2020, aug_2019, jan_2021};

    const SplitCatalog pre = make_splits(all, Phase::Pretrain);
    CHECK(pre.pretrain_train == std::vector<std::int64_t>{march_2017});
    CHECK(pre.pretrain_val == std::vector<std::int64_t>{aug_2019});
    CHECK(pre.test.empty());

    const SplitCatalog fine = make_splits(all, Phase::Finetune);
    CHECK(fine.finetune_train.empty());  // March is outside the summer window
    CHECK(fine.finetune_val == std::vector<std::int64_t>{aug_2019});
    CHECK(fine.test == std::vector<std::int64_t>{july_2020});

    const SplitCatalog both = make_splits(all);
    CHECK(both.pretrain_train.size() == 1);
    CHECK(both.finetune_val.size() == 1);

    SUBCASE("summer 2016 lands in both training splits") {
        const std::int64_t june_2016 = timestamp_from_civil(2016, 6, 10);
        const SplitCatalog c = make_splits({june_2016});
        CHECK(c.pretrain_train.size() == 1);
        CHECK(c.finetune_train.size() == 1);
    }
}

TEST_CASE("split and observation files round trip") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path();
    const auto split_path = dir / "nowcast_split.txt";
    const std::vector<std::int64_t> ts = {100, 2000, 30000};
    write_split(ts, split_path);
    CHECK(read_split(split_path) == ts);
    fs::remove(split_path);

    const auto obs_path = dir / "nowcast_obs.csv";
    std::vector<Observation> rows = {{"A", 600, 1.5}, {"B", 660, 0.0}};
    write_observations(rows, obs_path);
    const auto back = read_observations(obs_path);
    REQUIRE(back.size() == 2);
    CHECK(back[0].station_id == "A");
    CHECK(back[1].timestamp_min == 660);
    CHECK(back[0].accum_mm == doctest::Approx(1.5));
    fs::remove(obs_path);
}
