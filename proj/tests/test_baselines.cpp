#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "nowcast/baselines.hpp"
#include "nowcast/metrics.hpp"
#include "nowcast/rng.hpp"

using namespace nowcast;

TEST_CASE("persistence repeats the current class at every lead") {
    const auto preds = persistence_nowcast({PrecipClass::Heavy, PrecipClass::Others});
    REQUIRE(preds.size() == 2);
    for (const auto& lead : preds[0]) CHECK(lead == PrecipClass::Heavy);
    for (const auto& lead : preds[1]) CHECK(lead == PrecipClass::Others);
    CHECK(preds[0].size() == 6);
}

TEST_CASE("persistence with metrics reproduces a hand-computed matrix") {
    // 3 stations, 2 timesteps; current classes vs the lead-60 truth
    const std::vector<PrecipClass> current_a = {PrecipClass::Others, PrecipClass::Light,
                                                PrecipClass::Heavy};
    const std::vector<PrecipClass> truth_a = {PrecipClass::Others, PrecipClass::Heavy,
                                              PrecipClass::Heavy};
    const std::vector<PrecipClass> current_b = {PrecipClass::Light, PrecipClass::Light,
                                                PrecipClass::Others};
    const std::vector<PrecipClass> truth_b = {PrecipClass::Others, PrecipClass::Light,
                                              PrecipClass::Heavy};

    ConfusionMatrix cm;
    cm.lead_time_minutes = 60;
    for (std::size_t t = 0; t < 2; ++t) {
        const auto& current = t == 0 ? current_a : current_b;
        const auto& truth = t == 0 ? truth_a : truth_b;
        const auto preds = persistence_nowcast(current);
        for (std::size_t s = 0; s < 3; ++s) cm.add(truth[s], preds[s][0]);
    }
    // hand count: (O,O)=1 (O,L)=1 (L,L)=1 (H,O)=1 (H,L)=1 (H,H)=1
    CHECK(cm.counts[0][0] == 1);
    CHECK(cm.counts[0][1] == 1);
    CHECK(cm.counts[1][1] == 1);
    CHECK(cm.counts[2][0] == 1);
    CHECK(cm.counts[2][1] == 1);
    CHECK(cm.counts[2][2] == 1);
    CHECK(cm.total() == 6);
    // CSI_HEAVY: tp 1, fp 0, fn 2
    CHECK(csi_score(cm, EventClass::Heavy) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("zr rate inversion at known points") {
    const ZRParams p{200.0, 1.49};
    CHECK(zr_rate(10.0 * std::log10(200.0), p) == doctest::Approx(1.0));
    CHECK(zr_rate(zr_dbz(10.0, p), p) == doctest::Approx(10.0).epsilon(1e-3));
    CHECK(zr_dbz(10.0, p) == doctest::Approx(37.90).epsilon(1e-3));
    CHECK(zr_rate(0.0, p) == doctest::Approx(0.0286).epsilon(0.02));
    CHECK(zr_rate(std::nan(""), p) == 0.0);
}

TEST_CASE("zr rate is strictly increasing in reflectivity") {
    const ZRParams p{300.0, 1.4};
    double prev = zr_rate(-10.0, p);
    for (double dbz = -9.5; dbz < 60.0; dbz += 0.5) {
        const double r = zr_rate(dbz, p);
        CHECK(r > prev);
        prev = r;
    }
}

TEST_CASE("zr fitting recovers exact parameters from noiseless pairs") {
    const ZRParams truth{200.0, 1.49};
    std::vector<std::pair<double, double>> pairs;
    for (double rate : {0.2, 0.5, 1.0, 2.0, 5.0, 12.0, 30.0}) {
        pairs.emplace_back(zr_dbz(rate, truth), rate);
    }
    const ZRParams fit = fit_zr(pairs);
    CHECK(fit.a == doctest::Approx(200.0).epsilon(1e-7));
    CHECK(fit.b == doctest::Approx(1.49).epsilon(1e-7));
}

TEST_CASE("zr fitting over random positive parameters") {
    Rng rng(8);
    for (int trial = 0; trial < 30; ++trial) {
        const ZRParams truth{rng.uniform(50, 500), rng.uniform(1.1, 2.0)};
        std::vector<std::pair<double, double>> pairs;
        for (int i = 0; i < 12; ++i) {
            const double rate = rng.uniform(0.15, 40.0);
            pairs.emplace_back(zr_dbz(rate, truth), rate);
        }
        const ZRParams fit = fit_zr(pairs);
        CHECK(fit.a == doctest::Approx(truth.a).epsilon(1e-6));
        CHECK(fit.b == doctest::Approx(truth.b).epsilon(1e-6));
    }
}

TEST_CASE("zr fitting rejects degenerate input") {
    CHECK_THROWS_AS(fit_zr({{30.0, 5.0}}), Error);  // single pair
    // all rates below the floor
    CHECK_THROWS_AS(fit_zr({{10.0, 0.01}, {12.0, 0.02}}), Error);
    // identical rates carry no slope information
    CHECK_THROWS_AS(fit_zr({{30.0, 5.0}, {31.0, 5.0}, {29.0, 5.0}}), Error);
}

TEST_CASE("zr fit tolerates symmetric noise") {
    Rng rng(9);
    const ZRParams truth{300.0, 1.4};
    std::vector<std::pair<double, double>> pairs;
    for (int i = 0; i < 400; ++i) {
        const double rate = rng.uniform(0.2, 50.0);
        const double noise = rng.uniform(-0.1, 0.1);
        pairs.emplace_back(zr_dbz(rate, truth) + noise, rate);
    }
    const ZRParams fit = fit_zr(pairs);
    CHECK(std::abs(fit.b - truth.b) < 0.02);
}

TEST_CASE("hourly estimate averages the frame rates") {
    const ZRParams p{200.0, 1.49};
    auto frame_of = [&](double dbz) {
        RadarGrid g;
        g.height = g.width = 2;
        g.resolution_km = 1;
        g.values.assign(4, float(dbz));
        return g;
    };

    SUBCASE("constant rate 1") {
        std::vector<RadarGrid> frames(7, frame_of(zr_dbz(1.0, p)));
        const HourlyEstimate e = zr_hourly_estimate(frames, p, 0, 0);
        CHECK(e.accum_mm == doctest::Approx(1.0).epsilon(1e-6));
        CHECK(!e.all_missing);
    }

    SUBCASE("alternating rates 2 and 0-ish") {
        // four frames at rate 2, three effectively dry (rate ~ 0)
        std::vector<RadarGrid> frames;
        for (int i = 0; i < 7; ++i) {
            frames.push_back(i % 2 == 0 ? frame_of(zr_dbz(2.0, p)) : frame_of(-200.0));
        }
        const HourlyEstimate e = zr_hourly_estimate(frames, p, 1, 1);
        CHECK(e.accum_mm == doctest::Approx(8.0 / 7.0).epsilon(1e-4));
    }

    SUBCASE("all-NaN pixel is flagged and zero") {
        std::vector<RadarGrid> frames(7, frame_of(std::nan("")));
        const HourlyEstimate e = zr_hourly_estimate(frames, p, 0, 1);
        CHECK(e.accum_mm == 0.0);
        CHECK(e.all_missing);
    }
}

TEST_CASE("zr parameter files round trip") {
    const auto path = std::filesystem::temp_directory_path() / "nowcast_zr.txt";
    write_zr_params({217.5, 1.53}, path);
    const ZRParams back = read_zr_params(path);
    CHECK(back.a == doctest::Approx(217.5));
    CHECK(back.b == doctest::Approx(1.53));
    std::filesystem::remove(path);
}
