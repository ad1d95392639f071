#include <cmath>
#include <filesystem>
#include <numeric>

#include "doctest.h"
#include "nowcast/losses.hpp"
#include "nowcast/model.hpp"
#include "nowcast/rng.hpp"

using namespace nowcast;

namespace {

Tensor random_tensor(Rng& rng, int n, int c, int h, int w, double lo = -1.0, double hi = 1.0) {
    Tensor t(n, c, h, w);
    for (double& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

}  // namespace

TEST_CASE("valid convolution on closed-form inputs") {
    Conv conv;
    conv.in_ch = 1;
    conv.out_ch = 1;
    conv.weight.assign(9, 1.0);
    Tensor x(1, 1, 4, 4);
    x.fill(1.0);
    const Tensor y = conv3x3_valid(x, conv);
    CHECK(y.h == 2);
    CHECK(y.w == 2);
    for (double v : y.data) CHECK(v == doctest::Approx(9.0));

    SUBCASE("identity kernel crops one pixel") {
        Rng rng(2);
        Tensor r = random_tensor(rng, 1, 1, 5, 6);
        Conv id;
        id.in_ch = 1;
        id.out_ch = 1;
        id.weight.assign(9, 0.0);
        id.weight[4] = 1.0;  // center tap
        const Tensor out = conv3x3_valid(r, id);
        for (int i = 0; i < out.h; ++i) {
            for (int j = 0; j < out.w; ++j) {
                CHECK(out.at(0, 0, i, j) == r.at(0, 0, i + 1, j + 1));
            }
        }
    }

    SUBCASE("shape law") {
        Rng rng(3);
        Tensor r = random_tensor(rng, 2, 3, 9, 11);
        Conv c;
        c.in_ch = 3;
        c.out_ch = 5;
        c.weight.assign(5 * 3 * 9, 0.01);
        const Tensor out = conv3x3_valid(r, c);
        CHECK(out.n == 2);
        CHECK(out.c == 5);
        CHECK(out.h == 7);
        CHECK(out.w == 9);
    }

    SUBCASE("undersized input is an error") {
        Tensor small(1, 1, 2, 4);
        CHECK_THROWS_AS(conv3x3_valid(small, conv), Error);
    }
}

TEST_CASE("conv weight gradient counts tap uses") {
    // d(sum of outputs)/d(any tap) = number of output pixels for all-ones input
    Conv conv;
    conv.in_ch = 1;
    conv.out_ch = 1;
    conv.weight.assign(9, 0.5);
    Tensor x(1, 1, 6, 7);
    x.fill(1.0);
    const Tensor y = conv3x3_valid(x, conv);
    Tensor dy(1, 1, y.h, y.w);
    dy.fill(1.0);
    Tensor dx;
    std::vector<double> dw;
    conv3x3_backward(x, conv, dy, dx, dw);
    for (double g : dw) CHECK(g == doctest::Approx(double(y.h) * y.w));
}

TEST_CASE("batch norm and relu") {
    BatchNorm bn;
    bn.ch = 1;
    bn.scale = {1.0};
    bn.shift = {0.0};
    bn.run_mean = {0.0};
    bn.run_var = {1.0};

    SUBCASE("eval mode with identity stats is plain relu") {
        Tensor x(1, 1, 2, 2);
        x.data = {1.0, -2.0, 0.5, -0.1};
        const Tensor y = bn_relu(x, bn, BnMode::Eval, nullptr, false);
        CHECK(y.data[0] == doctest::Approx(1.0).epsilon(1e-5));
        CHECK(y.data[1] == 0.0);
        CHECK(y.data[3] == 0.0);
    }

    SUBCASE("all-negative input maps to zero") {
        Tensor x(2, 1, 2, 2);
        for (double& v : x.data) v = -3.0;
        BatchNorm bn2 = bn;
        bn2.shift = {-1.0};
        const Tensor y = bn_relu(x, bn2, BnMode::Train, nullptr, true);
        for (double v : y.data) CHECK(v == 0.0);
    }

    SUBCASE("train mode standardizes each channel") {
        Rng rng(5);
        Tensor x = random_tensor(rng, 4, 2, 6, 6, -3.0, 9.0);
        BatchNorm bn2;
        bn2.ch = 2;
        bn2.scale = {2.0, 0.5};
        bn2.shift = {10.0, 10.0};  // keeps relu inactive so moments are visible
        bn2.run_mean = {0.0, 0.0};
        bn2.run_var = {1.0, 1.0};
        const Tensor y = bn_relu(x, bn2, BnMode::Train, nullptr, true);
        for (int c = 0; c < 2; ++c) {
            double mean = 0.0;
            std::size_t count = 0;
            for (int n = 0; n < y.n; ++n) {
                const double* p = y.plane(n, c);
                for (int i = 0; i < 36; ++i) {
                    mean += p[i];
                    ++count;
                }
            }
            mean /= double(count);
            double var = 0.0;
            for (int n = 0; n < y.n; ++n) {
                const double* p = y.plane(n, c);
                for (int i = 0; i < 36; ++i) var += (p[i] - mean) * (p[i] - mean);
            }
            var /= double(count);
            CHECK(mean == doctest::Approx(bn2.shift[c]).epsilon(1e-6));
            CHECK(var == doctest::Approx(bn2.scale[c] * bn2.scale[c]).epsilon(1e-3));
        }
    }
}

TEST_CASE("max pooling") {
    Tensor x(1, 1, 2, 2);
    x.data = {1, 2, 3, 4};
    const Tensor y = max_pool2(x, nullptr);
    CHECK(y.h == 1);
    CHECK(y.data[0] == 4.0);

    Tensor neg(1, 1, 2, 2);
    neg.data = {-1, -2, -3, -4};
    CHECK(max_pool2(neg, nullptr).data[0] == -1.0);

    Tensor odd(1, 1, 3, 4);
    CHECK_THROWS_AS(max_pool2(odd, nullptr), Error);

    SUBCASE("backward routes gradient to the argmax") {
        PoolTrace trace;
        max_pool2(x, &trace);
        Tensor dy(1, 1, 1, 1);
        dy.data = {5.0};
        const Tensor dx = max_pool2_backward(trace, dy, 1, 1);
        CHECK(dx.data[3] == 5.0);
        CHECK(dx.data[0] == 0.0);
    }
}

TEST_CASE("up-convolution expands a single site by its kernels") {
    UpConv up;
    up.in_ch = 2;
    up.out_ch = 1;
    up.weight = {1, 2, 3, 4, 10, 20, 30, 40};  // K1 then K2
    Tensor x(1, 2, 1, 1);
    x.data = {2.0, 1.0};  // a, b
    const Tensor y = up_conv2(x, up);
    CHECK(y.h == 2);
    CHECK(y.data[0] == doctest::Approx(2 * 1 + 1 * 10));
    CHECK(y.data[1] == doctest::Approx(2 * 2 + 1 * 20));
    CHECK(y.data[2] == doctest::Approx(2 * 3 + 1 * 30));
    CHECK(y.data[3] == doctest::Approx(2 * 4 + 1 * 40));

    Tensor zero(1, 2, 3, 3);
    const Tensor yz = up_conv2(zero, up);
    for (double v : yz.data) CHECK(v == 0.0);
}

TEST_CASE("center crop concat") {
    Rng rng(9);
    Tensor skip = random_tensor(rng, 1, 2, 8, 8);
    Tensor up = random_tensor(rng, 1, 2, 4, 4);
    const Tensor y = center_crop_concat(skip, up);
    CHECK(y.c == 4);
    CHECK(y.h == 4);
    // skip comes first, cropped by 2 on each side
    CHECK(y.at(0, 0, 0, 0) == skip.at(0, 0, 2, 2));
    CHECK(y.at(0, 1, 3, 3) == skip.at(0, 1, 5, 5));
    CHECK(y.at(0, 2, 1, 1) == up.at(0, 0, 1, 1));

    SUBCASE("equal sizes concatenate without cropping") {
        Tensor same = random_tensor(rng, 1, 2, 4, 4);
        const Tensor z = center_crop_concat(same, up);
        CHECK(z.at(0, 0, 0, 0) == same.at(0, 0, 0, 0));
    }

    SUBCASE("odd margin is an error") {
        Tensor bad = random_tensor(rng, 1, 2, 7, 8);
        CHECK_THROWS_AS(center_crop_concat(bad, up), Error);
    }
}

TEST_CASE("softmax over channels") {
    Tensor logits(1, 2, 1, 1);
    logits.data = {0.0, std::log(3.0)};
    const Tensor p = softmax_channels(logits);
    CHECK(p.data[0] == doctest::Approx(0.25));
    CHECK(p.data[1] == doctest::Approx(0.75));

    Rng rng(12);
    Tensor big = random_tensor(rng, 2, 5, 3, 3, -30, 30);
    const Tensor probs = softmax_channels(big);
    for (int n = 0; n < 2; ++n) {
        for (int i = 0; i < 9; ++i) {
            double sum = 0;
            for (int c = 0; c < 5; ++c) sum += probs.plane(n, c)[i];
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
        }
    }

    Tensor equal(1, 4, 1, 1);
    equal.fill(2.5);
    for (double v : softmax_channels(equal).data) CHECK(v == doctest::Approx(0.25));
}

TEST_CASE("dimension planner") {
    SUBCASE("depth 2 input 68") {
        ModelConfig cfg{2, 4, 13, 3, 68};
        const DimPlan plan = dim_plan(cfg);
        CHECK(!plan.reference_only);
        CHECK(plan.output_hw == 26);
        CHECK(plan.offset == 21);
        CHECK(plan.down_size == std::vector<int>{64, 28, 10});
        CHECK(plan.crop_margin == std::vector<int>{16, 4});
    }
    SUBCASE("depth 0 is two convs plus the head") {
        ModelConfig cfg{0, 4, 7, 1, 16};
        const DimPlan plan = dim_plan(cfg);
        CHECK(plan.output_hw == 10);
        CHECK(plan.offset == 3);
    }
    SUBCASE("the full-scale default resolves to the pinned contract") {
        ModelConfig cfg{7, 32, 13, 3, 1468};
        const DimPlan plan = dim_plan(cfg);
        CHECK(plan.reference_only);
        CHECK(plan.input_hw == 1468);
        CHECK(plan.output_hw == 706);
        CHECK(plan.offset == 381);
        CHECK(2 * plan.offset + plan.output_hw == plan.input_hw);
    }
    SUBCASE("odd pooling is reported with its stage") {
        ModelConfig cfg{2, 4, 13, 3, 66};  // 62 -> 31 odd at stage 2... pooled 31->27, stage 2 odd
        CHECK_THROWS_WITH_AS(dim_plan(cfg), doctest::Contains("stage"), Error);
    }
}

TEST_CASE("forward shapes match the plan for random feasible configs") {
    Rng rng(77);
    int tested = 0;
    while (tested < 30) {
        ModelConfig cfg;
        cfg.depth = int(rng.below(4));
        cfg.base_channels = 1 + int(rng.below(3));
        cfg.in_channels = 1 + int(rng.below(4));
        cfg.out_channels = 1 + int(rng.below(5));
        cfg.input_hw = 7 + int(rng.below(80));
        DimPlan plan;
        try {
            plan = dim_plan(cfg);
        } catch (const Error&) {
            continue;
        }
        if (plan.reference_only) continue;
        ++tested;
        CHECK(2 * plan.offset + plan.output_hw == plan.input_hw);
        ParamSet params = init_params(cfg, rng.next_u64());
        Tensor input = random_tensor(rng, 1, cfg.in_channels, cfg.input_hw, cfg.input_hw, 0, 10);
        const Tensor logits = unet_forward(params, input, BnMode::Train, nullptr);
        CHECK(logits.c == cfg.out_channels);
        CHECK(logits.h == plan.output_hw);
        CHECK(logits.w == plan.output_hw);
    }
}

TEST_CASE("eval forward is pure and translation covariant") {
    ModelConfig cfg{1, 2, 1, 2, 24};
    ParamSet params = init_params(cfg, 11);
    Rng rng(13);
    // burn in the running statistics so eval mode is non-trivial
    for (int i = 0; i < 3; ++i) {
        Tensor x = random_tensor(rng, 2, 1, 24, 24, 0, 8);
        unet_forward(params, x, BnMode::Train, nullptr);
    }

    const int shift = 2;  // one pooling level: shifts of 2 commute
    Tensor field = random_tensor(rng, 1, 1, 24 + shift, 24 + shift, 0, 8);
    Tensor x1(1, 1, 24, 24), x2(1, 1, 24, 24);
    for (int i = 0; i < 24; ++i) {
        for (int j = 0; j < 24; ++j) {
            x1.at(0, 0, i, j) = field.at(0, 0, i, j);
            x2.at(0, 0, i, j) = field.at(0, 0, i + shift, j + shift);
        }
    }
    const Tensor y1 = unet_infer(params, x1);
    const Tensor y1_again = unet_infer(params, x1);
    CHECK(y1.data == y1_again.data);  // bit-identical

    const Tensor y2 = unet_infer(params, x2);
    const DimPlan plan = dim_plan(cfg);
    for (int c = 0; c < 2; ++c) {
        for (int i = 0; i + shift < plan.output_hw; ++i) {
            for (int j = 0; j + shift < plan.output_hw; ++j) {
                CHECK(y2.at(0, c, i, j) == y1.at(0, c, i + shift, j + shift));
            }
        }
    }
}

TEST_CASE("zero filters give zero logits") {
    ModelConfig cfg{1, 2, 2, 3, 20};
    ParamSet params = init_params(cfg, 3);
    params.for_each_trainable([](const std::string& name, std::vector<double>& v) {
        if (name.find(".w") != std::string::npos) std::fill(v.begin(), v.end(), 0.0);
        if (name.find("shift") != std::string::npos) std::fill(v.begin(), v.end(), 0.0);
    });
    Rng rng(4);
    Tensor x = random_tensor(rng, 1, 2, 20, 20);
    const Tensor y = unet_forward(params, x, BnMode::Train, nullptr);
    for (double v : y.data) CHECK(v == 0.0);
}

TEST_CASE("network gradients match central differences") {
    // end-to-end reverse mode against finite differences, scalar probe
    // loss = weighted sum of logits so every head path is exercised
    ModelConfig cfg{1, 2, 2, 2, 20};
    ParamSet params = init_params(cfg, 21);
    Rng rng(22);
    Tensor input = random_tensor(rng, 2, 2, 20, 20, 0, 6);
    Tensor weights;  // fixed random combination

    auto loss_of = [&](ParamSet& p) {
        Tensor logits = unet_forward(p, input, BnMode::Train, nullptr, false);
        double loss = 0;
        for (std::size_t i = 0; i < logits.data.size(); ++i) {
            loss += logits.data[i] * weights.data[i];
        }
        return loss;
    };

    ForwardTrace trace;
    Tensor logits = unet_forward(params, input, BnMode::Train, &trace, false);
    weights = random_tensor(rng, logits.n, logits.c, logits.h, logits.w);
    const GradSet grads = unet_backward(params, trace, weights);

    const double h = 1e-5;
    std::size_t slot = 0;
    int checked = 0;
    params.for_each_trainable([&](const std::string&, std::vector<double>& value) {
        // probe a few coordinates per array
        for (int probe = 0; probe < 3 && probe < int(value.size()); ++probe) {
            const std::size_t idx = probe == 0 ? 0 : rng.below(value.size());
            const double saved = value[idx];
            value[idx] = saved + h;
            const double up = loss_of(params);
            value[idx] = saved - h;
            const double down = loss_of(params);
            value[idx] = saved;
            const double fd = (up - down) / (2 * h);
            const double ad = grads.grads[slot][idx];
            const double denom = std::max({std::abs(fd), std::abs(ad), 1e-4});
            CHECK(std::abs(fd - ad) / denom < 1e-4);
            ++checked;
        }
        ++slot;
    });
    CHECK(checked > 30);
}

TEST_CASE("parameter persistence round trips bit-exactly") {
    ModelConfig cfg{2, 3, 5, 4, 44};
    ParamSet params = init_params(cfg, 99);
    // make the buffers non-trivial
    Rng rng(100);
    Tensor x = random_tensor(rng, 2, 5, 44, 44, 0, 5);
    unet_forward(params, x, BnMode::Train, nullptr);

    const auto path = std::filesystem::temp_directory_path() / "nowcast_params.bin";
    save_params(params, path);
    const ParamSet back = load_params(path);
    CHECK(back.config.depth == cfg.depth);
    bool identical = true;
    std::vector<const std::vector<double>*> a, b;
    params.for_each_trainable([&](const std::string&, const std::vector<double>& v) { a.push_back(&v); });
    back.for_each_trainable([&](const std::string&, const std::vector<double>& v) { b.push_back(&v); });
    params.for_each_buffer([&](const std::string&, const std::vector<double>& v) { a.push_back(&v); });
    back.for_each_buffer([&](const std::string&, const std::vector<double>& v) { b.push_back(&v); });
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (*a[i] != *b[i]) identical = false;
    }
    CHECK(identical);
    std::filesystem::remove(path);
}

TEST_CASE("up-conv rejects odd channel counts") {
    UpConv up;
    up.in_ch = 3;
    up.out_ch = 1;
    up.weight.assign(12, 0.1);
    Tensor x(1, 3, 2, 2);
    CHECK_THROWS_AS(up_conv2(x, up), Error);
}
