#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "nowcast/rng.hpp"
#include "nowcast/tensor.hpp"

namespace nowcast {

struct ModelConfig {
    int depth = 7;           // number of pooling steps
    int base_channels = 32;  // channels after the first conv pair
    int in_channels = 13;    // 13 nowcast, 7 estimation
    int out_channels = 3;    // 3 classes, r_max for reflectivity prediction, 1 regression
    int input_hw = 1468;     // square input side

    bool same_backbone(const ModelConfig& o) const {
        return depth == o.depth && base_channels == o.base_channels && in_channels == o.in_channels &&
               input_hw == o.input_hw;
    }
};

/// Published input/output contract of the full-scale default configuration.
/// Its stage arithmetic does not close under strict valid convolutions
/// (a pooled size turns odd), so the pair is pinned as data: dim_plan
/// yields it as a reference-only plan and forward execution requires a
/// strictly feasible configuration.
struct ReferenceContract {
    int depth = 7;
    int input_hw = 1468;
    int output_hw = 706;
    int offset = 381;
};
constexpr ReferenceContract kFullScaleContract{};

struct DimPlan {
    int input_hw = 0;
    int output_hw = 0;
    int offset = 0;            // output pixel (i,j) reads input pixel (i+offset, j+offset)
    bool reference_only = false;

    // per level 0..depth: spatial size after that level's conv pair on the
    // contracting path (level depth is the bottleneck) and its channel count
    std::vector<int> down_size;
    std::vector<int> channels;
    // per level depth-1..0 on the expansive path, indexed by level
    std::vector<int> up_size;      // size after the level's conv pair
    std::vector<int> crop_margin;  // skip crop per side at that level
};

/// Simulates the stage arithmetic and fails with the first infeasible
/// stage named, except for the pinned full-scale contract.
DimPlan dim_plan(const ModelConfig& config);

// ---------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------

struct Conv {
    int in_ch = 0, out_ch = 0, k = 3;
    std::vector<double> weight;  // [out][in][k][k], bias-free
};

struct BatchNorm {
    int ch = 0;
    std::vector<double> scale, shift;          // trainable
    std::vector<double> run_mean, run_var;     // buffers
};

struct UpConv {
    int in_ch = 0, out_ch = 0;   // out = in / 2
    std::vector<double> weight;  // [in][out][2][2]
};

struct DownStage {
    Conv conv1, conv2;
    BatchNorm bn1, bn2;
};

struct UpStage {
    UpConv up;
    Conv conv1, conv2;
    BatchNorm bn1, bn2;
};

struct ParamSet {
    ModelConfig config;
    std::vector<DownStage> down;  // depth+1 entries, last is the bottleneck
    std::vector<UpStage> up;      // depth entries, deepest first
    Conv head;                    // final 3x3 conv to out_channels

    /// Visits every trainable array in a fixed order. The same order
    /// defines gradient, optimizer-state and checkpoint layout.
    void for_each_trainable(const std::function<void(const std::string&, std::vector<double>&)>& f);
    void for_each_trainable(const std::function<void(const std::string&, const std::vector<double>&)>& f) const;

    /// Batch-norm running statistics.
    void for_each_buffer(const std::function<void(const std::string&, std::vector<double>&)>& f);
    void for_each_buffer(const std::function<void(const std::string&, const std::vector<double>&)>& f) const;

    std::size_t trainable_count() const;
};

/// Uniform init with scale 1/sqrt(fan-in); batch norm starts as identity.
ParamSet init_params(const ModelConfig& config, std::uint64_t seed);

/// Gradients aligned with ParamSet::for_each_trainable order.
struct GradSet {
    std::vector<std::vector<double>> grads;

    static GradSet zeros_like(const ParamSet& params);
    void accumulate(const GradSet& other, double weight = 1.0);
};

// ---------------------------------------------------------------------
// Operators (forward + reverse passes)
// ---------------------------------------------------------------------

enum class BnMode { Train, Eval };
constexpr double kBnEpsilon = 1e-5;
constexpr double kBnMomentum = 0.1;

Tensor conv3x3_valid(const Tensor& x, const Conv& conv);
void conv3x3_backward(const Tensor& x, const Conv& conv, const Tensor& dy, Tensor& dx,
                      std::vector<double>& dweight);

struct BnTrace {
    Tensor input;                 // pre-normalization activations
    std::vector<double> mean, invstd;
    Tensor output;                // post-ReLU
};

Tensor bn_relu(const Tensor& x, BatchNorm& bn, BnMode mode, BnTrace* trace, bool update_running);
void bn_relu_backward(const BnTrace& trace, const BatchNorm& bn, const Tensor& dy, Tensor& dx,
                      std::vector<double>& dscale, std::vector<double>& dshift);

struct PoolTrace {
    std::vector<std::uint32_t> argmax;  // flat input offset per output element
    int in_h = 0, in_w = 0;
};

Tensor max_pool2(const Tensor& x, PoolTrace* trace);
Tensor max_pool2_backward(const PoolTrace& trace, const Tensor& dy, int n, int c);

Tensor up_conv2(const Tensor& x, const UpConv& up);
void up_conv2_backward(const Tensor& x, const UpConv& up, const Tensor& dy, Tensor& dx,
                       std::vector<double>& dweight);

/// Crops skip to the spatial size of up and concatenates [skip, up] along
/// channels. Sizes must differ by an even non-negative margin.
Tensor center_crop_concat(const Tensor& skip, const Tensor& up);
void center_crop_concat_backward(const Tensor& dy, int skip_h, int skip_w, Tensor& dskip, Tensor& dup);

/// Per-pixel softmax over channels, stabilized by max subtraction.
Tensor softmax_channels(const Tensor& logits);
/// dL/dlogits given dL/dprobs and the softmax output.
Tensor softmax_backward(const Tensor& probs, const Tensor& dprobs);

// ---------------------------------------------------------------------
// The network
// ---------------------------------------------------------------------

struct ForwardTrace;

Tensor unet_forward(ParamSet& params, const Tensor& input, BnMode mode, ForwardTrace* trace,
                    bool update_running = true);

/// Eval-mode forward without trace or stat updates; params untouched.
Tensor unet_infer(const ParamSet& params, const Tensor& input);

GradSet unet_backward(const ParamSet& params, const ForwardTrace& trace, const Tensor& dlogits);

struct ForwardTrace {
    Tensor input;
    struct DownRec {
        Tensor conv1_in;  // == pool output of the previous level / network input
        BnTrace bn1, bn2;
        Tensor conv2_in;  // bn1 output
        PoolTrace pool;   // levels 0..depth-1 only
    };
    struct UpRec {
        Tensor up_in;     // input of the up-convolution
        Tensor up_out;
        Tensor concat;    // crop-concat output == conv1 input
        BnTrace bn1, bn2;
        Tensor conv2_in;
        int skip_h = 0, skip_w = 0;
    };
    std::vector<DownRec> down;
    std::vector<UpRec> up;
    Tensor head_in;
};

// ---------------------------------------------------------------------
// Parameter persistence (raw arrays; callers add metadata sidecars)
// ---------------------------------------------------------------------

void save_params(const ParamSet& params, const std::filesystem::path& path);
ParamSet load_params(const std::filesystem::path& path);

/// Worker threads used by the convolution kernels. 1 disables threading.
/// Partitions are disjoint, so results are identical for any setting.
void set_worker_threads(int n);
int worker_threads();

}  // namespace nowcast
