#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "nowcast/losses.hpp"
#include "nowcast/metrics.hpp"
#include "nowcast/model.hpp"
#include "nowcast/synth.hpp"

namespace nowcast {

enum class TrainPhase { Pretrain, FinetuneNowcast, FinetuneEstimation };
enum class LossChoice { Csi, Focal, Ce };

const char* phase_name(TrainPhase phase);
const char* loss_name(LossChoice loss);

struct TrainConfig {
    TrainPhase phase = TrainPhase::Pretrain;
    LossChoice loss_choice = LossChoice::Csi;
    int steps = 0;                  // 0 = phase default (50000 pretrain, 35000 finetune)
    int batch_size = 0;             // 0 = phase default (20 pretrain, 24 finetune)
    double learning_rate = 2e-5;
    int validation_interval = 1000;
    double gamma = 2.0;             // focal loss exponent
    std::uint64_t seed = 1;
    ModelConfig model;

    void apply_phase_defaults();
    void validate() const;
};

struct Checkpoint {
    ParamSet params;
    TrainPhase phase = TrainPhase::Pretrain;
    int step = 0;
    double validation_score = 0.0;
    std::uint64_t seed = 0;
};

/// params as a binary array file, metadata as a plain-text sidecar.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& params_path,
                     const std::filesystem::path& meta_path);
Checkpoint load_checkpoint(const std::filesystem::path& params_path,
                           const std::filesystem::path& meta_path);

// ---------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------

struct AdamState {
    std::vector<std::vector<double>> m, v;  // aligned with trainable layout
    std::int64_t step = 0;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    static AdamState zeros_like(const ParamSet& params);
};

/// Bias-corrected Adam update in place.
void adam_step(ParamSet& params, const GradSet& grads, AdamState& state, double lr);

// ---------------------------------------------------------------------
// Training data
// ---------------------------------------------------------------------

/// One starting time t0 with everything both phases can ask of it. The
/// frame list covers t0-60 .. t0+360 at 10-minute spacing for nowcasting
/// data; estimation-only data may stop after the first 7 frames.
struct TrainEpisode {
    std::int64_t t0 = 0;
    std::vector<RadarGrid> frames;
    std::vector<std::vector<StationLabel>> labels_per_lead;  // 6 lists, grid coordinates
    std::vector<StationLabel> labels_now;                    // class of the window ending at t0
    std::vector<StationTarget> estimation_targets;           // accumulation ending at t0
};

struct TrainingSet {
    std::vector<TrainEpisode> episodes;

    bool empty() const { return episodes.empty(); }
};

TrainingSet training_set_from_synth(const SynthDataset& ds);

/// Reads a dataset directory (frames/<t>.rgr, stations.csv,
/// observations.csv) and assembles the episodes whose frame window is
/// complete for the given starting timestamps.
TrainingSet load_training_set(const std::filesystem::path& dir,
                              const std::vector<std::int64_t>& t0_list, bool with_leads);

// ---------------------------------------------------------------------
// Training runs
// ---------------------------------------------------------------------

struct RunResult {
    Checkpoint best;
    // one entry per validation point: step, train loss at that step,
    // validation score
    struct CurvePoint {
        int step = 0;
        double train_loss = 0.0;
        double val_score = 0.0;
    };
    std::vector<CurvePoint> curve;
};

/// Reflectivity-prediction phase, earth-mover objective, minimized
/// validation loss selects the checkpoint. Nowcasting variants draw one
/// of the six target times per sample; estimation variants predict the
/// newest frame itself.
RunResult pretrain(const TrainConfig& config, const TrainingSet& train, const TrainingSet& val);

/// Classification fine-tuning on station pixels with the chosen loss;
/// the validation score is the HEAVY CSI over one confusion matrix that
/// pools every validation case at every lead time (maximized).
RunResult finetune_nowcast(const std::optional<ParamSet>& init, const TrainConfig& config,
                           const TrainingSet& train, const TrainingSet& val);

/// Regression fine-tuning, station-pixel sum of squared errors, validated
/// by grouped MSE (minimized).
RunResult finetune_estimation(const std::optional<ParamSet>& init, const TrainConfig& config,
                              const TrainingSet& train, const TrainingSet& val);

/// Copies every layer; the head is re-initialized from the seed whenever
/// its output width differs. Backbone mismatches are errors.
ParamSet transfer_params(const Checkpoint& pretrained, const ModelConfig& target, std::uint64_t seed);

// ---------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------

EvalReport evaluate_nowcast(const ParamSet& params, const TrainingSet& test);

/// Per-lead matrices for the persistence heuristic through the same
/// reporting path as the model.
EvalReport evaluate_persistence(const TrainingSet& test);

enum class ClassFilter { All, Heavy, Light };

/// Grouped MSE restricted to station-time pairs whose ground-truth class
/// passes the filter; nullopt when nothing passes.
std::optional<double> evaluate_estimation(const ParamSet& params, const TrainingSet& test,
                                          ClassFilter filter);
std::optional<double> evaluate_zr_baseline(const ZRParams& zr, const TrainingSet& test,
                                           ClassFilter filter);

/// Overall HEAVY CSI from one confusion matrix pooling all leads.
double overall_heavy_csi(const ParamSet& params, const TrainingSet& test);

}  // namespace nowcast
