#include "nowcast/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace nowcast {

const char* phase_name(TrainPhase phase) {
    switch (phase) {
        case TrainPhase::Pretrain: return "pretrain";
        case TrainPhase::FinetuneNowcast: return "finetune_nowcast";
        case TrainPhase::FinetuneEstimation: return "finetune_estimation";
    }
    return "unknown";
}

const char* loss_name(LossChoice loss) {
    switch (loss) {
        case LossChoice::Csi: return "csi";
        case LossChoice::Focal: return "focal";
        case LossChoice::Ce: return "ce";
    }
    return "unknown";
}

void TrainConfig::apply_phase_defaults() {
    if (steps == 0) steps = phase == TrainPhase::Pretrain ? 50000 : 35000;
    if (batch_size == 0) batch_size = phase == TrainPhase::Pretrain ? 20 : 24;
}

void TrainConfig::validate() const {
    require(steps > 0, ErrorCode::InvalidArgument, "steps must be positive");
    require(batch_size > 0, ErrorCode::InvalidArgument, "batch size must be positive");
    require(learning_rate > 0.0, ErrorCode::InvalidArgument, "learning rate must be positive");
    require(validation_interval > 0, ErrorCode::InvalidArgument, "validation interval must be positive");
    require(gamma >= 0.0, ErrorCode::InvalidArgument, "gamma must be non-negative");
}

// ---------------------------------------------------------------------
// Checkpoint persistence
// ---------------------------------------------------------------------

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& params_path,
                     const std::filesystem::path& meta_path) {
    save_params(ckpt.params, params_path);
    std::ofstream meta(meta_path, std::ios::trunc);
    require(meta.good(), ErrorCode::IoFailure, "cannot open for writing: " + meta_path.string());
    meta.precision(17);
    meta << "phase=" << phase_name(ckpt.phase) << '\n'
         << "step=" << ckpt.step << '\n'
         << "validation_score=" << ckpt.validation_score << '\n'
         << "seed=" << ckpt.seed << '\n'
         << "depth=" << ckpt.params.config.depth << '\n'
         << "base_channels=" << ckpt.params.config.base_channels << '\n'
         << "in_channels=" << ckpt.params.config.in_channels << '\n'
         << "out_channels=" << ckpt.params.config.out_channels << '\n'
         << "input_hw=" << ckpt.params.config.input_hw << '\n';
    require(meta.good(), ErrorCode::IoFailure, "write failed: " + meta_path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& params_path,
                           const std::filesystem::path& meta_path) {
    Checkpoint ckpt;
    ckpt.params = load_params(params_path);
    std::ifstream meta(meta_path);
    require(meta.good(), ErrorCode::IoFailure, "cannot open " + meta_path.string());
    std::string line;
    while (std::getline(meta, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
        if (key == "phase") {
            if (value == "pretrain") ckpt.phase = TrainPhase::Pretrain;
            else if (value == "finetune_nowcast") ckpt.phase = TrainPhase::FinetuneNowcast;
            else if (value == "finetune_estimation") ckpt.phase = TrainPhase::FinetuneEstimation;
            else fail(ErrorCode::ParseError, "unknown phase " + value);
        } else if (key == "step") {
            ckpt.step = std::stoi(value);
        } else if (key == "validation_score") {
            ckpt.validation_score = std::stod(value);
        } else if (key == "seed") {
            ckpt.seed = std::stoull(value);
        }
    }
    return ckpt;
}

// ---------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------

AdamState AdamState::zeros_like(const ParamSet& params) {
    AdamState s;
    params.for_each_trainable([&](const std::string&, const std::vector<double>& v) {
        s.m.emplace_back(v.size(), 0.0);
        s.v.emplace_back(v.size(), 0.0);
    });
    return s;
}

void adam_step(ParamSet& params, const GradSet& grads, AdamState& state, double lr) {
    require(grads.grads.size() == state.m.size(), ErrorCode::ShapeMismatch,
            "gradient/state layout mismatch");
    ++state.step;
    const double bc1 = 1.0 - std::pow(state.beta1, double(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, double(state.step));
    std::size_t slot = 0;
    params.for_each_trainable([&](const std::string&, std::vector<double>& value) {
        require(value.size() == grads.grads[slot].size(), ErrorCode::ShapeMismatch,
                "gradient shape mismatch");
        auto& m = state.m[slot];
        auto& v = state.v[slot];
        const auto& g = grads.grads[slot];
        for (std::size_t i = 0; i < value.size(); ++i) {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            value[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
        }
        ++slot;
    });
}

// ---------------------------------------------------------------------
// Training data
// ---------------------------------------------------------------------

TrainingSet training_set_from_synth(const SynthDataset& ds) {
    TrainingSet out;
    for (const LabeledEpisode& ep : ds.episodes) {
        TrainEpisode te;
        te.t0 = ep.t0;
        te.frames = ep.seq.frames;
        auto to_labels = [&](const std::vector<StationTruth>& truths) {
            std::vector<StationLabel> labels;
            labels.reserve(truths.size());
            for (std::size_t i = 0; i < truths.size(); ++i) {
                StationLabel l;
                l.pixel_row = ds.stations.entries[i].pixel_row;
                l.pixel_col = ds.stations.entries[i].pixel_col;
                l.cls = truths[i].cls;
                labels.push_back(l);
            }
            return labels;
        };
        for (const auto& lead : ep.truths_per_lead) te.labels_per_lead.push_back(to_labels(lead));
        te.labels_now = to_labels(ep.truth_now);
        for (std::size_t i = 0; i < ep.truth_now.size(); ++i) {
            StationTarget t;
            t.pixel_row = ds.stations.entries[i].pixel_row;
            t.pixel_col = ds.stations.entries[i].pixel_col;
            t.accum_mm = ep.truth_now[i].accum_mm;
            te.estimation_targets.push_back(t);
        }
        out.episodes.push_back(std::move(te));
    }
    return out;
}

TrainingSet load_training_set(const std::filesystem::path& dir,
                              const std::vector<std::int64_t>& t0_list, bool with_leads) {
    const auto frames_dir = dir / "frames";
    require(std::filesystem::is_directory(frames_dir), ErrorCode::IoFailure,
            "no frames/ directory under " + dir.string());

    RadarGrid geometry;
    bool have_geometry = false;
    std::map<std::int64_t, std::filesystem::path> frame_files;
    for (const auto& entry : std::filesystem::directory_iterator(frames_dir)) {
        if (entry.path().extension() != ".rgr") continue;
        frame_files[std::stoll(entry.path().stem().string())] = entry.path();
    }

    StationTable stations = read_station_table(dir / "stations.csv");
    // accumulated precipitation keyed by (station, window end)
    std::map<std::pair<std::string, std::int64_t>, double> obs;
    for (const Observation& o : read_observations(dir / "observations.csv")) {
        obs[{o.station_id, o.timestamp_min}] = o.accum_mm;
    }

    TrainingSet set;
    for (std::int64_t t0 : t0_list) {
        TrainEpisode ep;
        ep.t0 = t0;
        const int frame_count =
            with_leads ? kFramesPerSample + kLeadCount * (kLeadStepMinutes / kFrameStepMinutes)
                       : kFramesPerSample;
        bool complete = true;
        for (int f = 0; f < frame_count; ++f) {
            const std::int64_t t = t0 - (kFramesPerSample - 1) * kFrameStepMinutes +
                                   std::int64_t(f) * kFrameStepMinutes;
            auto it = frame_files.find(t);
            if (it == frame_files.end()) {
                complete = false;
                break;
            }
            ep.frames.push_back(read_radar_grid(it->second));
        }
        if (!complete) continue;  // incomplete window, episode dropped

        if (!have_geometry) {
            geometry = ep.frames.front();
            stations = bind_stations(stations, geometry);
            have_geometry = true;
        }

        auto labels_at = [&](std::int64_t window_end) {
            std::vector<StationLabel> labels;
            for (const Station& s : stations.entries) {
                auto it = obs.find({s.id, window_end});
                if (it == obs.end()) continue;  // station outage: dropped for this station only
                StationLabel l;
                l.pixel_row = s.pixel_row;
                l.pixel_col = s.pixel_col;
                l.cls = precip_class(it->second);
                labels.push_back(l);
            }
            return labels;
        };
        if (with_leads) {
            for (int lead = 1; lead <= kLeadCount; ++lead) {
                ep.labels_per_lead.push_back(labels_at(t0 + lead * kLeadStepMinutes));
            }
        }
        ep.labels_now = labels_at(t0);
        for (const Station& s : stations.entries) {
            auto it = obs.find({s.id, t0});
            if (it == obs.end()) continue;
            StationTarget target;
            target.pixel_row = s.pixel_row;
            target.pixel_col = s.pixel_col;
            target.accum_mm = it->second;
            ep.estimation_targets.push_back(target);
        }
        set.episodes.push_back(std::move(ep));
    }
    return set;
}

// ---------------------------------------------------------------------
// Shared training machinery
// ---------------------------------------------------------------------

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 0x2545f4914f6cdd1dULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

void require_frame_horizon(const TrainEpisode& ep, bool with_leads) {
    const std::size_t needed =
        with_leads ? kFramesPerSample + kLeadCount * (kLeadStepMinutes / kFrameStepMinutes)
                   : kFramesPerSample;
    require(ep.frames.size() >= needed, ErrorCode::InvalidArgument,
            "episode does not cover the required frame horizon");
}

bool frames_have_nan(const TrainEpisode& ep) {
    for (int f = 0; f < kFramesPerSample; ++f) {
        for (float v : ep.frames[f].values) {
            if (std::isnan(v)) return true;
        }
    }
    return false;
}

/// Copies the 7 clamped input frames of an episode into row `slot` of a
/// batched input tensor and sets the one-hot time plane when the tensor
/// carries the 6 extra channels.
void fill_input_slot(Tensor& input, int slot, const TrainEpisode& ep, int target_index, int r_max) {
    const std::size_t plane = std::size_t(input.h) * input.w;
    for (int f = 0; f < kFramesPerSample; ++f) {
        const RadarGrid& g = ep.frames[f];
        require(int(g.height) == input.h && int(g.width) == input.w, ErrorCode::ShapeMismatch,
                "frame size does not match the model input");
        double* dst = input.plane(slot, f);
        for (std::size_t i = 0; i < plane; ++i) {
            dst[i] = clamp_reflectivity(g.values[i], r_max);
        }
    }
    if (input.c == kFramesPerSample + kLeadCount) {
        double* dst = input.plane(slot, kFramesPerSample + target_index - 1);
        std::fill(dst, dst + plane, 1.0);
    }
}

struct BestTracker {
    bool maximize = false;
    bool has_best = false;
    double best_score = 0.0;
    int best_step = -1;

    bool improves(double score) const {
        if (!has_best) return true;
        return maximize ? score > best_score : score < best_score;
    }
};

int frame_index_for_lead(int target_index) {
    return kFramesPerSample - 1 + target_index * (kLeadStepMinutes / kFrameStepMinutes);
}

}  // namespace

// ---------------------------------------------------------------------
// Pre-training
// ---------------------------------------------------------------------

namespace {

/// Validation objective: mean earth-mover distance per labeled pixel over
/// every (episode, target time) pair of the set.
double pretrain_validation_loss(ParamSet& params, const TrainingSet& val, bool nowcast_variant,
                                int r_max) {
    const DimPlan plan = dim_plan(params.config);
    double sum = 0.0;
    std::size_t count = 0;
    for (const TrainEpisode& ep : val.episodes) {
        if (frames_have_nan(ep)) continue;
        const int lead_lo = nowcast_variant ? 1 : 0;
        const int lead_hi = nowcast_variant ? kLeadCount : 0;
        for (int lead = lead_lo; lead <= lead_hi; ++lead) {
            Tensor input(1, params.config.in_channels, params.config.input_hw, params.config.input_hw);
            fill_input_slot(input, 0, ep, std::max(lead, 1), r_max);
            const Tensor logits = unet_infer(params, input);
            const Tensor probs = softmax_channels(logits);
            const RadarGrid& target = ep.frames[lead == 0 ? kFramesPerSample - 1
                                                          : frame_index_for_lead(lead)];
            for (int i = 0; i < plan.output_hw; ++i) {
                for (int j = 0; j < plan.output_hw; ++j) {
                    const float raw = target.at(std::uint32_t(i + plan.offset),
                                                std::uint32_t(j + plan.offset));
                    if (std::isnan(raw)) continue;
                    const double truth = clamp_reflectivity(raw, r_max);
                    const std::size_t pix = std::size_t(i) * plan.output_hw + j;
                    double loss = 0.0;
                    for (int r = 1; r <= r_max; ++r) {
                        loss += probs.plane(0, r - 1)[pix] * std::abs(double(r - 1) - truth);
                    }
                    sum += loss;
                    ++count;
                }
            }
        }
    }
    require(count > 0, ErrorCode::EmptyInput, "validation set produced no labeled pixels");
    return sum / double(count);
}

}  // namespace

RunResult pretrain(const TrainConfig& config_in, const TrainingSet& train, const TrainingSet& val) {
    TrainConfig config = config_in;
    config.apply_phase_defaults();
    config.validate();
    require(!train.empty() && !val.empty(), ErrorCode::EmptyInput, "empty training or validation set");
    const int r_max = config.model.out_channels;
    require(r_max >= 2, ErrorCode::InvalidArgument,
            "reflectivity prediction needs out_channels = r_max >= 2");
    const bool nowcast_variant = config.model.in_channels == kFramesPerSample + kLeadCount;
    require(nowcast_variant || config.model.in_channels == kFramesPerSample,
            ErrorCode::InvalidArgument, "in_channels must be 7 or 13");

    const DimPlan plan = dim_plan(config.model);
    require(!plan.reference_only, ErrorCode::InfeasibleConfig,
            "this configuration has no strict stage layout (reference contract only); pick a depth/input size whose plan succeeds");
    for (const TrainEpisode& ep : train.episodes) require_frame_horizon(ep, nowcast_variant);
    for (const TrainEpisode& ep : val.episodes) require_frame_horizon(ep, nowcast_variant);

    ParamSet params = init_params(config.model, mix(config.seed, 1));
    AdamState adam = AdamState::zeros_like(params);
    Rng sampler(mix(config.seed, 2));

    RunResult result;
    BestTracker best;
    best.maximize = false;
    double last_train_loss = 0.0;

    auto validate_now = [&](int step) {
        const double score = pretrain_validation_loss(params, val, nowcast_variant, r_max);
        result.curve.push_back({step, last_train_loss, score});
        if (best.improves(score)) {
            best.has_best = true;
            best.best_score = score;
            best.best_step = step;
            result.best.params = params;
            result.best.step = step;
            result.best.validation_score = score;
        }
    };

    result.best.phase = TrainPhase::Pretrain;
    result.best.seed = config.seed;
    validate_now(0);

    const std::size_t n_train = train.episodes.size();
    for (int step = 1; step <= config.steps; ++step) {
        // assemble a batch of (episode, target time) pairs
        Tensor input(config.batch_size, config.model.in_channels, config.model.input_hw,
                     config.model.input_hw);
        std::vector<const RadarGrid*> targets(config.batch_size, nullptr);
        for (int b = 0; b < config.batch_size; ++b) {
            const TrainEpisode* ep = nullptr;
            for (int tries = 0; tries < 1000; ++tries) {
                const TrainEpisode& cand = train.episodes[sampler.below(n_train)];
                if (!frames_have_nan(cand)) {
                    ep = &cand;
                    break;
                }
            }
            require(ep != nullptr, ErrorCode::DegenerateData,
                    "could not sample an episode with complete input frames");
            const int target_index = nowcast_variant ? int(sampler.below(kLeadCount)) + 1 : 0;
            fill_input_slot(input, b, *ep, std::max(target_index, 1), r_max);
            targets[b] = &ep->frames[target_index == 0 ? kFramesPerSample - 1
                                                       : frame_index_for_lead(target_index)];
        }

        ForwardTrace trace;
        const Tensor logits = unet_forward(params, input, BnMode::Train, &trace);
        const Tensor probs = softmax_channels(logits);

        // earth-mover objective, averaged over labeled pixels
        std::size_t labeled = 0;
        for (int b = 0; b < config.batch_size; ++b) {
            for (int i = 0; i < plan.output_hw; ++i) {
                for (int j = 0; j < plan.output_hw; ++j) {
                    const float raw = targets[b]->at(std::uint32_t(i + plan.offset),
                                                     std::uint32_t(j + plan.offset));
                    if (!std::isnan(raw)) ++labeled;
                }
            }
        }
        require(labeled > 0, ErrorCode::DegenerateData, "batch has no labeled pixels");

        double loss = 0.0;
        Tensor dprobs(probs.n, probs.c, probs.h, probs.w);
        for (int b = 0; b < config.batch_size; ++b) {
            for (int i = 0; i < plan.output_hw; ++i) {
                for (int j = 0; j < plan.output_hw; ++j) {
                    const float raw = targets[b]->at(std::uint32_t(i + plan.offset),
                                                     std::uint32_t(j + plan.offset));
                    if (std::isnan(raw)) continue;
                    const double truth = clamp_reflectivity(raw, r_max);
                    const std::size_t pix = std::size_t(i) * plan.output_hw + j;
                    for (int r = 1; r <= r_max; ++r) {
                        const double dist = std::abs(double(r - 1) - truth);
                        loss += probs.plane(b, r - 1)[pix] * dist;
                        dprobs.plane(b, r - 1)[pix] = dist / double(labeled);
                    }
                }
            }
        }
        last_train_loss = loss / double(labeled);

        const Tensor dlogits = softmax_backward(probs, dprobs);
        const GradSet grads = unet_backward(params, trace, dlogits);
        adam_step(params, grads, adam, config.learning_rate);

        if (step % config.validation_interval == 0 || step == config.steps) {
            validate_now(step);
        }
    }
    return result;
}

// ---------------------------------------------------------------------
// Fine-tuning, nowcasting
// ---------------------------------------------------------------------

namespace {

struct StationPixel {
    int batch = 0;
    std::size_t pix = 0;  // flat output-patch offset
    PrecipClass truth = PrecipClass::Others;
};

/// Collects the station pixels of a sampled (episode, lead), converting
/// grid coordinates into the output patch. Stations outside the patch are
/// rejected loudly; label sparsity is the caller's concern.
void gather_station_pixels(const std::vector<StationLabel>& labels, const DimPlan& plan, int batch,
                           std::vector<StationPixel>& out) {
    for (const StationLabel& l : labels) {
        const std::int64_t r = l.pixel_row - plan.offset;
        const std::int64_t c = l.pixel_col - plan.offset;
        require(r >= 0 && c >= 0 && r < plan.output_hw && c < plan.output_hw, ErrorCode::OutOfRange,
                "station pixel outside the output patch");
        out.push_back({batch, std::size_t(r) * plan.output_hw + std::size_t(c), l.cls});
    }
}

std::array<double, 3> probs_at(const Tensor& probs, const StationPixel& sp) {
    return {probs.plane(sp.batch, 0)[sp.pix], probs.plane(sp.batch, 1)[sp.pix],
            probs.plane(sp.batch, 2)[sp.pix]};
}

ConfusionMatrix pooled_validation_matrix(ParamSet& params, const TrainingSet& val,
                                         const DimPlan& plan, int r_max) {
    ConfusionMatrix cm;
    for (const TrainEpisode& ep : val.episodes) {
        if (frames_have_nan(ep)) continue;
        for (int lead = 1; lead <= kLeadCount; ++lead) {
            if (ep.labels_per_lead[lead - 1].empty()) continue;
            Tensor input(1, params.config.in_channels, params.config.input_hw, params.config.input_hw);
            fill_input_slot(input, 0, ep, lead, r_max);
            const Tensor logits = unet_infer(params, input);
            const Tensor probs = softmax_channels(logits);
            std::vector<StationPixel> pixels;
            gather_station_pixels(ep.labels_per_lead[lead - 1], plan, 0, pixels);
            for (const StationPixel& sp : pixels) {
                cm.add(sp.truth, hard_classify(probs_at(probs, sp)));
            }
        }
    }
    return cm;
}

}  // namespace

RunResult finetune_nowcast(const std::optional<ParamSet>& init, const TrainConfig& config_in,
                           const TrainingSet& train, const TrainingSet& val) {
    TrainConfig config = config_in;
    config.apply_phase_defaults();
    config.validate();
    require(!train.empty() && !val.empty(), ErrorCode::EmptyInput, "empty training or validation set");
    require(config.model.out_channels == 3, ErrorCode::InvalidArgument,
            "nowcasting fine-tuning needs 3 output channels");
    require(config.model.in_channels == kFramesPerSample + kLeadCount, ErrorCode::InvalidArgument,
            "nowcasting fine-tuning needs 13 input channels");

    const DimPlan plan = dim_plan(config.model);
    require(!plan.reference_only, ErrorCode::InfeasibleConfig,
            "this configuration has no strict stage layout (reference contract only); pick a depth/input size whose plan succeeds");

    for (const TrainEpisode& ep : train.episodes) require_frame_horizon(ep, true);
    for (const TrainEpisode& ep : val.episodes) require_frame_horizon(ep, true);

    ParamSet params = init ? *init : init_params(config.model, mix(config.seed, 1));
    require(params.config.same_backbone(config.model) &&
                params.config.out_channels == config.model.out_channels,
            ErrorCode::ShapeMismatch, "initial parameters do not match the model configuration");
    AdamState adam = AdamState::zeros_like(params);
    Rng sampler(mix(config.seed, 2));

    RunResult result;
    BestTracker best;
    best.maximize = true;
    double last_train_loss = 0.0;

    auto validate_now = [&](int step) {
        const ConfusionMatrix cm = pooled_validation_matrix(params, val, plan, kDefaultReflectivityMax);
        const double score = csi_score(cm, EventClass::Heavy);
        result.curve.push_back({step, last_train_loss, score});
        if (best.improves(score)) {
            best.has_best = true;
            best.best_score = score;
            best.best_step = step;
            result.best.params = params;
            result.best.step = step;
            result.best.validation_score = score;
        }
    };

    result.best.phase = TrainPhase::FinetuneNowcast;
    result.best.seed = config.seed;
    validate_now(0);

    const std::size_t n_train = train.episodes.size();
    for (int step = 1; step <= config.steps; ++step) {
        Tensor input(config.batch_size, config.model.in_channels, config.model.input_hw,
                     config.model.input_hw);
        std::vector<StationPixel> pixels;
        for (int b = 0; b < config.batch_size; ++b) {
            const TrainEpisode* ep = nullptr;
            int target_index = 1;
            for (int tries = 0; tries < 1000; ++tries) {
                const TrainEpisode& cand = train.episodes[sampler.below(n_train)];
                const int k = int(sampler.below(kLeadCount)) + 1;
                if (!frames_have_nan(cand) && !cand.labels_per_lead[k - 1].empty()) {
                    ep = &cand;
                    target_index = k;
                    break;
                }
            }
            require(ep != nullptr, ErrorCode::DegenerateData,
                    "could not sample a labeled episode with complete frames");
            fill_input_slot(input, b, *ep, target_index, kDefaultReflectivityMax);
            gather_station_pixels(ep->labels_per_lead[target_index - 1], plan, b, pixels);
        }

        ForwardTrace trace;
        const Tensor logits = unet_forward(params, input, BnMode::Train, &trace);
        const Tensor probs = softmax_channels(logits);

        double loss = 0.0;
        Tensor dprobs(probs.n, probs.c, probs.h, probs.w);
        if (config.loss_choice == LossChoice::Csi) {
            SoftConfusion acc;
            for (const StationPixel& sp : pixels) acc.update(probs_at(probs, sp), sp.truth);
            loss = csi_loss(acc);
            for (const StationPixel& sp : pixels) {
                const auto g = csi_loss_grad_probs(acc, probs_at(probs, sp), sp.truth);
                for (int c = 0; c < 3; ++c) dprobs.plane(sp.batch, c)[sp.pix] += g[c];
            }
        } else {
            for (const StationPixel& sp : pixels) {
                const auto p = probs_at(probs, sp);
                std::array<double, 3> g;
                if (config.loss_choice == LossChoice::Ce) {
                    loss += cross_entropy_loss(p, sp.truth);
                    g = cross_entropy_grad_probs(p, sp.truth);
                } else {
                    loss += focal_loss(p, sp.truth, config.gamma);
                    g = focal_grad_probs(p, sp.truth, config.gamma);
                }
                for (int c = 0; c < 3; ++c) dprobs.plane(sp.batch, c)[sp.pix] += g[c];
            }
        }
        last_train_loss = loss;

        const Tensor dlogits = softmax_backward(probs, dprobs);
        const GradSet grads = unet_backward(params, trace, dlogits);
        adam_step(params, grads, adam, config.learning_rate);

        if (step % config.validation_interval == 0 || step == config.steps) {
            validate_now(step);
        }
    }
    return result;
}

// ---------------------------------------------------------------------
// Fine-tuning, estimation
// ---------------------------------------------------------------------

namespace {

double estimation_validation_mse(ParamSet& params, const TrainingSet& val, const DimPlan& plan,
                                 int r_max) {
    std::vector<std::vector<std::pair<double, double>>> groups;
    for (const TrainEpisode& ep : val.episodes) {
        if (frames_have_nan(ep) || ep.estimation_targets.empty()) continue;
        Tensor input(1, params.config.in_channels, params.config.input_hw, params.config.input_hw);
        fill_input_slot(input, 0, ep, 1, r_max);
        const Tensor preds = unet_infer(params, input);
        std::vector<std::pair<double, double>> group;
        for (const StationTarget& t : ep.estimation_targets) {
            const std::int64_t r = t.pixel_row - plan.offset;
            const std::int64_t c = t.pixel_col - plan.offset;
            require(r >= 0 && c >= 0 && r < plan.output_hw && c < plan.output_hw, ErrorCode::OutOfRange,
                    "station pixel outside the output patch");
            group.emplace_back(preds.plane(0, 0)[std::size_t(r) * plan.output_hw + std::size_t(c)],
                               t.accum_mm);
        }
        groups.push_back(std::move(group));
    }
    return grouped_mse(groups);
}

}  // namespace

RunResult finetune_estimation(const std::optional<ParamSet>& init, const TrainConfig& config_in,
                              const TrainingSet& train, const TrainingSet& val) {
    TrainConfig config = config_in;
    config.apply_phase_defaults();
    config.validate();
    require(!train.empty() && !val.empty(), ErrorCode::EmptyInput, "empty training or validation set");
    require(config.model.out_channels == 1, ErrorCode::InvalidArgument,
            "estimation fine-tuning needs 1 output channel");
    require(config.model.in_channels == kFramesPerSample, ErrorCode::InvalidArgument,
            "estimation fine-tuning needs 7 input channels");

    const DimPlan plan = dim_plan(config.model);
    require(!plan.reference_only, ErrorCode::InfeasibleConfig,
            "this configuration has no strict stage layout (reference contract only); pick a depth/input size whose plan succeeds");

    for (const TrainEpisode& ep : train.episodes) require_frame_horizon(ep, false);
    for (const TrainEpisode& ep : val.episodes) require_frame_horizon(ep, false);

    ParamSet params = init ? *init : init_params(config.model, mix(config.seed, 1));
    require(params.config.same_backbone(config.model) && params.config.out_channels == 1,
            ErrorCode::ShapeMismatch, "initial parameters do not match the model configuration");
    AdamState adam = AdamState::zeros_like(params);
    Rng sampler(mix(config.seed, 2));

    RunResult result;
    BestTracker best;
    best.maximize = false;
    double last_train_loss = 0.0;

    auto validate_now = [&](int step) {
        const double score = estimation_validation_mse(params, val, plan, kDefaultReflectivityMax);
        result.curve.push_back({step, last_train_loss, score});
        if (best.improves(score)) {
            best.has_best = true;
            best.best_score = score;
            best.best_step = step;
            result.best.params = params;
            result.best.step = step;
            result.best.validation_score = score;
        }
    };

    result.best.phase = TrainPhase::FinetuneEstimation;
    result.best.seed = config.seed;
    validate_now(0);

    const std::size_t n_train = train.episodes.size();
    for (int step = 1; step <= config.steps; ++step) {
        Tensor input(config.batch_size, config.model.in_channels, config.model.input_hw,
                     config.model.input_hw);
        std::vector<const TrainEpisode*> batch(config.batch_size, nullptr);
        for (int b = 0; b < config.batch_size; ++b) {
            for (int tries = 0; tries < 1000; ++tries) {
                const TrainEpisode& cand = train.episodes[sampler.below(n_train)];
                if (!frames_have_nan(cand) && !cand.estimation_targets.empty()) {
                    batch[b] = &cand;
                    break;
                }
            }
            require(batch[b] != nullptr, ErrorCode::DegenerateData,
                    "could not sample a labeled episode with complete frames");
            fill_input_slot(input, b, *batch[b], 1, kDefaultReflectivityMax);
        }

        ForwardTrace trace;
        const Tensor preds = unet_forward(params, input, BnMode::Train, &trace);

        double loss = 0.0;
        Tensor dlogits(preds.n, preds.c, preds.h, preds.w);
        for (int b = 0; b < config.batch_size; ++b) {
            for (const StationTarget& t : batch[b]->estimation_targets) {
                const std::int64_t r = t.pixel_row - plan.offset;
                const std::int64_t c = t.pixel_col - plan.offset;
                require(r >= 0 && c >= 0 && r < plan.output_hw && c < plan.output_hw,
                        ErrorCode::OutOfRange, "station pixel outside the output patch");
                const std::size_t pix = std::size_t(r) * plan.output_hw + std::size_t(c);
                const double e = preds.plane(b, 0)[pix] - t.accum_mm;
                loss += e * e;
                dlogits.plane(b, 0)[pix] += 2.0 * e;
            }
        }
        last_train_loss = loss;

        const GradSet grads = unet_backward(params, trace, dlogits);
        adam_step(params, grads, adam, config.learning_rate);

        if (step % config.validation_interval == 0 || step == config.steps) {
            validate_now(step);
        }
    }
    return result;
}

// ---------------------------------------------------------------------
// Parameter transfer
// ---------------------------------------------------------------------

ParamSet transfer_params(const Checkpoint& pretrained, const ModelConfig& target, std::uint64_t seed) {
    const ParamSet& src = pretrained.params;
    require(src.config.same_backbone(target), ErrorCode::ShapeMismatch,
            "pretrained backbone does not match the target configuration");
    ParamSet dst = init_params(target, mix(seed, 3));
    for (std::size_t i = 0; i < src.down.size(); ++i) dst.down[i] = src.down[i];
    for (std::size_t i = 0; i < src.up.size(); ++i) dst.up[i] = src.up[i];
    if (src.config.out_channels == target.out_channels) {
        dst.head = src.head;  // identical widths transfer whole
    }
    // otherwise the freshly initialized head stays
    return dst;
}

// ---------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------

EvalReport evaluate_nowcast(const ParamSet& params, const TrainingSet& test) {
    const DimPlan plan = dim_plan(params.config);
    std::vector<ConfusionMatrix> matrices(kLeadCount);
    for (int lead = 1; lead <= kLeadCount; ++lead) {
        matrices[lead - 1].lead_time_minutes = lead * kLeadStepMinutes;
    }
    ParamSet& p = const_cast<ParamSet&>(params);
    for (const TrainEpisode& ep : test.episodes) {
        if (frames_have_nan(ep)) continue;
        for (int lead = 1; lead <= kLeadCount; ++lead) {
            if (ep.labels_per_lead[lead - 1].empty()) continue;
            Tensor input(1, params.config.in_channels, params.config.input_hw, params.config.input_hw);
            fill_input_slot(input, 0, ep, lead, kDefaultReflectivityMax);
            const Tensor logits = unet_infer(p, input);
            const Tensor probs = softmax_channels(logits);
            std::vector<StationPixel> pixels;
            gather_station_pixels(ep.labels_per_lead[lead - 1], plan, 0, pixels);
            for (const StationPixel& sp : pixels) {
                matrices[lead - 1].add(sp.truth, hard_classify(probs_at(probs, sp)));
            }
        }
    }
    return EvalReport::from_matrices(std::move(matrices));
}

EvalReport evaluate_persistence(const TrainingSet& test) {
    std::vector<ConfusionMatrix> matrices(kLeadCount);
    for (int lead = 1; lead <= kLeadCount; ++lead) {
        matrices[lead - 1].lead_time_minutes = lead * kLeadStepMinutes;
    }
    for (const TrainEpisode& ep : test.episodes) {
        // the current class, per station pixel
        std::map<std::pair<std::int64_t, std::int64_t>, PrecipClass> current;
        for (const StationLabel& l : ep.labels_now) current[{l.pixel_row, l.pixel_col}] = l.cls;
        for (int lead = 1; lead <= kLeadCount; ++lead) {
            for (const StationLabel& l : ep.labels_per_lead[lead - 1]) {
                auto it = current.find({l.pixel_row, l.pixel_col});
                if (it == current.end()) continue;  // no current observation, skipped
                matrices[lead - 1].add(l.cls, it->second);
            }
        }
    }
    return EvalReport::from_matrices(std::move(matrices));
}

namespace {

bool passes_filter(double accum_mm, ClassFilter filter) {
    const PrecipClass cls = precip_class(accum_mm);
    switch (filter) {
        case ClassFilter::All: return true;
        case ClassFilter::Heavy: return cls == PrecipClass::Heavy;
        case ClassFilter::Light: return cls == PrecipClass::Light;
    }
    return false;
}

}  // namespace

std::optional<double> evaluate_estimation(const ParamSet& params, const TrainingSet& test,
                                          ClassFilter filter) {
    const DimPlan plan = dim_plan(params.config);
    ParamSet& p = const_cast<ParamSet&>(params);
    std::vector<std::vector<std::pair<double, double>>> groups;
    for (const TrainEpisode& ep : test.episodes) {
        if (frames_have_nan(ep) || ep.estimation_targets.empty()) continue;
        Tensor input(1, params.config.in_channels, params.config.input_hw, params.config.input_hw);
        fill_input_slot(input, 0, ep, 1, kDefaultReflectivityMax);
        const Tensor preds = unet_infer(p, input);
        std::vector<std::pair<double, double>> group;
        for (const StationTarget& t : ep.estimation_targets) {
            if (!passes_filter(t.accum_mm, filter)) continue;
            const std::int64_t r = t.pixel_row - plan.offset;
            const std::int64_t c = t.pixel_col - plan.offset;
            require(r >= 0 && c >= 0 && r < plan.output_hw && c < plan.output_hw, ErrorCode::OutOfRange,
                    "station pixel outside the output patch");
            group.emplace_back(preds.plane(0, 0)[std::size_t(r) * plan.output_hw + std::size_t(c)],
                               t.accum_mm);
        }
        if (!group.empty()) groups.push_back(std::move(group));
    }
    if (groups.empty()) return std::nullopt;
    return grouped_mse(groups);
}

std::optional<double> evaluate_zr_baseline(const ZRParams& zr, const TrainingSet& test,
                                           ClassFilter filter) {
    std::vector<std::vector<std::pair<double, double>>> groups;
    for (const TrainEpisode& ep : test.episodes) {
        if (ep.estimation_targets.empty()) continue;
        std::vector<RadarGrid> window(ep.frames.begin(), ep.frames.begin() + kFramesPerSample);
        std::vector<std::pair<double, double>> group;
        for (const StationTarget& t : ep.estimation_targets) {
            if (!passes_filter(t.accum_mm, filter)) continue;
            const HourlyEstimate est = zr_hourly_estimate(window, zr, t.pixel_row, t.pixel_col);
            group.emplace_back(est.accum_mm, t.accum_mm);
        }
        if (!group.empty()) groups.push_back(std::move(group));
    }
    if (groups.empty()) return std::nullopt;
    return grouped_mse(groups);
}

double overall_heavy_csi(const ParamSet& params, const TrainingSet& test) {
    const EvalReport report = evaluate_nowcast(params, test);
    ConfusionMatrix pooled;
    for (const ConfusionMatrix& cm : report.matrices) pooled += cm;
    return csi_score(pooled, EventClass::Heavy);
}

}  // namespace nowcast
