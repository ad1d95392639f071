#pragma once

#include <array>
#include <span>
#include <vector>

#include "nowcast/dataset.hpp"

namespace nowcast {

constexpr double kProbabilityFloor = 1e-12;
constexpr double kCsiDenominatorEpsilon = 1e-8;
constexpr double kProbSumTolerance = 1e-6;

/// Differentiable true/false positive and false negative accumulators for
/// the two tracked event classes. Accumulate over the whole mini-batch
/// before taking the loss; the loss is nonlinear in these counts.
struct SoftConfusion {
    // index 0 = RAIN, 1 = HEAVY
    std::array<double, 2> tp{};
    std::array<double, 2> fp{};
    std::array<double, 2> fn{};

    void update(const std::array<double, 3>& pred_probs, PrecipClass truth);

    SoftConfusion& operator+=(const SoftConfusion& other);
};

/// -1/2 * (tp/(tp+fp+fn))_RAIN - 1/2 * (tp/(tp+fp+fn))_HEAVY with an
/// epsilon guard per class, so an empty class contributes 0. Range [-1, 0].
double csi_loss(const SoftConfusion& acc);

/// d(csi_loss)/d(pred_probs) for one instance that was accumulated into
/// acc. Valid once acc holds the full batch.
std::array<double, 3> csi_loss_grad_probs(const SoftConfusion& acc,
                                          const std::array<double, 3>& pred_probs,
                                          PrecipClass truth);

/// Expected absolute distance between the predicted reflectivity class
/// distribution and the true reflectivity, class centers at (r-1) dBZ for
/// r = 1..r_max. One labeled pixel.
double emd_pixel_loss(std::span<const double> pred_probs, double truth_dbz);

/// d(emd)/d(pred_probs) for one pixel.
void emd_pixel_grad_probs(std::span<const double> pred_probs, double truth_dbz,
                          std::span<double> grad_out);

/// Mean of emd_pixel_loss over labeled pixels. pixel probability vectors
/// are rows of a flat [pixel][class] array.
double emd_pretrain_loss(const std::vector<std::vector<double>>& pred_probs,
                         const std::vector<double>& truth_dbz);

/// -log of the truth-class probability, floored at 1e-12.
double cross_entropy_loss(const std::array<double, 3>& pred_probs, PrecipClass truth);
std::array<double, 3> cross_entropy_grad_probs(const std::array<double, 3>& pred_probs,
                                               PrecipClass truth);

/// (1 - q_truth)^gamma times the cross entropy. gamma = 0 reproduces
/// cross_entropy_loss exactly, bit for bit.
double focal_loss(const std::array<double, 3>& pred_probs, PrecipClass truth, double gamma);
std::array<double, 3> focal_grad_probs(const std::array<double, 3>& pred_probs, PrecipClass truth,
                                       double gamma);

/// Sum of squared differences over paired values.
double sse_loss(std::span<const double> preds, std::span<const double> truths);

/// Soft membership in the tracked event classes: RAIN = p_L + p_H,
/// HEAVY = p_H.
inline double soft_membership(const std::array<double, 3>& probs, EventClass c) {
    return c == EventClass::Heavy ? probs[2] : probs[1] + probs[2];
}

inline bool truth_in_event(PrecipClass truth, EventClass c) {
    return c == EventClass::Heavy ? truth == PrecipClass::Heavy : truth != PrecipClass::Others;
}

}  // namespace nowcast
