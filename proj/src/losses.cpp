#include "nowcast/losses.hpp"

#include <cmath>

namespace nowcast {

namespace {

void check_normalized(std::span<const double> probs) {
    double sum = 0.0;
    for (double p : probs) sum += p;
    require(std::abs(sum - 1.0) <= kProbSumTolerance, ErrorCode::InvalidArgument,
            "probability vector does not sum to 1");
}

}  // namespace

void SoftConfusion::update(const std::array<double, 3>& pred_probs, PrecipClass truth) {
    check_normalized(pred_probs);
    for (int k = 0; k < 2; ++k) {
        const EventClass c = EventClass(k);
        const double q = soft_membership(pred_probs, c);
        if (truth_in_event(truth, c)) {
            tp[k] += q;
            fn[k] += 1.0 - q;
        } else {
            fp[k] += q;
        }
    }
}

SoftConfusion& SoftConfusion::operator+=(const SoftConfusion& other) {
    for (int k = 0; k < 2; ++k) {
        tp[k] += other.tp[k];
        fp[k] += other.fp[k];
        fn[k] += other.fn[k];
    }
    return *this;
}

double csi_loss(const SoftConfusion& acc) {
    double loss = 0.0;
    for (int k = 0; k < 2; ++k) {
        const double den = acc.tp[k] + acc.fp[k] + acc.fn[k] + kCsiDenominatorEpsilon;
        loss -= 0.5 * acc.tp[k] / den;
    }
    return loss;
}

std::array<double, 3> csi_loss_grad_probs(const SoftConfusion& acc,
                                          const std::array<double, 3>& pred_probs,
                                          PrecipClass truth) {
    (void)pred_probs;  // the counts are linear in the probabilities
    std::array<double, 3> grad{};
    for (int k = 0; k < 2; ++k) {
        const EventClass c = EventClass(k);
        const double den = acc.tp[k] + acc.fp[k] + acc.fn[k] + kCsiDenominatorEpsilon;
        double dq;
        if (truth_in_event(truth, c)) {
            // d/dq of -tp/(den) with tp += q, fn += 1-q: den is invariant
            dq = -0.5 / den;
        } else {
            dq = 0.5 * acc.tp[k] / (den * den);
        }
        if (c == EventClass::Heavy) {
            grad[2] += dq;
        } else {
            grad[1] += dq;
            grad[2] += dq;
        }
    }
    return grad;
}

double emd_pixel_loss(std::span<const double> pred_probs, double truth_dbz) {
    check_normalized(pred_probs);
    double loss = 0.0;
    for (std::size_t r = 1; r <= pred_probs.size(); ++r) {
        loss += pred_probs[r - 1] * std::abs(double(r - 1) - truth_dbz);
    }
    return loss;
}

void emd_pixel_grad_probs(std::span<const double> pred_probs, double truth_dbz,
                          std::span<double> grad_out) {
    require(grad_out.size() == pred_probs.size(), ErrorCode::ShapeMismatch,
            "gradient buffer size mismatch");
    for (std::size_t r = 1; r <= pred_probs.size(); ++r) {
        grad_out[r - 1] = std::abs(double(r - 1) - truth_dbz);
    }
}

double emd_pretrain_loss(const std::vector<std::vector<double>>& pred_probs,
                         const std::vector<double>& truth_dbz) {
    require(pred_probs.size() == truth_dbz.size(), ErrorCode::ShapeMismatch,
            "one probability vector per labeled pixel required");
    require(!pred_probs.empty(), ErrorCode::EmptyInput, "no labeled pixels");
    double sum = 0.0;
    for (std::size_t i = 0; i < pred_probs.size(); ++i) {
        sum += emd_pixel_loss(pred_probs[i], truth_dbz[i]);
    }
    return sum / double(pred_probs.size());
}

double cross_entropy_loss(const std::array<double, 3>& pred_probs, PrecipClass truth) {
    const double q = std::max(pred_probs[int(truth)], kProbabilityFloor);
    return -std::log(q);
}

std::array<double, 3> cross_entropy_grad_probs(const std::array<double, 3>& pred_probs,
                                               PrecipClass truth) {
    std::array<double, 3> grad{};
    const double q = std::max(pred_probs[int(truth)], kProbabilityFloor);
    grad[int(truth)] = -1.0 / q;
    return grad;
}

double focal_loss(const std::array<double, 3>& pred_probs, PrecipClass truth, double gamma) {
    require(gamma >= 0.0, ErrorCode::InvalidArgument, "gamma must be non-negative");
    const double q = std::max(pred_probs[int(truth)], kProbabilityFloor);
    return std::pow(1.0 - q, gamma) * -std::log(q);
}

std::array<double, 3> focal_grad_probs(const std::array<double, 3>& pred_probs, PrecipClass truth,
                                       double gamma) {
    require(gamma >= 0.0, ErrorCode::InvalidArgument, "gamma must be non-negative");
    std::array<double, 3> grad{};
    const double q = std::max(pred_probs[int(truth)], kProbabilityFloor);
    const double one_minus = 1.0 - q;
    double g = -std::pow(one_minus, gamma) / q;
    if (gamma > 0.0 && one_minus > 0.0) {
        g += gamma * std::pow(one_minus, gamma - 1.0) * std::log(q);
    }
    grad[int(truth)] = g;
    return grad;
}

double sse_loss(std::span<const double> preds, std::span<const double> truths) {
    require(preds.size() == truths.size(), ErrorCode::ShapeMismatch, "prediction/truth length mismatch");
    double sum = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const double e = preds[i] - truths[i];
        sum += e * e;
    }
    return sum;
}

}  // namespace nowcast
