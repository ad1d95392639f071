#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "nowcast/dataset.hpp"

namespace nowcast {

/// 3x3 integer counts, rows = actual class, columns = predicted class.
struct ConfusionMatrix {
    std::array<std::array<std::uint64_t, 3>, 3> counts{};
    int lead_time_minutes = 0;

    void add(PrecipClass actual, PrecipClass predicted, std::uint64_t n = 1) {
        counts[int(actual)][int(predicted)] += n;
    }
    std::uint64_t total() const;

    ConfusionMatrix& operator+=(const ConfusionMatrix& other);
};

/// argmax over the three class probabilities, ties toward the more
/// severe class.
PrecipClass hard_classify(const std::array<double, 3>& probs);

ConfusionMatrix confusion_matrix(const std::vector<std::pair<PrecipClass, PrecipClass>>& predicted_actual,
                                 int lead_time_minutes);

/// Binary TP/FP/FN of an event class. RAIN merges LIGHT and HEAVY rows
/// and columns before counting.
struct BinaryCounts {
    std::uint64_t tp = 0, fp = 0, fn = 0;
};
BinaryCounts binary_counts(const ConfusionMatrix& cm, EventClass c);

/// TP/(TP+FP+FN); 0 when the denominator is 0.
double csi_score(const ConfusionMatrix& cm, EventClass c);

/// 2TP/(2TP+FP+FN); 0 when the denominator is 0.
double f1_score(const ConfusionMatrix& cm, EventClass c);

/// Fractions of cases with predicted ordinal above / below the actual
/// ordinal. The matrix must contain at least one case.
std::pair<double, double> over_under_ratios(const ConfusionMatrix& cm);

/// Mean over timestamps of the per-timestamp mean squared station error.
/// Each group holds the (prediction, truth) pairs of one timestamp.
double grouped_mse(const std::vector<std::vector<std::pair<double, double>>>& groups);

/// Great-circle distance, sphere radius 6371.0088 km.
double haversine_km(double lat_a, double lon_a, double lat_b, double lon_b);

struct LeadScores {
    int lead_time_minutes = 0;
    double csi_rain = 0, f1_rain = 0, csi_heavy = 0, f1_heavy = 0;
};

struct EvalReport {
    std::vector<LeadScores> leads;            // one row per lead time, ascending
    LeadScores average;                        // arithmetic mean of the rows
    std::optional<double> mse;                 // estimation runs only
    std::vector<ConfusionMatrix> matrices;     // per lead

    static EvalReport from_matrices(std::vector<ConfusionMatrix> matrices);
};

void write_report_csv(const EvalReport& report, const std::filesystem::path& path);
EvalReport read_report_csv(const std::filesystem::path& path);

/// Aligned plain-text rendering of the per-lead score table.
std::string format_report_text(const EvalReport& report);

/// One scored station prediction for the radius-filtered case analysis.
struct CasePrediction {
    std::size_t station_index = 0;
    int lead_time_minutes = 0;
    PrecipClass predicted = PrecipClass::Others;
    PrecipClass actual = PrecipClass::Others;
};

struct CaseScores {
    // per lead time, ascending; nullopt when no station in radius produced
    // a defined score (printed as 0.000 for table compatibility)
    std::vector<std::optional<double>> csi_rain;
    std::vector<std::optional<double>> csi_heavy;
};

/// Restricts scoring to stations within radius_km of the event center
/// (infinity keeps every station), then computes per-lead CSI.
CaseScores case_csi(const std::vector<CasePrediction>& predictions,
                    const std::vector<Station>& stations,
                    double center_lat, double center_lon, double radius_km);

}  // namespace nowcast
