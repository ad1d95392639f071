#include "nowcast/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

namespace nowcast {

std::uint64_t ConfusionMatrix::total() const {
    std::uint64_t t = 0;
    for (const auto& row : counts)
        for (std::uint64_t v : row) t += v;
    return t;
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
    for (int a = 0; a < 3; ++a)
        for (int p = 0; p < 3; ++p) counts[a][p] += other.counts[a][p];
    return *this;
}

PrecipClass hard_classify(const std::array<double, 3>& probs) {
    int best = 0;
    for (int c = 1; c < 3; ++c) {
        if (probs[c] >= probs[best]) best = c;  // >= : severe class wins ties
    }
    return PrecipClass(best);
}

ConfusionMatrix confusion_matrix(const std::vector<std::pair<PrecipClass, PrecipClass>>& predicted_actual,
                                 int lead_time_minutes) {
    ConfusionMatrix cm;
    cm.lead_time_minutes = lead_time_minutes;
    for (const auto& [predicted, actual] : predicted_actual) cm.add(actual, predicted);
    return cm;
}

BinaryCounts binary_counts(const ConfusionMatrix& cm, EventClass c) {
    const auto& m = cm.counts;
    BinaryCounts b;
    if (c == EventClass::Heavy) {
        b.tp = m[2][2];
        b.fp = m[0][2] + m[1][2];
        b.fn = m[2][0] + m[2][1];
    } else {
        b.tp = m[1][1] + m[1][2] + m[2][1] + m[2][2];
        b.fp = m[0][1] + m[0][2];
        b.fn = m[1][0] + m[2][0];
    }
    return b;
}

double csi_score(const ConfusionMatrix& cm, EventClass c) {
    const BinaryCounts b = binary_counts(cm, c);
    const std::uint64_t den = b.tp + b.fp + b.fn;
    return den == 0 ? 0.0 : double(b.tp) / double(den);
}

double f1_score(const ConfusionMatrix& cm, EventClass c) {
    const BinaryCounts b = binary_counts(cm, c);
    const std::uint64_t den = 2 * b.tp + b.fp + b.fn;
    return den == 0 ? 0.0 : double(2 * b.tp) / double(den);
}

std::pair<double, double> over_under_ratios(const ConfusionMatrix& cm) {
    const std::uint64_t total = cm.total();
    require(total > 0, ErrorCode::EmptyInput, "confusion matrix holds no cases");
    std::uint64_t over = 0, under = 0;
    for (int a = 0; a < 3; ++a) {
        for (int p = 0; p < 3; ++p) {
            if (p > a) over += cm.counts[a][p];
            if (p < a) under += cm.counts[a][p];
        }
    }
    return {double(over) / double(total), double(under) / double(total)};
}

double grouped_mse(const std::vector<std::vector<std::pair<double, double>>>& groups) {
    require(!groups.empty(), ErrorCode::EmptyInput, "no timestamp groups to score");
    double outer = 0.0;
    for (const auto& group : groups) {
        require(!group.empty(), ErrorCode::EmptyInput, "empty station group");
        double inner = 0.0;
        for (const auto& [pred, truth] : group) {
            const double e = pred - truth;
            inner += e * e;
        }
        outer += inner / double(group.size());
    }
    return outer / double(groups.size());
}

double haversine_km(double lat_a, double lon_a, double lat_b, double lon_b) {
    constexpr double kEarthRadiusKm = 6371.0088;
    constexpr double deg = M_PI / 180.0;
    const double dlat = (lat_b - lat_a) * deg;
    const double dlon = (lon_b - lon_a) * deg;
    const double s = std::sin(dlat / 2), t = std::sin(dlon / 2);
    const double a = s * s + std::cos(lat_a * deg) * std::cos(lat_b * deg) * t * t;
    return 2.0 * kEarthRadiusKm * std::asin(std::min(1.0, std::sqrt(a)));
}

EvalReport EvalReport::from_matrices(std::vector<ConfusionMatrix> matrices) {
    std::sort(matrices.begin(), matrices.end(),
              [](const ConfusionMatrix& a, const ConfusionMatrix& b) {
                  return a.lead_time_minutes < b.lead_time_minutes;
              });
    EvalReport report;
    for (const ConfusionMatrix& cm : matrices) {
        LeadScores row;
        row.lead_time_minutes = cm.lead_time_minutes;
        row.csi_rain = csi_score(cm, EventClass::Rain);
        row.f1_rain = f1_score(cm, EventClass::Rain);
        row.csi_heavy = csi_score(cm, EventClass::Heavy);
        row.f1_heavy = f1_score(cm, EventClass::Heavy);
        report.leads.push_back(row);
        report.average.csi_rain += row.csi_rain;
        report.average.f1_rain += row.f1_rain;
        report.average.csi_heavy += row.csi_heavy;
        report.average.f1_heavy += row.f1_heavy;
    }
    if (!report.leads.empty()) {
        const double n = double(report.leads.size());
        report.average.csi_rain /= n;
        report.average.f1_rain /= n;
        report.average.csi_heavy /= n;
        report.average.f1_heavy /= n;
    }
    report.matrices = std::move(matrices);
    return report;
}

void write_report_csv(const EvalReport& report, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    require(out.good(), ErrorCode::IoFailure, "cannot open for writing: " + path.string());
    out << "lead_minutes,csi_rain,f1_rain,csi_heavy,f1_heavy";
    if (report.mse) out << ",mse";
    out << '\n';
    out << std::setprecision(17);
    for (const LeadScores& row : report.leads) {
        out << row.lead_time_minutes << ',' << row.csi_rain << ',' << row.f1_rain << ','
            << row.csi_heavy << ',' << row.f1_heavy;
        if (report.mse) out << ',';
        out << '\n';
    }
    out << "average," << report.average.csi_rain << ',' << report.average.f1_rain << ','
        << report.average.csi_heavy << ',' << report.average.f1_heavy;
    if (report.mse) out << ',' << *report.mse;
    out << '\n';
    require(out.good(), ErrorCode::IoFailure, "write failed: " + path.string());
}

EvalReport read_report_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(in.good(), ErrorCode::IoFailure, "cannot open " + path.string());
    std::string line;
    require(static_cast<bool>(std::getline(in, line)), ErrorCode::ParseError, "empty report");
    const bool has_mse = line.find(",mse") != std::string::npos;
    EvalReport report;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string lead;
        std::getline(ss, lead, ',');
        LeadScores row;
        char comma;
        ss >> row.csi_rain >> comma >> row.f1_rain >> comma >> row.csi_heavy >> comma >> row.f1_heavy;
        if (lead == "average") {
            report.average = row;
            if (has_mse) {
                double m;
                if (ss >> comma >> m) report.mse = m;
            }
        } else {
            row.lead_time_minutes = std::stoi(lead);
            report.leads.push_back(row);
        }
    }
    return report;
}

std::string format_report_text(const EvalReport& report) {
    std::ostringstream out;
    out << std::fixed << std::setprecision(3);
    out << std::setw(12) << "Lead time" << std::setw(10) << "CSI_RAIN" << std::setw(10) << "F1_RAIN"
        << std::setw(11) << "CSI_HEAVY" << std::setw(10) << "F1_HEAVY" << '\n';
    auto row = [&](const std::string& name, const LeadScores& s) {
        out << std::setw(12) << name << std::setw(10) << s.csi_rain << std::setw(10) << s.f1_rain
            << std::setw(11) << s.csi_heavy << std::setw(10) << s.f1_heavy << '\n';
    };
    for (const LeadScores& s : report.leads) {
        row(std::to_string(s.lead_time_minutes) + " min", s);
    }
    row("Average", report.average);
    if (report.mse) {
        out << "MSE " << std::setprecision(6) << *report.mse << '\n';
    }
    return out.str();
}

CaseScores case_csi(const std::vector<CasePrediction>& predictions,
                    const std::vector<Station>& stations,
                    double center_lat, double center_lon, double radius_km) {
    std::vector<bool> in_radius(stations.size(), true);
    if (std::isfinite(radius_km)) {
        for (std::size_t i = 0; i < stations.size(); ++i) {
            in_radius[i] =
                haversine_km(stations[i].lat, stations[i].lon, center_lat, center_lon) <= radius_km;
        }
    }

    std::map<int, ConfusionMatrix> per_lead;
    std::set<int> leads_seen;
    for (const CasePrediction& p : predictions) {
        leads_seen.insert(p.lead_time_minutes);
        require(p.station_index < stations.size(), ErrorCode::OutOfRange, "station index out of table");
        if (!in_radius[p.station_index]) continue;
        ConfusionMatrix& cm = per_lead[p.lead_time_minutes];
        cm.lead_time_minutes = p.lead_time_minutes;
        cm.add(p.actual, p.predicted);
    }

    CaseScores scores;
    for (int lead : leads_seen) {
        auto it = per_lead.find(lead);
        if (it == per_lead.end()) {
            // no station in radius: undefined, not zero
            scores.csi_rain.push_back(std::nullopt);
            scores.csi_heavy.push_back(std::nullopt);
            continue;
        }
        auto defined = [&](EventClass c) -> std::optional<double> {
            const BinaryCounts b = binary_counts(it->second, c);
            if (b.tp + b.fp + b.fn == 0) return std::nullopt;
            return double(b.tp) / double(b.tp + b.fp + b.fn);
        };
        scores.csi_rain.push_back(defined(EventClass::Rain));
        scores.csi_heavy.push_back(defined(EventClass::Heavy));
    }
    return scores;
}

}  // namespace nowcast
