// nowcast-kit: command-line driver for the radar nowcasting toolkit.
// Subcommands cover synthetic data generation, the two training phases,
// evaluation, estimation scoring, the non-learned baselines and report
// merging. Exit codes: 0 success, 1 domain error, 2 usage error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "nowcast/baselines.hpp"
#include "nowcast/synth.hpp"
#include "nowcast/trainer.hpp"

namespace fs = std::filesystem;
using namespace nowcast;

namespace {

// -------------------------------------------------------------------
// key=value config files; unknown keys are rejected, missing keys take
// the published defaults
// -------------------------------------------------------------------

std::map<std::string, std::string> parse_kv_file(const fs::path& path) {
    std::ifstream in(path);
    require(in.good(), ErrorCode::IoFailure, "cannot open config " + path.string());
    std::map<std::string, std::string> kv;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        require(eq != std::string::npos, ErrorCode::ParseError,
                "config line " + std::to_string(line_no) + " is not key=value");
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return kv;
}

double parse_double(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const double v = std::stod(value, &used);
        require(used == value.size(), ErrorCode::ParseError, "trailing characters");
        return v;
    } catch (const Error&) {
        throw;
    } catch (const std::exception&) {
        fail(ErrorCode::ParseError, "invalid number for key " + key);
    }
}

std::int64_t parse_int(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const long long v = std::stoll(value, &used);
        require(used == value.size(), ErrorCode::ParseError, "trailing characters");
        return v;
    } catch (const Error&) {
        throw;
    } catch (const std::exception&) {
        fail(ErrorCode::ParseError, "invalid integer for key " + key);
    }
}

TrainConfig load_train_config(const fs::path& path, TrainPhase phase) {
    TrainConfig cfg;
    cfg.phase = phase;
    cfg.model.depth = 7;
    cfg.model.base_channels = 32;
    cfg.model.input_hw = 1468;
    if (!path.empty()) {
        for (const auto& [key, value] : parse_kv_file(path)) {
            if (key == "steps") cfg.steps = int(parse_int(key, value));
            else if (key == "batch_size") cfg.batch_size = int(parse_int(key, value));
            else if (key == "learning_rate") cfg.learning_rate = parse_double(key, value);
            else if (key == "validation_interval") cfg.validation_interval = int(parse_int(key, value));
            else if (key == "gamma") cfg.gamma = parse_double(key, value);
            else if (key == "seed") cfg.seed = std::uint64_t(parse_int(key, value));
            else if (key == "depth") cfg.model.depth = int(parse_int(key, value));
            else if (key == "base_channels") cfg.model.base_channels = int(parse_int(key, value));
            else if (key == "input_hw") cfg.model.input_hw = int(parse_int(key, value));
            else if (key == "r_max") cfg.model.out_channels = int(parse_int(key, value));
            else fail(ErrorCode::InvalidArgument, "unknown config key " + key);
        }
    }
    cfg.apply_phase_defaults();
    require(cfg.learning_rate > 0.0, ErrorCode::InvalidArgument, "learning_rate must be positive");
    require(cfg.steps > 0, ErrorCode::InvalidArgument, "steps must be positive");
    return cfg;
}

void write_manifest(const fs::path& out_dir, const std::string& subcommand,
                    const std::map<std::string, std::string>& options) {
    fs::create_directories(out_dir);
    std::ofstream echo(out_dir / "config.echo", std::ios::trunc);
    require(echo.good(), ErrorCode::IoFailure, "cannot write manifest");
    echo << "subcommand=" << subcommand << '\n';
    for (const auto& [k, v] : options) echo << k << '=' << v << '\n';
}

void write_metrics_log(const fs::path& out_dir, const RunResult& run) {
    std::ofstream log(out_dir / "metrics.log", std::ios::trunc);
    require(log.good(), ErrorCode::IoFailure, "cannot write metrics.log");
    log.precision(17);
    for (const auto& pt : run.curve) {
        log << "step=" << pt.step << " train_loss=" << pt.train_loss << " val=" << pt.val_score
            << '\n';
    }
}

std::vector<std::int64_t> episode_starts(const fs::path& data_dir, const std::string& split) {
    const fs::path split_file = data_dir / "splits" / (split + ".txt");
    require(fs::exists(split_file), ErrorCode::IoFailure, "missing split file " + split_file.string());
    return read_split(split_file);
}

int thread_count_from_env() {
    const char* env = std::getenv("NOWCAST_THREADS");
    if (!env) return 1;
    const int n = std::atoi(env);
    return n >= 1 ? n : 1;
}

// -------------------------------------------------------------------
// subcommands
// -------------------------------------------------------------------

int run_synth(const fs::path& config_path, const fs::path& out_dir) {
    SynthScenario scenario;
    int episodes = 60;
    int stations = 12;
    std::int64_t first_t0 = timestamp_from_civil(2016, 7, 1) + 60;
    int patch_offset = -1, patch_hw = -1;
    int model_depth = 2;
    if (!config_path.empty()) {
        for (const auto& [key, value] : parse_kv_file(config_path)) {
            if (key == "seed") scenario.seed = std::uint64_t(parse_int(key, value));
            else if (key == "grid_hw") scenario.grid_hw = int(parse_int(key, value));
            else if (key == "cells") scenario.cell_count = int(parse_int(key, value));
            else if (key == "speed_max") scenario.speed_max = parse_double(key, value);
            else if (key == "background_dbz") scenario.background_dbz = parse_double(key, value);
            else if (key == "heavy_prevalence") scenario.heavy_prevalence = parse_double(key, value);
            else if (key == "heavy_event_rate") scenario.heavy_event_rate = parse_double(key, value);
            else if (key == "episodes") episodes = int(parse_int(key, value));
            else if (key == "stations") stations = int(parse_int(key, value));
            else if (key == "first_t0") first_t0 = parse_int(key, value);
            else if (key == "depth") model_depth = int(parse_int(key, value));
            else if (key == "amp_min") scenario.amp_min_dbz = parse_double(key, value);
            else if (key == "amp_max") scenario.amp_max_dbz = parse_double(key, value);
            else if (key == "width_min") scenario.width_min = parse_double(key, value);
            else if (key == "width_max") scenario.width_max = parse_double(key, value);
            else if (key == "heavy_amp") scenario.heavy_amp_dbz = parse_double(key, value);
            else if (key == "heavy_width") scenario.heavy_width = parse_double(key, value);
            else if (key == "zr_a") scenario.zr.a = parse_double(key, value);
            else if (key == "zr_b") scenario.zr.b = parse_double(key, value);
            else fail(ErrorCode::InvalidArgument, "unknown config key " + key);
        }
    }
    // stations live inside the output patch of the model that will train
    ModelConfig probe;
    probe.depth = model_depth;
    probe.base_channels = 1;
    probe.in_channels = 13;
    probe.out_channels = 3;
    probe.input_hw = scenario.grid_hw;
    const DimPlan plan = dim_plan(probe);
    patch_offset = plan.offset;
    patch_hw = plan.output_hw;

    write_manifest(out_dir, "synth",
                   {{"seed", std::to_string(scenario.seed)},
                    {"episodes", std::to_string(episodes)},
                    {"stations", std::to_string(stations)},
                    {"grid_hw", std::to_string(scenario.grid_hw)}});

    const SynthDataset ds =
        gen_imbalanced_set(scenario, episodes, stations, patch_offset, patch_hw, first_t0);

    fs::create_directories(out_dir / "frames");
    fs::create_directories(out_dir / "splits");
    StationTable unbound;
    for (const Station& s : ds.stations.entries) unbound.entries.push_back({s.id, s.lat, s.lon, -1, -1});
    write_station_table(unbound, out_dir / "stations.csv");

    std::vector<Observation> observations;
    std::vector<std::int64_t> t0s;
    for (const LabeledEpisode& ep : ds.episodes) {
        t0s.push_back(ep.t0);
        for (const RadarGrid& g : ep.seq.frames) {
            write_radar_grid(g, out_dir / "frames" / (std::to_string(g.timestamp_min) + ".rgr"));
        }
        for (std::size_t i = 0; i < ds.stations.entries.size(); ++i) {
            observations.push_back({ds.stations.entries[i].id, ep.t0, ep.truth_now[i].accum_mm});
            for (int lead = 1; lead <= kLeadCount; ++lead) {
                observations.push_back({ds.stations.entries[i].id, ep.t0 + lead * kLeadStepMinutes,
                                        ep.truths_per_lead[lead - 1][i].accum_mm});
            }
        }
    }
    write_observations(observations, out_dir / "observations.csv");

    // calendar splits over the episode start times
    const SplitCatalog cat = make_splits(t0s);
    write_split(cat.pretrain_train, out_dir / "splits" / "pretrain_train.txt");
    write_split(cat.pretrain_val, out_dir / "splits" / "pretrain_val.txt");
    write_split(cat.finetune_train, out_dir / "splits" / "finetune_train.txt");
    write_split(cat.finetune_val, out_dir / "splits" / "finetune_val.txt");
    write_split(cat.test, out_dir / "splits" / "test.txt");
    std::cerr << "synth: " << ds.episodes.size() << " episodes, heavy fraction "
              << ds.heavy_fraction() << "\n";
    return 0;
}

int run_pretrain(const fs::path& config_path, const fs::path& data_dir, const fs::path& out_dir,
                 const std::string& task) {
    TrainConfig cfg = load_train_config(config_path, TrainPhase::Pretrain);
    const bool nowcast = task == "nowcast";
    cfg.model.in_channels = nowcast ? 13 : 7;
    if (cfg.model.out_channels <= 3) cfg.model.out_channels = kDefaultReflectivityMax;

    write_manifest(out_dir, "pretrain",
                   {{"config", config_path.string()},
                    {"data", data_dir.string()},
                    {"task", task},
                    {"seed", std::to_string(cfg.seed)}});

    const TrainingSet train = load_training_set(data_dir, episode_starts(data_dir, "pretrain_train"),
                                                nowcast);
    const TrainingSet val =
        load_training_set(data_dir, episode_starts(data_dir, "pretrain_val"), nowcast);
    const RunResult run = pretrain(cfg, train, val);
    write_metrics_log(out_dir, run);
    save_checkpoint(run.best, out_dir / "best.ckpt", out_dir / "best.meta");
    std::cerr << "pretrain: best validation " << run.best.validation_score << " at step "
              << run.best.step << "\n";
    return 0;
}

int run_finetune(const fs::path& config_path, const fs::path& data_dir, const fs::path& out_dir,
                 const std::string& task, const std::string& loss, const std::string& pretrained) {
    const TrainPhase phase =
        task == "nowcast" ? TrainPhase::FinetuneNowcast : TrainPhase::FinetuneEstimation;
    TrainConfig cfg = load_train_config(config_path, phase);
    cfg.model.in_channels = phase == TrainPhase::FinetuneNowcast ? 13 : 7;
    cfg.model.out_channels = phase == TrainPhase::FinetuneNowcast ? 3 : 1;
    if (loss == "csi") cfg.loss_choice = LossChoice::Csi;
    else if (loss == "focal") cfg.loss_choice = LossChoice::Focal;
    else if (loss == "ce") cfg.loss_choice = LossChoice::Ce;
    else fail(ErrorCode::InvalidArgument, "unknown loss " + loss);

    write_manifest(out_dir, "finetune",
                   {{"config", config_path.string()},
                    {"data", data_dir.string()},
                    {"task", task},
                    {"loss", loss},
                    {"pretrained", pretrained},
                    {"seed", std::to_string(cfg.seed)}});

    std::optional<ParamSet> init;
    if (pretrained != "none") {
        const fs::path meta = fs::path(pretrained).replace_extension(".meta");
        const Checkpoint ckpt = load_checkpoint(pretrained, meta);
        init = transfer_params(ckpt, cfg.model, cfg.seed);
    }

    const TrainingSet train =
        load_training_set(data_dir, episode_starts(data_dir, "finetune_train"), true);
    const TrainingSet val =
        load_training_set(data_dir, episode_starts(data_dir, "finetune_val"), true);
    const RunResult run = phase == TrainPhase::FinetuneNowcast
                              ? finetune_nowcast(init, cfg, train, val)
                              : finetune_estimation(init, cfg, train, val);
    write_metrics_log(out_dir, run);
    save_checkpoint(run.best, out_dir / "best.ckpt", out_dir / "best.meta");

    // final report on the test split when present
    const fs::path test_split = data_dir / "splits" / "test.txt";
    if (fs::exists(test_split)) {
        const TrainingSet test = load_training_set(data_dir, read_split(test_split), true);
        if (!test.empty()) {
            if (phase == TrainPhase::FinetuneNowcast) {
                const EvalReport report = evaluate_nowcast(run.best.params, test);
                write_report_csv(report, out_dir / "report.csv");
            } else {
                EvalReport report;
                report.mse = evaluate_estimation(run.best.params, test, ClassFilter::All);
                write_report_csv(report, out_dir / "report.csv");
            }
        }
    }
    std::cerr << "finetune: best validation " << run.best.validation_score << " at step "
              << run.best.step << "\n";
    return 0;
}

int run_evaluate(const fs::path& ckpt_path, const fs::path& data_dir, const fs::path& out_csv) {
    const Checkpoint ckpt =
        load_checkpoint(ckpt_path, fs::path(ckpt_path).replace_extension(".meta"));
    const TrainingSet test = load_training_set(data_dir, episode_starts(data_dir, "test"), true);
    require(!test.empty(), ErrorCode::EmptyInput, "test split is empty");
    const EvalReport report = evaluate_nowcast(ckpt.params, test);
    if (out_csv.has_parent_path()) fs::create_directories(out_csv.parent_path());
    write_report_csv(report, out_csv);
    std::cerr << format_report_text(report);
    return 0;
}

int run_estimate(const fs::path& ckpt_path, const fs::path& data_dir, const fs::path& out_csv) {
    const Checkpoint ckpt =
        load_checkpoint(ckpt_path, fs::path(ckpt_path).replace_extension(".meta"));
    const TrainingSet test = load_training_set(data_dir, episode_starts(data_dir, "test"), false);
    require(!test.empty(), ErrorCode::EmptyInput, "test split is empty");
    if (out_csv.has_parent_path()) fs::create_directories(out_csv.parent_path());
    std::ofstream out(out_csv, std::ios::trunc);
    require(out.good(), ErrorCode::IoFailure, "cannot write " + out_csv.string());
    out << "filter,mse\n";
    out.precision(17);
    const std::pair<const char*, ClassFilter> filters[] = {
        {"all", ClassFilter::All}, {"heavy", ClassFilter::Heavy}, {"light", ClassFilter::Light}};
    for (const auto& [name, filter] : filters) {
        const auto mse = evaluate_estimation(ckpt.params, test, filter);
        out << name << ',';
        if (mse) out << *mse;
        else out << "undefined";
        out << '\n';
    }
    return 0;
}

int run_baseline(const std::string& method, const fs::path& data_dir, const fs::path& out_csv,
                 double zr_a, double zr_b) {
    const TrainingSet test = load_training_set(data_dir, episode_starts(data_dir, "test"), true);
    require(!test.empty(), ErrorCode::EmptyInput, "test split is empty");
    if (out_csv.has_parent_path()) fs::create_directories(out_csv.parent_path());
    if (method == "persistence") {
        const EvalReport report = evaluate_persistence(test);
        write_report_csv(report, out_csv);
        std::cerr << format_report_text(report);
    } else if (method == "zr") {
        const ZRParams zr{zr_a, zr_b};
        std::ofstream out(out_csv, std::ios::trunc);
        require(out.good(), ErrorCode::IoFailure, "cannot write " + out_csv.string());
        out << "filter,mse\n";
        out.precision(17);
        const std::pair<const char*, ClassFilter> filters[] = {
            {"all", ClassFilter::All}, {"heavy", ClassFilter::Heavy}, {"light", ClassFilter::Light}};
        for (const auto& [name, filter] : filters) {
            const auto mse = evaluate_zr_baseline(zr, test, filter);
            out << name << ',';
            if (mse) out << *mse;
            else out << "undefined";
            out << '\n';
        }
    } else {
        fail(ErrorCode::InvalidArgument, "unknown baseline method " + method);
    }
    return 0;
}

int run_report(const std::vector<fs::path>& run_dirs, const fs::path& out_csv) {
    require(!run_dirs.empty(), ErrorCode::InvalidArgument, "no run directories given");
    std::vector<EvalReport> reports;
    for (const fs::path& dir : run_dirs) {
        const fs::path report_path = dir / "report.csv";
        require(fs::exists(report_path), ErrorCode::IoFailure,
                "missing report file " + report_path.string());
        reports.push_back(read_report_csv(report_path));
    }
    if (out_csv.has_parent_path()) fs::create_directories(out_csv.parent_path());
    std::ofstream out(out_csv, std::ios::trunc);
    require(out.good(), ErrorCode::IoFailure, "cannot write " + out_csv.string());
    out << "lead_minutes";
    for (const fs::path& dir : run_dirs) {
        const std::string name = dir.filename().string();
        out << ',' << name << "_csi_rain," << name << "_f1_rain," << name << "_csi_heavy," << name
            << "_f1_heavy";
    }
    out << '\n';
    out.precision(17);
    const std::size_t rows = reports.front().leads.size();
    for (std::size_t r = 0; r < rows; ++r) {
        out << reports.front().leads[r].lead_time_minutes;
        for (const EvalReport& rep : reports) {
            require(rep.leads.size() == rows, ErrorCode::ShapeMismatch,
                    "reports cover different lead times");
            out << ',' << rep.leads[r].csi_rain << ',' << rep.leads[r].f1_rain << ','
                << rep.leads[r].csi_heavy << ',' << rep.leads[r].f1_heavy;
        }
        out << '\n';
    }
    out << "average";
    for (const EvalReport& rep : reports) {
        out << ',' << rep.average.csi_rain << ',' << rep.average.f1_rain << ','
            << rep.average.csi_heavy << ',' << rep.average.f1_heavy;
    }
    out << '\n';

    // training-curve data per run, one file per metrics.log found
    for (const fs::path& dir : run_dirs) {
        const fs::path log_path = dir / "metrics.log";
        if (!fs::exists(log_path)) continue;
        std::ifstream log(log_path);
        std::ofstream curve(out_csv.parent_path() / (dir.filename().string() + "_curve.csv"),
                            std::ios::trunc);
        curve << "step,val_score\n";
        std::string line;
        while (std::getline(log, line)) {
            long long step = 0;
            double train_loss = 0, val = 0;
            if (std::sscanf(line.c_str(), "step=%lld train_loss=%lf val=%lf", &step, &train_loss,
                            &val) == 3) {
                curve << step << ',' << val << '\n';
            }
        }
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"radar precipitation nowcasting and estimation toolkit"};
    app.require_subcommand(1);
    set_worker_threads(thread_count_from_env());

    std::string config_path, data_dir, out_path, ckpt_path;
    std::string task = "nowcast", loss = "csi", pretrained = "none", method = "persistence";
    double zr_a = 200.0, zr_b = 1.49;
    std::vector<std::string> run_dirs;

    auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic dataset directory");
    synth_cmd->add_option("--config", config_path, "scenario key=value file");
    synth_cmd->add_option("--out", out_path, "output dataset directory")->required();

    auto* pretrain_cmd = app.add_subcommand("pretrain", "reflectivity-prediction pre-training");
    pretrain_cmd->add_option("--config", config_path, "training key=value file");
    pretrain_cmd->add_option("--data", data_dir, "dataset directory")->required();
    pretrain_cmd->add_option("--out", out_path, "run directory")->required();
    pretrain_cmd->add_option("--task", task, "nowcast|estimation");

    auto* finetune_cmd = app.add_subcommand("finetune", "fine-tune for nowcasting or estimation");
    finetune_cmd->add_option("--config", config_path, "training key=value file");
    finetune_cmd->add_option("--data", data_dir, "dataset directory")->required();
    finetune_cmd->add_option("--out", out_path, "run directory")->required();
    finetune_cmd->add_option("--task", task, "nowcast|estimation");
    finetune_cmd->add_option("--loss", loss, "csi|focal|ce (nowcast only)");
    finetune_cmd->add_option("--pretrained", pretrained, "checkpoint path or 'none'");

    auto* evaluate_cmd = app.add_subcommand("evaluate", "score a nowcasting checkpoint");
    evaluate_cmd->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    evaluate_cmd->add_option("--data", data_dir, "dataset directory")->required();
    evaluate_cmd->add_option("--out", out_path, "report csv")->required();

    auto* estimate_cmd = app.add_subcommand("estimate", "score an estimation checkpoint");
    estimate_cmd->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    estimate_cmd->add_option("--data", data_dir, "dataset directory")->required();
    estimate_cmd->add_option("--out", out_path, "mse csv")->required();

    auto* baseline_cmd = app.add_subcommand("baseline", "run a non-learned baseline");
    baseline_cmd->add_option("--method", method, "persistence|zr");
    baseline_cmd->add_option("--data", data_dir, "dataset directory")->required();
    baseline_cmd->add_option("--out", out_path, "report csv")->required();
    baseline_cmd->add_option("--zr-a", zr_a, "Z-R prefactor");
    baseline_cmd->add_option("--zr-b", zr_b, "Z-R exponent");

    auto* report_cmd = app.add_subcommand("report", "merge run reports into one table");
    report_cmd->add_option("runs", run_dirs, "run directories")->required();
    report_cmd->add_option("--out", out_path, "comparison csv")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (synth_cmd->parsed()) return run_synth(config_path, out_path);
        if (pretrain_cmd->parsed()) return run_pretrain(config_path, data_dir, out_path, task);
        if (finetune_cmd->parsed())
            return run_finetune(config_path, data_dir, out_path, task, loss, pretrained);
        if (evaluate_cmd->parsed()) return run_evaluate(ckpt_path, data_dir, out_path);
        if (estimate_cmd->parsed()) return run_estimate(ckpt_path, data_dir, out_path);
        if (baseline_cmd->parsed()) return run_baseline(method, data_dir, out_path, zr_a, zr_b);
        if (report_cmd->parsed()) {
            std::vector<fs::path> dirs(run_dirs.begin(), run_dirs.end());
            return run_report(dirs, out_path);
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
