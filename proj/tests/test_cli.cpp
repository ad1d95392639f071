#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "doctest.h"
#include <sys/wait.h>

#include "nowcast/dataset.hpp"
#include "nowcast/metrics.hpp"

namespace fs = std::filesystem;

namespace {

int run(const std::string& args) {
    const std::string cmd = std::string(NOWCAST_KIT_BIN) + " " + args + " 2>/dev/null";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("unknown subcommands and flags are usage errors") {
    CHECK(run("bogus") == 2);
    CHECK(run("") == 2);
    CHECK(run("synth --nonsense x") == 2);
    CHECK(run("evaluate") == 2);  // missing required options
}

TEST_CASE("domain errors exit with 1") {
    CHECK(run("pretrain --data /nonexistent --out /tmp/nowcast_cli_x") == 1);
    CHECK(run("baseline --method persistence --data /nonexistent --out /tmp/x.csv") == 1);
}

TEST_CASE("synth then baseline produces a usable report") {
    TempDir dir("nowcast_cli_synth");
    const fs::path cfg = dir.path / "scen.cfg";
    {
        std::ofstream out(cfg);
        out << "seed=5\ngrid_hw=24\ndepth=1\nepisodes=32\nstations=8\nspeed_max=0\ncells=1\n"
            << "amp_min=20\namp_max=27\nwidth_min=2\nwidth_max=3\n"
            << "heavy_event_rate=0.6\nheavy_prevalence=0.05\n"
            << "first_t0=" << nowcast::timestamp_from_civil(2016, 7, 1) + 60 << "\n";
    }
    const fs::path data = dir.path / "data";
    REQUIRE(run("synth --config " + cfg.string() + " --out " + data.string()) == 0);
    CHECK(fs::exists(data / "stations.csv"));
    CHECK(fs::exists(data / "observations.csv"));
    CHECK(fs::exists(data / "splits" / "pretrain_train.txt"));
    CHECK(fs::exists(data / "config.echo"));

    // episodes all land in 2016 summer: training splits hold them all,
    // so point the test split at the training episodes for the baseline
    fs::copy_file(data / "splits" / "finetune_train.txt", data / "splits" / "test.txt",
                  fs::copy_options::overwrite_existing);

    const fs::path report = dir.path / "persistence.csv";
    REQUIRE(run("baseline --method persistence --data " + data.string() + " --out " +
                report.string()) == 0);
    const nowcast::EvalReport rep = nowcast::read_report_csv(report);
    REQUIRE(rep.leads.size() == 6);
    // frozen scenario: persistence is exact
    CHECK(rep.average.csi_rain == doctest::Approx(1.0));
    CHECK(rep.average.csi_heavy == doctest::Approx(1.0));

    SUBCASE("zr baseline writes the three filter rows") {
        const fs::path zr_csv = dir.path / "zr.csv";
        REQUIRE(run("baseline --method zr --data " + data.string() + " --out " + zr_csv.string()) ==
                0);
        const std::string text = slurp(zr_csv);
        CHECK(text.find("all,") != std::string::npos);
        CHECK(text.find("heavy,") != std::string::npos);
        CHECK(text.find("light,") != std::string::npos);
    }

    SUBCASE("rerunning synth overwrites with identical bytes") {
        const std::string stations_before = slurp(data / "stations.csv");
        const std::string obs_before = slurp(data / "observations.csv");
        REQUIRE(run("synth --config " + cfg.string() + " --out " + data.string()) == 0);
        CHECK(slurp(data / "stations.csv") == stations_before);
        CHECK(slurp(data / "observations.csv") == obs_before);
    }
}

TEST_CASE("train, evaluate and report round trip at desk scale") {
    TempDir dir("nowcast_cli_train");
    const fs::path scen = dir.path / "scen.cfg";
    {
        std::ofstream out(scen);
        out << "seed=11\ngrid_hw=24\ndepth=1\nepisodes=32\nstations=8\nspeed_max=0.1\ncells=1\n"
            << "amp_min=20\namp_max=27\nwidth_min=2\nwidth_max=3\n"
            << "heavy_event_rate=0.5\nheavy_prevalence=0.05\n"
            << "first_t0=" << nowcast::timestamp_from_civil(2016, 7, 1) + 60 << "\n";
    }
    const fs::path data = dir.path / "data";
    REQUIRE(run("synth --config " + scen.string() + " --out " + data.string()) == 0);
    // tiny desk runs reuse the summer-2016 episodes in every role
    for (const char* split : {"finetune_val.txt", "test.txt", "pretrain_val.txt"}) {
        fs::copy_file(data / "splits" / "finetune_train.txt", data / "splits" / split,
                      fs::copy_options::overwrite_existing);
    }

    const fs::path tcfg = dir.path / "train.cfg";
    {
        std::ofstream out(tcfg);
        out << "steps=3\nbatch_size=2\nlearning_rate=0.001\nvalidation_interval=3\n"
            << "depth=1\nbase_channels=2\ninput_hw=24\nseed=3\n";
    }
    const fs::path run_dir = dir.path / "run_csi";
    REQUIRE(run("finetune --task nowcast --loss csi --pretrained none --config " + tcfg.string() +
                " --data " + data.string() + " --out " + run_dir.string()) == 0);
    CHECK(fs::exists(run_dir / "best.ckpt"));
    CHECK(fs::exists(run_dir / "best.meta"));
    CHECK(fs::exists(run_dir / "metrics.log"));
    CHECK(fs::exists(run_dir / "config.echo"));
    CHECK(fs::exists(run_dir / "report.csv"));

    const fs::path eval_csv = dir.path / "eval.csv";
    REQUIRE(run("evaluate --ckpt " + (run_dir / "best.ckpt").string() + " --data " + data.string() +
                " --out " + eval_csv.string()) == 0);
    const nowcast::EvalReport rep = nowcast::read_report_csv(eval_csv);
    CHECK(rep.leads.size() == 6);

    SUBCASE("report merges runs side by side") {
        const fs::path merged = dir.path / "merged" / "cmp.csv";
        REQUIRE(run("report " + run_dir.string() + " --out " + merged.string()) == 0);
        const std::string text = slurp(merged);
        CHECK(text.find("run_csi_csi_heavy") != std::string::npos);
        CHECK(fs::exists(dir.path / "merged" / "run_csi_curve.csv"));
    }

    SUBCASE("invalid config values carry the key name") {
        const fs::path bad = dir.path / "bad.cfg";
        {
            std::ofstream out(bad);
            out << "learning_rate=0\n";
        }
        CHECK(run("finetune --task nowcast --config " + bad.string() + " --data " + data.string() +
                  " --out " + (dir.path / "bad_run").string()) == 1);
        const fs::path unknown = dir.path / "unknown.cfg";
        {
            std::ofstream out(unknown);
            out << "not_a_key=1\n";
        }
        CHECK(run("finetune --task nowcast --config " + unknown.string() + " --data " +
                  data.string() + " --out " + (dir.path / "bad_run2").string()) == 1);
    }
}

TEST_CASE("estimation fine-tune and scoring round trip") {
    TempDir dir("nowcast_cli_est");
    const fs::path scen = dir.path / "scen.cfg";
    {
        std::ofstream out(scen);
        out << "seed=17\ngrid_hw=24\ndepth=1\nepisodes=32\nstations=8\nspeed_max=0.1\ncells=1\n"
            << "amp_min=20\namp_max=27\nwidth_min=2\nwidth_max=3\n"
            << "heavy_event_rate=0.5\nheavy_prevalence=0.05\n"
            << "first_t0=" << nowcast::timestamp_from_civil(2016, 7, 1) + 60 << "\n";
    }
    const fs::path data = dir.path / "data";
    REQUIRE(run("synth --config " + scen.string() + " --out " + data.string()) == 0);
    for (const char* split : {"finetune_val.txt", "test.txt"}) {
        fs::copy_file(data / "splits" / "finetune_train.txt", data / "splits" / split,
                      fs::copy_options::overwrite_existing);
    }
    const fs::path tcfg = dir.path / "train.cfg";
    {
        std::ofstream out(tcfg);
        out << "steps=3\nbatch_size=2\nlearning_rate=0.001\nvalidation_interval=3\n"
            << "depth=1\nbase_channels=2\ninput_hw=24\nseed=4\n";
    }
    const fs::path run_dir = dir.path / "run_est";
    REQUIRE(run("finetune --task estimation --pretrained none --config " + tcfg.string() +
                " --data " + data.string() + " --out " + run_dir.string()) == 0);
    CHECK(fs::exists(run_dir / "best.ckpt"));

    const fs::path mse_csv = dir.path / "mse.csv";
    REQUIRE(run("estimate --ckpt " + (run_dir / "best.ckpt").string() + " --data " + data.string() +
                " --out " + mse_csv.string()) == 0);
    const std::string text = slurp(mse_csv);
    CHECK(text.find("all,") != std::string::npos);
    CHECK(text.find("light,") != std::string::npos);
}
