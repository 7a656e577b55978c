#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <sstream>

#include <json.hpp>

#include "capt/checkpoint.hpp"
#include "capt/cli.hpp"
#include "capt/errors.hpp"
#include "capt/eval.hpp"
#include "capt/experiment.hpp"

using namespace capt;
namespace fs = std::filesystem;

namespace {

std::string read_bytes(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

// Tiny end-to-end workspace: dataset plus a briefly pretrained checkpoint.
struct Workspace {
    fs::path dir;
    std::string cfg, data, ckpt;

    Workspace()
    {
        dir = fs::temp_directory_path() / ("capt_test_eval_" + std::to_string(std::random_device{}()));
        fs::create_directories(dir);
        cfg = (dir / "cfg.txt").string();
        data = (dir / "data.bin").string();
        ckpt = (dir / "pre.ckpt").string();
        std::ofstream(cfg) << "# small run\n"
                              "data.train_per_class = 20   # trailing comment\n"
                              "data.test_per_class = 10\n"
                              "model.embed_dim = 16\n"
                              "model.num_layers = 2\n"
                              "pretrain.epochs = 1\n"
                              "train.epochs = 1\n"
                              "eval.per_class = 2\n"
                              "eval.steps = 4\n";
        std::ostringstream sink;
        REQUIRE(run_cli({"gen-data", "--config", cfg, "--out", data}, sink, sink) == 0);
        REQUIRE(run_cli({"pretrain", "--config", cfg, "--data", data, "--out", ckpt}, sink, sink) == 0);
    }
    ~Workspace() { fs::remove_all(dir); }
    std::string path(const char* name) const { return (dir / name).string(); }
};

} // namespace

TEST_CASE("compute_accuracy examples and loop oracle")
{
    CHECK(compute_accuracy(std::vector<std::size_t>{1, 2, 3}, std::vector<std::size_t>{1, 2, 3}) == 1.0);
    CHECK(compute_accuracy(std::vector<std::size_t>{0, 0}, std::vector<std::size_t>{1, 1}) == 0.0);
    CHECK(compute_accuracy(std::vector<std::size_t>{0, 1, 2, 3}, std::vector<std::size_t>{0, 1, 2, 0}) == 0.75);
    std::mt19937_64 rng(1);
    for (int t = 0; t < 20; ++t) {
        std::vector<std::size_t> p(50), y(50);
        std::size_t correct = 0;
        for (std::size_t i = 0; i < 50; ++i) {
            p[i] = rng() % 3;
            y[i] = rng() % 3;
            if (p[i] == y[i]) {
                ++correct;
            }
        }
        CHECK(compute_accuracy(p, y) == static_cast<double>(correct) / 50.0);
    }
    CHECK_THROWS_AS(compute_accuracy(std::vector<std::size_t>{1}, std::vector<std::size_t>{1, 2}), ShapeError);
}

TEST_CASE("report JSON and CSV")
{
    EvalReport r;
    r.method = "capt";
    r.shots = 16;
    r.epsilon = 8.0 / 255.0;
    r.clean_accuracy = 0.75;
    r.robust_accuracy = 0.5;
    r.num_examples = 4;
    r.wall_clock_seconds = 3.5;
    r.config["a"] = "1";
    const auto j = nlohmann::json::parse(r.to_json());
    CHECK(j["wall_clock_seconds"] == 3.5);
    CHECK(j["clean_accuracy"] == 0.75);
    CHECK(j["attack"]["steps"] == 100);
    CHECK_FALSE(nlohmann::json::parse(r.to_json(false)).contains("wall_clock_seconds"));
    EvalReport other = r;
    other.wall_clock_seconds = 99.0;
    CHECK(r.to_json(false) == other.to_json(false));

    const auto csv = fs::temp_directory_path() / "capt_test_report.csv";
    fs::remove(csv);
    append_csv(r, csv.string());
    append_csv(r, csv.string());
    std::istringstream in(read_bytes(csv));
    std::string line;
    std::getline(in, line);
    CHECK(line == EvalReport::csv_header());
    std::getline(in, line);
    CHECK(line == r.csv_row());
    std::getline(in, line);
    CHECK(line == r.csv_row());
    fs::remove(csv);
}

TEST_CASE("config keys: parsing, unknown keys and bad values are fatal")
{
    ExperimentConfig cfg;
    apply_config_text(cfg, "seed = 4\n  objective.lambda=3.5 # c\n\neval.eps = 4/255\nobjective.mask = 1000\n");
    CHECK(cfg.seed == 4);
    CHECK(cfg.train.objective.lambda == 3.5);
    CHECK(cfg.eval_attack.epsilon == doctest::Approx(4.0 / 255.0));
    CHECK(cfg.eval_attack.step_size == doctest::Approx(1.0 / 255.0));
    CHECK(cfg.train.objective.mask == AblationMask{true, false, false, false});
    CHECK(cfg.echo().at("objective.mask") == "1000");
    CHECK(cfg.echo().size() == ExperimentConfig::keys().size());

    ExperimentConfig explicit_step;
    apply_config_text(explicit_step, "eval.step_size = 0.01\neval.eps = 0.1\n");
    CHECK(explicit_step.eval_attack.step_size == 0.01);

    ExperimentConfig c2;
    CHECK_THROWS_AS(apply_config_text(c2, "objective.lamda = 1\n"), ConfigError);
    CHECK_THROWS_AS(apply_config_text(c2, "train.epochs = many\n"), ConfigError);
    CHECK_THROWS_AS(apply_config_text(c2, "train.epochs\n"), ConfigError);
    CHECK_THROWS_AS(apply_config_text(c2, "objective.mask = 0000\n"), ConfigError);
    CHECK_THROWS_AS(apply_config_text(c2, "objective.method = tecoa\n"), ConfigError);
    CHECK_THROWS_AS(apply_config_text(c2, "eval.shifts = value-jitter\n"), ConfigError);
    CHECK_THROWS_AS(apply_config_file(c2, "/nonexistent/capt.cfg"), ConfigError);

    const auto shifts = parse_shifts("value-jitter:0.3, channel-drop:0.5");
    REQUIRE(shifts.size() == 2);
    CHECK(shifts[1].kind == ShiftKind::channel_drop);
    CHECK(shifts[1].intensity == 0.5);
}

TEST_CASE("every key round-trips through its echo")
{
    ExperimentConfig a;
    a.shifts = parse_shifts("background-swap:0.25");
    a.train.lr0 = 0.003;
    ExperimentConfig b;
    for (const auto& [k, v] : a.echo()) {
        b.set(k, v);
    }
    CHECK(a.echo() == b.echo());
}

TEST_CASE("command line: artifacts, exit codes and degenerate attacks")
{
    Workspace ws;
    std::ostringstream sink;

    // HEP has no learnables: the tuned checkpoint equals the input.
    CHECK(run_cli({"tune", "--method", "hep", "--config", ws.cfg, "--data", ws.data, "--ckpt", ws.ckpt, "--out",
                   ws.path("hep.ckpt")},
                  sink, sink) == 0);
    CHECK(read_bytes(ws.ckpt) == read_bytes(ws.path("hep.ckpt")));

    // A vanishing budget cannot change any prediction.
    CHECK(run_cli({"eval", "--config", ws.cfg, "--data", ws.data, "--ckpt", ws.path("hep.ckpt"), "--eps", "1e-12",
                   "--out", ws.path("tiny.json")},
                  sink, sink) == 0);
    const auto tiny = nlohmann::json::parse(read_bytes(ws.path("tiny.json")));
    CHECK(tiny["clean_accuracy"] == tiny["robust_accuracy"]);
    CHECK(tiny["method"] == "hep");
    CHECK(tiny["num_examples"] == 16);
    CHECK(tiny["config"]["eval.eps"] == "1e-12");

    // Prompted model with hyperparameter flags.
    CHECK(run_cli({"tune", "--method", "capt", "--config", ws.cfg, "--data", ws.data, "--ckpt", ws.ckpt, "--out",
                   ws.path("capt.ckpt"), "--shots", "2", "--lambda", "10", "--prompt-depth", "1", "--attack-steps",
                   "2", "--metrics", ws.path("m.ndjson")},
                  sink, sink) == 0);
    const ModelState tuned = load_checkpoint(ws.path("capt.ckpt"));
    CHECK(tuned.prompts.visual.size() == 1);
    CHECK(backbone_identical(tuned.theta, load_checkpoint(ws.ckpt).theta));
    CHECK(run_cli({"eval", "--config", ws.cfg, "--data", ws.data, "--ckpt", ws.path("capt.ckpt"), "--out",
                   ws.path("capt.json"), "--csv", ws.path("rows.csv"), "--set", "eval.shifts=channel-drop:0.5"},
                  sink, sink) == 0);
    const auto rep = nlohmann::json::parse(read_bytes(ws.path("capt.json")));
    CHECK(rep["method"] == "capt");
    CHECK(rep["attack"]["steps"] == 4);
    CHECK(rep["shifts"].size() == 1);
    CHECK(rep["config"]["model.prompt_depth"] == "1");

    // Exit codes: configuration errors 2.
    CHECK(run_cli({"eval", "--config", ws.cfg, "--data", ws.data, "--ckpt", ws.ckpt, "--out", ws.path("x.json"),
                   "--set", "eval.stepz=3"},
                  sink, sink) == exit_config);
    CHECK(run_cli({"tune", "--method", "nope", "--data", ws.data, "--ckpt", ws.ckpt, "--out", ws.path("x")}, sink,
                  sink) == exit_config);
    CHECK(run_cli({"eval", "--data", ws.data, "--ckpt", ws.path("missing.ckpt"), "--out", ws.path("x.json")}, sink,
                  sink) == exit_config);
    CHECK(run_cli({"frobnicate"}, sink, sink) == exit_config);
    CHECK(run_cli({"eval", "--data", ws.data, "--ckpt", ws.ckpt, "--out", ws.path("x.json"), "--context-len", "9"},
                  sink, sink) == exit_config);
}

TEST_CASE("identical commands give byte-identical reports")
{
    Workspace ws;
    std::ostringstream sink;
    for (const char* out : {"a.json", "b.json"}) {
        REQUIRE(run_cli({"eval", "--config", ws.cfg, "--data", ws.data, "--ckpt", ws.ckpt, "--seed", "7", "--out",
                         ws.path(out)},
                        sink, sink) == 0);
    }
    auto strip = [](const std::string& text) {
        auto j = nlohmann::json::parse(text);
        j.erase("wall_clock_seconds");
        return j.dump();
    };
    CHECK(strip(read_bytes(ws.path("a.json"))) == strip(read_bytes(ws.path("b.json"))));
}
