#include "capt/cli.hpp"

#include <chrono>
#include <fstream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "capt/checkpoint.hpp"
#include "capt/errors.hpp"
#include "capt/experiment.hpp"
#include "capt/gradsuite.hpp"

namespace capt {

namespace {

// Flags shared by the experiment commands. Each maps to one config key.
struct CommonFlags {
    std::string config;
    std::vector<std::string> sets;
    std::optional<std::string> seed, eps, attack_steps, attack_step_size, lambda, tau, prompt_depth, context_len,
        shots, method;

    void add(CLI::App* app, bool with_method)
    {
        app->add_option("--config", config, "key = value config file");
        app->add_option("--set", sets, "key=value override (repeatable)");
        app->add_option("--seed", seed, "experiment seed");
        app->add_option("--eps", eps, "L-inf budget epsilon (train and eval)");
        app->add_option("--attack-steps", attack_steps, "PGD steps K");
        app->add_option("--attack-step-size", attack_step_size, "PGD step size alpha");
        app->add_option("--lambda", lambda, "consistency weight lambda");
        app->add_option("--tau", tau, "softmax temperature tau");
        app->add_option("--prompt-depth", prompt_depth, "prompt depth J");
        app->add_option("--context-len", context_len, "text context length m");
        app->add_option("--shots", shots, "shots per class (0 = all)");
        if (with_method) {
            app->add_option("--method", method, "capt | apt-uc | apt-csc | avp | paft | hep");
        }
    }

    // `attack_prefix` selects which attack the step flags address.
    ExperimentConfig build(const std::string& attack_prefix) const
    {
        ExperimentConfig cfg;
        if (!config.empty()) {
            apply_config_file(cfg, config);
        }
        auto put = [&](const char* key, const std::optional<std::string>& v) {
            if (v) {
                cfg.set(key, *v);
            }
        };
        put("seed", seed);
        put("train.eps", eps);
        put("eval.eps", eps);
        put((attack_prefix + ".steps").c_str(), attack_steps);
        put((attack_prefix + ".step_size").c_str(), attack_step_size);
        put("objective.lambda", lambda);
        put("model.tau", tau);
        put("model.prompt_depth", prompt_depth);
        put("model.context_len", context_len);
        put("train.shots", shots);
        put("objective.method", method);
        for (const auto& kv : sets) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) {
                throw ConfigError("--set expects key=value, got '" + kv + "'");
            }
            cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
        }
        cfg.validate();
        return cfg;
    }
};

void write_text(const std::string& path, const std::string& text)
{
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) {
        throw ConfigError("cannot write " + path);
    }
    os << text;
}

double seconds_since(std::chrono::steady_clock::time_point t0)
{
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

} // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err)
{
    CLI::App app{"Consistency-guided adversarial prompt tuning on a miniature dual encoder"};
    app.require_subcommand(1);

    std::string data_path, ckpt_path, out_path, csv_path, metrics_path, masks;

    CommonFlags gen_flags;
    auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
    gen_flags.add(gen, false);
    gen->add_option("--out", out_path, "dataset file")->required();

    CommonFlags pre_flags;
    auto* pre = app.add_subcommand("pretrain", "contrastive pretraining of the dual encoder");
    pre_flags.add(pre, false);
    pre->add_option("--data", data_path, "dataset file")->required();
    pre->add_option("--out", out_path, "checkpoint file")->required();

    CommonFlags tune_flags;
    auto* tune_cmd = app.add_subcommand("tune", "few-shot adversarial tuning of one method");
    tune_flags.add(tune_cmd, true);
    tune_cmd->add_option("--data", data_path, "dataset file")->required();
    tune_cmd->add_option("--ckpt", ckpt_path, "pretrained checkpoint")->required();
    tune_cmd->add_option("--out", out_path, "tuned checkpoint")->required();
    tune_cmd->add_option("--metrics", metrics_path, "NDJSON run record");

    CommonFlags eval_flags;
    auto* eval_cmd = app.add_subcommand("eval", "clean and PGD accuracy of a checkpoint");
    eval_flags.add(eval_cmd, false);
    eval_cmd->add_option("--data", data_path, "dataset file")->required();
    eval_cmd->add_option("--ckpt", ckpt_path, "checkpoint")->required();
    eval_cmd->add_option("--out", out_path, "JSON report")->required();
    eval_cmd->add_option("--csv", csv_path, "CSV file to append a row to");

    auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of primitives and objectives");
    grad_cmd->add_option("--out", out_path, "JSON report");

    CommonFlags abl_flags;
    auto* abl = app.add_subcommand("ablate", "objective ablation rows (tune + eval per mask)");
    abl_flags.add(abl, false);
    abl->add_option("--data", data_path, "dataset file")->required();
    abl->add_option("--ckpt", ckpt_path, "pretrained checkpoint")->required();
    abl->add_option("--out", out_path, "JSON report")->required();
    abl->add_option("--masks", masks, "comma-separated 4-bit masks (ce_adv ce_clean cons_train cons_frz); default: all rows");

    std::vector<std::string> argv(args.rbegin(), args.rend());
    try {
        app.parse(argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return exit_ok;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return exit_config;
    }

    const auto t0 = std::chrono::steady_clock::now();
    try {
        if (gen->parsed()) {
            ExperimentConfig cfg = gen_flags.build("eval");
            const DataBundle b = generate(cfg.data);
            save_bundle(b, out_path);
            out << "wrote " << b.train.size() << " train / " << b.test.size() << " test images to " << out_path
                << "\n";
        } else if (pre->parsed()) {
            ExperimentConfig cfg = pre_flags.build("eval");
            const DataBundle b = load_bundle(data_path);
            const PretrainResult r = run_pretrain(b, cfg);
            save_checkpoint(r.state, out_path);
            for (std::size_t e = 0; e < r.epoch_loss.size(); ++e) {
                out << "epoch " << e << " loss " << r.epoch_loss[e] << "\n";
            }
            out << "zero-shot test accuracy " << zero_shot_accuracy(r.state, b.test) << "\n";
        } else if (tune_cmd->parsed()) {
            ExperimentConfig cfg = tune_flags.build("train");
            const DataBundle b = load_bundle(data_path);
            const ModelState ckpt = load_checkpoint(ckpt_path);
            TuneResult r = run_tune(ckpt, b, cfg);
            if (!backbone_identical(ckpt.theta, r.state.theta)) {
                throw InvariantViolation("freeze contract: backbone differs from the input checkpoint");
            }
            save_checkpoint(r.state, out_path);
            r.record.checkpoint = out_path;
            if (!metrics_path.empty()) {
                std::ofstream os(metrics_path, std::ios::trunc);
                r.record.write_ndjson(os);
            }
            out << to_string(cfg.train.objective.method) << ": " << r.record.steps.size() << " steps, "
                << r.record.audit.calls << " attack calls, 0 invariant violations\n";
        } else if (eval_cmd->parsed()) {
            ExperimentConfig cfg = eval_flags.build("eval");
            const DataBundle b = load_bundle(data_path);
            const ModelState state = apply_model_overrides(load_checkpoint(ckpt_path), cfg);
            EvalReport r = run_eval(state, b, cfg);
            r.wall_clock_seconds = seconds_since(t0);
            write_text(out_path, r.to_json());
            if (!csv_path.empty()) {
                append_csv(r, csv_path);
            }
            out << r.method << ": clean " << r.clean_accuracy << " robust " << r.robust_accuracy << " on "
                << r.num_examples << " images\n";
        } else if (grad_cmd->parsed()) {
            auto checks = primitive_grad_checks();
            const auto obj = objective_grad_checks();
            checks.insert(checks.end(), obj.begin(), obj.end());
            nlohmann::json j = nlohmann::json::array();
            bool ok = true;
            for (const auto& c : checks) {
                ok &= c.passed();
                j.push_back({{"name", c.name}, {"error", c.error}, {"tolerance", c.tolerance}, {"passed", c.passed()}});
                out << (c.passed() ? "ok   " : "FAIL ") << c.name << " " << c.error << "\n";
            }
            if (!out_path.empty()) {
                write_text(out_path, j.dump(2) + "\n");
            }
            if (!ok) {
                err << "error: gradient check failed\n";
                return exit_failure;
            }
        } else if (abl->parsed()) {
            ExperimentConfig cfg = abl_flags.build("eval");
            const DataBundle b = load_bundle(data_path);
            const ModelState ckpt = load_checkpoint(ckpt_path);
            std::vector<std::pair<std::string, AblationMask>> rows;
            if (masks.empty()) {
                rows = ablation_masks();
            } else {
                std::stringstream ss(masks);
                std::string bits;
                while (std::getline(ss, bits, ',')) {
                    rows.emplace_back(bits, parse_mask(bits));
                }
            }
            nlohmann::json j;
            j["seed"] = cfg.seed;
            j["config"] = cfg.echo();
            j["rows"] = nlohmann::json::array();
            for (const auto& [name, mask] : rows) {
                const AblationRow row = run_ablation_row(ckpt, b, cfg, name, mask);
                j["rows"].push_back(
                    {{"name", row.name}, {"mask", mask_bits(mask)}, {"clean", row.clean}, {"robust", row.robust}});
                out << row.name << ": clean " << row.clean << " robust " << row.robust << "\n";
            }
            j["wall_clock_seconds"] = seconds_since(t0);
            write_text(out_path, j.dump(2) + "\n");
        }
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return exit_config;
    } catch (const InvariantViolation& e) {
        err << "invariant violated: " << e.what() << "\n";
        return exit_invariant;
    } catch (const NumericError& e) {
        err << "numeric error: " << e.what() << "\n";
        return exit_numeric;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return exit_failure;
    }
    return exit_ok;
}

} // namespace capt
