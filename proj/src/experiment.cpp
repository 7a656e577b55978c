#include "capt/experiment.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "capt/errors.hpp"

namespace capt {

namespace {

std::string trim(const std::string& s)
{
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

double to_double(const std::string& key, const std::string& v)
{
    double out = 0.0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) {
        // Accept simple fractions such as 8/255.
        const auto slash = v.find('/');
        if (slash != std::string::npos) {
            return to_double(key, v.substr(0, slash)) / to_double(key, v.substr(slash + 1));
        }
        throw ConfigError("'" + key + "': expected a number, got '" + v + "'");
    }
    return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v)
{
    std::uint64_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) {
        throw ConfigError("'" + key + "': expected a non-negative integer, got '" + v + "'");
    }
    return out;
}

bool to_bool(const std::string& key, const std::string& v)
{
    if (v == "1" || v == "true") {
        return true;
    }
    if (v == "0" || v == "false") {
        return false;
    }
    throw ConfigError("'" + key + "': expected true/false, got '" + v + "'");
}

std::string fmt(double v)
{
    char buf[40];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

std::string fmt(std::uint64_t v) { return std::to_string(v); }
std::string fmt(bool v) { return v ? "true" : "false"; }

struct Field {
    std::function<void(ExperimentConfig&, const std::string&, const std::string&)> set;
    std::function<std::string(const ExperimentConfig&)> get;
};

template <class Get>
Field size_field(Get g)
{
    return {[g](ExperimentConfig& c, const std::string& k, const std::string& v) {
                g(c) = static_cast<std::size_t>(to_u64(k, v));
            },
            [g](const ExperimentConfig& c) { return fmt(static_cast<std::uint64_t>(g(const_cast<ExperimentConfig&>(c)))); }};
}

template <class Get>
Field u64_field(Get g)
{
    return {[g](ExperimentConfig& c, const std::string& k, const std::string& v) { g(c) = to_u64(k, v); },
            [g](const ExperimentConfig& c) { return fmt(g(const_cast<ExperimentConfig&>(c))); }};
}

template <class Get>
Field double_field(Get g)
{
    return {[g](ExperimentConfig& c, const std::string& k, const std::string& v) { g(c) = to_double(k, v); },
            [g](const ExperimentConfig& c) { return fmt(g(const_cast<ExperimentConfig&>(c))); }};
}

template <class Get>
Field bool_field(Get g)
{
    return {[g](ExperimentConfig& c, const std::string& k, const std::string& v) { g(c) = to_bool(k, v); },
            [g](const ExperimentConfig& c) { return fmt(g(const_cast<ExperimentConfig&>(c))); }};
}

std::string shifts_text(const std::vector<ShiftSpec>& shifts)
{
    std::string out;
    for (const auto& s : shifts) {
        out += (out.empty() ? "" : ",") + to_string(s.kind) + ":" + fmt(s.intensity);
    }
    return out;
}

const std::map<std::string, Field>& fields()
{
    using C = ExperimentConfig;
    static const std::map<std::string, Field> table = [] {
        std::map<std::string, Field> f;
        f["seed"] = u64_field([](C& c) -> std::uint64_t& { return c.seed; });

        f["data.num_classes"] = size_field([](C& c) -> std::size_t& { return c.data.num_classes; });
        f["data.image_size"] = size_field([](C& c) -> std::size_t& { return c.data.image_size; });
        f["data.channels"] = size_field([](C& c) -> std::size_t& { return c.data.channels; });
        f["data.train_per_class"] = size_field([](C& c) -> std::size_t& { return c.data.train_per_class; });
        f["data.test_per_class"] = size_field([](C& c) -> std::size_t& { return c.data.test_per_class; });
        f["data.noise_std"] = double_field([](C& c) -> double& { return c.data.noise_std; });
        f["data.seed"] = u64_field([](C& c) -> std::uint64_t& { return c.data.seed; });

        f["model.patch_size"] = size_field([](C& c) -> std::size_t& { return c.model.patch_size; });
        f["model.embed_dim"] = size_field([](C& c) -> std::size_t& { return c.model.embed_dim; });
        f["model.num_layers"] = size_field([](C& c) -> std::size_t& { return c.model.num_layers; });
        f["model.num_heads"] = size_field([](C& c) -> std::size_t& { return c.model.num_heads; });
        f["model.mlp_ratio"] = size_field([](C& c) -> std::size_t& { return c.model.mlp_ratio; });
        f["model.template_words"] = size_field([](C& c) -> std::size_t& { return c.model.template_words; });
        f["model.prompt_depth"] = size_field([](C& c) -> std::size_t& { return c.model.prompt_depth; });
        f["model.prompt_len"] = size_field([](C& c) -> std::size_t& { return c.model.prompt_len; });
        f["model.context_len"] = size_field([](C& c) -> std::size_t& { return c.model.text_context_len; });
        f["model.tau"] = double_field([](C& c) -> double& { return c.model.temperature; });

        f["pretrain.epochs"] = size_field([](C& c) -> std::size_t& { return c.pretrain.epochs; });
        f["pretrain.batch_size"] = size_field([](C& c) -> std::size_t& { return c.pretrain.batch_size; });
        f["pretrain.lr"] = double_field([](C& c) -> double& { return c.pretrain.lr; });
        f["pretrain.templates"] = size_field([](C& c) -> std::size_t& { return c.pretrain.num_templates; });
        f["pretrain.seed"] = u64_field([](C& c) -> std::uint64_t& { return c.pretrain.seed; });

        f["train.epochs"] = size_field([](C& c) -> std::size_t& { return c.train.epochs; });
        f["train.batch_size"] = size_field([](C& c) -> std::size_t& { return c.train.batch_size; });
        f["train.lr"] = {[](C& c, const std::string& k, const std::string& v) {
                             if (v == "default") {
                                 c.train.lr0.reset();
                             } else {
                                 c.train.lr0 = to_double(k, v);
                             }
                         },
                         [](const C& c) { return c.train.lr0 ? fmt(*c.train.lr0) : std::string("default"); }};
        f["train.momentum"] = double_field([](C& c) -> double& { return c.train.momentum; });
        f["train.warmup_epochs"] = size_field([](C& c) -> std::size_t& { return c.train.warmup_epochs; });
        f["train.shots"] = size_field([](C& c) -> std::size_t& { return c.train.shots; });
        f["train.grad_clip"] = double_field([](C& c) -> double& { return c.train.grad_clip; });
        f["train.val_every"] = size_field([](C& c) -> std::size_t& { return c.train.val_every; });
        f["train.val_attack_steps"] = size_field([](C& c) -> std::size_t& { return c.train.val_attack_steps; });
        f["train.random_context"] = bool_field([](C& c) -> bool& { return c.train.random_context; });
        f["train.eps"] = {[](C& c, const std::string& k, const std::string& v) {
                              c.train.attack.epsilon = to_double(k, v);
                              if (!c.explicit_keys.count("train.step_size")) {
                                  c.train.attack.step_size = 2.0 * c.train.attack.epsilon / 3.0;
                              }
                          },
                          [](const C& c) { return fmt(c.train.attack.epsilon); }};
        f["train.steps"] = size_field([](C& c) -> std::size_t& { return c.train.attack.steps; });
        f["train.step_size"] = double_field([](C& c) -> double& { return c.train.attack.step_size; });

        f["objective.method"] = {
            [](C& c, const std::string&, const std::string& v) { c.train.objective.method = parse_method(v); },
            [](const C& c) { return to_string(c.train.objective.method); }};
        f["objective.lambda"] = double_field([](C& c) -> double& { return c.train.objective.lambda; });
        f["objective.mask"] = {
            [](C& c, const std::string&, const std::string& v) { c.train.objective.mask = parse_mask(v); },
            [](const C& c) { return mask_bits(c.train.objective.mask); }};
        f["objective.alpha_mode"] = {[](C& c, const std::string& k, const std::string& v) {
                                         if (v == "adaptive") {
                                             c.train.objective.alpha_mode = AlphaMode::adaptive;
                                         } else if (v == "fixed") {
                                             c.train.objective.alpha_mode = AlphaMode::fixed;
                                         } else {
                                             throw ConfigError("'" + k + "': expected adaptive or fixed");
                                         }
                                     },
                                     [](const C& c) {
                                         return std::string(c.train.objective.alpha_mode == AlphaMode::adaptive
                                                                ? "adaptive"
                                                                : "fixed");
                                     }};
        f["objective.fixed_alpha"] = double_field([](C& c) -> double& { return c.train.objective.fixed_alpha; });
        f["objective.alpha_grad"] = bool_field([](C& c) -> bool& { return c.train.objective.alpha_grad; });
        f["objective.avp_border"] = size_field([](C& c) -> std::size_t& { return c.train.objective.avp_border; });

        f["eval.eps"] = {[](C& c, const std::string& k, const std::string& v) {
                             c.eval_attack.epsilon = to_double(k, v);
                             if (!c.explicit_keys.count("eval.step_size")) {
                                 c.eval_attack.step_size = c.eval_attack.epsilon / 4.0;
                             }
                         },
                         [](const C& c) { return fmt(c.eval_attack.epsilon); }};
        f["eval.steps"] = size_field([](C& c) -> std::size_t& { return c.eval_attack.steps; });
        f["eval.step_size"] = double_field([](C& c) -> double& { return c.eval_attack.step_size; });
        f["eval.random_start"] = bool_field([](C& c) -> bool& { return c.eval_attack.random_start; });
        f["eval.per_class"] = size_field([](C& c) -> std::size_t& { return c.eval_per_class; });
        f["eval.shifts"] = {[](C& c, const std::string&, const std::string& v) { c.shifts = parse_shifts(v); },
                            [](const C& c) { return shifts_text(c.shifts); }};
        return f;
    }();
    return table;
}

Method infer_method(const ModelState& s)
{
    if (s.pixel_prompt) {
        return Method::avp;
    }
    if (s.probe) {
        return Method::paft;
    }
    if (s.prompts.deep()) {
        return Method::capt;
    }
    if (s.prompts.has_context()) {
        return s.prompts.mode == ContextMode::class_specific ? Method::apt_csc : Method::apt_uc;
    }
    return Method::hep;
}

} // namespace

void ExperimentConfig::set(const std::string& key, const std::string& value)
{
    const auto it = fields().find(key);
    if (it == fields().end()) {
        throw ConfigError("unknown config key '" + key + "'");
    }
    it->second.set(*this, key, trim(value));
    explicit_keys.insert(key);
    model.num_classes = data.num_classes;
    model.image_size = data.image_size;
    model.channels = data.channels;
}

std::map<std::string, std::string> ExperimentConfig::echo() const
{
    std::map<std::string, std::string> out;
    for (const auto& [k, f] : fields()) {
        out[k] = f.get(*this);
    }
    return out;
}

std::vector<std::string> ExperimentConfig::keys()
{
    std::vector<std::string> out;
    for (const auto& [k, f] : fields()) {
        out.push_back(k);
    }
    return out;
}

void ExperimentConfig::validate() const
{
    data.validate();
    model.validate();
    pretrain.validate();
    train.validate();
    eval_attack.validate();
}

void apply_config_text(ExperimentConfig& cfg, const std::string& text)
{
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) {
            line.resize(hash);
        }
        line = trim(line);
        if (line.empty()) {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
        }
        try {
            cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        } catch (const ConfigError& e) {
            throw ConfigError("config line " + std::to_string(lineno) + ": " + e.what());
        }
    }
}

void apply_config_file(ExperimentConfig& cfg, const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open config file " + path.string());
    }
    std::stringstream ss;
    ss << in.rdbuf();
    apply_config_text(cfg, ss.str());
}

std::vector<ShiftSpec> parse_shifts(const std::string& text)
{
    std::vector<ShiftSpec> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) {
            continue;
        }
        const auto colon = item.find(':');
        if (colon == std::string::npos) {
            throw ConfigError("shift '" + item + "': expected kind:intensity");
        }
        ShiftSpec s;
        s.kind = parse_shift_kind(trim(item.substr(0, colon)));
        s.intensity = to_double("eval.shifts", trim(item.substr(colon + 1)));
        if (!(s.intensity >= 0.0 && s.intensity <= 1.0)) {
            throw ConfigError("shift intensity must lie in [0, 1]");
        }
        out.push_back(s);
    }
    return out;
}

ModelState apply_model_overrides(const ModelState& ckpt, const ExperimentConfig& cfg)
{
    ModelState s = ckpt.clone();
    const auto& e = cfg.explicit_keys;
    auto fixed = [&](const char* key, std::size_t have, std::size_t want) {
        if (e.count(key) && have != want) {
            throw ConfigError(std::string(key) + " = " + std::to_string(want) + " conflicts with the checkpoint (" +
                              std::to_string(have) + ")");
        }
    };
    fixed("model.patch_size", s.config.patch_size, cfg.model.patch_size);
    fixed("model.embed_dim", s.config.embed_dim, cfg.model.embed_dim);
    fixed("model.num_layers", s.config.num_layers, cfg.model.num_layers);
    fixed("model.num_heads", s.config.num_heads, cfg.model.num_heads);
    fixed("model.mlp_ratio", s.config.mlp_ratio, cfg.model.mlp_ratio);
    fixed("model.template_words", s.config.template_words, cfg.model.template_words);
    fixed("model.context_len", s.config.text_context_len, cfg.model.text_context_len);
    if (e.count("model.prompt_depth")) {
        s.config.prompt_depth = cfg.model.prompt_depth;
    }
    if (e.count("model.prompt_len")) {
        s.config.prompt_len = cfg.model.prompt_len;
    }
    if (e.count("model.tau")) {
        s.config.temperature = cfg.model.temperature;
    }
    s.config.validate();
    return s;
}

PretrainResult run_pretrain(const DataBundle& bundle, const ExperimentConfig& cfg)
{
    EncoderConfig model = cfg.model;
    model.num_classes = bundle.train.num_classes;
    model.image_size = bundle.train.image_size;
    model.channels = bundle.train.channels;
    return pretrain_contrastive(bundle.train, model, cfg.pretrain);
}

TuneResult run_tune(const ModelState& pretrained, const DataBundle& bundle, const ExperimentConfig& cfg)
{
    TrainConfig tc = cfg.train;
    tc.seed = cfg.seed;
    const ModelState base = apply_model_overrides(pretrained, cfg);
    const auto shots = nshot_sample(bundle.train, tc.shots, cfg.seed);
    const Dataset train = bundle.train.subset(shots);
    Dataset val;
    if (tc.val_every > 0) {
        val = bundle.test.subset(split_test_pool(bundle.test).validation);
    }
    ModelState state = prepare_method(base, tc.objective.method, tc);
    TuneResult r = tune(state, base.frozen_copy(), train, val, tc);
    r.record.shot_indices = shots;
    return r;
}

EvalReport run_eval(const ModelState& state, const DataBundle& bundle, const ExperimentConfig& cfg,
                    AttackAudit* audit)
{
    const auto indices = eval_subset(bundle.test, split_test_pool(bundle.test).evaluation, cfg.eval_per_class);
    AttackConfig attack = cfg.eval_attack;
    attack.seed = cfg.seed;

    EvalReport r;
    r.method = to_string(infer_method(state));
    r.shots = cfg.train.shots;
    r.epsilon = attack.epsilon;
    r.seed = cfg.seed;
    r.attack = attack;
    r.num_examples = indices.size();
    const AccuracyPair acc = evaluate_accuracy(state, bundle.test, indices, attack, audit);
    r.clean_accuracy = acc.clean;
    r.robust_accuracy = acc.robust;

    const Dataset pool = bundle.test.subset(indices);
    std::vector<std::size_t> all(pool.size());
    for (std::size_t i = 0; i < all.size(); ++i) {
        all[i] = i;
    }
    for (std::size_t k = 0; k < cfg.shifts.size(); ++k) {
        ShiftSpec shift = cfg.shifts[k];
        shift.seed = cfg.seed * 16 + k;
        const Dataset shifted = apply_shift(pool, shift);
        const AccuracyPair s = evaluate_accuracy(state, shifted, all, attack, audit);
        r.shifts.push_back({to_string(shift.kind), shift.intensity, s.clean, s.robust});
    }

    r.config = cfg.echo();
    r.config["model.prompt_depth"] = std::to_string(state.config.prompt_depth);
    r.config["model.prompt_len"] = std::to_string(state.config.prompt_len);
    r.config["model.context_len"] = std::to_string(state.config.text_context_len);
    r.config["model.tau"] = fmt(state.config.temperature);
    r.config["model.embed_dim"] = std::to_string(state.config.embed_dim);
    r.config["model.num_layers"] = std::to_string(state.config.num_layers);
    return r;
}

std::vector<std::pair<std::string, AblationMask>> ablation_masks()
{
    return {
        {"ce_adv", {true, false, false, false}},
        {"ce_clean", {false, true, false, false}},
        {"ce_clean+cons_train", {false, true, true, false}},
        {"ce_clean+cons_frz", {false, true, false, true}},
        {"all", {false, true, true, true}},
    };
}

AblationMask parse_mask(const std::string& bits)
{
    if (bits.size() != 4 || bits.find_first_not_of("01") != std::string::npos) {
        throw ConfigError("mask '" + bits + "': expected four 0/1 digits (ce_adv ce_clean cons_train cons_frz)");
    }
    AblationMask m{bits[0] == '1', bits[1] == '1', bits[2] == '1', bits[3] == '1'};
    if (!m.ce_adv && !m.ce_clean && !m.cons_train && !m.cons_frz) {
        throw ConfigError("mask enables no loss term");
    }
    return m;
}

std::string mask_bits(const AblationMask& m)
{
    return std::string{m.ce_adv ? '1' : '0', m.ce_clean ? '1' : '0', m.cons_train ? '1' : '0',
                       m.cons_frz ? '1' : '0'};
}

AblationRow run_ablation_row(const ModelState& pretrained, const DataBundle& bundle, const ExperimentConfig& cfg,
                             const std::string& name, const AblationMask& mask)
{
    ExperimentConfig c = cfg;
    c.train.objective.method = Method::capt;
    c.train.objective.mask = mask;
    c.shifts.clear();
    const TuneResult t = run_tune(pretrained, bundle, c);
    const EvalReport r = run_eval(t.state, bundle, c);
    return {name, mask, r.clean_accuracy, r.robust_accuracy};
}

} // namespace capt
