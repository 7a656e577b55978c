#include "capt/eval.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "capt/objectives.hpp"

namespace capt {

double compute_accuracy(std::span<const std::size_t> preds, std::span<const std::size_t> labels)
{
    if (preds.size() != labels.size()) {
        throw ShapeError("compute_accuracy: prediction and label counts differ");
    }
    if (preds.empty()) {
        throw std::invalid_argument("compute_accuracy: no examples");
    }
    std::size_t correct = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        correct += preds[i] == labels[i] ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(preds.size());
}

double clean_accuracy(const ModelState& state, const Dataset& data, std::span<const std::size_t> indices,
                      std::size_t chunk)
{
    NoGradScope ng;
    Tensor zt;
    if (!state.probe) {
        zt = encode_text(all_classes(state.config), state, true);
    }
    std::vector<std::size_t> preds;
    for (std::size_t start = 0; start < indices.size(); start += chunk) {
        auto part = indices.subspan(start, std::min(chunk, indices.size() - start));
        auto p = argmax_rows(predict_logits(state, data.images(part), zt));
        preds.insert(preds.end(), p.begin(), p.end());
    }
    return compute_accuracy(preds, data.labels_at(indices));
}

AccuracyPair evaluate_accuracy(const ModelState& state, const Dataset& data, std::span<const std::size_t> indices,
                               const AttackConfig& attack, AttackAudit* audit, std::size_t chunk)
{
    const ModelState view = detached_copy(state);
    Tensor zt;
    if (!view.probe) {
        NoGradScope ng;
        zt = encode_text(all_classes(view.config), view, true);
    }
    std::vector<std::size_t> clean_preds;
    std::vector<std::size_t> adv_preds;
    std::size_t batch = 0;
    for (std::size_t start = 0; start < indices.size(); start += chunk, ++batch) {
        auto part = indices.subspan(start, std::min(chunk, indices.size() - start));
        Tensor x = data.images(part);
        Labels y = data.labels_at(part);
        AttackConfig cfg = attack;
        cfg.seed = attack.seed + batch;
        AdvBatch adv = pgd_attack(x, y, view, cfg, audit);
        NoGradScope ng;
        auto pc = argmax_rows(predict_logits(view, x, zt));
        auto pa = argmax_rows(predict_logits(view, adv.x_adv, zt));
        clean_preds.insert(clean_preds.end(), pc.begin(), pc.end());
        adv_preds.insert(adv_preds.end(), pa.begin(), pa.end());
    }
    const Labels labels = data.labels_at(indices);
    return {compute_accuracy(clean_preds, labels), compute_accuracy(adv_preds, labels)};
}

std::string EvalReport::to_json(bool with_wall_clock) const
{
    nlohmann::json j;
    j["method"] = method;
    j["shots"] = shots;
    j["epsilon"] = epsilon;
    j["clean_accuracy"] = clean_accuracy;
    j["robust_accuracy"] = robust_accuracy;
    j["num_examples"] = num_examples;
    j["seed"] = seed;
    if (with_wall_clock) {
        j["wall_clock_seconds"] = wall_clock_seconds;
    }
    j["attack"] = {{"epsilon", attack.epsilon},   {"step_size", attack.step_size},
                   {"steps", attack.steps},       {"random_start", attack.random_start},
                   {"init_zero", attack.init_zero}, {"seed", attack.seed}};
    nlohmann::json sh = nlohmann::json::array();
    for (const auto& s : shifts) {
        sh.push_back({{"kind", s.kind}, {"intensity", s.intensity}, {"clean", s.clean}, {"robust", s.robust}});
    }
    j["shifts"] = sh;
    j["config"] = config;
    return j.dump(2) + "\n";
}

std::string EvalReport::csv_header()
{
    return "method,shots,epsilon,seed,clean_accuracy,robust_accuracy,num_examples";
}

std::string EvalReport::csv_row() const
{
    std::ostringstream os;
    os << std::setprecision(17) << method << ',' << shots << ',' << epsilon << ',' << seed << ',' << clean_accuracy
       << ',' << robust_accuracy << ',' << num_examples;
    return os.str();
}

void append_csv(const EvalReport& report, const std::string& path)
{
    const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
    std::ofstream os(path, std::ios::app);
    if (!os) {
        throw ConfigError("cannot open " + path + " for appending");
    }
    if (fresh) {
        os << EvalReport::csv_header() << '\n';
    }
    os << report.csv_row() << '\n';
}

} // namespace capt
