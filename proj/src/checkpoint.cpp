#include "capt/checkpoint.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

#include "capt/binio.hpp"

namespace capt {

namespace {

constexpr char kMagic[8] = {'C', 'A', 'P', 'T', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

void put_block(std::ostream& os, const std::string& name, const Tensor& t)
{
    binio::put_str(os, name);
    binio::put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) {
        binio::put_u64(os, d);
    }
    for (double v : t.data()) {
        binio::put_f64(os, v);
    }
}

std::vector<std::pair<std::string, Tensor>> learnable_blocks(const ModelState& s)
{
    std::vector<std::pair<std::string, Tensor>> out;
    for (std::size_t l = 0; l < s.prompts.visual.size(); ++l) {
        out.emplace_back("prompt.visual." + std::to_string(l), s.prompts.visual[l]);
    }
    for (std::size_t l = 0; l < s.prompts.textual.size(); ++l) {
        out.emplace_back("prompt.textual." + std::to_string(l), s.prompts.textual[l]);
    }
    if (s.prompts.has_context()) {
        out.emplace_back("prompt.context", s.prompts.text_context);
    }
    if (s.pixel_prompt) {
        out.emplace_back("avp.phi", s.pixel_prompt->phi);
        out.emplace_back("avp.mask", s.pixel_prompt->mask);
    }
    if (s.probe) {
        out.emplace_back("paft.weight", s.probe->weight);
        out.emplace_back("paft.bias", s.probe->bias);
    }
    return out;
}

} // namespace

void save_checkpoint(const ModelState& state, const std::filesystem::path& path)
{
    const auto& c = state.config;
    c.validate();
    std::vector<std::pair<std::string, Tensor>> blocks;
    state.theta.for_each([&](const std::string& name, const Tensor& t) { blocks.emplace_back(name, t); });
    auto extra = learnable_blocks(state);
    blocks.insert(blocks.end(), extra.begin(), extra.end());

    binio::write_atomically(path, [&](std::ostream& os) {
        os.write(kMagic, sizeof(kMagic));
        binio::put_u32(os, kVersion);
        for (std::size_t v : {c.image_size, c.patch_size, c.channels, c.embed_dim, c.num_layers, c.num_heads,
                              c.mlp_ratio, c.num_classes, c.template_words, c.prompt_depth, c.prompt_len,
                              c.text_context_len}) {
            binio::put_u32(os, static_cast<std::uint32_t>(v));
        }
        binio::put_u32(os, c.context_mode == ContextMode::unified ? 0U : 1U);
        binio::put_f64(os, c.temperature);
        binio::put_u32(os, static_cast<std::uint32_t>(blocks.size()));
        for (const auto& [name, t] : blocks) {
            put_block(os, name, t);
        }
    });
}

ModelState load_checkpoint(const std::filesystem::path& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw ConfigError("cannot open checkpoint " + path.string());
    }
    binio::Reader in(is, "checkpoint " + path.string());
    unsigned char magic[8];
    in.bytes(magic, 8);
    if (std::memcmp(magic, kMagic, 8) != 0) {
        in.corrupt("bad magic");
    }
    if (in.u32() != kVersion) {
        in.corrupt("unsupported version");
    }
    ModelState s;
    auto& c = s.config;
    for (std::size_t* f : {&c.image_size, &c.patch_size, &c.channels, &c.embed_dim, &c.num_layers, &c.num_heads,
                           &c.mlp_ratio, &c.num_classes, &c.template_words, &c.prompt_depth, &c.prompt_len,
                           &c.text_context_len}) {
        *f = in.u32();
        if (*f > (1U << 20)) {
            in.corrupt("implausible config field");
        }
    }
    const std::uint32_t mode = in.u32();
    if (mode > 1) {
        in.corrupt("bad context mode");
    }
    c.context_mode = mode == 0 ? ContextMode::unified : ContextMode::class_specific;
    c.temperature = in.f64();
    try {
        c.validate();
    } catch (const ConfigError& e) {
        in.corrupt(e.what());
    }
    if (!(c.temperature > 0.0) || !std::isfinite(c.temperature)) {
        in.corrupt("bad temperature");
    }

    const std::uint32_t count = in.u32();
    std::map<std::string, Tensor> blocks;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string name = in.str(256);
        const std::uint32_t rank = in.u32();
        if (rank > 8) {
            in.corrupt("implausible rank for " + name);
        }
        Shape shape(rank);
        std::size_t n = 1;
        for (auto& d : shape) {
            d = in.u64();
            if (d == 0 || d > (1U << 24) || n > (std::size_t{1} << 28) / d) {
                in.corrupt("implausible shape for " + name);
            }
            n *= d;
        }
        std::vector<double> v(n);
        for (double& x : v) {
            x = in.f64();
            if (!std::isfinite(x)) {
                in.corrupt("non-finite value in " + name);
            }
        }
        if (!blocks.emplace(name, Tensor::from(std::move(shape), std::move(v))).second) {
            in.corrupt("duplicate block " + name);
        }
    }
    if (!in.at_end()) {
        in.corrupt("trailing bytes");
    }

    // Shapes come from a freshly initialized backbone of the same config.
    std::mt19937_64 rng(0);
    s.theta = init_backbone(c, rng);
    s.theta.for_each([&](const std::string& name, Tensor& t) {
        auto it = blocks.find(name);
        if (it == blocks.end()) {
            in.corrupt("missing block " + name);
        }
        if (it->second.shape() != t.shape()) {
            in.corrupt("shape mismatch for " + name);
        }
        t = it->second;
        t.set_requires_grad(false);
        blocks.erase(it);
    });

    auto take = [&](const std::string& name) -> Tensor {
        auto it = blocks.find(name);
        if (it == blocks.end()) {
            return {};
        }
        Tensor t = it->second;
        blocks.erase(it);
        return t;
    };
    const std::size_t d = c.embed_dim;
    s.prompts.mode = c.context_mode;
    for (const char* kind : {"visual", "textual"}) {
        auto& dst = std::string(kind) == "visual" ? s.prompts.visual : s.prompts.textual;
        for (std::size_t l = 0;; ++l) {
            Tensor t = take("prompt." + std::string(kind) + "." + std::to_string(l));
            if (!t.defined()) {
                break;
            }
            if (t.shape() != Shape{c.prompt_len, d}) {
                in.corrupt("prompt block shape mismatch");
            }
            t.set_requires_grad(true);
            dst.push_back(t);
        }
    }
    if (s.prompts.visual.size() != s.prompts.textual.size() ||
        (!s.prompts.visual.empty() && s.prompts.visual.size() != c.prompt_depth)) {
        in.corrupt("prompt depth does not match config");
    }
    if (Tensor t = take("prompt.context"); t.defined()) {
        const Shape want = c.context_mode == ContextMode::unified ? Shape{c.text_context_len, d}
                                                                  : Shape{c.num_classes, c.text_context_len, d};
        if (t.shape() != want) {
            in.corrupt("text context shape mismatch");
        }
        t.set_requires_grad(true);
        s.prompts.text_context = t;
    }
    Tensor phi = take("avp.phi");
    Tensor mask = take("avp.mask");
    if (phi.defined() != mask.defined()) {
        in.corrupt("avp blocks incomplete");
    }
    if (phi.defined()) {
        const Shape img{c.image_size, c.image_size, c.channels};
        if (phi.shape() != img || mask.shape() != img) {
            in.corrupt("avp block shape mismatch");
        }
        phi.set_requires_grad(true);
        s.pixel_prompt = PixelPrompt{phi, mask};
    }
    Tensor w = take("paft.weight");
    Tensor b = take("paft.bias");
    if (w.defined() != b.defined()) {
        in.corrupt("paft blocks incomplete");
    }
    if (w.defined()) {
        if (w.shape() != Shape{d, c.num_classes} || b.shape() != Shape{c.num_classes}) {
            in.corrupt("paft block shape mismatch");
        }
        w.set_requires_grad(true);
        b.set_requires_grad(true);
        s.probe = Linear{w, b};
    }
    if (!blocks.empty()) {
        in.corrupt("unknown block " + blocks.begin()->first);
    }
    return s;
}

bool backbone_identical(const Backbone& a, const Backbone& b)
{
    std::vector<Tensor> ta;
    std::vector<Tensor> tb;
    a.for_each([&](const std::string&, const Tensor& t) { ta.push_back(t); });
    b.for_each([&](const std::string&, const Tensor& t) { tb.push_back(t); });
    if (ta.size() != tb.size()) {
        return false;
    }
    for (std::size_t i = 0; i < ta.size(); ++i) {
        if (ta[i].shape() != tb[i].shape()) {
            return false;
        }
        auto x = ta[i].data();
        auto y = tb[i].data();
        if (std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) != 0) {
            return false;
        }
    }
    return true;
}

double backbone_max_abs_diff(const Backbone& a, const Backbone& b)
{
    std::vector<Tensor> ta;
    std::vector<Tensor> tb;
    a.for_each([&](const std::string&, const Tensor& t) { ta.push_back(t); });
    b.for_each([&](const std::string&, const Tensor& t) { tb.push_back(t); });
    if (ta.size() != tb.size()) {
        throw ShapeError("backbone_max_abs_diff: different parameter counts");
    }
    double m = 0.0;
    for (std::size_t i = 0; i < ta.size(); ++i) {
        if (ta[i].shape() != tb[i].shape()) {
            throw ShapeError("backbone_max_abs_diff: shape mismatch");
        }
        auto x = ta[i].data();
        auto y = tb[i].data();
        for (std::size_t k = 0; k < x.size(); ++k) {
            m = std::max(m, std::abs(x[k] - y[k]));
        }
    }
    return m;
}

} // namespace capt
