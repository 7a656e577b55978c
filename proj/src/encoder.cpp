#include "capt/encoder.hpp"

#include <algorithm>
#include <cmath>

namespace capt {

namespace {

Tensor normal(Shape shape, double stddev, std::mt19937_64& rng, bool requires_grad)
{
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> v(numel(shape));
    for (double& x : v) {
        x = dist(rng);
    }
    Tensor t = Tensor::from(std::move(shape), std::move(v));
    t.set_requires_grad(requires_grad);
    return t;
}

Linear make_linear(std::size_t in, std::size_t out, std::mt19937_64& rng, double gain = 1.0)
{
    return Linear{normal({in, out}, gain / std::sqrt(static_cast<double>(in)), rng, true), Tensor::param({out}, std::vector<double>(out, 0.0))};
}

LayerNormParams make_ln(std::size_t d)
{
    return LayerNormParams{Tensor::param({d}, std::vector<double>(d, 1.0)), Tensor::param({d}, std::vector<double>(d, 0.0))};
}

Block make_block(const EncoderConfig& c, std::mt19937_64& rng)
{
    const std::size_t d = c.embed_dim;
    const std::size_t hidden = d * c.mlp_ratio;
    const double residual_gain = 1.0 / std::sqrt(2.0 * static_cast<double>(c.num_layers));
    Block b;
    b.ln1 = make_ln(d);
    b.qkv = make_linear(d, 3 * d, rng);
    b.attn_out = make_linear(d, d, rng, residual_gain);
    b.ln2 = make_ln(d);
    b.fc1 = make_linear(d, hidden, rng);
    b.fc2 = make_linear(hidden, d, rng, residual_gain);
    return b;
}

Tensor linear(const Tensor& x, const Linear& l) { return add(matmul(x, l.weight), l.bias); }

Tensor attention(const Tensor& x, const Block& blk, std::size_t heads)
{
    const std::size_t d = x.dim(2);
    const std::size_t dh = d / heads;
    Tensor qkv = linear(x, blk.qkv);
    std::vector<Tensor> parts = split(qkv, std::vector<std::size_t>(3 * heads, dh), 2);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> outs;
    outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        const Tensor& q = parts[h];
        const Tensor& k = parts[heads + h];
        const Tensor& v = parts[2 * heads + h];
        Tensor att = softmax(scale(matmul(q, transpose(k)), inv_sqrt));
        outs.push_back(matmul(att, v));
    }
    Tensor merged = heads == 1 ? outs.front() : concat(outs, 2);
    return linear(merged, blk.attn_out);
}

Tensor block_forward(const Tensor& x, const Block& blk, std::size_t heads)
{
    Tensor h = add(x, attention(layer_norm(x, blk.ln1.gamma, blk.ln1.beta), blk, heads));
    Tensor m = linear(gelu(linear(layer_norm(h, blk.ln2.gamma, blk.ln2.beta), blk.fc1)), blk.fc2);
    return add(h, m);
}

// Runs the stack; prompt block l (l < J) is appended before layer l, replacing
// whatever the previous layer produced at the prompt positions.
Tensor run_blocks(Tensor x, const std::vector<Block>& blocks, const std::vector<Tensor>& prompts, std::size_t heads)
{
    const std::size_t n = x.dim(0);
    const std::size_t tokens = x.dim(1);
    const std::size_t d = x.dim(2);
    if (prompts.size() > blocks.size()) {
        throw ShapeError("prompt depth exceeds the number of transformer layers");
    }
    for (std::size_t l = 0; l < blocks.size(); ++l) {
        if (l < prompts.size()) {
            const std::size_t b = prompts[l].dim(0);
            if (l > 0) {
                x = split(x, {tokens, x.dim(1) - tokens}, 1)[0];
            }
            Tensor p = add(Tensor::zeros({n, b, d}), prompts[l]);
            x = concat({x, p}, 1);
        }
        x = block_forward(x, blocks[l], heads);
    }
    return x;
}

// [N, T, d] -> [N, d] at token index `pos`.
Tensor select_token(const Tensor& x, std::size_t pos)
{
    const std::size_t tokens = x.dim(1);
    std::vector<std::size_t> sizes;
    std::size_t which = 0;
    if (pos > 0) {
        sizes.push_back(pos);
        which = 1;
    }
    sizes.push_back(1);
    if (tokens - pos - 1 > 0) {
        sizes.push_back(tokens - pos - 1);
    }
    Tensor t = sizes.size() == 1 ? x : split(x, sizes, 1)[which];
    return reshape(t, {x.dim(0), x.dim(2)});
}

// Row gather from an embedding table [V, d] -> [N, S, d].
Tensor embed_rows(const Tensor& table, const std::vector<std::size_t>& rows, std::size_t n, std::size_t s)
{
    const std::size_t d = table.dim(1);
    std::vector<std::size_t> idx;
    idx.reserve(rows.size() * d);
    for (std::size_t r : rows) {
        if (r >= table.dim(0)) {
            throw std::invalid_argument("token id " + std::to_string(r) + " outside the vocabulary");
        }
        for (std::size_t i = 0; i < d; ++i) {
            idx.push_back(r * d + i);
        }
    }
    return gather(table, std::move(idx), {n, s, d});
}

Tensor text_readout(const Tensor& seq, const ModelState& state, const std::vector<Tensor>& prompts)
{
    const auto& tt = state.theta.text;
    Tensor x = add(seq, tt.pos);
    x = run_blocks(x, tt.blocks, prompts, state.config.num_heads);
    Tensor eot = select_token(x, state.config.text_seq_len() - 1);
    return l2_normalize(matmul(layer_norm(eot, tt.ln_final.gamma, tt.ln_final.beta), tt.proj));
}

} // namespace

std::string to_string(ContextMode mode) { return mode == ContextMode::unified ? "unified" : "class-specific"; }

ContextMode parse_context_mode(const std::string& text)
{
    if (text == "unified" || text == "uc") {
        return ContextMode::unified;
    }
    if (text == "class-specific" || text == "csc") {
        return ContextMode::class_specific;
    }
    throw ConfigError("unknown context mode '" + text + "'");
}

void EncoderConfig::validate() const
{
    auto fail = [](const std::string& what) { throw ConfigError("EncoderConfig: " + what); };
    if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
        fail("image_size must be a positive multiple of patch_size");
    }
    if (channels == 0 || embed_dim == 0 || num_layers == 0 || mlp_ratio == 0) {
        fail("channels, embed_dim, num_layers and mlp_ratio must be positive");
    }
    if (num_heads == 0 || embed_dim % num_heads != 0) {
        fail("embed_dim must be divisible by num_heads");
    }
    if (prompt_depth < 1 || prompt_depth > num_layers) {
        fail("prompt_depth must lie in [1, num_layers]");
    }
    if (prompt_len < 1 || text_context_len < 1) {
        fail("prompt_len and text_context_len must be >= 1");
    }
    if (num_classes < 1 || template_words < 1) {
        fail("num_classes and template_words must be >= 1");
    }
    if (!(temperature > 0.0)) {
        fail("temperature must be positive");
    }
}

std::vector<std::vector<std::size_t>> caption_templates(const EncoderConfig& config, std::size_t count)
{
    std::mt19937_64 rng(0x7e3a11ULL);
    std::uniform_int_distribution<std::size_t> word(0, config.template_words - 1);
    std::vector<std::vector<std::size_t>> out(count);
    for (auto& t : out) {
        t.resize(config.text_context_len);
        for (auto& w : t) {
            w = word(rng);
        }
    }
    return out;
}

std::vector<std::size_t> all_classes(const EncoderConfig& config)
{
    std::vector<std::size_t> ids(config.num_classes);
    for (std::size_t c = 0; c < ids.size(); ++c) {
        ids[c] = c;
    }
    return ids;
}

// ---- parameters ------------------------------------------------------------------

namespace {

template <class BackboneT, class Fn>
void visit(BackboneT& bb, Fn&& fn)
{
    auto block = [&](const std::string& p, auto& b) {
        fn(p + "ln1.gamma", b.ln1.gamma);
        fn(p + "ln1.beta", b.ln1.beta);
        fn(p + "attn.qkv.weight", b.qkv.weight);
        fn(p + "attn.qkv.bias", b.qkv.bias);
        fn(p + "attn.out.weight", b.attn_out.weight);
        fn(p + "attn.out.bias", b.attn_out.bias);
        fn(p + "ln2.gamma", b.ln2.gamma);
        fn(p + "ln2.beta", b.ln2.beta);
        fn(p + "mlp.fc1.weight", b.fc1.weight);
        fn(p + "mlp.fc1.bias", b.fc1.bias);
        fn(p + "mlp.fc2.weight", b.fc2.weight);
        fn(p + "mlp.fc2.bias", b.fc2.bias);
    };
    fn("image.patch.weight", bb.image.patch.weight);
    fn("image.patch.bias", bb.image.patch.bias);
    fn("image.cls", bb.image.cls);
    fn("image.pos", bb.image.pos);
    for (std::size_t l = 0; l < bb.image.blocks.size(); ++l) {
        block("image.blocks." + std::to_string(l) + ".", bb.image.blocks[l]);
    }
    fn("image.ln_post.gamma", bb.image.ln_post.gamma);
    fn("image.ln_post.beta", bb.image.ln_post.beta);
    fn("image.proj", bb.image.proj);
    fn("text.token_embedding", bb.text.token_embedding);
    fn("text.pos", bb.text.pos);
    for (std::size_t l = 0; l < bb.text.blocks.size(); ++l) {
        block("text.blocks." + std::to_string(l) + ".", bb.text.blocks[l]);
    }
    fn("text.ln_final.gamma", bb.text.ln_final.gamma);
    fn("text.ln_final.beta", bb.text.ln_final.beta);
    fn("text.proj", bb.text.proj);
}

} // namespace

void Backbone::for_each(const std::function<void(const std::string&, Tensor&)>& fn) { visit(*this, fn); }

void Backbone::for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const { visit(*this, fn); }

Backbone Backbone::clone() const
{
    Backbone copy = *this;
    copy.for_each([](const std::string&, Tensor& t) { t = t.clone(); });
    return copy;
}

void Backbone::set_requires_grad(bool on)
{
    for_each([on](const std::string&, Tensor& t) { t.set_requires_grad(on); });
}

std::vector<Tensor> PromptSet::learnables() const
{
    std::vector<Tensor> out(visual.begin(), visual.end());
    out.insert(out.end(), textual.begin(), textual.end());
    if (has_context()) {
        out.push_back(text_context);
    }
    return out;
}

PromptSet PromptSet::clone() const
{
    PromptSet p;
    p.mode = mode;
    for (const auto& t : visual) {
        p.visual.push_back(t.clone());
    }
    for (const auto& t : textual) {
        p.textual.push_back(t.clone());
    }
    if (has_context()) {
        p.text_context = text_context.clone();
    }
    return p;
}

ModelState ModelState::clone() const
{
    ModelState s;
    s.config = config;
    s.theta = theta.clone();
    s.prompts = prompts.clone();
    if (pixel_prompt) {
        s.pixel_prompt = PixelPrompt{pixel_prompt->phi.clone(), pixel_prompt->mask.clone()};
    }
    if (probe) {
        s.probe = Linear{probe->weight.clone(), probe->bias.clone()};
    }
    return s;
}

ModelState ModelState::frozen_copy() const
{
    ModelState s;
    s.config = config;
    s.theta = theta.clone();
    s.theta.set_requires_grad(false);
    return s;
}

Backbone init_backbone(const EncoderConfig& c, std::mt19937_64& rng)
{
    c.validate();
    const std::size_t d = c.embed_dim;
    Backbone bb;
    bb.image.patch = make_linear(c.patch_size * c.patch_size * c.channels, d, rng);
    bb.image.cls = normal({d}, 0.02, rng, true);
    bb.image.pos = normal({c.image_tokens(), d}, 0.02, rng, true);
    for (std::size_t l = 0; l < c.num_layers; ++l) {
        bb.image.blocks.push_back(make_block(c, rng));
    }
    bb.image.ln_post = make_ln(d);
    bb.image.proj = normal({d, d}, 1.0 / std::sqrt(static_cast<double>(d)), rng, true);

    bb.text.token_embedding = normal({c.text_vocab_size(), d}, 0.02, rng, true);
    bb.text.pos = normal({c.text_seq_len(), d}, 0.01, rng, true);
    for (std::size_t l = 0; l < c.num_layers; ++l) {
        bb.text.blocks.push_back(make_block(c, rng));
    }
    bb.text.ln_final = make_ln(d);
    bb.text.proj = normal({d, d}, 1.0 / std::sqrt(static_cast<double>(d)), rng, true);
    return bb;
}

PromptSet init_prompts(const ModelState& state, bool deep, bool with_context, ContextMode mode, std::mt19937_64& rng,
                       bool random_context)
{
    const auto& c = state.config;
    c.validate();
    const std::size_t d = c.embed_dim;
    PromptSet p;
    p.mode = mode;
    if (deep) {
        for (std::size_t j = 0; j < c.prompt_depth; ++j) {
            p.visual.push_back(normal({c.prompt_len, d}, 0.02, rng, true));
        }
        for (std::size_t j = 0; j < c.prompt_depth; ++j) {
            p.textual.push_back(normal({c.prompt_len, d}, 0.02, rng, true));
        }
    }
    if (with_context) {
        const std::size_t copies = mode == ContextMode::class_specific ? c.num_classes : 1;
        const std::size_t m = c.text_context_len;
        Shape shape = mode == ContextMode::class_specific ? Shape{copies, m, d} : Shape{m, d};
        if (random_context) {
            p.text_context = normal(shape, 0.02, rng, true);
        } else {
            const auto tmpl = caption_templates(c).front();
            const auto table = state.theta.text.token_embedding.data();
            std::vector<double> v;
            v.reserve(copies * m * d);
            for (std::size_t k = 0; k < copies; ++k) {
                for (std::size_t w : tmpl) {
                    v.insert(v.end(), table.begin() + static_cast<std::ptrdiff_t>(w * d),
                             table.begin() + static_cast<std::ptrdiff_t>((w + 1) * d));
                }
            }
            p.text_context = Tensor::param(std::move(shape), std::move(v));
        }
    }
    return p;
}

// ---- forward passes ----------------------------------------------------------------

Tensor encode_image(const Tensor& x, const ModelState& state, bool use_prompts)
{
    const auto& c = state.config;
    if (x.rank() != 4 || x.dim(1) != c.image_size || x.dim(2) != c.image_size || x.dim(3) != c.channels) {
        throw ShapeError("encode_image: expected [B," + std::to_string(c.image_size) + "," +
                         std::to_string(c.image_size) + "," + std::to_string(c.channels) + "], got " +
                         to_string(x.shape()));
    }
    for (double v : x.data()) {
        if (v < 0.0 || v > 1.0) {
            throw std::invalid_argument("encode_image: pixel outside [0, 1]");
        }
    }
    const auto& it = state.theta.image;
    const std::size_t B = x.dim(0);
    const std::size_t p = c.patch_size;
    const std::size_t grid = c.image_size / p;
    const std::size_t M = c.num_patches();
    const std::size_t patch_len = p * p * c.channels;
    const std::size_t d = c.embed_dim;

    std::vector<std::size_t> idx;
    idx.reserve(B * M * patch_len);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t pr = 0; pr < grid; ++pr) {
            for (std::size_t pc = 0; pc < grid; ++pc) {
                for (std::size_t i = 0; i < p; ++i) {
                    for (std::size_t j = 0; j < p; ++j) {
                        for (std::size_t ch = 0; ch < c.channels; ++ch) {
                            const std::size_t row = pr * p + i;
                            const std::size_t col = pc * p + j;
                            idx.push_back(((b * c.image_size + row) * c.image_size + col) * c.channels + ch);
                        }
                    }
                }
            }
        }
    }
    Tensor centered = add_scalar(scale(x, 2.0), -1.0);
    Tensor patches = gather(centered, std::move(idx), {B, M, patch_len});
    Tensor emb = linear(patches, it.patch);
    Tensor cls = add(Tensor::zeros({B, 1, d}), reshape(it.cls, {1, d}));
    Tensor tokens = add(concat({cls, emb}, 1), it.pos);

    static const std::vector<Tensor> none;
    const auto& prompts = use_prompts && state.prompts.deep() ? state.prompts.visual : none;
    Tensor out = run_blocks(tokens, it.blocks, prompts, c.num_heads);
    Tensor readout = select_token(out, 0);
    return l2_normalize(matmul(layer_norm(readout, it.ln_post.gamma, it.ln_post.beta), it.proj));
}

Tensor encode_text(std::span<const std::size_t> class_ids, const ModelState& state, bool use_prompts)
{
    const auto& c = state.config;
    const auto& tt = state.theta.text;
    const std::size_t n = class_ids.size();
    const std::size_t m = c.text_context_len;
    const std::size_t d = c.embed_dim;
    if (n == 0) {
        throw std::invalid_argument("encode_text: no class ids");
    }
    for (std::size_t id : class_ids) {
        if (id >= c.num_classes) {
            throw std::invalid_argument("encode_text: unknown class id " + std::to_string(id));
        }
    }

    Tensor ctx;
    const PromptSet& ps = state.prompts;
    if (use_prompts && ps.has_context()) {
        if (ps.mode == ContextMode::unified) {
            if (ps.text_context.shape() != Shape{m, d}) {
                throw ShapeError("unified text context must be [m, d]");
            }
            ctx = add(Tensor::zeros({n, m, d}), ps.text_context);
        } else {
            if (ps.text_context.shape() != Shape{c.num_classes, m, d}) {
                throw ShapeError("class-specific text context must be [C, m, d]");
            }
            std::vector<std::size_t> idx;
            idx.reserve(n * m * d);
            for (std::size_t id : class_ids) {
                for (std::size_t k = 0; k < m * d; ++k) {
                    idx.push_back(id * m * d + k);
                }
            }
            ctx = gather(ps.text_context, std::move(idx), {n, m, d});
        }
    } else {
        const auto tmpl = caption_templates(c).front();
        std::vector<std::size_t> rows;
        for (std::size_t i = 0; i < n; ++i) {
            rows.insert(rows.end(), tmpl.begin(), tmpl.end());
        }
        ctx = embed_rows(tt.token_embedding, rows, n, m);
    }
    std::vector<std::size_t> cls_rows;
    for (std::size_t id : class_ids) {
        cls_rows.push_back(c.class_token(id));
    }
    Tensor cls = embed_rows(tt.token_embedding, cls_rows, n, 1);
    Tensor eot = embed_rows(tt.token_embedding, std::vector<std::size_t>(n, c.eot_token()), n, 1);
    Tensor seq = concat({ctx, cls, eot}, 1);

    static const std::vector<Tensor> none;
    return text_readout(seq, state, use_prompts && ps.deep() ? ps.textual : none);
}

Tensor encode_tokens(const std::vector<std::vector<std::size_t>>& sequences, const ModelState& state)
{
    const std::size_t s = state.config.text_seq_len();
    std::vector<std::size_t> rows;
    for (const auto& seq : sequences) {
        if (seq.size() != s) {
            throw ShapeError("encode_tokens: every sequence needs " + std::to_string(s) + " tokens");
        }
        rows.insert(rows.end(), seq.begin(), seq.end());
    }
    Tensor emb = embed_rows(state.theta.text.token_embedding, rows, sequences.size(), s);
    static const std::vector<Tensor> none;
    return text_readout(emb, state, none);
}

} // namespace capt
