#include "capt/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include "capt/binio.hpp"

namespace capt {

namespace {

constexpr char kDataMagic[8] = {'C', 'A', 'P', 'T', 'D', 'A', 'T', 'A'};
constexpr std::uint32_t kDataVersion = 1;

enum class Family { stripes, checker, blob, gradient };

struct ClassPattern {
    Family family;
    double angle;  // radians, stripes / gradient
    double period; // stripes period, checker cell, blob radius
    std::array<double, 3> fg;
    std::array<double, 3> bg;
};

std::array<double, 3> hsv(double h, double s, double v)
{
    h = h - std::floor(h);
    const double i = std::floor(h * 6.0);
    const double f = h * 6.0 - i;
    const double p = v * (1.0 - s);
    const double q = v * (1.0 - f * s);
    const double t = v * (1.0 - (1.0 - f) * s);
    switch (static_cast<int>(i) % 6) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
    }
}

ClassPattern pattern_for(std::size_t cls, std::size_t num_classes)
{
    static constexpr std::array<Family, 8> families = {Family::stripes, Family::stripes, Family::checker,
                                                       Family::blob,    Family::stripes, Family::checker,
                                                       Family::blob,    Family::gradient};
    static constexpr std::array<double, 8> angles = {0.0, 90.0, 0.0, 0.0, 45.0, 0.0, 0.0, 30.0};
    static constexpr std::array<double, 8> periods = {4.0, 4.0, 4.0, 3.0, 6.0, 2.0, 5.0, 16.0};
    const std::size_t k = cls % 8;
    const std::size_t round = cls / 8;
    ClassPattern p;
    p.family = families[k];
    p.angle = (angles[k] + 13.0 * static_cast<double>(round)) * std::numbers::pi / 180.0;
    p.period = periods[k] + static_cast<double>(round);
    const double hue = static_cast<double>(cls) / static_cast<double>(num_classes);
    p.fg = hsv(hue, 0.6, 0.85);
    p.bg = hsv(hue + 0.5, 0.4, 0.35);
    return p;
}

double pattern_value(const ClassPattern& p, double u, double v, const Placement& w, double size)
{
    switch (p.family) {
    case Family::stripes: {
        const double t = (u + w.shift_x) * std::cos(p.angle) + (v + w.shift_y) * std::sin(p.angle);
        return 0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * t / p.period);
    }
    case Family::checker: {
        const auto a = static_cast<long>(std::floor((u + w.shift_x) / p.period));
        const auto b = static_cast<long>(std::floor((v + w.shift_y) / p.period));
        return ((a + b) % 2 == 0) ? 1.0 : 0.0;
    }
    case Family::blob: {
        const double cx = size / 2.0 + (w.shift_x / size - 0.5) * size / 2.0;
        const double cy = size / 2.0 + (w.shift_y / size - 0.5) * size / 2.0;
        const double r2 = (u - cx) * (u - cx) + (v - cy) * (v - cy);
        return std::exp(-r2 / (2.0 * p.period * p.period));
    }
    case Family::gradient: {
        const double t = ((u + w.shift_x / 4.0) * std::cos(p.angle) + (v + w.shift_y / 4.0) * std::sin(p.angle)) / size;
        return std::clamp(t, 0.0, 1.0);
    }
    }
    return 0.0;
}

void fill_split(const SynthSpec& spec, std::size_t per_class, std::mt19937_64& rng, Dataset& out)
{
    out.num_classes = spec.num_classes;
    out.image_size = spec.image_size;
    out.channels = spec.channels;
    std::uniform_real_distribution<double> phase(0.0, static_cast<double>(spec.image_size));
    std::uniform_real_distribution<double> bright(-0.1, 0.1);
    std::normal_distribution<double> noise(0.0, 1.0);
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
        for (std::size_t k = 0; k < per_class; ++k) {
            Placement w{phase(rng), phase(rng), bright(rng)};
            std::vector<double> img = render_pattern(spec, c, w);
            if (spec.noise_std > 0.0) {
                for (double& px : img) {
                    px = std::clamp(px + spec.noise_std * noise(rng), 0.0, 1.0);
                }
            }
            out.pixels.insert(out.pixels.end(), img.begin(), img.end());
            out.labels.push_back(c);
            out.placements.push_back(w);
        }
    }
}

void write_split(std::ostream& os, const std::string& name, const Dataset& d)
{
    binio::put_str(os, name);
    binio::put_u64(os, d.size());
    for (std::size_t y : d.labels) {
        binio::put_u32(os, static_cast<std::uint32_t>(y));
    }
    for (const auto& p : d.placements) {
        binio::put_f64(os, p.shift_x);
        binio::put_f64(os, p.shift_y);
        binio::put_f64(os, p.brightness);
    }
    for (double v : d.pixels) {
        binio::put_f64(os, v);
    }
}

Dataset read_split(binio::Reader& in, const SynthSpec& spec, const std::string& expected)
{
    const std::string name = in.str(64);
    if (name != expected) {
        in.corrupt("expected split '" + expected + "', found '" + name + "'");
    }
    const std::uint64_t n = in.u64();
    const std::size_t ppi = spec.image_size * spec.image_size * spec.channels;
    if (n > (1ULL << 32) || (ppi > 0 && n > (1ULL << 40) / ppi)) {
        in.corrupt("implausible sample count");
    }
    Dataset d;
    d.num_classes = spec.num_classes;
    d.image_size = spec.image_size;
    d.channels = spec.channels;
    d.labels.resize(n);
    for (auto& y : d.labels) {
        y = in.u32();
        if (y >= spec.num_classes) {
            in.corrupt("label out of range");
        }
    }
    d.placements.resize(n);
    for (auto& p : d.placements) {
        p.shift_x = in.f64();
        p.shift_y = in.f64();
        p.brightness = in.f64();
    }
    d.pixels.resize(n * ppi);
    for (auto& v : d.pixels) {
        v = in.f64();
        if (!(v >= 0.0 && v <= 1.0)) {
            in.corrupt("pixel outside [0, 1]");
        }
    }
    return d;
}

} // namespace

void SynthSpec::validate() const
{
    if (num_classes < 2) {
        throw ConfigError("SynthSpec: need at least 2 classes");
    }
    if (image_size == 0 || (channels != 1 && channels != 3)) {
        throw ConfigError("SynthSpec: image_size must be positive and channels 1 or 3");
    }
    if (!(noise_std >= 0.0)) {
        throw ConfigError("SynthSpec: noise_std must be non-negative");
    }
}

std::span<const double> Dataset::image(std::size_t i) const
{
    const std::size_t n = pixels_per_image();
    return std::span<const double>(pixels).subspan(i * n, n);
}

Tensor Dataset::images(std::span<const std::size_t> indices) const
{
    const std::size_t n = pixels_per_image();
    std::vector<double> v;
    v.reserve(indices.size() * n);
    for (std::size_t i : indices) {
        if (i >= size()) {
            throw std::out_of_range("Dataset::images: index out of range");
        }
        auto img = image(i);
        v.insert(v.end(), img.begin(), img.end());
    }
    return Tensor::from({indices.size(), image_size, image_size, channels}, std::move(v));
}

Tensor Dataset::images() const
{
    return Tensor::from({size(), image_size, image_size, channels}, pixels);
}

Labels Dataset::labels_at(std::span<const std::size_t> indices) const
{
    Labels out;
    out.reserve(indices.size());
    for (std::size_t i : indices) {
        out.push_back(labels.at(i));
    }
    return out;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const
{
    Dataset d;
    d.num_classes = num_classes;
    d.image_size = image_size;
    d.channels = channels;
    for (std::size_t i : indices) {
        auto img = image(i);
        d.pixels.insert(d.pixels.end(), img.begin(), img.end());
        d.labels.push_back(labels.at(i));
        d.placements.push_back(placements.at(i));
    }
    return d;
}

std::vector<double> render_pattern(const SynthSpec& spec, std::size_t cls, const Placement& where)
{
    const ClassPattern p = pattern_for(cls, spec.num_classes);
    const std::size_t s = spec.image_size;
    std::vector<double> img(s * s * spec.channels);
    for (std::size_t r = 0; r < s; ++r) {
        for (std::size_t c = 0; c < s; ++c) {
            const double t = pattern_value(p, static_cast<double>(c), static_cast<double>(r), where, static_cast<double>(s));
            for (std::size_t ch = 0; ch < spec.channels; ++ch) {
                double fg = p.fg[ch];
                double bg = p.bg[ch];
                if (spec.channels == 1) {
                    fg = 0.299 * p.fg[0] + 0.587 * p.fg[1] + 0.114 * p.fg[2];
                    bg = 0.299 * p.bg[0] + 0.587 * p.bg[1] + 0.114 * p.bg[2];
                }
                img[(r * s + c) * spec.channels + ch] = std::clamp(bg + (fg - bg) * t + where.brightness, 0.0, 1.0);
            }
        }
    }
    return img;
}

DataBundle generate(const SynthSpec& spec)
{
    spec.validate();
    DataBundle b;
    b.spec = spec;
    std::mt19937_64 train_rng(spec.seed * 2 + 1);
    std::mt19937_64 test_rng(spec.seed * 2 + 2);
    fill_split(spec, spec.train_per_class, train_rng, b.train);
    fill_split(spec, spec.test_per_class, test_rng, b.test);
    return b;
}

std::string to_string(ShiftKind kind)
{
    switch (kind) {
    case ShiftKind::value_jitter: return "value-jitter";
    case ShiftKind::channel_drop: return "channel-drop";
    case ShiftKind::background_swap: return "background-swap";
    }
    return "?";
}

ShiftKind parse_shift_kind(const std::string& text)
{
    for (auto k : {ShiftKind::value_jitter, ShiftKind::channel_drop, ShiftKind::background_swap}) {
        if (text == to_string(k)) {
            return k;
        }
    }
    throw ConfigError("unknown shift kind '" + text + "'");
}

Dataset apply_shift(const Dataset& data, const ShiftSpec& shift)
{
    if (!(shift.intensity >= 0.0 && shift.intensity <= 1.0)) {
        throw ConfigError("shift intensity must lie in [0, 1]");
    }
    Dataset out = data;
    const double s = shift.intensity;
    const std::size_t ch = data.channels;
    const std::size_t pixels = data.image_size * data.image_size;
    std::mt19937_64 rng(shift.seed ^ 0x5bd1e995ULL);
    std::uniform_real_distribution<double> sym(-1.0, 1.0);
    for (std::size_t i = 0; i < data.size(); ++i) {
        double* img = out.pixels.data() + i * data.pixels_per_image();
        switch (shift.kind) {
        case ShiftKind::value_jitter: {
            std::vector<double> gain(ch), offset(ch);
            for (std::size_t c = 0; c < ch; ++c) {
                gain[c] = 1.0 + s * sym(rng);
                offset[c] = 0.5 * s * sym(rng);
            }
            for (std::size_t p = 0; p < pixels; ++p) {
                for (std::size_t c = 0; c < ch; ++c) {
                    double& v = img[p * ch + c];
                    v = std::clamp(v * gain[c] + offset[c] + 0.5 * s * sym(rng), 0.0, 1.0);
                }
            }
            break;
        }
        case ShiftKind::channel_drop: {
            for (std::size_t p = 0; p < pixels; ++p) {
                double gray = 0.0;
                for (std::size_t c = 0; c < ch; ++c) {
                    gray += img[p * ch + c];
                }
                gray /= static_cast<double>(ch);
                for (std::size_t c = 0; c < ch; ++c) {
                    double& v = img[p * ch + c];
                    v = std::clamp((1.0 - s) * v + s * gray, 0.0, 1.0);
                }
            }
            break;
        }
        case ShiftKind::background_swap: {
            // Pixels darker than the image's median luminance count as background.
            std::vector<double> lum(pixels);
            for (std::size_t p = 0; p < pixels; ++p) {
                double l = 0.0;
                for (std::size_t c = 0; c < ch; ++c) {
                    l += img[p * ch + c];
                }
                lum[p] = l / static_cast<double>(ch);
            }
            std::vector<double> sorted = lum;
            std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(pixels / 2), sorted.end());
            const double median = sorted[pixels / 2];
            std::array<double, 3> c0{}, c1{};
            for (std::size_t c = 0; c < 3; ++c) {
                c0[c] = 0.5 + 0.5 * sym(rng);
                c1[c] = 0.5 + 0.5 * sym(rng);
            }
            for (std::size_t p = 0; p < pixels; ++p) {
                if (lum[p] >= median) {
                    continue;
                }
                const double t = static_cast<double>(p % data.image_size) / static_cast<double>(data.image_size);
                for (std::size_t c = 0; c < ch; ++c) {
                    double& v = img[p * ch + c];
                    const double bg = c0[c % 3] + (c1[c % 3] - c0[c % 3]) * t;
                    v = std::clamp(v + s * (bg - v), 0.0, 1.0);
                }
            }
            break;
        }
        }
    }
    return out;
}

double centroid_baseline_accuracy(const Dataset& train, const Dataset& test, std::size_t bins)
{
    const std::size_t ch = train.channels;
    auto features = [&](const Dataset& d, std::size_t i) {
        std::vector<double> h(bins * ch, 0.0);
        auto img = d.image(i);
        const double w = 1.0 / static_cast<double>(d.image_size * d.image_size);
        for (std::size_t p = 0; p < img.size(); ++p) {
            const std::size_t b = std::min(bins - 1, static_cast<std::size_t>(img[p] * static_cast<double>(bins)));
            h[(p % ch) * bins + b] += w;
        }
        return h;
    };
    std::vector<std::vector<double>> centroids(train.num_classes, std::vector<double>(bins * ch, 0.0));
    std::vector<double> counts(train.num_classes, 0.0);
    for (std::size_t i = 0; i < train.size(); ++i) {
        auto f = features(train, i);
        for (std::size_t k = 0; k < f.size(); ++k) {
            centroids[train.labels[i]][k] += f[k];
        }
        counts[train.labels[i]] += 1.0;
    }
    for (std::size_t c = 0; c < centroids.size(); ++c) {
        for (double& v : centroids[c]) {
            v /= std::max(1.0, counts[c]);
        }
    }
    std::size_t correct = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
        auto f = features(test, i);
        std::size_t best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < centroids.size(); ++c) {
            double dist = 0.0;
            for (std::size_t k = 0; k < f.size(); ++k) {
                dist += (f[k] - centroids[c][k]) * (f[k] - centroids[c][k]);
            }
            if (dist < best_d) {
                best_d = dist;
                best = c;
            }
        }
        correct += best == test.labels[i] ? 1 : 0;
    }
    return test.size() == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(test.size());
}

void save_bundle(const DataBundle& bundle, const std::filesystem::path& path)
{
    binio::write_atomically(path, [&](std::ostream& os) {
        os.write(kDataMagic, sizeof(kDataMagic));
        binio::put_u32(os, kDataVersion);
        const auto& s = bundle.spec;
        binio::put_u32(os, static_cast<std::uint32_t>(s.num_classes));
        binio::put_u32(os, static_cast<std::uint32_t>(s.image_size));
        binio::put_u32(os, static_cast<std::uint32_t>(s.channels));
        binio::put_u32(os, static_cast<std::uint32_t>(s.train_per_class));
        binio::put_u32(os, static_cast<std::uint32_t>(s.test_per_class));
        binio::put_f64(os, s.noise_std);
        binio::put_u64(os, s.seed);
        write_split(os, "train", bundle.train);
        write_split(os, "test", bundle.test);
    });
}

DataBundle load_bundle(const std::filesystem::path& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw ConfigError("cannot open dataset " + path.string());
    }
    binio::Reader in(is, "dataset " + path.string());
    unsigned char magic[8];
    in.bytes(magic, 8);
    if (!std::equal(magic, magic + 8, kDataMagic)) {
        in.corrupt("bad magic");
    }
    if (in.u32() != kDataVersion) {
        in.corrupt("unsupported version");
    }
    DataBundle b;
    b.spec.num_classes = in.u32();
    b.spec.image_size = in.u32();
    b.spec.channels = in.u32();
    b.spec.train_per_class = in.u32();
    b.spec.test_per_class = in.u32();
    b.spec.noise_std = in.f64();
    b.spec.seed = in.u64();
    if (b.spec.image_size > 4096 || b.spec.channels > 16 || b.spec.num_classes > 100000) {
        in.corrupt("implausible header");
    }
    b.train = read_split(in, b.spec, "train");
    b.test = read_split(in, b.spec, "test");
    if (!in.at_end()) {
        in.corrupt("trailing bytes");
    }
    return b;
}

} // namespace capt
