#pragma once

// Procedural multi-class image data with class-token captions, plus
// label-preserving distribution shifts.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "capt/head.hpp"
#include "capt/tensor.hpp"

namespace capt {

struct SynthSpec {
    std::size_t num_classes = 8;
    std::size_t image_size = 16;
    std::size_t channels = 3;
    std::size_t train_per_class = 200;
    std::size_t test_per_class = 100;
    double noise_std = 0.05;
    std::uint64_t seed = 0;

    void validate() const;
};

// Per-sample rendering parameters: pattern phase / blob centre and a global
// brightness offset. With noise_std = 0 an image is a pure function of its
// class and placement.
struct Placement {
    double shift_x = 0.0;
    double shift_y = 0.0;
    double brightness = 0.0;
    bool operator==(const Placement&) const = default;
};

struct Dataset {
    std::size_t num_classes = 0;
    std::size_t image_size = 0;
    std::size_t channels = 0;
    std::vector<double> pixels; // [N, H, W, C] row-major, values in [0, 1]
    Labels labels;
    std::vector<Placement> placements;

    std::size_t size() const { return labels.size(); }
    std::size_t pixels_per_image() const { return image_size * image_size * channels; }
    std::span<const double> image(std::size_t i) const;
    // [len(indices), H, W, C] batch tensor.
    Tensor images(std::span<const std::size_t> indices) const;
    Tensor images() const;
    Labels labels_at(std::span<const std::size_t> indices) const;
    Dataset subset(std::span<const std::size_t> indices) const;
    bool operator==(const Dataset&) const = default;
};

struct DataBundle {
    SynthSpec spec;
    Dataset train;
    Dataset test;
    bool operator==(const DataBundle& o) const { return train == o.train && test == o.test; }
};

// Renders one noise-free image of `cls` at `where`.
std::vector<double> render_pattern(const SynthSpec& spec, std::size_t cls, const Placement& where);

DataBundle generate(const SynthSpec& spec);

enum class ShiftKind { value_jitter, channel_drop, background_swap };

std::string to_string(ShiftKind kind);
ShiftKind parse_shift_kind(const std::string& text);

struct ShiftSpec {
    ShiftKind kind = ShiftKind::value_jitter;
    double intensity = 0.0; // [0, 1]; 0 is the identity
    std::uint64_t seed = 0;
};

Dataset apply_shift(const Dataset& data, const ShiftSpec& shift);

// Nearest-centroid classifier on per-channel pixel histograms; the task
// learnability floor. Fits on `train`, returns accuracy on `test`.
double centroid_baseline_accuracy(const Dataset& train, const Dataset& test, std::size_t bins = 8);

void save_bundle(const DataBundle& bundle, const std::filesystem::path& path);
// Throws ConfigError on truncated or corrupt files.
DataBundle load_bundle(const std::filesystem::path& path);

} // namespace capt
