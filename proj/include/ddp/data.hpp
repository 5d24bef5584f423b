#pragma once

#include <filesystem>
#include <map>
#include <optional>

#include "ddp/model.hpp"

namespace ddp {

// Image in [0,1] before mean subtraction, paired with a per-pixel class map.
struct Sample {
    Tensor image;  // (1,3,H,W)
    LabelMap label;
    std::string name;
};

// --- image codecs (binary PPM P6 / PGM P5) --------------------------------

Tensor read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Tensor& image);

LabelMap read_label_pgm(const std::filesystem::path& path);
void write_label_pgm(const std::filesystem::path& path, const LabelMap& label);

// Arbitrary-size resampling used by augmentation and preprocessing.
Tensor resize_bilinear(const Tensor& image, std::int64_t out_h, std::int64_t out_w);
LabelMap resize_nearest(const LabelMap& label, std::int64_t out_h, std::int64_t out_w);

// --- datasets --------------------------------------------------------------

// Manifest: UTF-8 text, one sample per line, tab-separated image and label
// paths (relative paths resolve against the manifest's directory).
std::vector<Sample> load_manifest(const std::filesystem::path& manifest);

// Directory layout: images/<stem>.ppm paired with labels/<stem>.pgm.
std::vector<Sample> load_dataset_dir(const std::filesystem::path& root);

// Loads either a manifest file or a dataset directory.
std::vector<Sample> load_dataset(const std::filesystem::path& root);

// Synthetic desk-scale dataset: colored rectangles and ellipses over a
// textured background; label = shape class per pixel. Deterministic per seed.
// Writes images/, labels/ and manifest.txt under `root`.
void gen_synthetic(const std::filesystem::path& root, int count, std::int64_t h, std::int64_t w,
                   int classes, std::uint64_t seed);

Tensor dataset_mean(const std::vector<Sample>& samples);  // (1,3,1,1)

// --- metrics ---------------------------------------------------------------

// C x C counts; rows = ground truth, cols = prediction. Ignore-labeled pixels
// are never accumulated.
struct ConfusionMatrix {
    int classes = 0;
    std::vector<std::int64_t> counts;

    explicit ConfusionMatrix(int c)
        : classes(c), counts(static_cast<std::size_t>(c) * static_cast<std::size_t>(c), 0) {}

    std::int64_t& at(int truth, int pred) {
        return counts[static_cast<std::size_t>(truth) * classes + pred];
    }
    std::int64_t at(int truth, int pred) const {
        return counts[static_cast<std::size_t>(truth) * classes + pred];
    }
    std::int64_t total() const {
        std::int64_t t = 0;
        for (auto v : counts) t += v;
        return t;
    }
};

void accumulate(ConfusionMatrix& cm, const LabelMap& truth, const LabelMap& pred,
                std::int32_t ignore_label = kIgnoreLabel);

struct IoUResult {
    std::vector<double> per_class;     // NaN where undefined
    std::vector<bool> defined;
    double mean = 0.0;                 // over defined classes only
};

IoUResult miou(const ConfusionMatrix& cm);

LabelMap argmax_labels(const Tensor& logits);  // (1,C,H,W) -> per-pixel argmax

// --- checkpoints -----------------------------------------------------------

// Little-endian binary: magic "DDPNETCK", u32 version, u32 spec-text length +
// bytes, then records of (u32 name length + bytes, u8 dtype, u32 rank,
// extents, raw tensor bytes). Round trips are bitwise.
constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const Model& model,
                     const std::map<std::string, Tensor>* extra = nullptr);
Model load_checkpoint(const std::filesystem::path& path,
                      std::map<std::string, Tensor>* extra = nullptr);

// --- visualization ---------------------------------------------------------

// Built-in 19-color palette (label id -> RGB); ids beyond the table cycle.
Tensor colorize_labels(const LabelMap& label);

}  // namespace ddp
