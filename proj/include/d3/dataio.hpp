#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "d3/nn.hpp"
#include "d3/tensor.hpp"

namespace d3 {

/// Labeled image set. Pixel values live in [0,1]; images are [N,C,H,W].
struct Dataset {
    Tensor images;
    std::vector<int> labels;
    std::string name;

    std::size_t size() const { return labels.size(); }
    std::vector<std::size_t> image_shape() const;
    Tensor image(std::size_t i) const;
    int num_classes() const;
};

/// Gather images/labels at the given sample indices into one batch.
std::pair<Tensor, std::vector<int>> make_batch(const Dataset& ds,
                                               const std::vector<std::size_t>& indices);

/// Load an IDX image/label file pair (big-endian headers, magic 0x00000803
/// for images and 0x00000801 for labels). Pixel bytes are scaled by 1/255.
Dataset load_idx(const std::filesystem::path& images_path,
                 const std::filesystem::path& labels_path,
                 Precision precision = Precision::f64);

/// Write a single-channel dataset as an IDX pair; pixels are rounded to bytes.
void write_idx(const Dataset& ds, const std::filesystem::path& images_path,
               const std::filesystem::path& labels_path);

/// Synthetic per-class blob dataset: class k images are Gaussian noise
/// (sigma 0.1) around a fixed random binary template scaled by `separation`,
/// clamped to [0,1]. Labels are balanced, grouped by class.
Dataset synth_blobs(std::size_t num_classes, std::size_t per_class,
                    const std::vector<std::size_t>& image_shape, double separation, Rng& rng,
                    Precision precision = Precision::f64);

/// Stratified split: `reserved` holds round(fraction*N) samples, proportional
/// per class with the remainder assigned to the lowest class indices; `rest`
/// is the disjoint complement. Both preserve the original sample order.
std::pair<Dataset, Dataset> split_reserved(const Dataset& ds, double fraction, Rng& rng);

/// Uniform subsample of `count` samples without replacement, preserving order.
Dataset subsample(const Dataset& ds, std::size_t count, Rng& rng);

struct CheckpointMeta {
    std::string arch;
    std::uint64_t seed = 0;
    std::string stage;
};

/// Named parameter tensors plus metadata; round-trips bit-exactly through the
/// D3CP file format (see save_checkpoint).
struct Checkpoint {
    ParamSet params;
    CheckpointMeta meta;
};

/// D3CP binary format, little-endian throughout:
///   magic "D3CP" | u32 version=1 | u32 json length + UTF-8 metadata JSON |
///   u32 tensor count | per tensor: u16 name length, name, u8 dtype
///   (1=f32, 2=f64), u8 ndim, ndim x u32 dims, raw row-major values.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Rebuild a model from a checkpoint: architecture from the metadata, output
/// width from the final bias tensor, parameters loaded in place.
Model model_from_checkpoint(const Checkpoint& ckpt, const std::vector<std::size_t>& input_shape);

} // namespace d3
