#include "d3/dataio.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include <json.hpp>

namespace d3 {

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

std::vector<std::size_t> Dataset::image_shape() const {
    if (images.rank() != 4) {
        throw ContractError("dataset images must be [N,C,H,W], got " +
                            Tensor::shape_string(images.shape()));
    }
    return {images.dim(1), images.dim(2), images.dim(3)};
}

Tensor Dataset::image(std::size_t i) const {
    if (i >= size()) throw IndexError("sample index " + std::to_string(i) + " out of range");
    std::size_t per = images.numel() / images.dim(0);
    std::vector<double> vals(images.data() + i * per, images.data() + (i + 1) * per);
    return Tensor::from_data(image_shape(), std::move(vals), images.precision());
}

int Dataset::num_classes() const {
    int k = 0;
    for (int l : labels) k = std::max(k, l + 1);
    return k;
}

std::pair<Tensor, std::vector<int>> make_batch(const Dataset& ds,
                                               const std::vector<std::size_t>& indices) {
    auto shape = ds.image_shape();
    std::vector<std::size_t> bshape = {indices.size(), shape[0], shape[1], shape[2]};
    Tensor batch(bshape, ds.images.precision());
    std::vector<int> labels(indices.size());
    std::size_t per = ds.images.numel() / ds.images.dim(0);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        std::size_t src = indices[i];
        if (src >= ds.size()) throw IndexError("batch index out of range");
        std::copy(ds.images.data() + src * per, ds.images.data() + (src + 1) * per,
                  batch.data() + i * per);
        labels[i] = ds.labels[src];
    }
    return {std::move(batch), std::move(labels)};
}

// ---------------------------------------------------------------------------
// IDX files
// ---------------------------------------------------------------------------

namespace {

constexpr std::uint32_t kIdxImagesMagic = 0x00000803u;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801u;

std::uint32_t read_u32_be(std::istream& is, const std::filesystem::path& path,
                          std::size_t offset) {
    unsigned char buf[4];
    is.read(reinterpret_cast<char*>(buf), 4);
    if (!is) {
        throw FormatError(path.string() + ": truncated at byte offset " + std::to_string(offset));
    }
    return (std::uint32_t(buf[0]) << 24) | (std::uint32_t(buf[1]) << 16) |
           (std::uint32_t(buf[2]) << 8) | std::uint32_t(buf[3]);
}

void write_u32_be(std::ostream& os, std::uint32_t v) {
    unsigned char buf[4] = {static_cast<unsigned char>(v >> 24),
                            static_cast<unsigned char>(v >> 16),
                            static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    os.write(reinterpret_cast<const char*>(buf), 4);
}

} // namespace

Dataset load_idx(const std::filesystem::path& images_path,
                 const std::filesystem::path& labels_path, Precision precision) {
    std::ifstream img(images_path, std::ios::binary);
    if (!img) throw FormatError("cannot open image file " + images_path.string());
    std::uint32_t magic = read_u32_be(img, images_path, 0);
    if (magic != kIdxImagesMagic) {
        throw FormatError(images_path.string() + ": bad image magic at byte offset 0 (expected 0x00000803)");
    }
    std::uint32_t n = read_u32_be(img, images_path, 4);
    std::uint32_t rows = read_u32_be(img, images_path, 8);
    std::uint32_t cols = read_u32_be(img, images_path, 12);
    std::size_t pixel_count = std::size_t(n) * rows * cols;
    std::vector<unsigned char> raw(pixel_count);
    img.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(pixel_count));
    if (static_cast<std::size_t>(img.gcount()) != pixel_count) {
        throw FormatError(images_path.string() + ": truncated at byte offset " +
                          std::to_string(16 + img.gcount()));
    }

    std::ifstream lbl(labels_path, std::ios::binary);
    if (!lbl) throw FormatError("cannot open label file " + labels_path.string());
    std::uint32_t lmagic = read_u32_be(lbl, labels_path, 0);
    if (lmagic != kIdxLabelsMagic) {
        throw FormatError(labels_path.string() + ": bad label magic at byte offset 0 (expected 0x00000801)");
    }
    std::uint32_t ln = read_u32_be(lbl, labels_path, 4);
    if (ln != n) {
        throw FormatError("image/label count mismatch: " + std::to_string(n) + " images in " +
                          images_path.string() + " vs " + std::to_string(ln) + " labels in " +
                          labels_path.string());
    }
    std::vector<unsigned char> raw_labels(ln);
    lbl.read(reinterpret_cast<char*>(raw_labels.data()), ln);
    if (static_cast<std::size_t>(lbl.gcount()) != ln) {
        throw FormatError(labels_path.string() + ": truncated at byte offset " +
                          std::to_string(8 + lbl.gcount()));
    }

    if (n == 0) throw FormatError(images_path.string() + ": file contains no images");

    Dataset ds;
    Tensor images({n, 1, rows, cols}, precision);
    for (std::size_t i = 0; i < pixel_count; ++i) {
        images.data()[i] = round_to(precision, raw[i] / 255.0);
    }
    ds.images = std::move(images);
    ds.labels.assign(raw_labels.begin(), raw_labels.end());
    ds.name = images_path.stem().string();
    return ds;
}

void write_idx(const Dataset& ds, const std::filesystem::path& images_path,
               const std::filesystem::path& labels_path) {
    auto shape = ds.image_shape();
    if (shape[0] != 1) {
        throw ContractError("write_idx supports single-channel images, got C=" +
                            std::to_string(shape[0]));
    }
    std::ofstream img(images_path, std::ios::binary | std::ios::trunc);
    if (!img) throw FormatError("cannot write image file " + images_path.string());
    write_u32_be(img, kIdxImagesMagic);
    write_u32_be(img, static_cast<std::uint32_t>(ds.size()));
    write_u32_be(img, static_cast<std::uint32_t>(shape[1]));
    write_u32_be(img, static_cast<std::uint32_t>(shape[2]));
    std::vector<unsigned char> raw(ds.images.numel());
    for (std::size_t i = 0; i < raw.size(); ++i) {
        double v = std::clamp(ds.images[i], 0.0, 1.0);
        raw[i] = static_cast<unsigned char>(std::lround(v * 255.0));
    }
    img.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!img) throw FormatError("failed writing " + images_path.string());

    std::ofstream lbl(labels_path, std::ios::binary | std::ios::trunc);
    if (!lbl) throw FormatError("cannot write label file " + labels_path.string());
    write_u32_be(lbl, kIdxLabelsMagic);
    write_u32_be(lbl, static_cast<std::uint32_t>(ds.size()));
    std::vector<unsigned char> raw_labels(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        raw_labels[i] = static_cast<unsigned char>(ds.labels[i]);
    }
    lbl.write(reinterpret_cast<const char*>(raw_labels.data()),
              static_cast<std::streamsize>(raw_labels.size()));
    if (!lbl) throw FormatError("failed writing " + labels_path.string());
}

// ---------------------------------------------------------------------------
// Synthetic blobs
// ---------------------------------------------------------------------------

Dataset synth_blobs(std::size_t num_classes, std::size_t per_class,
                    const std::vector<std::size_t>& image_shape, double separation, Rng& rng,
                    Precision precision) {
    if (num_classes < 2) throw ContractError("synth_blobs requires num_classes >= 2");
    if (per_class < 1) throw ContractError("synth_blobs requires per_class >= 1");
    if (image_shape.size() != 3) {
        throw ContractError("synth_blobs expects image_shape [C,H,W]");
    }
    std::size_t pixels = image_shape[0] * image_shape[1] * image_shape[2];

    // Random binary templates are near-orthogonal after centering; separation
    // controls the per-pixel contrast between classes.
    std::vector<std::vector<double>> templates(num_classes, std::vector<double>(pixels));
    for (std::size_t k = 0; k < num_classes; ++k) {
        for (std::size_t p = 0; p < pixels; ++p) {
            double bit = rng.next_below(2) ? 0.5 : -0.5;
            templates[k][p] = 0.5 + separation * bit;
        }
    }

    std::size_t n = num_classes * per_class;
    Tensor images({n, image_shape[0], image_shape[1], image_shape[2]}, precision);
    std::vector<int> labels(n);
    std::size_t idx = 0;
    for (std::size_t k = 0; k < num_classes; ++k) {
        for (std::size_t s = 0; s < per_class; ++s) {
            double* dst = images.data() + idx * pixels;
            for (std::size_t p = 0; p < pixels; ++p) {
                double v = templates[k][p] + 0.1 * rng.next_normal();
                dst[p] = round_to(precision, std::clamp(v, 0.0, 1.0));
            }
            labels[idx] = static_cast<int>(k);
            ++idx;
        }
    }
    Dataset ds;
    ds.images = std::move(images);
    ds.labels = std::move(labels);
    ds.name = "synth_blobs";
    return ds;
}

// ---------------------------------------------------------------------------
// Splitting / subsampling
// ---------------------------------------------------------------------------

namespace {

Dataset take_indices(const Dataset& ds, const std::vector<std::size_t>& indices,
                     const std::string& name) {
    auto [images, labels] = make_batch(ds, indices);
    Dataset out;
    out.images = std::move(images);
    out.labels = std::move(labels);
    out.name = name;
    return out;
}

} // namespace

std::pair<Dataset, Dataset> split_reserved(const Dataset& ds, double fraction, Rng& rng) {
    if (!(fraction > 0.0 && fraction < 1.0)) {
        throw ContractError("split fraction must be in (0,1), got " + std::to_string(fraction));
    }
    std::size_t n = ds.size();
    std::size_t total = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
    if (total == 0) {
        throw ContractError("split fraction " + std::to_string(fraction) + " of " +
                            std::to_string(n) + " samples reserves nothing");
    }

    int k = ds.num_classes();
    std::vector<std::vector<std::size_t>> by_class(k);
    for (std::size_t i = 0; i < n; ++i) by_class[ds.labels[i]].push_back(i);

    // Proportional quota per class; leftover seats go to the lowest classes.
    std::vector<std::size_t> quota(k);
    std::size_t assigned = 0;
    for (int c = 0; c < k; ++c) {
        quota[c] = total * by_class[c].size() / n;
        assigned += quota[c];
    }
    for (int c = 0; assigned < total && c < k; ++c) {
        if (quota[c] < by_class[c].size()) {
            ++quota[c];
            ++assigned;
        }
    }
    if (assigned != total) {
        throw ContractError("split could not reserve " + std::to_string(total) + " samples");
    }

    std::vector<char> reserved_mask(n, 0);
    for (int c = 0; c < k; ++c) {
        std::vector<std::size_t> pool = by_class[c];
        rng.shuffle(pool);
        for (std::size_t i = 0; i < quota[c]; ++i) reserved_mask[pool[i]] = 1;
    }

    std::vector<std::size_t> rest_idx, reserved_idx;
    for (std::size_t i = 0; i < n; ++i) {
        (reserved_mask[i] ? reserved_idx : rest_idx).push_back(i);
    }
    return {take_indices(ds, rest_idx, ds.name), take_indices(ds, reserved_idx, ds.name + "-reserved")};
}

Dataset subsample(const Dataset& ds, std::size_t count, Rng& rng) {
    if (count >= ds.size()) return ds;
    std::vector<std::size_t> idx(ds.size());
    std::iota(idx.begin(), idx.end(), 0);
    rng.shuffle(idx);
    idx.resize(count);
    std::sort(idx.begin(), idx.end());
    return take_indices(ds, idx, ds.name);
}

// ---------------------------------------------------------------------------
// Checkpoints (D3CP)
// ---------------------------------------------------------------------------

namespace {

constexpr char kCkptMagic[4] = {'D', '3', 'C', 'P'};
constexpr std::uint32_t kCkptVersion = 1;

void write_u16_le(std::ostream& os, std::uint16_t v) {
    unsigned char buf[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
    os.write(reinterpret_cast<const char*>(buf), 2);
}

void write_u32_le(std::ostream& os, std::uint32_t v) {
    unsigned char buf[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                            static_cast<unsigned char>(v >> 16),
                            static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(buf), 4);
}

void write_u64_le(std::ostream& os, std::uint64_t v) {
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(buf), 8);
}

struct Reader {
    std::ifstream is;
    std::filesystem::path path;
    std::size_t offset = 0;

    void read(void* dst, std::size_t count) {
        is.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(count));
        if (static_cast<std::size_t>(is.gcount()) != count) {
            throw FormatError(path.string() + ": truncated at byte offset " +
                              std::to_string(offset + static_cast<std::size_t>(is.gcount())));
        }
        offset += count;
    }

    std::uint16_t u16() {
        unsigned char b[2];
        read(b, 2);
        return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
    }

    std::uint32_t u32() {
        unsigned char b[4];
        read(b, 4);
        return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
               (std::uint32_t(b[3]) << 24);
    }

    std::uint64_t u64() {
        unsigned char b[8];
        read(b, 8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
        return v;
    }
};

} // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot write checkpoint " + path.string());
    os.write(kCkptMagic, 4);
    write_u32_le(os, kCkptVersion);

    nlohmann::json meta;
    meta["arch"] = ckpt.meta.arch;
    meta["seed"] = ckpt.meta.seed;
    meta["stage"] = ckpt.meta.stage;
    std::string meta_text = meta.dump();
    write_u32_le(os, static_cast<std::uint32_t>(meta_text.size()));
    os.write(meta_text.data(), static_cast<std::streamsize>(meta_text.size()));

    write_u32_le(os, static_cast<std::uint32_t>(ckpt.params.size()));
    for (const auto& [name, t] : ckpt.params) {
        write_u16_le(os, static_cast<std::uint16_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        os.put(static_cast<char>(t.precision()));
        os.put(static_cast<char>(t.rank()));
        for (std::size_t d : t.shape()) write_u32_le(os, static_cast<std::uint32_t>(d));
        if (t.precision() == Precision::f32) {
            for (std::size_t i = 0; i < t.numel(); ++i) {
                float f = static_cast<float>(t[i]);
                write_u32_le(os, std::bit_cast<std::uint32_t>(f));
            }
        } else {
            for (std::size_t i = 0; i < t.numel(); ++i) {
                write_u64_le(os, std::bit_cast<std::uint64_t>(t[i]));
            }
        }
    }
    if (!os) throw FormatError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    Reader r;
    r.path = path;
    r.is.open(path, std::ios::binary);
    if (!r.is) throw FormatError("cannot open checkpoint " + path.string());

    char magic[4];
    r.read(magic, 4);
    if (std::memcmp(magic, kCkptMagic, 4) != 0) {
        throw FormatError(path.string() + ": bad magic (expected \"D3CP\")");
    }
    std::uint32_t version = r.u32();
    if (version != kCkptVersion) {
        throw FormatError(path.string() + ": unsupported version " + std::to_string(version) +
                          " (expected " + std::to_string(kCkptVersion) + ")");
    }

    std::uint32_t meta_len = r.u32();
    std::string meta_text(meta_len, '\0');
    r.read(meta_text.data(), meta_len);
    nlohmann::json meta = nlohmann::json::parse(meta_text, nullptr, false);
    if (meta.is_discarded() || !meta.is_object()) {
        throw FormatError(path.string() + ": invalid metadata JSON");
    }

    Checkpoint ckpt;
    ckpt.meta.arch = meta.value("arch", "");
    ckpt.meta.seed = meta.value("seed", std::uint64_t(0));
    ckpt.meta.stage = meta.value("stage", "");

    std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        std::uint16_t name_len = r.u16();
        std::string name(name_len, '\0');
        r.read(name.data(), name_len);
        unsigned char dtype = 0, ndim = 0;
        r.read(&dtype, 1);
        r.read(&ndim, 1);
        if (dtype != 1 && dtype != 2) {
            throw FormatError(path.string() + ": unknown dtype " + std::to_string(dtype) +
                              " for tensor '" + name + "'");
        }
        std::vector<std::size_t> shape(ndim);
        std::size_t numel = 1;
        for (unsigned char d = 0; d < ndim; ++d) {
            shape[d] = r.u32();
            numel *= shape[d];
        }
        std::vector<double> values(numel);
        if (dtype == 1) {
            for (std::size_t j = 0; j < numel; ++j) {
                values[j] = static_cast<double>(std::bit_cast<float>(r.u32()));
            }
        } else {
            for (std::size_t j = 0; j < numel; ++j) {
                values[j] = std::bit_cast<double>(r.u64());
            }
        }
        ckpt.params.add(std::move(name),
                        Tensor::from_data(std::move(shape), std::move(values),
                                          dtype == 1 ? Precision::f32 : Precision::f64));
    }
    return ckpt;
}

Model model_from_checkpoint(const Checkpoint& ckpt, const std::vector<std::size_t>& input_shape) {
    if (ckpt.params.empty()) {
        throw ContractError("checkpoint has no parameters to rebuild a model from");
    }
    const Tensor& last = ckpt.params.items().back().second;
    if (last.rank() != 1) {
        throw ContractError("checkpoint does not end with a bias vector");
    }
    std::size_t num_classes = last.dim(0);
    Precision prec = last.precision();
    Rng scratch(0);
    Model model = make_model(ckpt.meta.arch, input_shape, num_classes, scratch, prec);
    load_params(model, ckpt.params);
    return model;
}

} // namespace d3
