#include "d3/poison.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace d3 {

std::string trigger_kind(const TriggerSpec& trigger) {
    if (std::holds_alternative<PatchTrigger>(trigger)) return "patch";
    if (std::holds_alternative<BlendedTrigger>(trigger)) return "blended";
    return "sinusoidal";
}

std::size_t PoisonedDataset::poisoned_count() const {
    std::size_t n = 0;
    for (std::uint8_t m : mask) n += m;
    return n;
}

namespace {

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

struct TriggerApplier {
    const Tensor& image;

    Tensor operator()(const PatchTrigger& t) const {
        const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
        const std::size_t ph = t.pattern.dim(1), pw = t.pattern.dim(2);
        if (t.pattern.dim(0) != c || t.row + ph > h || t.col + pw > w) {
            throw DimensionError("patch " + Tensor::shape_string(t.pattern.shape()) + " at (" +
                                 std::to_string(t.row) + "," + std::to_string(t.col) +
                                 ") does not fit image " + Tensor::shape_string(image.shape()));
        }
        Tensor out = image;
        for (std::size_t ch = 0; ch < c; ++ch) {
            for (std::size_t y = 0; y < ph; ++y) {
                for (std::size_t x = 0; x < pw; ++x) {
                    double v = t.pattern[(ch * ph + y) * pw + x];
                    out.set((ch * h + t.row + y) * w + t.col + x, clamp01(v));
                }
            }
        }
        return out;
    }

    Tensor operator()(const BlendedTrigger& t) const {
        if (!t.pattern.same_shape(image)) {
            throw DimensionError("blend pattern " + Tensor::shape_string(t.pattern.shape()) +
                                 " does not match image " + Tensor::shape_string(image.shape()));
        }
        if (t.alpha < 0.0 || t.alpha > 1.0) {
            throw ContractError("blend alpha must be in [0,1], got " + std::to_string(t.alpha));
        }
        Tensor out = image;
        if (t.alpha == 0.0) return out;
        for (std::size_t i = 0; i < out.numel(); ++i) {
            out.set(i, clamp01((1.0 - t.alpha) * image[i] + t.alpha * t.pattern[i]));
        }
        return out;
    }

    Tensor operator()(const SinusoidalTrigger& t) const {
        if (t.amplitude < 0.0) throw ContractError("sinusoidal amplitude must be >= 0");
        if (t.frequency < 1) throw ContractError("sinusoidal frequency must be >= 1");
        Tensor out = image;
        if (t.amplitude == 0.0) return out;
        const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
        constexpr double two_pi = 6.283185307179586476925286766559;
        for (std::size_t j = 0; j < w; ++j) {
            double delta = t.amplitude *
                           std::sin(two_pi * static_cast<double>(j) * t.frequency /
                                    static_cast<double>(w));
            for (std::size_t ch = 0; ch < c; ++ch) {
                for (std::size_t i = 0; i < h; ++i) {
                    std::size_t idx = (ch * h + i) * w + j;
                    out.set(idx, clamp01(image[idx] + delta));
                }
            }
        }
        return out;
    }
};

void check_image(const Tensor& image) {
    if (image.rank() != 3) {
        throw DimensionError("apply_trigger expects an image [C,H,W], got " +
                             Tensor::shape_string(image.shape()));
    }
}

} // namespace

Tensor apply_trigger(const Tensor& image, const TriggerSpec& trigger) {
    check_image(image);
    return std::visit(TriggerApplier{image}, trigger);
}

PoisonedDataset poison_train(const Dataset& ds, const AttackSpec& attack, Rng& rng) {
    if (attack.poison_ratio < 0.0 || attack.poison_ratio > 1.0) {
        throw ContractError("poison ratio must be in [0,1], got " +
                            std::to_string(attack.poison_ratio));
    }
    if (attack.target_label < 0 || attack.target_label >= ds.num_classes()) {
        throw ContractError("target label " + std::to_string(attack.target_label) +
                            " outside dataset classes [0, " + std::to_string(ds.num_classes()) +
                            ")");
    }
    const std::size_t n = ds.size();
    const std::size_t count =
        static_cast<std::size_t>(std::llround(attack.poison_ratio * static_cast<double>(n)));

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);

    PoisonedDataset out;
    out.dataset = ds;
    out.dataset.name = ds.name + "-poisoned";
    out.mask.assign(n, 0);
    out.attack = attack;

    std::size_t per = ds.images.numel() / std::max<std::size_t>(n, 1);
    for (std::size_t i = 0; i < count; ++i) {
        std::size_t idx = order[i];
        Tensor poisoned = apply_trigger(ds.image(idx), attack.trigger);
        std::copy(poisoned.data(), poisoned.data() + per, out.dataset.images.data() + idx * per);
        out.dataset.labels[idx] = attack.target_label;
        out.mask[idx] = 1;
    }
    return out;
}

Dataset build_eval_poisoned(const Dataset& testset, const AttackSpec& attack) {
    if (testset.size() == 0) throw ContractError("build_eval_poisoned: empty test set");
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < testset.size(); ++i) {
        if (testset.labels[i] != attack.target_label) keep.push_back(i);
    }
    if (keep.empty()) {
        throw ContractError("build_eval_poisoned: every test sample already carries the target "
                            "label " +
                            std::to_string(attack.target_label));
    }
    auto shape = testset.image_shape();
    Tensor images({keep.size(), shape[0], shape[1], shape[2]}, testset.images.precision());
    std::size_t per = shape[0] * shape[1] * shape[2];
    for (std::size_t i = 0; i < keep.size(); ++i) {
        Tensor poisoned = apply_trigger(testset.image(keep[i]), attack.trigger);
        std::copy(poisoned.data(), poisoned.data() + per, images.data() + i * per);
    }
    Dataset out;
    out.images = std::move(images);
    out.labels.assign(keep.size(), attack.target_label);
    out.name = testset.name + "-trigger";
    return out;
}

AttackSpec default_patch_attack(const std::vector<std::size_t>& image_shape, int target_label,
                                double ratio) {
    const std::size_t c = image_shape[0], h = image_shape[1], w = image_shape[2];
    PatchTrigger patch;
    patch.row = h - 3;
    patch.col = w - 3;
    patch.pattern = Tensor::from_data({c, 3, 3}, std::vector<double>(c * 9, 1.0));
    return AttackSpec{TriggerSpec{std::move(patch)}, target_label, ratio};
}

AttackSpec default_blended_attack(const std::vector<std::size_t>& image_shape, int target_label,
                                  double ratio, Rng& rng, double alpha) {
    BlendedTrigger blend;
    blend.alpha = alpha;
    Tensor pattern({image_shape[0], image_shape[1], image_shape[2]});
    for (std::size_t i = 0; i < pattern.numel(); ++i) pattern.set(i, rng.next_double());
    blend.pattern = std::move(pattern);
    return AttackSpec{TriggerSpec{std::move(blend)}, target_label, ratio};
}

AttackSpec default_sinusoidal_attack(int target_label, double ratio) {
    return AttackSpec{TriggerSpec{SinusoidalTrigger{0.08, 6}}, target_label, ratio};
}

} // namespace d3
