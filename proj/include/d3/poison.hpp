#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "d3/dataio.hpp"
#include "d3/tensor.hpp"

namespace d3 {

/// Fixed patch pasted over the image at (row, col); pattern is [C,h,w].
struct PatchTrigger {
    std::size_t row = 0;
    std::size_t col = 0;
    Tensor pattern;
};

/// Full-image alpha blend: (1-alpha)*x + alpha*pattern, pattern is [C,H,W].
struct BlendedTrigger {
    Tensor pattern;
    double alpha = 0.1;
};

/// Horizontal sinusoid added to every row:
/// x(c,i,j) + amplitude * sin(2*pi * j * frequency / W).
struct SinusoidalTrigger {
    double amplitude = 0.08;
    int frequency = 6;
};

using TriggerSpec = std::variant<PatchTrigger, BlendedTrigger, SinusoidalTrigger>;

std::string trigger_kind(const TriggerSpec& trigger);

struct AttackSpec {
    TriggerSpec trigger;
    int target_label = 0;
    double poison_ratio = 0.1;
};

struct PoisonedDataset {
    Dataset dataset;
    std::vector<std::uint8_t> mask; // 1 where the sample was poisoned
    AttackSpec attack;

    std::size_t poisoned_count() const;
};

/// Apply a trigger to one image [C,H,W]; output pixels are clamped to [0,1].
/// Pure function, the input is left untouched.
Tensor apply_trigger(const Tensor& image, const TriggerSpec& trigger);

/// Poison round(ratio*N) samples chosen uniformly without replacement (all
/// classes eligible, including the target): trigger applied, label overwritten.
PoisonedDataset poison_train(const Dataset& ds, const AttackSpec& attack, Rng& rng);

/// ASR measurement set: drop samples whose true label already equals the
/// target, apply the trigger to the rest and relabel them to the target.
Dataset build_eval_poisoned(const Dataset& testset, const AttackSpec& attack);

/// Stock attack shapes at desk scale. The blended pattern is drawn once from
/// the given rng so a fixed seed pins the trigger.
AttackSpec default_patch_attack(const std::vector<std::size_t>& image_shape, int target_label,
                                double ratio);
AttackSpec default_blended_attack(const std::vector<std::size_t>& image_shape, int target_label,
                                  double ratio, Rng& rng, double alpha = 0.1);
AttackSpec default_sinusoidal_attack(int target_label, double ratio);

} // namespace d3
