#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "d3/defense.hpp"
#include "d3/poison.hpp"
#include "d3/train.hpp"

namespace d3 {

struct DatasetConfig {
    std::string source = "synth"; // "synth" | "idx"

    // idx
    std::filesystem::path train_images;
    std::filesystem::path train_labels;
    std::filesystem::path test_images;
    std::filesystem::path test_labels;

    // synth
    std::size_t num_classes = 10;
    std::size_t per_class = 1000;
    std::size_t test_per_class = 100;
    std::vector<std::size_t> image_shape = {1, 16, 16};
    double separation = 0.9;

    std::optional<std::size_t> train_subsample;
    double reserved_fraction = 0.05;
};

struct TriggerConfig {
    std::string kind = "patch"; // "patch" | "blended" | "sinusoidal"

    // patch
    std::optional<std::vector<std::size_t>> top_left; // row, col; default bottom-right
    std::vector<std::size_t> size = {3, 3};
    double value = 1.0;

    // blended
    double alpha = 0.1;

    // sinusoidal
    double amplitude = 0.08;
    int frequency = 6;
};

struct AttackConfig {
    TriggerConfig trigger;
    int target_label = 0;
    double poison_ratio = 0.1;
};

struct DefenseConfig {
    std::string kind = "d3"; // "ft" | "ft-sam" | "d3"
    SgdConfig optimizer{0.01, 0.9, 0.0, 20, 64, 0};
    std::optional<double> sam_rho; // ft-sam
    // d3
    double epsilon = 0.1;
    double lambda = 10.0;
    std::string selector; // glob over parameter names; empty => dense weights
    double smoothing_delta = 1e-8;
};

struct ExperimentConfig {
    std::uint64_t seed = 0;
    Precision precision = Precision::f64;
    DatasetConfig dataset;
    std::string arch = "small_cnn";
    AttackConfig attack;
    TrainerConfig trainer;
    DefenseConfig defense;
    double t_start = 0.0, t_end = 2.0, t_step = 0.1;
    std::filesystem::path output_dir = "out";
};

/// Parse and validate a config document. Unknown keys anywhere are rejected;
/// value errors name the offending key path.
ExperimentConfig parse_config(const nlohmann::json& doc);
ExperimentConfig load_config_file(const std::filesystem::path& path);

} // namespace d3
