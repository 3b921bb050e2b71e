#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "d3/dataio.hpp"
#include "d3/nn.hpp"
#include "d3/poison.hpp"

namespace d3 {

struct SgdConfig {
    double learning_rate = 0.05;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    int epochs = 30;
    int batch_size = 64;
    std::uint64_t shuffle_seed = 0;

    void validate() const;
};

struct SamConfig {
    SgdConfig base;
    double rho = 0.05;

    void validate() const;
};

struct EpochStats {
    double loss = 0.0;
    double accuracy = 0.0;
};

struct TrainReport {
    std::vector<EpochStats> epochs;
    std::string stage;
};

/// SGD with momentum and decoupled weight decay. Per parameter p with
/// gradient g: v = momentum*v + g; p -= lr*v + lr*wd*p.
class SgdOptimizer {
public:
    explicit SgdOptimizer(SgdConfig cfg) : cfg_(cfg) {}

    void step(Model& model, const ParamSet& grads);
    const SgdConfig& config() const { return cfg_; }

private:
    SgdConfig cfg_;
    ParamSet velocity_;
};

/// One mini-batch SGD step; returns the batch loss and the count of correct
/// predictions taken from the pre-update logits.
std::pair<double, std::size_t> sgd_step(Model& model, const Tensor& images,
                                        const std::vector<int>& labels, SgdOptimizer& opt);

/// Sharpness-aware step: perturb all parameters jointly by rho*g/||g||2,
/// recompute the gradient at the perturbed point, restore the parameters and
/// apply the base SGD update with that gradient. A zero gradient falls back
/// to a plain SGD step.
std::pair<double, std::size_t> sam_step(Model& model, const Tensor& images,
                                        const std::vector<int>& labels, const SamConfig& cfg,
                                        SgdOptimizer& opt);

/// Mini-batch supervised training; epoch order is a seeded shuffle and the
/// whole run is a pure function of (model, dataset, config).
TrainReport train_supervised(Model& model, const Dataset& ds, const SgdConfig& cfg);

/// SAM variant of train_supervised.
TrainReport train_supervised_sam(Model& model, const Dataset& ds, const SamConfig& cfg);

struct TrainerConfig {
    SgdConfig sgd;
    std::optional<double> sam_rho; // absent => plain SGD
};

/// Initialize a fresh model and train it on the poisoned set; the checkpoint
/// stage is "backdoored" or "backdoored-sam(rho)".
std::pair<Checkpoint, TrainReport> train_backdoor(const PoisonedDataset& poisoned,
                                                  const std::string& arch,
                                                  const TrainerConfig& trainer,
                                                  std::uint64_t init_seed,
                                                  Precision precision = Precision::f64);

std::string format_double(double v); // shortest round-trip representation

} // namespace d3
