#pragma once

#include <string>
#include <utility>
#include <vector>

#include "d3/dataio.hpp"
#include "d3/nn.hpp"
#include "d3/train.hpp"

namespace d3 {

struct D3Config {
    double epsilon = 0.1;              // clean-loss threshold
    double lambda = 10.0;              // penalty multiplier
    ParamSelector selector;            // empty patterns => dense-layer weights
    double smoothing_delta = 1e-8;     // guard inside the distance square root
    SgdConfig optimizer{0.01, 0.9, 0.0, 20, 64, 0};

    void validate() const;
};

/// Per-tensor sphere radii; the constraint set is the product of Frobenius
/// spheres, one per selected tensor.
struct ProjectionSpec {
    std::vector<std::pair<std::string, double>> radii;

    double radius(const std::string& name) const;
    bool covers(const std::string& name) const;
};

struct DefenseEpochStats {
    double clean_loss = 0.0; // mean batch loss over the epoch
    double distance = 0.0;   // d(theta_s, theta_init_s) at epoch end
    double penalty = 0.0;    // mean hinge penalty over the epoch
};

struct DefenseReport {
    std::vector<DefenseEpochStats> epochs;
    std::string stage;
};

/// Joint Frobenius distance sqrt(sum_k ||a_k - b_k||_F^2 + delta) across the
/// matching tensors of both sets.
double distance(const ParamSet& theta_s, const ParamSet& theta_init_s, double delta);

/// Radii taken from each tensor's current Frobenius norm; zero norms are
/// rejected because the sphere projection would be degenerate.
ProjectionSpec projection_from(const ParamSet& init_selected);

/// Scale every covered tensor to its sphere radius; others pass through.
ParamSet project(const ParamSet& params, const ProjectionSpec& spec);

/// lambda * max(0, clean_loss - epsilon); the subgradient at the kink is 0.
double hinge_penalty(double clean_loss, double epsilon, double lambda);

/// Distance-driven detoxification: per mini-batch, descend
/// -d(theta_s, theta_init_s) + lambda*max(0, L_cl - epsilon) and project the
/// selected tensors back onto their initial-norm spheres. The distance term
/// only touches selected tensors; the penalty term touches all parameters.
std::pair<Checkpoint, DefenseReport> d3_detoxify(const Checkpoint& ckpt, const Dataset& reserved,
                                                 const D3Config& cfg);

/// Plain supervised fine-tuning on the reserved set (stage "ft").
std::pair<Checkpoint, DefenseReport> finetune_vanilla(const Checkpoint& ckpt,
                                                      const Dataset& reserved,
                                                      const SgdConfig& cfg);

/// Sharpness-aware fine-tuning on the reserved set (stage "ft-sam").
std::pair<Checkpoint, DefenseReport> finetune_sam(const Checkpoint& ckpt, const Dataset& reserved,
                                                  const SamConfig& cfg);

} // namespace d3
