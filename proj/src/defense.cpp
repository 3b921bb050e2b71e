#include "d3/defense.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace d3 {

void D3Config::validate() const {
    if (epsilon < 0.0) throw ValidationError("d3.epsilon must be >= 0");
    if (lambda < 0.0) throw ValidationError("d3.lambda must be >= 0");
    if (smoothing_delta < 0.0) throw ValidationError("d3.smoothing_delta must be >= 0");
    optimizer.validate();
}

double ProjectionSpec::radius(const std::string& name) const {
    for (const auto& [n, r] : radii) {
        if (n == name) return r;
    }
    throw ContractError("no projection radius for '" + name + "'");
}

bool ProjectionSpec::covers(const std::string& name) const {
    for (const auto& [n, r] : radii) {
        if (n == name) return true;
    }
    return false;
}

double distance(const ParamSet& theta_s, const ParamSet& theta_init_s, double delta) {
    if (theta_s.size() != theta_init_s.size()) {
        throw ContractError("distance: parameter sets differ in size");
    }
    double sum_sq = 0.0;
    for (const auto& [name, t] : theta_s) {
        if (!theta_init_s.contains(name)) {
            throw ContractError("distance: '" + name + "' missing from reference set");
        }
        const Tensor& r = theta_init_s.at(name);
        if (!r.same_shape(t)) {
            throw ContractError("distance: shape mismatch for '" + name + "'");
        }
        for (std::size_t i = 0; i < t.numel(); ++i) {
            double d = t[i] - r[i];
            sum_sq += d * d;
        }
    }
    return std::sqrt(sum_sq + delta);
}

ProjectionSpec projection_from(const ParamSet& init_selected) {
    ProjectionSpec spec;
    for (const auto& [name, t] : init_selected) {
        double r = t.frobenius_norm();
        if (r <= 0.0) {
            throw ContractError("degenerate projection: '" + name + "' has zero Frobenius norm");
        }
        spec.radii.emplace_back(name, r);
    }
    return spec;
}

ParamSet project(const ParamSet& params, const ProjectionSpec& spec) {
    ParamSet out;
    for (const auto& [name, t] : params) {
        if (!spec.covers(name)) {
            out.add(name, t);
            continue;
        }
        double norm = t.frobenius_norm();
        if (norm <= 0.0) {
            throw ContractError("degenerate projection: '" + name + "' has zero Frobenius norm");
        }
        double scale = spec.radius(name) / norm;
        Tensor scaled = t;
        for (std::size_t i = 0; i < scaled.numel(); ++i) {
            scaled.set(i, t[i] * scale);
        }
        out.add(name, std::move(scaled));
    }
    return out;
}

double hinge_penalty(double clean_loss, double epsilon, double lambda) {
    if (!std::isfinite(clean_loss)) throw ContractError("hinge_penalty: non-finite clean loss");
    return lambda * std::max(0.0, clean_loss - epsilon);
}

// ---------------------------------------------------------------------------
// D3
// ---------------------------------------------------------------------------

namespace {

void project_model(Model& model, const ProjectionSpec& spec) {
    for (auto& [name, t] : model.params()) {
        if (!spec.covers(name)) continue;
        double norm = t.frobenius_norm();
        if (norm <= 0.0) {
            throw ContractError("degenerate projection: '" + name + "' has zero Frobenius norm");
        }
        double scale = spec.radius(name) / norm;
        for (std::size_t i = 0; i < t.numel(); ++i) t.set(i, t[i] * scale);
    }
    model.bump_params_version();
}

Checkpoint checkpoint_from(const Model& model, const CheckpointMeta& base,
                           const std::string& stage) {
    Checkpoint out;
    out.params = clone_params(model);
    out.meta = base;
    out.meta.stage = stage;
    return out;
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, int batch_size,
                                                    std::vector<std::size_t>& order,
                                                    Rng& shuffle_rng) {
    shuffle_rng.shuffle(order);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start < n; start += batch_size) {
        std::size_t end = std::min(n, start + static_cast<std::size_t>(batch_size));
        batches.emplace_back(order.begin() + start, order.begin() + end);
    }
    return batches;
}

} // namespace

std::pair<Checkpoint, DefenseReport> d3_detoxify(const Checkpoint& ckpt, const Dataset& reserved,
                                                 const D3Config& cfg) {
    cfg.validate();
    if (reserved.size() == 0) throw ContractError("d3_detoxify: reserved dataset is empty");

    Model model = model_from_checkpoint(ckpt, reserved.image_shape());
    const Precision prec = model.precision();

    ParamSelector selector = cfg.selector;
    if (selector.patterns.empty()) {
        selector.patterns = dense_weight_names(model);
    }
    ParamSet theta_init_s = select(ckpt.params, selector);
    if (theta_init_s.empty()) {
        throw ContractError("d3 selector matches no parameter in the checkpoint");
    }
    ProjectionSpec spheres = projection_from(theta_init_s);

    // The distance term has no defined direction while theta_s sits exactly on
    // theta_init_s, so the selected tensors get a tiny seeded displacement
    // before the loop; the first projection folds it back onto the spheres.
    if (cfg.optimizer.epochs > 0) {
        Rng nudge_rng = Rng::derive(cfg.optimizer.shuffle_seed, 11);
        for (auto& [name, t] : model.params()) {
            if (!selector.matches(name)) continue;
            double scale =
                1e-6 * spheres.radius(name) / std::sqrt(static_cast<double>(t.numel()));
            for (std::size_t i = 0; i < t.numel(); ++i) {
                t.set(i, t[i] + scale * nudge_rng.next_normal());
            }
        }
        model.bump_params_version();
        project_model(model, spheres);
    }

    SgdOptimizer opt(cfg.optimizer);
    Rng shuffle_rng(cfg.optimizer.shuffle_seed);
    std::vector<std::size_t> order(reserved.size());
    std::iota(order.begin(), order.end(), 0);

    DefenseReport report;
    report.stage = "d3";
    for (int epoch = 0; epoch < cfg.optimizer.epochs; ++epoch) {
        double loss_sum = 0.0;
        double penalty_sum = 0.0;
        std::size_t batches_seen = 0;
        for (const auto& idx : epoch_batches(reserved.size(), cfg.optimizer.batch_size, order,
                                             shuffle_rng)) {
            auto [images, labels] = make_batch(reserved, idx);
            auto [logits, cache] = forward(model, images);
            auto ce = softmax_cross_entropy(logits, labels);
            if (!std::isfinite(ce.loss)) {
                throw DivergenceError("d3 diverged at epoch " + std::to_string(epoch) +
                                      ", batch " + std::to_string(batches_seen));
            }

            ParamSet theta_s = select(model.params(), selector);
            double d = distance(theta_s, theta_init_s, cfg.smoothing_delta);
            double penalty = hinge_penalty(ce.loss, cfg.epsilon, cfg.lambda);
            bool penalty_active = cfg.lambda > 0.0 && ce.loss > cfg.epsilon;

            ParamSet grads;
            if (penalty_active) {
                grads = backward(model, cache, ce.grad_logits);
                for (auto& [name, g] : grads) {
                    for (std::size_t i = 0; i < g.numel(); ++i) {
                        g.data()[i] = round_to(prec, cfg.lambda * g[i]);
                    }
                }
            } else {
                for (const auto& [name, t] : model.params()) {
                    grads.add(name, Tensor(t.shape(), prec));
                }
            }

            // Distance gradient of -d flows only into the selected tensors:
            // (theta_init - theta) / d, zero while the displacement underflows
            // the smoothing guard.
            double sum_sq = d * d - cfg.smoothing_delta;
            if (sum_sq > 0.0) {
                for (auto& [name, g] : grads) {
                    if (!selector.matches(name)) continue;
                    const Tensor& cur = model.params().at(name);
                    const Tensor& init = theta_init_s.at(name);
                    for (std::size_t i = 0; i < g.numel(); ++i) {
                        g.data()[i] = round_to(prec, g[i] + (init[i] - cur[i]) / d);
                    }
                }
            }

            opt.step(model, grads);
            project_model(model, spheres);

            loss_sum += ce.loss;
            penalty_sum += penalty;
            ++batches_seen;
        }
        DefenseEpochStats stats;
        stats.clean_loss = loss_sum / static_cast<double>(batches_seen);
        stats.penalty = penalty_sum / static_cast<double>(batches_seen);
        stats.distance =
            distance(select(model.params(), selector), theta_init_s, cfg.smoothing_delta);
        report.epochs.push_back(stats);
    }

    return {checkpoint_from(model, ckpt.meta, "d3"), std::move(report)};
}

// ---------------------------------------------------------------------------
// Fine-tuning baselines
// ---------------------------------------------------------------------------

namespace {

std::pair<Checkpoint, DefenseReport> finetune_loop(const Checkpoint& ckpt,
                                                   const Dataset& reserved, const SgdConfig& cfg,
                                                   const SamConfig* sam,
                                                   const std::string& stage) {
    cfg.validate();
    if (reserved.size() == 0) throw ContractError("fine-tuning: reserved dataset is empty");

    Model model = model_from_checkpoint(ckpt, reserved.image_shape());
    ParamSet theta_init = ckpt.params;

    DefenseReport report;
    report.stage = stage;

    SgdOptimizer opt(cfg);
    Rng shuffle_rng(cfg.shuffle_seed);
    std::vector<std::size_t> order(reserved.size());
    std::iota(order.begin(), order.end(), 0);

    ParamSelector dense_sel;
    dense_sel.patterns = dense_weight_names(model);
    ParamSet theta_init_s = select(theta_init, dense_sel);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        double loss_sum = 0.0;
        std::size_t batches_seen = 0;
        for (const auto& idx : epoch_batches(reserved.size(), cfg.batch_size, order,
                                             shuffle_rng)) {
            auto [images, labels] = make_batch(reserved, idx);
            auto [loss, correct] = sam ? sam_step(model, images, labels, *sam, opt)
                                       : sgd_step(model, images, labels, opt);
            (void)correct;
            if (!std::isfinite(loss)) {
                throw DivergenceError(stage + " diverged at epoch " + std::to_string(epoch) +
                                      ", batch " + std::to_string(batches_seen));
            }
            loss_sum += loss;
            ++batches_seen;
        }
        DefenseEpochStats stats;
        stats.clean_loss = loss_sum / static_cast<double>(batches_seen);
        stats.penalty = 0.0;
        stats.distance = distance(select(model.params(), dense_sel), theta_init_s, 0.0);
        report.epochs.push_back(stats);
    }
    return {checkpoint_from(model, ckpt.meta, stage), std::move(report)};
}

} // namespace

std::pair<Checkpoint, DefenseReport> finetune_vanilla(const Checkpoint& ckpt,
                                                      const Dataset& reserved,
                                                      const SgdConfig& cfg) {
    return finetune_loop(ckpt, reserved, cfg, nullptr, "ft");
}

std::pair<Checkpoint, DefenseReport> finetune_sam(const Checkpoint& ckpt, const Dataset& reserved,
                                                  const SamConfig& cfg) {
    cfg.validate();
    return finetune_loop(ckpt, reserved, cfg.base, &cfg, "ft-sam");
}

} // namespace d3
