#include "d3/train.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>

namespace d3 {

void SgdConfig::validate() const {
    if (!(learning_rate > 0.0)) throw ValidationError("optimizer.lr must be > 0");
    if (momentum < 0.0 || momentum >= 1.0) throw ValidationError("optimizer.momentum must be in [0,1)");
    if (weight_decay < 0.0) throw ValidationError("optimizer.weight_decay must be >= 0");
    if (epochs < 0) throw ValidationError("optimizer.epochs must be >= 0");
    if (batch_size < 1) throw ValidationError("optimizer.batch_size must be >= 1");
}

void SamConfig::validate() const {
    base.validate();
    if (!(rho > 0.0)) throw ValidationError("optimizer.sam_rho must be > 0");
}

std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

void SgdOptimizer::step(Model& model, const ParamSet& grads) {
    const Precision prec = model.precision();
    if (velocity_.empty()) {
        for (const auto& [name, t] : model.params()) {
            velocity_.add(name, Tensor(t.shape(), prec));
        }
    }
    const double lr = cfg_.learning_rate;
    const double mu = cfg_.momentum;
    const double wd = cfg_.weight_decay;
    for (auto& [name, p] : model.params()) {
        const Tensor& g = grads.at(name);
        Tensor& v = velocity_.at(name);
        for (std::size_t i = 0; i < p.numel(); ++i) {
            double vi = round_to(prec, mu * v[i] + g[i]);
            v.data()[i] = vi;
            p.set(i, p[i] - lr * vi - lr * wd * p[i]);
        }
    }
    model.bump_params_version();
}

namespace {

std::size_t count_correct(const Tensor& logits, const std::vector<int>& labels) {
    const std::size_t bsz = logits.dim(0), k = logits.dim(1);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < bsz; ++i) {
        const double* row = logits.data() + i * k;
        std::size_t best = 0;
        for (std::size_t j = 1; j < k; ++j) {
            if (row[j] > row[best]) best = j;
        }
        if (static_cast<int>(best) == labels[i]) ++correct;
    }
    return correct;
}

double grad_l2_norm(const ParamSet& grads) {
    double acc = 0.0;
    for (const auto& [name, g] : grads) {
        for (std::size_t i = 0; i < g.numel(); ++i) acc += g[i] * g[i];
    }
    return std::sqrt(acc);
}

} // namespace

std::pair<double, std::size_t> sgd_step(Model& model, const Tensor& images,
                                        const std::vector<int>& labels, SgdOptimizer& opt) {
    auto [logits, cache] = forward(model, images);
    auto ce = softmax_cross_entropy(logits, labels);
    std::size_t correct = count_correct(logits, labels);
    ParamSet grads = backward(model, cache, ce.grad_logits);
    opt.step(model, grads);
    return {ce.loss, correct};
}

std::pair<double, std::size_t> sam_step(Model& model, const Tensor& images,
                                        const std::vector<int>& labels, const SamConfig& cfg,
                                        SgdOptimizer& opt) {
    auto [logits, cache] = forward(model, images);
    auto ce = softmax_cross_entropy(logits, labels);
    std::size_t correct = count_correct(logits, labels);
    ParamSet grads = backward(model, cache, ce.grad_logits);

    double norm = grad_l2_norm(grads);
    if (norm == 0.0) {
        // Flat point: nothing to perturb toward, take the plain step.
        opt.step(model, grads);
        return {ce.loss, correct};
    }

    // Ascent to the worst-case neighbor within the rho ball.
    const Precision prec = model.precision();
    ParamSet saved = model.params();
    double scale = cfg.rho / norm;
    for (auto& [name, p] : model.params()) {
        const Tensor& g = grads.at(name);
        for (std::size_t i = 0; i < p.numel(); ++i) {
            p.set(i, p[i] + scale * g[i]);
        }
    }
    model.bump_params_version();

    auto [logits2, cache2] = forward(model, images);
    auto ce2 = softmax_cross_entropy(logits2, labels);
    ParamSet grads2 = backward(model, cache2, ce2.grad_logits);

    // Restore and update from the original point with the perturbed gradient.
    for (auto& [name, p] : model.params()) {
        const Tensor& s = saved.at(name);
        for (std::size_t i = 0; i < p.numel(); ++i) p.data()[i] = s[i];
    }
    model.bump_params_version();
    opt.step(model, grads2);
    (void)prec;
    return {ce.loss, correct};
}

namespace {

TrainReport train_loop(Model& model, const Dataset& ds, const SgdConfig& cfg,
                       const SamConfig* sam) {
    cfg.validate();
    if (ds.size() == 0) throw ContractError("training dataset is empty");

    TrainReport report;
    SgdOptimizer opt(cfg);
    Rng shuffle_rng(cfg.shuffle_seed);
    std::vector<std::size_t> order(ds.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double loss_sum = 0.0;
        std::size_t correct = 0;
        std::size_t seen = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            std::size_t end = std::min(order.size(), start + cfg.batch_size);
            std::vector<std::size_t> idx(order.begin() + start, order.begin() + end);
            auto [images, labels] = make_batch(ds, idx);
            auto [loss, batch_correct] =
                sam ? sam_step(model, images, labels, *sam, opt)
                    : sgd_step(model, images, labels, opt);
            if (!std::isfinite(loss)) {
                throw DivergenceError("training diverged at epoch " + std::to_string(epoch) +
                                      ", batch " + std::to_string(start / cfg.batch_size));
            }
            loss_sum += loss * static_cast<double>(idx.size());
            correct += batch_correct;
            seen += idx.size();
        }
        EpochStats stats;
        stats.loss = loss_sum / static_cast<double>(seen);
        stats.accuracy = static_cast<double>(correct) / static_cast<double>(seen);
        report.epochs.push_back(stats);
    }
    return report;
}

} // namespace

TrainReport train_supervised(Model& model, const Dataset& ds, const SgdConfig& cfg) {
    return train_loop(model, ds, cfg, nullptr);
}

TrainReport train_supervised_sam(Model& model, const Dataset& ds, const SamConfig& cfg) {
    cfg.validate();
    return train_loop(model, ds, cfg.base, &cfg);
}

std::pair<Checkpoint, TrainReport> train_backdoor(const PoisonedDataset& poisoned,
                                                  const std::string& arch,
                                                  const TrainerConfig& trainer,
                                                  std::uint64_t init_seed, Precision precision) {
    const Dataset& ds = poisoned.dataset;
    Rng init_rng = Rng::derive(init_seed, 3);
    Model model = make_model(arch, ds.image_shape(),
                             static_cast<std::size_t>(ds.num_classes()), init_rng, precision);

    TrainReport report;
    std::string stage = "backdoored";
    if (trainer.sam_rho) {
        SamConfig cfg{trainer.sgd, *trainer.sam_rho};
        report = train_supervised_sam(model, ds, cfg);
        stage += "-sam(" + format_double(*trainer.sam_rho) + ")";
    } else {
        report = train_supervised(model, ds, trainer.sgd);
    }
    report.stage = stage;

    Checkpoint ckpt;
    ckpt.params = clone_params(model);
    ckpt.meta.arch = arch;
    ckpt.meta.seed = init_seed;
    ckpt.meta.stage = stage;
    return {std::move(ckpt), std::move(report)};
}

} // namespace d3
