#include "d3/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace d3 {

namespace {

constexpr std::size_t kEvalBatch = 256;

std::vector<std::vector<std::size_t>> eval_batches(std::size_t n) {
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start < n; start += kEvalBatch) {
        std::size_t end = std::min(n, start + kEvalBatch);
        std::vector<std::size_t> idx(end - start);
        std::iota(idx.begin(), idx.end(), start);
        batches.push_back(std::move(idx));
    }
    return batches;
}

} // namespace

const TrajectoryPoint& TrajectoryReport::at_t(double t) const {
    for (const auto& p : points) {
        if (p.t == t) return p;
    }
    throw ContractError("trajectory has no point at t=" + std::to_string(t));
}

double accuracy(const Model& model, const Dataset& ds) {
    if (ds.size() == 0) throw ContractError("accuracy: empty dataset");
    std::size_t correct = 0;
    for (const auto& idx : eval_batches(ds.size())) {
        auto [images, labels] = make_batch(ds, idx);
        std::vector<int> preds = predict(model, images);
        for (std::size_t i = 0; i < preds.size(); ++i) {
            if (preds[i] == labels[i]) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(ds.size());
}

double asr(const Model& model, const Dataset& poisoned_eval) {
    if (poisoned_eval.size() == 0) throw ContractError("asr: empty poisoned evaluation set");
    // build_eval_poisoned relabels everything to the target.
    return accuracy(model, poisoned_eval);
}

double der(double acc0, double asr0, double acc1, double asr1) {
    for (double v : {acc0, asr0, acc1, asr1}) {
        if (!(v >= 0.0 && v <= 1.0)) {
            throw ContractError("der inputs must be fractions in [0,1]");
        }
    }
    double delta_asr = asr0 - asr1;
    double delta_acc = acc0 - acc1;
    return (std::max(0.0, delta_asr) - std::max(0.0, delta_acc) + 1.0) / 2.0;
}

double dataset_loss(const Model& model, const Dataset& ds) {
    if (ds.size() == 0) throw ContractError("dataset_loss: empty dataset");
    double sum = 0.0;
    for (const auto& idx : eval_batches(ds.size())) {
        auto [images, labels] = make_batch(ds, idx);
        sum += cross_entropy_sum(forward_logits(model, images), labels);
    }
    return sum / static_cast<double>(ds.size());
}

IdealLossResult ideal_loss(const Model& model, const Dataset& clean_set,
                           const AttackSpec& attack) {
    if (clean_set.size() == 0) throw ContractError("ideal_loss: empty dataset");

    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < clean_set.size(); ++i) {
        if (clean_set.labels[i] != attack.target_label) keep.push_back(i);
    }
    if (keep.empty()) {
        throw ContractError("ideal_loss: every sample carries the target label");
    }
    auto [clean_images, clean_labels] = make_batch(clean_set, keep);
    Dataset clean_subset;
    clean_subset.images = std::move(clean_images);
    clean_subset.labels = std::move(clean_labels);
    clean_subset.name = clean_set.name;

    Dataset triggered = build_eval_poisoned(clean_set, attack);

    IdealLossResult res;
    res.clean_loss = dataset_loss(model, clean_subset);
    res.backdoor_loss = dataset_loss(model, triggered);
    res.ideal = res.clean_loss - res.backdoor_loss;
    return res;
}

TrajectoryReport trajectory_scan(const Model& proto, const ParamSet& theta_init,
                                 const ParamSet& theta_end, const Dataset& clean_set,
                                 const AttackSpec& attack, const std::vector<double>& t_grid) {
    if (t_grid.empty()) throw ContractError("trajectory_scan: empty t grid");
    for (std::size_t i = 1; i < t_grid.size(); ++i) {
        if (!(t_grid[i] > t_grid[i - 1])) {
            throw ContractError("trajectory_scan: t grid must be strictly increasing");
        }
    }
    if (theta_init.size() != theta_end.size()) {
        throw ContractError("trajectory_scan: endpoint parameter sets differ");
    }
    for (const auto& [name, t] : theta_init) {
        if (!theta_end.contains(name) || !theta_end.at(name).same_shape(t)) {
            throw ContractError("trajectory_scan: endpoint mismatch for '" + name + "'");
        }
    }

    Rng scratch(0);
    Model model(proto.layers(), proto.input_shape(), proto.num_classes(), proto.precision(),
                scratch);
    Dataset triggered = build_eval_poisoned(clean_set, attack);
    const Precision prec = proto.precision();

    TrajectoryReport report;
    for (double t : t_grid) {
        ParamSet point;
        if (t == 0.0) {
            point = theta_init;
        } else if (t == 1.0) {
            point = theta_end;
        } else {
            for (const auto& [name, a] : theta_init) {
                const Tensor& b = theta_end.at(name);
                Tensor mixed(a.shape(), prec);
                for (std::size_t i = 0; i < a.numel(); ++i) {
                    mixed.set(i, a[i] + t * (b[i] - a[i]));
                }
                point.add(name, std::move(mixed));
            }
        }
        load_params(model, point);

        TrajectoryPoint row;
        row.t = t;
        row.clean_loss = dataset_loss(model, clean_set);
        row.backdoor_loss = dataset_loss(model, triggered);
        row.acc = accuracy(model, clean_set);
        row.asr = asr(model, triggered);
        report.points.push_back(row);
    }
    return report;
}

std::vector<double> make_t_grid(double t_start, double t_end, double t_step) {
    if (!(t_step > 0.0) || !(t_end > t_start)) {
        throw ContractError("trajectory grid requires t_end > t_start and t_step > 0");
    }
    std::size_t count =
        static_cast<std::size_t>(std::llround((t_end - t_start) / t_step)) + 1;
    std::vector<double> grid(count);
    for (std::size_t i = 0; i < count; ++i) {
        // Endpoint interpolation keeps grid values like 0.1 and 1.0 exact.
        grid[i] = t_start + (static_cast<double>(i) * (t_end - t_start)) /
                                static_cast<double>(count - 1);
    }
    return grid;
}

std::vector<double> default_t_grid() {
    return make_t_grid(0.0, 2.0, 0.1);
}

QuadraticFitResult quadratic_fit(const TrajectoryReport& report, double t_max) {
    const TrajectoryPoint* origin = nullptr;
    for (const auto& p : report.points) {
        if (p.t == 0.0) origin = &p;
    }
    if (!origin) throw ContractError("quadratic_fit: trajectory lacks a t=0 point");

    std::vector<double> log_t, log_dl;
    for (const auto& p : report.points) {
        if (p.t <= 0.0 || p.t > t_max) continue;
        double diff = p.backdoor_loss - origin->backdoor_loss;
        if (diff <= 0.0) {
            throw ContractError("quadratic_fit: non-positive loss increase at t=" +
                                std::to_string(p.t) + "; fit undefined");
        }
        log_t.push_back(std::log(p.t));
        log_dl.push_back(std::log(diff));
    }
    if (log_t.size() < 4) {
        throw ContractError("quadratic_fit: needs at least 4 grid points in (0, t_max], got " +
                            std::to_string(log_t.size()));
    }

    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < log_t.size(); ++i) {
        mx += log_t[i];
        my += log_dl[i];
    }
    mx /= static_cast<double>(log_t.size());
    my /= static_cast<double>(log_t.size());
    double sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < log_t.size(); ++i) {
        sxx += (log_t[i] - mx) * (log_t[i] - mx);
        sxy += (log_t[i] - mx) * (log_dl[i] - my);
    }
    if (sxx == 0.0) throw ContractError("quadratic_fit: degenerate grid");

    QuadraticFitResult res;
    res.exponent = sxy / sxx;
    res.coefficient = std::exp(my - res.exponent * mx);
    return res;
}

namespace {

std::vector<double> selected_abs_diffs(const ParamSet& a, const ParamSet& b,
                                       const ParamSelector& selector) {
    std::vector<double> diffs;
    for (const auto& [name, ta] : a) {
        if (!selector.matches(name)) continue;
        if (!b.contains(name) || !b.at(name).same_shape(ta)) {
            throw ContractError("weight_diff_histogram: mismatch for '" + name + "'");
        }
        const Tensor& tb = b.at(name);
        for (std::size_t i = 0; i < ta.numel(); ++i) {
            diffs.push_back(std::abs(ta[i] - tb[i]));
        }
    }
    if (diffs.empty()) {
        throw ContractError("weight_diff_histogram: selector matches no parameter");
    }
    return diffs;
}

WeightDiffHistogram bin_diffs(const std::vector<double>& diffs,
                              const std::vector<double>& edges) {
    if (edges.size() < 2) throw ContractError("weight_diff_histogram: needs >= 2 bin edges");
    WeightDiffHistogram hist;
    hist.edges = edges;
    hist.counts.assign(edges.size() - 1, 0);
    for (double v : diffs) {
        std::size_t bin = hist.counts.size() - 1;
        for (std::size_t i = 0; i + 1 < edges.size(); ++i) {
            if (v < edges[i + 1]) {
                bin = i;
                break;
            }
        }
        ++hist.counts[bin];
    }
    return hist;
}

} // namespace

WeightDiffHistogram weight_diff_histogram(const ParamSet& a, const ParamSet& b,
                                          const ParamSelector& selector, int bins) {
    if (bins < 1) throw ContractError("weight_diff_histogram: bins must be >= 1");
    std::vector<double> diffs = selected_abs_diffs(a, b, selector);
    double upper = 0.0;
    for (double v : diffs) upper = std::max(upper, v);
    if (upper <= 0.0) upper = 1.0; // identical sets: everything lands in bin 0
    std::vector<double> edges(static_cast<std::size_t>(bins) + 1);
    for (std::size_t i = 0; i < edges.size(); ++i) {
        edges[i] = upper * static_cast<double>(i) / static_cast<double>(bins);
    }
    return bin_diffs(diffs, edges);
}

WeightDiffHistogram weight_diff_histogram(const ParamSet& a, const ParamSet& b,
                                          const ParamSelector& selector,
                                          const std::vector<double>& edges) {
    return bin_diffs(selected_abs_diffs(a, b, selector), edges);
}

} // namespace d3
