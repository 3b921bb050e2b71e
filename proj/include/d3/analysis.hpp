#pragma once

#include <optional>
#include <string>
#include <vector>

#include "d3/dataio.hpp"
#include "d3/nn.hpp"
#include "d3/poison.hpp"

namespace d3 {

struct MetricsRecord {
    double acc = 0.0;
    double asr = 0.0;
    std::optional<double> der; // empty for the undefended reference row
    std::string stage;
    std::string attack;
    std::string defense;
};

struct TrajectoryPoint {
    double t = 0.0;
    double clean_loss = 0.0;
    double backdoor_loss = 0.0;
    double acc = 0.0;
    double asr = 0.0;
};

struct TrajectoryReport {
    std::vector<TrajectoryPoint> points;

    const TrajectoryPoint& at_t(double t) const;
};

struct WeightDiffHistogram {
    std::vector<double> edges;       // bins + 1 ascending edges
    std::vector<std::size_t> counts; // one per bin
};

struct IdealLossResult {
    double clean_loss = 0.0;
    double backdoor_loss = 0.0;
    double ideal = 0.0; // clean_loss - backdoor_loss
};

/// Fraction of correct predictions, accumulated in sample order.
double accuracy(const Model& model, const Dataset& ds);

/// Fraction of a poisoned evaluation set predicted as the target label (all
/// its labels carry the target, so the target is read from the set itself).
double asr(const Model& model, const Dataset& poisoned_eval);

/// Defense effectiveness rating on fractional metrics:
/// (max(0, asr0-asr1) - max(0, acc0-acc1) + 1) / 2, always in [0,1].
double der(double acc0, double asr0, double acc1, double asr1);

/// Loss decomposition with evaluator privilege (the trigger is known): clean
/// loss and trigger loss against the target are both measured over the
/// non-target-class samples.
IdealLossResult ideal_loss(const Model& model, const Dataset& clean_set, const AttackSpec& attack);

/// Evaluate clean/backdoor loss and ACC/ASR along the straight line
/// theta_t = theta_init + t * (theta_end - theta_init) over all parameters.
/// The endpoints t=0 and t=1 reuse the given sets verbatim so their rows are
/// bit-identical to direct evaluation. `proto` supplies the architecture.
TrajectoryReport trajectory_scan(const Model& proto, const ParamSet& theta_init,
                                 const ParamSet& theta_end, const Dataset& clean_set,
                                 const AttackSpec& attack, const std::vector<double>& t_grid);

/// Default grid 0.0 .. 2.0 in 21 evenly spaced points.
std::vector<double> default_t_grid();
std::vector<double> make_t_grid(double t_start, double t_end, double t_step);

struct QuadraticFitResult {
    double coefficient = 0.0;
    double exponent = 0.0;
};

/// Log-log least squares of backdoor_loss(t) - backdoor_loss(0) against t over
/// 0 < t <= t_max; the slope is the growth exponent.
QuadraticFitResult quadratic_fit(const TrajectoryReport& report, double t_max);

/// Histogram of elementwise |a - b| over the selected tensors.
WeightDiffHistogram weight_diff_histogram(const ParamSet& a, const ParamSet& b,
                                          const ParamSelector& selector, int bins);

/// Same with caller-supplied edges so several comparisons share one binning.
WeightDiffHistogram weight_diff_histogram(const ParamSet& a, const ParamSet& b,
                                          const ParamSelector& selector,
                                          const std::vector<double>& edges);

/// Mean cross-entropy of the model over a dataset (sum of per-sample losses
/// divided once by N).
double dataset_loss(const Model& model, const Dataset& ds);

} // namespace d3
