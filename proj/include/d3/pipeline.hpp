#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "d3/analysis.hpp"
#include "d3/config.hpp"
#include "d3/defense.hpp"

namespace d3 {

/// Sub-stream ids for deriving independent seeds from the experiment seed;
/// fixed so that reruns and cross-command invocations line up exactly.
namespace rng_streams {
inline constexpr std::uint64_t data = 1;
inline constexpr std::uint64_t model_init = 3;
inline constexpr std::uint64_t train_shuffle = 4;
inline constexpr std::uint64_t reserved_split = 5;
inline constexpr std::uint64_t poison_select = 6;
inline constexpr std::uint64_t blend_pattern = 7;
inline constexpr std::uint64_t defense_shuffle = 8;
inline constexpr std::uint64_t subsample = 9;
} // namespace rng_streams

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

struct PreparedData {
    Dataset train; // training pool after the reserved split (pre-poisoning)
    Dataset reserved;
    Dataset test;
    AttackSpec attack;
};

/// Materialize datasets and the attack from a config; a pure function of the
/// config (including its seed).
PreparedData prepare_data(const ExperimentConfig& cfg);

AttackSpec resolve_attack(const AttackConfig& attack, const std::vector<std::size_t>& image_shape,
                          std::uint64_t seed, Precision precision);

PoisonedDataset build_poisoned_train(const PreparedData& data, const ExperimentConfig& cfg);

std::pair<Checkpoint, TrainReport> run_train(const ExperimentConfig& cfg);
std::pair<Checkpoint, DefenseReport> run_defense(const ExperimentConfig& cfg,
                                                 const Checkpoint& ckpt);
std::vector<MetricsRecord> run_eval(const ExperimentConfig& cfg,
                                    const std::vector<Checkpoint>& ckpts);
TrajectoryReport run_trajectory(const ExperimentConfig& cfg, const Checkpoint& a,
                                const Checkpoint& b);

// ---------------------------------------------------------------------------
// Serialization of reports; numbers use the shortest round-trip decimal form.
// ---------------------------------------------------------------------------

std::string metrics_to_csv(const std::vector<MetricsRecord>& records);
std::vector<MetricsRecord> parse_metrics_csv(const std::string& text);
std::string trajectory_to_csv(const TrajectoryReport& report);
std::string train_report_to_json(const TrainReport& report);
std::string defense_report_to_json(const DefenseReport& report);

// ---------------------------------------------------------------------------
// CLI commands: each writes its artifacts under cfg.output_dir.
// ---------------------------------------------------------------------------

void cmd_gen_data(const ExperimentConfig& cfg);
void cmd_poison(const ExperimentConfig& cfg);
void cmd_train(const ExperimentConfig& cfg);
void cmd_defend(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint_path);
void cmd_eval(const ExperimentConfig& cfg,
              const std::vector<std::filesystem::path>& checkpoint_paths);
void cmd_trajectory(const ExperimentConfig& cfg, const std::filesystem::path& ckpt_a,
                    const std::filesystem::path& ckpt_b);

} // namespace d3
