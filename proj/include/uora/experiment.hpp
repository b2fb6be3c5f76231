#pragma once

// Declarative experiments: a JSON config describing model, task and
// training, expanded over grid axes and repeat seeds.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "uora/checkpoint.hpp"
#include "uora/model.hpp"
#include "uora/task.hpp"
#include "uora/train.hpp"

namespace uora {

const char* toolkit_version();

struct RunSpec {
  ModelSpec model;
  TaskSpec task;
  TrainConfig train;
};

enum class MetricsFormat { Csv, Jsonl };
enum class Selection { Final, Best };

struct GridAxis {
  std::string key;      // as written by the user
  std::string pointer;  // JSON pointer into the resolved config
  std::vector<nlohmann::json> values;
};

struct ExperimentConfig {
  std::string name = "experiment";
  nlohmann::json base;  // fully resolved run config: {model, task, train}
  std::vector<std::uint64_t> seeds{0};
  std::filesystem::path out = "runs";
  std::vector<GridAxis> grid;
  MetricsFormat format = MetricsFormat::Csv;
  Selection selection = Selection::Final;
  std::optional<CheckpointMode> checkpoint = CheckpointMode::Compact;
  std::size_t jobs = 1;
};

// Parses {model, task, train} into typed specs; every missing field takes its
// default. Throws ConfigError naming the offending field path.
RunSpec parse_run_spec(const nlohmann::json& j);
nlohmann::json to_json(const RunSpec& spec);

ExperimentConfig parse_experiment(const nlohmann::json& j);
ExperimentConfig load_experiment(const std::filesystem::path& path);

// "train.reinit.alpha" or an alias (alpha, tau, k, rank, init, method, lr)
// to a JSON pointer; throws ConfigError when the field does not exist.
std::string resolve_axis_key(const nlohmann::json& base, const std::string& key);
// Parses "KEY=V1,V2,..." into an axis.
GridAxis parse_grid_flag(const nlohmann::json& base, const std::string& flag);
std::vector<std::uint64_t> parse_seed_list(const std::string& text);

// Hex FNV-1a of the canonical (key-sorted) dump; stable under reordering.
std::string config_hash(const nlohmann::json& j);

struct GridCell {
  std::size_t index = 0;
  std::vector<nlohmann::json> axis_values;  // aligned with ExperimentConfig::grid
  nlohmann::json config;
};

std::vector<GridCell> expand_grid(const ExperimentConfig& cfg);

struct SummaryRow {
  std::size_t cell = 0;
  std::vector<nlohmann::json> axis_values;
  std::size_t n_runs = 0;
  double loss_mean = 0.0;
  double loss_std = 0.0;
  std::optional<double> acc_mean;
  std::optional<double> acc_std;
  double reinit_mean = 0.0;
};

struct ExperimentOutcome {
  std::vector<SummaryRow> rows;
  std::size_t runs_completed = 0;
  std::size_t runs_diverged = 0;
  std::vector<std::string> messages;
};

// Runs every cell x seed, writing per-run metrics, manifests, checkpoints,
// and out/summary.csv. Diverged runs are recorded and skipped.
ExperimentOutcome run_experiment(const ExperimentConfig& cfg);

// Recomputes summary rows from the per-run metric files under `out`.
std::vector<SummaryRow> summarize_directory(const std::filesystem::path& out);

// The scalar a run contributes to the summary: last eval record, or the
// eval record with the lowest loss.
const MetricsRecord& select_record(const std::vector<MetricsRecord>& records,
                                   Selection selection);

void write_summary_csv(std::ostream& out, const std::vector<std::string>& axis_keys,
                       const std::vector<SummaryRow>& rows, Selection selection);

// Mean and sample standard deviation (n - 1); std is 0 for a single value.
std::pair<double, double> mean_std(const std::vector<double>& values);

}  // namespace uora
