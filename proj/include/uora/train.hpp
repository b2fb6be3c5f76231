#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "uora/model.hpp"
#include "uora/reinit.hpp"
#include "uora/task.hpp"

namespace uora {

enum class OptimizerKind { Sgd, Adam };

std::string_view to_string(OptimizerKind k);
OptimizerKind parse_optimizer(std::string_view name);

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::Adam;
  double adapter_lr = 4e-2;
  double head_lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  // Soft-threshold on the d scaling vectors after each step (proximal L1).
  // Lets dimensions that stop helping reach exactly zero.
  double d_l1 = 0.0;
  std::size_t batch_size = 32;
  std::size_t steps = 500;
  std::size_t log_interval = 50;
  // 0: evaluate only before the first and after the last step.
  std::size_t eval_interval = 0;
  std::uint64_t seed = 0;
  ReinitConfig reinit;
};

void validate(const TrainConfig& cfg);

struct MetricsRecord {
  std::int64_t step = 0;
  std::string split;
  double loss = 0.0;
  std::optional<double> accuracy;
  std::uint64_t reinit_events = 0;  // cumulative reinitialized dimensions
  // |d_i| summary over every VeRA/UORA layer; NaN when there are none.
  double d_abs_min = 0.0;
  double d_abs_median = 0.0;
  double d_abs_max = 0.0;
  double wall_ms = 0.0;
};

// Plain SGD or Adam over a parameter registry.
class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg, const std::vector<ParamRef>& params);
  void step(std::vector<ParamRef>& params);
  // Clears the Adam moments of one element of one registry entry.
  void reset_element(std::size_t param_index, std::size_t element);
  std::uint64_t steps_taken() const { return t_; }

 private:
  TrainConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::uint64_t t_ = 0;
};

// Attaches a reinit monitor to every VeRA/UORA layer that lacks one.
// VeRA layers get a disabled monitor (count_k = 0).
void attach_monitors(Model& model, const ReinitConfig& cfg, std::uint64_t seed);

struct TrainResult {
  std::vector<MetricsRecord> records;
  std::uint64_t reinit_dimensions = 0;
};

// Runs forward/backward/step for cfg.steps optimizer steps. After each step
// every UORA layer's monitor observes d and fired dimensions are
// reinitialized. Throws DivergenceError naming the step and layer when the
// loss or a gradient stops being finite.
TrainResult train(Model& model, const SyntheticTask& task, const TrainConfig& cfg);

// Pure: no model mutation, no training-stream RNG use.
MetricsRecord evaluate(const Model& model, const SyntheticTask& task, Split split);
MetricsRecord evaluate(const Model& model, const SyntheticTask& task,
                       std::string_view split);

// Metrics streams. CSV starts with a schema line, then a fixed header.
inline constexpr const char* kMetricsSchema = "uora-metrics/1";
void write_metrics_csv(std::ostream& out, const std::vector<MetricsRecord>& records);
void write_metrics_jsonl(std::ostream& out, const std::vector<MetricsRecord>& records);
std::vector<MetricsRecord> read_metrics_csv(std::istream& in);
std::vector<MetricsRecord> read_metrics_jsonl(std::istream& in);

}  // namespace uora
