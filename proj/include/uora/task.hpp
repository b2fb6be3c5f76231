#pragma once

// Synthetic desk-scale tasks.

#include <cstdint>
#include <string_view>
#include <vector>

#include "uora/linalg.hpp"

namespace uora {

// RNG stream ids. Each consumer owns a stream so that, for instance,
// reinitialization draws never perturb data sampling.
namespace streams {
inline constexpr std::uint64_t kBaseWeights = 1;
inline constexpr std::uint64_t kHead = 2;
inline constexpr std::uint64_t kTaskTeacher = 3;
inline constexpr std::uint64_t kTrainData = 4;
inline constexpr std::uint64_t kEvalData = 5;
inline constexpr std::uint64_t kShuffle = 6;
inline constexpr std::uint64_t kAdapterInit = 0x1000;   // + layer id
inline constexpr std::uint64_t kSharedInit = 0x2000;    // + share group
inline constexpr std::uint64_t kReinit = 0x3000;        // + layer id
}  // namespace streams

enum class TaskKind { LowRankRecovery, GaussianClassification, SeqCopyClassify };

std::string_view to_string(TaskKind k);
TaskKind parse_task_kind(std::string_view name);

struct TaskSpec {
  TaskKind kind = TaskKind::LowRankRecovery;
  // LowRankRecovery
  std::size_t d_out = 16;
  std::size_t d_in = 16;
  std::size_t true_rank = 2;
  double noise_sigma = 0.01;
  // GaussianClassification
  std::size_t n_classes = 4;
  std::size_t dim = 16;
  double separation = 1.0;
  // SeqCopyClassify: label = token at position 0
  std::size_t seq_len = 8;
  std::size_t vocab = 8;

  std::size_t n_train = 512;
  std::size_t n_eval = 512;
};

void validate(const TaskSpec& spec);

enum class Split { Train, Eval };
std::string_view to_string(Split s);
Split parse_split(std::string_view name);

// Column-of-samples storage: one row per example.
struct Dataset {
  Matrix inputs;                                // vector tasks
  std::vector<std::vector<std::uint32_t>> tokens;  // token tasks
  Matrix targets;                               // regression targets
  std::vector<std::uint32_t> labels;            // classification labels

  std::size_t size() const;
  Dataset gather(std::span<const std::size_t> indices) const;
};

class SyntheticTask {
 public:
  SyntheticTask(const TaskSpec& spec, std::uint64_t seed);

  const TaskSpec& spec() const { return spec_; }
  std::uint64_t seed() const { return seed_; }
  bool is_classification() const { return spec_.kind != TaskKind::LowRankRecovery; }
  bool uses_tokens() const { return spec_.kind == TaskKind::SeqCopyClassify; }
  std::size_t n_classes() const;
  std::size_t input_dim() const;
  std::size_t output_dim() const;

  const Dataset& split(Split s) const { return s == Split::Train ? train_ : eval_; }

  // LowRankRecovery only: the frozen base W0 the student starts from and
  // the hidden low-rank delta the targets are generated with.
  const Matrix& base_weight() const { return base_weight_; }
  const Matrix& hidden_delta() const { return hidden_delta_; }

 private:
  Dataset generate(std::size_t n, SeededRng& rng) const;

  TaskSpec spec_;
  std::uint64_t seed_;
  Matrix base_weight_;
  Matrix hidden_delta_;
  Matrix class_means_;
  Dataset train_;
  Dataset eval_;
};

}  // namespace uora
