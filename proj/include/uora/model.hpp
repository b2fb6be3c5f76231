#pragma once

// Desk-scale host models with adapter slots: an MLP and a pre-norm mini
// transformer encoder. Base weights are frozen; only adapter parameters and
// the classification head train.

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "uora/adapters.hpp"
#include "uora/reinit.hpp"
#include "uora/task.hpp"

namespace uora {

enum class ArchKind { Mlp, MiniTransformer };

std::string_view to_string(ArchKind a);
ArchKind parse_arch(std::string_view name);

// Projection names accepted in ModelSpec::adapted.
//   MLP: every hidden layer is "mlp_in", the last layer is "mlp_out".
//   MiniTransformer: "query", "key", "value", "output", "mlp_in", "mlp_out".
bool is_projection_name(std::string_view name);

struct SeqCache;
struct MlpCache;

struct ModelSpec {
  ArchKind arch = ArchKind::Mlp;
  // MLP layer widths, input first. A single-layer MLP is {d_in, d_out}.
  std::vector<std::size_t> widths{16, 16};
  // MiniTransformer
  std::size_t n_blocks = 2;
  std::size_t d_model = 64;
  std::size_t n_heads = 1;
  std::size_t ff_mult = 2;
  std::size_t seq_len = 8;
  std::size_t vocab = 16;

  std::set<std::string> adapted{"mlp_out"};
  Method method = Method::Uora;
  std::size_t rank = 4;
  InitKind init;
  // Share frozen A/B across same-shaped adapted layers. Defaults to on for
  // VeRA and off for UORA when unset.
  std::optional<bool> share_matrices;
  // Classification head outputs; 0 means the backbone output is the
  // prediction (regression).
  std::size_t head_outputs = 0;
};

void validate(const ModelSpec& spec);

enum class ParamGroup { Adapter, Head };

// One trainable tensor, viewed as a flat span.
struct ParamRef {
  std::string name;
  ParamGroup group = ParamGroup::Adapter;
  std::span<double> value;
  std::span<double> grad;
  // Index into Model::linears() for adapter params.
  std::size_t linear_index = 0;
  bool is_scaling_d = false;
};

class AdaptedLinear {
 public:
  AdaptedLinear(std::uint32_t id, std::string name, FrozenLinear base)
      : id_(id), name_(std::move(name)), base_(std::move(base)) {}

  std::uint32_t id() const { return id_; }
  const std::string& name() const { return name_; }
  const FrozenLinear& base() const { return base_; }

  bool has_adapter() const { return adapter_.has_value(); }
  const AdapterState& adapter() const { return *adapter_; }
  AdapterState& adapter() { return *adapter_; }
  void attach(AdapterState s);
  void detach() { adapter_.reset(); }

  UoraState* uora() { return adapter_ ? std::get_if<UoraState>(&*adapter_) : nullptr; }
  const UoraState* uora() const {
    return adapter_ ? std::get_if<UoraState>(&*adapter_) : nullptr;
  }

  std::optional<ReinitMonitor>& monitor() { return monitor_; }
  const std::optional<ReinitMonitor>& monitor() const { return monitor_; }

  Matrix forward(const Matrix& x) const;
  // Accumulates adapter gradients and returns dL/dx.
  Matrix backward(const Matrix& x, const Matrix& grad_out);

  void zero_grad();
  void add_params(std::size_t index, std::vector<ParamRef>& out);

 private:
  std::uint32_t id_;
  std::string name_;
  FrozenLinear base_;
  std::optional<AdapterState> adapter_;
  std::optional<ReinitMonitor> monitor_;
  Vector grad_d_, grad_b_;
  Matrix grad_a_mat_, grad_b_mat_;
};

struct Head {
  Matrix weight;  // n_classes x features
  Vector bias;
  Matrix grad_weight;
  Vector grad_bias;
};

struct LossResult {
  double loss = 0.0;
  std::optional<double> accuracy;
};

class Model {
 public:
  const ModelSpec& spec() const { return spec_; }
  std::vector<AdaptedLinear>& linears() { return linears_; }
  const std::vector<AdaptedLinear>& linears() const { return linears_; }
  const std::optional<Head>& head() const { return head_; }

  // Mean loss over the batch: MSE over every output entry for regression,
  // cross-entropy for classification.
  LossResult loss(const Dataset& batch) const;
  // Same loss; also accumulates gradients of all trainable parameters
  // (call zero_grad first).
  LossResult loss_and_grad(const Dataset& batch);

  // Raw outputs (regression values or logits), one row per example.
  Matrix predict(const Dataset& batch) const;

  void zero_grad();
  // Registry of every trainable tensor: adapter parameters, then the head.
  std::vector<ParamRef> parameters();

  // Checksum of every frozen backbone weight (excludes adapters and head).
  std::uint64_t frozen_checksum() const;
  // Checksum of every frozen adapter projection (UORA/VeRA A and B).
  std::uint64_t adapter_matrix_checksum() const;

  // Copy with every adapter folded into its base layer.
  Model merged() const;

  std::size_t adapter_param_count() const;
  std::size_t adapted_layer_count() const;

 private:
  friend Model build_model(const ModelSpec&, std::uint64_t, const SyntheticTask*);

  struct Embeddings {
    Matrix token;     // vocab x d_model
    Matrix position;  // seq_len x d_model
  };

  // Backbone features (MLP output or mean-pooled encoder states), one row
  // per example.
  Matrix features(const Dataset& batch, MlpCache* mlp, std::vector<SeqCache>* seqs) const;
  Matrix forward_mlp(const Matrix& x, MlpCache* cache) const;
  void backward_mlp(const MlpCache& cache, const Matrix& grad_out);
  Vector forward_tokens(const std::vector<std::uint32_t>& seq, SeqCache* cache) const;
  void backward_tokens(const SeqCache& cache, const Vector& grad_pooled);

  ModelSpec spec_;
  std::vector<AdaptedLinear> linears_;
  std::optional<Embeddings> embeddings_;
  std::optional<Head> head_;
};

// Draws the frozen backbone once and attaches adapters to exactly the listed
// projections. For LowRankRecovery the single MLP layer takes the task's W0.
Model build_model(const ModelSpec& spec, std::uint64_t seed,
                  const SyntheticTask* task = nullptr);

}  // namespace uora
