#pragma once

// LoRA, VeRA and UORA adapters wrapped around a frozen linear layer.
//
// Orientation: weights are d_out x d_in and act on column vectors, so
// A is r x d_in, B is d_out x r, and the scaling vector d (length r) pairs
// row i of A with column i of B.

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <variant>

#include "uora/linalg.hpp"

namespace uora {

enum class Method { None, Lora, Vera, Uora };

std::string_view to_string(Method m);
Method parse_method(std::string_view name);

struct FrozenLinear {
  Matrix weight;             // d_out x d_in
  std::optional<Vector> bias;  // d_out

  std::size_t d_out() const { return weight.rows(); }
  std::size_t d_in() const { return weight.cols(); }
};

Vector forward_frozen(const FrozenLinear& layer, const Vector& x);
// Rows of `x` are samples; returns one output row per sample.
Matrix forward_frozen(const FrozenLinear& layer, const Matrix& x);

struct LoraState {
  Matrix a;  // r x d_in, trainable
  Matrix b;  // d_out x r, trainable, zero at construction
  std::size_t rank() const { return a.rows(); }
};

// How a pair of frozen projections was drawn: A first, then B, from one
// stream. Enough to regenerate the initial matrices bit-exactly.
struct InitRecipe {
  InitKind kind;
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;

  bool operator==(const InitRecipe&) const = default;
};

struct UoraState {
  Method label = Method::Uora;  // Vera or Uora
  std::shared_ptr<const Matrix> a;  // r x d_in, frozen
  std::shared_ptr<const Matrix> b;  // d_out x r, frozen
  Vector d_vec;                     // r, trainable
  Vector b_vec;                     // d_out, trainable
  InitRecipe recipe;
  // Set while A/B are shared with other layers; cleared on first mutation.
  std::optional<std::uint64_t> shared_handle;

  std::size_t rank() const { return d_vec.size(); }
  std::size_t d_out() const { return b_vec.size(); }
  std::size_t d_in() const { return a->cols(); }
  bool is_shared() const { return shared_handle.has_value(); }
};

using AdapterState = std::variant<LoraState, UoraState>;

inline constexpr double kInitialDValue = 0.1;
inline constexpr double kInitialBValue = 0.0;

// LoRA: A drawn from `kind`, B all zeros.
LoraState make_lora(std::size_t d_out, std::size_t d_in, std::size_t rank,
                    const InitKind& kind, SeededRng& rng);

// Draws A then B from `recipe`; d = 0.1, b = 0.
UoraState make_uora(Method label, std::size_t d_out, std::size_t d_in,
                    std::size_t rank, const InitRecipe& recipe);

// Builds a state over matrices owned elsewhere (VeRA-style sharing).
UoraState make_uora_shared(Method label, std::shared_ptr<const Matrix> a,
                           std::shared_ptr<const Matrix> b, const InitRecipe& recipe,
                           std::uint64_t handle);

void validate_rank(std::size_t d_out, std::size_t d_in, std::size_t rank);

// h = W0 x (+ bias) + B A x
Vector forward_lora(const FrozenLinear& layer, const LoraState& s, const Vector& x);
Matrix forward_lora(const FrozenLinear& layer, const LoraState& s, const Matrix& x);

// h = W0 x (+ bias) + diag(b) B diag(d) A x
Vector forward_uora(const FrozenLinear& layer, const UoraState& s, const Vector& x);
Matrix forward_uora(const FrozenLinear& layer, const UoraState& s, const Matrix& x);

struct UoraGrads {
  Vector d;
  Vector b;
  Vector x;
};

struct LoraGrads {
  Matrix a;
  Matrix b;
  Vector x;
};

UoraGrads backward_uora(const FrozenLinear& layer, const UoraState& s,
                        const Vector& x, const Vector& grad_out);
LoraGrads backward_lora(const FrozenLinear& layer, const LoraState& s,
                        const Vector& x, const Vector& grad_out);

// Batched backward: accumulates parameter gradients into the given buffers
// (summed over sample rows) and returns the input gradient.
Matrix backward_uora(const FrozenLinear& layer, const UoraState& s, const Matrix& x,
                     const Matrix& grad_out, Vector& grad_d, Vector& grad_b);
Matrix backward_lora(const FrozenLinear& layer, const LoraState& s, const Matrix& x,
                     const Matrix& grad_out, Matrix& grad_a, Matrix& grad_b);

Matrix delta_weight(const LoraState& s);
Matrix delta_weight(const UoraState& s);
Matrix delta_weight(const AdapterState& s);

// Folds the adapter delta into W0.
FrozenLinear merge(const FrozenLinear& layer, const LoraState& s);
FrozenLinear merge(const FrozenLinear& layer, const UoraState& s);
FrozenLinear merge(const FrozenLinear& layer, const AdapterState& s);

std::size_t trainable_count(const AdapterState& s);

struct ParamCountReport {
  Method method = Method::None;
  std::uint64_t l_tuned = 0;
  std::uint64_t d_model = 0;
  std::uint64_t rank = 0;
  std::uint64_t trainable_count = 0;
};

// UORA/VeRA: l_tuned * (d_model + r); LoRA: 2 * l_tuned * d_model * r.
ParamCountReport count_params(Method method, std::uint64_t l_tuned,
                              std::uint64_t d_model, std::uint64_t rank);

// Table-style rounding: 50688 -> "50.7K", 85800000 -> "85.8M".
std::string format_count(std::uint64_t count);

}  // namespace uora
