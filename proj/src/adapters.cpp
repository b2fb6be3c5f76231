#include "uora/adapters.hpp"

#include <cstdio>

#include "uora/errors.hpp"

namespace uora {

namespace {

void check_input(std::size_t got, std::size_t want, const char* what) {
  if (got != want) {
    throw ShapeError(std::string(what) + ": expected input length " +
                     std::to_string(want) + ", got " + std::to_string(got));
  }
}

void check_state(const FrozenLinear& layer, std::size_t d_out, std::size_t d_in,
                 const char* what) {
  if (layer.d_out() != d_out || layer.d_in() != d_in) {
    throw ShapeError(std::string(what) + ": adapter dims do not match frozen layer");
  }
}

void check_lora(const FrozenLinear& layer, const LoraState& s) {
  if (s.b.cols() != s.a.rows()) throw ShapeError("lora: B cols != A rows");
  check_state(layer, s.b.rows(), s.a.cols(), "lora");
}

void check_uora(const FrozenLinear& layer, const UoraState& s) {
  if (!s.a || !s.b) throw ShapeError("uora: missing frozen matrices");
  if (s.a->rows() != s.rank() || s.b->cols() != s.rank() ||
      s.b->rows() != s.d_out()) {
    throw ShapeError("uora: inconsistent adapter shapes");
  }
  check_state(layer, s.d_out(), s.d_in(), "uora");
}

Matrix as_row(const Vector& x) {
  Matrix m(1, x.size());
  std::copy(x.values().begin(), x.values().end(), m.values().begin());
  return m;
}

Vector first_row(const Matrix& m) { return m.row_vector(0); }

}  // namespace

std::string_view to_string(Method m) {
  switch (m) {
    case Method::None: return "none";
    case Method::Lora: return "lora";
    case Method::Vera: return "vera";
    case Method::Uora: return "uora";
  }
  return "unknown";
}

Method parse_method(std::string_view name) {
  if (name == "none") return Method::None;
  if (name == "lora") return Method::Lora;
  if (name == "vera") return Method::Vera;
  if (name == "uora") return Method::Uora;
  throw ConfigError("unknown adapter method '" + std::string(name) + "'");
}

Vector forward_frozen(const FrozenLinear& layer, const Vector& x) {
  check_input(x.size(), layer.d_in(), "forward");
  Vector h = matvec(layer.weight, x);
  if (layer.bias) h = add(h, *layer.bias);
  return h;
}

Matrix forward_frozen(const FrozenLinear& layer, const Matrix& x) {
  check_input(x.cols(), layer.d_in(), "forward");
  Matrix h = matmul_nt(x, layer.weight);
  if (layer.bias) {
    for (std::size_t r = 0; r < h.rows(); ++r) {
      auto row = h.row(r);
      for (std::size_t c = 0; c < row.size(); ++c) row[c] += (*layer.bias)[c];
    }
  }
  return h;
}

void validate_rank(std::size_t d_out, std::size_t d_in, std::size_t rank) {
  if (rank == 0) throw ConfigError("rank must be >= 1");
  if (rank > std::min(d_out, d_in)) {
    throw ConfigError("rank " + std::to_string(rank) + " exceeds min(d_out, d_in) = " +
                      std::to_string(std::min(d_out, d_in)));
  }
}

LoraState make_lora(std::size_t d_out, std::size_t d_in, std::size_t rank,
                    const InitKind& kind, SeededRng& rng) {
  validate_rank(d_out, d_in, rank);
  LoraState s;
  s.a = init_matrix(kind, rank, d_in, rng);
  s.b = Matrix(d_out, rank, 0.0);
  return s;
}

UoraState make_uora(Method label, std::size_t d_out, std::size_t d_in,
                    std::size_t rank, const InitRecipe& recipe) {
  validate_rank(d_out, d_in, rank);
  if (label != Method::Uora && label != Method::Vera) {
    throw ConfigError("make_uora: label must be uora or vera");
  }
  SeededRng rng(recipe.seed, recipe.stream);
  UoraState s;
  s.label = label;
  s.a = std::make_shared<Matrix>(init_matrix(recipe.kind, rank, d_in, rng));
  s.b = std::make_shared<Matrix>(init_matrix(recipe.kind, d_out, rank, rng));
  s.d_vec = Vector(rank, kInitialDValue);
  s.b_vec = Vector(d_out, kInitialBValue);
  s.recipe = recipe;
  return s;
}

UoraState make_uora_shared(Method label, std::shared_ptr<const Matrix> a,
                           std::shared_ptr<const Matrix> b, const InitRecipe& recipe,
                           std::uint64_t handle) {
  if (!a || !b) throw ShapeError("make_uora_shared: null matrix");
  validate_rank(b->rows(), a->cols(), a->rows());
  UoraState s;
  s.label = label;
  s.d_vec = Vector(a->rows(), kInitialDValue);
  s.b_vec = Vector(b->rows(), kInitialBValue);
  s.a = std::move(a);
  s.b = std::move(b);
  s.recipe = recipe;
  s.shared_handle = handle;
  return s;
}

Matrix forward_lora(const FrozenLinear& layer, const LoraState& s, const Matrix& x) {
  check_lora(layer, s);
  Matrix h = forward_frozen(layer, x);
  const Matrix ax = matmul_nt(x, s.a);     // n x r
  const Matrix bax = matmul_nt(ax, s.b);   // n x d_out
  auto hv = h.values();
  auto dv = bax.values();
  for (std::size_t i = 0; i < hv.size(); ++i) hv[i] += dv[i];
  return h;
}

Vector forward_lora(const FrozenLinear& layer, const LoraState& s, const Vector& x) {
  check_input(x.size(), layer.d_in(), "forward_lora");
  return first_row(forward_lora(layer, s, as_row(x)));
}

Matrix forward_uora(const FrozenLinear& layer, const UoraState& s, const Matrix& x) {
  check_uora(layer, s);
  Matrix h = forward_frozen(layer, x);
  Matrix u = matmul_nt(x, *s.a);  // n x r
  for (std::size_t n = 0; n < u.rows(); ++n) {
    auto row = u.row(n);
    for (std::size_t i = 0; i < row.size(); ++i) row[i] *= s.d_vec[i];
  }
  const Matrix z = matmul_nt(u, *s.b);  // n x d_out
  for (std::size_t n = 0; n < h.rows(); ++n) {
    auto hrow = h.row(n);
    auto zrow = z.row(n);
    for (std::size_t j = 0; j < hrow.size(); ++j) hrow[j] += s.b_vec[j] * zrow[j];
  }
  return h;
}

Vector forward_uora(const FrozenLinear& layer, const UoraState& s, const Vector& x) {
  check_input(x.size(), layer.d_in(), "forward_uora");
  return first_row(forward_uora(layer, s, as_row(x)));
}

Matrix backward_uora(const FrozenLinear& layer, const UoraState& s, const Matrix& x,
                     const Matrix& grad_out, Vector& grad_d, Vector& grad_b) {
  check_uora(layer, s);
  check_input(x.cols(), layer.d_in(), "backward_uora");
  if (grad_out.rows() != x.rows() || grad_out.cols() != layer.d_out()) {
    throw ShapeError("backward_uora: grad_out shape mismatch");
  }
  if (grad_d.size() != s.rank() || grad_b.size() != s.d_out()) {
    throw ShapeError("backward_uora: gradient buffer shape mismatch");
  }
  const Matrix u = matmul_nt(x, *s.a);  // n x r
  Matrix du = u;                        // d ⊙ u
  for (std::size_t n = 0; n < du.rows(); ++n) {
    auto row = du.row(n);
    for (std::size_t i = 0; i < row.size(); ++i) row[i] *= s.d_vec[i];
  }
  const Matrix z = matmul_nt(du, *s.b);  // n x d_out

  Matrix gb = grad_out;  // b ⊙ grad_out
  for (std::size_t n = 0; n < gb.rows(); ++n) {
    auto grow = gb.row(n);
    auto orow = grad_out.row(n);
    auto zrow = z.row(n);
    for (std::size_t j = 0; j < grow.size(); ++j) {
      grad_b[j] += zrow[j] * orow[j];
      grow[j] *= s.b_vec[j];
    }
  }
  Matrix h = matmul(gb, *s.b);  // n x r : B^T (b ⊙ g) per sample
  for (std::size_t n = 0; n < h.rows(); ++n) {
    auto hrow = h.row(n);
    auto urow = u.row(n);
    for (std::size_t i = 0; i < hrow.size(); ++i) {
      grad_d[i] += urow[i] * hrow[i];
      hrow[i] *= s.d_vec[i];
    }
  }
  Matrix gx = matmul(grad_out, layer.weight);
  const Matrix gx_delta = matmul(h, *s.a);
  auto gv = gx.values();
  auto dv = gx_delta.values();
  for (std::size_t i = 0; i < gv.size(); ++i) gv[i] += dv[i];
  return gx;
}

UoraGrads backward_uora(const FrozenLinear& layer, const UoraState& s,
                        const Vector& x, const Vector& grad_out) {
  UoraGrads g{Vector(s.rank()), Vector(s.d_out()), Vector()};
  g.x = first_row(backward_uora(layer, s, as_row(x), as_row(grad_out), g.d, g.b));
  return g;
}

Matrix backward_lora(const FrozenLinear& layer, const LoraState& s, const Matrix& x,
                     const Matrix& grad_out, Matrix& grad_a, Matrix& grad_b) {
  check_lora(layer, s);
  check_input(x.cols(), layer.d_in(), "backward_lora");
  if (grad_out.rows() != x.rows() || grad_out.cols() != layer.d_out()) {
    throw ShapeError("backward_lora: grad_out shape mismatch");
  }
  if (grad_a.rows() != s.a.rows() || grad_a.cols() != s.a.cols() ||
      grad_b.rows() != s.b.rows() || grad_b.cols() != s.b.cols()) {
    throw ShapeError("backward_lora: gradient buffer shape mismatch");
  }
  const Matrix ax = matmul_nt(x, s.a);          // n x r
  const Matrix bg = matmul(grad_out, s.b);      // n x r : B^T g per sample
  grad_b = add(grad_b, matmul_tn(grad_out, ax));  // sum_n g ⊗ (A x)
  grad_a = add(grad_a, matmul_tn(bg, x));         // sum_n (B^T g) ⊗ x
  Matrix gx = matmul(grad_out, layer.weight);
  const Matrix gx_delta = matmul(bg, s.a);
  auto gv = gx.values();
  auto dv = gx_delta.values();
  for (std::size_t i = 0; i < gv.size(); ++i) gv[i] += dv[i];
  return gx;
}

LoraGrads backward_lora(const FrozenLinear& layer, const LoraState& s,
                        const Vector& x, const Vector& grad_out) {
  LoraGrads g{Matrix(s.a.rows(), s.a.cols()), Matrix(s.b.rows(), s.b.cols()), Vector()};
  g.x = first_row(backward_lora(layer, s, as_row(x), as_row(grad_out), g.a, g.b));
  return g;
}

Matrix delta_weight(const LoraState& s) { return matmul(s.b, s.a); }

Matrix delta_weight(const UoraState& s) {
  return matmul(scale_rows_cols(*s.b, s.b_vec, s.d_vec), *s.a);
}

Matrix delta_weight(const AdapterState& s) {
  return std::visit([](const auto& st) { return delta_weight(st); }, s);
}

FrozenLinear merge(const FrozenLinear& layer, const LoraState& s) {
  check_lora(layer, s);
  return FrozenLinear{add(layer.weight, delta_weight(s)), layer.bias};
}

FrozenLinear merge(const FrozenLinear& layer, const UoraState& s) {
  check_uora(layer, s);
  return FrozenLinear{add(layer.weight, delta_weight(s)), layer.bias};
}

FrozenLinear merge(const FrozenLinear& layer, const AdapterState& s) {
  return std::visit([&](const auto& st) { return merge(layer, st); }, s);
}

std::size_t trainable_count(const AdapterState& s) {
  if (const auto* l = std::get_if<LoraState>(&s)) return l->a.size() + l->b.size();
  const auto& u = std::get<UoraState>(s);
  return u.d_vec.size() + u.b_vec.size();
}

ParamCountReport count_params(Method method, std::uint64_t l_tuned,
                              std::uint64_t d_model, std::uint64_t rank) {
  if (l_tuned == 0 || d_model == 0 || rank == 0) {
    throw ConfigError("count_params: l_tuned, d_model and rank must be >= 1");
  }
  ParamCountReport rep{method, l_tuned, d_model, rank, 0};
  switch (method) {
    case Method::Lora: rep.trainable_count = 2 * l_tuned * d_model * rank; break;
    case Method::Vera:
    case Method::Uora: rep.trainable_count = l_tuned * (d_model + rank); break;
    case Method::None: rep.trainable_count = 0; break;
  }
  return rep;
}

std::string format_count(std::uint64_t count) {
  char buf[32];
  if (count >= 1'000'000) {
    std::snprintf(buf, sizeof buf, "%.1fM", static_cast<double>(count) / 1e6);
  } else if (count >= 1'000) {
    std::snprintf(buf, sizeof buf, "%.1fK", static_cast<double>(count) / 1e3);
  } else {
    std::snprintf(buf, sizeof buf, "%llu", static_cast<unsigned long long>(count));
  }
  return buf;
}

}  // namespace uora
