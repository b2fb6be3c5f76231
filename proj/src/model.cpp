#include "uora/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "uora/errors.hpp"

namespace uora {

namespace {

constexpr double kLayerNormEps = 1e-5;

const char* const kBlockProjections[] = {"query", "value", "key",
                                         "output", "mlp_in", "mlp_out"};
enum BlockSlot { kQuery = 0, kValue = 1, kKey = 2, kOutput = 3, kFfIn = 4, kFfOut = 5 };
constexpr std::size_t kSlotsPerBlock = 6;

Matrix random_weight(std::size_t rows, std::size_t cols, double scale, SeededRng& rng) {
  Matrix w(rows, cols);
  const double s = scale / std::sqrt(static_cast<double>(cols));
  for (double& v : w.values()) v = rng.normal() * s;
  return w;
}

// Row-wise layer norm without affine parameters.
Matrix layer_norm(const Matrix& x, Vector& inv_sigma) {
  Matrix y(x.rows(), x.cols());
  inv_sigma = Vector(x.rows());
  const double n = static_cast<double>(x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto xr = x.row(r);
    double mean = 0.0;
    for (double v : xr) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : xr) var += (v - mean) * (v - mean);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    inv_sigma[r] = inv;
    auto yr = y.row(r);
    for (std::size_t c = 0; c < xr.size(); ++c) yr[c] = (xr[c] - mean) * inv;
  }
  return y;
}

Matrix layer_norm_backward(const Matrix& y, const Vector& inv_sigma, const Matrix& dy) {
  Matrix dx(y.rows(), y.cols());
  const double n = static_cast<double>(y.cols());
  for (std::size_t r = 0; r < y.rows(); ++r) {
    auto yr = y.row(r);
    auto gr = dy.row(r);
    double mean_g = 0.0, mean_gy = 0.0;
    for (std::size_t c = 0; c < yr.size(); ++c) {
      mean_g += gr[c];
      mean_gy += gr[c] * yr[c];
    }
    mean_g /= n;
    mean_gy /= n;
    auto xr = dx.row(r);
    for (std::size_t c = 0; c < yr.size(); ++c) {
      xr[c] = inv_sigma[r] * (gr[c] - mean_g - yr[c] * mean_gy);
    }
  }
  return dx;
}

void add_into(Matrix& dst, const Matrix& src) {
  auto d = dst.values();
  auto s = src.values();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

Matrix head_columns(const Matrix& m, std::size_t first, std::size_t width) {
  Matrix out(m.rows(), width);
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < width; ++c) out(r, c) = m(r, first + c);
  return out;
}

void set_head_columns(Matrix& m, std::size_t first, const Matrix& part) {
  for (std::size_t r = 0; r < part.rows(); ++r)
    for (std::size_t c = 0; c < part.cols(); ++c) m(r, first + c) = part(r, c);
}

}  // namespace

struct MlpCache {
  std::vector<Matrix> inputs;  // input to each layer
  std::vector<Matrix> pre;     // pre-activation output of each layer
};

struct BlockCache {
  Matrix x_in, h1;
  Vector inv1;
  Matrix q, k, v;
  std::vector<Matrix> probs;  // per attention head, seq x seq
  Matrix attn;                // concatenated head outputs
  Matrix x1, h2;
  Vector inv2;
  Matrix f1, act;
};

struct SeqCache {
  std::vector<BlockCache> blocks;
  Matrix y_final;
  Vector inv_final;
};

std::string_view to_string(ArchKind a) {
  return a == ArchKind::Mlp ? "mlp" : "mini_transformer";
}

ArchKind parse_arch(std::string_view name) {
  if (name == "mlp") return ArchKind::Mlp;
  if (name == "mini_transformer" || name == "transformer") return ArchKind::MiniTransformer;
  throw ConfigError("unknown architecture '" + std::string(name) + "'");
}

bool is_projection_name(std::string_view name) {
  return std::any_of(std::begin(kBlockProjections), std::end(kBlockProjections),
                     [&](const char* p) { return name == p; });
}

void validate(const ModelSpec& spec) {
  for (const auto& p : spec.adapted) {
    if (!is_projection_name(p)) throw ConfigError("unknown projection '" + p + "'");
  }
  if (spec.arch == ArchKind::Mlp) {
    if (spec.widths.size() < 2) throw ConfigError("mlp needs at least two widths");
    for (auto w : spec.widths)
      if (w == 0) throw ConfigError("mlp width must be >= 1");
    for (const auto& p : spec.adapted) {
      if (p != "mlp_in" && p != "mlp_out") {
        throw ConfigError("projection '" + p + "' does not exist in an mlp");
      }
      if (p == "mlp_in" && spec.widths.size() < 3) {
        throw ConfigError("projection 'mlp_in' needs a hidden layer");
      }
    }
  } else {
    if (spec.n_blocks == 0 || spec.d_model == 0 || spec.n_heads == 0 ||
        spec.ff_mult == 0 || spec.seq_len == 0 || spec.vocab == 0) {
      throw ConfigError("mini_transformer dimensions must be >= 1");
    }
    if (spec.d_model % spec.n_heads != 0) {
      throw ConfigError("d_model must be divisible by n_heads");
    }
  }
  if (spec.method != Method::None) {
    if (spec.adapted.empty()) throw ConfigError("adapter method set but no projections");
    if (spec.rank == 0) throw ConfigError("rank must be >= 1");
  }
  validate(spec.init);
}

void AdaptedLinear::attach(AdapterState s) {
  if (const auto* l = std::get_if<LoraState>(&s)) {
    if (l->b.rows() != base_.d_out() || l->a.cols() != base_.d_in()) {
      throw ShapeError("attach: LoRA dims do not match layer " + name_);
    }
  } else {
    const auto& u = std::get<UoraState>(s);
    if (u.d_out() != base_.d_out() || u.d_in() != base_.d_in()) {
      throw ShapeError("attach: UORA dims do not match layer " + name_);
    }
  }
  adapter_ = std::move(s);
  zero_grad();
}

Matrix AdaptedLinear::forward(const Matrix& x) const {
  if (!adapter_) return forward_frozen(base_, x);
  if (const auto* l = std::get_if<LoraState>(&*adapter_)) return forward_lora(base_, *l, x);
  return forward_uora(base_, std::get<UoraState>(*adapter_), x);
}

Matrix AdaptedLinear::backward(const Matrix& x, const Matrix& grad_out) {
  if (!adapter_) return matmul(grad_out, base_.weight);
  if (const auto* l = std::get_if<LoraState>(&*adapter_)) {
    return backward_lora(base_, *l, x, grad_out, grad_a_mat_, grad_b_mat_);
  }
  return backward_uora(base_, std::get<UoraState>(*adapter_), x, grad_out, grad_d_, grad_b_);
}

void AdaptedLinear::zero_grad() {
  // Zero in place once sized: the parameter registry holds spans into these.
  auto reset = [](auto& buf, auto make) {
    if (buf.size() == make().size()) {
      std::fill(buf.values().begin(), buf.values().end(), 0.0);
    } else {
      buf = make();
    }
  };
  if (!adapter_) return;
  if (const auto* l = std::get_if<LoraState>(&*adapter_)) {
    reset(grad_a_mat_, [&] { return Matrix(l->a.rows(), l->a.cols()); });
    reset(grad_b_mat_, [&] { return Matrix(l->b.rows(), l->b.cols()); });
  } else {
    const auto& u = std::get<UoraState>(*adapter_);
    reset(grad_d_, [&] { return Vector(u.rank()); });
    reset(grad_b_, [&] { return Vector(u.d_out()); });
  }
}

void AdaptedLinear::add_params(std::size_t index, std::vector<ParamRef>& out) {
  if (!adapter_) return;
  if (auto* l = std::get_if<LoraState>(&*adapter_)) {
    out.push_back({name_ + ".lora_A", ParamGroup::Adapter, l->a.values(),
                   grad_a_mat_.values(), index, false});
    out.push_back({name_ + ".lora_B", ParamGroup::Adapter, l->b.values(),
                   grad_b_mat_.values(), index, false});
  } else {
    auto& u = std::get<UoraState>(*adapter_);
    out.push_back({name_ + ".d", ParamGroup::Adapter, u.d_vec.values(), grad_d_.values(),
                   index, true});
    out.push_back({name_ + ".b", ParamGroup::Adapter, u.b_vec.values(), grad_b_.values(),
                   index, false});
  }
}

Matrix Model::forward_mlp(const Matrix& x, MlpCache* cache) const {
  Matrix a = x;
  for (std::size_t l = 0; l < linears_.size(); ++l) {
    Matrix z = linears_[l].forward(a);
    if (cache) {
      cache->inputs.push_back(std::move(a));
      cache->pre.push_back(z);
    }
    if (l + 1 < linears_.size()) {
      for (double& v : z.values()) v = std::max(v, 0.0);
    }
    a = std::move(z);
  }
  return a;
}

void Model::backward_mlp(const MlpCache& cache, const Matrix& grad_out) {
  Matrix g = grad_out;
  for (std::size_t l = linears_.size(); l-- > 0;) {
    if (l + 1 < linears_.size()) {
      auto gv = g.values();
      auto pv = cache.pre[l].values();
      for (std::size_t i = 0; i < gv.size(); ++i)
        if (pv[i] <= 0.0) gv[i] = 0.0;
    }
    g = linears_[l].backward(cache.inputs[l], g);
  }
}

Vector Model::forward_tokens(const std::vector<std::uint32_t>& seq,
                             SeqCache* cache) const {
  const auto& emb = *embeddings_;
  const std::size_t T = seq.size();
  const std::size_t D = spec_.d_model;
  const std::size_t H = spec_.n_heads;
  const std::size_t dh = D / H;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  if (T != spec_.seq_len) throw ShapeError("sequence length mismatch");

  Matrix x(T, D);
  for (std::size_t t = 0; t < T; ++t) {
    if (seq[t] >= spec_.vocab) throw ShapeError("token out of vocabulary");
    for (std::size_t c = 0; c < D; ++c) {
      x(t, c) = emb.token(seq[t], c) + emb.position(t, c);
    }
  }

  for (std::size_t b = 0; b < spec_.n_blocks; ++b) {
    const AdaptedLinear* slot = &linears_[b * kSlotsPerBlock];
    BlockCache bc;
    bc.h1 = layer_norm(x, bc.inv1);
    bc.q = slot[kQuery].forward(bc.h1);
    bc.k = slot[kKey].forward(bc.h1);
    bc.v = slot[kValue].forward(bc.h1);
    bc.attn = Matrix(T, D);
    for (std::size_t h = 0; h < H; ++h) {
      const Matrix qh = head_columns(bc.q, h * dh, dh);
      const Matrix kh = head_columns(bc.k, h * dh, dh);
      const Matrix vh = head_columns(bc.v, h * dh, dh);
      Matrix p = matmul_nt(qh, kh);
      for (std::size_t r = 0; r < T; ++r) {
        auto row = p.row(r);
        double mx = -INFINITY;
        for (double& s : row) {
          s *= inv_sqrt_dh;
          mx = std::max(mx, s);
        }
        double z = 0.0;
        for (double& s : row) {
          s = std::exp(s - mx);
          z += s;
        }
        for (double& s : row) s /= z;
      }
      set_head_columns(bc.attn, h * dh, matmul(p, vh));
      bc.probs.push_back(std::move(p));
    }
    Matrix x1 = x;
    add_into(x1, slot[kOutput].forward(bc.attn));
    bc.h2 = layer_norm(x1, bc.inv2);
    bc.f1 = slot[kFfIn].forward(bc.h2);
    bc.act = bc.f1;
    for (double& v : bc.act.values()) v = std::max(v, 0.0);
    Matrix x2 = x1;
    add_into(x2, slot[kFfOut].forward(bc.act));
    if (cache) {
      bc.x_in = std::move(x);
      bc.x1 = std::move(x1);
      cache->blocks.push_back(std::move(bc));
    }
    x = std::move(x2);
  }

  Vector inv_final;
  Matrix y = layer_norm(x, inv_final);
  Vector pooled(D);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < D; ++c) pooled[c] += y(t, c);
  for (std::size_t c = 0; c < D; ++c) pooled[c] /= static_cast<double>(T);
  if (cache) {
    cache->y_final = std::move(y);
    cache->inv_final = std::move(inv_final);
  }
  return pooled;
}

void Model::backward_tokens(const SeqCache& cache, const Vector& grad_pooled) {
  const std::size_t T = spec_.seq_len;
  const std::size_t D = spec_.d_model;
  const std::size_t H = spec_.n_heads;
  const std::size_t dh = D / H;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  Matrix dy(T, D);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < D; ++c) dy(t, c) = grad_pooled[c] / static_cast<double>(T);
  Matrix dx = layer_norm_backward(cache.y_final, cache.inv_final, dy);

  for (std::size_t b = spec_.n_blocks; b-- > 0;) {
    AdaptedLinear* slot = &linears_[b * kSlotsPerBlock];
    const BlockCache& bc = cache.blocks[b];

    // Feed-forward residual branch.
    Matrix d_act = slot[kFfOut].backward(bc.act, dx);
    {
      auto g = d_act.values();
      auto f = bc.f1.values();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (f[i] <= 0.0) g[i] = 0.0;
    }
    const Matrix d_h2 = slot[kFfIn].backward(bc.h2, d_act);
    Matrix dx1 = dx;
    add_into(dx1, layer_norm_backward(bc.h2, bc.inv2, d_h2));

    // Attention residual branch.
    const Matrix d_attn = slot[kOutput].backward(bc.attn, dx1);
    Matrix dq(T, D), dk(T, D), dv(T, D);
    for (std::size_t h = 0; h < H; ++h) {
      const Matrix& p = bc.probs[h];
      const Matrix qh = head_columns(bc.q, h * dh, dh);
      const Matrix kh = head_columns(bc.k, h * dh, dh);
      const Matrix vh = head_columns(bc.v, h * dh, dh);
      const Matrix doh = head_columns(d_attn, h * dh, dh);
      const Matrix dp = matmul_nt(doh, vh);   // T x T
      set_head_columns(dv, h * dh, matmul_tn(p, doh));
      Matrix ds(T, T);
      for (std::size_t r = 0; r < T; ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < T; ++c) dot += dp(r, c) * p(r, c);
        for (std::size_t c = 0; c < T; ++c) {
          ds(r, c) = p(r, c) * (dp(r, c) - dot) * inv_sqrt_dh;
        }
      }
      set_head_columns(dq, h * dh, matmul(ds, kh));
      set_head_columns(dk, h * dh, matmul_tn(ds, qh));
    }
    Matrix d_h1 = slot[kQuery].backward(bc.h1, dq);
    add_into(d_h1, slot[kKey].backward(bc.h1, dk));
    add_into(d_h1, slot[kValue].backward(bc.h1, dv));
    dx = std::move(dx1);
    add_into(dx, layer_norm_backward(bc.h1, bc.inv1, d_h1));
  }
}

Matrix Model::features(const Dataset& batch, MlpCache* mlp,
                       std::vector<SeqCache>* seqs) const {
  if (spec_.arch == ArchKind::Mlp) {
    if (batch.inputs.cols() != spec_.widths.front()) {
      throw ShapeError("input width " + std::to_string(batch.inputs.cols()) +
                       " does not match model input " +
                       std::to_string(spec_.widths.front()));
    }
    return forward_mlp(batch.inputs, mlp);
  }
  Matrix out(batch.tokens.size(), spec_.d_model);
  for (std::size_t n = 0; n < batch.tokens.size(); ++n) {
    SeqCache* cache = nullptr;
    if (seqs) cache = &seqs->emplace_back();
    const Vector pooled = forward_tokens(batch.tokens[n], cache);
    out.set_row(n, pooled);
  }
  return out;
}

Matrix Model::predict(const Dataset& batch) const {
  Matrix f = features(batch, nullptr, nullptr);
  if (!head_) return f;
  Matrix logits = matmul_nt(f, head_->weight);
  for (std::size_t n = 0; n < logits.rows(); ++n) {
    auto row = logits.row(n);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += head_->bias[c];
  }
  return logits;
}

namespace {

// Fills `grad` with dLoss/dOutputs when non-null.
LossResult loss_from_outputs(const Matrix& out, const Dataset& batch, bool classify,
                             Matrix* grad) {
  LossResult res;
  const std::size_t n = out.rows();
  if (n == 0) throw ShapeError("empty batch");
  if (grad) *grad = Matrix(out.rows(), out.cols());
  if (!classify) {
    if (batch.targets.rows() != n || batch.targets.cols() != out.cols()) {
      throw ShapeError("target shape mismatch");
    }
    const double denom = static_cast<double>(out.size());
    double sum = 0.0;
    auto o = out.values();
    auto t = batch.targets.values();
    for (std::size_t i = 0; i < o.size(); ++i) {
      const double e = o[i] - t[i];
      sum += e * e;
      if (grad) grad->values()[i] = 2.0 * e / denom;
    }
    res.loss = sum / denom;
    return res;
  }
  if (batch.labels.size() != n) throw ShapeError("label count mismatch");
  double sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t r = 0; r < n; ++r) {
    auto row = out.row(r);
    const std::uint32_t label = batch.labels[r];
    if (label >= row.size()) throw ShapeError("label out of range");
    const auto best = static_cast<std::size_t>(
        std::max_element(row.begin(), row.end()) - row.begin());
    if (best == label) ++correct;
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    const double log_z = mx + std::log(z);
    sum += log_z - row[label];
    if (grad) {
      auto g = grad->row(r);
      for (std::size_t c = 0; c < row.size(); ++c) {
        g[c] = std::exp(row[c] - log_z) / static_cast<double>(n);
      }
      g[label] -= 1.0 / static_cast<double>(n);
    }
  }
  res.loss = sum / static_cast<double>(n);
  res.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  return res;
}

}  // namespace

LossResult Model::loss(const Dataset& batch) const {
  return loss_from_outputs(predict(batch), batch, head_.has_value(), nullptr);
}

LossResult Model::loss_and_grad(const Dataset& batch) {
  MlpCache mlp;
  std::vector<SeqCache> seqs;
  const Matrix f = features(batch, &mlp, &seqs);
  Matrix out = f;
  if (head_) {
    out = matmul_nt(f, head_->weight);
    for (std::size_t n = 0; n < out.rows(); ++n) {
      auto row = out.row(n);
      for (std::size_t c = 0; c < row.size(); ++c) row[c] += head_->bias[c];
    }
  }
  Matrix grad_out;
  const LossResult res = loss_from_outputs(out, batch, head_.has_value(), &grad_out);

  Matrix grad_f = grad_out;
  if (head_) {
    add_into(head_->grad_weight, matmul_tn(grad_out, f));
    for (std::size_t n = 0; n < grad_out.rows(); ++n) {
      auto g = grad_out.row(n);
      for (std::size_t c = 0; c < g.size(); ++c) head_->grad_bias[c] += g[c];
    }
    grad_f = matmul(grad_out, head_->weight);
  }
  if (spec_.arch == ArchKind::Mlp) {
    backward_mlp(mlp, grad_f);
  } else {
    for (std::size_t n = 0; n < seqs.size(); ++n) {
      backward_tokens(seqs[n], grad_f.row_vector(n));
    }
  }
  return res;
}

void Model::zero_grad() {
  for (auto& l : linears_) l.zero_grad();
  if (head_) {
    if (head_->grad_weight.size() != head_->weight.size()) {
      head_->grad_weight = Matrix(head_->weight.rows(), head_->weight.cols());
      head_->grad_bias = Vector(head_->bias.size());
    }
    std::fill(head_->grad_weight.values().begin(), head_->grad_weight.values().end(), 0.0);
    std::fill(head_->grad_bias.values().begin(), head_->grad_bias.values().end(), 0.0);
  }
}

std::vector<ParamRef> Model::parameters() {
  std::vector<ParamRef> out;
  for (std::size_t i = 0; i < linears_.size(); ++i) linears_[i].add_params(i, out);
  if (head_) {
    out.push_back({"head.weight", ParamGroup::Head, head_->weight.values(),
                   head_->grad_weight.values(), 0, false});
    out.push_back({"head.bias", ParamGroup::Head, head_->bias.values(),
                   head_->grad_bias.values(), 0, false});
  }
  return out;
}

std::uint64_t Model::frozen_checksum() const {
  std::vector<double> all;
  for (const auto& l : linears_) {
    auto w = l.base().weight.values();
    all.insert(all.end(), w.begin(), w.end());
    if (l.base().bias) {
      auto b = l.base().bias->values();
      all.insert(all.end(), b.begin(), b.end());
    }
  }
  if (embeddings_) {
    auto t = embeddings_->token.values();
    auto p = embeddings_->position.values();
    all.insert(all.end(), t.begin(), t.end());
    all.insert(all.end(), p.begin(), p.end());
  }
  return checksum(all);
}

std::uint64_t Model::adapter_matrix_checksum() const {
  std::vector<double> all;
  for (const auto& l : linears_) {
    if (const auto* u = l.uora()) {
      all.insert(all.end(), u->a->values().begin(), u->a->values().end());
      all.insert(all.end(), u->b->values().begin(), u->b->values().end());
    }
  }
  return checksum(all);
}

Model Model::merged() const {
  Model m;
  m.spec_ = spec_;
  m.spec_.method = Method::None;
  m.spec_.adapted.clear();
  m.embeddings_ = embeddings_;
  m.head_ = head_;
  for (const auto& l : linears_) {
    FrozenLinear base = l.has_adapter() ? merge(l.base(), l.adapter()) : l.base();
    m.linears_.emplace_back(l.id(), l.name(), std::move(base));
  }
  return m;
}

std::size_t Model::adapter_param_count() const {
  std::size_t n = 0;
  for (const auto& l : linears_)
    if (l.has_adapter()) n += trainable_count(l.adapter());
  return n;
}

std::size_t Model::adapted_layer_count() const {
  return static_cast<std::size_t>(std::count_if(
      linears_.begin(), linears_.end(), [](const auto& l) { return l.has_adapter(); }));
}

Model build_model(const ModelSpec& spec_in, std::uint64_t seed, const SyntheticTask* task) {
  ModelSpec spec = spec_in;
  if (task && task->is_classification() && spec.head_outputs == 0) {
    spec.head_outputs = task->n_classes();
  }
  validate(spec);
  if (spec.arch == ArchKind::MiniTransformer && spec.head_outputs == 0) {
    throw ConfigError("mini_transformer needs a classification head");
  }

  Model m;
  SeededRng base_rng(seed, streams::kBaseWeights);
  std::size_t features = 0;

  if (spec.arch == ArchKind::Mlp) {
    const std::size_t n_layers = spec.widths.size() - 1;
    const bool from_task = task && task->spec().kind == TaskKind::LowRankRecovery;
    if (task) {
      if (spec.widths.front() != task->input_dim()) {
        throw ConfigError("model input width does not match task input");
      }
      if (task->uses_tokens()) throw ConfigError("mlp cannot consume token tasks");
    }
    if (from_task) {
      if (n_layers != 1 || spec.widths.back() != task->output_dim() ||
          spec.head_outputs != 0) {
        throw ConfigError(
            "low_rank_recovery needs a single-layer mlp {d_in, d_out} without a head");
      }
    }
    for (std::size_t l = 0; l < n_layers; ++l) {
      const std::size_t in = spec.widths[l];
      const std::size_t out = spec.widths[l + 1];
      FrozenLinear base;
      const bool last = l + 1 == n_layers;
      if (from_task) {
        base.weight = task->base_weight();
      } else {
        base.weight = random_weight(out, in, last ? 1.0 : std::sqrt(2.0), base_rng);
        Vector bias(out);
        for (std::size_t i = 0; i < out; ++i) bias[i] = 0.1 * base_rng.normal();
        base.bias = std::move(bias);
      }
      m.linears_.emplace_back(static_cast<std::uint32_t>(l), last ? "mlp_out" : "mlp_in",
                              std::move(base));
    }
    features = spec.widths.back();
  } else {
    if (!task || !task->uses_tokens()) {
      // Tasks are optional here; when given they must be token tasks.
      if (task) throw ConfigError("mini_transformer needs a token task");
    } else if (task->spec().seq_len != spec.seq_len || task->spec().vocab != spec.vocab) {
      throw ConfigError("mini_transformer seq_len/vocab do not match task");
    }
    Model::Embeddings emb;
    emb.token = Matrix(spec.vocab, spec.d_model);
    emb.position = Matrix(spec.seq_len, spec.d_model);
    for (double& v : emb.token.values()) v = base_rng.normal();
    for (double& v : emb.position.values()) v = base_rng.normal();
    m.embeddings_ = std::move(emb);
    const std::size_t D = spec.d_model;
    const std::size_t F = spec.d_model * spec.ff_mult;
    for (std::size_t b = 0; b < spec.n_blocks; ++b) {
      for (std::size_t s = 0; s < kSlotsPerBlock; ++s) {
        const std::size_t out = s == kFfIn ? F : D;
        const std::size_t in = s == kFfOut ? F : D;
        FrozenLinear base{random_weight(out, in, 1.0, base_rng), std::nullopt};
        const auto id = static_cast<std::uint32_t>(b * kSlotsPerBlock + s);
        m.linears_.emplace_back(id,
                                "block" + std::to_string(b) + "." + kBlockProjections[s],
                                std::move(base));
      }
    }
    features = D;
  }

  if (spec.head_outputs > 0) {
    Head h;
    h.weight = Matrix(spec.head_outputs, features);
    h.bias = Vector(spec.head_outputs);
    m.head_ = std::move(h);
  }

  if (spec.method != Method::None) {
    const bool share = spec.share_matrices.value_or(spec.method == Method::Vera);
    std::map<std::pair<std::size_t, std::size_t>, std::uint64_t> groups;
    std::map<std::uint64_t, UoraState> group_templates;
    for (auto& l : m.linears_) {
      std::string role = l.name();
      if (auto dot = role.find('.'); dot != std::string::npos) role = role.substr(dot + 1);
      if (!spec.adapted.count(role)) continue;
      const std::size_t d_out = l.base().d_out();
      const std::size_t d_in = l.base().d_in();
      validate_rank(d_out, d_in, spec.rank);
      if (spec.method == Method::Lora) {
        SeededRng rng(seed, streams::kAdapterInit + l.id());
        l.attach(make_lora(d_out, d_in, spec.rank, spec.init, rng));
        continue;
      }
      if (!share) {
        const InitRecipe recipe{spec.init, seed, streams::kAdapterInit + l.id()};
        l.attach(make_uora(spec.method, d_out, d_in, spec.rank, recipe));
        continue;
      }
      auto [it, inserted] =
          groups.try_emplace({d_out, d_in}, static_cast<std::uint64_t>(groups.size()));
      const std::uint64_t handle = it->second;
      const InitRecipe recipe{spec.init, seed, streams::kSharedInit + handle};
      if (inserted) {
        group_templates.emplace(handle,
                                make_uora(spec.method, d_out, d_in, spec.rank, recipe));
      }
      const UoraState& tpl = group_templates.at(handle);
      l.attach(make_uora_shared(spec.method, tpl.a, tpl.b, recipe, handle));
    }
  }
  m.spec_ = spec;
  return m;
}

}  // namespace uora
