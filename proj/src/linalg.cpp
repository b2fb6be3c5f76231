#include "uora/linalg.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numbers>

#include "uora/errors.hpp"

namespace uora {

namespace {

std::string dims(std::size_t r, std::size_t c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

void require_same(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw ShapeError(std::string(what) + ": length mismatch " + std::to_string(a) +
                     " vs " + std::to_string(b));
  }
}

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ ? rows.begin()->size() : 0;
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw ShapeError("ragged matrix literal");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Vector Matrix::column(std::size_t c) const {
  if (c >= cols_) throw BoundsError("column index out of range");
  Vector v(rows_);
  for (std::size_t r = 0; r < rows_; ++r) v[r] = (*this)(r, c);
  return v;
}

void Matrix::set_column(std::size_t c, const Vector& v) {
  if (c >= cols_) throw BoundsError("column index out of range");
  require_same(v.size(), rows_, "set_column");
  for (std::size_t r = 0; r < rows_; ++r) (*this)(r, c) = v[r];
}

void Matrix::set_row(std::size_t r, const Vector& v) {
  if (r >= rows_) throw BoundsError("row index out of range");
  require_same(v.size(), cols_, "set_row");
  std::copy(v.values().begin(), v.values().end(), row(r).begin());
}

Vector Matrix::row_vector(std::size_t r) const {
  if (r >= rows_) throw BoundsError("row index out of range");
  auto s = row(r);
  return Vector(std::vector<double>(s.begin(), s.end()));
}

Matrix Matrix::transposed() const {
  Matrix t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  return t;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + dims(a.rows(), a.cols()) + " x " +
                     dims(b.rows(), b.cols()));
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto orow = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      auto brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: " + dims(a.rows(), a.cols()) + " x (" +
                     dims(b.rows(), b.cols()) + ")^T");
  }
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto arow = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      auto brow = b.row(j);
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += arow[k] * brow[k];
      out(i, j) = acc;
    }
  }
  return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: (" + dims(a.rows(), a.cols()) + ")^T x " +
                     dims(b.rows(), b.cols()));
  }
  Matrix out(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    auto arow = a.row(k);
    auto brow = b.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = arow[i];
      auto orow = out.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aki * brow[j];
    }
  }
  return out;
}

Vector matvec(const Matrix& a, const Vector& x) {
  if (a.cols() != x.size()) {
    throw ShapeError("matvec: " + dims(a.rows(), a.cols()) + " x " +
                     std::to_string(x.size()));
  }
  Vector out(a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto arow = a.row(i);
    double acc = 0.0;
    for (std::size_t k = 0; k < a.cols(); ++k) acc += arow[k] * x[k];
    out[i] = acc;
  }
  return out;
}

Vector matvec_t(const Matrix& a, const Vector& x) {
  if (a.rows() != x.size()) {
    throw ShapeError("matvec_t: (" + dims(a.rows(), a.cols()) + ")^T x " +
                     std::to_string(x.size()));
  }
  Vector out(a.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    auto arow = a.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) out[i] += arow[i] * x[k];
  }
  return out;
}

Vector hadamard(const Vector& a, const Vector& b) {
  require_same(a.size(), b.size(), "hadamard");
  Vector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  return out;
}

Vector add(const Vector& a, const Vector& b) {
  require_same(a.size(), b.size(), "add");
  Vector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

Matrix add(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("add: " + dims(a.rows(), a.cols()) + " vs " +
                     dims(b.rows(), b.cols()));
  }
  Matrix out = a;
  auto o = out.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
  return out;
}

Matrix outer(const Vector& a, const Vector& b) {
  Matrix out(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) out(i, j) = a[i] * b[j];
  return out;
}

Matrix scale_rows_cols(const Matrix& m, const Vector& left, const Vector& right) {
  if (left.size() != 0) require_same(left.size(), m.rows(), "scale_rows_cols");
  if (right.size() != 0) require_same(right.size(), m.cols(), "scale_rows_cols");
  Matrix out = m;
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) {
      double v = out(r, c);
      if (left.size() != 0) v *= left[r];
      if (right.size() != 0) v *= right[c];
      out(r, c) = v;
    }
  }
  return out;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("max_abs_diff: shape mismatch");
  }
  double m = 0.0;
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) m = std::max(m, std::abs(av[i] - bv[i]));
  return m;
}

double max_abs_diff(const Vector& a, const Vector& b) {
  require_same(a.size(), b.size(), "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(),
                     [](double v) { return std::isfinite(v); });
}

Vector lerp(const Vector& v_old, const Vector& v_rand, double alpha) {
  require_same(v_old.size(), v_rand.size(), "lerp");
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw ConfigError("lerp: alpha must lie in [0, 1], got " + std::to_string(alpha));
  }
  // Exact copies at the endpoints, independent of v_rand's contents.
  if (alpha == 1.0) return v_old;
  if (alpha == 0.0) return v_rand;
  Vector out(v_old.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = alpha * v_old[i] + (1.0 - alpha) * v_rand[i];
  }
  return out;
}

std::uint64_t checksum(std::span<const double> values) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (double v : values) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
    for (int b = 0; b < 8; ++b) {
      h ^= (bits >> (8 * b)) & 0xFFu;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

SeededRng::SeededRng(std::uint64_t seed, std::uint64_t stream_id)
    : seed_(seed),
      stream_id_(stream_id),
      key_(mix64(seed ^ mix64(stream_id + kGolden))) {}

std::uint64_t SeededRng::next_u64() noexcept {
  const std::uint64_t c = cursor_++;
  return mix64(key_ + (c + 1) * kGolden);
}

double SeededRng::uniform01() noexcept {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double SeededRng::uniform(double lo, double hi) noexcept {
  return lo + (hi - lo) * uniform01();
}

double SeededRng::normal() noexcept {
  const double u1 = 1.0 - uniform01();  // (0, 1]
  const double u2 = uniform01();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t SeededRng::below(std::uint64_t n) noexcept {
  // Lemire-style multiply-shift; bias is negligible at desk scale.
  return static_cast<std::uint64_t>(
      (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
}

std::string_view to_string(InitFamily family) {
  switch (family) {
    case InitFamily::OrthogonalUniform: return "orthogonal";
    case InitFamily::KaimingUniform: return "kaiming";
    case InitFamily::XavierUniform: return "xavier";
    case InitFamily::RandomUniform: return "random";
  }
  return "unknown";
}

InitFamily parse_init_family(std::string_view name) {
  if (name == "orthogonal" || name == "orthogonal_uniform") return InitFamily::OrthogonalUniform;
  if (name == "kaiming" || name == "kaiming_uniform") return InitFamily::KaimingUniform;
  if (name == "xavier" || name == "xavier_uniform") return InitFamily::XavierUniform;
  if (name == "random" || name == "random_uniform") return InitFamily::RandomUniform;
  throw ConfigError("unknown init kind '" + std::string(name) + "'");
}

void validate(const InitKind& kind) {
  if (!(kind.gain > 0.0) || !std::isfinite(kind.gain)) {
    throw ConfigError("init gain must be > 0");
  }
}

double uniform_bound(const InitKind& kind, std::size_t fan_in, std::size_t fan_out) {
  const double fi = static_cast<double>(fan_in);
  const double fo = static_cast<double>(fan_out);
  switch (kind.family) {
    case InitFamily::KaimingUniform: return kind.gain * std::sqrt(6.0 / fi);
    case InitFamily::XavierUniform: return kind.gain * std::sqrt(6.0 / (fi + fo));
    case InitFamily::RandomUniform: return kind.gain / std::sqrt(fi);
    case InitFamily::OrthogonalUniform: break;
  }
  throw ConfigError("orthogonal init has no uniform bound");
}

Matrix orthonormal_columns(const Matrix& tall) {
  const std::size_t m = tall.rows();
  const std::size_t n = tall.cols();
  if (m < n) throw ShapeError("orthonormal_columns: expected rows >= cols");

  Matrix work = tall;
  std::vector<std::vector<double>> reflectors;
  std::vector<double> r_diag(n);
  reflectors.reserve(n);

  for (std::size_t k = 0; k < n; ++k) {
    std::vector<double> v(m - k);
    double norm2 = 0.0;
    for (std::size_t i = k; i < m; ++i) {
      v[i - k] = work(i, k);
      norm2 += v[i - k] * v[i - k];
    }
    const double norm = std::sqrt(norm2);
    const double alpha = v[0] >= 0.0 ? -norm : norm;
    r_diag[k] = alpha;
    v[0] -= alpha;
    double vnorm2 = 0.0;
    for (double e : v) vnorm2 += e * e;
    if (vnorm2 > 0.0) {
      const double inv = 1.0 / std::sqrt(vnorm2);
      for (double& e : v) e *= inv;
      for (std::size_t j = k; j < n; ++j) {
        double dot = 0.0;
        for (std::size_t i = k; i < m; ++i) dot += v[i - k] * work(i, j);
        for (std::size_t i = k; i < m; ++i) work(i, j) -= 2.0 * v[i - k] * dot;
      }
    }
    reflectors.push_back(std::move(v));
  }

  // Q = H_0 H_1 ... H_{n-1} applied to the first n columns of I.
  Matrix q(m, n);
  for (std::size_t j = 0; j < n; ++j) q(j, j) = 1.0;
  for (std::size_t kk = n; kk-- > 0;) {
    const auto& v = reflectors[kk];
    for (std::size_t j = 0; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t i = kk; i < m; ++i) dot += v[i - kk] * q(i, j);
      for (std::size_t i = kk; i < m; ++i) q(i, j) -= 2.0 * v[i - kk] * dot;
    }
  }
  for (std::size_t j = 0; j < n; ++j) {
    if (r_diag[j] < 0.0) {
      for (std::size_t i = 0; i < m; ++i) q(i, j) = -q(i, j);
    }
  }
  return q;
}

Matrix init_matrix(const InitKind& kind, std::size_t rows, std::size_t cols,
                   SeededRng& rng) {
  validate(kind);
  if (rows == 0 || cols == 0) throw ShapeError("init_matrix: empty shape");

  if (kind.family == InitFamily::OrthogonalUniform) {
    const std::size_t tall_rows = std::max(rows, cols);
    const std::size_t tall_cols = std::min(rows, cols);
    Matrix gauss(tall_rows, tall_cols);
    for (double& v : gauss.values()) v = rng.normal();
    Matrix q = orthonormal_columns(gauss);
    Matrix out = rows >= cols ? std::move(q) : q.transposed();
    for (double& v : out.values()) v *= kind.gain;
    return out;
  }

  const double bound = uniform_bound(kind, cols, rows);
  Matrix out(rows, cols);
  for (double& v : out.values()) v = rng.uniform(-bound, bound);
  return out;
}

Vector draw_segment(const InitKind& kind, std::size_t len, std::size_t rows,
                    std::size_t cols, SeededRng& rng) {
  validate(kind);
  Vector out(len);
  if (kind.family == InitFamily::OrthogonalUniform) {
    double norm2 = 0.0;
    for (std::size_t i = 0; i < len; ++i) {
      out[i] = rng.normal();
      norm2 += out[i] * out[i];
    }
    const double scale = kind.gain / std::sqrt(norm2);
    for (std::size_t i = 0; i < len; ++i) out[i] *= scale;
    return out;
  }
  const double bound = uniform_bound(kind, cols, rows);
  for (std::size_t i = 0; i < len; ++i) out[i] = rng.uniform(-bound, bound);
  return out;
}

}  // namespace uora
