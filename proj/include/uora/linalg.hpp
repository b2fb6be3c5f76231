#pragma once

// Dense double-precision matrices and vectors, a counter-based seeded RNG,
// and the initializer families used for frozen adapter projections.

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace uora {

class Vector {
 public:
  Vector() = default;
  explicit Vector(std::size_t len, double fill = 0.0) : data_(len, fill) {}
  Vector(std::initializer_list<double> values) : data_(values) {}
  explicit Vector(std::vector<double> values) : data_(std::move(values)) {}

  std::size_t size() const noexcept { return data_.size(); }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  const std::vector<double>& raw() const noexcept { return data_; }

  bool operator==(const Vector&) const = default;

 private:
  std::vector<double> data_;
};

// Row-major dense matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols_ + c];
  }

  std::span<double> row(std::size_t r) {
    return {data_.data() + r * cols_, cols_};
  }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }
  Vector column(std::size_t c) const;
  void set_column(std::size_t c, const Vector& v);
  void set_row(std::size_t r, const Vector& v);
  Vector row_vector(std::size_t r) const;

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  Matrix transposed() const;

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b);
// a * b^T without materializing the transpose.
Matrix matmul_nt(const Matrix& a, const Matrix& b);
// a^T * b without materializing the transpose.
Matrix matmul_tn(const Matrix& a, const Matrix& b);
Vector matvec(const Matrix& a, const Vector& x);
// a^T * x
Vector matvec_t(const Matrix& a, const Vector& x);

Vector hadamard(const Vector& a, const Vector& b);
Vector add(const Vector& a, const Vector& b);
Matrix add(const Matrix& a, const Matrix& b);
Matrix outer(const Vector& a, const Vector& b);
// diag(left) * m * diag(right); pass an empty vector to skip a side.
Matrix scale_rows_cols(const Matrix& m, const Vector& left, const Vector& right);

double max_abs_diff(const Matrix& a, const Matrix& b);
double max_abs_diff(const Vector& a, const Vector& b);
bool all_finite(std::span<const double> values);

// Elementwise alpha * v_old + (1 - alpha) * v_rand.
Vector lerp(const Vector& v_old, const Vector& v_rand, double alpha);

// FNV-1a over the little-endian IEEE bytes of every entry.
std::uint64_t checksum(std::span<const double> values);

// Counter-based generator: every output is a pure function of
// (seed, stream_id, cursor), so any draw can be replayed by seeking.
class SeededRng {
 public:
  SeededRng(std::uint64_t seed, std::uint64_t stream_id);

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream_id() const noexcept { return stream_id_; }
  std::uint64_t cursor() const noexcept { return cursor_; }
  void seek(std::uint64_t cursor) noexcept { cursor_ = cursor; }

  std::uint64_t next_u64() noexcept;
  // Uniform on [0, 1).
  double uniform01() noexcept;
  double uniform(double lo, double hi) noexcept;
  // Box-Muller; consumes exactly two draws and caches nothing.
  double normal() noexcept;
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) noexcept;

 private:
  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::uint64_t key_;
  std::uint64_t cursor_ = 0;
};

enum class InitFamily { OrthogonalUniform, KaimingUniform, XavierUniform, RandomUniform };

struct InitKind {
  InitFamily family = InitFamily::OrthogonalUniform;
  double gain = 1.0;

  bool operator==(const InitKind&) const = default;
};

std::string_view to_string(InitFamily family);
InitFamily parse_init_family(std::string_view name);

// Throws ConfigError unless gain > 0.
void validate(const InitKind& kind);

// Uniform bound for the fan-based families, with fan_in = cols and
// fan_out = rows of the target matrix.
double uniform_bound(const InitKind& kind, std::size_t fan_in, std::size_t fan_out);

Matrix init_matrix(const InitKind& kind, std::size_t rows, std::size_t cols,
                   SeededRng& rng);

// A fresh row or column segment of `len` entries drawn on the same scale as
// an initial matrix of shape (rows, cols). Orthogonal draws are unit-norm
// directions times gain, matching the row/column norms of a semi-orthogonal
// matrix.
Vector draw_segment(const InitKind& kind, std::size_t len, std::size_t rows,
                    std::size_t cols, SeededRng& rng);

// Thin Householder QR of a tall matrix (rows >= cols): returns Q with
// orthonormal columns, sign-corrected so that diag(R) >= 0.
Matrix orthonormal_columns(const Matrix& tall);

}  // namespace uora
