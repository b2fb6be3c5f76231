#pragma once

// Independent reference computations for tests. Everything here is written
// from the definitions with plain loops over std::vector, never calling the
// library kernels it checks.

#include <cmath>
#include <algorithm>
#include <cstdint>
#include <random>
#include <vector>

namespace oracle {

using Mat = std::vector<std::vector<double>>;

inline Mat zeros(std::size_t r, std::size_t c) { return Mat(r, std::vector<double>(c, 0.0)); }

inline Mat matmul(const Mat& a, const Mat& b) {
  Mat out = zeros(a.size(), b.empty() ? 0 : b[0].size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < out[i].size(); ++j) {
      long double acc = 0.0L;
      for (std::size_t k = 0; k < b.size(); ++k) acc += (long double)a[i][k] * b[k][j];
      out[i][j] = static_cast<double>(acc);
    }
  return out;
}

// Dense delta for diag(b) B diag(d) A, built entry by entry.
inline Mat uora_delta(const Mat& A, const Mat& B, const std::vector<double>& d,
                      const std::vector<double>& b) {
  const std::size_t d_out = B.size(), r = d.size(), d_in = A[0].size();
  Mat out = zeros(d_out, d_in);
  for (std::size_t i = 0; i < d_out; ++i)
    for (std::size_t j = 0; j < d_in; ++j) {
      long double acc = 0.0L;
      for (std::size_t k = 0; k < r; ++k) acc += (long double)B[i][k] * d[k] * A[k][j];
      out[i][j] = static_cast<double>(b[i] * acc);
    }
  return out;
}

inline std::vector<double> apply(const Mat& w, const std::vector<double>& x) {
  std::vector<double> y(w.size(), 0.0);
  for (std::size_t i = 0; i < w.size(); ++i) {
    long double acc = 0.0L;
    for (std::size_t j = 0; j < x.size(); ++j) acc += (long double)w[i][j] * x[j];
    y[i] = static_cast<double>(acc);
  }
  return y;
}

// Brute-force trigger semantics: dimension i fires at step t when the
// current run of consecutive sub-threshold observations, counted since the
// last firing, reaches k. k = 0 never fires.
inline std::vector<std::vector<std::size_t>> trigger_trace(
    const std::vector<std::vector<double>>& traj, double tau, unsigned k) {
  std::vector<std::vector<std::size_t>> fired(traj.size());
  if (k == 0 || traj.empty()) return fired;
  const std::size_t r = traj[0].size();
  for (std::size_t i = 0; i < r; ++i) {
    std::size_t last_fire_end = 0;  // first step eligible to count
    for (std::size_t t = 0; t < traj.size(); ++t) {
      if (t + 1 < last_fire_end + k) continue;
      bool all_below = true;
      for (std::size_t s = t + 1 - k; s <= t; ++s) {
        if (!(std::abs(traj[s][i]) < tau)) {
          all_below = false;
          break;
        }
      }
      if (all_below) {
        fired[t].push_back(i);
        last_fire_end = t + 1;
      }
    }
  }
  return fired;
}

// Central difference of a scalar function along one coordinate.
template <typename F>
double central_diff(F&& f, double& x, double h) {
  const double x0 = x;
  x = x0 + h;
  const double fp = f();
  x = x0 - h;
  const double fm = f();
  x = x0;
  return (fp - fm) / (2.0 * h);
}

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1e-8, std::abs(a), std::abs(b)});
}

}  // namespace oracle
