#include "uora/reinit.hpp"

#include <cmath>
#include <tuple>

#include "uora/errors.hpp"

namespace uora {

namespace {

auto order_key(const ReinitEvent& e) {
  return std::make_tuple(e.step, e.dim, static_cast<int>(e.target));
}

// Copy-on-write: a shared matrix is privatized before its first mutation.
Matrix& writable(std::shared_ptr<const Matrix>& m, UoraState& s) {
  if (s.shared_handle || m.use_count() > 1) {
    s.a = std::make_shared<Matrix>(*s.a);
    s.b = std::make_shared<Matrix>(*s.b);
    s.shared_handle.reset();
  }
  return const_cast<Matrix&>(*m);
}

std::uint64_t interpolate_segment(UoraState& s, ReinitTarget target, std::size_t i,
                                  const ReinitConfig& cfg, SeededRng& rng) {
  if (target == ReinitTarget::RowOfA) {
    Matrix& a = writable(s.a, s);
    const Vector fresh = draw_segment(cfg.rand_kind, a.cols(), a.rows(), a.cols(), rng);
    const Vector updated = lerp(a.row_vector(i), fresh, cfg.alpha);
    a.set_row(i, updated);
    return checksum(updated.values());
  }
  Matrix& b = writable(s.b, s);
  const Vector fresh = draw_segment(cfg.rand_kind, b.rows(), b.rows(), b.cols(), rng);
  const Vector updated = lerp(b.column(i), fresh, cfg.alpha);
  b.set_column(i, updated);
  return checksum(updated.values());
}

}  // namespace

void validate(const ReinitConfig& cfg) {
  if (!(cfg.tau > 0.0) || !std::isfinite(cfg.tau)) {
    throw ConfigError("reinit.tau must be > 0");
  }
  if (!(cfg.alpha >= 0.0 && cfg.alpha <= 1.0)) {
    throw ConfigError("reinit.alpha must lie in [0, 1]");
  }
  if (cfg.start_step < 0) throw ConfigError("reinit.start_step must be >= 0");
  validate(cfg.rand_kind);
}

ReinitMonitor::ReinitMonitor(std::uint32_t layer_id, std::size_t rank,
                             const ReinitConfig& cfg, std::uint64_t reinit_seed,
                             std::uint64_t reinit_stream)
    : layer_id_(layer_id),
      config_(cfg),
      counters_(rank, 0),
      rng_(reinit_seed, reinit_stream) {
  validate(cfg);
}

std::vector<std::size_t> ReinitMonitor::observe_step(const Vector& d_vec,
                                                     std::int64_t /*step*/) {
  if (d_vec.size() != counters_.size()) {
    throw ShapeError("observe_step: d has length " + std::to_string(d_vec.size()) +
                     ", monitor tracks " + std::to_string(counters_.size()));
  }
  std::vector<std::size_t> fired;
  if (!config_.enabled()) return fired;
  for (std::size_t i = 0; i < counters_.size(); ++i) {
    if (std::abs(d_vec[i]) < config_.tau) {
      if (++counters_[i] >= config_.count_k) {
        fired.push_back(i);
        counters_[i] = 0;
      }
    } else {
      counters_[i] = 0;
    }
  }
  return fired;
}

void ReinitMonitor::record(const ReinitEvent& event) {
  if (!events_.empty() && !(order_key(events_.back()) < order_key(event))) {
    throw ConfigError("reinit event log must be strictly ordered by (step, dim)");
  }
  events_.push_back(event);
}

void ReinitMonitor::restore(std::vector<std::uint32_t> counters,
                            std::vector<ReinitEvent> events, std::uint64_t rng_cursor) {
  if (counters.size() != counters_.size()) {
    throw ShapeError("restore: counter length mismatch");
  }
  counters_ = std::move(counters);
  events_ = std::move(events);
  rng_.seek(rng_cursor);
}

void reinit_dimension(UoraState& s, std::size_t i, const ReinitConfig& cfg,
                      SeededRng& rng, ReinitMonitor& monitor, std::int64_t step) {
  if (i >= s.rank()) {
    throw BoundsError("reinit_dimension: index " + std::to_string(i) +
                      " out of range for rank " + std::to_string(s.rank()));
  }
  validate(cfg);
  for (ReinitTarget target : {ReinitTarget::RowOfA, ReinitTarget::ColumnOfB}) {
    ReinitEvent e;
    e.step = step;
    e.dim = static_cast<std::uint32_t>(i);
    e.layer_id = monitor.layer_id();
    e.target = target;
    e.rng_cursor = rng.cursor();
    e.digest = interpolate_segment(s, target, i, cfg, rng);
    monitor.record(e);
  }
}

std::uint64_t apply_event(UoraState& s, const ReinitEvent& event,
                          const ReinitConfig& cfg, SeededRng& rng) {
  if (event.dim >= s.rank()) {
    throw BoundsError("apply_event: dimension " + std::to_string(event.dim) +
                      " out of range for rank " + std::to_string(s.rank()));
  }
  rng.seek(event.rng_cursor);
  return interpolate_segment(s, event.target, event.dim, cfg, rng);
}

ReplayOutcome replay_events(UoraState& s, std::span<const ReinitEvent> events,
                            const ReinitConfig& cfg, std::uint64_t reinit_seed,
                            std::uint64_t reinit_stream) {
  const UoraState fresh =
      make_uora(s.label, s.d_out(), s.d_in(), s.rank(), s.recipe);
  s.a = fresh.a;
  s.b = fresh.b;
  s.shared_handle.reset();

  SeededRng rng(reinit_seed, reinit_stream);
  ReplayOutcome out;
  for (std::size_t n = 0; n < events.size(); ++n) {
    const ReinitEvent& e = events[n];
    if (n > 0 && !(order_key(events[n - 1]) < order_key(e))) {
      out.ok = false;
      out.first_bad_event = n;
      out.message = "event " + std::to_string(n) + " (step " + std::to_string(e.step) +
                    ", dim " + std::to_string(e.dim) + ") breaks log ordering";
      return out;
    }
    if (e.dim >= s.rank()) {
      out.ok = false;
      out.first_bad_event = n;
      out.message = "event " + std::to_string(n) + " (step " + std::to_string(e.step) +
                    ", dim " + std::to_string(e.dim) + ") dimension out of range";
      return out;
    }
    const std::uint64_t digest = apply_event(s, e, cfg, rng);
    if (digest != e.digest) {
      out.ok = false;
      out.first_bad_event = n;
      out.message = "event " + std::to_string(n) + " (step " + std::to_string(e.step) +
                    ", dim " + std::to_string(e.dim) + ", " +
                    (e.target == ReinitTarget::RowOfA ? "row of A" : "column of B") +
                    ") digest mismatch";
      return out;
    }
  }
  return out;
}

}  // namespace uora
