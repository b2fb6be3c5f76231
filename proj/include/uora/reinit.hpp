#pragma once

// Threshold-triggered reinitialization of frozen UORA projections.
//
// After every optimizer step each entry of d is compared against tau. A
// dimension whose magnitude stays below tau for count_k consecutive
// observations has row i of A and column i of B moved toward a fresh random
// draw by linear interpolation with factor alpha.

#include <cstdint>
#include <optional>
#include <vector>

#include "uora/adapters.hpp"
#include "uora/linalg.hpp"

namespace uora {

enum class ReinitCadence { Step, Epoch };

struct ReinitConfig {
  double tau = 1e-4;
  std::uint32_t count_k = 1;  // 0 disables the mechanism
  double alpha = 0.7;
  // Family and gain for fresh draws; normally copied from the adapter's
  // initialization recipe.
  InitKind rand_kind;
  // Scheduling knobs consumed by the training loop.
  std::int64_t start_step = 0;
  ReinitCadence cadence = ReinitCadence::Step;
  bool reset_moments = false;

  bool enabled() const { return count_k > 0; }
};

// Throws ConfigError unless tau > 0 and alpha lies in [0, 1].
void validate(const ReinitConfig& cfg);

enum class ReinitTarget : std::uint8_t { RowOfA = 0, ColumnOfB = 1 };

struct ReinitEvent {
  std::int64_t step = 0;
  std::uint32_t dim = 0;
  std::uint32_t layer_id = 0;
  ReinitTarget target = ReinitTarget::RowOfA;
  // Reinit-stream position at which the fresh draw started.
  std::uint64_t rng_cursor = 0;
  // Checksum of the segment after interpolation; lets replay name the first
  // event whose reconstruction diverges.
  std::uint64_t digest = 0;

  bool operator==(const ReinitEvent&) const = default;
};

class ReinitMonitor {
 public:
  ReinitMonitor(std::uint32_t layer_id, std::size_t rank, const ReinitConfig& cfg,
                std::uint64_t reinit_seed, std::uint64_t reinit_stream);

  // Updates streak counters from |d_i| and returns, in ascending order, every
  // dimension whose streak just reached count_k. Those counters reset to 0.
  std::vector<std::size_t> observe_step(const Vector& d_vec, std::int64_t step);

  const ReinitConfig& config() const { return config_; }
  std::uint32_t layer_id() const { return layer_id_; }
  std::span<const std::uint32_t> counters() const { return counters_; }
  const std::vector<ReinitEvent>& events() const { return events_; }
  SeededRng& rng() { return rng_; }
  const SeededRng& rng() const { return rng_; }

  // Appends an event; throws if it would break (step, dim, target) ordering.
  void record(const ReinitEvent& event);

  // Restores serialized state.
  void restore(std::vector<std::uint32_t> counters, std::vector<ReinitEvent> events,
               std::uint64_t rng_cursor);

 private:
  std::uint32_t layer_id_;
  ReinitConfig config_;
  std::vector<std::uint32_t> counters_;
  std::vector<ReinitEvent> events_;
  SeededRng rng_;
};

// Interpolates row i of A and column i of B toward fresh draws and logs one
// event per matrix. Shared matrices are copied before mutation. d and b are
// left untouched.
void reinit_dimension(UoraState& s, std::size_t i, const ReinitConfig& cfg,
                      SeededRng& rng, ReinitMonitor& monitor, std::int64_t step);

// Re-applies one logged event against `s`. Returns the digest of the
// resulting segment so callers can compare it against event.digest.
std::uint64_t apply_event(UoraState& s, const ReinitEvent& event,
                          const ReinitConfig& cfg, SeededRng& rng);

struct ReplayOutcome {
  bool ok = true;
  // Index into the event list of the first event whose digest or ordering
  // did not match.
  std::optional<std::size_t> first_bad_event;
  std::string message;
};

// Rebuilds A and B from the initialization recipe followed by every event
// in order. The result is written into `s`.
ReplayOutcome replay_events(UoraState& s, std::span<const ReinitEvent> events,
                            const ReinitConfig& cfg, std::uint64_t reinit_seed,
                            std::uint64_t reinit_stream);

}  // namespace uora
