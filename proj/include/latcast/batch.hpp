#pragma once

#include <cstddef>
#include <vector>

namespace latcast {

// 2-std z-normalization statistics, computed from history steps only.
struct NormStats {
  double mean = 0.0;
  double stddev = 0.0;
  double scale = 1.0;  // 2 * stddev, epsilon-floored
  bool degenerate = false;
};

// A context dataset plus held-out history/target pairs on the normalized
// time axis. Feature layout per step: (tau, value, observed-flag).
struct ContextBatch {
  static constexpr std::size_t kFeatures = 3;

  std::size_t n_ctx = 0;
  std::size_t n_held = 0;
  std::size_t seq_len = 0;
  std::size_t horizon = 0;

  std::vector<double> tau;           // (seq_len)
  std::vector<double> context;       // (n_ctx, seq_len, 3)
  std::vector<double> held_history;  // (n_held, seq_len - horizon, 3)
  std::vector<double> held_full;     // (n_held, seq_len, 3): true values, all observed
  std::vector<double> held_target;   // (n_held, horizon), normalized values
  std::vector<double> psi_targets;   // (n_held, n_si); empty for real-data batches
  std::vector<NormStats> held_stats;  // one per held-out series
  bool trend_overflow = false;

  std::size_t history_len() const { return seq_len - horizon; }
};

}  // namespace latcast
