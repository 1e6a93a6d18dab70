#pragma once

// Normalized abstract time axis, value normalization, windowing, output-space
// binning, CSV ingestion and context curation for real datasets.

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "latcast/batch.hpp"

namespace latcast::pipeline {

struct TimeAxis {
  std::vector<double> tau;
  std::size_t split = 0;  // forecast start index (= seq_len - horizon)
};

// Equidistant-per-segment axis with anchors pinned at -3 (start), 0
// (forecast moment) and 1 (end). History and horizon may have different
// step sizes when horizon != seq_len / 4.
TimeAxis normalize_time_axis(std::size_t seq_len, std::size_t horizon);

// 2-std z-normalization from the first `history_len` values only.
std::pair<std::vector<double>, NormStats> znorm_2std(const std::vector<double>& values,
                                                     std::size_t history_len);
std::vector<double> denorm(const std::vector<double>& values, const NormStats& stats);

struct BinSpec {
  int count = 100;
  double lo = -3.5;
  double hi = 3.5;

  double width() const { return (hi - lo) / count; }
  int index(double v) const;  // clamped; interior boundaries go to the higher bin
  double center(int i) const { return lo + (i + 0.5) * width(); }
  std::vector<double> centers() const;
  std::vector<double> edges() const;
};

// Mean of a categorical distribution over bin centers. Throws if the
// probabilities do not sum to 1 within 1e-6.
double dist_mean(const std::vector<double>& probs, const BinSpec& bins);

// Rolling windows; count = floor((len - seq_len) / stride) + 1, empty when
// the series is too short.
std::vector<std::vector<double>> window_series(const std::vector<double>& series,
                                               std::size_t seq_len, std::size_t stride);

// ---------------------------------------------------------------------------
// CSV ingestion (RFC-4180, header row, ISO-8601 timestamps in column 0).

struct RawSeries {
  std::string name;
  std::vector<std::int64_t> days;  // days since 1970-01-01
  std::vector<double> values;
};

struct CsvDataset {
  std::vector<RawSeries> series;
  std::size_t skipped_rows = 0;
};

CsvDataset load_csv_dataset(const std::string& path);

enum class AggRule { None, Daily, Monthly };

AggRule parse_agg_rule(const std::string& name);

// Mean over calendar buckets; bucket day is the first day of the bucket.
RawSeries aggregate(const RawSeries& s, AggRule rule);

// Days since epoch for an ISO date "YYYY-MM-DD" (time-of-day suffix ignored).
std::int64_t parse_iso_date(const std::string& text);

// ---------------------------------------------------------------------------
// Context curation.

struct WindowRef {
  std::string column;
  std::string start_date;  // ISO, inclusive
  std::string end_date;    // ISO, inclusive
};

struct ContextSpec {
  std::string dataset_id;
  std::string csv_path;
  AggRule aggregation = AggRule::None;
  std::size_t seq_len = 240;
  std::size_t stride = 10;
  double target_fraction = 0.25;
  std::vector<WindowRef> context_windows;
  std::vector<WindowRef> held_out_windows;

  void validate() const;
  std::size_t horizon() const;
};

ContextSpec load_context_spec(const std::string& json_path);

ContextBatch curate_context(const ContextSpec& spec, const CsvDataset& data);

}  // namespace latcast::pipeline
