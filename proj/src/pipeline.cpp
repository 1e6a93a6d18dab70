#include "latcast/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace latcast::pipeline {

TimeAxis normalize_time_axis(std::size_t seq_len, std::size_t horizon) {
  if (horizon < 1 || horizon >= seq_len)
    throw std::invalid_argument("normalize_time_axis needs 0 < horizon < seq_len");
  const std::size_t split = seq_len - horizon;
  TimeAxis axis;
  axis.split = split;
  axis.tau.resize(seq_len);
  if (horizon >= 2) {
    // History covers [-3, 0) with the forecast moment landing exactly on the
    // first horizon step; horizon covers [0, 1].
    for (std::size_t i = 0; i < split; ++i)
      axis.tau[i] = -3.0 + 3.0 * static_cast<double>(i) / static_cast<double>(split);
    for (std::size_t j = 0; j < horizon; ++j)
      axis.tau[split + j] = static_cast<double>(j) / static_cast<double>(horizon - 1);
  } else {
    // Single-step horizon: the forecast moment is the last history point.
    if (split < 2)
      throw std::invalid_argument("normalize_time_axis with horizon 1 needs seq_len >= 3");
    for (std::size_t i = 0; i < split; ++i)
      axis.tau[i] = -3.0 + 3.0 * static_cast<double>(i) / static_cast<double>(split - 1);
    axis.tau[split] = 1.0;
  }
  return axis;
}

std::pair<std::vector<double>, NormStats> znorm_2std(const std::vector<double>& values,
                                                     std::size_t history_len) {
  if (history_len == 0 || history_len > values.size())
    throw std::invalid_argument("znorm_2std needs a nonempty history within the window");
  constexpr double kEps = 1e-8;
  NormStats stats;
  double sum = 0.0;
  for (std::size_t i = 0; i < history_len; ++i) sum += values[i];
  stats.mean = sum / static_cast<double>(history_len);
  double ss = 0.0;
  for (std::size_t i = 0; i < history_len; ++i) {
    const double d = values[i] - stats.mean;
    ss += d * d;
  }
  stats.stddev = std::sqrt(ss / static_cast<double>(history_len));
  if (stats.stddev < kEps) {
    stats.stddev = kEps;
    stats.degenerate = true;
  }
  stats.scale = 2.0 * stats.stddev;
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = (values[i] - stats.mean) / stats.scale;
  return {out, stats};
}

std::vector<double> denorm(const std::vector<double>& values, const NormStats& stats) {
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = values[i] * stats.scale + stats.mean;
  return out;
}

int BinSpec::index(double v) const {
  if (std::isnan(v)) throw std::invalid_argument("bin_index of NaN");
  // (v - lo) * count / (hi - lo) keeps representable boundaries exact, where
  // dividing by the (non-representable) bin width would not.
  const int i = static_cast<int>(std::floor((v - lo) * count / (hi - lo)));
  return std::clamp(i, 0, count - 1);
}

std::vector<double> BinSpec::centers() const {
  std::vector<double> out(count);
  for (int i = 0; i < count; ++i) out[i] = center(i);
  return out;
}

std::vector<double> BinSpec::edges() const {
  std::vector<double> out(count + 1);
  for (int i = 0; i <= count; ++i) out[i] = lo + i * width();
  return out;
}

double dist_mean(const std::vector<double>& probs, const BinSpec& bins) {
  if (probs.size() != static_cast<std::size_t>(bins.count))
    throw std::invalid_argument("dist_mean: probability vector length != bin count");
  double sum = 0.0, mean = 0.0;
  for (int i = 0; i < bins.count; ++i) {
    if (std::isnan(probs[i])) throw std::invalid_argument("dist_mean of NaN probabilities");
    sum += probs[i];
    mean += probs[i] * bins.center(i);
  }
  if (std::abs(sum - 1.0) > 1e-6)
    throw std::invalid_argument("dist_mean: probabilities do not sum to 1");
  return mean;
}

std::vector<std::vector<double>> window_series(const std::vector<double>& series,
                                               std::size_t seq_len, std::size_t stride) {
  if (seq_len == 0 || stride == 0)
    throw std::invalid_argument("window_series needs seq_len > 0 and stride > 0");
  std::vector<std::vector<double>> out;
  if (series.size() < seq_len) return out;  // too short: empty result
  const std::size_t n = (series.size() - seq_len) / stride + 1;
  out.reserve(n);
  for (std::size_t w = 0; w < n; ++w)
    out.emplace_back(series.begin() + w * stride, series.begin() + w * stride + seq_len);
  return out;
}

// ---------------------------------------------------------------------------
// Dates and CSV.

std::int64_t parse_iso_date(const std::string& text) {
  int y = 0, m = 0, d = 0;
  if (std::sscanf(text.c_str(), "%d-%d-%d", &y, &m, &d) != 3 || m < 1 || m > 12 || d < 1 ||
      d > 31)
    throw std::invalid_argument("not an ISO-8601 date: '" + text + "'");
  // Howard Hinnant's days-from-civil.
  y -= m <= 2;
  const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

namespace {

struct CivilDate {
  int year, month, day;
};

CivilDate civil_from_days(std::int64_t z) {
  z += 719468;
  const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
  const unsigned doe = static_cast<unsigned>(z - era * 146097);
  const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  const std::int64_t y = static_cast<std::int64_t>(yoe) + era * 400;
  const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const unsigned mp = (5 * doy + 2) / 153;
  const unsigned d = doy - (153 * mp + 2) / 5 + 1;
  const unsigned m = mp + (mp < 10 ? 3 : -9);
  return {static_cast<int>(y + (m <= 2)), static_cast<int>(m), static_cast<int>(d)};
}

std::int64_t days_from_civil(int y, unsigned m, unsigned d) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04d-%02u-%02u", y, m, d);
  return parse_iso_date(buf);
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  fields.push_back(cur);
  return fields;
}

}  // namespace

CsvDataset load_csv_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open CSV file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty CSV file: " + path);
  const auto header = split_csv_line(line);
  if (header.size() < 2)
    throw std::runtime_error("CSV needs a timestamp column plus at least one value column: " + path);

  CsvDataset ds;
  ds.series.resize(header.size() - 1);
  for (std::size_t c = 1; c < header.size(); ++c) ds.series[c - 1].name = header[c];

  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != header.size()) {
      ds.skipped_rows++;
      continue;
    }
    std::int64_t day;
    try {
      day = parse_iso_date(fields[0]);
    } catch (const std::invalid_argument&) {
      ds.skipped_rows++;
      continue;
    }
    std::vector<double> vals(header.size() - 1);
    bool ok = true;
    for (std::size_t c = 1; c < header.size() && ok; ++c) {
      try {
        std::size_t pos = 0;
        vals[c - 1] = std::stod(fields[c], &pos);
        ok = pos == fields[c].size();
      } catch (...) {
        ok = false;
      }
    }
    if (!ok) {
      ds.skipped_rows++;
      continue;
    }
    for (std::size_t c = 1; c < header.size(); ++c) {
      ds.series[c - 1].days.push_back(day);
      ds.series[c - 1].values.push_back(vals[c - 1]);
    }
  }
  return ds;
}

AggRule parse_agg_rule(const std::string& name) {
  if (name == "none" || name.empty()) return AggRule::None;
  if (name == "daily") return AggRule::Daily;
  if (name == "monthly") return AggRule::Monthly;
  throw std::invalid_argument("unknown aggregation rule: '" + name + "'");
}

RawSeries aggregate(const RawSeries& s, AggRule rule) {
  if (rule == AggRule::None) return s;
  std::map<std::int64_t, std::pair<double, std::size_t>> buckets;  // day -> (sum, count)
  for (std::size_t i = 0; i < s.days.size(); ++i) {
    std::int64_t key = s.days[i];
    if (rule == AggRule::Monthly) {
      const CivilDate cd = civil_from_days(key);
      key = days_from_civil(cd.year, static_cast<unsigned>(cd.month), 1);
    }
    auto& b = buckets[key];
    b.first += s.values[i];
    b.second += 1;
  }
  RawSeries out;
  out.name = s.name;
  for (const auto& [day, acc] : buckets) {
    out.days.push_back(day);
    out.values.push_back(acc.first / static_cast<double>(acc.second));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Context curation.

std::size_t ContextSpec::horizon() const {
  const auto h = static_cast<std::size_t>(std::llround(target_fraction * static_cast<double>(seq_len)));
  return std::clamp<std::size_t>(h, 1, seq_len - 1);
}

void ContextSpec::validate() const {
  if (seq_len < 2) throw std::invalid_argument("context spec: seq_len must be >= 2");
  if (!(target_fraction > 0.0 && target_fraction < 1.0))
    throw std::invalid_argument("context spec: target_fraction must be in (0, 1)");
  if (context_windows.empty())
    throw std::invalid_argument("context spec: empty context window list");
  if (held_out_windows.empty())
    throw std::invalid_argument("context spec: empty held-out window list");
  for (const auto& c : context_windows)
    for (const auto& h : held_out_windows) {
      if (c.column != h.column) continue;
      const auto cs = parse_iso_date(c.start_date), ce = parse_iso_date(c.end_date);
      const auto hs = parse_iso_date(h.start_date), he = parse_iso_date(h.end_date);
      if (cs <= he && hs <= ce)
        throw std::invalid_argument("context spec: context and held-out windows overlap on column '" +
                                    c.column + "'");
    }
}

ContextSpec load_context_spec(const std::string& json_path) {
  std::ifstream in(json_path);
  if (!in) throw std::runtime_error("cannot open context spec: " + json_path);
  nlohmann::json j;
  in >> j;
  ContextSpec spec;
  spec.dataset_id = j.value("dataset", "");
  spec.csv_path = j.at("csv").get<std::string>();
  spec.aggregation = parse_agg_rule(j.value("aggregation", "none"));
  spec.seq_len = j.value("seq_len", 240u);
  spec.stride = j.value("stride", 10u);
  spec.target_fraction = j.value("target_fraction", 0.25);
  auto read_windows = [&j](const char* key, std::vector<WindowRef>& out) {
    if (!j.contains(key)) return;
    for (const auto& w : j.at(key))
      out.push_back({w.at("column").get<std::string>(), w.at("start").get<std::string>(),
                     w.at("end").get<std::string>()});
  };
  read_windows("context", spec.context_windows);
  read_windows("held_out", spec.held_out_windows);
  spec.validate();
  return spec;
}

namespace {

std::vector<double> resample_linear(const std::vector<double>& x, std::size_t m) {
  if (x.size() == m) return x;
  std::vector<double> out(m);
  const double scale = static_cast<double>(x.size() - 1) / static_cast<double>(m - 1);
  for (std::size_t j = 0; j < m; ++j) {
    const double pos = j * scale;
    const auto i = static_cast<std::size_t>(pos);
    const double frac = pos - static_cast<double>(i);
    out[j] = i + 1 < x.size() ? x[i] * (1.0 - frac) + x[i + 1] * frac : x.back();
  }
  return out;
}

std::vector<double> resolve_window(const WindowRef& ref, const CsvDataset& data,
                                   AggRule rule, std::size_t seq_len) {
  const RawSeries* found = nullptr;
  for (const auto& s : data.series)
    if (s.name == ref.column) {
      found = &s;
      break;
    }
  if (!found)
    throw std::invalid_argument("unresolvable window reference: column '" + ref.column + "'");
  const RawSeries agg = aggregate(*found, rule);
  const auto start = parse_iso_date(ref.start_date);
  const auto end = parse_iso_date(ref.end_date);
  std::vector<double> vals;
  for (std::size_t i = 0; i < agg.days.size(); ++i)
    if (agg.days[i] >= start && agg.days[i] <= end) vals.push_back(agg.values[i]);
  if (vals.size() < 2)
    throw std::invalid_argument("unresolvable window reference: column '" + ref.column +
                                "' has fewer than 2 points in [" + ref.start_date + ", " +
                                ref.end_date + "]");
  return resample_linear(vals, seq_len);
}

}  // namespace

ContextBatch curate_context(const ContextSpec& spec, const CsvDataset& data) {
  spec.validate();
  const std::size_t S = spec.seq_len;
  const std::size_t H = spec.horizon();
  const std::size_t hist = S - H;
  const auto axis = normalize_time_axis(S, H);

  ContextBatch batch;
  batch.n_ctx = spec.context_windows.size();
  batch.n_held = spec.held_out_windows.size();
  batch.seq_len = S;
  batch.horizon = H;
  batch.tau = axis.tau;
  batch.context.assign(batch.n_ctx * S * ContextBatch::kFeatures, 0.0);
  batch.held_history.assign(batch.n_held * hist * ContextBatch::kFeatures, 0.0);
  batch.held_full.assign(batch.n_held * S * ContextBatch::kFeatures, 0.0);
  batch.held_target.assign(batch.n_held * H, 0.0);
  batch.held_stats.resize(batch.n_held);

  for (std::size_t n = 0; n < batch.n_ctx; ++n) {
    const auto vals = resolve_window(spec.context_windows[n], data, spec.aggregation, S);
    auto [norm, stats] = znorm_2std(vals, hist);
    double* f = batch.context.data() + n * S * ContextBatch::kFeatures;
    for (std::size_t i = 0; i < S; ++i) {
      f[i * 3 + 0] = axis.tau[i];
      f[i * 3 + 1] = norm[i];
      f[i * 3 + 2] = 1.0;
    }
  }
  for (std::size_t h = 0; h < batch.n_held; ++h) {
    const auto vals = resolve_window(spec.held_out_windows[h], data, spec.aggregation, S);
    auto [norm, stats] = znorm_2std(vals, hist);
    double* fh = batch.held_history.data() + h * hist * ContextBatch::kFeatures;
    for (std::size_t i = 0; i < hist; ++i) {
      fh[i * 3 + 0] = axis.tau[i];
      fh[i * 3 + 1] = norm[i];
      fh[i * 3 + 2] = 1.0;
    }
    double* ff = batch.held_full.data() + h * S * ContextBatch::kFeatures;
    for (std::size_t i = 0; i < S; ++i) {
      ff[i * 3 + 0] = axis.tau[i];
      ff[i * 3 + 1] = norm[i];
      ff[i * 3 + 2] = 1.0;
    }
    for (std::size_t i = 0; i < H; ++i) batch.held_target[h * H + i] = norm[hist + i];
    batch.held_stats[h] = stats;
  }
  return batch;
}

}  // namespace latcast::pipeline
