#include "transllm/data_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "transllm/rng.hpp"

namespace transllm {

namespace {

// Days since 1970-01-01 for a civil date (Gregorian, proleptic).
std::int64_t days_from_civil(int y, int m, int d) {
  y -= m <= 2;
  const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153u * static_cast<unsigned>(m + (m > 2 ? -3 : 9)) + 2u) / 5u +
                       static_cast<unsigned>(d) - 1u;
  const unsigned doe = yoe * 365u + yoe / 4u - yoe / 100u + doy;
  return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

void civil_from_days(std::int64_t z, int& y, int& m, int& d) {
  z += 719468;
  const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
  const unsigned doe = static_cast<unsigned>(z - era * 146097);
  const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  const std::int64_t yy = static_cast<std::int64_t>(yoe) + era * 400;
  const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const unsigned mp = (5 * doy + 2) / 153;
  d = static_cast<int>(doy - (153 * mp + 2) / 5 + 1);
  m = static_cast<int>(mp < 10 ? mp + 3 : mp - 9);
  y = static_cast<int>(yy + (m <= 2));
}

}  // namespace

std::int64_t parse_timestamp(const std::string& s) {
  int y = 0, mo = 0, d = 0, h = 0, mi = 0, sec = 0;
  char sep = ' ';
  const int got = std::sscanf(s.c_str(), "%d-%d-%d%c%d:%d:%d", &y, &mo, &d, &sep, &h, &mi, &sec);
  if (got < 6 || mo < 1 || mo > 12 || d < 1 || d > 31 || (sep != ' ' && sep != 'T')) {
    throw std::invalid_argument("invalid timestamp '" + s + "' (expected YYYY-MM-DD HH:MM[:SS])");
  }
  return days_from_civil(y, mo, d) * 86400 + h * 3600 + mi * 60 + sec;
}

std::string format_timestamp(std::int64_t epoch_seconds) {
  std::int64_t days = epoch_seconds / 86400;
  std::int64_t rem = epoch_seconds % 86400;
  if (rem < 0) {
    rem += 86400;
    --days;
  }
  int y, m, d;
  civil_from_days(days, y, m, d);
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04d-%02d-%02d %02ld:%02ld:%02ld", y, m, d,
                static_cast<long>(rem / 3600), static_cast<long>((rem % 3600) / 60),
                static_cast<long>(rem % 60));
  return buf;
}

SeriesDataset load_series(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open series file: " + path);

  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty series file: " + path);
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  if (header.size() < 2 || header[0] != "timestamp") {
    throw std::runtime_error("series header must be 'timestamp,node_0,...': " + path);
  }
  const std::size_t n = header.size() - 1;
  std::vector<std::string> node_ids(header.begin() + 1, header.end());

  std::vector<std::int64_t> times;
  std::vector<double> flat;
  std::size_t row_no = 1;  // header was row 1
  while (std::getline(in, line)) {
    ++row_no;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    if (!std::getline(ss, cell, ',')) {
      throw std::runtime_error("row " + std::to_string(row_no) + ": missing timestamp");
    }
    try {
      times.push_back(parse_timestamp(cell));
    } catch (const std::exception& e) {
      throw std::runtime_error("row " + std::to_string(row_no) + ": " + e.what());
    }
    std::size_t cells = 0;
    while (std::getline(ss, cell, ',')) {
      ++cells;
      char* end = nullptr;
      const double v = std::strtod(cell.c_str(), &end);
      if (end == cell.c_str() || !std::isfinite(v)) {
        throw std::runtime_error("row " + std::to_string(row_no) + ": invalid value '" + cell + "'");
      }
      flat.push_back(v);
    }
    if (cells != n) {
      throw std::runtime_error("row " + std::to_string(row_no) + ": expected " + std::to_string(n) +
                               " values, got " + std::to_string(cells));
    }
  }
  if (times.size() < 2) throw std::runtime_error("series needs at least 2 rows: " + path);

  const std::int64_t step = times[1] - times[0];
  if (step <= 0 || step % 60 != 0) {
    throw std::runtime_error("row 3: non-monotonic or sub-minute cadence");
  }
  for (std::size_t i = 1; i < times.size(); ++i) {
    if (times[i] - times[i - 1] != step) {
      throw std::runtime_error("row " + std::to_string(i + 2) + ": cadence gap (expected " +
                               format_timestamp(times[i - 1] + step) + ")");
    }
  }

  SeriesDataset ds;
  ds.values = Tensor({times.size(), n, 1});
  ds.values.vec() = std::move(flat);
  ds.interval_minutes = static_cast<int>(step / 60);
  ds.start_epoch_seconds = times[0];
  ds.node_ids = std::move(node_ids);
  return ds;
}

void save_series_csv(const SeriesDataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write series file: " + path);
  out << "timestamp";
  for (const std::string& id : ds.node_ids) out << "," << id;
  out << "\n";
  char buf[32];
  for (std::size_t t = 0; t < ds.length(); ++t) {
    out << format_timestamp(ds.start_epoch_seconds + static_cast<std::int64_t>(t) * 60 *
                                                        ds.interval_minutes);
    for (std::size_t nn = 0; nn < ds.num_nodes(); ++nn) {
      std::snprintf(buf, sizeof(buf), "%.9g", ds.values(t, nn, 0));
      out << "," << buf;
    }
    out << "\n";
  }
}

Tensor clock_features(const SeriesDataset& ds, std::size_t row0, std::size_t k) {
  Tensor clock({k, kClockChannels});
  for (std::size_t i = 0; i < k; ++i) {
    const std::int64_t ts =
        ds.start_epoch_seconds + static_cast<std::int64_t>(row0 + i) * 60 * ds.interval_minutes;
    std::int64_t sec_of_day = ts % 86400;
    std::int64_t days = ts / 86400;
    if (sec_of_day < 0) {
      sec_of_day += 86400;
      --days;
    }
    clock(i, 0) = static_cast<double>(sec_of_day / 60) / 1440.0;
    const int dow = static_cast<int>(((days % 7) + 7 + 4) % 7);  // 1970-01-01 is a Thursday
    clock(i, 1 + dow) = 1.0;
  }
  return clock;
}

std::vector<WindowSample> make_windows(const SeriesDataset& ds, std::size_t history_len,
                                       std::size_t horizon, std::size_t stride) {
  if (history_len < 1 || horizon < 1 || stride < 1) {
    throw std::invalid_argument("make_windows: history, horizon, and stride must be >= 1");
  }
  const std::size_t l = ds.length();
  if (l < history_len + horizon) {
    throw std::invalid_argument("series too short for one window: length " + std::to_string(l) +
                                " < " + std::to_string(history_len + horizon));
  }
  const std::size_t count = (l - history_len - horizon) / stride + 1;
  const std::size_t n = ds.num_nodes(), f = ds.num_features();
  std::vector<WindowSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t o = i * stride;
    WindowSample w;
    w.origin_index = o;
    w.history = Tensor({history_len, n, f});
    for (std::size_t t = 0; t < history_len; ++t)
      for (std::size_t nn = 0; nn < n; ++nn)
        for (std::size_t ff = 0; ff < f; ++ff) w.history(t, nn, ff) = ds.values(o + t, nn, ff);
    w.target = Tensor({horizon, n, 1});
    for (std::size_t t = 0; t < horizon; ++t)
      for (std::size_t nn = 0; nn < n; ++nn)
        w.target(t, nn, 0) = ds.values(o + history_len + t, nn, 0);
    w.clock = clock_features(ds, o, history_len);
    out.push_back(std::move(w));
  }
  return out;
}

NormStats zscore_fit(const SeriesDataset& ds, std::size_t row0, std::size_t row1) {
  if (row0 >= row1 || row1 > ds.length()) {
    throw std::invalid_argument("zscore_fit: empty or out-of-range train range");
  }
  const std::size_t n = ds.num_nodes(), f = ds.num_features();
  NormStats stats;
  stats.mean.assign(f, 0.0);
  stats.std.assign(f, 0.0);
  const double count = static_cast<double>((row1 - row0) * n);
  for (std::size_t ff = 0; ff < f; ++ff) {
    double s = 0.0;
    for (std::size_t t = row0; t < row1; ++t)
      for (std::size_t nn = 0; nn < n; ++nn) s += ds.values(t, nn, ff);
    stats.mean[ff] = s / count;
    double sq = 0.0;
    for (std::size_t t = row0; t < row1; ++t)
      for (std::size_t nn = 0; nn < n; ++nn) {
        const double d = ds.values(t, nn, ff) - stats.mean[ff];
        sq += d * d;
      }
    stats.std[ff] = std::max(std::sqrt(sq / count), 1e-6);
  }
  return stats;
}

Tensor zscore_apply(const Tensor& x, const NormStats& stats) {
  const std::size_t f = stats.mean.size();
  check_shape(x.rank() >= 1 && x.dim(x.rank() - 1) == f, "zscore_apply feature axis");
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::size_t ff = i % f;
    out[i] = (out[i] - stats.mean[ff]) / stats.std[ff];
  }
  return out;
}

Tensor zscore_invert(const Tensor& x, const NormStats& stats) {
  const std::size_t f = stats.mean.size();
  check_shape(x.rank() >= 1 && x.dim(x.rank() - 1) == f, "zscore_invert feature axis");
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::size_t ff = i % f;
    out[i] = out[i] * stats.std[ff] + stats.mean[ff];
  }
  return out;
}

SeriesDataset synth_generate(const SynthConfig& cfg, std::uint64_t seed) {
  if (cfg.length < 1) throw std::invalid_argument("synth_generate: non-positive length");
  if (cfg.num_nodes < 1) throw std::invalid_argument("synth_generate: need at least one node");
  if (cfg.interval_minutes < 1) throw std::invalid_argument("synth_generate: bad interval");
  if (!cfg.phases.empty() && cfg.phases.size() != cfg.num_nodes) {
    throw std::invalid_argument("synth_generate: phases length must match num_nodes");
  }
  const double steps_per_day = 1440.0 / static_cast<double>(cfg.interval_minutes);
  Rng rng(seed);
  SeriesDataset ds;
  ds.values = Tensor({cfg.length, cfg.num_nodes, 1});
  ds.interval_minutes = cfg.interval_minutes;
  ds.start_epoch_seconds = cfg.start_epoch_seconds;
  for (std::size_t nn = 0; nn < cfg.num_nodes; ++nn) {
    ds.node_ids.push_back("node_" + std::to_string(nn));
  }
  for (std::size_t t = 0; t < cfg.length; ++t) {
    for (std::size_t nn = 0; nn < cfg.num_nodes; ++nn) {
      const double phase = cfg.phases.empty()
                               ? 2.0 * M_PI * static_cast<double>(nn) / static_cast<double>(cfg.num_nodes)
                               : cfg.phases[nn];
      double v = cfg.base +
                 cfg.amplitude * std::sin(2.0 * M_PI * static_cast<double>(t) / steps_per_day + phase);
      if (cfg.noise_sigma > 0.0) v += cfg.noise_sigma * rng.gaussian();
      ds.values(t, nn, 0) = std::max(v, 0.0);
    }
  }
  return ds;
}

double periodicity_score(const std::vector<double>& series) {
  const std::size_t l = series.size();
  if (l < 4) return 0.0;
  double mean_abs = 0.0;
  for (double v : series) mean_abs += std::fabs(v);
  mean_abs /= static_cast<double>(l);
  if (mean_abs <= 0.0) return 0.0;

  // Direct DFT; incremental rotation per frequency keeps this O(L^2) without
  // an L^2 trig table.
  double peak = 0.0;
  for (std::size_t k = 1; k < l; ++k) {
    const double ang = -2.0 * M_PI * static_cast<double>(k) / static_cast<double>(l);
    const double cs = std::cos(ang), sn = std::sin(ang);
    double wr = 1.0, wi = 0.0;
    double re = 0.0, im = 0.0;
    for (std::size_t t = 0; t < l; ++t) {
      re += series[t] * wr;
      im += series[t] * wi;
      const double nwr = wr * cs - wi * sn;
      wi = wr * sn + wi * cs;
      wr = nwr;
    }
    peak = std::max(peak, std::hypot(re, im));
  }
  return peak / mean_abs;
}

}  // namespace transllm
