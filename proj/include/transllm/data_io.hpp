#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "transllm/tensor.hpp"

namespace transllm {

/// A fixed-cadence multivariate series: values are L_total x N x F.
struct SeriesDataset {
  Tensor values;
  int interval_minutes = 0;
  std::int64_t start_epoch_seconds = 0;
  std::vector<std::string> node_ids;

  std::size_t length() const { return values.dim(0); }
  std::size_t num_nodes() const { return values.dim(1); }
  std::size_t num_features() const { return values.dim(2); }
};

/// One supervised instance. clock has 8 columns per history step:
/// time-of-day scalar in [0,1) followed by a day-of-week one-hot.
struct WindowSample {
  Tensor history;  // K x N x F
  Tensor target;   // T x N x 1
  Tensor clock;    // K x 8
  std::size_t origin_index = 0;
};

struct NormStats {
  std::vector<double> mean;  // per feature
  std::vector<double> std;   // per feature, floored at 1e-6
};

struct SynthConfig {
  std::size_t num_nodes = 20;
  std::size_t length = 480;
  int interval_minutes = 60;
  std::int64_t start_epoch_seconds = 0;
  double base = 20.0;
  double amplitude = 10.0;
  double noise_sigma = 1.0;
  std::vector<double> phases;  // per node; defaults to 2*pi*n/N when empty
};

constexpr std::size_t kClockChannels = 8;

std::int64_t parse_timestamp(const std::string& s);
std::string format_timestamp(std::int64_t epoch_seconds);

/// Reads `timestamp,node_0,...` CSV. Validates cadence, monotonicity, and
/// finiteness; errors carry the 1-based row number.
SeriesDataset load_series(const std::string& path);
void save_series_csv(const SeriesDataset& ds, const std::string& path);

/// 8-column clock features for rows [row0, row0+k) of the dataset.
Tensor clock_features(const SeriesDataset& ds, std::size_t row0, std::size_t k);

std::vector<WindowSample> make_windows(const SeriesDataset& ds, std::size_t history_len,
                                       std::size_t horizon, std::size_t stride);

NormStats zscore_fit(const SeriesDataset& ds, std::size_t row0, std::size_t row1);
/// Normalizes feature channels in place along the last axis.
Tensor zscore_apply(const Tensor& x, const NormStats& stats);
Tensor zscore_invert(const Tensor& x, const NormStats& stats);

SeriesDataset synth_generate(const SynthConfig& cfg, std::uint64_t seed);

/// Dominant nonzero-frequency DFT magnitude over the mean absolute value.
/// Returns 0 for degenerate input (all zeros).
double periodicity_score(const std::vector<double>& series);

}  // namespace transllm
