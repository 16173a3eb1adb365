#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "transllm/autodiff.hpp"
#include "transllm/losses_metrics.hpp"
#include "transllm/tensor.hpp"

namespace transllm {

/// One decision step's observation over the 3x3 neighborhood (row-major,
/// center cell at index 4).
struct DispatchObservation {
  Tensor vacant;           // 9
  Tensor demand_hist;      // K x 9
  Tensor competitor_hist;  // K x 9
  std::int64_t timestamp = 0;
};

struct DispatchScenario {
  DispatchObservation obs;
  Tensor demand_next;       // 9
  Tensor competitors_next;  // 9
  Tensor p_real;            // 9-simplex; empty when unavailable
  DistanceCosts costs = DistanceCosts::standard();

  bool has_p_real() const { return p_real.size() == 9; }
  double vacant_center() const { return obs.vacant[4]; }
};

/// Fluid matching model. supply_g = v0*pi_g + competitors_g;
/// m_g = 0 when demand_g = 0, 1 when supply_g = 0 and demand_g > 0,
/// min(1, demand_g / supply_g) otherwise. matched_ours_g = v0*pi_g*m_g.
struct MatchingOutcome {
  std::vector<double> matching_rate;  // m, in [0,1]
  std::vector<double> matched_ours;   // our matched vehicles per cell
  std::vector<double> supply;
};

MatchingOutcome matching_outcome(double v0, const std::vector<double>& pi,
                                 const std::vector<double>& demand,
                                 const std::vector<double>& competitors);

struct DispatchSynthConfig {
  std::size_t count = 1000;
  std::size_t history_len = 9;
  std::string concentration = "center";  // center | offcenter | corner | uniform
  double base_demand = 10.0;
  double demand_noise = 0.2;
  double competitor_intensity = 0.3;
  double vacant_mean = 10.0;
  double temperature = 2.0;  // p_real = softmax(net demand / temperature)
  int interval_minutes = 5;
  std::int64_t start_epoch_seconds = 0;
};

std::vector<DispatchScenario> synth_scenarios(const DispatchSynthConfig& cfg, std::uint64_t seed);

enum class BaselinePolicy { StayPut, Uniform, GreedyDemand };
BaselinePolicy baseline_policy_from_name(const std::string& name);

std::vector<double> baseline_policy(BaselinePolicy kind, const DispatchScenario& scenario);

// ---- metrics over scenario batches -------------------------------------------

struct DispatchMetrics {
  double mmr = 0.0;
  double mdd = 0.0;
  double w_dist = 0.0;
  std::size_t skipped = 0;
  std::size_t evaluated = 0;
};

/// Aggregates MMR / MDD / W-Dist over (policy, scenario) pairs; instances with
/// no vacant taxis at the center are skipped and counted.
DispatchMetrics metric_dispatch(const std::vector<std::vector<double>>& policies,
                                const std::vector<DispatchScenario>& scenarios);

DispatchMetrics evaluate_policy(BaselinePolicy kind, const std::vector<DispatchScenario>& scenarios);

// ---- training loss -------------------------------------------------------------

struct DispatchLossParts {
  ad::Var total;
  ad::Var reinforce;
  std::optional<ad::Var> wasserstein;
  ad::Var entropy;
  bool wasserstein_skipped = false;
};

/// L = L_rf + lambda_w * L_w + lambda_e * H(pi), with L_rf the negative
/// expected reward through the fluid matching model. Differentiable in pi.
DispatchLossParts dispatch_loss(const ad::Var& pi, const DispatchScenario& scenario,
                                const LossWeights& weights, const RewardParams& rp);

/// Expected reward sum_g pi_g * R_g evaluated at plain values (router reward).
double expected_dispatch_reward(const std::vector<double>& pi, const DispatchScenario& scenario,
                                const RewardParams& rp);

// ---- scenario file I/O (JSON lines) ----------------------------------------------

void save_scenarios_jsonl(const std::vector<DispatchScenario>& scenarios, const std::string& path);
std::vector<DispatchScenario> load_scenarios_jsonl(const std::string& path);

}  // namespace transllm
