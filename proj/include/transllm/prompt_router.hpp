#pragma once

#include <map>
#include <string>
#include <vector>

#include "transllm/autodiff.hpp"
#include "transllm/llm_bridge.hpp"
#include "transllm/params.hpp"
#include "transllm/rng.hpp"
#include "transllm/st_encoder.hpp"

namespace transllm {

struct PromptSlot {
  std::string name;
  std::vector<std::string> candidates;
};

/// Slotted candidate-sentence pool; the router picks one candidate per slot.
/// Text placeholders use {NAME}; embedding markers are <HIS_EMB> / <PRE_EMB>.
struct PromptPool {
  std::vector<PromptSlot> slots;

  static PromptPool load(const std::string& path);
  static PromptPool from_json_text(const std::string& text);

  /// Checks every composable prompt carries exactly one <HIS_EMB> and,
  /// when require_pre, exactly one <PRE_EMB> (otherwise none).
  void validate(bool require_pre) const;

  std::vector<std::size_t> candidate_counts() const;
};

struct RouterSlotParams {
  ad::Var actor_w1, actor_b1, actor_w2, actor_b2;
  ad::Var critic_w1, critic_b1, critic_w2, critic_b2;
};

struct RouterParams {
  std::vector<RouterSlotParams> slots;
  std::vector<std::size_t> n_candidates;
  std::size_t input_dim = 0;
  std::size_t hidden = 64;
};

RouterParams init_router_params(ParamRegistry& reg, const std::string& prefix,
                                std::size_t input_dim, const std::vector<std::size_t>& candidates,
                                Rng& rng);

enum class RouteMode { Sample, Greedy };

struct RouterDecision {
  std::vector<std::size_t> actions;
  std::vector<double> logprobs;  // log pi_k(a_k)
  std::vector<double> values;    // critic estimates
  bool greedy = false;
  std::vector<double> context;  // router input, retained for the update step
};

/// Time-mean of the fused representation for one node: the router's input.
std::vector<double> pool_router_input(const EncoderOutput& out, std::size_t node);

/// Sample (rng required) or argmax one candidate per slot.
RouterDecision route(const std::vector<double>& ctx, const RouterParams& params, RouteMode mode,
                     Rng* rng);

/// Joins the chosen candidates in slot order, resolves {NAME} placeholders
/// from ctx_fields, and splits embedding markers into injection segments.
PromptProgram compose_prompt(const PromptPool& pool, const RouterDecision& decision,
                             const std::map<std::string, std::string>& ctx_fields);

struct SlotLosses {
  double actor = 0.0;
  double critic = 0.0;
};

/// Per-slot actor/critic losses for a sampled decision and a shared reward.
std::vector<SlotLosses> router_losses(const RouterDecision& decision, double reward);

/// One gradient step per slot on mean actor + mean critic loss over the batch.
void router_update(const std::vector<std::pair<RouterDecision, double>>& batch,
                   const RouterParams& params, double lr);

struct RoutingStats {
  bool empty = true;
  std::vector<std::vector<double>> frequency;  // [slot][candidate]
};

RoutingStats routing_stats(const std::vector<RouterDecision>& decisions,
                           const std::vector<std::size_t>& candidate_counts);

void save_routing_stats_csv(const RoutingStats& stats, const PromptPool& pool,
                            const std::string& path);

}  // namespace transllm
