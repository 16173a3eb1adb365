#include "transllm/prompt_router.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace transllm {

namespace {

constexpr const char* kHisMarker = "<HIS_EMB>";
constexpr const char* kPreMarker = "<PRE_EMB>";

std::size_t count_occurrences(const std::string& s, const std::string& needle) {
  std::size_t count = 0, pos = 0;
  while ((pos = s.find(needle, pos)) != std::string::npos) {
    ++count;
    pos += needle.size();
  }
  return count;
}

}  // namespace

PromptPool PromptPool::from_json_text(const std::string& text) {
  nlohmann::json doc = nlohmann::json::parse(text);
  PromptPool pool;
  for (const auto& s : doc.at("slots")) {
    PromptSlot slot;
    slot.name = s.at("name").get<std::string>();
    for (const auto& c : s.at("candidates")) slot.candidates.push_back(c.get<std::string>());
    if (slot.candidates.empty()) {
      throw std::invalid_argument("prompt pool slot '" + slot.name + "' has no candidates");
    }
    pool.slots.push_back(std::move(slot));
  }
  if (pool.slots.empty()) throw std::invalid_argument("prompt pool has no slots");
  return pool;
}

PromptPool PromptPool::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open prompt pool: " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return from_json_text(text);
}

void PromptPool::validate(bool require_pre) const {
  // Every composed prompt has fixed marker counts iff candidates within each
  // slot agree; the per-slot counts must then sum to exactly one HIS (and one
  // PRE when required).
  std::size_t his_total = 0, pre_total = 0;
  for (const PromptSlot& slot : slots) {
    const std::size_t his = count_occurrences(slot.candidates[0], kHisMarker);
    const std::size_t pre = count_occurrences(slot.candidates[0], kPreMarker);
    for (const std::string& c : slot.candidates) {
      if (count_occurrences(c, kHisMarker) != his || count_occurrences(c, kPreMarker) != pre) {
        throw std::invalid_argument("slot '" + slot.name +
                                    "': candidates disagree on embedding markers");
      }
    }
    his_total += his;
    pre_total += pre;
  }
  if (his_total != 1) {
    throw std::invalid_argument("prompt pool must compose exactly one " + std::string(kHisMarker));
  }
  const std::size_t want_pre = require_pre ? 1 : 0;
  if (pre_total != want_pre) {
    throw std::invalid_argument("prompt pool must compose exactly " + std::to_string(want_pre) +
                                " " + std::string(kPreMarker));
  }
}

std::vector<std::size_t> PromptPool::candidate_counts() const {
  std::vector<std::size_t> out;
  for (const PromptSlot& s : slots) out.push_back(s.candidates.size());
  return out;
}

RouterParams init_router_params(ParamRegistry& reg, const std::string& prefix,
                                std::size_t input_dim, const std::vector<std::size_t>& candidates,
                                Rng& rng) {
  RouterParams rp;
  rp.input_dim = input_dim;
  rp.n_candidates = candidates;
  for (std::size_t k = 0; k < candidates.size(); ++k) {
    const std::string base = prefix + ".slot" + std::to_string(k);
    RouterSlotParams sp;
    sp.actor_w1 = reg.create(base + ".actor.w1", {input_dim, rp.hidden}, input_dim, rng);
    sp.actor_b1 = reg.create_zeros(base + ".actor.b1", {rp.hidden});
    sp.actor_w2 = reg.create(base + ".actor.w2", {rp.hidden, candidates[k]}, rp.hidden, rng);
    sp.actor_b2 = reg.create_zeros(base + ".actor.b2", {candidates[k]});
    sp.critic_w1 = reg.create(base + ".critic.w1", {input_dim, rp.hidden}, input_dim, rng);
    sp.critic_b1 = reg.create_zeros(base + ".critic.b1", {rp.hidden});
    sp.critic_w2 = reg.create(base + ".critic.w2", {rp.hidden, 1}, rp.hidden, rng);
    sp.critic_b2 = reg.create_zeros(base + ".critic.b2", {1});
    rp.slots.push_back(std::move(sp));
  }
  return rp;
}

std::vector<double> pool_router_input(const EncoderOutput& out, std::size_t node) {
  const Tensor& h = out.fused.value();
  if (node >= h.dim(1)) throw std::out_of_range("pool_router_input: node out of range");
  const std::size_t t = h.dim(0), c = h.dim(2);
  std::vector<double> ctx(c, 0.0);
  for (std::size_t ti = 0; ti < t; ++ti)
    for (std::size_t ci = 0; ci < c; ++ci) ctx[ci] += h(ti, node, ci);
  for (double& x : ctx) x /= static_cast<double>(t);
  return ctx;
}

namespace {

struct MlpOut {
  std::vector<double> out;
};

std::vector<double> mlp_forward(const std::vector<double>& x, const Tensor& w1, const Tensor& b1,
                                const Tensor& w2, const Tensor& b2) {
  const std::size_t in = w1.dim(0), hid = w1.dim(1), out_dim = w2.dim(1);
  std::vector<double> h(hid, 0.0);
  for (std::size_t i = 0; i < in; ++i) {
    const double xv = x[i];
    if (xv == 0.0) continue;
    for (std::size_t j = 0; j < hid; ++j) h[j] += xv * w1(i, j);
  }
  for (std::size_t j = 0; j < hid; ++j) h[j] = std::max(h[j] + b1[j], 0.0);
  std::vector<double> o(out_dim, 0.0);
  for (std::size_t j = 0; j < hid; ++j) {
    const double hv = h[j];
    if (hv == 0.0) continue;
    for (std::size_t k = 0; k < out_dim; ++k) o[k] += hv * w2(j, k);
  }
  for (std::size_t k = 0; k < out_dim; ++k) o[k] += b2[k];
  return o;
}

std::vector<double> softmax_probs(const std::vector<double>& logits) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

}  // namespace

RouterDecision route(const std::vector<double>& ctx, const RouterParams& params, RouteMode mode,
                     Rng* rng) {
  if (ctx.size() != params.input_dim) {
    throw std::invalid_argument("route: context size " + std::to_string(ctx.size()) +
                                " != router input dim " + std::to_string(params.input_dim));
  }
  if (mode == RouteMode::Sample && rng == nullptr) {
    throw std::invalid_argument("route: sample mode requires an rng");
  }
  RouterDecision d;
  d.greedy = mode == RouteMode::Greedy;
  d.context = ctx;
  for (std::size_t k = 0; k < params.slots.size(); ++k) {
    const RouterSlotParams& sp = params.slots[k];
    const std::vector<double> logits = mlp_forward(ctx, sp.actor_w1.value(), sp.actor_b1.value(),
                                                   sp.actor_w2.value(), sp.actor_b2.value());
    const std::vector<double> probs = softmax_probs(logits);
    std::size_t a;
    if (mode == RouteMode::Greedy) {
      a = static_cast<std::size_t>(
          std::max_element(probs.begin(), probs.end()) - probs.begin());
    } else {
      a = rng->categorical(probs);
    }
    const std::vector<double> value = mlp_forward(ctx, sp.critic_w1.value(), sp.critic_b1.value(),
                                                  sp.critic_w2.value(), sp.critic_b2.value());
    d.actions.push_back(a);
    d.logprobs.push_back(std::log(probs[a]));
    d.values.push_back(value[0]);
  }
  return d;
}

PromptProgram compose_prompt(const PromptPool& pool, const RouterDecision& decision,
                             const std::map<std::string, std::string>& ctx_fields) {
  if (decision.actions.size() != pool.slots.size()) {
    throw std::invalid_argument("compose_prompt: decision has " +
                                std::to_string(decision.actions.size()) + " actions for " +
                                std::to_string(pool.slots.size()) + " slots");
  }
  std::string text;
  for (std::size_t k = 0; k < pool.slots.size(); ++k) {
    const PromptSlot& slot = pool.slots[k];
    const std::size_t a = decision.actions[k];
    if (a >= slot.candidates.size()) {
      throw std::invalid_argument("compose_prompt: action out of range for slot '" + slot.name + "'");
    }
    std::string sentence = slot.candidates[a];
    // resolve {NAME} placeholders
    std::size_t pos = 0;
    while ((pos = sentence.find('{', pos)) != std::string::npos) {
      const std::size_t end = sentence.find('}', pos);
      if (end == std::string::npos) break;
      const std::string key = sentence.substr(pos + 1, end - pos - 1);
      auto it = ctx_fields.find(key);
      if (it == ctx_fields.end()) {
        throw std::invalid_argument("compose_prompt: slot '" + slot.name +
                                    "' placeholder {" + key + "} not supplied");
      }
      sentence.replace(pos, end - pos + 1, it->second);
      pos += it->second.size();
    }
    if (!text.empty()) text += " ";
    text += sentence;
  }

  PromptProgram prog;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::size_t his = text.find(kHisMarker, pos);
    const std::size_t pre = text.find(kPreMarker, pos);
    const std::size_t next = std::min(his, pre);
    if (next == std::string::npos) {
      prog.segments.push_back({SegmentKind::Text, text.substr(pos)});
      break;
    }
    if (next > pos) prog.segments.push_back({SegmentKind::Text, text.substr(pos, next - pos)});
    if (next == his) {
      prog.segments.push_back({SegmentKind::HisInjection, ""});
      pos = next + std::string(kHisMarker).size();
    } else {
      prog.segments.push_back({SegmentKind::PreInjection, ""});
      pos = next + std::string(kPreMarker).size();
    }
  }
  return prog;
}

std::vector<SlotLosses> router_losses(const RouterDecision& decision, double reward) {
  if (decision.greedy) {
    throw std::invalid_argument("router_losses: greedy decisions carry no sampling distribution");
  }
  std::vector<SlotLosses> out;
  for (std::size_t k = 0; k < decision.actions.size(); ++k) {
    const double adv = reward - decision.values[k];
    SlotLosses l;
    l.actor = -decision.logprobs[k] * adv;
    l.critic = adv * adv;
    out.push_back(l);
  }
  return out;
}

void router_update(const std::vector<std::pair<RouterDecision, double>>& batch,
                   const RouterParams& params, double lr) {
  if (batch.empty()) throw std::invalid_argument("router_update: empty batch");
  for (const auto& [d, r] : batch) {
    if (d.greedy) throw std::invalid_argument("router_update: greedy decision in batch");
    (void)r;
  }

  std::vector<ad::Var> trainable;
  for (const RouterSlotParams& sp : params.slots) {
    for (const ad::Var& v : {sp.actor_w1, sp.actor_b1, sp.actor_w2, sp.actor_b2, sp.critic_w1,
                             sp.critic_b1, sp.critic_w2, sp.critic_b2}) {
      trainable.push_back(v);
    }
  }
  ad::zero_grad(trainable);

  const double inv_b = 1.0 / static_cast<double>(batch.size());
  ad::Var total;
  for (const auto& [decision, reward] : batch) {
    Tensor ctx({1, params.input_dim});
    for (std::size_t i = 0; i < params.input_dim; ++i) ctx(0, i) = decision.context[i];
    ad::Var x = ad::constant(ctx);
    for (std::size_t k = 0; k < params.slots.size(); ++k) {
      const RouterSlotParams& sp = params.slots[k];
      ad::Var hid = ad::relu(ad::add_row_vector(ad::matmul(x, sp.actor_w1), sp.actor_b1));
      ad::Var logits = ad::add_row_vector(ad::matmul(hid, sp.actor_w2), sp.actor_b2);
      ad::Var probs = ad::softmax(ad::reshape(logits, {params.n_candidates[k]}));
      Tensor onehot({params.n_candidates[k]});
      onehot[decision.actions[k]] = 1.0;
      ad::Var logp = ad::sum_all(ad::mul_const(ad::log(probs), onehot));

      ad::Var chid = ad::relu(ad::add_row_vector(ad::matmul(x, sp.critic_w1), sp.critic_b1));
      ad::Var value = ad::reshape(ad::add_row_vector(ad::matmul(chid, sp.critic_w2), sp.critic_b2),
                                  {1});
      // advantage is a constant in the actor term
      const double adv = reward - value.value()[0];
      ad::Var actor_loss = ad::scale(logp, -adv);
      ad::Var delta = ad::add_const(ad::neg(value), Tensor::scalar(reward));
      ad::Var critic_loss = ad::mul(delta, delta);
      ad::Var inst = ad::scale(ad::add(actor_loss, critic_loss), inv_b);
      total = total.defined() ? ad::add(total, inst) : inst;
    }
  }
  ad::backward(total);

  for (const ad::Var& v : trainable) {
    const Tensor& g = v.grad();
    if (g.size() != v.value().size()) continue;  // unused parameter this batch
    for (double gv : g.vec()) {
      if (!std::isfinite(gv)) {
        throw std::runtime_error("router_update: non-finite gradient encountered");
      }
    }
    Tensor& val = v.node()->value;
    for (std::size_t i = 0; i < val.size(); ++i) val[i] -= lr * g[i];
  }
}

RoutingStats routing_stats(const std::vector<RouterDecision>& decisions,
                           const std::vector<std::size_t>& candidate_counts) {
  RoutingStats stats;
  stats.frequency.resize(candidate_counts.size());
  for (std::size_t k = 0; k < candidate_counts.size(); ++k) {
    stats.frequency[k].assign(candidate_counts[k], 0.0);
  }
  if (decisions.empty()) return stats;
  stats.empty = false;
  for (const RouterDecision& d : decisions) {
    for (std::size_t k = 0; k < d.actions.size() && k < candidate_counts.size(); ++k) {
      stats.frequency[k][d.actions[k]] += 1.0;
    }
  }
  for (auto& row : stats.frequency) {
    double total = 0.0;
    for (double v : row) total += v;
    if (total > 0.0)
      for (double& v : row) v /= total;
  }
  return stats;
}

void save_routing_stats_csv(const RoutingStats& stats, const PromptPool& pool,
                            const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write routing stats: " + path);
  out << "slot,candidate,frequency\n";
  for (std::size_t k = 0; k < stats.frequency.size(); ++k) {
    for (std::size_t c = 0; c < stats.frequency[k].size(); ++c) {
      out << pool.slots[k].name << "," << c << "," << stats.frequency[k][c] << "\n";
    }
  }
}

}  // namespace transllm
