#include "transllm/llm_bridge.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "httplib.h"
#include "json.hpp"

namespace transllm {

// ---- tokenizer ----------------------------------------------------------------

std::vector<std::string> tokenize(const std::string& text) {
  static const std::string punct = ".,:;!?()[]{}<>\"'`~@#$%^&*+=|\\/";
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) {
      out.push_back(cur);
      cur.clear();
    }
  };
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      flush();
    } else if (punct.find(c) != std::string::npos) {
      flush();
      out.emplace_back(1, c);
    } else {
      cur.push_back(c);
    }
  }
  flush();
  return out;
}

int token_id(const std::string& token, std::size_t vocab_size) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : token) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return static_cast<int>(h % vocab_size);
}

std::vector<int> token_ids(const std::string& text, std::size_t vocab_size) {
  std::vector<int> out;
  for (const std::string& t : tokenize(text)) out.push_back(token_id(t, vocab_size));
  return out;
}

// ---- prompt program -------------------------------------------------------------

bool PromptProgram::has_pre() const {
  for (const auto& s : segments)
    if (s.kind == SegmentKind::PreInjection) return true;
  return false;
}

bool PromptProgram::has_his() const {
  for (const auto& s : segments)
    if (s.kind == SegmentKind::HisInjection) return true;
  return false;
}

std::string PromptProgram::render_display(std::size_t n_patch) const {
  std::string out;
  for (const auto& s : segments) {
    if (s.kind == SegmentKind::Text) {
      out += s.text;
    } else {
      out += "<st_start>";
      for (std::size_t i = 0; i < n_patch; ++i) out += "<st_patch>";
      out += "<st_end>";
    }
  }
  return out;
}

// ---- params ----------------------------------------------------------------------

ProjectionParams init_projection_params(ParamRegistry& reg, const std::string& prefix,
                                        std::size_t in_dim, std::size_t d_model, Rng& rng) {
  ProjectionParams p;
  p.w = reg.create(prefix + ".w", {in_dim, d_model}, in_dim, rng);
  p.b = reg.create_zeros(prefix + ".b", {d_model});
  return p;
}

LmParams init_lm_params(ParamRegistry& reg, const std::string& prefix, const LmConfig& cfg,
                        Rng& rng) {
  const std::size_t d = cfg.d_model;
  LmParams lm;
  lm.vocab = reg.create(prefix + ".vocab", {cfg.vocab_size, d}, d, rng);
  lm.special = reg.create(prefix + ".special", {2, d}, d, rng);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string base = prefix + ".layer" + std::to_string(l);
    LmLayerParams lp;
    lp.ln1_g = reg.create_full(base + ".ln1.g", {d}, 1.0);
    lp.ln1_b = reg.create_zeros(base + ".ln1.b", {d});
    lp.wq = reg.create(base + ".attn.wq", {d, d}, d, rng);
    lp.bq = reg.create_zeros(base + ".attn.bq", {d});
    lp.wk = reg.create(base + ".attn.wk", {d, d}, d, rng);
    lp.bk = reg.create_zeros(base + ".attn.bk", {d});
    lp.wv = reg.create(base + ".attn.wv", {d, d}, d, rng);
    lp.bv = reg.create_zeros(base + ".attn.bv", {d});
    lp.wo = reg.create(base + ".attn.wo", {d, d}, d, rng);
    lp.bo = reg.create_zeros(base + ".attn.bo", {d});
    lp.ln2_g = reg.create_full(base + ".ln2.g", {d}, 1.0);
    lp.ln2_b = reg.create_zeros(base + ".ln2.b", {d});
    lp.mlp_w1 = reg.create(base + ".mlp.w1", {d, cfg.mlp_hidden}, d, rng);
    lp.mlp_b1 = reg.create_zeros(base + ".mlp.b1", {cfg.mlp_hidden});
    lp.mlp_w2 = reg.create(base + ".mlp.w2", {cfg.mlp_hidden, d}, cfg.mlp_hidden, rng);
    lp.mlp_b2 = reg.create_zeros(base + ".mlp.b2", {d});
    lm.layers.push_back(std::move(lp));
  }
  lm.final_ln_g = reg.create_full(prefix + ".final_ln.g", {d}, 1.0);
  lm.final_ln_b = reg.create_zeros(prefix + ".final_ln.b", {d});
  return lm;
}

ad::Var project(const ad::Var& e, const ProjectionParams& p) {
  return ad::add_row_vector(ad::matmul(e, p.w), p.b);
}

// ---- injection --------------------------------------------------------------------

LmInput inject_st(const PromptProgram& program, const ad::Var& e_his,
                  const std::optional<ad::Var>& e_pre, const LmParams& lm, const LmConfig& cfg,
                  std::size_t n_patch, const std::string& response_text) {
  if (n_patch == 0) throw std::invalid_argument("inject_st: n_patch must be >= 1");
  LmInput in;
  std::vector<ad::Var> pieces;
  std::size_t pos = 0;

  auto push_text = [&](const std::string& text) {
    std::vector<int> ids = token_ids(text, cfg.vocab_size);
    if (ids.empty()) return;
    pieces.push_back(ad::embedding_rows(lm.vocab, ids));
    for (int id : ids) in.ids.push_back(id);
    pos += ids.size();
  };
  auto push_span = [&](const ad::Var& e, bool is_pre) {
    if (e.value().rank() != 2 || e.value().dim(1) != cfg.d_model) {
      throw std::invalid_argument("inject_st: embedding width != d_model");
    }
    if (e.value().dim(0) < n_patch) {
      throw std::invalid_argument("inject_st: need " + std::to_string(n_patch) +
                                  " patch embeddings, got " + std::to_string(e.value().dim(0)));
    }
    const int start = static_cast<int>(pos);
    pieces.push_back(ad::row(lm.special, 0));
    pieces.push_back(ad::slice_rows(e, 0, n_patch));
    pieces.push_back(ad::row(lm.special, 1));
    for (std::size_t i = 0; i < n_patch + 2; ++i) in.ids.push_back(-1);
    pos += n_patch + 2;
    if (is_pre) {
      in.pre_start_index = start;
    } else {
      in.his_start_index = start;
    }
  };

  for (const PromptSegment& seg : program.segments) {
    switch (seg.kind) {
      case SegmentKind::Text:
        push_text(seg.text);
        break;
      case SegmentKind::HisInjection:
        push_span(e_his, false);
        break;
      case SegmentKind::PreInjection:
        if (!e_pre) throw std::invalid_argument("inject_st: program has a PRE span but no e_pre");
        push_span(*e_pre, true);
        break;
    }
  }
  if (!response_text.empty()) {
    in.response_begin = pos;
    push_text(response_text);
    in.response_end = pos;
  }
  if (pieces.empty()) throw std::invalid_argument("inject_st: empty program");

  in.extract_index = in.pre_start_index >= 0 ? in.pre_start_index : in.his_start_index;
  if (in.extract_index < 0) {
    throw std::invalid_argument("inject_st: program has no injection span to extract from");
  }
  in.embeddings = pieces.size() == 1 ? pieces[0] : ad::concat_rows(pieces);
  return in;
}

// ---- surrogate forward ---------------------------------------------------------------

namespace {

Tensor sinusoidal_positions(std::size_t s, std::size_t d) {
  Tensor pe({s, d});
  for (std::size_t p = 0; p < s; ++p)
    for (std::size_t i = 0; i < d; ++i) {
      const double rate = std::pow(10000.0, -2.0 * static_cast<double>(i / 2) / static_cast<double>(d));
      const double ang = static_cast<double>(p) * rate;
      pe(p, i) = (i % 2 == 0) ? std::sin(ang) : std::cos(ang);
    }
  return pe;
}

}  // namespace

LMExchange lm_forward_surrogate(const LmInput& input, const LmParams& lm, const LmConfig& cfg) {
  const std::size_t s = input.seq_len();
  const std::size_t d = cfg.d_model;
  ad::Var x = ad::add_const(input.embeddings, sinusoidal_positions(s, d));
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  for (const LmLayerParams& lp : lm.layers) {
    ad::Var h = ad::layer_norm_rows(x, lp.ln1_g, lp.ln1_b);
    ad::Var q = ad::add_row_vector(ad::matmul(h, lp.wq), lp.bq);
    ad::Var k = ad::add_row_vector(ad::matmul(h, lp.wk), lp.bk);
    ad::Var v = ad::add_row_vector(ad::matmul(h, lp.wv), lp.bv);
    ad::Var att = ad::causal_softmax_rows(ad::scale(ad::matmul(q, ad::transpose(k)), inv_sqrt_d));
    ad::Var ctx = ad::matmul(att, v);
    x = ad::add(x, ad::add_row_vector(ad::matmul(ctx, lp.wo), lp.bo));
    ad::Var h2 = ad::layer_norm_rows(x, lp.ln2_g, lp.ln2_b);
    ad::Var mid = ad::relu(ad::add_row_vector(ad::matmul(h2, lp.mlp_w1), lp.mlp_b1));
    x = ad::add(x, ad::add_row_vector(ad::matmul(mid, lp.mlp_w2), lp.mlp_b2));
  }
  LMExchange ex;
  ex.input = input;
  ex.hidden = ad::layer_norm_rows(x, lm.final_ln_g, lm.final_ln_b);
  return ex;
}

ad::Var extract_pre_state(const LMExchange& ex) {
  if (ex.input.extract_index < 0) throw std::logic_error("extract_pre_state: no extraction index");
  return ad::row(ex.hidden, static_cast<std::size_t>(ex.input.extract_index));
}

std::optional<ad::Var> lm_cross_entropy(const LMExchange& ex, const LmParams& lm) {
  const std::size_t s = ex.input.seq_len();
  std::vector<int> targets(s, -1);
  bool any = false;
  for (std::size_t p = ex.input.response_begin; p < ex.input.response_end; ++p) {
    if (p == 0) continue;  // nothing predicts the first position
    targets[p - 1] = ex.input.ids[p];
    any = true;
  }
  if (!any) return std::nullopt;
  ad::Var logits = ad::matmul(ex.hidden, ad::transpose(lm.vocab));
  return ad::cross_entropy_positions(logits, targets);
}

// ---- remote backend --------------------------------------------------------------------

RemoteLmClient::RemoteLmClient(std::string url, int timeout_ms, int max_retries)
    : url_(std::move(url)), timeout_ms_(timeout_ms), max_retries_(max_retries) {}

RemoteLmResult RemoteLmClient::forward(const std::vector<std::string>& tokens,
                                       const std::vector<RemoteInjection>& injections) const {
  nlohmann::json body;
  body["tokens"] = tokens;
  body["injections"] = nlohmann::json::array();
  for (const RemoteInjection& inj : injections) {
    body["injections"].push_back(
        {{"after_token_index", inj.after_token_index}, {"vectors", inj.vectors}});
  }
  body["return"] = "hidden_states";
  const std::string payload = body.dump();

  httplib::Client cli(url_);
  cli.set_connection_timeout(0, timeout_ms_ * 1000);
  cli.set_read_timeout(0, timeout_ms_ * 1000);

  int attempts = 0;
  std::string last_error;
  while (attempts <= max_retries_) {
    ++attempts;
    auto res = cli.Post("/v1/forward", payload, "application/json");
    if (!res) {
      last_error = "connection/timeout failure: " + httplib::to_string(res.error());
      continue;  // retryable
    }
    if (res->status >= 500) {
      last_error = "server error " + std::to_string(res->status);
      continue;  // retryable
    }
    if (res->status != 200) {
      throw RemoteLmError(RemoteLmErrorKind::Http,
                          "remote LM returned HTTP " + std::to_string(res->status) + ": " + res->body,
                          attempts - 1);
    }
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(res->body);
    } catch (const std::exception& e) {
      throw RemoteLmError(RemoteLmErrorKind::MalformedBody,
                          std::string("malformed response body (not JSON): ") + e.what(),
                          attempts - 1);
    }
    if (!doc.contains("hidden") || !doc["hidden"].is_array()) {
      throw RemoteLmError(RemoteLmErrorKind::MalformedBody,
                          "malformed response body: missing 'hidden' array", attempts - 1);
    }
    RemoteLmResult out;
    const auto& hidden = doc["hidden"];
    const std::size_t s = hidden.size();
    if (s == 0) {
      throw RemoteLmError(RemoteLmErrorKind::MalformedBody, "malformed response body: empty hidden",
                          attempts - 1);
    }
    const std::size_t d = hidden[0].size();
    out.hidden = Tensor({s, d});
    for (std::size_t i = 0; i < s; ++i) {
      if (hidden[i].size() != d) {
        throw RemoteLmError(RemoteLmErrorKind::MalformedBody,
                            "malformed response body: ragged hidden rows", attempts - 1);
      }
      for (std::size_t j = 0; j < d; ++j) out.hidden(i, j) = hidden[i][j].get<double>();
    }
    if (doc.contains("st_indices")) {
      for (const auto& v : doc["st_indices"]) out.st_indices.push_back(v.get<int>());
    }
    return out;
  }
  throw RemoteLmError(RemoteLmErrorKind::Timeout,
                      "remote LM unreachable after " + std::to_string(attempts) +
                          " attempts: " + last_error,
                      attempts - 1);
}

void program_to_wire(const PromptProgram& program, const Tensor& e_his, const Tensor& e_pre,
                     std::size_t n_patch, std::vector<std::string>& tokens,
                     std::vector<RemoteInjection>& injections) {
  tokens.clear();
  injections.clear();
  for (const PromptSegment& seg : program.segments) {
    if (seg.kind == SegmentKind::Text) {
      for (std::string& t : tokenize(seg.text)) tokens.push_back(std::move(t));
      continue;
    }
    const Tensor& e = seg.kind == SegmentKind::HisInjection ? e_his : e_pre;
    check_shape(e.rank() == 2 && e.dim(0) >= n_patch, "program_to_wire embeddings");
    RemoteInjection inj;
    inj.after_token_index = static_cast<int>(tokens.size()) - 1;
    for (std::size_t i = 0; i < n_patch; ++i) {
      std::vector<double> row(e.dim(1));
      for (std::size_t j = 0; j < e.dim(1); ++j) row[j] = e(i, j);
      inj.vectors.push_back(std::move(row));
    }
    injections.push_back(std::move(inj));
  }
}

}  // namespace transllm
