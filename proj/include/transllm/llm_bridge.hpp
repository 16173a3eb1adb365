#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "transllm/autodiff.hpp"
#include "transllm/params.hpp"
#include "transllm/tensor.hpp"

namespace transllm {

// ---- tokenizer ----------------------------------------------------------------

/// Whitespace tokenizer that also splits punctuation into single-char tokens.
std::vector<std::string> tokenize(const std::string& text);

/// Stable 64-bit FNV-1a hash of the token string, reduced mod vocab_size.
int token_id(const std::string& token, std::size_t vocab_size);
std::vector<int> token_ids(const std::string& text, std::size_t vocab_size);

// ---- prompt program -------------------------------------------------------------

enum class SegmentKind { Text, HisInjection, PreInjection };

struct PromptSegment {
  SegmentKind kind = SegmentKind::Text;
  std::string text;  // only for Text segments
};

/// A composed prompt: literal text interleaved with embedding-injection spans.
struct PromptProgram {
  std::vector<PromptSegment> segments;

  bool has_pre() const;
  bool has_his() const;
  /// Display form with each span rendered as <st_start><st_patch>...<st_end>.
  std::string render_display(std::size_t n_patch) const;
};

// ---- configs / params -------------------------------------------------------------

struct LmConfig {
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t vocab_size = 4096;
  std::size_t mlp_hidden = 128;
};

struct ProjectionParams {
  ad::Var w;  // in x d_model
  ad::Var b;  // d_model
};

struct LmLayerParams {
  ad::Var ln1_g, ln1_b;
  ad::Var wq, bq, wk, bk, wv, bv, wo, bo;
  ad::Var ln2_g, ln2_b;
  ad::Var mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

struct LmParams {
  ad::Var vocab;    // V x d, tied with the output projection
  ad::Var special;  // 2 x d: row 0 = st_start, row 1 = st_end
  std::vector<LmLayerParams> layers;
  ad::Var final_ln_g, final_ln_b;
};

ProjectionParams init_projection_params(ParamRegistry& reg, const std::string& prefix,
                                        std::size_t in_dim, std::size_t d_model, Rng& rng);
LmParams init_lm_params(ParamRegistry& reg, const std::string& prefix, const LmConfig& cfg,
                        Rng& rng);

/// Row-wise affine map into the LM hidden space: e (T x in) -> T x d_model.
ad::Var project(const ad::Var& e, const ProjectionParams& p);

// ---- injection --------------------------------------------------------------------

/// Assembled LM input: embeddings plus bookkeeping for extraction and loss.
struct LmInput {
  ad::Var embeddings;           // S x d_model
  std::vector<int> ids;         // S entries; text-token id or -1 at span positions
  int pre_start_index = -1;     // position of the PRE span's st_start (-1 if absent)
  int his_start_index = -1;     // position of the HIS span's st_start
  int extract_index = -1;       // PRE start, falling back to HIS start
  std::size_t response_begin = 0;  // [begin, end) positions holding response text
  std::size_t response_end = 0;

  std::size_t seq_len() const { return ids.size(); }
};

/// Expands every injection span of the program into
/// st_start + n_patch embedding rows + st_end, pulling patch rows from e_his /
/// e_pre (their first n_patch rows). `response_text`, when non-empty, is
/// appended as additional text positions (used for the LM loss).
LmInput inject_st(const PromptProgram& program, const ad::Var& e_his,
                  const std::optional<ad::Var>& e_pre, const LmParams& lm, const LmConfig& cfg,
                  std::size_t n_patch, const std::string& response_text = "");

// ---- surrogate forward ---------------------------------------------------------------

struct LMExchange {
  LmInput input;
  ad::Var hidden;  // S x d_model, aligned 1:1 with input positions
};

LMExchange lm_forward_surrogate(const LmInput& input, const LmParams& lm, const LmConfig& cfg);

/// Hidden state at the extraction token.
ad::Var extract_pre_state(const LMExchange& ex);

/// Mean next-token cross entropy over the response span (tied vocab logits).
/// Returns nullopt (with no graph) when the response span is empty.
std::optional<ad::Var> lm_cross_entropy(const LMExchange& ex, const LmParams& lm);

// ---- remote backend --------------------------------------------------------------------

struct RemoteInjection {
  int after_token_index = -1;  // span follows this text token; -1 = before all
  std::vector<std::vector<double>> vectors;
};

enum class RemoteLmErrorKind { Timeout, Http, MalformedBody };

struct RemoteLmError : std::runtime_error {
  RemoteLmErrorKind kind;
  int retries_used;
  RemoteLmError(RemoteLmErrorKind k, const std::string& msg, int retries)
      : std::runtime_error(msg), kind(k), retries_used(retries) {}
};

struct RemoteLmResult {
  Tensor hidden;  // S x d
  std::vector<int> st_indices;
};

/// HTTP client for the /v1/forward protocol. Retries timeouts and 5xx
/// responses up to max_retries; malformed bodies fail immediately.
class RemoteLmClient {
 public:
  explicit RemoteLmClient(std::string url, int timeout_ms = 5000, int max_retries = 2);
  RemoteLmResult forward(const std::vector<std::string>& tokens,
                         const std::vector<RemoteInjection>& injections) const;
  const std::string& url() const { return url_; }

 private:
  std::string url_;
  int timeout_ms_;
  int max_retries_;
};

/// Renders a prompt program into the wire form consumed by RemoteLmClient.
void program_to_wire(const PromptProgram& program, const Tensor& e_his, const Tensor& e_pre,
                     std::size_t n_patch, std::vector<std::string>& tokens,
                     std::vector<RemoteInjection>& injections);

}  // namespace transllm
