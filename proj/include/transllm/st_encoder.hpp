#pragma once

#include <string>
#include <vector>

#include "transllm/autodiff.hpp"
#include "transllm/graph.hpp"
#include "transllm/params.hpp"
#include "transllm/tensor.hpp"

namespace transllm {

struct EncoderConfig {
  std::size_t n_blocks = 2;
  std::size_t channels = 64;  // per-branch output width
  std::size_t kernel = 2;
  std::vector<std::size_t> dilations = {1, 2};  // one per block
  std::size_t gat_heads = 4;
  double leaky_slope = 0.2;
  std::size_t history_len = 12;
  std::size_t horizon = 12;

  void validate() const;
};

struct StBlockParams {
  ad::Var tcn_in_w, tcn_in_b;
  ad::Var tcn_out_w, tcn_out_b;
  std::vector<ad::GatHeadParams> heads;
  std::size_t dilation = 1;
  bool input_residual = false;  // first block changes channel count
};

struct BranchParams {
  std::vector<StBlockParams> blocks;
  ad::Var node_meta;  // N x channels, broadcast-added after the first conv
  ad::Var time_proj;  // history_len x horizon
};

struct EncoderParams {
  BranchParams spatial;
  BranchParams semantic;
  std::size_t input_channels = 0;
  std::size_t num_nodes = 0;
};

struct EncoderOutput {
  ad::Var h_spatial;   // T x N x D
  ad::Var h_semantic;  // T x N x D
  ad::Var fused;       // T x N x 2D
};

/// Registers one branch's parameters under `prefix` and returns handles.
BranchParams init_branch_params(ParamRegistry& reg, const std::string& prefix,
                                const EncoderConfig& cfg, std::size_t num_nodes,
                                std::size_t input_channels, Rng& rng);

EncoderParams init_encoder_params(ParamRegistry& reg, const std::string& prefix,
                                  const EncoderConfig& cfg, std::size_t num_nodes,
                                  std::size_t input_channels, Rng& rng);

/// Causal dilated convolution followed by ReLU, plus an identity shortcut
/// when requested (requires matching channel counts).
ad::Var temporal_conv(const ad::Var& x, const ad::Var& w, const ad::Var& b, std::size_t dilation,
                      bool residual);

/// One sandwich unit: conv -> +node_meta -> per-step graph attention -> conv.
ad::Var st_block(const ad::Var& x, const Tensor& adj, const ad::Var& node_meta,
                 const StBlockParams& p, const EncoderConfig& cfg);

/// Full dual-branch encode of a K x N x F' input (values + clock channels).
EncoderOutput encode(const ad::Var& x_with_clock, const AdjacencyPair& pair,
                     const EncoderParams& params, const EncoderConfig& cfg);

/// Assembles the encoder input tensor: history K x N x F plus clock K x 8
/// broadcast across nodes -> K x N x (F + 8).
Tensor assemble_encoder_input(const Tensor& history, const Tensor& clock);

}  // namespace transllm
