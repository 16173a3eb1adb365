#include "transllm/st_encoder.hpp"

#include <stdexcept>

namespace transllm {

void EncoderConfig::validate() const {
  if (channels == 0 || channels % gat_heads != 0) {
    throw std::invalid_argument("encoder channels must be a positive multiple of gat_heads");
  }
  if (dilations.size() != n_blocks) {
    throw std::invalid_argument("encoder needs one dilation per block");
  }
  for (std::size_t d : dilations)
    if (d == 0) throw std::invalid_argument("dilations must be positive");
  if (kernel == 0 || n_blocks == 0 || history_len == 0 || horizon == 0) {
    throw std::invalid_argument("encoder config fields must be positive");
  }
}

BranchParams init_branch_params(ParamRegistry& reg, const std::string& prefix,
                                const EncoderConfig& cfg, std::size_t num_nodes,
                                std::size_t input_channels, Rng& rng) {
  cfg.validate();
  const std::size_t d = cfg.channels;
  const std::size_t dh = d / cfg.gat_heads;
  BranchParams bp;
  for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
    const std::size_t cin = b == 0 ? input_channels : d;
    const std::string base = prefix + ".block" + std::to_string(b);
    StBlockParams sp;
    sp.dilation = cfg.dilations[b];
    sp.input_residual = cin == d;
    sp.tcn_in_w = reg.create(base + ".tcn_in.w", {cfg.kernel, cin, d}, cfg.kernel * cin, rng);
    sp.tcn_in_b = reg.create_zeros(base + ".tcn_in.b", {d});
    for (std::size_t h = 0; h < cfg.gat_heads; ++h) {
      const std::string hb = base + ".gat.h" + std::to_string(h);
      ad::GatHeadParams gp;
      gp.w = reg.create(hb + ".w", {d, dh}, d, rng);
      gp.a_src = reg.create(hb + ".a_src", {dh}, dh, rng);
      gp.a_dst = reg.create(hb + ".a_dst", {dh}, dh, rng);
      sp.heads.push_back(gp);
    }
    sp.tcn_out_w = reg.create(base + ".tcn_out.w", {cfg.kernel, d, d}, cfg.kernel * d, rng);
    sp.tcn_out_b = reg.create_zeros(base + ".tcn_out.b", {d});
    bp.blocks.push_back(std::move(sp));
  }
  bp.node_meta = reg.create(prefix + ".node_meta", {num_nodes, d}, d, rng);
  bp.time_proj = reg.create(prefix + ".time_proj", {cfg.history_len, cfg.horizon}, cfg.history_len,
                            rng);
  return bp;
}

EncoderParams init_encoder_params(ParamRegistry& reg, const std::string& prefix,
                                  const EncoderConfig& cfg, std::size_t num_nodes,
                                  std::size_t input_channels, Rng& rng) {
  EncoderParams ep;
  ep.spatial = init_branch_params(reg, prefix + ".sp", cfg, num_nodes, input_channels, rng);
  ep.semantic = init_branch_params(reg, prefix + ".se", cfg, num_nodes, input_channels, rng);
  ep.input_channels = input_channels;
  ep.num_nodes = num_nodes;
  return ep;
}

ad::Var temporal_conv(const ad::Var& x, const ad::Var& w, const ad::Var& b, std::size_t dilation,
                      bool residual) {
  ad::Var out = ad::relu(ad::conv1d_causal(x, w, b, dilation));
  if (residual) {
    check_shape(x.value().same_shape(out.value()), "temporal_conv residual");
    out = ad::add(out, x);
  }
  return out;
}

ad::Var st_block(const ad::Var& x, const Tensor& adj, const ad::Var& node_meta,
                 const StBlockParams& p, const EncoderConfig& cfg) {
  const std::size_t d = cfg.channels;
  check_shape(node_meta.value().rank() == 2 && node_meta.value().dim(1) == d,
              "st_block node_meta width");
  ad::Var h = temporal_conv(x, p.tcn_in_w, p.tcn_in_b, p.dilation, p.input_residual);
  h = ad::add_slice_broadcast(h, node_meta);
  // Attention operates per time step; all temporal mixing lives in the convs.
  const std::size_t t = h.value().dim(0);
  std::vector<ad::Var> steps;
  steps.reserve(t);
  for (std::size_t ti = 0; ti < t; ++ti) {
    ad::Var slice = ad::reshape(ad::slice_rows(ad::reshape(h, {t, h.value().dim(1) * d}), ti, ti + 1),
                                {h.value().dim(1), d});
    steps.push_back(ad::graph_attention(slice, adj, p.heads, cfg.leaky_slope));
  }
  ad::Var stacked = ad::reshape(ad::concat_rows(steps), {t, h.value().dim(1), d});
  return temporal_conv(stacked, p.tcn_out_w, p.tcn_out_b, p.dilation, true);
}

namespace {

ad::Var run_branch(const ad::Var& x, const Tensor& adj, const BranchParams& bp,
                   const EncoderConfig& cfg) {
  ad::Var h = x;
  for (const StBlockParams& block : bp.blocks) {
    h = st_block(h, adj, bp.node_meta, block, cfg);
  }
  return ad::time_project(h, bp.time_proj);
}

}  // namespace

EncoderOutput encode(const ad::Var& x_with_clock, const AdjacencyPair& pair,
                     const EncoderParams& params, const EncoderConfig& cfg) {
  const Tensor& x = x_with_clock.value();
  check_shape(x.rank() == 3 && x.dim(0) == cfg.history_len, "encode input shape");
  if (x.dim(1) != pair.n) {
    throw std::invalid_argument("encode: adjacency size " + std::to_string(pair.n) +
                                " != node count " + std::to_string(x.dim(1)));
  }
  EncoderOutput out;
  out.h_spatial = run_branch(x_with_clock, pair.spatial, params.spatial, cfg);
  out.h_semantic = run_branch(x_with_clock, pair.semantic, params.semantic, cfg);
  out.fused = ad::concat_channels(out.h_spatial, out.h_semantic);
  return out;
}

Tensor assemble_encoder_input(const Tensor& history, const Tensor& clock) {
  check_shape(history.rank() == 3 && clock.rank() == 2 && history.dim(0) == clock.dim(0),
              "assemble_encoder_input");
  const std::size_t k = history.dim(0), n = history.dim(1), f = history.dim(2);
  const std::size_t fc = clock.dim(1);
  Tensor out({k, n, f + fc});
  for (std::size_t t = 0; t < k; ++t)
    for (std::size_t nn = 0; nn < n; ++nn) {
      for (std::size_t ff = 0; ff < f; ++ff) out(t, nn, ff) = history(t, nn, ff);
      for (std::size_t cc = 0; cc < fc; ++cc) out(t, nn, f + cc) = clock(t, cc);
    }
  return out;
}

}  // namespace transllm
