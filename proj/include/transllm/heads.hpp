#pragma once

#include "transllm/autodiff.hpp"
#include "transllm/params.hpp"

namespace transllm {

struct ForecastHeadParams {
  ad::Var w1, b1;  // (T*2D) x h, h
  ad::Var w2, b2;  // d_L x h, h
  ad::Var w3, b3;  // 2h x T, T
};

struct DispatchHeadParams {
  ad::Var w;  // d_L x 9
  ad::Var b;  // 9
};

ForecastHeadParams init_forecast_head(ParamRegistry& reg, const std::string& prefix,
                                      std::size_t flat_in, std::size_t d_model, std::size_t hidden,
                                      std::size_t horizon, Rng& rng);

DispatchHeadParams init_dispatch_head(ParamRegistry& reg, const std::string& prefix,
                                      std::size_t d_model, Rng& rng);

/// Two ReLU branches (flattened encoder slice; LM state) concatenated into a
/// linear readout of the horizon. Output stays in normalized space.
ad::Var forecast_head(const ad::Var& h_f_node, const ad::Var& h_f_prime,
                      const ForecastHeadParams& p);

/// Softmax distribution over the 3x3 neighborhood, row-major, center at 4.
ad::Var dispatch_head(const ad::Var& h_f_prime, const DispatchHeadParams& p);

}  // namespace transllm
