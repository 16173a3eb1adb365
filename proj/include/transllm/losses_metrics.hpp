#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "transllm/autodiff.hpp"
#include "transllm/tensor.hpp"

namespace transllm {

struct LossWeights {
  double lambda_t = 1.0;
  double lambda_w = 0.01;
  double lambda_e = 0.008;
};

struct RewardParams {
  double beta = 2.0;
  double gamma = 0.05;
};

/// Deadhead distances for the 3x3 neighborhood, row-major with the center at
/// index 4: 0 km at center, 3 km orthogonal, 3*sqrt(2) km diagonal.
struct DistanceCosts {
  Tensor km;  // 9-vector
  static DistanceCosts standard();
};

// ---- scalar / plain paths ----------------------------------------------------

double mae_value(const std::vector<double>& yhat, const std::vector<double>& y);
std::pair<double, double> metric_mae_rmse(const std::vector<double>& yhat,
                                          const std::vector<double>& y);

/// Shannon entropy of a 9-simplex (0*log 0 := 0). Rejects negative entries
/// and vectors whose mass deviates from 1 by more than 1e-6.
double entropy_value(const std::vector<double>& pi);

/// Sum of absolute CDF differences under the fixed row-major cell order.
double wasserstein_1d(const std::vector<double>& p, const std::vector<double>& q);

/// R_g = beta * m_g - gamma * D_g for per-vehicle matching rates m.
std::vector<double> reward_grid(const std::vector<double>& matching_rates,
                                const DistanceCosts& costs, const RewardParams& rp);

// ---- differentiable paths ------------------------------------------------------

ad::Var mae_loss(const ad::Var& yhat, const Tensor& y);
ad::Var entropy_term(const ad::Var& pi);
ad::Var wasserstein_term(const ad::Var& pi, const Tensor& p_real);

/// L = L_LLM + lambda_t * L_task (Eq. 8 shape); lm loss may be absent.
ad::Var composite_loss(const std::optional<ad::Var>& l_llm, const ad::Var& l_task,
                       const LossWeights& w);

}  // namespace transllm
