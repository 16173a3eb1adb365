#include "transllm/losses_metrics.hpp"

#include <cmath>
#include <stdexcept>

namespace transllm {

DistanceCosts DistanceCosts::standard() {
  DistanceCosts c;
  const double diag = 3.0 * std::sqrt(2.0);
  c.km = Tensor::from_vector({diag, 3.0, diag, 3.0, 0.0, 3.0, diag, 3.0, diag});
  return c;
}

double mae_value(const std::vector<double>& yhat, const std::vector<double>& y) {
  if (yhat.size() != y.size() || y.empty()) {
    throw std::invalid_argument("mae: length mismatch or empty input");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += std::fabs(yhat[i] - y[i]);
  return s / static_cast<double>(y.size());
}

std::pair<double, double> metric_mae_rmse(const std::vector<double>& yhat,
                                          const std::vector<double>& y) {
  if (yhat.size() != y.size() || y.empty()) {
    throw std::invalid_argument("metric_mae_rmse: length mismatch or empty input");
  }
  double sa = 0.0, sq = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double d = yhat[i] - y[i];
    sa += std::fabs(d);
    sq += d * d;
  }
  const double n = static_cast<double>(y.size());
  return {sa / n, std::sqrt(sq / n)};
}

namespace {

void check_simplex(const std::vector<double>& p, const char* who) {
  double total = 0.0;
  for (double v : p) {
    if (v < 0.0) throw std::invalid_argument(std::string(who) + ": negative probability entry");
    total += v;
  }
  if (std::fabs(total - 1.0) > 1e-6) {
    throw std::invalid_argument(std::string(who) + ": probabilities sum to " + std::to_string(total));
  }
}

}  // namespace

double entropy_value(const std::vector<double>& pi) {
  check_simplex(pi, "entropy");
  double h = 0.0;
  for (double p : pi) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

double wasserstein_1d(const std::vector<double>& p, const std::vector<double>& q) {
  if (p.size() != q.size() || p.empty()) {
    throw std::invalid_argument("wasserstein_1d: length mismatch or empty input");
  }
  check_simplex(p, "wasserstein_1d");
  check_simplex(q, "wasserstein_1d");
  double acc = 0.0, total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    acc += p[i] - q[i];
    total += std::fabs(acc);
  }
  return total;
}

std::vector<double> reward_grid(const std::vector<double>& matching_rates,
                                const DistanceCosts& costs, const RewardParams& rp) {
  if (matching_rates.size() != costs.km.size()) {
    throw std::invalid_argument("reward_grid: rate/cost length mismatch");
  }
  std::vector<double> r(matching_rates.size());
  for (std::size_t g = 0; g < r.size(); ++g) {
    r[g] = rp.beta * matching_rates[g] - rp.gamma * costs.km[g];
  }
  return r;
}

ad::Var mae_loss(const ad::Var& yhat, const Tensor& y) {
  check_shape(yhat.value().size() == y.size(), "mae_loss length");
  Tensor negy = y;
  for (double& v : negy.vec()) v = -v;
  return ad::mean_all(ad::abs(ad::add_const(yhat, negy)));
}

ad::Var entropy_term(const ad::Var& pi) {
  return ad::neg(ad::sum_all(ad::mul(pi, ad::log(pi))));
}

ad::Var wasserstein_term(const ad::Var& pi, const Tensor& p_real) {
  check_shape(pi.value().size() == p_real.size(), "wasserstein_term length");
  Tensor negp = p_real;
  for (double& v : negp.vec()) v = -v;
  return ad::sum_all(ad::abs(ad::cumsum(ad::add_const(pi, negp))));
}

ad::Var composite_loss(const std::optional<ad::Var>& l_llm, const ad::Var& l_task,
                       const LossWeights& w) {
  ad::Var task = ad::scale(l_task, w.lambda_t);
  return l_llm ? ad::add(*l_llm, task) : task;
}

}  // namespace transllm
