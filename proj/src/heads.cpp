#include "transllm/heads.hpp"

namespace transllm {

ForecastHeadParams init_forecast_head(ParamRegistry& reg, const std::string& prefix,
                                      std::size_t flat_in, std::size_t d_model, std::size_t hidden,
                                      std::size_t horizon, Rng& rng) {
  ForecastHeadParams p;
  p.w1 = reg.create(prefix + ".w1", {flat_in, hidden}, flat_in, rng);
  p.b1 = reg.create_zeros(prefix + ".b1", {hidden});
  p.w2 = reg.create(prefix + ".w2", {d_model, hidden}, d_model, rng);
  p.b2 = reg.create_zeros(prefix + ".b2", {hidden});
  p.w3 = reg.create(prefix + ".w3", {2 * hidden, horizon}, 2 * hidden, rng);
  p.b3 = reg.create_zeros(prefix + ".b3", {horizon});
  return p;
}

DispatchHeadParams init_dispatch_head(ParamRegistry& reg, const std::string& prefix,
                                      std::size_t d_model, Rng& rng) {
  DispatchHeadParams p;
  p.w = reg.create(prefix + ".w", {d_model, 9}, d_model, rng);
  p.b = reg.create_zeros(prefix + ".b", {9});
  return p;
}

ad::Var forecast_head(const ad::Var& h_f_node, const ad::Var& h_f_prime,
                      const ForecastHeadParams& p) {
  const std::size_t flat = h_f_node.value().size();
  check_shape(flat == p.w1.value().dim(0), "forecast_head encoder slice size");
  check_shape(h_f_prime.value().size() == p.w2.value().dim(0), "forecast_head LM state size");
  ad::Var a = ad::relu(
      ad::add_row_vector(ad::matmul(ad::reshape(h_f_node, {1, flat}), p.w1), p.b1));
  ad::Var b = ad::relu(ad::add_row_vector(
      ad::matmul(ad::reshape(h_f_prime, {1, h_f_prime.value().size()}), p.w2), p.b2));
  ad::Var y = ad::add_row_vector(ad::matmul(ad::concat_cols(a, b), p.w3), p.b3);
  return ad::reshape(y, {p.b3.value().size()});
}

ad::Var dispatch_head(const ad::Var& h_f_prime, const DispatchHeadParams& p) {
  check_shape(h_f_prime.value().size() == p.w.value().dim(0), "dispatch_head LM state size");
  ad::Var logits = ad::add_row_vector(
      ad::matmul(ad::reshape(h_f_prime, {1, h_f_prime.value().size()}), p.w), p.b);
  return ad::softmax(ad::reshape(logits, {9}));
}

}  // namespace transllm
