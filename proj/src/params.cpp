#include "transllm/params.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace transllm {

ad::Var ParamRegistry::insert(const std::string& name, Tensor value) {
  if (params_.count(name)) throw std::logic_error("duplicate parameter: " + name);
  ad::Var v = ad::parameter(std::move(value));
  params_.emplace(name, v);
  return v;
}

ad::Var ParamRegistry::create(const std::string& name, std::vector<std::size_t> shape,
                              std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& x : t.vec()) x = rng.uniform(-bound, bound);
  return insert(name, std::move(t));
}

ad::Var ParamRegistry::create_zeros(const std::string& name, std::vector<std::size_t> shape) {
  return insert(name, Tensor(std::move(shape)));
}

ad::Var ParamRegistry::create_full(const std::string& name, std::vector<std::size_t> shape,
                                   double value) {
  return insert(name, Tensor::full(std::move(shape), value));
}

ad::Var ParamRegistry::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("no such parameter: " + name);
  return it->second;
}

std::vector<ad::Var> ParamRegistry::vars(const std::string& prefix) const {
  std::vector<ad::Var> out;
  for (const auto& [name, v] : params_) {
    if (name.rfind(prefix, 0) == 0) out.push_back(v);
  }
  return out;
}

std::vector<std::string> ParamRegistry::names(const std::string& prefix) const {
  std::vector<std::string> out;
  for (const auto& [name, v] : params_) {
    if (name.rfind(prefix, 0) == 0) out.push_back(name);
  }
  return out;
}

std::uint64_t ParamRegistry::value_hash(const std::string& prefix) const {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* data, std::size_t len) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= p[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& [name, v] : params_) {
    if (name.rfind(prefix, 0) != 0) continue;
    mix(name.data(), name.size());
    mix(v.value().data(), v.value().size() * sizeof(double));
  }
  return h;
}

}  // namespace transllm
