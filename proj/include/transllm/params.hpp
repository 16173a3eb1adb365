#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "transllm/autodiff.hpp"
#include "transllm/rng.hpp"

namespace transllm {

/// Named trainable arrays. Creation order drives RNG consumption; iteration
/// (checkpointing, hashing) is name-sorted via std::map.
class ParamRegistry {
 public:
  /// New parameter initialized uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)).
  ad::Var create(const std::string& name, std::vector<std::size_t> shape, std::size_t fan_in,
                 Rng& rng);
  /// New zero-initialized parameter (biases).
  ad::Var create_zeros(const std::string& name, std::vector<std::size_t> shape);
  /// New constant-initialized parameter (layer-norm gains).
  ad::Var create_full(const std::string& name, std::vector<std::size_t> shape, double value);

  ad::Var at(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) > 0; }
  const std::map<std::string, ad::Var>& all() const { return params_; }

  /// All parameters whose name starts with `prefix` ("" = everything).
  std::vector<ad::Var> vars(const std::string& prefix = "") const;
  std::vector<std::string> names(const std::string& prefix = "") const;

  /// FNV-1a over names and raw value bytes; stable across runs on one machine.
  std::uint64_t value_hash(const std::string& prefix = "") const;

 private:
  ad::Var insert(const std::string& name, Tensor value);
  std::map<std::string, ad::Var> params_;
};

}  // namespace transllm
