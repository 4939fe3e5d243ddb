// Parameter registry: named leaf nodes in registration order. The order
// fixes initialization draws, optimizer iteration and checkpoint layout.
#pragma once

#include <cstring>
#include <map>

#include "hybridmed/core/graph.hpp"
#include "hybridmed/core/rng.hpp"

namespace hybridmed {

class ParamRegistry {
 public:
  ag::Var add(const std::string& name, Tensor init, bool requires_grad = true) {
    check(!index_.count(name), "parameter registered twice: " + name);
    auto v = ag::leaf(std::move(init), requires_grad, name);
    index_[name] = params_.size();
    params_.push_back(v);
    return v;
  }

  const std::vector<ag::Var>& all() const { return params_; }

  ag::Var find(const std::string& name) const {
    auto it = index_.find(name);
    check(it != index_.end(), "unknown parameter: " + name);
    return params_[it->second];
  }

  std::vector<ag::Var> with_prefix(const std::string& prefix) const {
    std::vector<ag::Var> out;
    for (const auto& p : params_)
      if (p->name.rfind(prefix, 0) == 0) out.push_back(p);
    return out;
  }

  void zero_grads() {
    for (auto& p : params_) p->zero_grad();
  }

  int64_t total_size() const {
    int64_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
  }

 private:
  std::vector<ag::Var> params_;
  std::map<std::string, size_t> index_;
};

// FNV-1a over the raw parameter bytes; used by the freeze/isolation checks.
inline uint64_t fnv1a(const void* data, size_t nbytes, uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < nbytes; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline uint64_t param_hash(const std::vector<ag::Var>& params) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : params) {
    h = fnv1a(p->name.data(), p->name.size(), h);
    h = fnv1a(p->value.data(), p->value.size() * sizeof(double), h);
  }
  return h;
}

namespace init {

inline Tensor normal(Rng& rng, Shape shape, double stddev) {
  Tensor t(std::move(shape));
  for (auto& x : t.vec()) x = rng.normal(0.0, stddev);
  return t;
}

// He initialization for conv/linear layers feeding a rectifier.
inline Tensor kaiming(Rng& rng, Shape shape, int64_t fan_in) {
  return normal(rng, std::move(shape), std::sqrt(2.0 / fan_in));
}

// Glorot uniform for projections.
inline Tensor xavier(Rng& rng, Shape shape, int64_t fan_in, int64_t fan_out) {
  Tensor t(std::move(shape));
  const double lim = std::sqrt(6.0 / (fan_in + fan_out));
  for (auto& x : t.vec()) x = rng.uniform(-lim, lim);
  return t;
}

inline Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
inline Tensor ones(Shape shape) { return Tensor::full(std::move(shape), 1.0); }

}  // namespace init
}  // namespace hybridmed
