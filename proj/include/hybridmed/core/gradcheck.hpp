// Central finite-difference verification of analytic gradients. The
// perturbation runs over raw leaf storage, so any differentiable scalar
// built from the leaves can be checked end to end.
#pragma once

#include <functional>

#include "hybridmed/core/graph.hpp"

namespace hybridmed {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst;  // "<leaf>[i]" of the worst element
  int64_t checked = 0;

  bool ok(double tol) const { return max_rel_err <= tol; }
};

// fn must rebuild the graph from the leaves' current values and return the
// scalar loss node. step is the central-difference half-width.
inline GradCheckResult grad_check(const std::function<ag::Var()>& fn,
                                  const std::vector<ag::Var>& leaves, double step = 1e-4) {
  for (auto& l : leaves) {
    l->requires_grad = true;
    l->grad = Tensor();
  }
  auto root = fn();
  ag::backward(root);

  GradCheckResult res;
  for (auto& l : leaves) {
    Tensor analytic = l->grad.size() == l->value.size() ? l->grad : Tensor(l->value.shape());
    for (int64_t i = 0; i < l->value.size(); ++i) {
      const double saved = l->value[i];
      double up, dn;
      {
        ag::NoGradGuard ng;
        l->value[i] = saved + step;
        up = fn()->value.item();
        l->value[i] = saved - step;
        dn = fn()->value.item();
        l->value[i] = saved;
      }
      const double numeric = (up - dn) / (2.0 * step);
      const double a = analytic[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      // Both effectively zero: agreement, not a relative-error case.
      const double err = (std::abs(a) < 1e-10 && std::abs(numeric) < 1e-7) ? 0.0 : rel;
      if (err > res.max_rel_err) {
        res.max_rel_err = err;
        res.worst = (l->name.empty() ? std::string("leaf") : l->name) + "[" + std::to_string(i) + "]";
      }
      ++res.checked;
    }
  }
  return res;
}

}  // namespace hybridmed
