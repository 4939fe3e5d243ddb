// Differentiable tensor operations. Dense kernels go through Eigen maps over
// the tensors' row-major storage; backprop closures implement the exact
// adjoint of each forward kernel. Reductions always run in ascending index
// order so repeated runs are bitwise identical.
#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstring>

#include "hybridmed/core/graph.hpp"

namespace hybridmed::ag {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<EMat>;
using CMatMap = Eigen::Map<const EMat>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using CVecMap = Eigen::Map<const Eigen::VectorXd>;

inline MatMap mat(Tensor& t, int64_t rows, int64_t cols) { return MatMap(t.data(), rows, cols); }
inline CMatMap mat(const Tensor& t, int64_t rows, int64_t cols) {
  return CMatMap(t.data(), rows, cols);
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
  check(a->value.same_shape(b->value), "add: shape mismatch " + shape_str(a->value.shape()) +
                                           " vs " + shape_str(b->value.shape()));
  Tensor out = a->value;
  VecMap(out.data(), out.size()) += CVecMap(b->value.data(), b->value.size());
  return make_node(std::move(out), {a, b}, [a, b](Node* n) {
    return [a, b, n]() {
      if (a->requires_grad)
        VecMap(a->ensure_grad().data(), a->grad.size()) += CVecMap(n->grad.data(), n->grad.size());
      if (b->requires_grad)
        VecMap(b->ensure_grad().data(), b->grad.size()) += CVecMap(n->grad.data(), n->grad.size());
    };
  });
}

inline Var sub(const Var& a, const Var& b) {
  check(a->value.same_shape(b->value), "sub: shape mismatch");
  Tensor out = a->value;
  VecMap(out.data(), out.size()) -= CVecMap(b->value.data(), b->value.size());
  return make_node(std::move(out), {a, b}, [a, b](Node* n) {
    return [a, b, n]() {
      if (a->requires_grad)
        VecMap(a->ensure_grad().data(), a->grad.size()) += CVecMap(n->grad.data(), n->grad.size());
      if (b->requires_grad)
        VecMap(b->ensure_grad().data(), b->grad.size()) -= CVecMap(n->grad.data(), n->grad.size());
    };
  });
}

inline Var mul(const Var& a, const Var& b) {
  check(a->value.same_shape(b->value), "mul: shape mismatch");
  Tensor out = a->value;
  for (int64_t i = 0; i < out.size(); ++i) out[i] *= b->value[i];
  return make_node(std::move(out), {a, b}, [a, b](Node* n) {
    return [a, b, n]() {
      if (a->requires_grad) {
        auto& g = a->ensure_grad();
        for (int64_t i = 0; i < g.size(); ++i) g[i] += n->grad[i] * b->value[i];
      }
      if (b->requires_grad) {
        auto& g = b->ensure_grad();
        for (int64_t i = 0; i < g.size(); ++i) g[i] += n->grad[i] * a->value[i];
      }
    };
  });
}

inline Var scale(const Var& a, double c) {
  Tensor out = a->value;
  VecMap(out.data(), out.size()) *= c;
  return make_node(std::move(out), {a}, [a, c](Node* n) {
    return [a, c, n]() {
      VecMap(a->ensure_grad().data(), a->grad.size()) +=
          c * CVecMap(n->grad.data(), n->grad.size());
    };
  });
}

inline Var reshape(const Var& a, Shape shape) {
  Tensor out = a->value.reshaped(std::move(shape));
  return make_node(std::move(out), {a}, [a](Node* n) {
    return [a, n]() {
      VecMap(a->ensure_grad().data(), a->grad.size()) += CVecMap(n->grad.data(), n->grad.size());
    };
  });
}

inline Var relu(const Var& a) {
  Tensor out = a->value;
  for (auto& x : out.vec()) x = x > 0.0 ? x : 0.0;
  return make_node(std::move(out), {a}, [a](Node* n) {
    return [a, n]() {
      auto& g = a->ensure_grad();
      for (int64_t i = 0; i < g.size(); ++i)
        if (a->value[i] > 0.0) g[i] += n->grad[i];
    };
  });
}

inline Var gelu(const Var& a) {
  constexpr double kInvSqrt2 = 0.7071067811865475244;
  constexpr double kInvSqrt2Pi = 0.3989422804014326779;
  Tensor out = a->value;
  for (auto& x : out.vec()) x = x * 0.5 * (1.0 + std::erf(x * kInvSqrt2));
  return make_node(std::move(out), {a}, [a](Node* n) {
    return [a, n]() {
      auto& g = a->ensure_grad();
      for (int64_t i = 0; i < g.size(); ++i) {
        double x = a->value[i];
        double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
        g[i] += n->grad[i] * (cdf + x * pdf);
      }
    };
  });
}

inline Var exp_elem(const Var& a) {
  Tensor out = a->value;
  for (auto& x : out.vec()) x = std::exp(x);
  return make_node(std::move(out), {a}, [a](Node* n) {
    return [a, n]() {
      auto& g = a->ensure_grad();
      for (int64_t i = 0; i < g.size(); ++i) g[i] += n->grad[i] * n->value[i];
    };
  });
}

// ---------------------------------------------------------------------------
// matrix products
// ---------------------------------------------------------------------------

inline Var matmul(const Var& a, const Var& b) {
  check(a->value.ndim() == 2 && b->value.ndim() == 2 && a->value.dim(1) == b->value.dim(0),
        "matmul: incompatible " + shape_str(a->value.shape()) + " x " +
            shape_str(b->value.shape()));
  const int64_t m = a->value.dim(0), k = a->value.dim(1), p = b->value.dim(1);
  Tensor out({m, p});
  mat(out, m, p).noalias() = mat(a->value, m, k) * mat(b->value, k, p);
  return make_node(std::move(out), {a, b}, [a, b, m, k, p](Node* n) {
    return [a, b, n, m, k, p]() {
      if (a->requires_grad)
        mat(a->ensure_grad(), m, k).noalias() +=
            mat(n->grad, m, p) * mat(b->value, k, p).transpose();
      if (b->requires_grad)
        mat(b->ensure_grad(), k, p).noalias() +=
            mat(a->value, m, k).transpose() * mat(n->grad, m, p);
    };
  });
}

// y = x W + bias, applied to the trailing dimension of x.
inline Var linear(const Var& x, const Var& w, const Var& bias) {
  const Shape& xs = x->value.shape();
  check(!xs.empty() && w->value.ndim() == 2 && xs.back() == w->value.dim(0),
        "linear: input " + shape_str(xs) + " vs weight " + shape_str(w->value.shape()));
  const int64_t in = w->value.dim(0), out_dim = w->value.dim(1);
  const int64_t rows = x->value.size() / in;
  check(bias->value.size() == out_dim, "linear: bias size mismatch");
  Shape os = xs;
  os.back() = out_dim;
  Tensor out(os);
  mat(out, rows, out_dim).noalias() = mat(x->value, rows, in) * mat(w->value, in, out_dim);
  mat(out, rows, out_dim).rowwise() +=
      Eigen::Map<const Eigen::RowVectorXd>(bias->value.data(), out_dim);
  return make_node(std::move(out), {x, w, bias}, [x, w, bias, rows, in, out_dim](Node* n) {
    return [x, w, bias, n, rows, in, out_dim]() {
      if (x->requires_grad)
        mat(x->ensure_grad(), rows, in).noalias() +=
            mat(n->grad, rows, out_dim) * mat(w->value, in, out_dim).transpose();
      if (w->requires_grad)
        mat(w->ensure_grad(), in, out_dim).noalias() +=
            mat(x->value, rows, in).transpose() * mat(n->grad, rows, out_dim);
      if (bias->requires_grad)
        Eigen::Map<Eigen::RowVectorXd>(bias->ensure_grad().data(), out_dim) +=
            mat(n->grad, rows, out_dim).colwise().sum();
    };
  });
}

inline Var transpose2(const Var& a) {
  check(a->value.ndim() == 2, "transpose2: need 2-d tensor");
  const int64_t m = a->value.dim(0), p = a->value.dim(1);
  Tensor out({p, m});
  mat(out, p, m) = mat(a->value, m, p).transpose();
  return make_node(std::move(out), {a}, [a, m, p](Node* n) {
    return [a, n, m, p]() { mat(a->ensure_grad(), m, p) += mat(n->grad, p, m).transpose(); };
  });
}

// Batched products over leading dim. bmm: [B,m,k]x[B,k,p]; bmm_nt multiplies
// by the transpose of the second operand: [B,m,k]x[B,p,k] -> [B,m,p].
inline Var bmm(const Var& a, const Var& b, bool transpose_b = false) {
  check(a->value.ndim() == 3 && b->value.ndim() == 3 && a->value.dim(0) == b->value.dim(0),
        "bmm: incompatible batches");
  const int64_t B = a->value.dim(0), m = a->value.dim(1), k = a->value.dim(2);
  const int64_t p = transpose_b ? b->value.dim(1) : b->value.dim(2);
  check(transpose_b ? b->value.dim(2) == k : b->value.dim(1) == k, "bmm: inner dim mismatch");
  Tensor out({B, m, p});
  for (int64_t i = 0; i < B; ++i) {
    CMatMap ai(a->value.data() + i * m * k, m, k);
    MatMap oi(out.data() + i * m * p, m, p);
    if (transpose_b)
      oi.noalias() = ai * CMatMap(b->value.data() + i * p * k, p, k).transpose();
    else
      oi.noalias() = ai * CMatMap(b->value.data() + i * k * p, k, p);
  }
  return make_node(std::move(out), {a, b}, [a, b, B, m, k, p, transpose_b](Node* n) {
    return [a, b, n, B, m, k, p, transpose_b]() {
      for (int64_t i = 0; i < B; ++i) {
        CMatMap gi(n->grad.data() + i * m * p, m, p);
        if (a->requires_grad) {
          MatMap gai(a->ensure_grad().data() + i * m * k, m, k);
          if (transpose_b)
            gai.noalias() += gi * CMatMap(b->value.data() + i * p * k, p, k);
          else
            gai.noalias() += gi * CMatMap(b->value.data() + i * k * p, k, p).transpose();
        }
        if (b->requires_grad) {
          if (transpose_b) {
            MatMap gbi(b->ensure_grad().data() + i * p * k, p, k);
            gbi.noalias() += gi.transpose() * CMatMap(a->value.data() + i * m * k, m, k);
          } else {
            MatMap gbi(b->ensure_grad().data() + i * k * p, k, p);
            gbi.noalias() += CMatMap(a->value.data() + i * m * k, m, k).transpose() * gi;
          }
        }
      }
    };
  });
}

inline Var bmm_nt(const Var& a, const Var& b) { return bmm(a, b, true); }

// ---------------------------------------------------------------------------
// softmax family (row-stable)
// ---------------------------------------------------------------------------

inline Var softmax_rows(const Var& a) {
  const Shape& s = a->value.shape();
  const int64_t C = s.back(), R = a->value.size() / C;
  Tensor out = a->value;
  for (int64_t r = 0; r < R; ++r) {
    double* row = out.data() + r * C;
    double mx = row[0];
    for (int64_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
    double z = 0.0;
    for (int64_t c = 0; c < C; ++c) {
      row[c] = std::exp(row[c] - mx);
      z += row[c];
    }
    for (int64_t c = 0; c < C; ++c) row[c] /= z;
  }
  return make_node(std::move(out), {a}, [a, R, C](Node* n) {
    return [a, n, R, C]() {
      auto& g = a->ensure_grad();
      for (int64_t r = 0; r < R; ++r) {
        const double* p = n->value.data() + r * C;
        const double* go = n->grad.data() + r * C;
        double dot = 0.0;
        for (int64_t c = 0; c < C; ++c) dot += go[c] * p[c];
        double* gi = g.data() + r * C;
        for (int64_t c = 0; c < C; ++c) gi[c] += p[c] * (go[c] - dot);
      }
    };
  });
}

inline Var log_softmax_rows(const Var& a) {
  const Shape& s = a->value.shape();
  const int64_t C = s.back(), R = a->value.size() / C;
  Tensor out = a->value;
  for (int64_t r = 0; r < R; ++r) {
    double* row = out.data() + r * C;
    double mx = row[0];
    for (int64_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
    double z = 0.0;
    for (int64_t c = 0; c < C; ++c) z += std::exp(row[c] - mx);
    const double lz = mx + std::log(z);
    for (int64_t c = 0; c < C; ++c) row[c] -= lz;
  }
  return make_node(std::move(out), {a}, [a, R, C](Node* n) {
    return [a, n, R, C]() {
      auto& g = a->ensure_grad();
      for (int64_t r = 0; r < R; ++r) {
        const double* lp = n->value.data() + r * C;
        const double* go = n->grad.data() + r * C;
        double gsum = 0.0;
        for (int64_t c = 0; c < C; ++c) gsum += go[c];
        double* gi = g.data() + r * C;
        for (int64_t c = 0; c < C; ++c) gi[c] += go[c] - std::exp(lp[c]) * gsum;
      }
    };
  });
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
  const int64_t C = x->value.shape().back(), R = x->value.size() / C;
  check(gamma->value.size() == C && beta->value.size() == C, "layer_norm: affine size mismatch");
  Tensor out(x->value.shape());
  Tensor xhat({R, C});
  Tensor inv_sigma({R});
  for (int64_t r = 0; r < R; ++r) {
    const double* in = x->value.data() + r * C;
    double mu = 0.0;
    for (int64_t c = 0; c < C; ++c) mu += in[c];
    mu /= C;
    double var = 0.0;
    for (int64_t c = 0; c < C; ++c) var += (in[c] - mu) * (in[c] - mu);
    var /= C;
    const double is = 1.0 / std::sqrt(var + eps);
    inv_sigma[r] = is;
    double* xh = xhat.data() + r * C;
    double* o = out.data() + r * C;
    for (int64_t c = 0; c < C; ++c) {
      xh[c] = (in[c] - mu) * is;
      o[c] = xh[c] * gamma->value[c] + beta->value[c];
    }
  }
  return make_node(std::move(out), {x, gamma, beta},
                   [x, gamma, beta, R, C, xh = std::move(xhat),
                    is = std::move(inv_sigma)](Node* n) mutable {
    return [x, gamma, beta, n, R, C, xh = std::move(xh), is = std::move(is)]() {
      for (int64_t r = 0; r < R; ++r) {
        const double* go = n->grad.data() + r * C;
        const double* h = xh.data() + r * C;
        if (x->requires_grad) {
          double sum_g = 0.0, sum_gh = 0.0;
          for (int64_t c = 0; c < C; ++c) {
            sum_g += go[c] * gamma->value[c];
            sum_gh += go[c] * gamma->value[c] * h[c];
          }
          double* gi = x->ensure_grad().data() + r * C;
          for (int64_t c = 0; c < C; ++c) {
            const double dxhat = go[c] * gamma->value[c];
            gi[c] += is[r] * (dxhat - sum_g / C - h[c] * sum_gh / C);
          }
        }
        if (gamma->requires_grad) {
          auto& gg = gamma->ensure_grad();
          for (int64_t c = 0; c < C; ++c) gg[c] += go[c] * h[c];
        }
        if (beta->requires_grad) {
          auto& gb = beta->ensure_grad();
          for (int64_t c = 0; c < C; ++c) gb[c] += go[c];
        }
      }
    };
  });
}

inline Var group_norm(const Var& x, const Var& gamma, const Var& beta, int64_t groups,
                      double eps = 1e-5) {
  check(x->value.ndim() == 4, "group_norm: expect [B,C,H,W]");
  const int64_t B = x->value.dim(0), C = x->value.dim(1), HW = x->value.dim(2) * x->value.dim(3);
  check(C % groups == 0, "group_norm: channels not divisible by groups");
  check(gamma->value.size() == C && beta->value.size() == C, "group_norm: affine size mismatch");
  const int64_t cg = C / groups, m = cg * HW;
  Tensor out(x->value.shape());
  Tensor xhat(x->value.shape());
  Tensor inv_sigma({B, groups});
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t g = 0; g < groups; ++g) {
      const double* in = x->value.data() + (b * C + g * cg) * HW;
      double mu = 0.0;
      for (int64_t i = 0; i < m; ++i) mu += in[i];
      mu /= m;
      double var = 0.0;
      for (int64_t i = 0; i < m; ++i) var += (in[i] - mu) * (in[i] - mu);
      var /= m;
      const double is = 1.0 / std::sqrt(var + eps);
      inv_sigma[b * groups + g] = is;
      double* xh = xhat.data() + (b * C + g * cg) * HW;
      double* o = out.data() + (b * C + g * cg) * HW;
      for (int64_t i = 0; i < m; ++i) {
        xh[i] = (in[i] - mu) * is;
        const int64_t c = g * cg + i / HW;
        o[i] = xh[i] * gamma->value[c] + beta->value[c];
      }
    }
  }
  return make_node(std::move(out), {x, gamma, beta},
                   [=, xh = std::move(xhat), is = std::move(inv_sigma)](Node* n) mutable {
    return [=, xh = std::move(xh), is = std::move(is)]() {
      for (int64_t b = 0; b < B; ++b) {
        for (int64_t g = 0; g < groups; ++g) {
          const int64_t base = (b * C + g * cg) * HW;
          const double* go = n->grad.data() + base;
          const double* h = xh.data() + base;
          if (x->requires_grad) {
            double sum_g = 0.0, sum_gh = 0.0;
            for (int64_t i = 0; i < m; ++i) {
              const double dxh = go[i] * gamma->value[g * cg + i / HW];
              sum_g += dxh;
              sum_gh += dxh * h[i];
            }
            double* gi = x->ensure_grad().data() + base;
            const double isr = is[b * groups + g];
            for (int64_t i = 0; i < m; ++i) {
              const double dxh = go[i] * gamma->value[g * cg + i / HW];
              gi[i] += isr * (dxh - sum_g / m - h[i] * sum_gh / m);
            }
          }
          if (gamma->requires_grad) {
            auto& gg = gamma->ensure_grad();
            for (int64_t i = 0; i < m; ++i) gg[g * cg + i / HW] += go[i] * h[i];
          }
          if (beta->requires_grad) {
            auto& gb = beta->ensure_grad();
            for (int64_t i = 0; i < m; ++i) gb[g * cg + i / HW] += go[i];
          }
        }
      }
    };
  });
}

// Rows scaled to unit L2 norm; rows with norm below eps are scaled by 1/eps,
// which keeps all-zero padding rows at zero.
inline Var l2_normalize_rows(const Var& x, double eps = 1e-12) {
  const int64_t C = x->value.shape().back(), R = x->value.size() / C;
  Tensor out = x->value;
  Tensor inv_norm({R});
  for (int64_t r = 0; r < R; ++r) {
    double* row = out.data() + r * C;
    double sq = 0.0;
    for (int64_t c = 0; c < C; ++c) sq += row[c] * row[c];
    const double nrm = std::sqrt(sq);
    const double inv = 1.0 / std::max(nrm, eps);
    inv_norm[r] = inv;
    for (int64_t c = 0; c < C; ++c) row[c] *= inv;
  }
  return make_node(std::move(out), {x}, [x, R, C, inv = std::move(inv_norm)](Node* n) mutable {
    return [x, n, R, C, inv = std::move(inv)]() {
      auto& g = x->ensure_grad();
      for (int64_t r = 0; r < R; ++r) {
        const double* y = n->value.data() + r * C;
        const double* go = n->grad.data() + r * C;
        double dot = 0.0;
        for (int64_t c = 0; c < C; ++c) dot += go[c] * y[c];
        double* gi = g.data() + r * C;
        for (int64_t c = 0; c < C; ++c) gi[c] += inv[r] * (go[c] - y[c] * dot);
      }
    };
  });
}

// ---------------------------------------------------------------------------
// masks, gathers, reductions
// ---------------------------------------------------------------------------

// a[B,T,S] + m[T,S] broadcast over the leading dim (additive attention mask).
inline Var add_broadcast_mask(const Var& a, const Tensor& m) {
  check(a->value.ndim() == 3, "add_broadcast_mask: expect [B,T,S]");
  const int64_t B = a->value.dim(0), TS = a->value.dim(1) * a->value.dim(2);
  check(m.size() == TS, "add_broadcast_mask: mask shape mismatch");
  Tensor out = a->value;
  for (int64_t b = 0; b < B; ++b)
    for (int64_t i = 0; i < TS; ++i) out[b * TS + i] += m[i];
  return make_node(std::move(out), {a}, [a](Node* n) {
    return [a, n]() {
      VecMap(a->ensure_grad().data(), a->grad.size()) += CVecMap(n->grad.data(), n->grad.size());
    };
  });
}

// a[B*heads,T,S] + key mask m[B,S] broadcast over heads and query positions.
inline Var add_key_mask(const Var& a, const Tensor& m, int64_t heads) {
  check(a->value.ndim() == 3, "add_key_mask: expect [B*heads,T,S]");
  const int64_t BH = a->value.dim(0), T = a->value.dim(1), S = a->value.dim(2);
  const int64_t B = BH / heads;
  check(m.size() == B * S, "add_key_mask: mask shape mismatch");
  Tensor out = a->value;
  for (int64_t bh = 0; bh < BH; ++bh) {
    const double* mrow = m.data() + (bh / heads) * S;
    for (int64_t t = 0; t < T; ++t) {
      double* row = out.data() + (bh * T + t) * S;
      for (int64_t s = 0; s < S; ++s) row[s] += mrow[s];
    }
  }
  return make_node(std::move(out), {a}, [a](Node* n) {
    return [a, n]() {
      VecMap(a->ensure_grad().data(), a->grad.size()) += CVecMap(n->grad.data(), n->grad.size());
    };
  });
}

// Picks one row per batch element: x[B,T,H], idx[B] -> [B,H].
inline Var gather_rows_at(const Var& x, const std::vector<int64_t>& idx) {
  check(x->value.ndim() == 3, "gather_rows_at: expect [B,T,H]");
  const int64_t B = x->value.dim(0), T = x->value.dim(1), H = x->value.dim(2);
  check(static_cast<int64_t>(idx.size()) == B, "gather_rows_at: index count mismatch");
  Tensor out({B, H});
  for (int64_t b = 0; b < B; ++b) {
    check(idx[b] >= 0 && idx[b] < T, "gather_rows_at: index out of range");
    std::memcpy(out.data() + b * H, x->value.data() + (b * T + idx[b]) * H, H * sizeof(double));
  }
  return make_node(std::move(out), {x}, [x, idx, B, T, H](Node* n) {
    return [x, idx, n, B, T, H]() {
      auto& g = x->ensure_grad();
      for (int64_t b = 0; b < B; ++b) {
        double* dst = g.data() + (b * T + idx[b]) * H;
        const double* src = n->grad.data() + b * H;
        for (int64_t h = 0; h < H; ++h) dst[h] += src[h];
      }
    };
  });
}

inline Var embedding(const std::vector<int64_t>& ids, const Var& table, int64_t B, int64_t T) {
  const int64_t V = table->value.dim(0), H = table->value.dim(1);
  check(static_cast<int64_t>(ids.size()) == B * T, "embedding: id count mismatch");
  Tensor out({B, T, H});
  for (int64_t i = 0; i < B * T; ++i) {
    check(ids[i] >= 0 && ids[i] < V, "embedding: token id out of range");
    std::memcpy(out.data() + i * H, table->value.data() + ids[i] * H, H * sizeof(double));
  }
  return make_node(std::move(out), {table}, [table, ids, B, T, H](Node* n) {
    return [table, ids, n, B, T, H]() {
      auto& g = table->ensure_grad();
      for (int64_t i = 0; i < B * T; ++i) {
        double* dst = g.data() + ids[i] * H;
        const double* src = n->grad.data() + i * H;
        for (int64_t h = 0; h < H; ++h) dst[h] += src[h];
      }
    };
  });
}

inline Var sum_all(const Var& a) {
  double s = 0.0;
  for (int64_t i = 0; i < a->value.size(); ++i) s += a->value[i];
  return make_node(Tensor::scalar(s), {a}, [a](Node* n) {
    return [a, n]() {
      auto& g = a->ensure_grad();
      const double go = n->grad[0];
      for (int64_t i = 0; i < g.size(); ++i) g[i] += go;
    };
  });
}

inline Var mean_all(const Var& a) { return scale(sum_all(a), 1.0 / a->value.size()); }

// Mean over masked entries of -logp[r, target[r]]; the token-level negative
// log-likelihood used by both generation branches.
inline Var gather_nll(const Var& logp, const std::vector<int64_t>& targets,
                      const std::vector<bool>& mask) {
  const int64_t C = logp->value.shape().back(), R = logp->value.size() / C;
  check(static_cast<int64_t>(targets.size()) == R && static_cast<int64_t>(mask.size()) == R,
        "gather_nll: row count mismatch");
  int64_t m = 0;
  double s = 0.0;
  for (int64_t r = 0; r < R; ++r) {
    if (!mask[r]) continue;
    check(targets[r] >= 0 && targets[r] < C, "gather_nll: target out of range");
    s -= logp->value[r * C + targets[r]];
    ++m;
  }
  check(m > 0, "gather_nll: all positions masked out");
  const double inv_m = 1.0 / m;
  return make_node(Tensor::scalar(s * inv_m), {logp}, [logp, targets, mask, C, R, inv_m](Node* n) {
    return [logp, targets, mask, n, C, R, inv_m]() {
      auto& g = logp->ensure_grad();
      const double go = n->grad[0];
      for (int64_t r = 0; r < R; ++r)
        if (mask[r]) g[r * C + targets[r]] -= go * inv_m;
    };
  });
}

// Forward KL(teacher || student) per masked row, averaged over rows. The
// teacher is a plain tensor of log-probabilities, so it is a constant here
// and receives no gradient by construction.
inline Var kl_teacher_const(const Tensor& teacher_logp, const Var& student_logp,
                            const std::vector<bool>& row_mask) {
  check(teacher_logp.same_shape(student_logp->value), "kl: shape mismatch");
  const int64_t C = teacher_logp.shape().back(), R = teacher_logp.size() / C;
  check(static_cast<int64_t>(row_mask.size()) == R, "kl: mask size mismatch");
  int64_t m = 0;
  double s = 0.0;
  for (int64_t r = 0; r < R; ++r) {
    if (!row_mask[r]) continue;
    const double* tl = teacher_logp.data() + r * C;
    const double* sl = student_logp->value.data() + r * C;
    for (int64_t c = 0; c < C; ++c) s += std::exp(tl[c]) * (tl[c] - sl[c]);
    ++m;
  }
  check(m > 0, "kl: all rows masked out");
  const double inv_m = 1.0 / m;
  return make_node(Tensor::scalar(s * inv_m), {student_logp},
                   [student_logp, teacher_logp, row_mask, C, R, inv_m](Node* n) {
    return [student_logp, teacher_logp, row_mask, n, C, R, inv_m]() {
      auto& g = student_logp->ensure_grad();
      const double go = n->grad[0];
      for (int64_t r = 0; r < R; ++r) {
        if (!row_mask[r]) continue;
        const double* tl = teacher_logp.data() + r * C;
        double* gi = g.data() + r * C;
        for (int64_t c = 0; c < C; ++c) gi[c] -= go * inv_m * std::exp(tl[c]);
      }
    };
  });
}

// logits = a / tau with tau = exp(log_tau); differentiable in both operands.
inline Var div_by_temperature(const Var& a, const Var& log_tau) {
  check(log_tau->value.size() == 1, "div_by_temperature: log_tau must be scalar");
  const double inv_tau = std::exp(-log_tau->value[0]);
  Tensor out = a->value;
  VecMap(out.data(), out.size()) *= inv_tau;
  return make_node(std::move(out), {a, log_tau}, [a, log_tau, inv_tau](Node* n) {
    return [a, log_tau, inv_tau, n]() {
      if (a->requires_grad)
        VecMap(a->ensure_grad().data(), a->grad.size()) +=
            inv_tau * CVecMap(n->grad.data(), n->grad.size());
      if (log_tau->requires_grad) {
        double acc = 0.0;
        for (int64_t i = 0; i < n->grad.size(); ++i) acc += n->grad[i] * a->value[i];
        log_tau->ensure_grad()[0] -= acc * inv_tau;
      }
    };
  });
}

// Concatenation along dim 0.
inline Var concat0(const std::vector<Var>& parts) {
  check(!parts.empty(), "concat0: empty input");
  Shape s = parts[0]->value.shape();
  int64_t rows = 0;
  const int64_t inner = parts[0]->value.size() / s[0];
  for (const auto& p : parts) {
    check(p->value.size() / p->value.dim(0) == inner, "concat0: trailing dims mismatch");
    rows += p->value.dim(0);
  }
  s[0] = rows;
  Tensor out(s);
  int64_t off = 0;
  for (const auto& p : parts) {
    std::memcpy(out.data() + off, p->value.data(), p->value.size() * sizeof(double));
    off += p->value.size();
  }
  return make_node(std::move(out), parts, [parts](Node* n) {
    return [parts, n]() {
      int64_t off = 0;
      for (const auto& p : parts) {
        if (p->requires_grad) {
          auto& g = p->ensure_grad();
          VecMap(g.data(), g.size()) += CVecMap(n->grad.data() + off, g.size());
        }
        off += p->value.size();
      }
    };
  });
}

// [B,T,H] -> [B*heads,T,H/heads] and back; the permutes around per-head
// attention products.
inline Var split_heads(const Var& x, int64_t heads) {
  check(x->value.ndim() == 3, "split_heads: expect [B,T,H]");
  const int64_t B = x->value.dim(0), T = x->value.dim(1), H = x->value.dim(2);
  check(H % heads == 0, "split_heads: H not divisible by heads");
  const int64_t dh = H / heads;
  Tensor out({B * heads, T, dh});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t t = 0; t < T; ++t)
      for (int64_t h = 0; h < heads; ++h)
        std::memcpy(out.data() + ((b * heads + h) * T + t) * dh,
                    x->value.data() + (b * T + t) * H + h * dh, dh * sizeof(double));
  return make_node(std::move(out), {x}, [x, B, T, H, heads, dh](Node* n) {
    return [x, n, B, T, H, heads, dh]() {
      auto& g = x->ensure_grad();
      for (int64_t b = 0; b < B; ++b)
        for (int64_t t = 0; t < T; ++t)
          for (int64_t h = 0; h < heads; ++h) {
            double* dst = g.data() + (b * T + t) * H + h * dh;
            const double* src = n->grad.data() + ((b * heads + h) * T + t) * dh;
            for (int64_t d = 0; d < dh; ++d) dst[d] += src[d];
          }
    };
  });
}

inline Var merge_heads(const Var& x, int64_t heads) {
  check(x->value.ndim() == 3, "merge_heads: expect [B*heads,T,dh]");
  const int64_t BH = x->value.dim(0), T = x->value.dim(1), dh = x->value.dim(2);
  check(BH % heads == 0, "merge_heads: bad leading dim");
  const int64_t B = BH / heads, H = heads * dh;
  Tensor out({B, T, H});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t t = 0; t < T; ++t)
      for (int64_t h = 0; h < heads; ++h)
        std::memcpy(out.data() + (b * T + t) * H + h * dh,
                    x->value.data() + ((b * heads + h) * T + t) * dh, dh * sizeof(double));
  return make_node(std::move(out), {x}, [x, B, T, H, heads, dh](Node* n) {
    return [x, n, B, T, H, heads, dh]() {
      auto& g = x->ensure_grad();
      for (int64_t b = 0; b < B; ++b)
        for (int64_t t = 0; t < T; ++t)
          for (int64_t h = 0; h < heads; ++h) {
            double* dst = g.data() + ((b * heads + h) * T + t) * dh;
            const double* src = n->grad.data() + (b * T + t) * H + h * dh;
            for (int64_t d = 0; d < dh; ++d) dst[d] += src[d];
          }
    };
  });
}

// Token-wise maximum similarity matrix (the FILIP-style mutual max-sim).
// q[N,nq,D], k[N,nk,D] with boolean masks; out[i][j] = mean over unmasked
// query tokens of q_i of the max dot product against unmasked tokens of k_j.
inline Var token_sim_matrix(const Var& q, const Var& k, const std::vector<std::vector<bool>>& qmask,
                            const std::vector<std::vector<bool>>& kmask) {
  check(q->value.ndim() == 3 && k->value.ndim() == 3, "token_sim_matrix: expect [N,n,D]");
  const int64_t N = q->value.dim(0), nq = q->value.dim(1), D = q->value.dim(2);
  const int64_t Nk = k->value.dim(0), nk = k->value.dim(1);
  check(k->value.dim(2) == D && Nk == N, "token_sim_matrix: operand mismatch");
  std::vector<int64_t> qcount(N, 0);
  for (int64_t i = 0; i < N; ++i) {
    for (int64_t a = 0; a < nq; ++a) qcount[i] += qmask[i][a] ? 1 : 0;
    check(qcount[i] > 0, "token_sim_matrix: sample with no unmasked query tokens");
    int64_t kc = 0;
    for (int64_t b = 0; b < nk; ++b) kc += kmask[i][b] ? 1 : 0;
    check(kc > 0, "token_sim_matrix: sample with no unmasked key tokens");
  }
  Tensor out({N, N});
  // argmax of each (i,j,a) for the backward scatter
  std::vector<int32_t> amax(static_cast<size_t>(N) * N * nq, -1);
  for (int64_t i = 0; i < N; ++i) {
    for (int64_t j = 0; j < N; ++j) {
      double acc = 0.0;
      for (int64_t a = 0; a < nq; ++a) {
        if (!qmask[i][a]) continue;
        const double* qa = q->value.data() + (i * nq + a) * D;
        double best = -std::numeric_limits<double>::infinity();
        int32_t besti = -1;
        for (int64_t b = 0; b < nk; ++b) {
          if (!kmask[j][b]) continue;
          const double* kb = k->value.data() + (j * nk + b) * D;
          double dot = 0.0;
          for (int64_t d = 0; d < D; ++d) dot += qa[d] * kb[d];
          if (dot > best) {
            best = dot;
            besti = static_cast<int32_t>(b);
          }
        }
        amax[(i * N + j) * nq + a] = besti;
        acc += best;
      }
      out[i * N + j] = acc / qcount[i];
    }
  }
  return make_node(std::move(out), {q, k},
                   [q, k, qmask, N, nq, nk, D, qcount, am = std::move(amax)](Node* n) mutable {
    return [q, k, qmask, n, N, nq, nk, D, qcount, am = std::move(am)]() {
      for (int64_t i = 0; i < N; ++i) {
        for (int64_t j = 0; j < N; ++j) {
          const double gij = n->grad[i * N + j] / qcount[i];
          if (gij == 0.0) continue;
          for (int64_t a = 0; a < nq; ++a) {
            if (!qmask[i][a]) continue;
            const int32_t b = am[(i * N + j) * nq + a];
            const double* qa = q->value.data() + (i * nq + a) * D;
            const double* kb = k->value.data() + (j * nk + b) * D;
            if (q->requires_grad) {
              double* gq = q->ensure_grad().data() + (i * nq + a) * D;
              for (int64_t d = 0; d < D; ++d) gq[d] += gij * kb[d];
            }
            if (k->requires_grad) {
              double* gk = k->ensure_grad().data() + (j * nk + b) * D;
              for (int64_t d = 0; d < D; ++d) gk[d] += gij * qa[d];
            }
          }
        }
      }
    };
  });
}

}  // namespace hybridmed::ag
