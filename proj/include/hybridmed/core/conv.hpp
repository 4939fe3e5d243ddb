// Spatial ops for the image path: im2col-backed conv2d, max pooling, nearest
// upsampling, global average pooling. Batch loops are parallelized where the
// writes are disjoint; gradient accumulation into shared weights stays in
// ascending batch order for reproducibility.
#pragma once

#include "hybridmed/core/ops.hpp"

namespace hybridmed::ag {

namespace detail {

inline void im2col(const double* img, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
                   int64_t stride, int64_t pad, int64_t OH, int64_t OW, double* cols) {
  // cols layout: [C*kh*kw, OH*OW], row-major
  const int64_t P = OH * OW;
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t ky = 0; ky < kh; ++ky) {
      for (int64_t kx = 0; kx < kw; ++kx) {
        double* dst = cols + ((c * kh + ky) * kw + kx) * P;
        for (int64_t oy = 0; oy < OH; ++oy) {
          const int64_t iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= H) {
            std::fill(dst + oy * OW, dst + (oy + 1) * OW, 0.0);
            continue;
          }
          const double* src = img + (c * H + iy) * W;
          for (int64_t ox = 0; ox < OW; ++ox) {
            const int64_t ix = ox * stride + kx - pad;
            dst[oy * OW + ox] = (ix < 0 || ix >= W) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

inline void col2im_add(const double* cols, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
                       int64_t stride, int64_t pad, int64_t OH, int64_t OW, double* img) {
  const int64_t P = OH * OW;
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t ky = 0; ky < kh; ++ky) {
      for (int64_t kx = 0; kx < kw; ++kx) {
        const double* src = cols + ((c * kh + ky) * kw + kx) * P;
        for (int64_t oy = 0; oy < OH; ++oy) {
          const int64_t iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= H) continue;
          double* dst = img + (c * H + iy) * W;
          for (int64_t ox = 0; ox < OW; ++ox) {
            const int64_t ix = ox * stride + kx - pad;
            if (ix >= 0 && ix < W) dst[ix] += src[oy * OW + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// x[B,C,H,W], w[O,C,kh,kw], bias[O] -> [B,O,OH,OW]
inline Var conv2d(const Var& x, const Var& w, const Var& bias, int64_t stride, int64_t pad) {
  check(x->value.ndim() == 4 && w->value.ndim() == 4, "conv2d: expect 4-d input and weight");
  const int64_t B = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  const int64_t O = w->value.dim(0), kh = w->value.dim(2), kw = w->value.dim(3);
  check(w->value.dim(1) == C,
        "conv2d: channel mismatch, input " + shape_str(x->value.shape()) + " vs weight " +
            shape_str(w->value.shape()));
  check(bias->value.size() == O, "conv2d: bias size mismatch");
  const int64_t OH = (H + 2 * pad - kh) / stride + 1;
  const int64_t OW = (W + 2 * pad - kw) / stride + 1;
  check(OH >= 1 && OW >= 1, "conv2d: output would be empty");
  const int64_t K = C * kh * kw, P = OH * OW;

  auto cols = std::make_shared<Tensor>(Shape{B, K, P});
  Tensor out({B, O, OH, OW});
#pragma omp parallel for schedule(static)
  for (int64_t b = 0; b < B; ++b) {
    double* cb = cols->data() + b * K * P;
    detail::im2col(x->value.data() + b * C * H * W, C, H, W, kh, kw, stride, pad, OH, OW, cb);
    MatMap ob(out.data() + b * O * P, O, P);
    ob.noalias() = CMatMap(w->value.data(), O, K) * CMatMap(cb, K, P);
    ob.colwise() += CVecMap(bias->value.data(), O);
  }

  return make_node(std::move(out), {x, w, bias},
                   [x, w, bias, cols, B, C, H, W, O, kh, kw, stride, pad, OH, OW, K, P](Node* n) {
    return [x, w, bias, cols, n, B, C, H, W, O, kh, kw, stride, pad, OH, OW, K, P]() {
      if (w->requires_grad) {
        MatMap gw(w->ensure_grad().data(), O, K);
        for (int64_t b = 0; b < B; ++b)
          gw.noalias() += CMatMap(n->grad.data() + b * O * P, O, P) *
                          CMatMap(cols->data() + b * K * P, K, P).transpose();
      }
      if (bias->requires_grad) {
        VecMap gb(bias->ensure_grad().data(), O);
        for (int64_t b = 0; b < B; ++b)
          gb += CMatMap(n->grad.data() + b * O * P, O, P).rowwise().sum();
      }
      if (x->requires_grad) {
        auto& gx = x->ensure_grad();
#pragma omp parallel for schedule(static)
        for (int64_t b = 0; b < B; ++b) {
          Tensor dcols({K, P});
          mat(dcols, K, P).noalias() =
              CMatMap(w->value.data(), O, K).transpose() * CMatMap(n->grad.data() + b * O * P, O, P);
          detail::col2im_add(dcols.data(), C, H, W, kh, kw, stride, pad, OH, OW,
                             gx.data() + b * C * H * W);
        }
      }
    };
  });
}

inline Var maxpool2d(const Var& x, int64_t k, int64_t stride, int64_t pad) {
  check(x->value.ndim() == 4, "maxpool2d: expect [B,C,H,W]");
  const int64_t B = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  const int64_t OH = (H + 2 * pad - k) / stride + 1, OW = (W + 2 * pad - k) / stride + 1;
  Tensor out({B, C, OH, OW});
  std::vector<int32_t> argmax(static_cast<size_t>(B) * C * OH * OW);
  for (int64_t bc = 0; bc < B * C; ++bc) {
    const double* in = x->value.data() + bc * H * W;
    double* o = out.data() + bc * OH * OW;
    int32_t* am = argmax.data() + bc * OH * OW;
    for (int64_t oy = 0; oy < OH; ++oy) {
      for (int64_t ox = 0; ox < OW; ++ox) {
        double best = -std::numeric_limits<double>::infinity();
        int32_t bi = -1;
        for (int64_t ky = 0; ky < k; ++ky) {
          const int64_t iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= H) continue;
          for (int64_t kx = 0; kx < k; ++kx) {
            const int64_t ix = ox * stride + kx - pad;
            if (ix < 0 || ix >= W) continue;
            const double v = in[iy * W + ix];
            if (v > best) {
              best = v;
              bi = static_cast<int32_t>(iy * W + ix);
            }
          }
        }
        o[oy * OW + ox] = best;
        am[oy * OW + ox] = bi;
      }
    }
  }
  return make_node(std::move(out), {x}, [x, B, C, H, W, OH, OW, am = std::move(argmax)](Node* n) mutable {
    return [x, n, B, C, H, W, OH, OW, am = std::move(am)]() {
      auto& g = x->ensure_grad();
      for (int64_t bc = 0; bc < B * C; ++bc) {
        double* gi = g.data() + bc * H * W;
        const double* go = n->grad.data() + bc * OH * OW;
        const int32_t* a = am.data() + bc * OH * OW;
        for (int64_t p = 0; p < OH * OW; ++p) gi[a[p]] += go[p];
      }
    };
  });
}

inline Var global_avg_pool(const Var& x) {
  check(x->value.ndim() == 4, "global_avg_pool: expect [B,C,H,W]");
  const int64_t B = x->value.dim(0), C = x->value.dim(1), HW = x->value.dim(2) * x->value.dim(3);
  Tensor out({B, C});
  for (int64_t bc = 0; bc < B * C; ++bc) {
    const double* in = x->value.data() + bc * HW;
    double s = 0.0;
    for (int64_t i = 0; i < HW; ++i) s += in[i];
    out[bc] = s / HW;
  }
  return make_node(std::move(out), {x}, [x, B, C, HW](Node* n) {
    return [x, n, B, C, HW]() {
      auto& g = x->ensure_grad();
      for (int64_t bc = 0; bc < B * C; ++bc) {
        const double go = n->grad[bc] / HW;
        double* gi = g.data() + bc * HW;
        for (int64_t i = 0; i < HW; ++i) gi[i] += go;
      }
    };
  });
}

inline Var upsample_nearest2(const Var& x) {
  check(x->value.ndim() == 4, "upsample_nearest2: expect [B,C,H,W]");
  const int64_t B = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  Tensor out({B, C, 2 * H, 2 * W});
  for (int64_t bc = 0; bc < B * C; ++bc) {
    const double* in = x->value.data() + bc * H * W;
    double* o = out.data() + bc * 4 * H * W;
    for (int64_t y = 0; y < 2 * H; ++y)
      for (int64_t xx = 0; xx < 2 * W; ++xx) o[y * 2 * W + xx] = in[(y / 2) * W + xx / 2];
  }
  return make_node(std::move(out), {x}, [x, B, C, H, W](Node* n) {
    return [x, n, B, C, H, W]() {
      auto& g = x->ensure_grad();
      for (int64_t bc = 0; bc < B * C; ++bc) {
        double* gi = g.data() + bc * H * W;
        const double* go = n->grad.data() + bc * 4 * H * W;
        for (int64_t y = 0; y < 2 * H; ++y)
          for (int64_t xx = 0; xx < 2 * W; ++xx) gi[(y / 2) * W + xx / 2] += go[y * 2 * W + xx];
      }
    };
  });
}

// [B,C,H,W] -> [B,H*W,C] token grid (one token per spatial cell).
inline Var spatial_to_tokens(const Var& x) {
  check(x->value.ndim() == 4, "spatial_to_tokens: expect [B,C,H,W]");
  const int64_t B = x->value.dim(0), C = x->value.dim(1), HW = x->value.dim(2) * x->value.dim(3);
  Tensor out({B, HW, C});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t p = 0; p < HW; ++p)
        out[(b * HW + p) * C + c] = x->value[(b * C + c) * HW + p];
  return make_node(std::move(out), {x}, [x, B, C, HW](Node* n) {
    return [x, n, B, C, HW]() {
      auto& g = x->ensure_grad();
      for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c)
          for (int64_t p = 0; p < HW; ++p)
            g[(b * C + c) * HW + p] += n->grad[(b * HW + p) * C + c];
    };
  });
}

}  // namespace hybridmed::ag
