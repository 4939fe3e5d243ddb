// Finite-difference checks for every differentiable kernel, plus shape and
// determinism sanity. These run on tiny tensors with seeded values.
#include <catch2/catch_amalgamated.hpp>

#include "hybridmed/core/conv.hpp"
#include "hybridmed/core/gradcheck.hpp"
#include "hybridmed/core/ops.hpp"
#include "hybridmed/core/params.hpp"

using namespace hybridmed;
using ag::Var;

namespace {

Tensor randt(Rng& rng, Shape s, double scale = 1.0) {
  Tensor t(std::move(s));
  for (auto& x : t.vec()) x = rng.normal(0.0, scale);
  return t;
}

double fd_tol = 1e-5;

}  // namespace

TEST_CASE("elementwise and matmul gradients match finite differences") {
  Rng rng(11);
  auto a = ag::leaf(randt(rng, {3, 4}), true);
  auto b = ag::leaf(randt(rng, {3, 4}), true);
  auto w = ag::leaf(randt(rng, {4, 5}), true);
  auto bias = ag::leaf(randt(rng, {5}), true);

  auto res = grad_check(
      [&] {
        auto h = ag::mul(ag::add(a, b), ag::sub(a, ag::scale(b, 0.7)));
        auto y = ag::linear(ag::gelu(h), w, bias);
        return ag::mean_all(ag::mul(y, y));
      },
      {a, b, w, bias});
  INFO(res.worst);
  CHECK(res.max_rel_err < fd_tol);
}

TEST_CASE("softmax, log_softmax, layer_norm gradients") {
  Rng rng(12);
  auto x = ag::leaf(randt(rng, {4, 6}), true);
  auto gamma = ag::leaf(randt(rng, {6}, 0.3), true);
  auto beta = ag::leaf(randt(rng, {6}, 0.3), true);
  auto probe = ag::constant(randt(rng, {4, 6}));

  auto res = grad_check(
      [&] {
        auto ln = ag::layer_norm(x, gamma, beta);
        auto s = ag::softmax_rows(ln);
        auto l = ag::log_softmax_rows(ag::add(ln, s));
        return ag::sum_all(ag::mul(l, probe));
      },
      {x, gamma, beta});
  INFO(res.worst);
  CHECK(res.max_rel_err < fd_tol);
}

TEST_CASE("group_norm and l2 normalization gradients") {
  Rng rng(13);
  auto x = ag::leaf(randt(rng, {2, 4, 3, 3}), true);
  auto gamma = ag::leaf(randt(rng, {4}, 0.3), true);
  auto beta = ag::leaf(randt(rng, {4}, 0.3), true);
  auto probe = ag::constant(randt(rng, {2, 4, 3, 3}));
  auto res = grad_check(
      [&] {
        auto gn = ag::group_norm(x, gamma, beta, 2);
        return ag::sum_all(ag::mul(gn, probe));
      },
      {x, gamma, beta});
  INFO(res.worst);
  CHECK(res.max_rel_err < fd_tol);

  auto y = ag::leaf(randt(rng, {3, 5}), true);
  auto probe2 = ag::constant(randt(rng, {3, 5}));
  auto res2 = grad_check([&] { return ag::sum_all(ag::mul(ag::l2_normalize_rows(y), probe2)); },
                         {y});
  CHECK(res2.max_rel_err < fd_tol);
}

TEST_CASE("l2_normalize_rows produces unit rows") {
  Rng rng(14);
  auto y = ag::l2_normalize_rows(ag::constant(randt(rng, {7, 9})));
  for (int64_t r = 0; r < 7; ++r) {
    double sq = 0;
    for (int64_t c = 0; c < 9; ++c) sq += y->value[r * 9 + c] * y->value[r * 9 + c];
    CHECK(std::abs(std::sqrt(sq) - 1.0) < 1e-9);
  }
}

TEST_CASE("bmm, transpose, heads, masks, gathers") {
  Rng rng(15);
  auto a = ag::leaf(randt(rng, {2, 3, 4}), true);
  auto b = ag::leaf(randt(rng, {2, 4, 3}), true);
  auto c = ag::leaf(randt(rng, {2, 3, 4}), true);
  Tensor mask({3, 3});
  mask.fill(0.0);
  mask[1] = -1e30;  // (0,1) masked
  auto probe = ag::constant(randt(rng, {2, 3, 3}));

  auto res = grad_check(
      [&] {
        auto s = ag::bmm(a, b);                     // [2,3,3]
        auto t = ag::bmm_nt(a, c);                  // [2,3,3]
        auto mixed = ag::add_broadcast_mask(ag::add(s, t), mask);
        auto p = ag::softmax_rows(mixed);
        return ag::sum_all(ag::mul(p, probe));
      },
      {a, b, c});
  INFO(res.worst);
  CHECK(res.max_rel_err < fd_tol);

  auto x = ag::leaf(randt(rng, {2, 3, 8}), true);
  auto probe2 = ag::constant(randt(rng, {2, 3, 8}));
  auto res2 = grad_check(
      [&] {
        auto h = ag::merge_heads(ag::split_heads(x, 2), 2);
        return ag::sum_all(ag::mul(h, probe2));
      },
      {x});
  CHECK(res2.max_rel_err < 1e-12);  // exact permutation round-trip

  auto probe3 = ag::constant(randt(rng, {2, 8}));
  auto res3 = grad_check(
      [&] { return ag::sum_all(ag::mul(ag::gather_rows_at(x, {1, 2}), probe3)); }, {x});
  CHECK(res3.max_rel_err < fd_tol);
}

TEST_CASE("embedding scatters gradients to the right rows") {
  Rng rng(16);
  auto table = ag::leaf(randt(rng, {5, 3}), true);
  std::vector<int64_t> ids = {0, 2, 2, 4};
  auto probe = ag::constant(randt(rng, {1, 4, 3}));
  auto res = grad_check(
      [&] { return ag::sum_all(ag::mul(ag::embedding(ids, table, 1, 4), probe)); }, {table});
  CHECK(res.max_rel_err < fd_tol);
  // row 1 and 3 unused -> zero grad
  ag::backward([&] {
    table->grad = Tensor();
    auto out = ag::sum_all(ag::mul(ag::embedding(ids, table, 1, 4), probe));
    return out;
  }());
  for (int64_t c = 0; c < 3; ++c) {
    CHECK(table->grad[1 * 3 + c] == 0.0);
    CHECK(table->grad[3 * 3 + c] == 0.0);
  }
}

TEST_CASE("conv2d matches finite differences incl. stride and padding") {
  Rng rng(17);
  auto x = ag::leaf(randt(rng, {2, 3, 5, 5}), true);
  auto w = ag::leaf(randt(rng, {4, 3, 3, 3}, 0.4), true);
  auto b = ag::leaf(randt(rng, {4}, 0.2), true);
  auto probe = ag::constant(randt(rng, {2, 4, 3, 3}));
  auto res = grad_check(
      [&] { return ag::sum_all(ag::mul(ag::conv2d(x, w, b, 2, 1), probe)); }, {x, w, b});
  INFO(res.worst);
  CHECK(res.max_rel_err < fd_tol);
}

TEST_CASE("pooling and upsampling gradients") {
  Rng rng(18);
  auto x = ag::leaf(randt(rng, {2, 3, 4, 4}), true);
  auto probe = ag::constant(randt(rng, {2, 3, 2, 2}));
  auto res = grad_check(
      [&] { return ag::sum_all(ag::mul(ag::maxpool2d(x, 3, 2, 1), probe)); }, {x});
  CHECK(res.max_rel_err < fd_tol);

  auto probe_g = ag::constant(randt(rng, {2, 3}));
  auto res_g = grad_check(
      [&] { return ag::sum_all(ag::mul(ag::global_avg_pool(x), probe_g)); }, {x});
  CHECK(res_g.max_rel_err < fd_tol);

  auto probe_u = ag::constant(randt(rng, {2, 3, 8, 8}));
  auto res_u = grad_check(
      [&] { return ag::sum_all(ag::mul(ag::upsample_nearest2(x), probe_u)); }, {x});
  CHECK(res_u.max_rel_err < fd_tol);

  auto probe_t = ag::constant(randt(rng, {2, 16, 3}));
  auto res_t = grad_check(
      [&] { return ag::sum_all(ag::mul(ag::spatial_to_tokens(x), probe_t)); }, {x});
  CHECK(res_t.max_rel_err < fd_tol);
}

TEST_CASE("token_sim_matrix gradient and mask exclusion") {
  Rng rng(19);
  auto q = ag::leaf(randt(rng, {2, 3, 4}), true);
  auto k = ag::leaf(randt(rng, {2, 5, 4}), true);
  std::vector<std::vector<bool>> qm = {{true, true, false}, {true, true, true}};
  std::vector<std::vector<bool>> km = {{true, true, true, false, false},
                                       {true, false, true, true, false}};
  auto probe = ag::constant(randt(rng, {2, 2}));
  auto res = grad_check(
      [&] { return ag::sum_all(ag::mul(ag::token_sim_matrix(q, k, qm, km), probe)); }, {q, k});
  INFO(res.worst);
  CHECK(res.max_rel_err < fd_tol);

  // masked key slots do not affect the values
  auto base = ag::token_sim_matrix(q, k, qm, km);
  for (int64_t b = 3; b < 5; ++b)
    for (int64_t d = 0; d < 4; ++d) k->value[(0 * 5 + b) * 4 + d] = 99.0;
  auto poked = ag::token_sim_matrix(q, k, qm, km);
  for (int64_t i = 0; i < 4; ++i) CHECK(base->value[i] == poked->value[i]);
}

TEST_CASE("kl_teacher_const, gather_nll, temperature scaling") {
  Rng rng(20);
  auto sl = ag::leaf(randt(rng, {3, 4}), true);
  auto tl_raw = randt(rng, {3, 4});
  // teacher log-probs from a softmax over random logits
  auto tl_var = ag::log_softmax_rows(ag::constant(tl_raw));
  Tensor tl = tl_var->value;
  std::vector<bool> mask = {true, false, true};

  auto res = grad_check(
      [&] { return ag::kl_teacher_const(tl, ag::log_softmax_rows(sl), mask); }, {sl});
  CHECK(res.max_rel_err < fd_tol);

  std::vector<int64_t> tgt = {1, 0, 3};
  auto res_nll = grad_check(
      [&] { return ag::gather_nll(ag::log_softmax_rows(sl), tgt, mask); }, {sl});
  CHECK(res_nll.max_rel_err < fd_tol);

  auto logits = ag::leaf(randt(rng, {2, 2}), true);
  auto log_tau = ag::leaf(Tensor::scalar(std::log(0.07)), true);
  auto probe = ag::constant(randt(rng, {2, 2}));
  auto res_t = grad_check(
      [&] { return ag::sum_all(ag::mul(ag::div_by_temperature(logits, log_tau), probe)); },
      {logits, log_tau});
  CHECK(res_t.max_rel_err < fd_tol);
}

TEST_CASE("backward accumulates through shared subexpressions") {
  // f(x) = sum(x*x + x*x) -> df/dx = 4x
  auto x = ag::leaf(Tensor({2}, {1.5, -2.0}), true);
  auto sq = ag::mul(x, x);
  auto y = ag::sum_all(ag::add(sq, sq));
  ag::backward(y);
  CHECK(x->grad[0] == Catch::Approx(6.0).epsilon(1e-12));
  CHECK(x->grad[1] == Catch::Approx(-8.0).epsilon(1e-12));
}

TEST_CASE("no-grad mode builds detached nodes") {
  auto x = ag::leaf(Tensor({2}, {1.0, 2.0}), true);
  ag::Var y;
  {
    ag::NoGradGuard ng;
    y = ag::scale(x, 3.0);
  }
  CHECK_FALSE(y->requires_grad);
  CHECK(y->parents.empty());
  auto z = ag::stop_gradient(x);
  CHECK_FALSE(z->requires_grad);
}
