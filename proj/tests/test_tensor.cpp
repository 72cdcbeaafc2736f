#include <doctest.h>

#include <cmath>
#include <vector>

#include "core/rng.hpp"
#include "core/tensor.hpp"

using namespace trompt;

namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0,
                             double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>(std::move(shape), std::move(v));
}

// Independent oracle: three nested loops straight from the definition.
std::vector<double> naive_bmm(const std::vector<double>& a,
                              const std::vector<double>& b, std::size_t B,
                              std::size_t m, std::size_t k, std::size_t n) {
  std::vector<double> c(B * m * n, 0.0);
  for (std::size_t bb = 0; bb < B; ++bb)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t t = 0; t < k; ++t)
          acc += a[(bb * m + i) * k + t] * b[(bb * k + t) * n + j];
        c[(bb * m + i) * n + j] = acc;
      }
  return c;
}

// Reduce any tensor to a scalar through summation; keeps composite
// expressions differentiable end to end.
template <typename T>
Tensor<T> sum_all(Tensor<T> t) {
  while (t.rank() > 0) t = reduce_sum_axis(t, 0);
  return t;
}

}  // namespace

TEST_CASE("batched_matmul examples") {
  Tensor<double> eye({1, 2, 2}, {1, 0, 0, 1});
  Tensor<double> b({1, 2, 2}, {5, 6, 7, 8});
  CHECK(batched_matmul(eye, b).values() == std::vector<double>{5, 6, 7, 8});

  Tensor<double> a({1, 2, 2}, {1, 2, 3, 4});
  CHECK(batched_matmul(a, b).values() == std::vector<double>{19, 22, 43, 50});

  Tensor<double> a2({2, 2, 2}, {1, 2, 3, 4, 0, 0, 0, 0});
  Tensor<double> b2({2, 2, 2}, {5, 6, 7, 8, 5, 6, 7, 8});
  auto out = batched_matmul(a2, b2);
  for (std::size_t i = 4; i < 8; ++i) CHECK(out.at(i) == 0.0);

  CHECK_THROWS_WITH_AS(batched_matmul(a, Tensor<double>({1, 3, 2})),
                       doctest::Contains("[1,2,2]"), Error);
}

TEST_CASE("batched_matmul agrees with triple-loop oracle on small shapes") {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    std::size_t B = 1 + rng.index(5), m = 1 + rng.index(5), k = 1 + rng.index(5),
                n = 1 + rng.index(5);
    auto a = random_tensor({B, m, k}, rng, -2, 2);
    auto b = random_tensor({B, k, n}, rng, -2, 2);
    auto got = batched_matmul(a, b);
    auto want = naive_bmm(a.values(), b.values(), B, m, k, n);
    for (std::size_t i = 0; i < want.size(); ++i)
      CHECK(std::abs(got.at(i) - want[i]) < 1e-12);
  }
}

TEST_CASE("batched_transpose examples") {
  Tensor<double> a({1, 2, 2}, {1, 2, 3, 4});
  CHECK(batched_transpose(a).values() == std::vector<double>{1, 3, 2, 4});

  Tensor<double> sym({1, 2, 2}, {1, 5, 5, 2});
  CHECK(batched_transpose(sym).values() == sym.values());

  Rng rng(3);
  auto r = random_tensor({2, 3, 4}, rng);
  CHECK(batched_transpose(batched_transpose(r)).values() == r.values());

  CHECK_THROWS_AS(batched_transpose(Tensor<double>({2, 2})), Error);
}

TEST_CASE("softmax examples and invariants") {
  Tensor<double> z({3}, {0, 0, 0});
  auto s = softmax_last_axis(z);
  for (std::size_t i = 0; i < 3; ++i) CHECK(s.at(i) == doctest::Approx(1.0 / 3));

  Tensor<double> two({2}, {0, std::log(2.0)});
  auto s2 = softmax_last_axis(two);
  CHECK(s2.at(0) == doctest::Approx(1.0 / 3).epsilon(1e-12));
  CHECK(s2.at(1) == doctest::Approx(2.0 / 3).epsilon(1e-12));

  Rng rng(11);
  for (int trial = 0; trial < 30; ++trial) {
    auto x = random_tensor({2, 3, 4}, rng, -50, 50);
    auto y = softmax_last_axis(x);
    // shift invariance
    std::vector<double> shifted(x.values());
    double c = rng.uniform(-10, 10);
    for (auto& v : shifted) v += c;
    auto y2 = softmax_last_axis(Tensor<double>(x.shape(), shifted));
    for (std::size_t i = 0; i < y.size(); ++i)
      CHECK(y.at(i) == doctest::Approx(y2.at(i)).epsilon(1e-12));
    // rows sum to one
    for (std::size_t sl = 0; sl < 6; ++sl) {
      double total = 0;
      for (std::size_t j = 0; j < 4; ++j) total += y.at(sl * 4 + j);
      CHECK(std::abs(total - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("pointwise examples") {
  Tensor<double> x({3}, {-1, 0, 2});
  CHECK(relu(x).values() == std::vector<double>{0, 0, 2});

  auto ones = Tensor<double>::full({2, 2, 2}, 1.0);
  Tensor<double> w({2, 2, 1}, {3, 5, 3, 5});
  auto scaled = mul_broadcast(ones, w);
  CHECK(scaled.values() == std::vector<double>{3, 3, 5, 5, 3, 3, 5, 5});

  Rng rng(5);
  auto r = random_tensor({4}, rng);
  CHECK(add(r, Tensor<double>({4})).values() == r.values());

  CHECK_THROWS_AS(add(r, Tensor<double>({5})), Error);
  CHECK_THROWS_AS(mul_broadcast(r, Tensor<double>({2, 1})), Error);
}

TEST_CASE("shape op examples") {
  Tensor<double> v({2}, {1, 2});
  auto st = stack_batch(v, 3);
  CHECK(st.shape() == Shape{3, 2});
  CHECK(st.values() == std::vector<double>{1, 2, 1, 2, 1, 2});

  Tensor<double> w({1}, {3});
  CHECK(concat_last_axis(v, w).values() == std::vector<double>{1, 2, 3});

  Tensor<double> m({2, 2}, {1, 2, 3, 4});
  CHECK(reduce_sum_axis(m, 0).values() == std::vector<double>{4, 6});
  CHECK(reduce_sum_axis(m, 1).values() == std::vector<double>{3, 7});

  CHECK_THROWS_AS(reshape(m, Shape{3}), Error);
  CHECK_THROWS_AS(reduce_sum_axis(m, 2), Error);

  auto r4 = Tensor<double>({1, 2, 3, 2},
                           {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11});
  auto sw = swap_middle_axes(r4);
  CHECK(sw.shape() == Shape{1, 3, 2, 2});
  CHECK(sw.values() == std::vector<double>{0, 1, 6, 7, 2, 3, 8, 9, 4, 5, 10, 11});
}

TEST_CASE("gather_rows forward and scatter backward") {
  Graph<double> g;
  Tensor<double> table({3, 2}, {1, 2, 3, 4, 5, 6});
  auto t = g.leaf(table, true);
  auto picked = gather_rows(t, {2, 0, 2});
  CHECK(picked.values() == std::vector<double>{5, 6, 1, 2, 5, 6});

  auto loss = sum_all(picked);
  auto grads = g.backward(loss);
  const auto& dt = grads.at(t.node());
  // row 2 hit twice, row 0 once, row 1 untouched
  CHECK(dt.values() == std::vector<double>{1, 1, 0, 0, 2, 2});

  CHECK_THROWS_AS(gather_rows(t, {3}), Error);
}

TEST_CASE("backward basics") {
  SUBCASE("sum of softmax is constant") {
    Graph<double> g;
    Rng rng(2);
    auto x = g.leaf(random_tensor({5}, rng, -3, 3), true);
    auto loss = sum_all(softmax_last_axis(x));
    auto grads = g.backward(loss);
    for (std::size_t i = 0; i < 5; ++i)
      CHECK(std::abs(grads.at(x.node()).at(i)) < 1e-12);
  }

  SUBCASE("elementwise product gradient is the other factor") {
    Graph<double> g;
    Rng rng(4);
    auto aval = random_tensor({6}, rng);
    auto bval = random_tensor({6}, rng);
    auto a = g.leaf(aval, true);
    auto b = g.leaf(bval, true);
    auto loss = sum_all(mul_broadcast(a, b));
    auto grads = g.backward(loss);
    for (std::size_t i = 0; i < 6; ++i) {
      CHECK(grads.at(a.node()).at(i) == doctest::Approx(bval.at(i)));
      CHECK(grads.at(b.node()).at(i) == doctest::Approx(aval.at(i)));
    }
  }

  SUBCASE("unused parameters get zero gradients") {
    Graph<double> g;
    auto used = g.leaf(Tensor<double>({2}, {1, 2}), true);
    auto unused = g.leaf(Tensor<double>({3}, {1, 2, 3}), true);
    auto loss = sum_all(used);
    auto grads = g.backward(loss);
    CHECK(grads.at(unused.node()).values() == std::vector<double>{0, 0, 0});
  }

  SUBCASE("non-scalar loss is rejected") {
    Graph<double> g;
    auto x = g.leaf(Tensor<double>({2}, {1, 2}), true);
    CHECK_THROWS_AS(g.backward(x), Error);
  }
}

TEST_CASE("gradient_check on closed-form cases") {
  Rng rng(13);

  SUBCASE("quadratic") {
    auto f = [](Graph<double>& g, const Tensor<double>& x) {
      (void)g;
      return scale(sum_all(mul_broadcast(x, x)), 0.5);
    };
    auto x = random_tensor({7}, rng, -2, 2);
    CHECK(gradient_check<double>(f, x) < 1e-8);
  }

  SUBCASE("relu away from the kink") {
    auto f = [](Graph<double>& g, const Tensor<double>& x) {
      (void)g;
      return sum_all(relu(x));
    };
    std::vector<double> v(6);
    for (auto& y : v) {
      y = rng.uniform(0.5, 2.0);
      if (rng.bernoulli(0.5)) y = -y;
    }
    CHECK(gradient_check<double>(f, Tensor<double>({6}, v)) < 1e-6);
  }
}

TEST_CASE("composed expressions match finite differences over many seeds") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed * 7919 + 1);
    std::size_t B = 1 + rng.index(3), m = 1 + rng.index(3), k = 1 + rng.index(3),
                n = 1 + rng.index(3);
    auto yv = random_tensor({B, k, n}, rng);
    auto zv = random_tensor({B, m, n}, rng);
    auto wv = random_tensor({B, m, 1}, rng, 0.2, 1.0);
    auto uv = random_tensor({n}, rng);

    auto f = [&](Graph<double>& g, const Tensor<double>& x) {
      auto y = g.leaf(yv, false);
      auto z = g.leaf(zv, false);
      auto w = g.leaf(wv, false);
      auto u = g.leaf(uv, false);
      auto t1 = batched_matmul(x, y);           // [B,m,n]
      auto t2 = add(t1, z);
      auto t3 = softmax_last_axis(t2);
      auto t4 = mul_broadcast(t3, w);
      auto t5 = relu(add(t4, stack_batch(stack_batch(u, m), B)));
      auto t6 = concat_last_axis(t5, t2);       // [B,m,2n]
      auto t7 = batched_transpose(t6);          // [B,2n,m]
      auto t8 = reshape(t7, Shape{B * 2 * n * m});
      return scale(sum_all(mul_broadcast(t8, t8)), 0.25);
    };

    auto x = random_tensor({B, m, k}, rng);
    double err = gradient_check<double>(f, x);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("cross entropy closed form and gradient") {
  // uniform logits over T classes -> ln T
  for (std::size_t classes : {2u, 3u, 7u}) {
    Tensor<double> logits({2, classes}, std::vector<double>(2 * classes, 0.4));
    auto l = cross_entropy_with_logits(logits, {0, classes - 1});
    CHECK(l.item() == doctest::Approx(std::log(double(classes))).epsilon(1e-12));
  }

  Rng rng(17);
  std::vector<std::size_t> labels{1, 0, 2, 2};
  auto f = [&](Graph<double>& g, const Tensor<double>& x) {
    (void)g;
    return cross_entropy_with_logits(x, labels);
  };
  CHECK(gradient_check<double>(f, random_tensor({4, 3}, rng, -2, 2)) < 1e-6);

  CHECK_THROWS_AS(
      cross_entropy_with_logits(Tensor<double>({1, 2}, {0, 0}), {2}),
      Error);
}

TEST_CASE("forward evaluation is deterministic") {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    auto a = random_tensor({2, 3, 4}, rng);
    auto b = random_tensor({2, 4, 2}, rng);
    return softmax_last_axis(batched_matmul(a, b)).values();
  };
  CHECK(run(99) == run(99));
}

TEST_CASE("non-finite forward values raise immediately") {
  Tensor<double> big({2}, {1e308, 1e308});
  CHECK_THROWS_AS(add(big, big), Error);
}
