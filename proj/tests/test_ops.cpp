#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "fd.hpp"
#include "narrowbert/ops.hpp"

using namespace narrowbert;
using testutil::numeric_grad;
using testutil::random_tensor;
using testutil::rel_error;
using T2 = Tensor<double>;

TEST_CASE("matmul examples and shape errors") {
  std::mt19937_64 rng(1);
  const T2 a = random_tensor({3, 4}, rng);
  T2 eye({4, 4});
  for (std::size_t i = 0; i < 4; ++i) eye.at(i, i) = 1.0;
  CHECK(ops::matmul(a, eye) == a);

  const T2 two({1, 1}, std::vector<double>{2.0});
  const T2 three({1, 1}, std::vector<double>{3.0});
  CHECK(ops::matmul(two, three)[0] == 6.0);
  T2 da({1, 1}), db({1, 1});
  ops::matmul_backward(two, three, T2({1, 1}, std::vector<double>{1.0}), &da, &db);
  CHECK(da[0] == 3.0);
  CHECK(db[0] == 2.0);

  CHECK_THROWS_AS(ops::matmul(T2({2, 3}), T2({2, 3})), ShapeError);
}

TEST_CASE("matmul gradients match finite differences") {
  std::mt19937_64 rng(2);
  T2 a = random_tensor({4, 5}, rng), b = random_tensor({5, 3}, rng);
  const T2 w = random_tensor({4, 3}, rng);
  T2 da({4, 5}), db({5, 3});
  ops::matmul_backward(a, b, w, &da, &db);
  auto loss = [&] { return testutil::dot(ops::matmul(a, b), w); };
  CHECK(rel_error(da.storage(), numeric_grad(a.storage(), loss)) < 1e-6);
  CHECK(rel_error(db.storage(), numeric_grad(b.storage(), loss)) < 1e-6);
}

TEST_CASE("linear gradients") {
  std::mt19937_64 rng(3);
  T2 x = random_tensor({3, 4}, rng);
  Parameter<double> w(random_tensor({4, 2}, rng)), b(random_tensor({2}, rng));
  const T2 dy = random_tensor({3, 2}, rng);
  T2 dx({3, 4});
  ops::linear_backward(x, w, b, dy, &dx);
  auto loss = [&] { return testutil::dot(ops::linear(x, w, b), dy); };
  CHECK(rel_error(dx.storage(), numeric_grad(x.storage(), loss)) < 1e-6);
  CHECK(rel_error(w.grad.storage(), numeric_grad(w.value.storage(), loss)) < 1e-6);
  CHECK(rel_error(b.grad.storage(), numeric_grad(b.value.storage(), loss)) < 1e-6);
}

TEST_CASE("softmax examples") {
  const T2 zeros({2, 5});
  const T2 y = ops::softmax_rows(zeros);
  for (double v : y.storage()) CHECK(v == doctest::Approx(0.2).epsilon(1e-15));

  const T2 x({1, 2}, std::vector<double>{0.7, 1e9});
  const std::vector<std::uint8_t> valid{1, 0};
  const T2 ym = ops::softmax_rows(x, valid);
  CHECK(ym[0] == 1.0);
  CHECK(ym[1] == 0.0);

  const std::vector<std::uint8_t> none{0, 0};
  CHECK_THROWS_AS(ops::softmax_rows(x, none), std::invalid_argument);
}

TEST_CASE("softmax rows sum to one and masked entries are exactly zero") {
  std::mt19937_64 rng(4);
  std::bernoulli_distribution keep(0.6);
  for (int trial = 0; trial < 50; ++trial) {
    const T2 x = random_tensor({6, 9}, rng, 5.0);
    std::vector<std::uint8_t> valid(54);
    for (std::size_t r = 0; r < 6; ++r) {
      for (std::size_t c = 0; c < 9; ++c) valid[r * 9 + c] = keep(rng) || c == r;
    }
    const T2 y = ops::softmax_rows(x, valid);
    for (std::size_t r = 0; r < 6; ++r) {
      double sum = 0.0;
      for (std::size_t c = 0; c < 9; ++c) {
        if (!valid[r * 9 + c]) CHECK(y.at(r, c) == 0.0);
        sum += y.at(r, c);
      }
      CHECK(std::abs(sum - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("softmax gradient") {
  std::mt19937_64 rng(5);
  T2 x = random_tensor({3, 6}, rng);
  const T2 w = random_tensor({3, 6}, rng);
  const T2 dx = ops::softmax_rows_backward(ops::softmax_rows(x), w);
  auto loss = [&] { return testutil::dot(ops::softmax_rows(x), w); };
  CHECK(rel_error(dx.storage(), numeric_grad(x.storage(), loss)) < 1e-6);
}

TEST_CASE("layer norm examples") {
  Parameter<double> g(T2({2}, 1.0)), b(T2({2}));
  const T2 y = ops::layer_norm(T2({1, 2}, std::vector<double>{1.0, 3.0}), g, b, 1e-12);
  CHECK(y[0] == doctest::Approx(-1.0).epsilon(1e-9));
  CHECK(y[1] == doctest::Approx(1.0).epsilon(1e-9));

  Parameter<double> g4(T2({4}, 1.0)), b4(T2({4}));
  const T2 c = ops::layer_norm(T2({1, 4}, 2.5), g4, b4, 1e-12);
  for (double v : c.storage()) CHECK(v == 0.0);
}

TEST_CASE("layer norm gradient") {
  std::mt19937_64 rng(6);
  T2 x = random_tensor({3, 5}, rng);
  Parameter<double> g(random_tensor({5}, rng)), b(random_tensor({5}, rng));
  const T2 w = random_tensor({3, 5}, rng);
  ops::LayerNormCache<double> cache;
  ops::layer_norm(x, g, b, 1e-12, &cache);
  const T2 dx = ops::layer_norm_backward(cache, g, b, w);
  auto loss = [&] { return testutil::dot(ops::layer_norm(x, g, b, 1e-12), w); };
  CHECK(rel_error(dx.storage(), numeric_grad(x.storage(), loss)) < 1e-4);
  CHECK(rel_error(g.grad.storage(), numeric_grad(g.value.storage(), loss)) < 1e-4);
  CHECK(rel_error(b.grad.storage(), numeric_grad(b.value.storage(), loss)) < 1e-4);
}

TEST_CASE("gelu value and gradient") {
  CHECK(ops::gelu(0.0) == 0.0);
  CHECK(ops::gelu(1.0) == doctest::Approx(0.8411919906082768).epsilon(1e-12));
  std::mt19937_64 rng(7);
  T2 x = random_tensor({4, 3}, rng, 2.0);
  const T2 w = random_tensor({4, 3}, rng);
  const T2 dx = ops::gelu_backward(x, w);
  auto loss = [&] { return testutil::dot(ops::gelu(x), w); };
  CHECK(rel_error(dx.storage(), numeric_grad(x.storage(), loss)) < 1e-4);
}

TEST_CASE("embedding lookup and scatter-add") {
  std::mt19937_64 rng(8);
  Parameter<double> table(random_tensor({6, 3}, rng));
  const std::vector<std::int32_t> ids{2, 5, 2};
  const T2 w = random_tensor({3, 3}, rng);
  const T2 y = ops::embedding_lookup(table, ids);
  for (std::size_t c = 0; c < 3; ++c) CHECK(y.at(0, c) == table.value.at(2, c));
  ops::embedding_backward(table, ids, w);
  auto loss = [&] { return testutil::dot(ops::embedding_lookup(table, ids), w); };
  CHECK(rel_error(table.grad.storage(), numeric_grad(table.value.storage(), loss)) < 1e-4);
  const std::vector<std::int32_t> bad{6};
  CHECK_THROWS_AS(ops::embedding_lookup(table, bad), std::out_of_range);
}

TEST_CASE("gather rows") {
  std::mt19937_64 rng(9);
  T2 x = random_tensor({5, 4}, rng);
  std::vector<std::size_t> all(5);
  std::iota(all.begin(), all.end(), 0);
  CHECK(ops::gather_rows(x, all) == x);

  const std::vector<std::size_t> idx{4, 1, 1};
  const T2 g = ops::gather_rows(x, idx);
  for (std::size_t j = 0; j < idx.size(); ++j) {
    for (std::size_t c = 0; c < 4; ++c) CHECK(g.at(j, c) == x.at(idx[j], c));
  }
  const T2 w = random_tensor({3, 4}, rng);
  T2 dx({5, 4});
  ops::gather_rows_backward(idx, w, dx);
  auto loss = [&] { return testutil::dot(ops::gather_rows(x, idx), w); };
  CHECK(rel_error(dx.storage(), numeric_grad(x.storage(), loss)) < 1e-4);
  for (std::size_t c = 0; c < 4; ++c) CHECK(dx.at(0, c) == 0.0);

  const std::vector<std::size_t> bad{5};
  CHECK_THROWS_AS(ops::gather_rows(x, bad), std::out_of_range);
}

TEST_CASE("cross entropy") {
  const std::size_t v = 11;
  const T2 uniform({3, v});
  const std::vector<std::int32_t> labels{0, 4, 10};
  CHECK(ops::cross_entropy_logits(uniform, labels) ==
        doctest::Approx(std::log(double(v))).epsilon(1e-14));

  std::mt19937_64 rng(10);
  T2 logits = random_tensor({3, v}, rng);
  const T2 d = ops::cross_entropy_backward(logits, labels, 1.0 / 3.0);
  auto loss = [&] { return ops::cross_entropy_logits(logits, labels); };
  CHECK(rel_error(d.storage(), numeric_grad(logits.storage(), loss)) < 1e-4);

  const std::vector<std::int32_t> bad{0, 4, 11};
  CHECK_THROWS_AS(ops::cross_entropy_logits(logits, bad), std::out_of_range);
}

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(T2({2, 0}), ShapeError);
  CHECK_THROWS_AS(T2({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  Parameter<double> p(T2({3, 2}, 1.0));
  CHECK(p.grad.shape() == p.value.shape());
  CHECK(p.grad == T2({3, 2}));
}
