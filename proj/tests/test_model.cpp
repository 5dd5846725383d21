#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <numeric>
#include <random>

#include "narrowbert/kernels.hpp"
#include "narrowbert/model.hpp"
#include "narrowbert/reference.hpp"
#include "narrowbert/verify.hpp"

using namespace narrowbert;

namespace {

const ModelDims kDims{32, 4, 64, 40, 16, 1e-12};

Batch word_batch(std::size_t b, std::size_t l, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return verify::random_batch(rng, b, l, kDims.vocab, 0.2);
}

template <typename T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(T)) == 0;
}

struct SingleThread {
  int saved = kernels::threads();
  SingleThread() { kernels::set_threads(1); }
  ~SingleThread() { kernels::set_threads(saved); }
};

}  // namespace

TEST_CASE("embed") {
  Encoder<double> model(kDims, parse_layout("{2,sf}"), 1);
  std::vector<std::int32_t> doc(14, 7);
  const Batch twin = build_classify_batch({doc, doc}, 16);
  const auto s = model.embed(twin, nullptr);
  CHECK(s.full_hidden.shape() == std::vector<std::size_t>{2, 16, 32});
  CHECK(std::memcmp(s.full_hidden.row(3), s.full_hidden.row(16 + 3), 32 * sizeof(double)) == 0);
  // Same token at positions 1 and 2 differs through the position table.
  CHECK(std::memcmp(s.full_hidden.row(1), s.full_hidden.row(2), 32 * sizeof(double)) != 0);

  const Batch long_batch = build_classify_batch({std::vector<std::int32_t>(30, 7)}, 32);
  CHECK_THROWS_AS(model.embed(long_batch, nullptr), std::out_of_range);
  Batch bad = twin;
  bad.ids[1] = static_cast<std::int32_t>(kDims.vocab);
  CHECK_THROWS_AS(model.embed(bad, nullptr), std::out_of_range);
}

TEST_CASE("narrow gathers rows and rejects bad positions") {
  Encoder<double> model(kDims, parse_layout("{2,sf}"), 1);
  const Batch b1 = build_classify_batch({std::vector<std::int32_t>(6, 9)}, 8);
  const auto wide = model.embed(b1, nullptr);
  const auto n = Encoder<double>::narrow(wide, {1, 5}, 2);
  CHECK(n.phase == Phase::Narrowed);
  CHECK(n.active_hidden.shape() == std::vector<std::size_t>{1, 2, 32});
  CHECK(std::memcmp(n.active_hidden.row(0), wide.full_hidden.row(1), 32 * sizeof(double)) == 0);
  CHECK(std::memcmp(n.active_hidden.row(1), wide.full_hidden.row(5), 32 * sizeof(double)) == 0);
  CHECK(bit_equal(*n.kv_source, wide.full_hidden));

  std::vector<std::size_t> all(8);
  std::iota(all.begin(), all.end(), 0);
  const auto everything = Encoder<double>::narrow(wide, all, 8);
  CHECK(everything.active_hidden.storage() == wide.full_hidden.storage());

  CHECK_THROWS_AS(Encoder<double>::narrow(wide, {}, 0), std::invalid_argument);
  CHECK_THROWS_AS(Encoder<double>::narrow(wide, {2, 2}, 2), std::invalid_argument);
  CHECK_THROWS_AS(Encoder<double>::narrow(wide, {5, 1}, 2), std::invalid_argument);
  CHECK_THROWS_AS(Encoder<double>::narrow(wide, {1, 8}, 2), std::out_of_range);
  CHECK_THROWS_AS(Encoder<double>::narrow(n, {0}, 1), std::logic_error);
}

TEST_CASE("encode output shapes") {
  const Batch b = word_batch(2, 16, 3);
  const std::size_t m = b.masked_per_row;
  Encoder<float> plain(kDims, parse_layout("{2,sf}"), 1);
  CHECK(plain.encode(b, Mode::Pretrain).output.rows() == 2 * m);
  Encoder<float> sq(kDims, parse_layout("sf:{2,sf}"), 1);
  CHECK(sq.encode(b, Mode::Pretrain).output.rows() == 2 * m);
  Encoder<float> cls(kDims, parse_layout("{2,sf}:{2,sf}"), 1, 0.02, 3);
  const auto pass = cls.encode(b, Mode::Classify);
  CHECK(pass.output.rows() == 2);
  CHECK(cls.classify_logits(pass.output).shape() == std::vector<std::size_t>{2, 3});
  CHECK_THROWS_AS(Encoder<float>(kDims, Layout{expand_notation(":sf"), ":sf"}, 1),
                  std::invalid_argument);
}

TEST_CASE("context-first output equals the un-narrowed run gathered at the end") {
  SingleThread guard;
  Encoder<double> model(kDims, parse_layout("sfss:ff"), 4);
  model.perturb(5, 0.3);
  const Batch b = word_batch(3, 16, 6);
  const auto out = model.encode(b, Mode::Pretrain, false).output;
  CHECK(bit_equal(out, reference_encode(model, b, Mode::Pretrain, false)));
}

TEST_CASE("wide model equals its reference on every position") {
  SingleThread guard;
  Encoder<double> model(kDims, parse_layout("{3,sf}"), 4);
  model.perturb(6, 0.3);
  const Batch b = word_batch(2, 12, 7);
  const auto all = reference_encode_all(model, b);
  CHECK(all.rows() == 24);
  CHECK(bit_equal(model.encode(b, Mode::Pretrain, false).output,
                  reference_encode(model, b, Mode::Pretrain)));
}

TEST_CASE("equivalence oracles") {
  verify::EquivOptions opts;
  opts.trials = 25;
  opts.seed = 1234;
  for (const auto& r : verify::run_equivalence_suite(opts)) {
    INFO(r.name << ": " << r.detail);
    CHECK(r.passed);
    CHECK(r.trials == 25);
  }
}

TEST_CASE("gradients of a deep sparse-queries stack and classify mode") {
  verify::GradCheckOptions opts;
  const auto good = verify::gradcheck_mlm("sf:ssf", opts);
  CHECK(good.passed());
  CHECK(good.worst() < 1e-6);
  const auto cls = verify::gradcheck_classify("sf:sf", 3, opts);
  CHECK(cls.passed());
}

TEST_CASE("mlm loss at uniform and peaked logits") {
  Encoder<double> model(kDims, parse_layout("sf:sf"), 1);
  const Batch b = word_batch(2, 16, 9);
  model.embeddings.token.value.fill(0.0);
  CHECK(model.mlm_loss(b) == doctest::Approx(std::log(double(kDims.vocab))).epsilon(1e-12));

  Tensor<double> peaked({1, kDims.vocab}, -50.0);
  peaked.at(0, 7) = 50.0;
  const std::vector<std::int32_t> label{7};
  CHECK(mlm_loss(peaked, label) < 1e-30);
}

TEST_CASE("classifier with zero weights gives uniform probabilities") {
  Encoder<double> model(kDims, parse_layout("{2,sf}:{2,sf}"), 1, 0.02, 2);
  model.classifier->weight.value.fill(0.0);
  const Batch b = word_batch(3, 16, 10);
  const auto logits = model.classify_logits(model.encode(b, Mode::Classify).output);
  for (double v : logits.storage()) CHECK(v == 0.0);
  const std::vector<std::int32_t> labels{0, 1, 1};
  CHECK(model.classify_loss(b, labels) == doctest::Approx(std::log(2.0)).epsilon(1e-14));
}

TEST_CASE("32-bit forward is independent of the thread count") {
  Encoder<float> model(ModelDims{64, 4, 128, 50, 32, 1e-12}, parse_layout("{2,sf}:{2,sf}"), 3);
  std::mt19937_64 rng(3);
  const Batch b = verify::random_batch(rng, 4, 32, 50, 0.15);
  const int saved = kernels::threads();
  kernels::set_threads(1);
  const auto one = model.encode(b, Mode::Pretrain, false).output;
  kernels::set_threads(4);
  const auto four = model.encode(b, Mode::Pretrain, false).output;
  kernels::set_threads(saved);
  CHECK(bit_equal(one, four));
}

TEST_CASE("parameters are named and counted") {
  Encoder<float> model(kDims, parse_layout("sf:sf"), 1, 0.02, 2);
  std::size_t total = 0;
  for (const auto& p : model.parameters()) {
    CHECK_FALSE(p.name.empty());
    CHECK(p.param->grad.shape() == p.param->value.shape());
    total += p.param->value.size();
  }
  CHECK(total == model.parameter_count());
  CHECK(model.num_classes() == 2);
}
