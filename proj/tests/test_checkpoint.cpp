#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstring>
#include <filesystem>
#include <random>
#include <sstream>

#include "narrowbert/checkpoint.hpp"
#include "narrowbert/verify.hpp"

using namespace narrowbert;

namespace {

const ModelDims kDims{16, 2, 32, 12, 20, 1e-12};

Vocab small_vocab() {
  return Vocab::from_words({"a", "b", "c", "d", "e", "f", "g"});
}

template <typename T>
bool same_bits(const Encoder<T>& a, const Encoder<T>& b) {
  const auto pa = a.parameters();
  const auto pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    const auto& x = pa[i].param->value;
    const auto& y = pb[i].param->value;
    if (pa[i].name != pb[i].name || x.shape() != y.shape() ||
        std::memcmp(x.data().data(), y.data().data(), x.size() * sizeof(T)) != 0) {
      return false;
    }
  }
  return true;
}

template <typename T>
std::string saved_bytes(Encoder<T>& model, const Vocab& v, bool with_adam) {
  Adam<T> opt(model.parameters());
  if (with_adam) {
    for (auto& p : model.parameters()) p.param->grad.fill(T(0.125));
    opt.step(model.parameters(), 1e-3);
  }
  std::ostringstream os(std::ios::binary);
  save_checkpoint(os, model, v, with_adam ? &opt : nullptr);
  return os.str();
}

CheckpointErrorKind load_error(const std::string& bytes) {
  std::istringstream in(bytes, std::ios::binary);
  try {
    load_checkpoint<float>(in);
  } catch (const CheckpointError& e) {
    return e.kind();
  }
  FAIL("checkpoint loaded without error");
  return CheckpointErrorKind::Io;
}

}  // namespace

TEST_CASE_TEMPLATE("bit-exact round trip with optimizer state", T, float, double) {
  Encoder<T> model(kDims, parse_layout("sf:{2,sf}"), 3, 0.02, 3);
  model.perturb(9, 0.5);
  const Vocab v = small_vocab();
  Adam<T> opt(model.parameters());
  for (auto& p : model.parameters()) p.param->grad.fill(T(0.25));
  opt.step(model.parameters(), 1e-2);
  std::stringstream buf(std::ios::in | std::ios::out | std::ios::binary);
  save_checkpoint(buf, model, v, &opt);
  const LoadedModel<T> back = load_checkpoint<T>(buf);
  CHECK(same_bits(model, back.model));
  CHECK(back.vocab == v);
  CHECK(back.model.dims() == model.dims());
  CHECK(back.model.layout().atoms == model.layout().atoms);
  CHECK(back.model.num_classes() == 3);
  REQUIRE(back.optimizer.has_value());
  CHECK(back.optimizer->t() == 1);
  for (std::size_t i = 0; i < opt.first_moments().size(); ++i) {
    CHECK(back.optimizer->first_moments()[i] == opt.first_moments()[i]);
    CHECK(back.optimizer->second_moments()[i] == opt.second_moments()[i]);
  }
  std::istringstream again(buf.str(), std::ios::binary);
  CHECK(read_checkpoint_header(again).value_bytes == sizeof(T));
}

TEST_CASE("cross-precision load converts values") {
  Encoder<float> model(kDims, parse_layout("{2,sf}"), 3);
  std::stringstream buf(std::ios::in | std::ios::out | std::ios::binary);
  save_checkpoint(buf, model, small_vocab());
  const auto wide = load_checkpoint<double>(buf);
  const auto a = model.parameters();
  const auto b = wide.model.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < a[i].param->value.size(); ++j) {
      CHECK(static_cast<double>(a[i].param->value[j]) == b[i].param->value[j]);
    }
  }
}

TEST_CASE("corrupt files are told apart") {
  Encoder<float> model(kDims, parse_layout("sf:sf"), 1);
  const std::string good = saved_bytes(model, small_vocab(), true);

  std::string magic = good;
  magic[0] = 'X';
  CHECK(load_error(magic) == CheckpointErrorKind::BadMagic);

  std::string version = good;
  version[4] = 9;
  CHECK(load_error(version) == CheckpointErrorKind::VersionMismatch);

  for (std::size_t cut : {std::size_t(2), std::size_t(30), good.size() / 2, good.size() - 1}) {
    CHECK(load_error(good.substr(0, cut)) == CheckpointErrorKind::Truncated);
  }

  // Shrink the stored hidden size: parameter blobs no longer fit the header.
  std::string shape = good;
  REQUIRE(static_cast<unsigned char>(shape[12]) == kDims.hidden);
  shape[12] = 8;
  CHECK(load_error(shape) == CheckpointErrorKind::ShapeMismatch);

  CHECK_THROWS_AS(load_checkpoint<float>(std::filesystem::path("/nonexistent/x.nbrt")),
                  CheckpointError);
}

TEST_CASE("saved sparse-queries checkpoint runs classify-forward") {
  const ModelDims dims{16, 2, 32, 12, 20, 1e-12};
  Encoder<float> model(dims, parse_layout("{2,sf}:{10,sf}"), 5, 0.02, 2);
  const auto path = std::filesystem::temp_directory_path() / "nb_test_ckpt.nbrt";
  save_checkpoint(path, model, small_vocab());
  const auto header = read_checkpoint_header(path);
  CHECK(header.layout == "{2,sf}:{10,sf}");
  auto back = load_checkpoint<float>(path);
  std::filesystem::remove(path);
  std::mt19937_64 rng(2);
  const Batch b = verify::random_batch(rng, 3, 20, dims.vocab, 0.15);
  CHECK(back.model.classify_predict(b) == model.classify_predict(b));
  const auto pass = back.model.encode(b, Mode::Classify);
  CHECK(pass.output.rows() == 3);
}
