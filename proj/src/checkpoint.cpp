#include "narrowbert/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>

namespace narrowbert {

const char* to_string(CheckpointErrorKind kind) {
  switch (kind) {
    case CheckpointErrorKind::Io: return "io error";
    case CheckpointErrorKind::BadMagic: return "bad magic";
    case CheckpointErrorKind::VersionMismatch: return "version mismatch";
    case CheckpointErrorKind::Truncated: return "truncated blob";
    case CheckpointErrorKind::ShapeMismatch: return "shape mismatch";
    case CheckpointErrorKind::Malformed: return "malformed checkpoint";
  }
  return "?";
}

namespace {

constexpr std::array<char, 4> kMagic = {'N', 'B', 'R', 'T'};
constexpr std::uint32_t kMaxString = 1u << 20;
constexpr std::uint32_t kMaxRank = 8;

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}

  void bytes(const void* p, std::size_t n) {
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!out_) throw CheckpointError(CheckpointErrorKind::Io, "write failed");
  }
  template <typename U>
  void le(U v) {
    std::array<unsigned char, sizeof(U)> buf{};
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      buf[i] = static_cast<unsigned char>(v >> (8 * i));
    }
    bytes(buf.data(), buf.size());
  }
  void u8(std::uint8_t v) { le(v); }
  void u32(std::uint32_t v) { le(v); }
  void u64(std::uint64_t v) { le(v); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  template <typename T>
  void blob(const std::string& name, const Tensor<T>& t) {
    str(name);
    u32(static_cast<std::uint32_t>(t.shape().size()));
    for (std::size_t d : t.shape()) u64(d);
    for (T x : t.data()) {
      if constexpr (sizeof(T) == 4) {
        u32(std::bit_cast<std::uint32_t>(x));
      } else {
        u64(std::bit_cast<std::uint64_t>(x));
      }
    }
  }

 private:
  std::ostream& out_;
};

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}

  void bytes(void* p, std::size_t n, const std::string& what) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      throw CheckpointError(CheckpointErrorKind::Truncated,
                            "file ends inside " + what);
    }
  }
  template <typename U>
  U le(const std::string& what) {
    std::array<unsigned char, sizeof(U)> buf{};
    bytes(buf.data(), buf.size(), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<U>(static_cast<U>(buf[i]) << (8 * i));
    }
    return v;
  }
  std::uint8_t u8(const std::string& w) { return le<std::uint8_t>(w); }
  std::uint32_t u32(const std::string& w) { return le<std::uint32_t>(w); }
  std::uint64_t u64(const std::string& w) { return le<std::uint64_t>(w); }
  double f64(const std::string& w) { return std::bit_cast<double>(u64(w)); }
  std::string str(const std::string& what) {
    const std::uint32_t n = u32(what);
    if (n > kMaxString) {
      throw CheckpointError(CheckpointErrorKind::Malformed,
                            what + " length " + std::to_string(n));
    }
    std::string s(n, '\0');
    bytes(s.data(), n, what);
    return s;
  }
  // Reads a blob of `value_bytes`-wide values into `target`, whose shape
  // must match the stored one.
  template <typename T>
  void blob(const std::string& expected_name, Tensor<T>& target,
            std::uint32_t value_bytes) {
    const std::string name = str("blob name");
    if (name != expected_name) {
      throw CheckpointError(CheckpointErrorKind::ShapeMismatch,
                            "expected blob " + expected_name + ", found " + name);
    }
    const std::uint32_t rank = u32(name + " rank");
    if (rank == 0 || rank > kMaxRank) {
      throw CheckpointError(CheckpointErrorKind::Malformed,
                            name + " has rank " + std::to_string(rank));
    }
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(u64(name + " shape"));
    if (shape != target.shape()) {
      throw CheckpointError(CheckpointErrorKind::ShapeMismatch,
                            name + " stored as " + shape_to_string(shape) +
                                ", header dims give " +
                                shape_to_string(target.shape()));
    }
    for (T& x : target.data()) {
      if (value_bytes == 4) {
        x = static_cast<T>(std::bit_cast<float>(u32(name + " values")));
      } else {
        x = static_cast<T>(std::bit_cast<double>(u64(name + " values")));
      }
    }
  }

 private:
  std::istream& in_;
};

CheckpointHeader read_header(Reader& r) {
  std::array<char, 4> magic{};
  r.bytes(magic.data(), magic.size(), "magic");
  if (magic != kMagic) {
    throw CheckpointError(CheckpointErrorKind::BadMagic,
                          "not a narrowbert checkpoint");
  }
  CheckpointHeader h;
  h.version = r.u32("version");
  if (h.version != kCheckpointVersion) {
    throw CheckpointError(CheckpointErrorKind::VersionMismatch,
                          "file version " + std::to_string(h.version) +
                              ", reader version " +
                              std::to_string(kCheckpointVersion));
  }
  h.value_bytes = r.u32("value width");
  if (h.value_bytes != 4 && h.value_bytes != 8) {
    throw CheckpointError(CheckpointErrorKind::Malformed,
                          "value width " + std::to_string(h.value_bytes));
  }
  h.dims.hidden = r.u64("dims");
  h.dims.heads = r.u64("dims");
  h.dims.ffn = r.u64("dims");
  h.dims.vocab = r.u64("dims");
  h.dims.max_len = r.u64("dims");
  h.dims.ln_eps = r.f64("dims");
  h.num_classes = r.u64("num_classes");
  h.layout = r.str("layout");
  return h;
}

}  // namespace

template <typename T>
void save_checkpoint(std::ostream& out, const Encoder<T>& model,
                     const Vocab& vocab, const Adam<T>* optimizer) {
  if (vocab.size() != model.dims().vocab) {
    throw CheckpointError(CheckpointErrorKind::ShapeMismatch,
                          "vocab has " + std::to_string(vocab.size()) +
                              " entries, model expects " +
                              std::to_string(model.dims().vocab));
  }
  Writer w(out);
  w.bytes(kMagic.data(), kMagic.size());
  w.u32(kCheckpointVersion);
  w.u32(sizeof(T));
  const ModelDims& d = model.dims();
  w.u64(d.hidden);
  w.u64(d.heads);
  w.u64(d.ffn);
  w.u64(d.vocab);
  w.u64(d.max_len);
  w.f64(d.ln_eps);
  w.u64(model.num_classes());
  w.str(render_layout(model.layout()));
  const auto words = vocab.words();
  w.u64(words.size());
  for (const auto& word : words) w.str(word);
  const auto params = model.parameters();
  w.u64(params.size());
  for (const auto& p : params) w.blob(p.name, p.param->value);
  w.u8(optimizer ? 1 : 0);
  if (optimizer) {
    if (optimizer->first_moments().size() != params.size()) {
      throw CheckpointError(CheckpointErrorKind::ShapeMismatch,
                            "optimizer state does not match the model");
    }
    w.u64(optimizer->t());
    w.f64(optimizer->config().beta1);
    w.f64(optimizer->config().beta2);
    w.f64(optimizer->config().eps);
    for (std::size_t i = 0; i < params.size(); ++i) {
      w.blob("adam.m." + params[i].name, optimizer->first_moments()[i]);
      w.blob("adam.v." + params[i].name, optimizer->second_moments()[i]);
    }
  }
  out.flush();
  if (!out) throw CheckpointError(CheckpointErrorKind::Io, "flush failed");
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Encoder<T>& model,
                     const Vocab& vocab, const Adam<T>* optimizer) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw CheckpointError(CheckpointErrorKind::Io, "cannot write " + path.string());
  }
  save_checkpoint(out, model, vocab, optimizer);
}

CheckpointHeader read_checkpoint_header(std::istream& in) {
  Reader r(in);
  return read_header(r);
}

CheckpointHeader read_checkpoint_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw CheckpointError(CheckpointErrorKind::Io, "cannot read " + path.string());
  }
  return read_checkpoint_header(in);
}

template <typename T>
LoadedModel<T> load_checkpoint(std::istream& in) {
  Reader r(in);
  const CheckpointHeader h = read_header(r);
  Layout layout;
  constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 32;
  if (h.dims.hidden == 0 || h.dims.vocab > kMaxElements / h.dims.hidden ||
      h.dims.max_len > kMaxElements / h.dims.hidden ||
      h.dims.ffn > kMaxElements / h.dims.hidden) {
    throw CheckpointError(CheckpointErrorKind::Malformed, "implausible dims");
  }
  try {
    h.dims.validate();
    layout = parse_layout(h.layout);
  } catch (const std::exception& e) {
    throw CheckpointError(CheckpointErrorKind::Malformed, e.what());
  }
  const std::uint64_t n_words = r.u64("vocab size");
  if (n_words + Vocab::kNumSpecial != h.dims.vocab) {
    throw CheckpointError(CheckpointErrorKind::ShapeMismatch,
                          std::to_string(n_words) + " vocab words for dims.vocab " +
                              std::to_string(h.dims.vocab));
  }
  std::vector<std::string> words(n_words);
  for (auto& word : words) word = r.str("vocab word");
  Vocab vocab;
  try {
    vocab = Vocab::from_words(words);
  } catch (const std::exception& e) {
    throw CheckpointError(CheckpointErrorKind::Malformed, e.what());
  }
  Encoder<T> model(h.dims, std::move(layout), 0, 0.02, h.num_classes);
  auto params = model.parameters();
  const std::uint64_t n_params = r.u64("parameter count");
  if (n_params != params.size()) {
    throw CheckpointError(CheckpointErrorKind::ShapeMismatch,
                          std::to_string(n_params) + " blobs for " +
                              std::to_string(params.size()) + " parameters");
  }
  for (auto& p : params) r.blob(p.name, p.param->value, h.value_bytes);
  std::optional<Adam<T>> optimizer;
  if (r.u8("optimizer flag") != 0) {
    const std::uint64_t t = r.u64("optimizer step");
    AdamConfig config;
    config.beta1 = r.f64("optimizer config");
    config.beta2 = r.f64("optimizer config");
    config.eps = r.f64("optimizer config");
    optimizer.emplace(params, config);
    optimizer->set_t(t);
    for (std::size_t i = 0; i < params.size(); ++i) {
      r.blob("adam.m." + params[i].name, optimizer->first_moments()[i],
             h.value_bytes);
      r.blob("adam.v." + params[i].name, optimizer->second_moments()[i],
             h.value_bytes);
    }
  }
  return {std::move(model), std::move(vocab), std::move(optimizer)};
}

template <typename T>
LoadedModel<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw CheckpointError(CheckpointErrorKind::Io, "cannot read " + path.string());
  }
  return load_checkpoint<T>(in);
}

#define NARROWBERT_INSTANTIATE_CHECKPOINT(T)                                   \
  template void save_checkpoint(std::ostream&, const Encoder<T>&,             \
                                const Vocab&, const Adam<T>*);                 \
  template void save_checkpoint(const std::filesystem::path&,                 \
                                const Encoder<T>&, const Vocab&,               \
                                const Adam<T>*);                               \
  template LoadedModel<T> load_checkpoint<T>(std::istream&);                   \
  template LoadedModel<T> load_checkpoint<T>(const std::filesystem::path&);

NARROWBERT_INSTANTIATE_CHECKPOINT(float)
NARROWBERT_INSTANTIATE_CHECKPOINT(double)

#undef NARROWBERT_INSTANTIATE_CHECKPOINT

}  // namespace narrowbert
