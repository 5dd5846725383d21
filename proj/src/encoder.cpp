#include <algorithm>
#include <random>
#include <stdexcept>
#include <string>

#include "narrowbert/kernels.hpp"
#include "narrowbert/model.hpp"
#include "narrowbert/random.hpp"

namespace narrowbert {

template <typename T>
std::vector<std::size_t> EncoderState<T>::active_rows() const {
  std::vector<std::size_t> rows(active_positions.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    rows[i] = (i / active_per_row) * seq_len + active_positions[i];
  }
  return rows;
}

namespace {

template <typename T>
void init_normal(Parameter<T>& p, std::mt19937_64& rng, double stddev) {
  for (auto& x : p.value.data()) x = static_cast<T>(truncated_normal(rng, stddev));
}

template <typename T>
Parameter<T> make_weight(std::size_t rows, std::size_t cols,
                         std::mt19937_64& rng, double stddev) {
  Parameter<T> p({rows, cols});
  init_normal(p, rng, stddev);
  return p;
}

template <typename T>
void validate_positions(const std::vector<std::size_t>& positions,
                        std::size_t per_row, std::size_t batch,
                        std::size_t seq_len) {
  if (per_row == 0 || positions.empty()) {
    throw std::invalid_argument("narrow: empty position list");
  }
  if (positions.size() != per_row * batch) {
    throw std::invalid_argument("narrow: position count does not match batch");
  }
  for (std::size_t i = 0; i < positions.size(); ++i) {
    if (positions[i] >= seq_len) {
      throw std::out_of_range("narrow: position " +
                              std::to_string(positions[i]) +
                              " outside sequence of " +
                              std::to_string(seq_len));
    }
    if (i % per_row != 0 && positions[i] <= positions[i - 1]) {
      throw std::invalid_argument(
          "narrow: positions must be strictly increasing (duplicate or "
          "unordered position " +
          std::to_string(positions[i]) + ")");
    }
  }
}

template <typename T>
std::vector<std::size_t> mode_positions(const Batch& batch, Mode mode,
                                        std::size_t& per_row) {
  if (mode == Mode::Classify) {
    per_row = 1;
    return std::vector<std::size_t>(batch.batch_size, 0);
  }
  per_row = batch.masked_per_row;
  if (per_row == 0) {
    throw std::invalid_argument("pretrain mode needs masked positions");
  }
  return batch.masked_positions;
}

}  // namespace

template <typename T>
Encoder<T>::Encoder(ModelDims dims, Layout layout, std::uint64_t seed,
                    double init_std, std::size_t num_classes)
    : dims_(dims), layout_(std::move(layout)) {
  dims_.validate();
  if (auto v = validate_layout(layout_, Mode::Pretrain); !v.empty()) {
    throw std::invalid_argument("invalid layout: " + v.front().message);
  }
  const std::size_t d = dims_.hidden, f = dims_.ffn, vocab = dims_.vocab;
  std::mt19937_64 rng(seed);
  embeddings.token = make_weight<T>(vocab, d, rng, init_std);
  embeddings.position = make_weight<T>(dims_.max_len, d, rng, init_std);
  embeddings.ln_gain = Parameter<T>({d}, T(1));
  embeddings.ln_bias = Parameter<T>({d});
  embeddings.out_bias = Parameter<T>({vocab});
  embeddings.tied_grad = Tensor<T>({vocab, d});

  for (const auto& atom : layout_.atoms) {
    switch (atom.kind) {
      case AtomKind::Attention: {
        layer_of_.push_back(attention.size());
        AttentionLayer<T> l;
        l.wq = make_weight<T>(d, d, rng, init_std);
        l.wk = make_weight<T>(d, d, rng, init_std);
        l.wv = make_weight<T>(d, d, rng, init_std);
        l.wo = make_weight<T>(d, d, rng, init_std);
        l.bq = l.bk = l.bv = l.bo = Parameter<T>({d});
        l.ln_gain = Parameter<T>({d}, T(1));
        l.ln_bias = Parameter<T>({d});
        attention.push_back(std::move(l));
        break;
      }
      case AtomKind::Feedforward: {
        layer_of_.push_back(feedforward.size());
        FeedforwardLayer<T> l;
        l.w1 = make_weight<T>(d, f, rng, init_std);
        l.b1 = Parameter<T>({f});
        l.w2 = make_weight<T>(f, d, rng, init_std);
        l.b2 = Parameter<T>({d});
        l.ln_gain = Parameter<T>({d}, T(1));
        l.ln_bias = Parameter<T>({d});
        feedforward.push_back(std::move(l));
        break;
      }
      case AtomKind::NarrowMarker:
        layer_of_.push_back(0);
        break;
    }
  }
  if (num_classes > 0) add_classifier(num_classes, mix_seed(seed, 77), init_std);
}

template <typename T>
void Encoder<T>::add_classifier(std::size_t num_classes, std::uint64_t seed,
                                double init_std) {
  if (num_classes == 0) throw std::invalid_argument("need >= 1 class");
  std::mt19937_64 rng(seed);
  ClassifierHead<T> head;
  head.weight = make_weight<T>(dims_.hidden, num_classes, rng, init_std);
  head.bias = Parameter<T>({num_classes});
  classifier = std::move(head);
}

template <typename T>
std::size_t Encoder<T>::num_classes() const {
  return classifier ? classifier->bias.value.size() : 0;
}

namespace {

template <typename T, typename Enc, typename Out>
void collect_parameters(Enc& enc, Out& out) {
  auto add = [&](std::string name, auto& p) { out.push_back({std::move(name), &p}); };
  add("embeddings.token", enc.embeddings.token);
  add("embeddings.position", enc.embeddings.position);
  add("embeddings.ln.gain", enc.embeddings.ln_gain);
  add("embeddings.ln.bias", enc.embeddings.ln_bias);
  add("mlm.out_bias", enc.embeddings.out_bias);
  const auto& atoms = enc.layout().atoms;
  for (std::size_t i = 0; i < atoms.size(); ++i) {
    const std::string prefix = "atom" + std::to_string(i);
    if (atoms[i].kind == AtomKind::Attention) {
      auto& l = enc.attention[enc.layer_of_atom(i)];
      add(prefix + ".attn.wq", l.wq);
      add(prefix + ".attn.bq", l.bq);
      add(prefix + ".attn.wk", l.wk);
      add(prefix + ".attn.bk", l.bk);
      add(prefix + ".attn.wv", l.wv);
      add(prefix + ".attn.bv", l.bv);
      add(prefix + ".attn.wo", l.wo);
      add(prefix + ".attn.bo", l.bo);
      add(prefix + ".attn.ln.gain", l.ln_gain);
      add(prefix + ".attn.ln.bias", l.ln_bias);
    } else if (atoms[i].kind == AtomKind::Feedforward) {
      auto& l = enc.feedforward[enc.layer_of_atom(i)];
      add(prefix + ".ffn.w1", l.w1);
      add(prefix + ".ffn.b1", l.b1);
      add(prefix + ".ffn.w2", l.w2);
      add(prefix + ".ffn.b2", l.b2);
      add(prefix + ".ffn.ln.gain", l.ln_gain);
      add(prefix + ".ffn.ln.bias", l.ln_bias);
    }
  }
  if (enc.classifier) {
    add("classifier.weight", enc.classifier->weight);
    add("classifier.bias", enc.classifier->bias);
  }
}

}  // namespace

template <typename T>
std::vector<NamedParameter<T>> Encoder<T>::parameters() {
  std::vector<NamedParameter<T>> out;
  collect_parameters<T>(*this, out);
  return out;
}

template <typename T>
std::vector<ConstNamedParameter<T>> Encoder<T>::parameters() const {
  std::vector<ConstNamedParameter<T>> out;
  collect_parameters<T>(*this, out);
  return out;
}

template <typename T>
std::size_t Encoder<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.param->value.size();
  return n;
}

template <typename T>
void Encoder<T>::zero_grad() {
  for (auto& p : parameters()) p.param->zero_grad();
  embeddings.tied_grad.fill(T(0));
}

template <typename T>
void Encoder<T>::finalize_gradients() {
  auto g = embeddings.token.grad.data();
  auto t = embeddings.tied_grad.data();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += t[i];
  embeddings.tied_grad.fill(T(0));
}

template <typename T>
void Encoder<T>::perturb(std::uint64_t seed, double stddev) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, stddev);
  for (auto& p : parameters()) {
    for (auto& x : p.param->value.data()) x += static_cast<T>(noise(rng));
  }
}

template <typename T>
EncoderState<T> Encoder<T>::embed(const Batch& batch,
                                  EmbedCache<T>* cache) const {
  const std::size_t b = batch.batch_size, l = batch.seq_len, d = dims_.hidden;
  if (b == 0 || l == 0 || batch.ids.size() != b * l ||
      batch.validity.size() != b * l) {
    throw std::invalid_argument("embed: malformed batch");
  }
  if (l > dims_.max_len) {
    throw std::out_of_range("sequence length " + std::to_string(l) +
                            " exceeds max_len " +
                            std::to_string(dims_.max_len));
  }
  std::vector<std::int32_t> pos(b * l);
  for (std::size_t i = 0; i < pos.size(); ++i) {
    pos[i] = static_cast<std::int32_t>(i % l);
  }
  Tensor<T> e = ops::embedding_lookup(embeddings.token, batch.ids);
  const Tensor<T> p = ops::embedding_lookup(embeddings.position, pos);
  {
    T* pe = e.data().data();
    const T* pp = p.data().data();
    for (std::size_t i = 0; i < e.size(); ++i) pe[i] = pe[i] + pp[i];
  }
  EncoderState<T> state;
  state.batch = b;
  state.seq_len = l;
  state.full_hidden =
      ops::layer_norm(e, embeddings.ln_gain, embeddings.ln_bias,
                      static_cast<T>(dims_.ln_eps), cache ? &cache->ln : nullptr)
          .reshaped({b, l, d});
  if (cache) {
    cache->ids = batch.ids;
    cache->positions = std::move(pos);
  }
  return state;
}

template <typename T>
EncoderState<T> Encoder<T>::attention_forward(
    EncoderState<T> state, const AttentionLayer<T>& layer,
    std::span<const std::uint8_t> validity, AttentionCache<T>* cache) const {
  const T eps = static_cast<T>(dims_.ln_eps);
  const std::size_t d = dims_.hidden;
  if (state.phase == Phase::Wide) {
    auto x = std::make_shared<const Tensor<T>>(std::move(state.full_hidden));
    state.full_hidden =
        attention_core(layer, *x, state.seq_len, *x, state.seq_len, state.batch,
                       validity, dims_.heads, eps, cache)
            .reshaped({state.batch, state.seq_len, d});
    if (cache) {
      cache->narrowed = false;
      cache->xq = x;
      cache->xkv = x;
    }
    return state;
  }
  auto xq = std::make_shared<const Tensor<T>>(std::move(state.active_hidden));
  state.active_hidden =
      attention_core(layer, *xq, state.active_per_row, *state.kv_source,
                     state.seq_len, state.batch, validity, dims_.heads, eps,
                     cache)
          .reshaped({state.batch, state.active_per_row, d});
  if (cache) {
    cache->narrowed = true;
    cache->xq = xq;
    cache->xkv = state.kv_source;
  }
  return state;
}

template <typename T>
EncoderState<T> Encoder<T>::feedforward_forward(
    EncoderState<T> state, const FeedforwardLayer<T>& layer,
    FeedforwardCache<T>* cache) const {
  const T eps = static_cast<T>(dims_.ln_eps);
  Tensor<T>& target =
      state.phase == Phase::Wide ? state.full_hidden : state.active_hidden;
  const auto shape = target.shape();
  target = feedforward_core(layer, target, eps, cache).reshaped(shape);
  return state;
}

template <typename T>
EncoderState<T> Encoder<T>::narrow(EncoderState<T> state,
                                   std::vector<std::size_t> positions,
                                   std::size_t per_row) {
  if (state.phase != Phase::Wide) {
    throw std::logic_error("narrow applied to an already narrowed state");
  }
  validate_positions<T>(positions, per_row, state.batch, state.seq_len);
  state.active_positions = std::move(positions);
  state.active_per_row = per_row;
  const std::size_t d = state.full_hidden.cols();
  state.active_hidden = ops::gather_rows(state.full_hidden, state.active_rows())
                            .reshaped({state.batch, per_row, d});
  state.kv_source = std::make_shared<const Tensor<T>>(state.full_hidden);
  state.phase = Phase::Narrowed;
  return state;
}

template <typename T>
ForwardPass<T> Encoder<T>::encode(const Batch& batch, Mode mode,
                                  bool keep_cache) const {
  ForwardPass<T> pass;
  pass.mode = mode;
  pass.validity = batch.validity;
  pass.state = embed(batch, keep_cache ? &pass.embed : nullptr);
  pass.atoms.resize(layout_.atoms.size());
  const std::span<const std::uint8_t> validity = batch.validity;
  for (std::size_t i = 0; i < layout_.atoms.size(); ++i) {
    switch (layout_.atoms[i].kind) {
      case AtomKind::Attention: {
        AttentionCache<T>* cache = nullptr;
        if (keep_cache) cache = &pass.atoms[i].template emplace<AttentionCache<T>>();
        pass.state = attention_forward(std::move(pass.state),
                                       attention[layer_of_[i]], validity, cache);
        break;
      }
      case AtomKind::Feedforward: {
        FeedforwardCache<T>* cache = nullptr;
        if (keep_cache) cache = &pass.atoms[i].template emplace<FeedforwardCache<T>>();
        pass.state = feedforward_forward(std::move(pass.state),
                                         feedforward[layer_of_[i]], cache);
        break;
      }
      case AtomKind::NarrowMarker: {
        std::size_t per_row = 0;
        auto positions = mode_positions<T>(batch, mode, per_row);
        pass.state = narrow(std::move(pass.state), std::move(positions), per_row);
        if (keep_cache) {
          pass.atoms[i] = NarrowCache{pass.state.active_rows()};
        }
        break;
      }
    }
  }
  const std::size_t d = dims_.hidden;
  if (pass.state.phase == Phase::Narrowed) {
    pass.output = pass.state.active_hidden.reshaped(
        {pass.state.batch * pass.state.active_per_row, d});
  } else {
    std::size_t per_row = 0;
    auto positions = mode_positions<T>(batch, mode, per_row);
    validate_positions<T>(positions, per_row, pass.state.batch,
                          pass.state.seq_len);
    pass.final_gather = true;
    pass.final_rows.resize(positions.size());
    for (std::size_t i = 0; i < positions.size(); ++i) {
      pass.final_rows[i] = (i / per_row) * pass.state.seq_len + positions[i];
    }
    pass.output = ops::gather_rows(pass.state.full_hidden, pass.final_rows);
  }
  return pass;
}

template <typename T>
void Encoder<T>::backward(ForwardPass<T>& pass, const Tensor<T>& d_output) {
  const std::size_t b = pass.state.batch, l = pass.state.seq_len;
  const std::size_t d = dims_.hidden;
  if (d_output.size() != pass.output.size()) {
    throw ShapeError("backward: gradient shape " +
                     shape_to_string(d_output.shape()) +
                     " does not match output " +
                     shape_to_string(pass.output.shape()));
  }
  const std::span<const std::uint8_t> validity = pass.validity;
  const Tensor<T> d_out = d_output.reshaped({d_output.size() / d, d});

  // d_full: gradient w.r.t. the wide hidden state. d_active: w.r.t. the
  // narrowed rows. d_kv: collected from every post-narrow attention layer's
  // key/value projections of the frozen source.
  Tensor<T> d_full, d_active, d_kv;
  if (pass.final_gather) {
    d_full = Tensor<T>({b * l, d});
    ops::gather_rows_backward<T>(pass.final_rows, d_out, d_full);
  } else {
    d_active = d_out;
    d_kv = Tensor<T>({b * l, d});
  }

  for (std::size_t i = layout_.atoms.size(); i-- > 0;) {
    auto& cache = pass.atoms[i];
    switch (layout_.atoms[i].kind) {
      case AtomKind::Attention: {
        auto& c = std::get<AttentionCache<T>>(cache);
        auto& layer = attention[layer_of_[i]];
        if (c.narrowed) {
          Tensor<T> dx(c.xq->shape());
          attention_core_backward(layer, c, b, l, validity, dims_.heads,
                                  d_active, dx, d_kv);
          d_active = std::move(dx).reshaped({dx.size() / d, d});
        } else {
          Tensor<T> dx({b * l, d});
          attention_core_backward(layer, c, b, l, validity, dims_.heads,
                                  d_full, dx, dx);
          d_full = std::move(dx);
        }
        break;
      }
      case AtomKind::Feedforward: {
        auto& c = std::get<FeedforwardCache<T>>(cache);
        auto& layer = feedforward[layer_of_[i]];
        Tensor<T>& target = d_active.empty() ? d_full : d_active;
        target = feedforward_core_backward(layer, c, target);
        break;
      }
      case AtomKind::NarrowMarker: {
        const auto& c = std::get<NarrowCache>(cache);
        d_full = std::move(d_kv);
        ops::gather_rows_backward<T>(c.rows, d_active, d_full);
        d_active = Tensor<T>();
        break;
      }
    }
  }

  Tensor<T> de = ops::layer_norm_backward(pass.embed.ln, embeddings.ln_gain,
                                          embeddings.ln_bias, d_full);
  ops::embedding_backward<T>(embeddings.token, pass.embed.ids, de);
  ops::embedding_backward<T>(embeddings.position, pass.embed.positions, de);
}

template <typename T>
Tensor<T> Encoder<T>::mlm_logits(const Tensor<T>& hidden) const {
  const std::size_t v = dims_.vocab, d = dims_.hidden;
  const Tensor<T> h = hidden.reshaped({hidden.size() / d, d});
  const Tensor<T>& table = embeddings.token.value;
  Tensor<T> table_t({d, v});
  for (std::size_t r = 0; r < v; ++r)
    for (std::size_t c = 0; c < d; ++c) table_t.at(c, r) = table.at(r, c);
  Tensor<T> logits = ops::matmul(h, table_t);
  const T* bias = embeddings.out_bias.value.data().data();
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    T* lr = logits.row(r);
    for (std::size_t j = 0; j < v; ++j) lr[j] += bias[j];
  }
  return logits;
}

template <typename T>
void Encoder<T>::mlm_logits_backward(const Tensor<T>& hidden,
                                     const Tensor<T>& dlogits,
                                     Tensor<T>& dhidden) {
  const std::size_t v = dims_.vocab, d = dims_.hidden;
  const std::size_t rows = dlogits.rows();
  const Tensor<T> h = hidden.reshaped({rows, d});
  // d(hidden) += dlogits * table
  const Tensor<T> dh = ops::matmul(dlogits, embeddings.token.value);
  {
    auto out = dhidden.data();
    auto add = dh.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += add[i];
  }
  // d(table) += dlogits^T * hidden
  kernels::parallel::matmul_grad_b<T>(dlogits.data(), h.data(),
                                      embeddings.tied_grad.data(), rows, v, d);
  T* gb = embeddings.out_bias.grad.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* lr = dlogits.row(r);
    for (std::size_t j = 0; j < v; ++j) gb[j] += lr[j];
  }
}

template <typename T>
Tensor<T> Encoder<T>::classify_logits(const Tensor<T>& cls_hidden) const {
  if (!classifier) throw std::logic_error("model has no classifier head");
  const std::size_t d = dims_.hidden;
  return ops::linear(cls_hidden.reshaped({cls_hidden.size() / d, d}),
                     classifier->weight, classifier->bias);
}

template <typename T>
void Encoder<T>::classify_logits_backward(const Tensor<T>& cls_hidden,
                                          const Tensor<T>& dlogits,
                                          Tensor<T>& dhidden) {
  if (!classifier) throw std::logic_error("model has no classifier head");
  const std::size_t d = dims_.hidden;
  ops::linear_backward(cls_hidden.reshaped({cls_hidden.size() / d, d}),
                       classifier->weight, classifier->bias, dlogits, &dhidden);
}

template <typename T>
T Encoder<T>::mlm_loss(const Batch& batch) const {
  const ForwardPass<T> pass = encode(batch, Mode::Pretrain, false);
  return narrowbert::mlm_loss(mlm_logits(pass.output), batch.labels);
}

template <typename T>
T Encoder<T>::mlm_step(const Batch& batch, T grad_scale) {
  ForwardPass<T> pass = encode(batch, Mode::Pretrain, true);
  const Tensor<T> logits = mlm_logits(pass.output);
  const T loss = narrowbert::mlm_loss(logits, batch.labels);
  const Tensor<T> dlogits =
      ops::cross_entropy_backward(logits, batch.labels, grad_scale);
  Tensor<T> dhidden(pass.output.shape());
  mlm_logits_backward(pass.output, dlogits, dhidden);
  backward(pass, dhidden);
  return loss;
}

template <typename T>
T Encoder<T>::classify_loss(const Batch& batch,
                            std::span<const std::int32_t> labels) const {
  const ForwardPass<T> pass = encode(batch, Mode::Classify, false);
  return ops::cross_entropy_logits(classify_logits(pass.output), labels);
}

template <typename T>
T Encoder<T>::classify_step(const Batch& batch,
                            std::span<const std::int32_t> labels,
                            T grad_scale) {
  ForwardPass<T> pass = encode(batch, Mode::Classify, true);
  const Tensor<T> logits = classify_logits(pass.output);
  const T loss = ops::cross_entropy_logits(logits, labels);
  const Tensor<T> dlogits = ops::cross_entropy_backward(logits, labels, grad_scale);
  Tensor<T> dhidden(pass.output.shape());
  classify_logits_backward(pass.output, dlogits, dhidden);
  backward(pass, dhidden);
  return loss;
}

template <typename T>
std::vector<std::int32_t> Encoder<T>::classify_predict(const Batch& batch) const {
  const ForwardPass<T> pass = encode(batch, Mode::Classify, false);
  const Tensor<T> logits = classify_logits(pass.output);
  std::vector<std::int32_t> out(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const T* lr = logits.row(r);
    out[r] = static_cast<std::int32_t>(std::max_element(lr, lr + logits.cols()) - lr);
  }
  return out;
}

template struct EncoderState<float>;
template struct EncoderState<double>;
template class Encoder<float>;
template class Encoder<double>;

}  // namespace narrowbert
