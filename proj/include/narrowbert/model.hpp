#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "narrowbert/data.hpp"
#include "narrowbert/dims.hpp"
#include "narrowbert/layout.hpp"
#include "narrowbert/ops.hpp"
#include "narrowbert/tensor.hpp"

namespace narrowbert {

template <typename T>
struct Embeddings {
  Parameter<T> token;     // [V x d]; also the transposed MLM output projection
  Parameter<T> position;  // [max_len x d]
  Parameter<T> ln_gain;
  Parameter<T> ln_bias;
  Parameter<T> out_bias;  // [V], MLM output bias
  // Output-projection share of d(token). Kept apart from token.grad until
  // Encoder::finalize_gradients() so that accumulating micro-batches sums
  // every contribution in the same order as one large batch.
  Tensor<T> tied_grad;
};

// Post-LN self-attention sublayer: y = LN(x + MHA(x)).
template <typename T>
struct AttentionLayer {
  Parameter<T> wq, bq, wk, bk, wv, bv, wo, bo;
  Parameter<T> ln_gain, ln_bias;
};

// Post-LN positionwise MLP sublayer: y = LN(x + W2 gelu(W1 x + b1) + b2).
template <typename T>
struct FeedforwardLayer {
  Parameter<T> w1, b1, w2, b2;
  Parameter<T> ln_gain, ln_bias;
};

template <typename T>
struct ClassifierHead {
  Parameter<T> weight;  // [d x C]
  Parameter<T> bias;    // [C]
};

enum class Phase { Wide, Narrowed };

template <typename T>
struct EncoderState {
  Phase phase = Phase::Wide;
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  Tensor<T> full_hidden;  // [B x L x d], current until the narrow point
  // Narrowed only:
  Tensor<T> active_hidden;                // [B x M x d]
  std::vector<std::size_t> active_positions;  // [B x M] positions within a row
  std::size_t active_per_row = 0;
  std::shared_ptr<const Tensor<T>> kv_source;  // frozen full_hidden

  // Flat row indices b * L + position for the active set.
  std::vector<std::size_t> active_rows() const;
};

template <typename T>
struct EmbedCache {
  std::vector<std::int32_t> ids;
  std::vector<std::int32_t> positions;
  ops::LayerNormCache<T> ln;
};

template <typename T>
struct AttentionCache {
  bool narrowed = false;
  std::size_t queries_per_row = 0;
  std::shared_ptr<const Tensor<T>> xq;
  std::shared_ptr<const Tensor<T>> xkv;
  Tensor<T> q, k, v, ctx;
  std::vector<T> probs;  // [B x heads x queries x L]
  ops::LayerNormCache<T> ln;
};

template <typename T>
struct FeedforwardCache {
  Tensor<T> x, pre, act;
  ops::LayerNormCache<T> ln;
};

struct NarrowCache {
  std::vector<std::size_t> rows;
};

template <typename T>
using AtomCache =
    std::variant<std::monostate, AttentionCache<T>, FeedforwardCache<T>,
                 NarrowCache>;

template <typename T>
struct ForwardPass {
  Mode mode = Mode::Pretrain;
  std::vector<std::uint8_t> validity;  // key mask, [B x L]
  EncoderState<T> state;
  EmbedCache<T> embed;
  std::vector<AtomCache<T>> atoms;
  // Layouts without ':' gather the active rows after the last atom.
  bool final_gather = false;
  std::vector<std::size_t> final_rows;
  Tensor<T> output;  // [B*M x d] hidden rows at the active positions
};

template <typename T>
class Encoder {
 public:
  Encoder(ModelDims dims, Layout layout, std::uint64_t seed,
          double init_std = 0.02, std::size_t num_classes = 0);

  const ModelDims& dims() const { return dims_; }
  const Layout& layout() const { return layout_; }
  // atom index -> index into `attention` or `feedforward`.
  std::size_t layer_of_atom(std::size_t atom) const { return layer_of_[atom]; }

  Embeddings<T> embeddings;
  std::vector<AttentionLayer<T>> attention;
  std::vector<FeedforwardLayer<T>> feedforward;
  std::optional<ClassifierHead<T>> classifier;

  void add_classifier(std::size_t num_classes, std::uint64_t seed,
                      double init_std = 0.02);
  std::size_t num_classes() const;

  std::vector<NamedParameter<T>> parameters();
  std::vector<ConstNamedParameter<T>> parameters() const;
  std::size_t parameter_count() const;
  void zero_grad();
  // Folds the tied output-projection gradient into embeddings.token.grad.
  void finalize_gradients();
  // Adds N(0, stddev) noise to every parameter, biases and gains included.
  void perturb(std::uint64_t seed, double stddev);

  // --- building blocks -----------------------------------------------------
  EncoderState<T> embed(const Batch& batch, EmbedCache<T>* cache) const;
  EncoderState<T> attention_forward(EncoderState<T> state,
                                    const AttentionLayer<T>& layer,
                                    std::span<const std::uint8_t> validity,
                                    AttentionCache<T>* cache) const;
  EncoderState<T> feedforward_forward(EncoderState<T> state,
                                      const FeedforwardLayer<T>& layer,
                                      FeedforwardCache<T>* cache) const;
  // positions: per_row strictly increasing entries per sequence.
  static EncoderState<T> narrow(EncoderState<T> state,
                                std::vector<std::size_t> positions,
                                std::size_t per_row);

  // --- whole-model passes --------------------------------------------------
  // Pretrain narrows to batch.masked_positions, Classify to position 0.
  ForwardPass<T> encode(const Batch& batch, Mode mode,
                        bool keep_cache = true) const;
  // Accumulates parameter gradients given d(loss)/d(pass.output).
  void backward(ForwardPass<T>& pass, const Tensor<T>& d_output);

  Tensor<T> mlm_logits(const Tensor<T>& hidden) const;
  void mlm_logits_backward(const Tensor<T>& hidden, const Tensor<T>& dlogits,
                           Tensor<T>& dhidden);
  Tensor<T> classify_logits(const Tensor<T>& cls_hidden) const;
  void classify_logits_backward(const Tensor<T>& cls_hidden,
                                const Tensor<T>& dlogits, Tensor<T>& dhidden);

  T mlm_loss(const Batch& batch) const;
  // Forward + backward; gradient of the loss scaled by grad_scale per masked
  // position (1/(B*M) gives the gradient of the mean). Returns the mean loss.
  T mlm_step(const Batch& batch, T grad_scale);

  T classify_loss(const Batch& batch,
                  std::span<const std::int32_t> labels) const;
  T classify_step(const Batch& batch, std::span<const std::int32_t> labels,
                  T grad_scale);
  std::vector<std::int32_t> classify_predict(const Batch& batch) const;

 private:
  ModelDims dims_;
  Layout layout_;
  std::vector<std::size_t> layer_of_;
};

template <typename T>
T mlm_loss(const Tensor<T>& logits, std::span<const std::int32_t> labels) {
  return ops::cross_entropy_logits(logits, labels);
}

// Attention with `queries_per_row` query rows per sequence drawn from xq and
// seq_len key/value rows per sequence drawn from xkv. Wide attention passes
// the same tensor twice; narrowed attention passes the active rows and the
// frozen source.
template <typename T>
Tensor<T> attention_core(const AttentionLayer<T>& layer, const Tensor<T>& xq,
                         std::size_t queries_per_row, const Tensor<T>& xkv,
                         std::size_t seq_len, std::size_t batch,
                         std::span<const std::uint8_t> key_valid,
                         std::size_t heads, T eps, AttentionCache<T>* cache);

// Accumulates into dxq and dxkv (which may alias) and the layer's gradients.
template <typename T>
void attention_core_backward(AttentionLayer<T>& layer,
                             const AttentionCache<T>& cache, std::size_t batch,
                             std::size_t seq_len,
                             std::span<const std::uint8_t> key_valid,
                             std::size_t heads, const Tensor<T>& dy,
                             Tensor<T>& dxq, Tensor<T>& dxkv);

template <typename T>
Tensor<T> feedforward_core(const FeedforwardLayer<T>& layer,
                           const Tensor<T>& x, T eps,
                           FeedforwardCache<T>* cache);

template <typename T>
Tensor<T> feedforward_core_backward(FeedforwardLayer<T>& layer,
                                    const FeedforwardCache<T>& cache,
                                    const Tensor<T>& dy);

}  // namespace narrowbert
