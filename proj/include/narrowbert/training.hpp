#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "narrowbert/data.hpp"
#include "narrowbert/model.hpp"

namespace narrowbert {

class NonFiniteGradient : public std::runtime_error {
 public:
  explicit NonFiniteGradient(std::string parameter)
      : std::runtime_error("non-finite gradient in " + parameter),
        parameter_(std::move(parameter)) {}
  const std::string& parameter() const { return parameter_; }

 private:
  std::string parameter_;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
class Adam {
 public:
  explicit Adam(const std::vector<NamedParameter<T>>& params,
                AdamConfig config = {});

  // Bias-corrected Adam update, then zeroes every gradient. If any gradient
  // holds a NaN/inf nothing is updated and NonFiniteGradient names it.
  void step(const std::vector<NamedParameter<T>>& params, double lr);

  std::uint64_t t() const { return t_; }
  const AdamConfig& config() const { return config_; }
  // Moments in parameter order, shaped like the parameters.
  std::vector<Tensor<T>>& first_moments() { return m_; }
  std::vector<Tensor<T>>& second_moments() { return v_; }
  const std::vector<Tensor<T>>& first_moments() const { return m_; }
  const std::vector<Tensor<T>>& second_moments() const { return v_; }
  void set_t(std::uint64_t t) { t_ = t; }

 private:
  AdamConfig config_;
  std::uint64_t t_ = 0;
  std::vector<Tensor<T>> m_, v_;
};

// Scales all gradients so their global L2 norm is at most max_norm; returns
// the norm before clipping.
template <typename T>
double clip_grad_norm(const std::vector<NamedParameter<T>>& params,
                      double max_norm);

struct TrainConfig {
  double lr = 3e-3;  // desk scale; configs/full_scale.conf keeps 5e-4
  std::size_t warmup = 50;
  std::size_t steps = 500;
  std::size_t micro_batch = 16;
  std::size_t accumulation = 1;
  std::uint64_t seed = 1;
  int precision = 32;
  std::size_t seq_len = 48;
  double clip = 1.0;
  double mask_fraction = 0.15;
  std::size_t eval_every = 50;
  std::size_t eval_batches = 4;
  double dev_fraction = 0.1;
  // model
  std::string layout = "{4,sf}";
  std::size_t hidden = 64;
  std::size_t heads = 4;
  std::size_t ffn = 256;
  std::size_t vocab_size = 2000;
  std::string corpus;  // empty: generated toy corpus
  std::size_t toy_lines = 4000;
  // finetune
  std::size_t num_classes = 2;

  void validate() const;
};

// Flat `key = value` lines; '#' starts a comment. Unknown keys and malformed
// values throw ConfigError naming the line.
void apply_config_text(TrainConfig& config, const std::string& text);
TrainConfig load_config(const std::filesystem::path& path);
std::string format_config(const TrainConfig& config);

// Linear warmup to config.lr over `warmup` steps, then linear decay to 0 at
// `steps`. step counts from 1.
double lr_schedule(std::size_t step, const TrainConfig& config);

struct LogRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double tokens_per_sec = 0.0;
  double wall_ms = 0.0;
};

struct EvalRecord {
  std::size_t step = 0;
  double dev_loss = 0.0;
};

struct TrainResult {
  std::vector<LogRecord> log;
  std::vector<EvalRecord> evals;  // evals.front() is step 0, before training
};

void write_log_header(std::ostream& os);
void write_log_record(std::ostream& os, const LogRecord& record);

// Masked-token-weighted mean MLM loss over the batches.
template <typename T>
double evaluate_mlm(const Encoder<T>& model, const std::vector<Batch>& batches);

struct TrainHooks {
  std::ostream* log_csv = nullptr;
  std::function<void(const LogRecord&)> on_step;
  std::function<void(const EvalRecord&)> on_eval;
};

// One optimizer step draws `accumulation` micro-batches; gradients are summed
// with scale 1/(masked tokens in the step) so the update equals one large
// batch. Throws TrainingDiverged on a non-finite loss.
template <typename T>
TrainResult train_loop(Encoder<T>& model, Adam<T>& optimizer,
                       BatchStream& stream, const std::vector<Batch>& dev,
                       const TrainConfig& config, const TrainHooks& hooks = {});

struct PretrainData {
  Vocab vocab;
  BatchStream stream;
  std::vector<Batch> dev;
};

// Splits documents into train/dev by config.dev_fraction (after a seeded
// shuffle), builds the vocab on the train split and prebuilds eval batches.
PretrainData prepare_pretrain_data(const std::vector<std::string>& lines,
                                   const TrainConfig& config);

ModelDims model_dims(const TrainConfig& config, std::size_t vocab_size);

struct LabeledSet {
  std::vector<std::vector<std::int32_t>> docs;
  std::vector<std::int32_t> labels;
};

LabeledSet encode_labeled(const std::vector<LabeledExample>& examples,
                          const Vocab& vocab);

struct FinetuneResult {
  std::vector<LogRecord> log;
  double train_accuracy = 0.0;
};

// Trains the classifier head and the encoder on Classify-mode batches.
template <typename T>
FinetuneResult finetune_loop(Encoder<T>& model, Adam<T>& optimizer,
                             const LabeledSet& data, const TrainConfig& config,
                             const TrainHooks& hooks = {});

template <typename T>
double classify_accuracy(const Encoder<T>& model, const LabeledSet& data,
                         std::size_t seq_len, std::size_t batch_size);

}  // namespace narrowbert
