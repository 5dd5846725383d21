#include "narrowbert/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>

#include "narrowbert/random.hpp"

namespace narrowbert {

template <typename T>
Adam<T>::Adam(const std::vector<NamedParameter<T>>& params, AdamConfig config)
    : config_(config) {
  for (const auto& p : params) {
    m_.emplace_back(p.param->value.shape());
    v_.emplace_back(p.param->value.shape());
  }
}

template <typename T>
void Adam<T>::step(const std::vector<NamedParameter<T>>& params, double lr) {
  if (params.size() != m_.size()) {
    throw std::invalid_argument("adam: parameter list changed size");
  }
  for (const auto& p : params) {
    for (T g : p.param->grad.data()) {
      if (!std::isfinite(g)) throw NonFiniteGradient(p.name);
    }
  }
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto value = params[i].param->value.data();
    auto grad = params[i].param->grad.data();
    auto m = m_[i].data();
    auto v = v_[i].data();
    for (std::size_t j = 0; j < value.size(); ++j) {
      const double g = static_cast<double>(grad[j]);
      const double mj = b1 * static_cast<double>(m[j]) + (1.0 - b1) * g;
      const double vj = b2 * static_cast<double>(v[j]) + (1.0 - b2) * g * g;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double update =
          lr * (mj / c1) / (std::sqrt(vj / c2) + config_.eps);
      value[j] = static_cast<T>(static_cast<double>(value[j]) - update);
      grad[j] = T(0);
    }
  }
}

template <typename T>
double clip_grad_norm(const std::vector<NamedParameter<T>>& params,
                      double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    for (T g : p.param->grad.data()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const T scale = static_cast<T>(max_norm / norm);
    for (const auto& p : params) {
      for (T& g : p.param->grad.data()) g *= scale;
    }
  }
  return norm;
}

void TrainConfig::validate() const {
  auto need = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(what);
  };
  need(lr > 0.0 && std::isfinite(lr), "lr must be > 0");
  need(steps >= 1, "steps must be >= 1");
  need(warmup >= 1, "warmup must be >= 1");
  need(micro_batch >= 1, "micro_batch must be >= 1");
  need(accumulation >= 1, "accumulation must be >= 1");
  need(precision == 32 || precision == 64, "precision must be 32 or 64");
  need(seq_len >= 4, "seq_len must be >= 4");
  need(clip > 0.0, "clip must be > 0");
  need(eval_every >= 1, "eval_every must be >= 1");
  need(eval_batches >= 1, "eval_batches must be >= 1");
  need(dev_fraction > 0.0 && dev_fraction < 1.0,
       "dev_fraction must be in (0, 1)");
  need(mask_fraction > 0.0 && mask_fraction < 1.0,
       "mask_fraction must be in (0, 1)");
  need(hidden >= 1 && heads >= 1 && hidden % heads == 0,
       "hidden must be a multiple of heads");
  need(ffn >= 1, "ffn must be >= 1");
  need(vocab_size > Vocab::kNumSpecial, "vocab_size must exceed 5");
  need(num_classes >= 2, "num_classes must be >= 2");
  need(toy_lines >= 1, "toy_lines must be >= 1");
}

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

template <typename V>
V parse_number(const std::string& key, const std::string& text,
               std::size_t line) {
  std::istringstream is(text);
  V v{};
  is >> v;
  if (!is || !is.eof()) {
    throw ConfigError("line " + std::to_string(line) + ": bad value '" + text +
                      "' for " + key);
  }
  return v;
}

}  // namespace

void apply_config_text(TrainConfig& c, const std::string& text) {
  std::istringstream in(text);
  std::string raw;
  for (std::size_t line = 1; std::getline(in, raw); ++line) {
    if (const auto hash = raw.find('#'); hash != std::string::npos) {
      raw.erase(hash);
    }
    raw = trim(raw);
    if (raw.empty()) continue;
    const auto eq = raw.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line) + ": expected key = value");
    }
    const std::string key = trim(raw.substr(0, eq));
    const std::string value = trim(raw.substr(eq + 1));
    auto size = [&] { return parse_number<std::size_t>(key, value, line); };
    auto real = [&] { return parse_number<double>(key, value, line); };
    if (key == "lr") c.lr = real();
    else if (key == "warmup") c.warmup = size();
    else if (key == "steps") c.steps = size();
    else if (key == "micro_batch") c.micro_batch = size();
    else if (key == "accumulation") c.accumulation = size();
    else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, value, line);
    else if (key == "precision") c.precision = parse_number<int>(key, value, line);
    else if (key == "seq_len") c.seq_len = size();
    else if (key == "clip") c.clip = real();
    else if (key == "mask_fraction") c.mask_fraction = real();
    else if (key == "eval_every") c.eval_every = size();
    else if (key == "eval_batches") c.eval_batches = size();
    else if (key == "dev_fraction") c.dev_fraction = real();
    else if (key == "layout") c.layout = value;
    else if (key == "hidden") c.hidden = size();
    else if (key == "heads") c.heads = size();
    else if (key == "ffn") c.ffn = size();
    else if (key == "vocab_size") c.vocab_size = size();
    else if (key == "corpus") c.corpus = value;
    else if (key == "toy_lines") c.toy_lines = size();
    else if (key == "num_classes") c.num_classes = size();
    else {
      throw ConfigError("line " + std::to_string(line) + ": unknown key '" +
                        key + "'");
    }
  }
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  TrainConfig c;
  apply_config_text(c, text.str());
  return c;
}

std::string format_config(const TrainConfig& c) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "lr = " << c.lr << "\nwarmup = " << c.warmup << "\nsteps = " << c.steps
     << "\nmicro_batch = " << c.micro_batch
     << "\naccumulation = " << c.accumulation << "\nseed = " << c.seed
     << "\nprecision = " << c.precision << "\nseq_len = " << c.seq_len
     << "\nclip = " << c.clip << "\nmask_fraction = " << c.mask_fraction
     << "\neval_every = " << c.eval_every
     << "\neval_batches = " << c.eval_batches
     << "\ndev_fraction = " << c.dev_fraction << "\nlayout = " << c.layout
     << "\nhidden = " << c.hidden << "\nheads = " << c.heads
     << "\nffn = " << c.ffn << "\nvocab_size = " << c.vocab_size
     << "\ntoy_lines = " << c.toy_lines
     << "\nnum_classes = " << c.num_classes << "\n";
  if (!c.corpus.empty()) os << "corpus = " << c.corpus << "\n";
  return os.str();
}

double lr_schedule(std::size_t step, const TrainConfig& c) {
  if (step == 0) throw std::invalid_argument("lr_schedule: step counts from 1");
  if (step <= c.warmup) {
    return c.lr * static_cast<double>(step) / static_cast<double>(c.warmup);
  }
  if (step >= c.steps) return 0.0;
  return c.lr * static_cast<double>(c.steps - step) /
         static_cast<double>(c.steps - c.warmup);
}

void write_log_header(std::ostream& os) {
  os << "step,loss,lr,tokens_per_sec,wall_ms\n";
}

void write_log_record(std::ostream& os, const LogRecord& r) {
  os << r.step << ',' << std::setprecision(9) << r.loss << ','
     << std::setprecision(9) << r.lr << ',' << std::fixed
     << std::setprecision(1) << r.tokens_per_sec << ',' << std::setprecision(3)
     << r.wall_ms << '\n'
     << std::defaultfloat;
}

template <typename T>
double evaluate_mlm(const Encoder<T>& model, const std::vector<Batch>& batches) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& b : batches) {
    total += static_cast<double>(model.mlm_loss(b)) *
             static_cast<double>(b.labels.size());
    count += b.labels.size();
  }
  if (count == 0) throw std::invalid_argument("evaluate_mlm: no batches");
  return total / static_cast<double>(count);
}

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point since) {
  return std::chrono::duration<double, std::milli>(Clock::now() - since).count();
}

std::size_t valid_tokens(const Batch& b) {
  return static_cast<std::size_t>(
      std::count(b.validity.begin(), b.validity.end(), std::uint8_t{1}));
}

}  // namespace

template <typename T>
TrainResult train_loop(Encoder<T>& model, Adam<T>& optimizer,
                       BatchStream& stream, const std::vector<Batch>& dev,
                       const TrainConfig& config, const TrainHooks& hooks) {
  config.validate();
  TrainResult result;
  const auto params = model.parameters();
  auto eval = [&](std::size_t step) {
    if (dev.empty()) return;
    const EvalRecord rec{step, evaluate_mlm(model, dev)};
    result.evals.push_back(rec);
    if (hooks.on_eval) hooks.on_eval(rec);
  };
  if (hooks.log_csv) write_log_header(*hooks.log_csv);
  eval(0);
  const auto start = Clock::now();
  model.zero_grad();
  for (std::size_t step = 1; step <= config.steps; ++step) {
    const auto step_start = Clock::now();
    std::vector<Batch> micro;
    std::size_t masked = 0, tokens = 0;
    for (std::size_t k = 0; k < config.accumulation; ++k) {
      micro.push_back(stream.next());
      masked += micro.back().labels.size();
      tokens += valid_tokens(micro.back());
    }
    const T scale = T(1) / static_cast<T>(masked);
    double loss = 0.0;
    for (const auto& b : micro) {
      loss += static_cast<double>(model.mlm_step(b, scale)) *
              static_cast<double>(b.labels.size());
    }
    loss /= static_cast<double>(masked);
    if (!std::isfinite(loss)) {
      std::ostringstream os;
      os << "non-finite loss " << loss << " at step " << step << " (lr "
         << lr_schedule(step, config) << ", layout " << render_layout(model.layout())
         << ")";
      throw TrainingDiverged(os.str());
    }
    model.finalize_gradients();
    clip_grad_norm(params, config.clip);
    const double lr = lr_schedule(step, config);
    optimizer.step(params, lr);
    const double step_ms = elapsed_ms(step_start);
    LogRecord rec;
    rec.step = step;
    rec.loss = loss;
    rec.lr = lr;
    rec.tokens_per_sec =
        step_ms > 0.0 ? static_cast<double>(tokens) / (step_ms / 1000.0) : 0.0;
    rec.wall_ms = elapsed_ms(start);
    result.log.push_back(rec);
    if (hooks.log_csv) write_log_record(*hooks.log_csv, rec);
    if (hooks.on_step) hooks.on_step(rec);
    if (step % config.eval_every == 0 || step == config.steps) eval(step);
  }
  return result;
}

ModelDims model_dims(const TrainConfig& c, std::size_t vocab_size) {
  ModelDims d;
  d.hidden = c.hidden;
  d.heads = c.heads;
  d.ffn = c.ffn;
  d.vocab = vocab_size;
  d.max_len = c.seq_len;
  return d;
}

PretrainData prepare_pretrain_data(const std::vector<std::string>& lines,
                                   const TrainConfig& config) {
  config.validate();
  std::vector<std::string> docs;
  for (const auto& l : lines) {
    if (!tokenize(l).empty()) docs.push_back(l);
  }
  if (docs.size() < 2) {
    throw std::invalid_argument("corpus needs at least two non-empty lines");
  }
  std::mt19937_64 rng(mix_seed(config.seed, 17));
  std::shuffle(docs.begin(), docs.end(), rng);
  const auto dev_count = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::lround(config.dev_fraction *
                                           static_cast<double>(docs.size()))),
      1, docs.size() - 1);
  const std::vector<std::string> dev_lines(docs.end() - static_cast<std::ptrdiff_t>(dev_count),
                                           docs.end());
  docs.resize(docs.size() - dev_count);

  MaskingPolicy policy;
  policy.mask_fraction = config.mask_fraction;
  Vocab vocab = build_vocab(docs, config.vocab_size);
  BatchStream stream = make_batches(docs, vocab, config.seq_len,
                                    config.micro_batch, config.seed, policy);
  BatchStream dev_stream =
      make_batches(dev_lines, vocab, config.seq_len, config.micro_batch,
                   mix_seed(config.seed, 23), policy);
  std::vector<Batch> dev;
  for (std::size_t i = 0; i < config.eval_batches; ++i) {
    dev.push_back(dev_stream.next());
  }
  return {std::move(vocab), std::move(stream), std::move(dev)};
}

LabeledSet encode_labeled(const std::vector<LabeledExample>& examples,
                          const Vocab& vocab) {
  LabeledSet set;
  for (const auto& ex : examples) {
    set.docs.push_back(vocab.encode(ex.text));
    set.labels.push_back(ex.label);
  }
  return set;
}

template <typename T>
FinetuneResult finetune_loop(Encoder<T>& model, Adam<T>& optimizer,
                             const LabeledSet& data, const TrainConfig& config,
                             const TrainHooks& hooks) {
  config.validate();
  if (data.docs.empty()) throw std::invalid_argument("finetune: no examples");
  if (!model.classifier) throw std::invalid_argument("finetune: no classifier");
  for (std::int32_t y : data.labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= model.num_classes()) {
      throw std::out_of_range("finetune: label " + std::to_string(y) +
                              " outside " + std::to_string(model.num_classes()) +
                              " classes");
    }
  }
  FinetuneResult result;
  const auto params = model.parameters();
  std::vector<std::size_t> order(data.docs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(mix_seed(config.seed, 31));
  std::size_t cursor = order.size();
  if (hooks.log_csv) write_log_header(*hooks.log_csv);
  const auto start = Clock::now();
  model.zero_grad();
  for (std::size_t step = 1; step <= config.steps; ++step) {
    const auto step_start = Clock::now();
    std::vector<std::vector<std::int32_t>> docs;
    std::vector<std::int32_t> labels;
    const std::size_t total = config.micro_batch * config.accumulation;
    std::vector<Batch> micro;
    std::vector<std::vector<std::int32_t>> micro_labels;
    std::size_t tokens = 0;
    for (std::size_t k = 0; k < config.accumulation; ++k) {
      docs.clear();
      labels.clear();
      for (std::size_t i = 0; i < config.micro_batch; ++i) {
        if (cursor == order.size()) {
          std::shuffle(order.begin(), order.end(), rng);
          cursor = 0;
        }
        docs.push_back(data.docs[order[cursor]]);
        labels.push_back(data.labels[order[cursor]]);
        ++cursor;
      }
      micro.push_back(build_classify_batch(docs, config.seq_len));
      micro_labels.push_back(labels);
      tokens += valid_tokens(micro.back());
    }
    const T scale = T(1) / static_cast<T>(total);
    double loss = 0.0;
    for (std::size_t k = 0; k < micro.size(); ++k) {
      loss += static_cast<double>(
                  model.classify_step(micro[k], micro_labels[k], scale)) *
              static_cast<double>(micro_labels[k].size());
    }
    loss /= static_cast<double>(total);
    if (!std::isfinite(loss)) {
      throw TrainingDiverged("non-finite finetune loss at step " +
                             std::to_string(step));
    }
    model.finalize_gradients();
    clip_grad_norm(params, config.clip);
    const double lr = lr_schedule(step, config);
    optimizer.step(params, lr);
    const double step_ms = elapsed_ms(step_start);
    LogRecord rec{step, loss, lr,
                  step_ms > 0.0 ? static_cast<double>(tokens) / (step_ms / 1000.0)
                                : 0.0,
                  elapsed_ms(start)};
    result.log.push_back(rec);
    if (hooks.log_csv) write_log_record(*hooks.log_csv, rec);
    if (hooks.on_step) hooks.on_step(rec);
  }
  result.train_accuracy =
      classify_accuracy(model, data, config.seq_len, config.micro_batch);
  return result;
}

template <typename T>
double classify_accuracy(const Encoder<T>& model, const LabeledSet& data,
                         std::size_t seq_len, std::size_t batch_size) {
  if (data.docs.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.docs.size(); i += batch_size) {
    const std::size_t end = std::min(data.docs.size(), i + batch_size);
    const std::vector<std::vector<std::int32_t>> docs(
        data.docs.begin() + static_cast<std::ptrdiff_t>(i),
        data.docs.begin() + static_cast<std::ptrdiff_t>(end));
    const auto pred = model.classify_predict(build_classify_batch(docs, seq_len));
    for (std::size_t j = 0; j < pred.size(); ++j) {
      correct += pred[j] == data.labels[i + j];
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.docs.size());
}

#define NARROWBERT_INSTANTIATE_TRAINING(T)                                     \
  template class Adam<T>;                                                      \
  template double clip_grad_norm(const std::vector<NamedParameter<T>>&,        \
                                 double);                                      \
  template double evaluate_mlm(const Encoder<T>&, const std::vector<Batch>&);  \
  template TrainResult train_loop(Encoder<T>&, Adam<T>&, BatchStream&,         \
                                  const std::vector<Batch>&,                   \
                                  const TrainConfig&, const TrainHooks&);      \
  template FinetuneResult finetune_loop(Encoder<T>&, Adam<T>&,                 \
                                        const LabeledSet&, const TrainConfig&, \
                                        const TrainHooks&);                    \
  template double classify_accuracy(const Encoder<T>&, const LabeledSet&,      \
                                    std::size_t, std::size_t);

NARROWBERT_INSTANTIATE_TRAINING(float)
NARROWBERT_INSTANTIATE_TRAINING(double)

#undef NARROWBERT_INSTANTIATE_TRAINING

}  // namespace narrowbert
