#include "narrowbert/verify.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include "narrowbert/kernels.hpp"
#include "narrowbert/layout.hpp"
#include "narrowbert/model.hpp"
#include "narrowbert/random.hpp"
#include "narrowbert/reference.hpp"

namespace narrowbert::verify {

namespace {

class SingleThread {
 public:
  SingleThread() : saved_(kernels::threads()) { kernels::set_threads(1); }
  ~SingleThread() { kernels::set_threads(saved_); }
  SingleThread(const SingleThread&) = delete;
  SingleThread& operator=(const SingleThread&) = delete;

 private:
  int saved_;
};

bool bit_equal(const Tensor<double>& a, const Tensor<double>& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(),
                     a.size() * sizeof(double)) == 0;
}

std::string mismatch(const Tensor<double>& got, const Tensor<double>& want) {
  std::ostringstream os;
  if (got.shape() != want.shape()) {
    os << "shape " << shape_to_string(got.shape()) << " vs "
       << shape_to_string(want.shape());
    return os.str();
  }
  for (std::size_t i = 0; i < got.size(); ++i) {
    if (std::memcmp(&got.data()[i], &want.data()[i], sizeof(double)) != 0) {
      os.precision(17);
      os << "element " << i << ": " << got.data()[i] << " vs "
         << want.data()[i];
      break;
    }
  }
  return os.str();
}

Tensor<double> random_tensor(std::mt19937_64& rng, std::vector<std::size_t> shape) {
  Tensor<double> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, 1.0);
  for (auto& x : t.data()) x = dist(rng);
  return t;
}

// Sorted distinct positions in [0, len), count of them.
std::vector<std::size_t> random_subset(std::mt19937_64& rng, std::size_t len,
                                       std::size_t count) {
  std::vector<std::size_t> all(len), out;
  std::iota(all.begin(), all.end(), std::size_t{0});
  std::sample(all.begin(), all.end(), std::back_inserter(out), count, rng);
  return out;
}

struct Trial {
  std::string layout;
  ModelDims dims;
  Encoder<double> model;
  Batch batch;
};

Trial make_trial(const EquivOptions& opts, Family family, std::size_t index) {
  std::mt19937_64 rng(mix_seed(opts.seed, index));
  std::string text = random_layout(rng, family);
  ModelDims dims = random_dims(rng, opts.max_hidden, opts.max_len);
  Encoder<double> model(dims, parse_layout(text), rng(), 0.02);
  model.perturb(rng(), 0.3);
  std::uniform_int_distribution<std::size_t> len(4, opts.max_len);
  std::uniform_int_distribution<std::size_t> rows(1, opts.max_batch);
  std::uniform_real_distribution<double> frac(0.15, 0.5);
  const std::size_t l = len(rng), b = rows(rng);
  Batch batch = random_batch(rng, b, l, dims.vocab, frac(rng));
  return {std::move(text), dims, std::move(model), std::move(batch)};
}

template <typename Fn>
CheckResult run_trials(std::string name, const EquivOptions& opts, Fn&& fn) {
  SingleThread guard;
  CheckResult result{std::move(name), true, 0, {}};
  for (std::size_t t = 0; t < opts.trials; ++t) {
    ++result.trials;
    std::string failure = fn(t);
    if (!failure.empty()) {
      result.passed = false;
      result.detail = "trial " + std::to_string(t) + ": " + failure;
      break;
    }
  }
  return result;
}

}  // namespace

std::string random_layout(std::mt19937_64& rng, Family family,
                          std::size_t max_prefix, std::size_t max_tail) {
  std::uniform_int_distribution<std::size_t> prefix_len(2, std::max<std::size_t>(2, max_prefix));
  std::uniform_int_distribution<std::size_t> tail_len(1, max_tail);
  std::bernoulli_distribution coin(0.5);
  std::string prefix(prefix_len(rng), 'f');
  for (auto& c : prefix) c = coin(rng) ? 's' : 'f';
  if (prefix.find('s') == std::string::npos) prefix[0] = 's';
  if (prefix.find('f') == std::string::npos) prefix.back() = 'f';
  std::string tail(tail_len(rng), 'f');
  if (family == Family::SparseQueries) {
    for (auto& c : tail) c = coin(rng) ? 's' : 'f';
    if (tail.find('s') == std::string::npos) {
      tail[std::uniform_int_distribution<std::size_t>(0, tail.size() - 1)(rng)] = 's';
    }
  }
  return prefix + ":" + tail;
}

ModelDims random_dims(std::mt19937_64& rng, std::size_t max_hidden,
                      std::size_t max_len) {
  std::vector<std::size_t> widths;
  for (std::size_t w = 8; w <= max_hidden; w *= 2) widths.push_back(w);
  if (widths.empty()) widths.push_back(max_hidden);
  ModelDims dims;
  dims.hidden = widths[std::uniform_int_distribution<std::size_t>(
      0, widths.size() - 1)(rng)];
  const std::size_t head_options[] = {1, 2, 4};
  do {
    dims.heads = head_options[std::uniform_int_distribution<int>(0, 2)(rng)];
  } while (dims.hidden % dims.heads != 0);
  dims.ffn = dims.hidden * std::uniform_int_distribution<std::size_t>(1, 4)(rng);
  dims.vocab = std::uniform_int_distribution<std::size_t>(
      Vocab::kNumSpecial + 8, 64)(rng);
  dims.max_len = max_len;
  dims.ln_eps = 1e-12;
  return dims;
}

Batch random_batch(std::mt19937_64& rng, std::size_t batch_size,
                   std::size_t seq_len, std::size_t vocab,
                   double mask_fraction) {
  MaskingPolicy policy;
  policy.mask_fraction = mask_fraction;
  const std::size_t valid = std::uniform_int_distribution<std::size_t>(
      std::min<std::size_t>(seq_len, 4), seq_len)(rng);
  std::uniform_int_distribution<std::int32_t> word(
      static_cast<std::int32_t>(Vocab::kNumSpecial),
      static_cast<std::int32_t>(vocab - 1));
  std::vector<std::vector<std::int32_t>> docs(batch_size);
  for (auto& doc : docs) {
    doc.resize(valid - 2);
    for (auto& w : doc) w = word(rng);
  }
  const std::uint64_t seed = rng();
  return apply_masking(build_batch(docs, seq_len, policy, seed), policy, vocab,
                       seed);
}

CheckResult check_narrow_exactness(const EquivOptions& opts) {
  return run_trials("narrow-exactness", opts, [&](std::size_t t) {
    Trial trial = make_trial(opts, Family::ContextFirst, t);
    const auto got = trial.model.encode(trial.batch, Mode::Pretrain, false).output;
    const auto want = reference_encode(trial.model, trial.batch, Mode::Pretrain,
                                       /*freeze_at_marker=*/false);
    return bit_equal(got, want) ? std::string{}
                                : trial.layout + ": " + mismatch(got, want);
  });
}

CheckResult check_frozen_kv(const EquivOptions& opts) {
  return run_trials("frozen-kv", opts, [&](std::size_t t) {
    Trial trial = make_trial(opts, Family::SparseQueries, 1000 + t);
    const auto got = trial.model.encode(trial.batch, Mode::Pretrain, false).output;
    const auto want = reference_encode(trial.model, trial.batch, Mode::Pretrain);
    return bit_equal(got, want) ? std::string{}
                                : trial.layout + ": " + mismatch(got, want);
  });
}

CheckResult check_all_positions(const EquivOptions& opts) {
  return run_trials("all-positions", opts, [&](std::size_t t) {
    Trial trial = make_trial(opts, Family::SparseQueries, 2000 + t);
    Batch& b = trial.batch;
    b.masked_per_row = b.seq_len;
    b.masked_positions.clear();
    b.labels.clear();
    for (std::size_t r = 0; r < b.batch_size; ++r) {
      for (std::size_t p = 0; p < b.seq_len; ++p) {
        b.masked_positions.push_back(p);
        b.labels.push_back(b.ids[r * b.seq_len + p]);
      }
    }
    const auto got = trial.model.encode(b, Mode::Pretrain, false).output;
    const auto want = reference_encode_all(trial.model, b);
    return bit_equal(got, want) ? std::string{}
                                : trial.layout + ": " + mismatch(got, want);
  });
}

CheckResult check_masked_set_independence(const EquivOptions& opts) {
  return run_trials("masked-set-independence", opts, [&](std::size_t t) {
    Trial trial = make_trial(opts, Family::ContextFirst, 3000 + t);
    std::mt19937_64 rng(mix_seed(opts.seed, 3500 + t));
    const Batch& first = trial.batch;
    Batch second = first;
    const std::size_t m = first.masked_per_row;
    std::vector<std::size_t> keep_first(first.batch_size),
        keep_second(first.batch_size);
    second.masked_positions.clear();
    for (std::size_t r = 0; r < first.batch_size; ++r) {
      const auto pos = first.row_positions(r);
      const std::size_t kept_index =
          std::uniform_int_distribution<std::size_t>(0, m - 1)(rng);
      const std::size_t kept = pos[kept_index];
      keep_first[r] = r * m + kept_index;
      std::vector<std::size_t> others;
      for (std::size_t p = 1; p + 1 < first.valid_len(r); ++p) {
        if (p != kept) others.push_back(p);
      }
      std::vector<std::size_t> chosen;
      std::sample(others.begin(), others.end(), std::back_inserter(chosen),
                  m - 1, rng);
      chosen.push_back(kept);
      std::sort(chosen.begin(), chosen.end());
      const auto at = std::find(chosen.begin(), chosen.end(), kept);
      keep_second[r] = r * m + static_cast<std::size_t>(at - chosen.begin());
      second.masked_positions.insert(second.masked_positions.end(),
                                     chosen.begin(), chosen.end());
    }
    const auto a = trial.model.encode(first, Mode::Pretrain, false).output;
    const auto b = trial.model.encode(second, Mode::Pretrain, false).output;
    const auto ra = ops::gather_rows(a, keep_first);
    const auto rb = ops::gather_rows(b, keep_second);
    return bit_equal(ra, rb) ? std::string{}
                             : trial.layout + ": " + mismatch(ra, rb);
  });
}

CheckResult check_attention_permutation(const EquivOptions& opts) {
  return run_trials("attention-permutation", opts, [&](std::size_t t) {
    std::mt19937_64 rng(mix_seed(opts.seed, 4000 + t));
    const ModelDims dims = random_dims(rng, opts.max_hidden, opts.max_len);
    Encoder<double> model(dims, parse_layout("s"), rng(), 0.02);
    model.perturb(rng(), 0.3);
    const std::size_t l = std::uniform_int_distribution<std::size_t>(
        2, opts.max_len)(rng);
    const std::size_t b = std::uniform_int_distribution<std::size_t>(
        1, opts.max_batch)(rng);
    const std::size_t m = std::uniform_int_distribution<std::size_t>(1, l)(rng);
    const auto xkv = random_tensor(rng, {b * l, dims.hidden});
    const auto xq = random_tensor(rng, {b * m, dims.hidden});
    std::vector<std::uint8_t> valid(b * l, 1);
    std::vector<std::size_t> perm(b * m);
    for (std::size_t r = 0; r < b; ++r) {
      auto first = perm.begin() + static_cast<std::ptrdiff_t>(r * m);
      std::iota(first, first + static_cast<std::ptrdiff_t>(m), r * m);
      std::shuffle(first, first + static_cast<std::ptrdiff_t>(m), rng);
    }
    const double eps = dims.ln_eps;
    const auto& layer = model.attention[0];
    const auto base = attention_core<double>(layer, xq, m, xkv, l, b, valid,
                                             dims.heads, eps, nullptr);
    const auto permuted = attention_core<double>(
        layer, ops::gather_rows(xq, perm), m, xkv, l, b, valid, dims.heads,
        eps, nullptr);
    const auto want = ops::gather_rows(base, perm);
    return bit_equal(permuted, want) ? std::string{} : mismatch(permuted, want);
  });
}

CheckResult check_wide_vs_narrow_attention(const EquivOptions& opts) {
  return run_trials("wide-vs-narrow-attention", opts, [&](std::size_t t) {
    std::mt19937_64 rng(mix_seed(opts.seed, 5000 + t));
    const ModelDims dims = random_dims(rng, opts.max_hidden, opts.max_len);
    Encoder<double> model(dims, parse_layout("s"), rng(), 0.02);
    model.perturb(rng(), 0.3);
    const std::size_t l = std::uniform_int_distribution<std::size_t>(
        2, opts.max_len)(rng);
    const std::size_t b = std::uniform_int_distribution<std::size_t>(
        1, opts.max_batch)(rng);
    const std::size_t m = std::uniform_int_distribution<std::size_t>(1, l)(rng);
    const auto x = random_tensor(rng, {b * l, dims.hidden});
    std::vector<std::uint8_t> valid(b * l, 1);
    std::vector<std::size_t> rows;
    for (std::size_t r = 0; r < b; ++r) {
      // trailing keys padded out, at least one stays valid
      const std::size_t pad = std::uniform_int_distribution<std::size_t>(
          0, l - 1)(rng);
      for (std::size_t p = l - pad; p < l; ++p) valid[r * l + p] = 0;
      for (std::size_t p : random_subset(rng, l, m)) rows.push_back(r * l + p);
    }
    const double eps = dims.ln_eps;
    const auto& layer = model.attention[0];
    const auto wide = attention_core<double>(layer, x, l, x, l, b, valid,
                                             dims.heads, eps, nullptr);
    const auto narrow = attention_core<double>(
        layer, ops::gather_rows(x, rows), m, x, l, b, valid, dims.heads, eps,
        nullptr);
    const auto want = ops::gather_rows(wide, rows);
    return bit_equal(narrow, want) ? std::string{} : mismatch(narrow, want);
  });
}

CheckResult check_feedforward_positionwise(const EquivOptions& opts) {
  return run_trials("feedforward-positionwise", opts, [&](std::size_t t) {
    std::mt19937_64 rng(mix_seed(opts.seed, 6000 + t));
    const ModelDims dims = random_dims(rng, opts.max_hidden, opts.max_len);
    Encoder<double> model(dims, parse_layout("sf"), rng(), 0.02);
    model.perturb(rng(), 0.3);
    const std::size_t r = std::uniform_int_distribution<std::size_t>(
        1, opts.max_len * opts.max_batch)(rng);
    const auto x = random_tensor(rng, {r, dims.hidden});
    const auto rows = random_subset(
        rng, r, std::uniform_int_distribution<std::size_t>(1, r)(rng));
    const double eps = dims.ln_eps;
    const auto& layer = model.feedforward[0];
    const auto full = feedforward_core<double>(layer, x, eps, nullptr);
    const auto part =
        feedforward_core<double>(layer, ops::gather_rows(x, rows), eps, nullptr);
    const auto want = ops::gather_rows(full, rows);
    return bit_equal(part, want) ? std::string{} : mismatch(part, want);
  });
}

CheckResult check_classify_narrowing(const EquivOptions& opts) {
  return run_trials("classify-narrowing", opts, [&](std::size_t t) {
    const Family family = t % 2 == 0 ? Family::SparseQueries : Family::ContextFirst;
    Trial trial = make_trial(opts, family, 7000 + t);
    const auto got = trial.model.encode(trial.batch, Mode::Classify, false).output;
    const auto want = reference_encode(trial.model, trial.batch, Mode::Classify);
    return bit_equal(got, want) ? std::string{}
                                : trial.layout + ": " + mismatch(got, want);
  });
}

std::vector<CheckResult> run_equivalence_suite(const EquivOptions& opts) {
  return {check_narrow_exactness(opts),        check_frozen_kv(opts),
          check_all_positions(opts),           check_masked_set_independence(opts),
          check_attention_permutation(opts),   check_wide_vs_narrow_attention(opts),
          check_feedforward_positionwise(opts), check_classify_narrowing(opts)};
}

// --- gradient checks --------------------------------------------------------

bool GradCheckReport::passed() const {
  return std::all_of(groups.begin(), groups.end(),
                     [](const GroupError& g) { return g.passed; });
}

double GradCheckReport::worst() const {
  double w = 0.0;
  for (const auto& g : groups) w = std::max(w, g.rel_error);
  return w;
}

namespace {

template <typename Loss, typename Step>
GradCheckReport compare_gradients(Encoder<double>& model, Loss&& loss,
                                  Step&& step, const GradCheckOptions& opts) {
  model.zero_grad();
  step();
  model.finalize_gradients();
  GradCheckReport report;
  for (auto& named : model.parameters()) {
    Parameter<double>& p = *named.param;
    GroupError g;
    g.name = named.name;
    g.entries = p.value.size();
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      double& v = p.value.data()[i];
      const double saved = v;
      v = saved + opts.step;
      const double up = loss();
      v = saved - opts.step;
      const double down = loss();
      v = saved;
      const double numeric = (up - down) / (2.0 * opts.step);
      const double analytic = p.grad.data()[i];
      diff2 += (analytic - numeric) * (analytic - numeric);
      a2 += analytic * analytic;
      n2 += numeric * numeric;
    }
    g.analytic_norm = std::sqrt(a2);
    g.numeric_norm = std::sqrt(n2);
    const double scale = std::max(g.analytic_norm, g.numeric_norm);
    if (scale < 1e-9) {
      g.rel_error = 0.0;
    } else {
      g.rel_error = std::sqrt(diff2) / scale;
    }
    g.passed = g.rel_error < opts.tolerance;
    report.groups.push_back(std::move(g));
  }
  model.zero_grad();
  return report;
}

}  // namespace

GradCheckReport gradcheck_mlm(const std::string& layout,
                              const GradCheckOptions& opts) {
  SingleThread guard;
  std::mt19937_64 rng(opts.seed);
  Encoder<double> model(opts.dims, parse_layout(layout), rng(), 0.02);
  model.perturb(rng(), opts.perturb_std);
  const Batch batch =
      random_batch(rng, opts.batch, opts.seq_len, opts.dims.vocab, 0.3);
  const double scale = 1.0 / static_cast<double>(batch.labels.size());
  GradCheckReport report = compare_gradients(
      model, [&] { return model.mlm_loss(batch); },
      [&] { model.mlm_step(batch, scale); }, opts);
  report.variant = "mlm";
  report.layout = layout;
  return report;
}

GradCheckReport gradcheck_classify(const std::string& layout,
                                   std::size_t num_classes,
                                   const GradCheckOptions& opts) {
  SingleThread guard;
  std::mt19937_64 rng(opts.seed);
  Encoder<double> model(opts.dims, parse_layout(layout), rng(), 0.02,
                        num_classes);
  model.perturb(rng(), opts.perturb_std);
  const Batch batch =
      random_batch(rng, opts.batch, opts.seq_len, opts.dims.vocab, 0.3);
  std::vector<std::int32_t> labels(batch.batch_size);
  std::uniform_int_distribution<std::int32_t> cls(
      0, static_cast<std::int32_t>(num_classes - 1));
  for (auto& y : labels) y = cls(rng);
  const double scale = 1.0 / static_cast<double>(labels.size());
  GradCheckReport report = compare_gradients(
      model, [&] { return model.classify_loss(batch, labels); },
      [&] { model.classify_step(batch, labels, scale); }, opts);
  report.variant = "classify";
  report.layout = layout;
  return report;
}

std::vector<GradCheckReport> run_gradcheck_suite(const GradCheckOptions& opts) {
  std::vector<GradCheckReport> out;
  // With one attention layer after ':' the frozen source equals the current
  // hidden state; "sf:ssf" makes the second layer read a stale source.
  for (const char* layout : {"sfsf", "sfs:f", "sf:sf", "sf:ssf"}) {
    out.push_back(gradcheck_mlm(layout, opts));
  }
  out.push_back(gradcheck_classify("sf:sf", 3, opts));
  return out;
}

}  // namespace narrowbert::verify
