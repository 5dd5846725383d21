#include "narrowbert/bench.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <memory>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "narrowbert/kernels.hpp"
#include "narrowbert/layout.hpp"
#include "narrowbert/model.hpp"
#include "narrowbert/random.hpp"
#include "narrowbert/training.hpp"

namespace narrowbert {

const char* to_string(BenchMode mode) {
  switch (mode) {
    case BenchMode::PretrainStep: return "pretrain-step";
    case BenchMode::InferenceForward: return "inference-forward";
    case BenchMode::ClassifyForward: return "classify-forward";
    case BenchMode::ClassifyStep: return "classify-step";
  }
  return "?";
}

std::optional<BenchMode> parse_bench_mode(std::string_view text) {
  for (BenchMode m : {BenchMode::PretrainStep, BenchMode::InferenceForward,
                      BenchMode::ClassifyForward, BenchMode::ClassifyStep}) {
    if (text == to_string(m)) return m;
  }
  return std::nullopt;
}

void BenchConfig::validate() const {
  if (layouts.empty()) throw std::invalid_argument("bench: no layouts");
  if (iterations < 5) throw std::invalid_argument("bench: iterations must be >= 5");
  if (warmup < 2) throw std::invalid_argument("bench: warmup must be >= 2");
  if (precision != 32 && precision != 64) {
    throw std::invalid_argument("bench: precision must be 32 or 64");
  }
  if (batch == 0 || batches == 0) throw std::invalid_argument("bench: empty batch");
  if (seq_len > dims.max_len) {
    throw std::invalid_argument("bench: seq_len exceeds dims.max_len");
  }
  dims.validate();
  for (const auto& text : layouts) {
    const Layout layout = parse_layout(text);
    const Mode mode = (this->mode == BenchMode::ClassifyForward ||
                       this->mode == BenchMode::ClassifyStep)
                          ? Mode::Classify
                          : Mode::Pretrain;
    if (auto v = validate_layout(layout, mode); !v.empty()) {
      throw std::invalid_argument("bench: layout " + text + ": " +
                                  v.front().message);
    }
  }
}

double mean(const std::vector<double>& xs) {
  if (xs.empty()) return 0.0;
  return std::accumulate(xs.begin(), xs.end(), 0.0) /
         static_cast<double>(xs.size());
}

double stddev(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  const double mu = mean(xs);
  double sq = 0.0;
  for (double x : xs) sq += (x - mu) * (x - mu);
  return std::sqrt(sq / static_cast<double>(xs.size() - 1));
}

namespace {

constexpr std::size_t kBenchClasses = 3;

template <typename T>
class LayoutRunner {
 public:
  LayoutRunner(const BenchConfig& config, const std::string& text)
      : config_(config),
        classify_(config.mode == BenchMode::ClassifyForward ||
                  config.mode == BenchMode::ClassifyStep),
        model_(config.dims, parse_layout(text), config.seed, 0.02,
               classify_ ? kBenchClasses : 0),
        optimizer_(model_.parameters()),
        params_(model_.parameters()) {}

  bool classify() const { return classify_; }

  void run(std::size_t i, const std::vector<Batch>& batches,
           const std::vector<std::vector<std::int32_t>>& labels) {
    const Batch& b = batches[i % batches.size()];
    switch (config_.mode) {
      case BenchMode::PretrainStep: {
        const T scale = T(1) / static_cast<T>(b.labels.size());
        sink_ = model_.mlm_step(b, scale);
        model_.finalize_gradients();
        clip_grad_norm(params_, 1.0);
        optimizer_.step(params_, 1e-4);
        break;
      }
      case BenchMode::InferenceForward: {
        const auto pass = model_.encode(b, Mode::Pretrain, false);
        sink_ = model_.mlm_logits(pass.output).data()[0];
        break;
      }
      case BenchMode::ClassifyForward: {
        const auto pass = model_.encode(b, Mode::Classify, false);
        sink_ = model_.classify_logits(pass.output).data()[0];
        break;
      }
      case BenchMode::ClassifyStep: {
        const auto& y = labels[i % labels.size()];
        sink_ = model_.classify_step(b, y, T(1) / static_cast<T>(y.size()));
        model_.finalize_gradients();
        clip_grad_norm(params_, 1.0);
        optimizer_.step(params_, 1e-4);
        break;
      }
    }
  }

 private:
  const BenchConfig& config_;
  bool classify_;
  Encoder<T> model_;
  Adam<T> optimizer_;
  std::vector<NamedParameter<T>> params_;
  volatile T sink_ = T(0);
};

// Layouts are timed round-robin, one iteration each per round, so slow drift
// in machine speed lands on every layout alike.
template <typename T>
std::vector<BenchRow> bench_layouts(
    const BenchConfig& config, const std::vector<Batch>& batches,
    const std::vector<std::vector<std::int32_t>>& labels) {
  std::vector<std::unique_ptr<LayoutRunner<T>>> runners;
  std::vector<BenchRow> rows;
  for (const auto& text : config.layouts) {
    runners.push_back(std::make_unique<LayoutRunner<T>>(config, text));
    BenchRow row;
    row.layout = text;
    row.mode = config.mode;
    rows.push_back(std::move(row));
  }
  for (auto& r : runners) {
    for (std::size_t i = 0; i < config.warmup; ++i) r->run(i, batches, labels);
  }
  for (std::size_t i = 0; i < config.iterations; ++i) {
    for (std::size_t l = 0; l < runners.size(); ++l) {
      const auto start = std::chrono::steady_clock::now();
      runners[l]->run(config.warmup + i, batches, labels);
      rows[l].samples_ms.push_back(std::chrono::duration<double, std::milli>(
                                       std::chrono::steady_clock::now() - start)
                                       .count());
    }
  }
  const double tokens = static_cast<double>(config.batch * config.seq_len);
  for (std::size_t l = 0; l < rows.size(); ++l) {
    BenchRow& row = rows[l];
    row.mean_ms = mean(row.samples_ms);
    row.std_ms = stddev(row.samples_ms);
    row.tokens_per_sec = row.mean_ms > 0.0 ? tokens / (row.mean_ms / 1000.0) : 0.0;
    const double active_frac = runners[l]->classify()
                                   ? 1.0 / static_cast<double>(config.seq_len)
                                   : config.mask_fraction;
    row.flops = estimate_flops(parse_layout(row.layout), config.dims,
                               config.seq_len, active_frac)
                    .total_narrowed;
  }
  return rows;
}

}  // namespace

BenchReport run_benchmark(const BenchConfig& config) {
  config.validate();
  // Synthetic batches and labels are built before any clock starts.
  std::vector<Batch> batches;
  std::vector<std::vector<std::int32_t>> labels;
  std::mt19937_64 rng(mix_seed(config.seed, 5));
  for (std::size_t i = 0; i < config.batches; ++i) {
    batches.push_back(synthetic_batch(config.batch, config.seq_len,
                                      config.dims.vocab, config.mask_fraction,
                                      mix_seed(config.seed, 100 + i)));
    std::vector<std::int32_t> y(config.batch);
    for (auto& v : y) {
      v = std::uniform_int_distribution<std::int32_t>(
          0, static_cast<std::int32_t>(kBenchClasses - 1))(rng);
    }
    labels.push_back(std::move(y));
  }
  BenchReport report;
  report.threads = kernels::threads();
  report.precision = config.precision;
  report.rows = config.precision == 64
                    ? bench_layouts<double>(config, batches, labels)
                    : bench_layouts<float>(config, batches, labels);
  const double base = report.rows.front().mean_ms;
  for (auto& row : report.rows) {
    row.speedup = row.mean_ms > 0.0 ? base / row.mean_ms : 0.0;
  }
  report.rows.front().speedup = 1.0;
  std::ostringstream note;
  note << "threads=" << report.threads << " precision=" << config.precision
       << " d=" << config.dims.hidden << " h=" << config.dims.heads
       << " ffn=" << config.dims.ffn << " V=" << config.dims.vocab
       << " L=" << config.seq_len << " B=" << config.batch
       << " mask=" << config.mask_fraction << " warmup=" << config.warmup
       << " iterations=" << config.iterations;
  report.note = note.str();
  return report;
}

void write_report_csv(const BenchReport& report, std::ostream& os) {
  os << "layout,mode,mean_ms,std_ms,tokens_per_sec,flops,speedup\n";
  for (const auto& r : report.rows) {
    os << '"' << r.layout << "\"," << to_string(r.mode) << ',' << std::fixed
       << std::setprecision(3) << r.mean_ms << ',' << r.std_ms << ','
       << std::setprecision(1) << r.tokens_per_sec << ',' << r.flops << ','
       << std::setprecision(3) << r.speedup << '\n'
       << std::defaultfloat;
  }
}

void write_speedup_svg(const BenchReport& report, std::ostream& os) {
  const int bar_h = 22, gap = 8, left = 180, width = 360;
  const int height = static_cast<int>(report.rows.size()) * (bar_h + gap) + 40;
  double top = 1.0;
  for (const auto& r : report.rows) top = std::max(top, r.speedup);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << left + width + 80
     << "\" height=\"" << height << "\" font-family=\"monospace\" font-size=\"12\">\n";
  os << "<text x=\"4\" y=\"16\">speedup vs " << report.rows.front().layout
     << " (" << to_string(report.rows.front().mode) << ")</text>\n";
  int y = 28;
  for (const auto& r : report.rows) {
    const int w = static_cast<int>(std::lround(width * r.speedup / top));
    os << "<text x=\"4\" y=\"" << y + 15 << "\">" << r.layout << "</text>\n";
    os << "<rect x=\"" << left << "\" y=\"" << y << "\" width=\"" << w
       << "\" height=\"" << bar_h << "\" fill=\"#4a7ab5\"/>\n";
    os << "<text x=\"" << left + w + 6 << "\" y=\"" << y + 15 << "\">"
       << std::fixed << std::setprecision(2) << r.speedup << std::defaultfloat
       << "x</text>\n";
    y += bar_h + gap;
  }
  os << "</svg>\n";
}

void emit_report(const BenchReport& report, const std::filesystem::path& csv_path,
                 const std::optional<std::filesystem::path>& svg_path) {
  {
    std::ofstream out(csv_path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + csv_path.string());
    write_report_csv(report, out);
    if (!out) throw std::runtime_error("write failed: " + csv_path.string());
  }
  if (svg_path) {
    std::ofstream out(*svg_path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + svg_path->string());
    write_speedup_svg(report, out);
  }
}

}  // namespace narrowbert
