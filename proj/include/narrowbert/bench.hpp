#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "narrowbert/dims.hpp"

namespace narrowbert {

enum class BenchMode {
  PretrainStep,      // forward + backward + Adam on masked batches
  InferenceForward,  // MLM forward at the masked positions
  ClassifyForward,   // [CLS]-narrowed forward + classifier head
  ClassifyStep,      // ClassifyForward + backward + Adam (finetune analog)
};

const char* to_string(BenchMode mode);
std::optional<BenchMode> parse_bench_mode(std::string_view text);

struct BenchConfig {
  std::vector<std::string> layouts;  // layouts[0] is the speedup baseline
  ModelDims dims{128, 4, 512, 1000, 128, 1e-12};
  std::size_t seq_len = 128;
  std::size_t batch = 4;
  double mask_fraction = 0.15;
  BenchMode mode = BenchMode::PretrainStep;
  std::size_t warmup = 2;
  std::size_t iterations = 5;
  int precision = 32;
  std::uint64_t seed = 1;
  std::size_t batches = 4;  // distinct synthetic batches, cycled

  void validate() const;
};

struct BenchRow {
  std::string layout;
  BenchMode mode = BenchMode::PretrainStep;
  double mean_ms = 0.0;
  double std_ms = 0.0;
  double tokens_per_sec = 0.0;
  std::uint64_t flops = 0;  // estimate_flops total for the active fraction
  double speedup = 1.0;     // baseline mean_ms / mean_ms
  std::vector<double> samples_ms;
};

struct BenchReport {
  std::vector<BenchRow> rows;
  int threads = 1;
  int precision = 32;
  std::string note;
};

// One fresh model per layout (same seed). After every layout's warmup, the
// measured iterations visit the layouts round-robin.
BenchReport run_benchmark(const BenchConfig& config);

// Columns: layout, mode, mean_ms, std_ms, tokens_per_sec, flops, speedup.
void write_report_csv(const BenchReport& report, std::ostream& os);
// Writes the CSV to csv_path and, when svg_path is set, a bar chart of the
// speedups. Throws std::runtime_error if a path cannot be written.
void emit_report(const BenchReport& report, const std::filesystem::path& csv_path,
                 const std::optional<std::filesystem::path>& svg_path = {});
void write_speedup_svg(const BenchReport& report, std::ostream& os);

// Mean and sample standard deviation.
double mean(const std::vector<double>& xs);
double stddev(const std::vector<double>& xs);

}  // namespace narrowbert
