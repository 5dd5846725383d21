#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "narrowbert/bench.hpp"
#include "narrowbert/layout.hpp"

using namespace narrowbert;

namespace {

BenchConfig small(BenchMode mode) {
  BenchConfig c;
  c.layouts = {"{2,sf}", "sf:sf"};
  c.dims = ModelDims{32, 4, 64, 60, 32, 1e-12};
  c.seq_len = 32;
  c.batch = 2;
  c.mode = mode;
  c.iterations = 5;
  c.warmup = 2;
  return c;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

TEST_CASE("mode names") {
  for (auto m : {BenchMode::PretrainStep, BenchMode::InferenceForward,
                 BenchMode::ClassifyForward, BenchMode::ClassifyStep}) {
    CHECK(parse_bench_mode(to_string(m)) == m);
  }
  CHECK_FALSE(parse_bench_mode("sideways").has_value());
}

TEST_CASE("report rows, statistics and CSV") {
  const BenchReport r = run_benchmark(small(BenchMode::PretrainStep));
  REQUIRE(r.rows.size() == 2);
  CHECK(r.rows[0].speedup == 1.0);
  for (const auto& row : r.rows) {
    CHECK(row.samples_ms.size() == 5);
    CHECK(row.mean_ms == doctest::Approx(mean(row.samples_ms)));
    CHECK(row.mean_ms > 0.0);
    CHECK(row.tokens_per_sec > 0.0);
  }
  CHECK(r.rows[1].speedup == doctest::Approx(r.rows[0].mean_ms / r.rows[1].mean_ms));
  const auto expect = estimate_flops(parse_layout("sf:sf"), small(BenchMode::PretrainStep).dims, 32, 0.15);
  CHECK(r.rows[1].flops == expect.total_narrowed);

  std::ostringstream a, b;
  write_report_csv(r, a);
  write_report_csv(r, b);
  CHECK(a.str() == b.str());
  std::istringstream in(a.str());
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  REQUIRE(lines.size() == 3);
  CHECK(lines[0] == "layout,mode,mean_ms,std_ms,tokens_per_sec,flops,speedup");
  CHECK(lines[1].rfind("\"{2,sf}\",pretrain-step,", 0) == 0);
}

TEST_CASE("classify modes time every layout") {
  for (auto mode : {BenchMode::ClassifyForward, BenchMode::ClassifyStep, BenchMode::InferenceForward}) {
    const BenchReport r = run_benchmark(small(mode));
    CHECK(r.rows.size() == 2);
    CHECK(r.rows[1].mode == mode);
  }
}

TEST_CASE("emit writes identical files") {
  const BenchReport r = run_benchmark(small(BenchMode::ClassifyForward));
  const auto dir = std::filesystem::temp_directory_path();
  const auto csv = dir / "nb_bench_test.csv", svg = dir / "nb_bench_test.svg";
  emit_report(r, csv, svg);
  const std::string first = slurp(csv);
  emit_report(r, csv);
  CHECK(slurp(csv) == first);
  CHECK(slurp(svg).find("<svg") != std::string::npos);
  std::filesystem::remove(csv);
  std::filesystem::remove(svg);
  CHECK_THROWS_AS(emit_report(r, dir / "no_such_dir" / "x.csv"), std::runtime_error);
}

TEST_CASE("configuration errors") {
  BenchConfig c = small(BenchMode::PretrainStep);
  c.iterations = 4;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = small(BenchMode::PretrainStep);
  c.layouts.clear();
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = small(BenchMode::PretrainStep);
  c.layouts.push_back("sf::");
  CHECK_THROWS(c.validate());
  c = small(BenchMode::PretrainStep);
  c.seq_len = 64;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("mean and sample standard deviation") {
  CHECK(mean({1.0, 2.0, 3.0}) == 2.0);
  CHECK(stddev({1.0, 2.0, 3.0}) == doctest::Approx(1.0));
  CHECK(stddev({4.0}) == 0.0);
}
