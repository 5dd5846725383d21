// Serial vs OpenMP matmul kernels: wall clock and bitwise agreement.

#include <chrono>
#include <cstring>
#include <iomanip>
#include <iostream>
#include <random>
#include <vector>

#include "CLI11.hpp"
#include "narrowbert/bench.hpp"
#include "narrowbert/kernels.hpp"

namespace k = narrowbert::kernels;

namespace {

template <typename F>
std::vector<double> time_ms(F&& f, std::size_t warmup, std::size_t reps) {
  for (std::size_t i = 0; i < warmup; ++i) f();
  std::vector<double> out;
  for (std::size_t i = 0; i < reps; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    out.push_back(std::chrono::duration<double, std::milli>(
                      std::chrono::steady_clock::now() - t0)
                      .count());
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"serial vs parallel kernel benchmark"};
  std::size_t m = 512, kk = 128, n = 512, reps = 10;
  int threads = 0;
  app.add_option("-m", m)->capture_default_str();
  app.add_option("-k", kk)->capture_default_str();
  app.add_option("-n", n)->capture_default_str();
  app.add_option("--reps", reps)->capture_default_str()->check(CLI::Range(5, 100000));
  app.add_option("--threads", threads, "0: NARROWBERT_THREADS or all cores");
  CLI11_PARSE(app, argc, argv);
  k::set_threads(k::resolve_threads(threads));

  std::mt19937_64 rng(3);
  std::normal_distribution<float> dist;
  std::vector<float> a(m * kk), b(kk * n), dc(m * n);
  for (auto* v : {&a, &b, &dc}) {
    for (auto& x : *v) x = dist(rng);
  }
  std::vector<float> c_s(m * n), c_p(m * n), da_s(m * kk), da_p(m * kk),
      db_s(kk * n), db_p(kk * n);

  struct Case {
    const char* name;
    std::vector<double> serial, parallel;
    bool equal;
  };
  std::vector<Case> cases;
  cases.push_back(
      {"matmul",
       time_ms([&] { k::serial::matmul<float>(a, b, c_s, m, kk, n); }, 2, reps),
       time_ms([&] { k::parallel::matmul<float>(a, b, c_p, m, kk, n); }, 2, reps),
       c_s == c_p});
  // Accumulating kernels: compare one clean call each.
  auto grad_a = [&](auto fn, std::vector<float>& out) {
    std::fill(out.begin(), out.end(), 0.0f);
    fn(dc, b, out);
  };
  auto grad_b = [&](auto fn, std::vector<float>& out) {
    std::fill(out.begin(), out.end(), 0.0f);
    fn(a, dc, out);
  };
  auto sa = [&](auto& x, auto& y, auto& z) { k::serial::matmul_grad_a<float>(x, y, z, m, kk, n); };
  auto pa = [&](auto& x, auto& y, auto& z) { k::parallel::matmul_grad_a<float>(x, y, z, m, kk, n); };
  auto sb = [&](auto& x, auto& y, auto& z) { k::serial::matmul_grad_b<float>(x, y, z, m, kk, n); };
  auto pb = [&](auto& x, auto& y, auto& z) { k::parallel::matmul_grad_b<float>(x, y, z, m, kk, n); };
  cases.push_back({"matmul_grad_a",
                   time_ms([&] { grad_a(sa, da_s); }, 2, reps),
                   time_ms([&] { grad_a(pa, da_p); }, 2, reps), da_s == da_p});
  cases.push_back({"matmul_grad_b",
                   time_ms([&] { grad_b(sb, db_s); }, 2, reps),
                   time_ms([&] { grad_b(pb, db_p); }, 2, reps), db_s == db_p});

  std::cout << "kernel,m,k,n,threads,serial_ms,serial_std,parallel_ms,"
               "parallel_std,speedup,bitwise_equal\n";
  bool all_equal = true;
  for (const auto& c : cases) {
    const double s = narrowbert::mean(c.serial), p = narrowbert::mean(c.parallel);
    std::cout << c.name << ',' << m << ',' << kk << ',' << n << ','
              << k::threads() << ',' << std::fixed << std::setprecision(3) << s
              << ',' << narrowbert::stddev(c.serial) << ',' << p << ','
              << narrowbert::stddev(c.parallel) << ',' << (p > 0 ? s / p : 0.0)
              << ',' << (c.equal ? "yes" : "no") << '\n';
    all_equal = all_equal && c.equal;
  }
  return all_equal ? 0 : 1;
}
