#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "narrowbert/data.hpp"
#include "narrowbert/dims.hpp"

namespace narrowbert::verify {

enum class Family { ContextFirst, SparseQueries };

// Random notation with one ':'. ContextFirst tails are feedforward only;
// SparseQueries tails hold at least one attention atom. Prefixes always
// contain both atom kinds.
std::string random_layout(std::mt19937_64& rng, Family family,
                          std::size_t max_prefix = 4, std::size_t max_tail = 4);

// Small random dims with hidden <= max_hidden.
ModelDims random_dims(std::mt19937_64& rng, std::size_t max_hidden,
                      std::size_t max_len);

// [CLS] words [SEP] [PAD]* rows sharing one valid length, masked with the
// default 80/10/10 split.
Batch random_batch(std::mt19937_64& rng, std::size_t batch_size,
                   std::size_t seq_len, std::size_t vocab,
                   double mask_fraction);

struct CheckResult {
  std::string name;
  bool passed = true;
  std::size_t trials = 0;
  std::string detail;  // first failure, empty on success
};

struct EquivOptions {
  std::uint64_t seed = 7;
  std::size_t trials = 100;
  std::size_t max_hidden = 64;
  std::size_t max_len = 32;
  std::size_t max_batch = 4;
};

// All checks are 64-bit and pin the kernel thread count to 1 while running.
CheckResult check_narrow_exactness(const EquivOptions& opts);
CheckResult check_frozen_kv(const EquivOptions& opts);
CheckResult check_all_positions(const EquivOptions& opts);
CheckResult check_masked_set_independence(const EquivOptions& opts);
CheckResult check_attention_permutation(const EquivOptions& opts);
CheckResult check_wide_vs_narrow_attention(const EquivOptions& opts);
CheckResult check_feedforward_positionwise(const EquivOptions& opts);
CheckResult check_classify_narrowing(const EquivOptions& opts);

std::vector<CheckResult> run_equivalence_suite(const EquivOptions& opts);

struct GroupError {
  std::string name;
  std::size_t entries = 0;
  double analytic_norm = 0.0;
  double numeric_norm = 0.0;
  double rel_error = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  std::string variant;
  std::string layout;
  std::vector<GroupError> groups;
  bool passed() const;
  double worst() const;
};

struct GradCheckOptions {
  std::uint64_t seed = 11;
  double step = 1e-5;
  double tolerance = 1e-4;
  ModelDims dims{8, 2, 16, 24, 12, 1e-12};
  std::size_t seq_len = 10;
  std::size_t batch = 2;
  double perturb_std = 0.3;
};

// Compares every parameter entry's analytic gradient with a central
// difference of the loss. Per group the error is
// ||analytic - numeric|| / max(||analytic||, ||numeric||); groups whose
// gradients are both below 1e-9 in norm count as matching zeros.
GradCheckReport gradcheck_mlm(const std::string& layout,
                              const GradCheckOptions& opts);
GradCheckReport gradcheck_classify(const std::string& layout,
                                   std::size_t num_classes,
                                   const GradCheckOptions& opts);

// The three 2-layer variants, a SparseQueries stack with two attention
// layers after ':', and a classify-mode run.
std::vector<GradCheckReport> run_gradcheck_suite(const GradCheckOptions& opts);

}  // namespace narrowbert::verify
