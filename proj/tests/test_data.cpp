#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <array>
#include <filesystem>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "narrowbert/data.hpp"

using namespace narrowbert;

TEST_CASE("vocab ranking and unknown tokens") {
  std::istringstream corpus("a a b");
  const Vocab v = build_vocab(corpus, 7);
  REQUIRE(v.size() == 7);
  CHECK(v.token(5) == "a");
  CHECK(v.token(6) == "b");
  CHECK(v.id("zzz") == Vocab::kUnk);
  CHECK(v.encode("A b c") == std::vector<std::int32_t>{5, 6, Vocab::kUnk});

  const std::vector<std::string> lines{"b c c", "a b"};
  const Vocab t = build_vocab(lines, 6);
  CHECK(t.size() == 6);
  CHECK(t.token(5) == "b");  // b and c tie at 2; truncated to one word
  CHECK(build_vocab(lines, 100) == build_vocab(lines, 100));
  CHECK_THROWS_AS(build_vocab(std::vector<std::string>{""}, 10), std::invalid_argument);
}

TEST_CASE("vocab file round trip") {
  const Vocab v = Vocab::from_words({"alpha", "beta", "gamma"});
  const auto path = std::filesystem::temp_directory_path() / "nb_test_vocab.txt";
  v.save(path);
  CHECK(Vocab::load(path) == v);
  std::filesystem::remove(path);
  CHECK_THROWS(Vocab::from_words({"a", "a"}));
}

TEST_CASE("batch construction arithmetic") {
  std::vector<std::int32_t> doc(20);
  std::iota(doc.begin(), doc.end(), 5);
  const Batch b = build_batch({doc}, 24, MaskingPolicy{}, 3);
  CHECK(b.valid_len(0) == 22);
  CHECK(b.masked_per_row == 3);
  CHECK(b.ids[0] == Vocab::kCls);
  CHECK(b.ids[21] == Vocab::kSep);
  CHECK(b.ids[22] == Vocab::kPad);
  check_batch(b);
  CHECK(MaskingPolicy{}.masked_count(2) == 1);
}

TEST_CASE("selection never touches special tokens") {
  std::mt19937_64 rng(1);
  const std::vector<std::int32_t> row{Vocab::kCls, 7, Vocab::kUnk, 9, 10,
                                      Vocab::kSep, Vocab::kPad, Vocab::kPad};
  for (int i = 0; i < 2000; ++i) {
    for (std::size_t p : select_mask_positions(row, 2, rng)) {
      CHECK_FALSE(Vocab::is_special(row[p]));
    }
  }
  CHECK_THROWS(select_mask_positions(row, 4, rng));
}

TEST_CASE("selection is uniform over maskable positions") {
  const std::vector<std::int32_t> row{Vocab::kCls, 5, 6, 7, 8, 9, Vocab::kSep, Vocab::kPad};
  std::array<int, 8> hits{};
  for (std::uint64_t seed = 0; seed < 10000; ++seed) {
    std::mt19937_64 rng(seed);
    for (std::size_t p : select_mask_positions(row, 1, rng)) ++hits[p];
  }
  CHECK(hits[0] == 0);
  CHECK(hits[6] == 0);
  CHECK(hits[7] == 0);
  double chi2 = 0.0;
  for (std::size_t p = 1; p <= 5; ++p) chi2 += (hits[p] - 2000.0) * (hits[p] - 2000.0) / 2000.0;
  CHECK(chi2 < 18.47);  // 4 dof, p = 0.001
}

TEST_CASE("80/10/10 replacement statistics over 100k selections") {
  const std::size_t vocab = 200;
  std::size_t selections = 0, masked = 0, random = 0, kept = 0;
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::int32_t> word(5, vocab - 1);
  for (std::uint64_t seed = 0; selections < 100000; ++seed) {
    std::vector<std::vector<std::int32_t>> docs(8, std::vector<std::int32_t>(60));
    for (auto& d : docs) {
      for (auto& t : d) t = word(rng);
    }
    const Batch clean = build_batch(docs, 64, MaskingPolicy{}, seed);
    const Batch b = apply_masking(clean, MaskingPolicy{}, vocab, seed + 1000);
    for (std::size_t r = 0; r < b.batch_size; ++r) {
      for (std::size_t j = 0; j < b.masked_per_row; ++j) {
        const std::size_t p = b.masked_positions[r * b.masked_per_row + j];
        const std::int32_t orig = clean.ids[r * b.seq_len + p];
        const std::int32_t now = b.ids[r * b.seq_len + p];
        CHECK(b.labels[r * b.masked_per_row + j] == orig);
        ++selections;
        if (now == Vocab::kMask) ++masked;
        else if (now == orig) ++kept;
        else ++random;
        CHECK_FALSE((now != Vocab::kMask && Vocab::is_special(now)));
      }
    }
    // Unselected positions are never mutated.
    std::size_t changed = 0;
    for (std::size_t i = 0; i < b.ids.size(); ++i) changed += b.ids[i] != clean.ids[i];
    CHECK(changed <= b.batch_size * b.masked_per_row);
  }
  const double n = static_cast<double>(selections);
  // A random replacement can draw the original id (1 in 195); those land in "kept".
  CHECK(std::abs(masked / n - 0.8) < 0.01);
  CHECK(std::abs(random / n - 0.1) < 0.01);
  CHECK(std::abs(kept / n - 0.1) < 0.01);
  const double chi2 = (masked - 0.8 * n) * (masked - 0.8 * n) / (0.8 * n) +
                      (random - 0.1 * n) * (random - 0.1 * n) / (0.1 * n) +
                      (kept - 0.1 * n) * (kept - 0.1 * n) / (0.1 * n);
  CHECK(chi2 < 13.82);  // 2 dof, p = 0.001
}

TEST_CASE("all-mask policy") {
  std::vector<std::int32_t> doc(30, 9);
  MaskingPolicy p{0.15, 1.0, 0.0, 0.0};
  const Batch b = apply_masking(build_batch({doc}, 40, p, 1), p, 50, 2);
  for (std::size_t pos : b.row_positions(0)) CHECK(b.ids[pos] == Vocab::kMask);
}

TEST_CASE("batch stream determinism and rectangular batches") {
  const auto lines = toy_corpus(300, 3);
  const Vocab v = build_vocab(lines, 500);
  auto a = make_batches(lines, v, 32, 8, 11);
  auto b = make_batches(lines, v, 32, 8, 11);
  auto c = make_batches(lines, v, 32, 8, 12);
  bool differs = false;
  for (int i = 0; i < 40; ++i) {
    const Batch x = a.next(), y = b.next(), z = c.next();
    CHECK(x.ids == y.ids);
    CHECK(x.masked_positions == y.masked_positions);
    CHECK(x.labels == y.labels);
    differs = differs || x.ids != z.ids;
    check_batch(x);
    for (std::size_t r = 0; r < x.batch_size; ++r) {
      auto pos = x.row_positions(r);
      CHECK(std::adjacent_find(pos.begin(), pos.end(),
                               std::greater_equal<>()) == pos.end());
      CHECK(x.masked_per_row == MaskingPolicy{}.masked_count(x.valid_len(r)));
    }
  }
  CHECK(differs);
}

TEST_CASE("classify batch") {
  const Batch b = build_classify_batch({{5, 6}, {7, 8, 9, 10}}, 6);
  CHECK(b.masked_per_row == 0);
  CHECK(b.valid_len(0) == 4);
  CHECK(b.valid_len(1) == 6);
  CHECK(b.ids[0] == Vocab::kCls);
}

TEST_CASE("labeled TSV parsing") {
  std::istringstream ok("the cat sat\t1\n\nhello world\t0\n");
  const auto ex = parse_labeled_tsv(ok);
  REQUIRE(ex.size() == 2);
  CHECK(ex[0].text == "the cat sat");
  CHECK(ex[0].label == 1);
  CHECK(ex[1].label == 0);
  std::istringstream no_tab("a line\nno tab here\n");
  CHECK_THROWS_WITH_AS(parse_labeled_tsv(no_tab), doctest::Contains("line 1"), std::runtime_error);
  std::istringstream bad_label("x\tyes\n");
  CHECK_THROWS_AS(parse_labeled_tsv(bad_label), std::runtime_error);
  std::istringstream negative("x\t-1\n");
  CHECK_THROWS_AS(parse_labeled_tsv(negative), std::runtime_error);
}

TEST_CASE("toy corpus is deterministic and small") {
  const auto a = toy_corpus(3000, 5);
  CHECK(a == toy_corpus(3000, 5));
  std::size_t bytes = 0;
  for (const auto& l : a) bytes += l.size() + 1;
  CHECK(bytes < 1'000'000);
}

TEST_CASE("checked-in corpus matches the generator") {
  const auto path = std::filesystem::path(NARROWBERT_SOURCE_DIR) / "data" / "toy_corpus.txt";
  REQUIRE(std::filesystem::exists(path));
  CHECK(read_lines(path) == toy_corpus(3000, 5));
  CHECK(std::filesystem::file_size(path) < 1'000'000);
}
