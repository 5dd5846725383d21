#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace narrowbert {

class Vocab {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kUnk = 1;
  static constexpr std::int32_t kCls = 2;
  static constexpr std::int32_t kSep = 3;
  static constexpr std::int32_t kMask = 4;
  static constexpr std::size_t kNumSpecial = 5;

  Vocab();

  // Words get ids 5, 6, ... in order. Throws on duplicates or special names.
  static Vocab from_words(const std::vector<std::string>& words);

  std::size_t size() const { return tokens_.size(); }
  std::int32_t id(std::string_view token) const;  // [UNK] when absent
  const std::string& token(std::int32_t id) const;
  static bool is_special(std::int32_t id) {
    return id >= 0 && id < static_cast<std::int32_t>(kNumSpecial);
  }

  // Lowercased whitespace tokens mapped to ids.
  std::vector<std::int32_t> encode(std::string_view line) const;
  std::vector<std::string> words() const;

  // Text format: '#' header lines, then one word per line; the k-th word
  // line (0-based) has id k + 5.
  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

  friend bool operator==(const Vocab& a, const Vocab& b) {
    return a.tokens_ == b.tokens_;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> index_;
};

std::vector<std::string> tokenize(std::string_view line);
std::vector<std::string> read_lines(const std::filesystem::path& path);

// Frequency-ranked (ties lexicographic), truncated to max_size - 5 words.
Vocab build_vocab(const std::vector<std::string>& lines, std::size_t max_size);
Vocab build_vocab(std::istream& corpus, std::size_t max_size);

struct MaskingPolicy {
  double mask_fraction = 0.15;
  double to_mask = 0.8;
  double to_random = 0.1;
  double keep = 0.1;

  void validate() const;
  // max(1, round(mask_fraction * valid_len)).
  std::size_t masked_count(std::size_t valid_len) const;
};

struct Batch {
  std::size_t batch_size = 0;
  std::size_t seq_len = 0;
  std::size_t masked_per_row = 0;
  std::vector<std::int32_t> ids;            // batch_size * seq_len
  std::vector<std::uint8_t> validity;       // batch_size * seq_len
  std::vector<std::size_t> masked_positions;  // batch_size * masked_per_row
  std::vector<std::int32_t> labels;         // batch_size * masked_per_row
  std::uint64_t seed = 0;

  std::size_t valid_len(std::size_t row) const;
  std::span<const std::int32_t> row_ids(std::size_t row) const {
    return {ids.data() + row * seq_len, seq_len};
  }
  std::span<const std::size_t> row_positions(std::size_t row) const {
    return {masked_positions.data() + row * masked_per_row, masked_per_row};
  }
};

// Throws std::invalid_argument naming the first broken Batch invariant.
void check_batch(const Batch& batch);

// Uniform choice of `count` distinct non-special positions, returned sorted.
std::vector<std::size_t> select_mask_positions(
    std::span<const std::int32_t> row, std::size_t count, std::mt19937_64& rng);

// Rows are [CLS] doc [SEP] [PAD]*; docs longer than seq_len - 2 are
// truncated. All docs must yield the same masked count. Ids are unmasked.
Batch build_batch(const std::vector<std::vector<std::int32_t>>& docs,
                  std::size_t seq_len, const MaskingPolicy& policy,
                  std::uint64_t seed);

// Mutates ids at masked positions: [MASK] / random word / unchanged per the
// policy split. Labels are untouched.
Batch apply_masking(Batch batch, const MaskingPolicy& policy,
                    std::size_t vocab_size, std::uint64_t seed);

// Uniform random word ids, every position valid, random masked positions.
Batch synthetic_batch(std::size_t batch_size, std::size_t seq_len,
                      std::size_t vocab_size, double mask_fraction,
                      std::uint64_t seed);

// Endless, deterministic stream of masked batches. Each epoch groups documents
// by masked count (so every batch is rectangular), shuffles within groups and
// shuffles batch order; masking is re-drawn for every batch.
class BatchStream {
 public:
  BatchStream(std::vector<std::vector<std::int32_t>> docs, std::size_t seq_len,
              std::size_t batch_size, std::uint64_t seed, MaskingPolicy policy,
              std::size_t vocab_size);

  Batch next();
  std::size_t documents() const { return docs_.size(); }
  std::size_t batches_per_epoch() const { return plan_.size(); }
  std::size_t seq_len() const { return seq_len_; }

 private:
  void plan_epoch();

  std::vector<std::vector<std::int32_t>> docs_;
  std::size_t seq_len_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  MaskingPolicy policy_;
  std::size_t vocab_size_;
  std::size_t epoch_ = 0;
  std::size_t cursor_ = 0;
  std::uint64_t emitted_ = 0;
  std::vector<std::vector<std::size_t>> plan_;
};

BatchStream make_batches(const std::vector<std::string>& lines,
                         const Vocab& vocab, std::size_t seq_len,
                         std::size_t batch_size, std::uint64_t seed,
                         MaskingPolicy policy = {});

// [CLS] doc [SEP] [PAD]* rows with no masked positions (Classify mode).
Batch build_classify_batch(const std::vector<std::vector<std::int32_t>>& docs,
                           std::size_t seq_len);

struct LabeledExample {
  std::string text;
  std::int32_t label = 0;
};

// UTF-8 lines of `text<TAB>label`; blank lines skipped. Throws
// std::runtime_error with the line number on a malformed line.
std::vector<LabeledExample> read_labeled_tsv(const std::filesystem::path& path);
std::vector<LabeledExample> parse_labeled_tsv(std::istream& in);

// Small templated-grammar corpus with learnable structure (word classes,
// agreement, fixed function words). One document per line.
std::vector<std::string> toy_corpus(std::size_t lines, std::uint64_t seed);

}  // namespace narrowbert
