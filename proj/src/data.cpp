#include "narrowbert/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "narrowbert/random.hpp"

namespace narrowbert {

namespace {

const char* const kSpecialNames[Vocab::kNumSpecial] = {"[PAD]", "[UNK]",
                                                       "[CLS]", "[SEP]",
                                                       "[MASK]"};

constexpr const char* kVocabMagic = "# narrowbert vocab v1 words=";

}  // namespace

Vocab::Vocab() {
  for (std::size_t i = 0; i < kNumSpecial; ++i) {
    tokens_.emplace_back(kSpecialNames[i]);
    index_.emplace(kSpecialNames[i], static_cast<std::int32_t>(i));
  }
}

Vocab Vocab::from_words(const std::vector<std::string>& words) {
  Vocab v;
  for (const auto& w : words) {
    if (w.empty() || w.find_first_of(" \t\r\n") != std::string::npos) {
      throw std::invalid_argument("vocab word must be non-empty and contain "
                                  "no whitespace: '" + w + "'");
    }
    const auto id = static_cast<std::int32_t>(v.tokens_.size());
    if (!v.index_.emplace(w, id).second) {
      throw std::invalid_argument("duplicate or reserved vocab word '" + w +
                                  "'");
    }
    v.tokens_.push_back(w);
  }
  return v;
}

std::int32_t Vocab::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocab::token(std::int32_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw std::out_of_range("token id " + std::to_string(id) +
                            " outside vocab");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<std::int32_t> Vocab::encode(std::string_view line) const {
  std::vector<std::int32_t> out;
  for (const auto& t : tokenize(line)) out.push_back(id(t));
  return out;
}

std::vector<std::string> Vocab::words() const {
  return {tokens_.begin() + kNumSpecial, tokens_.end()};
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write vocab " + path.string());
  out << kVocabMagic << (tokens_.size() - kNumSpecial) << "\n";
  out << "# specials [PAD]=0 [UNK]=1 [CLS]=2 [SEP]=3 [MASK]=4 are implicit; "
         "the k-th word line below (k from 0) has id k+5\n";
  for (std::size_t i = kNumSpecial; i < tokens_.size(); ++i) {
    out << tokens_[i] << "\n";
  }
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read vocab " + path.string());
  std::string line;
  const std::string magic = kVocabMagic;
  if (!std::getline(in, line) || line.rfind(magic, 0) != 0) {
    throw std::runtime_error(path.string() + " is not a narrowbert vocab file");
  }
  const std::size_t count = std::stoull(line.substr(magic.size()));
  std::getline(in, line);  // id-offset note
  std::vector<std::string> words;
  words.reserve(count);
  while (words.size() < count && std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    words.push_back(line);
  }
  if (words.size() != count) {
    throw std::runtime_error("vocab file " + path.string() + " truncated");
  }
  return from_words(words);
}

std::vector<std::string> tokenize(std::string_view line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(
          std::tolower(static_cast<unsigned char>(c))));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

Vocab build_vocab(const std::vector<std::string>& lines, std::size_t max_size) {
  if (max_size <= Vocab::kNumSpecial) {
    throw std::invalid_argument("vocab max_size must exceed the 5 specials");
  }
  std::map<std::string, std::size_t> counts;
  for (const auto& line : lines) {
    for (auto& t : tokenize(line)) ++counts[t];
  }
  for (const char* s : kSpecialNames) {
    std::string lowered = s;
    for (auto& c : lowered) c = static_cast<char>(std::tolower(c));
    counts.erase(s);
    counts.erase(lowered);
  }
  if (counts.empty()) throw std::invalid_argument("empty corpus");
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(),
                                                          counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) {
                     if (a.second != b.second) return a.second > b.second;
                     return a.first < b.first;
                   });
  const std::size_t keep =
      std::min(ranked.size(), max_size - Vocab::kNumSpecial);
  std::vector<std::string> words;
  for (std::size_t i = 0; i < keep; ++i) words.push_back(ranked[i].first);
  return Vocab::from_words(words);
}

Vocab build_vocab(std::istream& corpus, std::size_t max_size) {
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(corpus, line)) lines.push_back(line);
  return build_vocab(lines, max_size);
}

void MaskingPolicy::validate() const {
  if (!(mask_fraction > 0.0 && mask_fraction <= 1.0)) {
    throw std::invalid_argument("mask fraction must lie in (0, 1]");
  }
  if (to_mask < 0 || to_random < 0 || keep < 0 ||
      std::abs(to_mask + to_random + keep - 1.0) > 1e-9) {
    throw std::invalid_argument("replacement fractions must sum to 1");
  }
}

std::size_t MaskingPolicy::masked_count(std::size_t valid_len) const {
  const auto m = std::lround(mask_fraction * static_cast<double>(valid_len));
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::max(0l, m)));
}

std::size_t Batch::valid_len(std::size_t row) const {
  std::size_t n = 0;
  for (std::size_t l = 0; l < seq_len; ++l) n += validity[row * seq_len + l];
  return n;
}

void check_batch(const Batch& b) {
  auto fail = [](const std::string& what) {
    throw std::invalid_argument("invalid batch: " + what);
  };
  if (b.batch_size == 0 || b.seq_len == 0 || b.masked_per_row == 0) {
    fail("zero-sized dimension");
  }
  const std::size_t cells = b.batch_size * b.seq_len;
  const std::size_t masked = b.batch_size * b.masked_per_row;
  if (b.ids.size() != cells || b.validity.size() != cells) fail("id shape");
  if (b.masked_positions.size() != masked || b.labels.size() != masked) {
    fail("masked shape");
  }
  for (std::size_t r = 0; r < b.batch_size; ++r) {
    const auto pos = b.row_positions(r);
    for (std::size_t j = 0; j < pos.size(); ++j) {
      if (pos[j] >= b.seq_len) fail("masked position out of range");
      if (j > 0 && pos[j] <= pos[j - 1]) fail("masked positions not increasing");
      if (!b.validity[r * b.seq_len + pos[j]]) fail("masked position invalid");
      if (Vocab::is_special(b.labels[r * b.masked_per_row + j])) {
        fail("special token selected for masking");
      }
    }
  }
}

std::vector<std::size_t> select_mask_positions(
    std::span<const std::int32_t> row, std::size_t count,
    std::mt19937_64& rng) {
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < row.size(); ++i) {
    if (!Vocab::is_special(row[i])) candidates.push_back(i);
  }
  if (candidates.size() < count) {
    throw std::invalid_argument("row has " + std::to_string(candidates.size()) +
                                " maskable positions, need " +
                                std::to_string(count));
  }
  std::vector<std::size_t> out;
  out.reserve(count);
  std::sample(candidates.begin(), candidates.end(), std::back_inserter(out),
              static_cast<std::ptrdiff_t>(count), rng);
  return out;
}

Batch build_batch(const std::vector<std::vector<std::int32_t>>& docs,
                  std::size_t seq_len, const MaskingPolicy& policy,
                  std::uint64_t seed) {
  if (seq_len < 4) throw std::invalid_argument("seq_len must be >= 4");
  if (docs.empty()) throw std::invalid_argument("batch needs >= 1 document");
  Batch b;
  b.batch_size = docs.size();
  b.seq_len = seq_len;
  b.seed = seed;
  b.ids.assign(b.batch_size * seq_len, Vocab::kPad);
  b.validity.assign(b.batch_size * seq_len, 0);
  std::mt19937_64 rng(mix_seed(seed, 0));
  for (std::size_t r = 0; r < docs.size(); ++r) {
    const std::size_t content = std::min(docs[r].size(), seq_len - 2);
    std::int32_t* row = b.ids.data() + r * seq_len;
    row[0] = Vocab::kCls;
    std::copy_n(docs[r].begin(), content, row + 1);
    row[content + 1] = Vocab::kSep;
    const std::size_t valid = content + 2;
    std::fill_n(b.validity.begin() + static_cast<std::ptrdiff_t>(r * seq_len),
                valid, 1);
    const std::size_t m = policy.masked_count(valid);
    if (r == 0) {
      b.masked_per_row = m;
    } else if (m != b.masked_per_row) {
      throw std::invalid_argument("documents in one batch need equal masked "
                                  "counts");
    }
    const auto pos = select_mask_positions({row, valid}, m, rng);
    for (std::size_t p : pos) {
      b.masked_positions.push_back(p);
      b.labels.push_back(row[p]);
    }
  }
  return b;
}

Batch build_classify_batch(const std::vector<std::vector<std::int32_t>>& docs,
                           std::size_t seq_len) {
  if (seq_len < 2) throw std::invalid_argument("seq_len must be >= 2");
  if (docs.empty()) throw std::invalid_argument("batch needs >= 1 document");
  Batch b;
  b.batch_size = docs.size();
  b.seq_len = seq_len;
  b.ids.assign(b.batch_size * seq_len, Vocab::kPad);
  b.validity.assign(b.batch_size * seq_len, 0);
  for (std::size_t r = 0; r < docs.size(); ++r) {
    const std::size_t content = std::min(docs[r].size(), seq_len - 2);
    std::int32_t* row = b.ids.data() + r * seq_len;
    row[0] = Vocab::kCls;
    std::copy_n(docs[r].begin(), content, row + 1);
    row[content + 1] = Vocab::kSep;
    std::fill_n(b.validity.begin() + static_cast<std::ptrdiff_t>(r * seq_len),
                content + 2, 1);
  }
  return b;
}

std::vector<LabeledExample> parse_labeled_tsv(std::istream& in) {
  std::vector<LabeledExample> out;
  std::string line;
  for (std::size_t number = 1; std::getline(in, line); ++number) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    const auto tab = line.rfind('\t');
    if (tab == std::string::npos) {
      throw std::runtime_error("line " + std::to_string(number) +
                               ": expected text<TAB>label");
    }
    LabeledExample ex;
    ex.text = line.substr(0, tab);
    const std::string label = line.substr(tab + 1);
    std::size_t used = 0;
    try {
      const long v = std::stol(label, &used);
      if (v < 0 || v > 1'000'000) throw std::out_of_range(label);
      ex.label = static_cast<std::int32_t>(v);
    } catch (const std::logic_error&) {
      used = 0;
    }
    if (used == 0 || used != label.size()) {
      throw std::runtime_error("line " + std::to_string(number) +
                               ": label '" + label +
                               "' is not a non-negative integer");
    }
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<LabeledExample> read_labeled_tsv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return parse_labeled_tsv(in);
}

Batch apply_masking(Batch batch, const MaskingPolicy& policy,
                    std::size_t vocab_size, std::uint64_t seed) {
  policy.validate();
  if (vocab_size <= Vocab::kNumSpecial) {
    throw std::invalid_argument("vocab has no words for random replacement");
  }
  std::mt19937_64 rng(mix_seed(seed, 1));
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::uniform_int_distribution<std::int32_t> word(
      static_cast<std::int32_t>(Vocab::kNumSpecial),
      static_cast<std::int32_t>(vocab_size - 1));
  for (std::size_t r = 0; r < batch.batch_size; ++r) {
    for (std::size_t j = 0; j < batch.masked_per_row; ++j) {
      const std::size_t p = batch.masked_positions[r * batch.masked_per_row + j];
      const double u = coin(rng);
      std::int32_t& id = batch.ids[r * batch.seq_len + p];
      if (u < policy.to_mask) {
        id = Vocab::kMask;
      } else if (u < policy.to_mask + policy.to_random) {
        id = word(rng);
      }
    }
  }
  return batch;
}

Batch synthetic_batch(std::size_t batch_size, std::size_t seq_len,
                      std::size_t vocab_size, double mask_fraction,
                      std::uint64_t seed) {
  if (seq_len < 4) throw std::invalid_argument("seq_len must be >= 4");
  std::mt19937_64 rng(mix_seed(seed, 7));
  std::uniform_int_distribution<std::int32_t> word(
      static_cast<std::int32_t>(Vocab::kNumSpecial),
      static_cast<std::int32_t>(vocab_size - 1));
  std::vector<std::vector<std::int32_t>> docs(batch_size);
  for (auto& d : docs) {
    d.resize(seq_len - 2);
    for (auto& id : d) id = word(rng);
  }
  MaskingPolicy policy;
  policy.mask_fraction = mask_fraction;
  return apply_masking(build_batch(docs, seq_len, policy, seed), policy,
                       vocab_size, seed);
}

BatchStream::BatchStream(std::vector<std::vector<std::int32_t>> docs,
                         std::size_t seq_len, std::size_t batch_size,
                         std::uint64_t seed, MaskingPolicy policy,
                         std::size_t vocab_size)
    : seq_len_(seq_len),
      batch_size_(batch_size),
      seed_(seed),
      policy_(policy),
      vocab_size_(vocab_size) {
  policy_.validate();
  if (seq_len < 4) throw std::invalid_argument("seq_len must be >= 4");
  if (batch_size == 0) throw std::invalid_argument("batch size must be >= 1");
  // Documents without enough maskable tokens for their masked count are
  // dropped (e.g. a line made only of out-of-vocabulary words).
  for (auto& d : docs) {
    if (d.size() > seq_len - 2) d.resize(seq_len - 2);
    if (d.empty()) continue;
    const std::size_t maskable = static_cast<std::size_t>(std::count_if(
        d.begin(), d.end(), [](std::int32_t id) { return !Vocab::is_special(id); }));
    if (maskable < policy_.masked_count(d.size() + 2)) continue;
    docs_.push_back(std::move(d));
  }
  if (docs_.empty()) {
    throw std::invalid_argument("no usable documents for batching");
  }
  plan_epoch();
}

void BatchStream::plan_epoch() {
  std::mt19937_64 rng(mix_seed(seed_, 1000 + epoch_));
  std::map<std::size_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < docs_.size(); ++i) {
    groups[policy_.masked_count(docs_[i].size() + 2)].push_back(i);
  }
  plan_.clear();
  for (auto& [m, members] : groups) {
    std::shuffle(members.begin(), members.end(), rng);
    for (std::size_t i = 0; i < members.size(); i += batch_size_) {
      const std::size_t end = std::min(members.size(), i + batch_size_);
      plan_.emplace_back(members.begin() + static_cast<std::ptrdiff_t>(i),
                         members.begin() + static_cast<std::ptrdiff_t>(end));
    }
  }
  std::shuffle(plan_.begin(), plan_.end(), rng);
  cursor_ = 0;
}

Batch BatchStream::next() {
  if (cursor_ == plan_.size()) {
    ++epoch_;
    plan_epoch();
  }
  const auto& members = plan_[cursor_++];
  std::vector<std::vector<std::int32_t>> docs;
  docs.reserve(members.size());
  for (std::size_t i : members) docs.push_back(docs_[i]);
  const std::uint64_t batch_seed = mix_seed(seed_, 1'000'000'000ull + emitted_++);
  return apply_masking(build_batch(docs, seq_len_, policy_, batch_seed),
                       policy_, vocab_size_, batch_seed);
}

BatchStream make_batches(const std::vector<std::string>& lines,
                         const Vocab& vocab, std::size_t seq_len,
                         std::size_t batch_size, std::uint64_t seed,
                         MaskingPolicy policy) {
  std::vector<std::vector<std::int32_t>> docs;
  docs.reserve(lines.size());
  for (const auto& line : lines) docs.push_back(vocab.encode(line));
  return BatchStream(std::move(docs), seq_len, batch_size, seed, policy,
                     vocab.size());
}

std::vector<std::string> toy_corpus(std::size_t lines, std::uint64_t seed) {
  static const std::vector<std::string> animals = {"cat", "dog", "bird",
                                                   "horse", "fish"};
  static const std::vector<std::string> animal_verbs = {"runs", "sleeps",
                                                        "eats", "jumps"};
  static const std::vector<std::string> people = {"man", "woman", "child",
                                                  "king", "queen"};
  static const std::vector<std::string> people_verbs = {"reads", "writes",
                                                        "sings", "tells"};
  static const std::vector<std::string> adjectives = {"big", "small", "old",
                                                      "young", "happy"};
  static const std::vector<std::string> objects = {"book", "letter", "song",
                                                   "story"};
  // Preposition fixes the place noun.
  static const std::vector<std::pair<std::string, std::string>> places = {
      {"in", "park"}, {"at", "house"}, {"near", "river"}, {"on", "hill"}};

  std::mt19937_64 rng(mix_seed(seed, 99));
  auto pick = [&](const std::vector<std::string>& v) -> const std::string& {
    return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
  };
  auto place = [&]() {
    const auto& p = places[std::uniform_int_distribution<std::size_t>(
        0, places.size() - 1)(rng)];
    return p.first + " the " + p.second;
  };
  std::uniform_int_distribution<int> tmpl(0, 3);
  std::uniform_int_distribution<int> count(1, 3);
  std::vector<std::string> out;
  out.reserve(lines);
  for (std::size_t i = 0; i < lines; ++i) {
    std::ostringstream doc;
    const int sentences = count(rng);
    for (int s = 0; s < sentences; ++s) {
      if (s) doc << ' ';
      switch (tmpl(rng)) {
        case 0:
          doc << "the " << pick(adjectives) << ' ' << pick(animals) << ' '
              << pick(animal_verbs) << ' ' << place() << " .";
          break;
        case 1:
          doc << "the " << pick(people) << ' ' << pick(people_verbs) << " a "
              << pick(objects) << " .";
          break;
        case 2:
          doc << "a " << pick(adjectives) << ' ' << pick(people) << ' '
              << pick(people_verbs) << " the " << pick(objects) << ' '
              << place() << " .";
          break;
        default:
          doc << "the " << pick(animals) << " and the " << pick(animals)
              << ' ' << pick(animal_verbs) << " together .";
          break;
      }
    }
    out.push_back(doc.str());
  }
  return out;
}

}  // namespace narrowbert
