#include "narrowbert/layout.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

namespace narrowbert {

namespace {

// Guards against absurd expansions such as "{99999999,sf}".
constexpr std::size_t kMaxRepeat = 100000;

struct Expansion {
  std::vector<LayerAtom> atoms;
  std::vector<std::size_t> atom_offsets;
};

class NotationParser {
 public:
  explicit NotationParser(std::string_view text) : text_(text) {}

  Expansion run() {
    if (text_.empty()) {
      throw LayoutParseError(ParseErrorKind::Empty, 0, "empty layout");
    }
    while (pos_ < text_.size()) item();
    return std::move(out_);
  }

 private:
  [[noreturn]] void fail(ParseErrorKind kind, std::size_t at,
                         const std::string& detail) const {
    throw LayoutParseError(kind, std::min(at, text_.size() - 1), detail);
  }

  static bool is_ascii(char c) {
    return static_cast<unsigned char>(c) < 0x80;
  }

  void emit(AtomKind kind, std::size_t at) {
    out_.atoms.push_back({kind});
    out_.atom_offsets.push_back(at);
  }

  void item() {
    const char c = text_[pos_];
    switch (c) {
      case 's':
        emit(AtomKind::Attention, pos_++);
        return;
      case 'f':
        emit(AtomKind::Feedforward, pos_++);
        return;
      case ':':
        emit(AtomKind::NarrowMarker, pos_++);
        return;
      case '{':
        group();
        return;
      case '}':
      case ',':
        fail(ParseErrorKind::MalformedGroup, pos_,
             std::string("unexpected '") + c + "' outside a group");
      default:
        if (c >= '0' && c <= '9') {
          fail(ParseErrorKind::MalformedGroup, pos_,
               "repetition count outside a group");
        }
        fail(ParseErrorKind::UnknownCharacter, pos_,
             is_ascii(c) ? std::string("unknown character '") + c + "'"
                         : std::string("non-ASCII byte"));
    }
  }

  void group() {
    const std::size_t open = pos_++;
    if (pos_ >= text_.size()) {
      fail(ParseErrorKind::MalformedGroup, open, "unterminated group");
    }
    if (!std::isdigit(static_cast<unsigned char>(text_[pos_]))) {
      fail(ParseErrorKind::MalformedGroup, pos_,
           "expected repetition count after '{'");
    }
    const std::size_t count_at = pos_;
    std::size_t count = 0;
    while (pos_ < text_.size() &&
           std::isdigit(static_cast<unsigned char>(text_[pos_]))) {
      count = count * 10 + static_cast<std::size_t>(text_[pos_] - '0');
      if (count > kMaxRepeat) {
        fail(ParseErrorKind::MalformedGroup, count_at,
             "repetition count exceeds " + std::to_string(kMaxRepeat));
      }
      ++pos_;
    }
    if (count == 0) {
      fail(ParseErrorKind::ZeroRepetition, count_at,
           "repetition count must be at least 1");
    }
    if (pos_ >= text_.size()) {
      fail(ParseErrorKind::MalformedGroup, open, "unterminated group");
    }
    if (text_[pos_] != ',') {
      fail(ParseErrorKind::MalformedGroup, pos_,
           "expected ',' after repetition count");
    }
    ++pos_;
    const std::size_t unit_at = pos_;
    std::vector<AtomKind> unit;
    while (pos_ < text_.size() && text_[pos_] != '}') {
      const char c = text_[pos_];
      if (c == 's') {
        unit.push_back(AtomKind::Attention);
      } else if (c == 'f') {
        unit.push_back(AtomKind::Feedforward);
      } else if (c == ':' || c == '{' || c == ',' ||
                 (c >= '0' && c <= '9')) {
        fail(ParseErrorKind::MalformedGroup, pos_,
             std::string("'") + c + "' not allowed inside a group unit");
      } else {
        fail(ParseErrorKind::UnknownCharacter, pos_,
             is_ascii(c) ? std::string("unknown character '") + c + "'"
                         : std::string("non-ASCII byte"));
      }
      ++pos_;
    }
    if (pos_ >= text_.size()) {
      fail(ParseErrorKind::MalformedGroup, open, "unterminated group");
    }
    if (unit.empty()) {
      fail(ParseErrorKind::MalformedGroup, unit_at, "empty group unit");
    }
    ++pos_;  // '}'
    for (std::size_t r = 0; r < count; ++r) {
      for (std::size_t u = 0; u < unit.size(); ++u) emit(unit[u], unit_at + u);
    }
  }

  std::string_view text_;
  std::size_t pos_ = 0;
  Expansion out_;
};

}  // namespace

char atom_symbol(AtomKind kind) {
  switch (kind) {
    case AtomKind::Attention:
      return 's';
    case AtomKind::Feedforward:
      return 'f';
    case AtomKind::NarrowMarker:
      return ':';
  }
  return '?';
}

const char* atom_name(AtomKind kind) {
  switch (kind) {
    case AtomKind::Attention:
      return "attention";
    case AtomKind::Feedforward:
      return "feedforward";
    case AtomKind::NarrowMarker:
      return "narrow";
  }
  return "?";
}

std::optional<std::size_t> Layout::narrow_index() const {
  for (std::size_t i = 0; i < atoms.size(); ++i) {
    if (atoms[i].kind == AtomKind::NarrowMarker) return i;
  }
  return std::nullopt;
}

std::size_t Layout::count(AtomKind kind) const {
  return static_cast<std::size_t>(
      std::count(atoms.begin(), atoms.end(), LayerAtom{kind}));
}

const char* to_string(ParseErrorKind kind) {
  switch (kind) {
    case ParseErrorKind::Empty:
      return "empty";
    case ParseErrorKind::UnknownCharacter:
      return "unknown-character";
    case ParseErrorKind::MalformedGroup:
      return "malformed-group";
    case ParseErrorKind::ZeroRepetition:
      return "zero-repetition";
    case ParseErrorKind::MultipleNarrow:
      return "multiple-narrow";
    case ParseErrorKind::NarrowWithoutContext:
      return "narrow-without-context";
  }
  return "?";
}

LayoutParseError::LayoutParseError(ParseErrorKind kind, std::size_t offset,
                                   const std::string& detail)
    : std::runtime_error("layout parse error (" + std::string(to_string(kind)) +
                         ") at offset " + std::to_string(offset) + ": " +
                         detail),
      kind_(kind),
      offset_(offset) {}

std::vector<LayerAtom> expand_notation(std::string_view text) {
  return NotationParser(text).run().atoms;
}

Layout parse_layout(std::string_view text) {
  Expansion ex = NotationParser(text).run();
  bool seen_attention = false, seen_feedforward = false, seen_narrow = false;
  for (std::size_t i = 0; i < ex.atoms.size(); ++i) {
    switch (ex.atoms[i].kind) {
      case AtomKind::Attention:
        seen_attention = true;
        break;
      case AtomKind::Feedforward:
        seen_feedforward = true;
        break;
      case AtomKind::NarrowMarker:
        if (seen_narrow) {
          throw LayoutParseError(ParseErrorKind::MultipleNarrow,
                                 ex.atom_offsets[i],
                                 "more than one ':' in layout");
        }
        if (!seen_attention || !seen_feedforward) {
          throw LayoutParseError(
              ParseErrorKind::NarrowWithoutContext, ex.atom_offsets[i],
              "':' needs at least one 's' and one 'f' before it");
        }
        seen_narrow = true;
        break;
    }
  }
  return Layout{std::move(ex.atoms), std::string(text)};
}

namespace {

void render_segment(const std::vector<LayerAtom>& atoms, std::size_t begin,
                    std::size_t end, std::string& out) {
  std::size_t i = begin;
  while (i < end) {
    std::size_t best_unit = 0, best_reps = 1;
    const std::size_t remaining = end - i;
    for (std::size_t u = 1; u * 2 <= remaining; ++u) {
      std::size_t reps = 1;
      while (i + (reps + 1) * u <= end &&
             std::equal(atoms.begin() + static_cast<std::ptrdiff_t>(i),
                        atoms.begin() + static_cast<std::ptrdiff_t>(i + u),
                        atoms.begin() +
                            static_cast<std::ptrdiff_t>(i + reps * u))) {
        ++reps;
      }
      // Longest covered span wins; ties keep the shorter unit.
      if (reps >= 2 && reps * u > best_reps * best_unit) {
        best_unit = u;
        best_reps = reps;
      }
    }
    if (best_unit == 0) {
      out += atom_symbol(atoms[i].kind);
      ++i;
      continue;
    }
    out += '{';
    out += std::to_string(best_reps);
    out += ',';
    for (std::size_t u = 0; u < best_unit; ++u) {
      out += atom_symbol(atoms[i + u].kind);
    }
    out += '}';
    i += best_reps * best_unit;
  }
}

}  // namespace

std::string render_layout(const Layout& layout) {
  std::string out;
  const auto& atoms = layout.atoms;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= atoms.size(); ++i) {
    if (i == atoms.size() || atoms[i].kind == AtomKind::NarrowMarker) {
      render_segment(atoms, start, i, out);
      if (i < atoms.size()) out += ':';
      start = i + 1;
    }
  }
  return out;
}

std::vector<LayoutViolation> validate_layout(const Layout& layout,
                                             [[maybe_unused]] Mode mode) {
  // Attention after the marker runs against the frozen key/value source, so
  // no atom is illegal there in either mode; only structure is checked.
  std::vector<LayoutViolation> out;
  if (layout.atoms.empty()) {
    out.push_back({ViolationKind::EmptyLayout, "layout has no atoms"});
    return out;
  }
  bool attention = false, feedforward = false;
  std::size_t markers = 0;
  for (std::size_t i = 0; i < layout.atoms.size(); ++i) {
    const AtomKind k = layout.atoms[i].kind;
    if (k == AtomKind::Attention) attention = true;
    if (k == AtomKind::Feedforward) feedforward = true;
    if (k != AtomKind::NarrowMarker) continue;
    ++markers;
    if (markers == 2) {
      out.push_back({ViolationKind::MultipleNarrow,
                     "two narrow markers (second at atom " +
                         std::to_string(i) + ")"});
    }
    if (markers == 1 && (!attention || !feedforward)) {
      out.push_back({ViolationKind::NarrowBeforeContext,
                     "narrow at atom " + std::to_string(i) +
                         " precedes any contextualization (needs 's' and "
                         "'f' before it)"});
    }
  }
  return out;
}

std::size_t active_rows(std::size_t seq_len, double active_frac) {
  // The epsilon keeps products like 0.15 * 100 = 15.000000000000002 at 15.
  const double scaled = active_frac * static_cast<double>(seq_len);
  const auto m = static_cast<std::size_t>(std::ceil(scaled - 1e-9));
  return std::clamp<std::size_t>(m, 1, seq_len);
}

std::uint64_t feedforward_flops(std::size_t rows, const ModelDims& dims) {
  return 4ull * rows * dims.hidden * dims.ffn;
}

std::uint64_t wide_attention_flops(std::size_t seq_len,
                                   const ModelDims& dims) {
  const std::uint64_t l = seq_len, d = dims.hidden;
  return 8 * l * d * d + 4 * l * l * d;
}

std::uint64_t narrowed_attention_flops(std::size_t active,
                                       std::size_t seq_len,
                                       const ModelDims& dims) {
  const std::uint64_t m = active, l = seq_len, d = dims.hidden;
  const std::uint64_t queries = 2 * m * d * d;
  const std::uint64_t keys_values = 4 * l * d * d;
  const std::uint64_t output = 2 * d * d * m;
  const std::uint64_t scores = 4 * m * l * d;
  return queries + keys_values + output + scores;
}

FlopReport estimate_flops(const Layout& layout, const ModelDims& dims,
                          std::size_t seq_len, double active_frac) {
  if (!(active_frac > 0.0 && active_frac <= 1.0)) {
    throw std::invalid_argument("active fraction must lie in (0, 1]");
  }
  if (seq_len == 0) throw std::invalid_argument("seq_len must be >= 1");
  const std::size_t m = active_rows(seq_len, active_frac);
  FlopReport report;
  bool narrowed = false;
  for (std::size_t i = 0; i < layout.atoms.size(); ++i) {
    std::uint64_t full = 0, actual = 0;
    switch (layout.atoms[i].kind) {
      case AtomKind::Attention:
        full = wide_attention_flops(seq_len, dims);
        actual = narrowed ? narrowed_attention_flops(m, seq_len, dims) : full;
        break;
      case AtomKind::Feedforward:
        full = feedforward_flops(seq_len, dims);
        actual = narrowed ? feedforward_flops(m, dims) : full;
        break;
      case AtomKind::NarrowMarker:
        narrowed = true;
        break;
    }
    report.per_atom.push_back({i, actual});
    report.total_full += full;
    report.total_narrowed += actual;
  }
  report.ratio = report.total_narrowed == 0
                     ? 1.0
                     : static_cast<double>(report.total_full) /
                           static_cast<double>(report.total_narrowed);
  return report;
}

}  // namespace narrowbert
