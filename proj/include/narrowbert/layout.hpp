#pragma once

// Layer-layout notation: `s` is one self-attention sublayer, `f` one
// feedforward sublayer, `:` the narrowing step that gathers active positions,
// and `{n,unit}` repeats a unit string of s/f n times. Example: "sf:{5,sf}".

#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "narrowbert/dims.hpp"

namespace narrowbert {

enum class AtomKind { Attention, Feedforward, NarrowMarker };

struct LayerAtom {
  AtomKind kind;
  friend bool operator==(const LayerAtom&, const LayerAtom&) = default;
};

char atom_symbol(AtomKind kind);
const char* atom_name(AtomKind kind);

struct Layout {
  std::vector<LayerAtom> atoms;
  std::string source_text;

  std::optional<std::size_t> narrow_index() const;
  bool has_narrow() const { return narrow_index().has_value(); }
  std::size_t count(AtomKind kind) const;
};

enum class ParseErrorKind {
  Empty,
  UnknownCharacter,
  MalformedGroup,
  ZeroRepetition,
  MultipleNarrow,
  NarrowWithoutContext,
};

const char* to_string(ParseErrorKind kind);

class LayoutParseError : public std::runtime_error {
 public:
  LayoutParseError(ParseErrorKind kind, std::size_t offset,
                   const std::string& detail);

  ParseErrorKind kind() const { return kind_; }
  std::size_t offset() const { return offset_; }

 private:
  ParseErrorKind kind_;
  std::size_t offset_;
};

// Syntax-only expansion of the grammar; accepts structurally invalid
// sequences such as ":sf" or "sf:sf:sf". Throws LayoutParseError.
std::vector<LayerAtom> expand_notation(std::string_view text);

// Expansion plus the structural rules: at most one ':' and at least one
// `s` and one `f` before it.
Layout parse_layout(std::string_view text);

// Canonical text: maximal repeated runs become `{n,unit}` when n >= 2.
std::string render_layout(const Layout& layout);

enum class Mode { Pretrain, Classify };

enum class ViolationKind {
  EmptyLayout,
  MultipleNarrow,
  NarrowBeforeContext,
};

struct LayoutViolation {
  ViolationKind kind;
  std::string message;
};

// Empty result means valid.
std::vector<LayoutViolation> validate_layout(const Layout& layout, Mode mode);

struct AtomFlops {
  std::size_t atom_index;
  std::uint64_t flops;
};

struct FlopReport {
  std::vector<AtomFlops> per_atom;  // with narrowing applied
  std::uint64_t total_full = 0;
  std::uint64_t total_narrowed = 0;
  double ratio = 1.0;
};

// max(1, ceil(fraction * seq_len)).
std::size_t active_rows(std::size_t seq_len, double active_frac);

// Closed-form dense counts, one multiply-accumulate = 2 flops.
std::uint64_t feedforward_flops(std::size_t rows, const ModelDims& dims);
std::uint64_t wide_attention_flops(std::size_t seq_len, const ModelDims& dims);
std::uint64_t narrowed_attention_flops(std::size_t active, std::size_t seq_len,
                                       const ModelDims& dims);

FlopReport estimate_flops(const Layout& layout, const ModelDims& dims,
                          std::size_t seq_len, double active_frac);

}  // namespace narrowbert
