#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>

#include "narrowbert/data.hpp"
#include "narrowbert/model.hpp"
#include "narrowbert/training.hpp"

// Single-file little-endian checkpoint:
//
//   "NBRT" u32 version u32 value_bytes(4|8)
//   u64 hidden heads ffn vocab max_len  f64 ln_eps  u64 num_classes
//   str layout  u64 n_words str*n_words          (vocab words after specials)
//   u64 n_params { str name u32 rank u64 dims[rank] value[prod(dims)] }*
//   u8 has_adam [u64 t f64 beta1 beta2 eps { m-blob v-blob }*n_params]
//
// str is u32 length + bytes. Values are IEEE-754 of value_bytes width.

namespace narrowbert {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class CheckpointErrorKind { Io, BadMagic, VersionMismatch, Truncated, ShapeMismatch, Malformed };

const char* to_string(CheckpointErrorKind kind);

class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(CheckpointErrorKind kind, const std::string& detail)
      : std::runtime_error(std::string(to_string(kind)) + ": " + detail),
        kind_(kind) {}
  CheckpointErrorKind kind() const { return kind_; }

 private:
  CheckpointErrorKind kind_;
};

struct CheckpointHeader {
  std::uint32_t version = kCheckpointVersion;
  std::uint32_t value_bytes = 4;
  ModelDims dims;
  std::size_t num_classes = 0;
  std::string layout;
};

template <typename T>
struct LoadedModel {
  Encoder<T> model;
  Vocab vocab;
  std::optional<Adam<T>> optimizer;
};

template <typename T>
void save_checkpoint(std::ostream& out, const Encoder<T>& model,
                     const Vocab& vocab, const Adam<T>* optimizer = nullptr);
template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Encoder<T>& model,
                     const Vocab& vocab, const Adam<T>* optimizer = nullptr);

// Reads just the header fields (through the layout string).
CheckpointHeader read_checkpoint_header(std::istream& in);
CheckpointHeader read_checkpoint_header(const std::filesystem::path& path);

// Values stored at the other precision are converted; same precision loads
// bit-exactly.
template <typename T>
LoadedModel<T> load_checkpoint(std::istream& in);
template <typename T>
LoadedModel<T> load_checkpoint(const std::filesystem::path& path);

}  // namespace narrowbert
