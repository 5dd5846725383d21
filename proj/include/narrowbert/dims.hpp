#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace narrowbert {

struct ModelDims {
  std::size_t hidden = 64;
  std::size_t heads = 4;
  std::size_t ffn = 256;
  std::size_t vocab = 1000;
  std::size_t max_len = 128;
  double ln_eps = 1e-12;

  std::size_t head_dim() const { return hidden / heads; }

  // Throws std::invalid_argument describing the first broken invariant.
  void validate() const {
    if (hidden == 0 || heads == 0 || ffn == 0 || max_len == 0) {
      throw std::invalid_argument("model dimensions must be positive");
    }
    if (hidden % heads != 0) {
      throw std::invalid_argument("hidden size " + std::to_string(hidden) +
                                  " not divisible by " +
                                  std::to_string(heads) + " heads");
    }
    if (vocab <= 5) {
      throw std::invalid_argument(
          "vocab must hold the 5 special tokens plus at least one word");
    }
    if (!(ln_eps > 0.0)) throw std::invalid_argument("ln_eps must be > 0");
  }

  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

}  // namespace narrowbert
