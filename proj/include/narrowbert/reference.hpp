#pragma once

#include "narrowbert/model.hpp"

namespace narrowbert {

// Serial per-sequence encoder that never gathers: every position is carried
// through every atom. With freeze_at_marker, attention after ':' takes its
// keys/values from the hidden states captured at the marker (all positions
// still act as queries); without it the marker is ignored. Each value is
// accumulated in the same order as the parallel engine, so in 64-bit mode the
// two agree bit for bit wherever their definitions coincide.
template <typename T>
Tensor<T> reference_encode_all(const Encoder<T>& model, const Batch& batch,
                               bool freeze_at_marker = true);

// reference_encode_all gathered at the active positions of `mode`.
template <typename T>
Tensor<T> reference_encode(const Encoder<T>& model, const Batch& batch,
                           Mode mode, bool freeze_at_marker = true);

}  // namespace narrowbert
