#pragma once

#include <cstddef>
#include <span>

#include "capslu/autodiff.hpp"

namespace capslu::ad {

enum class Direction { forward, reverse };

/// One recurrent GRU layer over a padded batch.
///
///   z_t = sigmoid(x_t W_z + h_{t-1} U_z + b_z)
///   r_t = sigmoid(x_t W_r + h_{t-1} U_r + b_r)
///   n_t = tanh(x_t W_n + (r_t * h_{t-1}) U_n + b_n)
///   h_t = (1 - z_t) * h_{t-1} + z_t * n_t,  h_0 = 0
///
/// `x` is [B, T, D_in]; `w_x` is [D_in, 3U] and `w_h` is [U, 3U] with gate
/// columns ordered z | r | n; `b` is [3U]. Frames at or beyond lengths[b]
/// leave the state untouched and emit zeros, so a padded sequence produces
/// exactly the outputs of its unpadded prefix. Direction::reverse consumes
/// each sequence from its last valid frame back to frame 0 and writes the
/// outputs at their original time positions.
template <typename T>
Var<T> gru_layer(Var<T> x, std::span<const std::size_t> lengths, Var<T> w_x, Var<T> w_h, Var<T> b,
                 Direction dir);

}  // namespace capslu::ad
