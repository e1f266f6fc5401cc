#pragma once

// Fixed 3D sinusoidal positional encoding. The d channels are split into
// three equal blocks ordered (temporal, horizontal, vertical); within a block
// channel 2k holds sin(pos * w_k) and channel 2k+1 holds cos(pos * w_k) with
// w_k = 1 / base^(2k / (d/3)). The encoding is a gradient-free constant.

#include "vistr/tensor.hpp"

namespace vistr {

struct PositionalEncodingConfig {
  int64_t d = 96;
  int64_t T = 6;
  int64_t H = 12;
  int64_t W = 20;
  double base = 10000.0;
  bool enabled = true;

  void validate() const {
    if (d % 3 != 0)
      throw config_error("positional encoding: d=" + std::to_string(d) +
                         " is not divisible by 3");
    if ((d / 3) % 2 != 0)
      throw config_error("positional encoding: d/3 must be even, got " +
                         std::to_string(d / 3));
    if (T < 1 || H < 1 || W < 1) throw config_error("positional encoding: empty extents");
  }
};

namespace detail {

// One axis block of d3 channels at real-valued position pos.
inline void fill_axis_block(double pos, int64_t d3, double base, double* out) {
  for (int64_t k = 0; k < d3 / 2; ++k) {
    double w = 1.0 / std::pow(base, 2.0 * static_cast<double>(k) /
                                        static_cast<double>(d3));
    out[2 * k] = std::sin(pos * w);
    out[2 * k + 1] = std::cos(pos * w);
  }
}

}  // namespace detail

// Returns [d, T, H, W]. Block 0 encodes t, block 1 encodes w (horizontal),
// block 2 encodes h (vertical).
template <typename S>
Tensor<S> positional_encoding_3d(const PositionalEncodingConfig& cfg) {
  cfg.validate();
  int64_t d3 = cfg.d / 3;
  Shape shape = {cfg.d, cfg.T, cfg.H, cfg.W};
  std::vector<S> data(static_cast<size_t>(numel_of(shape)), S(0));
  int64_t HW = cfg.H * cfg.W;
  int64_t THW = cfg.T * HW;
  std::vector<double> block(static_cast<size_t>(d3));
  auto write_block = [&](int64_t block_idx, int64_t t, int64_t h, int64_t w) {
    int64_t pos_off = t * HW + h * cfg.W + w;
    for (int64_t c = 0; c < d3; ++c)
      data[(block_idx * d3 + c) * THW + pos_off] = static_cast<S>(block[c]);
  };
  // temporal block: value depends only on t, computed once per t
  for (int64_t t = 0; t < cfg.T; ++t) {
    detail::fill_axis_block(static_cast<double>(t), d3, cfg.base, block.data());
    for (int64_t h = 0; h < cfg.H; ++h)
      for (int64_t w = 0; w < cfg.W; ++w) write_block(0, t, h, w);
  }
  // horizontal block: depends on w
  for (int64_t w = 0; w < cfg.W; ++w) {
    detail::fill_axis_block(static_cast<double>(w), d3, cfg.base, block.data());
    for (int64_t t = 0; t < cfg.T; ++t)
      for (int64_t h = 0; h < cfg.H; ++h) write_block(1, t, h, w);
  }
  // vertical block: depends on h
  for (int64_t h = 0; h < cfg.H; ++h) {
    detail::fill_axis_block(static_cast<double>(h), d3, cfg.base, block.data());
    for (int64_t t = 0; t < cfg.T; ++t)
      for (int64_t w = 0; w < cfg.W; ++w) write_block(2, t, h, w);
  }
  return Tensor<S>::from_data(std::move(shape), std::move(data));
}

// Encoding flattened to sequence layout [T*H*W, d] in the shared raster
// order (see sequence_index in common.hpp).
template <typename S>
Tensor<S> positional_encoding_sequence(const PositionalEncodingConfig& cfg) {
  auto pe = positional_encoding_3d<S>(cfg);  // [d, T, H, W]
  return reshape(permute(pe, {1, 2, 3, 0}), {cfg.T * cfg.H * cfg.W, cfg.d});
}

// features [T*H*W, d] + flattened encoding; identity when cfg.enabled is false.
template <typename S>
Tensor<S> add_positional(const Tensor<S>& features, const PositionalEncodingConfig& cfg) {
  if (!cfg.enabled) return features;
  cfg.validate();
  if (features.rank() != 2 || features.dim(0) != cfg.T * cfg.H * cfg.W ||
      features.dim(1) != cfg.d)
    throw std::invalid_argument("add_positional: features " + shape_str(features.shape()) +
                                " do not match encoding extents");
  return add(features, positional_encoding_sequence<S>(cfg));
}

}  // namespace vistr
