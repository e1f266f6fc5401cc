#pragma once

// Binary masks, column-major run-length encoding and tight-box derivation.

#include <array>
#include <cstdint>

#include "vistr/common.hpp"

namespace vistr {

struct BinaryMask {
  int64_t H = 0;
  int64_t W = 0;
  std::vector<uint8_t> data;  // row-major, 0/1

  static BinaryMask empty(int64_t H, int64_t W) {
    return {H, W, std::vector<uint8_t>(static_cast<size_t>(H * W), 0)};
  }
  uint8_t& at(int64_t h, int64_t w) { return data[h * W + w]; }
  uint8_t at(int64_t h, int64_t w) const { return data[h * W + w]; }
  int64_t area() const {
    int64_t a = 0;
    for (uint8_t v : data) a += v;
    return a;
  }
  bool operator==(const BinaryMask& o) const {
    return H == o.H && W == o.W && data == o.data;
  }
};

// Column-major run lengths, starting with the count of zeros. Sums to H*W.
inline std::vector<int64_t> rle_encode(const BinaryMask& mask) {
  std::vector<int64_t> counts;
  uint8_t cur = 0;
  int64_t run = 0;
  for (int64_t w = 0; w < mask.W; ++w)
    for (int64_t h = 0; h < mask.H; ++h) {
      uint8_t v = mask.at(h, w) ? 1 : 0;
      if (v == cur) {
        ++run;
      } else {
        counts.push_back(run);
        cur = v;
        run = 1;
      }
    }
  counts.push_back(run);
  return counts;
}

inline BinaryMask rle_decode(const std::vector<int64_t>& counts, int64_t H, int64_t W) {
  int64_t total = 0;
  for (int64_t c : counts) {
    if (c < 0) throw format_error("rle_decode: negative run length");
    total += c;
  }
  if (total != H * W)
    throw format_error("rle_decode: run lengths sum to " + std::to_string(total) +
                       ", expected " + std::to_string(H * W));
  BinaryMask mask = BinaryMask::empty(H, W);
  int64_t pos = 0;
  uint8_t cur = 0;
  for (int64_t c : counts) {
    for (int64_t i = 0; i < c; ++i) {
      int64_t w = pos / H;
      int64_t h = pos % H;
      mask.at(h, w) = cur;
      ++pos;
    }
    cur = 1 - cur;
  }
  return mask;
}

// Tight bounding box of the set pixels as normalized (cx, cy, w, h); all
// components are exact ratios of integers. Empty mask -> all zeros.
inline std::array<double, 4> derive_box(const BinaryMask& mask) {
  int64_t xmin = mask.W, xmax = -1, ymin = mask.H, ymax = -1;
  for (int64_t h = 0; h < mask.H; ++h)
    for (int64_t w = 0; w < mask.W; ++w)
      if (mask.at(h, w)) {
        xmin = std::min(xmin, w);
        xmax = std::max(xmax, w);
        ymin = std::min(ymin, h);
        ymax = std::max(ymax, h);
      }
  if (xmax < 0) return {0.0, 0.0, 0.0, 0.0};
  double W = static_cast<double>(mask.W), H = static_cast<double>(mask.H);
  return {(xmin + xmax + 1) / (2.0 * W), (ymin + ymax + 1) / (2.0 * H),
          (xmax - xmin + 1) / W, (ymax - ymin + 1) / H};
}

}  // namespace vistr
