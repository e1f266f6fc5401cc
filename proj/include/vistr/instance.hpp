#pragma once

// Ground-truth instance sequences: one category, per-frame boxes and masks.

#include "vistr/mask.hpp"

namespace vistr {

using Box = std::array<double, 4>;  // meaning depends on context: cxcywh or xyxy

struct InstanceSequenceTruth {
  int category_id = 0;
  std::vector<Box> boxes;         // normalized cxcywh per frame
  std::vector<BinaryMask> masks;  // per frame, H0 x W0
  std::vector<bool> presence;
};

}  // namespace vistr
