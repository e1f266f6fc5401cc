#pragma once

// Instance sequence matching: box geometry, the sequence-level matching cost
// (class probability + box terms) and optimal bipartite assignment via the
// Hungarian algorithm. Everything here is scalar double arithmetic with no
// autodiff graph; the assignment is treated as a constant by the losses.

#include <limits>

#include "vistr/instance.hpp"

namespace vistr {

// (cx, cy, w, h) -> (x1, y1, x2, y2); non-positive extents clamp to points.
inline Box box_cxcywh_to_xyxy(const Box& b) {
  double w = std::max(b[2], 0.0);
  double h = std::max(b[3], 0.0);
  return {b[0] - w / 2, b[1] - h / 2, b[0] + w / 2, b[1] + h / 2};
}

// Generalized IoU of xyxy boxes: IoU - |C \ (A u B)| / |C| with C the
// smallest enclosing box. Degenerate coincident points return 0.
inline double generalized_iou(const Box& a, const Box& b) {
  double iw = std::min(a[2], b[2]) - std::max(a[0], b[0]);
  double ih = std::min(a[3], b[3]) - std::max(a[1], b[1]);
  double inter = (iw > 0 && ih > 0) ? iw * ih : 0.0;
  double area_a = (a[2] - a[0]) * (a[3] - a[1]);
  double area_b = (b[2] - b[0]) * (b[3] - b[1]);
  double uni = area_a + area_b - inter;
  double ew = std::max(a[2], b[2]) - std::min(a[0], b[0]);
  double eh = std::max(a[3], b[3]) - std::min(a[1], b[1]);
  double enclose = ew * eh;
  if (enclose <= 0.0) return 0.0;
  double iou = uni > 0.0 ? inter / uni : 0.0;
  return iou - (enclose - uni) / enclose;
}

struct BoxCostWeights {
  double lambda_iou = 2.0;  // DETR defaults
  double lambda_l1 = 5.0;
};

// Mean over present frames of lambda_iou*(1 - GIoU) + lambda_l1*L1 on
// normalized cxcywh boxes. An empty presence vector means all frames count.
inline double sequence_box_cost(const std::vector<Box>& pred, const std::vector<Box>& gt,
                                const BoxCostWeights& w,
                                const std::vector<bool>& presence = {}) {
  if (pred.size() != gt.size())
    throw std::invalid_argument("sequence_box_cost: frame counts differ");
  double total = 0.0;
  int64_t count = 0;
  for (size_t t = 0; t < pred.size(); ++t) {
    if (!presence.empty() && !presence[t]) continue;
    double l1 = 0.0;
    for (int k = 0; k < 4; ++k) l1 += std::abs(pred[t][k] - gt[t][k]);
    double giou = generalized_iou(box_cxcywh_to_xyxy(pred[t]), box_cxcywh_to_xyxy(gt[t]));
    total += w.lambda_iou * (1.0 - giou) + w.lambda_l1 * l1;
    ++count;
  }
  return count > 0 ? total / static_cast<double>(count) : 0.0;
}

// Permutation sigma maps ground-truth row i to prediction column sigma[i].
struct Assignment {
  std::vector<int64_t> sigma;
  double cost = 0.0;
};

struct CostMatrix {
  int64_t n = 0;
  std::vector<double> values;  // row-major n x n; row = truth, column = prediction
  double at(int64_t i, int64_t j) const { return values[i * n + j]; }
};

// Jonker-Volgenant style potentials, O(n^3). Among equal-cost alternatives the
// strict < comparisons keep the lowest column index, so results are
// reproducible.
inline Assignment hungarian(const CostMatrix& cm) {
  const int64_t n = cm.n;
  for (double v : cm.values)
    if (!std::isfinite(v)) throw std::invalid_argument("hungarian: non-finite cost entry");
  Assignment out;
  out.sigma.assign(n, -1);
  if (n == 0) return out;
  const double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1, 0.0);
  std::vector<int64_t> p(n + 1, 0), way(n + 1, 0);
  for (int64_t i = 1; i <= n; ++i) {
    p[0] = i;
    int64_t j0 = 0;
    std::fill(minv.begin(), minv.end(), kInf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      int64_t i0 = p[j0], j1 = 0;
      double delta = kInf;
      for (int64_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        double cur = cm.values[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int64_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      int64_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  for (int64_t j = 1; j <= n; ++j)
    if (p[j] > 0) out.sigma[p[j] - 1] = j - 1;
  for (int64_t i = 0; i < n; ++i) out.cost += cm.at(i, out.sigma[i]);
  return out;
}

enum class ClassReduction { mean, sum };

// Softmaxed per-frame predictions grouped by the raster rule: prediction
// j = t*n + i is instance slot i of frame t.
struct SequencePredictions {
  int64_t n = 0;  // instance slots per frame
  int64_t T = 0;  // frames
  int64_t K = 0;  // real categories; class row width is K+1 with background last
  std::vector<double> probs;  // [n*T, K+1]
  std::vector<double> boxes;  // [n*T, 4] normalized cxcywh

  Box box_at(int64_t t, int64_t slot) const {
    const double* b = &boxes[(t * n + slot) * 4];
    return {b[0], b[1], b[2], b[3]};
  }
  double prob_at(int64_t t, int64_t slot, int64_t cls) const {
    return probs[(t * n + slot) * (K + 1) + cls];
  }
};

// Entry (i, j): -reduce_t p_j,t(c_i) + sequence box cost; rows padded with
// empty truths (nullptr) are all zeros so they absorb unmatched predictions
// at no cost.
inline CostMatrix matching_cost_matrix(const SequencePredictions& preds,
                                       const std::vector<const InstanceSequenceTruth*>& truths,
                                       const BoxCostWeights& w,
                                       ClassReduction reduction = ClassReduction::mean) {
  const int64_t n = preds.n;
  if (static_cast<int64_t>(truths.size()) != n)
    throw std::invalid_argument("matching_cost_matrix: truths must be padded to n");
  CostMatrix cm;
  cm.n = n;
  cm.values.assign(static_cast<size_t>(n * n), 0.0);
  for (int64_t i = 0; i < n; ++i) {
    const InstanceSequenceTruth* tr = truths[i];
    if (tr == nullptr) continue;  // padding row stays zero
    for (int64_t j = 0; j < n; ++j) {
      double cls = 0.0;
      for (int64_t t = 0; t < preds.T; ++t) cls += preds.prob_at(t, j, tr->category_id);
      if (reduction == ClassReduction::mean) cls /= static_cast<double>(preds.T);
      std::vector<Box> pred_seq(preds.T);
      for (int64_t t = 0; t < preds.T; ++t) pred_seq[t] = preds.box_at(t, j);
      cm.values[i * n + j] =
          -cls + sequence_box_cost(pred_seq, tr->boxes, w, tr->presence);
    }
  }
  return cm;
}

}  // namespace vistr
