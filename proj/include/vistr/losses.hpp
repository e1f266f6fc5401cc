#pragma once

// The Hungarian loss: class negative log-likelihood over all prediction
// slots, sequence-level box loss (L1 + GIoU) and sequence-level mask loss
// (Dice + Focal), assembled over the optimal assignment. The assignment is
// computed on detached values and held constant during backward.

#include "vistr/matching.hpp"
#include "vistr/nn_ops.hpp"

namespace vistr {

struct LossWeights {
  double lambda_iou = 2.0;
  double lambda_l1 = 5.0;
  double lambda_mask = 1.0;
  double background_class_weight = 0.1;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  double dice_smooth = 1.0;
  ClassReduction class_reduction = ClassReduction::mean;

  void validate() const {
    for (double v : {lambda_iou, lambda_l1, lambda_mask, background_class_weight,
                     focal_alpha, focal_gamma, dice_smooth})
      if (v < 0) throw config_error("loss weights must be nonnegative");
  }
  BoxCostWeights box_weights() const { return {lambda_iou, lambda_l1}; }
};

struct LossBreakdown {
  double total = 0;
  double class_nll = 0;
  double box = 0;
  double mask = 0;
};

// Softmax on raw values (no graph), grouped for the matching cost.
template <typename S>
SequencePredictions extract_sequence_predictions(const Tensor<S>& class_logits,
                                                 const Tensor<S>& boxes, int64_t n,
                                                 int64_t T) {
  int64_t N = class_logits.dim(0);
  int64_t C = class_logits.dim(1);
  if (N != n * T) throw std::invalid_argument("extract_sequence_predictions: N != n*T");
  SequencePredictions sp;
  sp.n = n;
  sp.T = T;
  sp.K = C - 1;
  sp.probs.resize(static_cast<size_t>(N * C));
  sp.boxes.resize(static_cast<size_t>(N * 4));
  const S* lp = class_logits.data();
  for (int64_t r = 0; r < N; ++r) {
    double mx = static_cast<double>(lp[r * C]);
    for (int64_t c = 1; c < C; ++c) mx = std::max(mx, static_cast<double>(lp[r * C + c]));
    double z = 0;
    for (int64_t c = 0; c < C; ++c) {
      double e = std::exp(static_cast<double>(lp[r * C + c]) - mx);
      sp.probs[r * C + c] = e;
      z += e;
    }
    for (int64_t c = 0; c < C; ++c) sp.probs[r * C + c] /= z;
  }
  const S* bp = boxes.data();
  for (int64_t i = 0; i < N * 4; ++i) sp.boxes[i] = static_cast<double>(bp[i]);
  return sp;
}

// NLL of the target class per prediction slot. Matched sequences target
// their class on all T frames; every other slot targets background with
// weight background_class_weight. Reduction is the weighted mean.
template <typename S>
Tensor<S> classification_loss(const Tensor<S>& class_logits, int64_t n, int64_t T,
                              const Assignment& assign,
                              const std::vector<const InstanceSequenceTruth*>& truths,
                              const LossWeights& w) {
  int64_t N = n * T;
  int64_t C = class_logits.dim(1);
  int64_t background = C - 1;
  std::vector<S> weights(static_cast<size_t>(N * C), S(0));
  double weight_sum = 0;
  std::vector<int64_t> target(static_cast<size_t>(n), background);
  for (size_t i = 0; i < truths.size(); ++i)
    if (truths[i] != nullptr) target[assign.sigma[i]] = truths[i]->category_id;
  for (int64_t t = 0; t < T; ++t)
    for (int64_t j = 0; j < n; ++j) {
      double wgt = target[j] == background ? w.background_class_weight : 1.0;
      weights[(t * n + j) * C + target[j]] = static_cast<S>(wgt);
      weight_sum += wgt;
    }
  auto wt = Tensor<S>::from_data({N, C}, std::move(weights));
  auto logp = log_softmax(class_logits, 1);
  return neg(sum(mul(wt, logp))) * static_cast<S>(1.0 / weight_sum);
}

// 1 - (2*sum(p*g) + s) / (sum(p) + sum(g) + s) on probabilities.
template <typename S>
Tensor<S> dice_loss(const Tensor<S>& pred_probs, const Tensor<S>& gt, S smooth) {
  if (pred_probs.shape() != gt.shape())
    throw std::invalid_argument("dice_loss: shape mismatch");
  auto num = sum(mul(pred_probs, gt)) * S(2) + smooth;
  auto den = sum(pred_probs) + sum(gt) + smooth;
  return S(1) - div(num, den);
}

// Mean over pixels of -alpha_t * (1 - p_t)^gamma * log(p_t) on logits, with
// p_t the probability of the true label. Stable via softplus.
template <typename S>
Tensor<S> focal_loss(const Tensor<S>& pred_logits, const Tensor<S>& gt, S alpha, S gamma) {
  if (pred_logits.shape() != gt.shape())
    throw std::invalid_argument("focal_loss: shape mismatch");
  auto p = sigmoid(pred_logits);
  // -log p_t = softplus(-x) for positives, softplus(x) for negatives
  auto neglog_pt = add(mul(gt, softplus(neg(pred_logits))),
                       mul(S(1) - gt, softplus(pred_logits)));
  auto one_minus_pt = add(mul(gt, S(1) - p), mul(S(1) - gt, p));
  auto alpha_t = add(mul_scalar(gt, alpha), mul_scalar(S(1) - gt, S(1) - alpha));
  return mean(mul(alpha_t, mul(pow_scalar(one_minus_pt, gamma), neglog_pt)));
}

template <typename S>
Tensor<S> mask_tensor(const BinaryMask& m) {
  std::vector<S> v(m.data.size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<S>(m.data[i]);
  return Tensor<S>::from_data({m.H, m.W}, std::move(v));
}

// lambda_mask * (1/T) * sum_t [Dice + Focal] on full-resolution logits
// [T, H, W]. Frames where the instance is absent use an all-zero mask.
template <typename S>
Tensor<S> mask_sequence_loss(const Tensor<S>& pred_logits,
                             const std::vector<BinaryMask>& gt_masks,
                             const std::vector<bool>& presence, const LossWeights& w) {
  int64_t T = pred_logits.dim(0);
  if (static_cast<int64_t>(gt_masks.size()) != T)
    throw std::invalid_argument("mask_sequence_loss: frame count mismatch");
  if (w.lambda_mask == 0) return Tensor<S>::scalar(S(0));
  Tensor<S> total = Tensor<S>::scalar(S(0));
  for (int64_t t = 0; t < T; ++t) {
    auto lt = reshape(slice(pred_logits, {{t, t + 1}}),
                      {pred_logits.dim(1), pred_logits.dim(2)});
    Tensor<S> gt;
    if (presence.empty() || presence[t]) {
      if (gt_masks[t].H != pred_logits.dim(1) || gt_masks[t].W != pred_logits.dim(2))
        throw std::invalid_argument("mask_sequence_loss: mask resolution mismatch");
      gt = mask_tensor<S>(gt_masks[t]);
    } else {
      gt = Tensor<S>::zeros({pred_logits.dim(1), pred_logits.dim(2)});
    }
    auto dice = dice_loss(sigmoid(lt), gt, static_cast<S>(w.dice_smooth));
    auto focal = focal_loss(lt, gt, static_cast<S>(w.focal_alpha),
                            static_cast<S>(w.focal_gamma));
    total = add(total, add(dice, focal));
  }
  return total * static_cast<S>(w.lambda_mask / static_cast<double>(T));
}

namespace detail {

// Differentiable GIoU for aligned rows of two [M,4] xyxy tensors -> [M,1].
// Assumes nonnegative extents (holds for sigmoid boxes and real truths).
template <typename S>
Tensor<S> giou_rows(const Tensor<S>& a, const Tensor<S>& b) {
  auto col = [](const Tensor<S>& t, int64_t c) {
    return slice(t, {{0, -1}, {c, c + 1}});
  };
  auto ax1 = col(a, 0), ay1 = col(a, 1), ax2 = col(a, 2), ay2 = col(a, 3);
  auto bx1 = col(b, 0), by1 = col(b, 1), bx2 = col(b, 2), by2 = col(b, 3);
  auto iw = relu(sub(minimum(ax2, bx2), maximum(ax1, bx1)));
  auto ih = relu(sub(minimum(ay2, by2), maximum(ay1, by1)));
  auto inter = mul(iw, ih);
  auto area_a = mul(sub(ax2, ax1), sub(ay2, ay1));
  auto area_b = mul(sub(bx2, bx1), sub(by2, by1));
  auto uni = sub(add(area_a, area_b), inter);
  auto ew = sub(maximum(ax2, bx2), minimum(ax1, bx1));
  auto eh = sub(maximum(ay2, by2), minimum(ay1, by1));
  auto enclose = mul(ew, eh);
  return sub(div(inter, uni), div(sub(enclose, uni), enclose));
}

template <typename S>
Tensor<S> cxcywh_to_xyxy_rows(const Tensor<S>& b) {
  auto col = [&](int64_t c) { return slice(b, {{0, -1}, {c, c + 1}}); };
  auto cx = col(0), cy = col(1), w = col(2), h = col(3);
  auto hw = mul_scalar(w, S(0.5));
  auto hh = mul_scalar(h, S(0.5));
  return concat<S>({sub(cx, hw), sub(cy, hh), add(cx, hw), add(cy, hh)}, 1);
}

}  // namespace detail

// Mean over present frames of lambda_iou*(1-GIoU) + lambda_l1*L1; pred is a
// [T,4] cxcywh tensor in the graph, gt is constant.
template <typename S>
Tensor<S> sequence_box_loss(const Tensor<S>& pred, const InstanceSequenceTruth& truth,
                            const LossWeights& w) {
  int64_t T = pred.dim(0);
  std::vector<S> gt_data(static_cast<size_t>(T * 4));
  std::vector<S> frame_w(static_cast<size_t>(T), S(0));
  int64_t count = 0;
  for (int64_t t = 0; t < T; ++t) {
    bool present = truth.presence.empty() || truth.presence[t];
    if (present) {
      frame_w[t] = S(1);
      ++count;
    }
    for (int k = 0; k < 4; ++k) gt_data[t * 4 + k] = static_cast<S>(truth.boxes[t][k]);
  }
  if (count == 0) return Tensor<S>::scalar(S(0));
  auto gt = Tensor<S>::from_data({T, 4}, std::move(gt_data));
  auto fw = Tensor<S>::from_data({T, 1}, std::move(frame_w));
  auto l1 = sum(mul(abs(sub(pred, gt)), fw));
  auto giou = detail::giou_rows(detail::cxcywh_to_xyxy_rows(pred),
                                detail::cxcywh_to_xyxy_rows(gt));
  auto iou_term = sum(mul(sub(Tensor<S>::ones({T, 1}), giou), fw));
  auto total = add(mul_scalar(iou_term, static_cast<S>(w.lambda_iou)),
                   mul_scalar(l1, static_cast<S>(w.lambda_l1)));
  return total * static_cast<S>(1.0 / static_cast<double>(count));
}

template <typename S>
struct HungarianLossResult {
  Tensor<S> total;
  LossBreakdown breakdown;
  Assignment assignment;
};

// Loss with a fixed assignment (used directly by gradient checks).
// class_logits [N,K+1], boxes [N,4] cxcywh in [0,1], mask_logits
// [n,1,T,h,w] at reduced resolution (upsampled internally to H0 x W0);
// an undefined mask_logits tensor skips the mask term.
template <typename S>
HungarianLossResult<S> hungarian_loss_with_assignment(
    const Tensor<S>& class_logits, const Tensor<S>& boxes, const Tensor<S>& mask_logits,
    int64_t n, int64_t T, const std::vector<const InstanceSequenceTruth*>& truths,
    const Assignment& assign, const LossWeights& w, int64_t H0, int64_t W0) {
  w.validate();
  int64_t real = 0;
  for (auto* t : truths)
    if (t) ++real;
  auto cls = classification_loss(class_logits, n, T, assign, truths, w);

  auto boxes_grouped = permute(reshape(boxes, {T, n, 4}), {1, 0, 2});  // [n,T,4]
  Tensor<S> box_total = Tensor<S>::scalar(S(0));
  Tensor<S> mask_total = Tensor<S>::scalar(S(0));
  for (size_t i = 0; i < truths.size(); ++i) {
    if (!truths[i]) continue;
    int64_t j = assign.sigma[i];
    auto pred_seq = reshape(slice(boxes_grouped, {{j, j + 1}}), {T, 4});
    box_total = add(box_total, sequence_box_loss(pred_seq, *truths[i], w));
    if (mask_logits.defined()) {
      int64_t h = mask_logits.dim(3), wdim = mask_logits.dim(4);
      auto inst = reshape(slice(mask_logits, {{j, j + 1}}), {T, 1, h, wdim});
      auto up = upsample_bilinear(inst, H0, W0);
      mask_total = add(mask_total, mask_sequence_loss(reshape(up, {T, H0, W0}),
                                                      truths[i]->masks,
                                                      truths[i]->presence, w));
    }
  }
  S norm = static_cast<S>(1.0 / std::max<int64_t>(1, real));
  box_total = box_total * norm;
  mask_total = mask_total * norm;
  HungarianLossResult<S> res;
  res.total = add(cls, add(box_total, mask_total));
  res.breakdown = {static_cast<double>(res.total.item()),
                   static_cast<double>(cls.item()),
                   static_cast<double>(box_total.item()),
                   static_cast<double>(mask_total.item())};
  res.assignment = assign;
  return res;
}

// Full Hungarian loss: match on detached values, then score.
template <typename S>
HungarianLossResult<S> hungarian_loss(const Tensor<S>& class_logits, const Tensor<S>& boxes,
                                      const Tensor<S>& mask_logits, int64_t n, int64_t T,
                                      const std::vector<InstanceSequenceTruth>& truths,
                                      const LossWeights& w, int64_t H0, int64_t W0) {
  if (static_cast<int64_t>(truths.size()) > n)
    throw std::invalid_argument("hungarian_loss: more truths than prediction slots");
  std::vector<const InstanceSequenceTruth*> padded(static_cast<size_t>(n), nullptr);
  for (size_t i = 0; i < truths.size(); ++i) padded[i] = &truths[i];
  auto sp = extract_sequence_predictions(class_logits, boxes, n, T);
  auto cm = matching_cost_matrix(sp, padded, w.box_weights(), w.class_reduction);
  auto assign = hungarian(cm);
  return hungarian_loss_with_assignment(class_logits, boxes, mask_logits, n, T, padded,
                                        assign, w, H0, W0);
}

}  // namespace vistr
