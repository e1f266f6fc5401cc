#pragma once

// Inference post-processing and the AP/AR evaluation protocol under video
// sequence IoU: per category and IoU threshold, results are greedily matched
// to ground truth in score order, precision-recall curves are integrated with
// 101-point interpolation, and AR@k limits results to the top-k per video.
// Categories without any ground truth are excluded from the means.

#include <map>
#include <set>

#include "vistr/losses.hpp"
#include "vistr/synthdata.hpp"

namespace vistr {

struct InstanceResult {
  int64_t video_id = 0;
  int category = 0;
  double score = 0.0;
  std::vector<BinaryMask> masks;  // per frame, H0 x W0
};

struct EvalReport {
  double AP = 0, AP50 = 0, AP75 = 0, AR1 = 0, AR10 = 0;
  std::vector<double> thresholds;
  std::vector<double> ap_per_threshold;  // mean over categories, per threshold
};

// Frame-summed intersection over frame-summed union. Two empty sequences
// count as a perfect match.
inline double sequence_mask_iou(const std::vector<BinaryMask>& pred,
                                const std::vector<BinaryMask>& gt) {
  if (pred.size() != gt.size())
    throw std::invalid_argument("sequence_mask_iou: frame counts differ");
  int64_t inter = 0, uni = 0;
  for (size_t t = 0; t < pred.size(); ++t) {
    if (pred[t].H != gt[t].H || pred[t].W != gt[t].W)
      throw std::invalid_argument("sequence_mask_iou: resolution mismatch");
    for (size_t p = 0; p < pred[t].data.size(); ++p) {
      bool a = pred[t].data[p], b = gt[t].data[p];
      inter += a && b;
      uni += a || b;
    }
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

// Turns one clip's raw predictions into kept instance results: per-frame
// argmax category, majority vote over frames (ties to the lower id), score =
// mean probability of the voted category, background or score <= threshold
// dropped, masks = sigmoid(logits) > 0.5 upsampled to full resolution.
template <typename S>
std::vector<InstanceResult> postprocess(const SequencePredictions& sp,
                                        const Tensor<S>& mask_logits, int64_t H0,
                                        int64_t W0, int64_t video_id,
                                        double keep_threshold = 1e-3) {
  NoGradGuard ng;
  const int64_t n = sp.n, T = sp.T, K = sp.K;
  std::vector<InstanceResult> out;
  for (int64_t j = 0; j < n; ++j) {
    std::vector<int64_t> votes(static_cast<size_t>(K + 1), 0);
    for (int64_t t = 0; t < T; ++t) {
      int64_t arg = 0;
      for (int64_t c = 1; c <= K; ++c)
        if (sp.prob_at(t, j, c) > sp.prob_at(t, j, arg)) arg = c;
      ++votes[arg];
    }
    int64_t category = 0;
    for (int64_t c = 1; c <= K; ++c)
      if (votes[c] > votes[category]) category = c;  // ties keep the lower id
    if (category == K) continue;                     // background sequence
    double score = 0;
    for (int64_t t = 0; t < T; ++t) score += sp.prob_at(t, j, category);
    score /= static_cast<double>(T);
    if (score <= keep_threshold) continue;

    InstanceResult res;
    res.video_id = video_id;
    res.category = static_cast<int>(category);
    res.score = score;
    int64_t h = mask_logits.dim(3), w = mask_logits.dim(4);
    auto inst = reshape(slice(mask_logits, {{j, j + 1}}), {T, 1, h, w});
    auto up = upsample_bilinear(inst, H0, W0);
    for (int64_t t = 0; t < T; ++t) {
      BinaryMask m = BinaryMask::empty(H0, W0);
      const S* logits = up.data() + t * H0 * W0;
      for (int64_t p = 0; p < H0 * W0; ++p) m.data[p] = logits[p] > S(0) ? 1 : 0;
      res.masks.push_back(std::move(m));
    }
    out.push_back(std::move(res));
  }
  return out;
}

inline std::vector<double> default_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

namespace detail {

struct ScoredResult {
  const InstanceResult* r;
  double best_iou;   // against any same-category truth in its video
  size_t video_pos;  // rank of video id, for deterministic ordering
  std::vector<double> ious;  // per truth index within (video, category)
};

}  // namespace detail

// results: any order; truths: per video id. category_ids: the full category
// vocabulary. Results referencing unknown categories are format errors.
inline EvalReport evaluate(
    const std::vector<InstanceResult>& results,
    const std::map<int64_t, std::vector<InstanceSequenceTruth>>& truths,
    const std::vector<int>& category_ids,
    std::vector<double> thresholds = default_iou_thresholds()) {
  std::set<int> vocab(category_ids.begin(), category_ids.end());
  for (const auto& r : results) {
    if (!vocab.count(r.category))
      throw format_error("results reference unknown category id " +
                         std::to_string(r.category));
    if (!truths.count(r.video_id))
      throw format_error("results reference unknown video id " +
                         std::to_string(r.video_id));
  }

  EvalReport rep;
  rep.thresholds = thresholds;
  rep.ap_per_threshold.assign(thresholds.size(), 0.0);
  std::vector<double> ar1_acc(thresholds.size(), 0.0), ar10_acc(thresholds.size(), 0.0);
  int64_t categories_with_gt = 0;
  double ap75 = 0;

  std::vector<int64_t> video_ids;
  for (const auto& [vid, _] : truths) video_ids.push_back(vid);
  std::sort(video_ids.begin(), video_ids.end());
  auto video_pos = [&](int64_t vid) {
    return static_cast<size_t>(std::lower_bound(video_ids.begin(), video_ids.end(), vid) -
                               video_ids.begin());
  };

  for (int cat : category_ids) {
    // ground-truth count and per-video truth indices for this category
    int64_t n_gt = 0;
    std::map<int64_t, std::vector<const InstanceSequenceTruth*>> gt_by_video;
    for (const auto& [vid, trs] : truths)
      for (const auto& tr : trs)
        if (tr.category_id == cat) {
          gt_by_video[vid].push_back(&tr);
          ++n_gt;
        }
    if (n_gt == 0) continue;
    ++categories_with_gt;

    std::vector<detail::ScoredResult> cand;
    for (const auto& r : results) {
      if (r.category != cat) continue;
      detail::ScoredResult sr;
      sr.r = &r;
      sr.video_pos = video_pos(r.video_id);
      sr.best_iou = 0;
      for (const auto* tr : gt_by_video[r.video_id]) {
        double iou = sequence_mask_iou(r.masks, tr->masks);
        sr.ious.push_back(iou);
        sr.best_iou = std::max(sr.best_iou, iou);
      }
      cand.push_back(std::move(sr));
    }
    // deterministic processing order: score desc, then higher IoU, then video
    std::sort(cand.begin(), cand.end(),
              [](const detail::ScoredResult& a, const detail::ScoredResult& b) {
                if (a.r->score != b.r->score) return a.r->score > b.r->score;
                if (a.best_iou != b.best_iou) return a.best_iou > b.best_iou;
                return a.video_pos < b.video_pos;
              });

    auto sweep = [&](const std::vector<detail::ScoredResult>& entries, double tau,
                     std::vector<char>& tp_flags) {
      std::map<int64_t, std::vector<char>> used;
      for (auto& [vid, trs] : gt_by_video) used[vid].assign(trs.size(), 0);
      tp_flags.assign(entries.size(), 0);
      for (size_t e = 0; e < entries.size(); ++e) {
        const auto& sr = entries[e];
        auto& taken = used[sr.r->video_id];
        int64_t best = -1;
        double best_iou = tau;  // must reach the threshold
        for (size_t g = 0; g < sr.ious.size(); ++g) {
          if (taken[g]) continue;
          if (sr.ious[g] >= best_iou && (best < 0 || sr.ious[g] > best_iou)) {
            best = static_cast<int64_t>(g);
            best_iou = sr.ious[g];
          }
        }
        if (best >= 0) {
          taken[best] = 1;
          tp_flags[e] = 1;
        }
      }
    };

    auto ap_101 = [&](const std::vector<char>& tp_flags, int64_t total_gt) {
      std::vector<double> prec, rec;
      int64_t tp = 0, fp = 0;
      for (char f : tp_flags) {
        f ? ++tp : ++fp;
        prec.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
        rec.push_back(static_cast<double>(tp) / static_cast<double>(total_gt));
      }
      double ap = 0;
      for (int i = 0; i <= 100; ++i) {
        double r = 0.01 * i;
        double best = 0;
        for (size_t k = 0; k < prec.size(); ++k)
          if (rec[k] >= r) best = std::max(best, prec[k]);
        ap += best;
      }
      return ap / 101.0;
    };

    auto top_k_per_video = [&](int64_t k) {
      std::map<int64_t, int64_t> kept;
      std::vector<detail::ScoredResult> out;
      for (const auto& sr : cand)
        if (kept[sr.r->video_id]++ < k) out.push_back(sr);
      return out;
    };
    auto top1 = top_k_per_video(1);
    auto top10 = top_k_per_video(10);

    for (size_t ti = 0; ti < thresholds.size(); ++ti) {
      std::vector<char> flags;
      sweep(cand, thresholds[ti], flags);
      double ap = ap_101(flags, n_gt);
      rep.ap_per_threshold[ti] += ap;
      if (std::abs(thresholds[ti] - 0.75) < 1e-9) ap75 += ap;

      auto recall_of = [&](const std::vector<detail::ScoredResult>& entries) {
        std::vector<char> f;
        sweep(entries, thresholds[ti], f);
        int64_t tp = 0;
        for (char x : f) tp += x;
        return static_cast<double>(tp) / static_cast<double>(n_gt);
      };
      ar1_acc[ti] += recall_of(top1);
      ar10_acc[ti] += recall_of(top10);
    }
  }

  if (categories_with_gt == 0) return rep;
  double denom = static_cast<double>(categories_with_gt);
  double ap_sum = 0, ar1_sum = 0, ar10_sum = 0;
  for (size_t ti = 0; ti < thresholds.size(); ++ti) {
    rep.ap_per_threshold[ti] /= denom;
    ap_sum += rep.ap_per_threshold[ti];
    ar1_sum += ar1_acc[ti] / denom;
    ar10_sum += ar10_acc[ti] / denom;
  }
  rep.AP = ap_sum / static_cast<double>(thresholds.size());
  rep.AR1 = ar1_sum / static_cast<double>(thresholds.size());
  rep.AR10 = ar10_sum / static_cast<double>(thresholds.size());
  if (!thresholds.empty() && std::abs(thresholds[0] - 0.5) < 1e-9)
    rep.AP50 = rep.ap_per_threshold[0];
  rep.AP75 = ap75 / denom;
  return rep;
}

// ---------------------------------------------------------------------------
// Results / report files
// ---------------------------------------------------------------------------

inline void save_results(const std::string& path, const std::vector<InstanceResult>& results) {
  nlohmann::json root = nlohmann::json::array();
  for (const auto& r : results) {
    nlohmann::json e;
    e["video_id"] = r.video_id;
    e["category_id"] = r.category;
    e["score"] = r.score;
    nlohmann::json rles = nlohmann::json::array();
    for (const auto& m : r.masks) rles.push_back(rle_encode(m));
    e["rle_masks"] = rles;
    root.push_back(e);
  }
  std::ofstream os(path);
  if (!os) throw format_error("cannot write results: " + path);
  os << root.dump(1) << "\n";
}

inline std::vector<InstanceResult> load_results(const std::string& path, int64_t H0,
                                                int64_t W0) {
  std::ifstream is(path);
  if (!is) throw format_error("cannot open results: " + path);
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw format_error("bad results JSON: " + std::string(e.what()));
  }
  if (!root.is_array()) throw format_error("results file must be a JSON array");
  std::vector<InstanceResult> out;
  for (size_t i = 0; i < root.size(); ++i) {
    const auto& e = root[i];
    std::string where = "results[" + std::to_string(i) + "]";
    InstanceResult r;
    r.video_id = detail::require_key(e, "video_id", where).get<int64_t>();
    r.category = detail::require_key(e, "category_id", where).get<int>();
    r.score = detail::require_key(e, "score", where).get<double>();
    for (const auto& counts : detail::require_key(e, "rle_masks", where))
      r.masks.push_back(rle_decode(counts.get<std::vector<int64_t>>(), H0, W0));
    out.push_back(std::move(r));
  }
  return out;
}

inline void save_report(const std::string& path, const EvalReport& rep) {
  nlohmann::json j;
  j["AP"] = rep.AP;
  j["AP50"] = rep.AP50;
  j["AP75"] = rep.AP75;
  j["AR1"] = rep.AR1;
  j["AR10"] = rep.AR10;
  std::ofstream os(path);
  if (!os) throw format_error("cannot write report: " + path);
  os << j.dump(1) << "\n";
}

}  // namespace vistr
