#pragma once

// Training and inference drivers shared by the CLI and tests. One step is one
// clip. All randomness (init, clip order, frame shuffling) comes from a
// single seeded generator, so a fixed seed reproduces runs bit for bit.

#include <functional>
#include <optional>

#include "vistr/config.hpp"
#include "vistr/eval.hpp"
#include "vistr/optimizer.hpp"

namespace vistr {

// Raised when the loss degenerates; carries the offending step and clip.
class train_abort_error : public std::runtime_error {
 public:
  int64_t step;
  int64_t video_id;
  train_abort_error(int64_t step_, int64_t video_id_, const std::string& what)
      : std::runtime_error(what), step(step_), video_id(video_id_) {}
};

struct MetricsRow {
  int64_t step;
  double total, class_nll, box, mask, lr;
};

struct TrainOptions {
  std::optional<int64_t> max_steps;
  // called every probe_every steps; returning true stops training early
  std::function<bool(int64_t, VisTRModel<float>&)> probe;
  int64_t probe_every = 0;
  bool quiet = true;
};

struct TrainResult {
  std::string checkpoint_path;
  std::vector<MetricsRow> metrics;
  int64_t steps = 0;
  double final_loss = 0;
  bool stopped_by_probe = false;
};

namespace detail {

inline std::vector<int64_t> shuffled_indices(int64_t count, Rng& rng) {
  std::vector<int64_t> idx(static_cast<size_t>(count));
  std::iota(idx.begin(), idx.end(), 0);
  for (int64_t i = count - 1; i > 0; --i)
    std::swap(idx[i], idx[rng.uniform_int(0, i)]);
  return idx;
}

inline std::pair<Tensor<float>, std::vector<InstanceSequenceTruth>> permute_frames(
    const Tensor<float>& frames, const std::vector<InstanceSequenceTruth>& truths,
    const std::vector<int64_t>& perm) {
  std::vector<Tensor<float>> rows;
  for (int64_t p : perm) rows.push_back(slice(frames, {{p, p + 1}}));
  auto shuffled = concat(rows, 0);
  std::vector<InstanceSequenceTruth> out = truths;
  for (auto& tr : out) {
    InstanceSequenceTruth src = tr;
    for (size_t t = 0; t < perm.size(); ++t) {
      tr.boxes[t] = src.boxes[perm[t]];
      tr.masks[t] = src.masks[perm[t]];
      tr.presence[t] = src.presence[perm[t]];
    }
  }
  return {shuffled, out};
}

inline void validate_dataset_against(const Dataset& ds, const ModelConfig& mc) {
  if (ds.clips.empty()) throw config_error("training dataset is empty");
  if (ds.T != mc.T || ds.H0 != mc.H0 || ds.W0 != mc.W0)
    throw config_error("dataset clip geometry T/H/W (" + std::to_string(ds.T) + "," +
                       std::to_string(ds.H0) + "," + std::to_string(ds.W0) +
                       ") does not match the model config");
  for (const auto& dc : ds.clips)
    if (static_cast<int64_t>(dc.truths.size()) > mc.n)
      throw config_error("clip " + std::to_string(dc.video_id) + " has " +
                         std::to_string(dc.truths.size()) +
                         " instances, exceeding model capacity n=" + std::to_string(mc.n));
}

}  // namespace detail

inline std::vector<InstanceResult> infer_clip(VisTRModel<float>& model,
                                              const Tensor<float>& frames,
                                              int64_t video_id) {
  NoGradGuard ng;
  auto out = model.forward(frames);
  auto sp = extract_sequence_predictions(out.class_logits, out.boxes, model.cfg.n,
                                         model.cfg.T);
  return postprocess(sp, out.mask_logits, model.cfg.H0, model.cfg.W0, video_id);
}

inline std::vector<InstanceResult> run_inference(VisTRModel<float>& model, const Dataset& ds) {
  std::vector<InstanceResult> all;
  for (const auto& dc : ds.clips) {
    auto results = infer_clip(model, dc.clip.frames, dc.video_id);
    all.insert(all.end(), results.begin(), results.end());
  }
  return all;
}

inline std::map<int64_t, std::vector<InstanceSequenceTruth>> truths_by_video(
    const Dataset& ds) {
  std::map<int64_t, std::vector<InstanceSequenceTruth>> m;
  for (const auto& dc : ds.clips) m[dc.video_id] = dc.truths;
  return m;
}

inline TrainResult train(const Config& cfg, const std::string& out_dir,
                         const TrainOptions& opts = {}) {
  namespace fs = std::filesystem;
  tune_allocator_for_training();
  TrainConfig tc = train_config_from(cfg);
  ModelConfig mc = model_config_from(cfg);
  LossWeights lw = loss_weights_from(cfg);

  uint64_t seed = tc.seed;
  if (!tc.deterministic) seed = mix64(std::random_device{}() | (uint64_t(std::random_device{}()) << 32));
  deterministic_mode() = tc.deterministic;

  Dataset ds = load_dataset(tc.data_dir);
  detail::validate_dataset_against(ds, mc);

  Rng rng(seed);
  VisTRModel<float> model(mc, rng);
  auto params = model.parameters();
  AdamW<float>::Group backbone_group{{}, tc.lr_backbone};
  AdamW<float>::Group transformer_group{{}, tc.lr_transformer};
  for (auto& p : params) {
    if (p.name.rfind("backbone.", 0) == 0)
      backbone_group.params.push_back(p.tensor);
    else
      transformer_group.params.push_back(p.tensor);
  }
  AdamW<float> opt({backbone_group, transformer_group}, tc.weight_decay);

  fs::create_directories(out_dir);
  std::ofstream mlog(fs::path(out_dir) / "metrics.csv");
  mlog << "step,total,class_nll,box,mask,lr\n";

  TrainResult res;
  res.checkpoint_path = (fs::path(out_dir) / "checkpoint.vt").string();
  int64_t step = 0;
  bool stop = false;
  for (int64_t epoch = 0; epoch < tc.epochs && !stop; ++epoch) {
    double lr_scale = epoch >= tc.lr_drop_epoch ? 0.1 : 1.0;
    auto order = detail::shuffled_indices(static_cast<int64_t>(ds.clips.size()), rng);
    for (int64_t idx : order) {
      const auto& dc = ds.clips[idx];
      Tensor<float> frames = dc.clip.frames;
      const std::vector<InstanceSequenceTruth>* truths = &dc.truths;
      std::vector<InstanceSequenceTruth> shuffled_truths;
      if (tc.frame_order == FrameOrder::random_order) {
        auto perm = detail::shuffled_indices(mc.T, rng);
        auto pr = detail::permute_frames(frames, dc.truths, perm);
        frames = pr.first;
        shuffled_truths = std::move(pr.second);
        truths = &shuffled_truths;
      }
      auto out = model.forward(frames);
      auto abort_with_dump = [&](const char* what, const LossBreakdown* bd) {
        std::ofstream dump(fs::path(out_dir) / "nan_dump.txt");
        dump << "step " << step << "\nvideo_id " << dc.video_id << "\nreason " << what
             << "\n";
        if (bd)
          dump << "class " << bd->class_nll << "\nbox " << bd->box << "\nmask "
               << bd->mask << "\n";
        throw train_abort_error(step, dc.video_id,
                                std::string(what) + " at step " + std::to_string(step) +
                                    " on clip " + std::to_string(dc.video_id));
      };
      auto finite = [](const Tensor<float>& t) {
        for (float v : t.values())
          if (!std::isfinite(v)) return false;
        return true;
      };
      if (!finite(out.class_logits) || !finite(out.boxes) || !finite(out.mask_logits))
        abort_with_dump("non-finite model output", nullptr);
      auto loss = hungarian_loss(out.class_logits, out.boxes, out.mask_logits, mc.n, mc.T,
                                 *truths, lw, mc.H0, mc.W0);
      if (!std::isfinite(loss.breakdown.total))
        abort_with_dump("non-finite loss", &loss.breakdown);
      loss.total.backward();
      clip_grad_norm(params, tc.clip_grad_norm);
      opt.step(lr_scale);
      opt.zero_grad();

      MetricsRow row{step, loss.breakdown.total, loss.breakdown.class_nll,
                     loss.breakdown.box, loss.breakdown.mask, tc.lr_transformer * lr_scale};
      res.metrics.push_back(row);
      mlog << row.step << ',' << row.total << ',' << row.class_nll << ',' << row.box << ','
           << row.mask << ',' << row.lr << '\n';
      res.final_loss = row.total;
      ++step;
      if (opts.probe && opts.probe_every > 0 && step % opts.probe_every == 0 &&
          opts.probe(step, model)) {
        res.stopped_by_probe = true;
        stop = true;
        break;
      }
      if (opts.max_steps && step >= *opts.max_steps) {
        stop = true;
        break;
      }
    }
    model.save_checkpoint(res.checkpoint_path);
    if (tc.eval_period > 0 && (epoch + 1) % tc.eval_period == 0) {
      auto results = run_inference(model, ds);
      auto rep = evaluate(results, truths_by_video(ds), ds.category_ids);
      char name[48];
      std::snprintf(name, sizeof(name), "eval_epoch_%04d.json", static_cast<int>(epoch));
      save_report((fs::path(out_dir) / name).string(), rep);
    }
  }
  model.save_checkpoint(res.checkpoint_path);
  res.steps = step;
  return res;
}

// ---------------------------------------------------------------------------
// Mask overlays (binary PPM; no image codecs involved)
// ---------------------------------------------------------------------------

inline void write_overlay_ppm(const std::string& path, const Tensor<float>& frame,
                              const std::vector<const BinaryMask*>& masks) {
  static const float palette[6][3] = {{1.0f, 0.2f, 0.2f}, {0.2f, 1.0f, 0.2f},
                                      {0.2f, 0.4f, 1.0f}, {1.0f, 1.0f, 0.2f},
                                      {1.0f, 0.2f, 1.0f}, {0.2f, 1.0f, 1.0f}};
  int64_t H = frame.dim(1), W = frame.dim(2);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw format_error("cannot write overlay: " + path);
  os << "P6\n" << W << " " << H << "\n255\n";
  const float* fp = frame.data();
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x) {
      float rgb[3];
      for (int c = 0; c < 3; ++c) rgb[c] = fp[c * H * W + y * W + x];
      for (size_t m = 0; m < masks.size(); ++m) {
        if (masks[m]->at(y, x)) {
          const float* col = palette[m % 6];
          for (int c = 0; c < 3; ++c) rgb[c] = 0.45f * rgb[c] + 0.55f * col[c];
        }
      }
      for (int c = 0; c < 3; ++c)
        os.put(static_cast<char>(std::clamp(rgb[c], 0.0f, 1.0f) * 255.0f + 0.5f));
    }
}

}  // namespace vistr
