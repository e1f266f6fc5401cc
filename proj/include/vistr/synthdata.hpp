#pragma once

// Deterministic "moving shapes" clip generator and the annotation format.
//
// Shapes (circle / square / triangle, K=3 categories) move with constant
// integer velocity and bounce off the canvas edges, so rasterized masks
// translate exactly and per-frame areas stay constant while unoccluded.
// Overlaps are resolved by a fixed z-order: the instance with the higher
// index is drawn on top. Ground-truth boxes are derived from the visible
// masks, so box == derive_box(mask) holds exactly on every present frame.

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "vistr/instance.hpp"
#include "vistr/serialize.hpp"
#include "vistr/tensor.hpp"

namespace vistr {

constexpr int kCategoryCount = 3;
inline const char* category_name(int id) {
  static const char* names[kCategoryCount] = {"circle", "square", "triangle"};
  return names[id];
}

struct SynthConfig {
  uint64_t seed = 7;
  int64_t clips = 8;
  int64_t T = 6;
  int64_t H0 = 96;
  int64_t W0 = 160;
  int64_t min_instances = 2;
  int64_t max_instances = 3;
  int64_t min_half = 10;  // half-extent in pixels
  int64_t max_half = 18;
  int64_t min_speed = 1;  // per-axis velocity magnitude, px/frame
  int64_t max_speed = 3;
  bool leave_enter = false;  // give some instances an absent prefix/suffix
  int64_t capacity = 0;      // model instance slots n; 0 disables the check

  void validate() const {
    if (T < 1) throw config_error("synth: T must be >= 1");
    if (min_instances < 1 || max_instances < min_instances)
      throw config_error("synth: bad instance count range");
    if (capacity > 0 && max_instances > capacity)
      throw config_error("synth: instance count " + std::to_string(max_instances) +
                         " exceeds model capacity n=" + std::to_string(capacity));
    if (min_half < 2 || max_half < min_half) throw config_error("synth: bad size range");
    if (2 * max_half >= std::min(H0, W0))
      throw config_error("synth: shapes do not fit the canvas");
    if (min_speed < 0 || max_speed < min_speed)
      throw config_error("synth: bad speed range");
  }
};

struct VideoClip {
  std::string clip_id;
  Tensor<float> frames;  // [T, 3, H0, W0], values in [0,1]
};

// Deterministic starting state of one instance; the random path samples
// these, tests may construct them directly.
struct InstanceInit {
  int category = 0;
  int64_t cx = 0, cy = 0;  // shape spans the half-open box [c-half, c+half)
  int64_t half = 8;
  int64_t vx = 0, vy = 0;
  std::array<float, 3> color = {0.8f, 0.3f, 0.3f};
  int64_t enter_t = 0;
  int64_t leave_t = std::numeric_limits<int64_t>::max();
};

namespace detail {

// All tests use pixel centers; integer arithmetic keeps rasterization exactly
// translation invariant.
inline bool inside_shape(int category, int64_t x, int64_t y, int64_t cx, int64_t cy,
                         int64_t h) {
  int64_t dx2 = 2 * (x - cx) + 1;  // 2*(pixel center x - cx)
  int64_t dy2 = 2 * (y - cy) + 1;
  switch (category) {
    case 0:  // circle
      return dx2 * dx2 + dy2 * dy2 <= 4 * h * h;
    case 1:  // square
      return x >= cx - h && x < cx + h && y >= cy - h && y < cy + h;
    default:  // triangle, apex up
      return y >= cy - h && y < cy + h && 2 * std::abs(dx2) <= 2 * (y - cy + h) + 1;
  }
}

inline void bounce(int64_t& pos, int64_t& vel, int64_t lo, int64_t hi) {
  pos += vel;
  while (pos < lo || pos > hi) {
    if (pos < lo) {
      pos = 2 * lo - pos;
      vel = -vel;
    }
    if (pos > hi) {
      pos = 2 * hi - pos;
      vel = -vel;
    }
  }
}

}  // namespace detail

// Renders a clip from explicit instance states. Deterministic.
inline std::pair<VideoClip, std::vector<InstanceSequenceTruth>> render_clip(
    const SynthConfig& cfg, const std::vector<InstanceInit>& inits,
    const std::string& clip_id) {
  cfg.validate();
  const int64_t T = cfg.T, H = cfg.H0, W = cfg.W0;
  const size_t n = inits.size();

  std::vector<InstanceSequenceTruth> truths(n);
  for (size_t i = 0; i < n; ++i) {
    truths[i].category_id = inits[i].category;
    truths[i].boxes.resize(T, {0, 0, 0, 0});
    truths[i].masks.assign(T, BinaryMask::empty(H, W));
    truths[i].presence.assign(T, false);
  }

  std::vector<float> frames(static_cast<size_t>(T * 3 * H * W), 0.1f);
  std::vector<int64_t> cx(n), cy(n), vx(n), vy(n);
  for (size_t i = 0; i < n; ++i) {
    cx[i] = inits[i].cx;
    cy[i] = inits[i].cy;
    vx[i] = inits[i].vx;
    vy[i] = inits[i].vy;
  }

  std::vector<BinaryMask> raster(n);
  for (int64_t t = 0; t < T; ++t) {
    for (size_t i = 0; i < n; ++i) {
      raster[i] = BinaryMask::empty(H, W);
      if (t < inits[i].enter_t || t >= inits[i].leave_t) continue;
      const int64_t h = inits[i].half;
      for (int64_t y = cy[i] - h; y < cy[i] + h; ++y)
        for (int64_t x = cx[i] - h; x < cx[i] + h; ++x)
          if (detail::inside_shape(inits[i].category, x, y, cx[i], cy[i], h))
            raster[i].at(y, x) = 1;
    }
    // visible mask: higher index occludes lower
    for (size_t i = 0; i < n; ++i) {
      BinaryMask vis = raster[i];
      for (size_t j = i + 1; j < n; ++j)
        for (int64_t p = 0; p < H * W; ++p)
          if (raster[j].data[p]) vis.data[p] = 0;
      bool any = vis.area() > 0;
      truths[i].presence[t] = any;
      if (any) {
        truths[i].boxes[t] = derive_box(vis);
        truths[i].masks[t] = std::move(vis);
      }
    }
    // paint frame in z-order (low to high)
    float* ft = frames.data() + t * 3 * H * W;
    for (size_t i = 0; i < n; ++i)
      for (int64_t p = 0; p < H * W; ++p)
        if (raster[i].data[p])
          for (int64_t c = 0; c < 3; ++c) ft[c * H * W + p] = inits[i].color[c];
    for (size_t i = 0; i < n; ++i) {
      detail::bounce(cx[i], vx[i], inits[i].half, W - inits[i].half);
      detail::bounce(cy[i], vy[i], inits[i].half, H - inits[i].half);
    }
  }
  VideoClip clip{clip_id, Tensor<float>::from_data({T, 3, H, W}, std::move(frames))};
  return {std::move(clip), std::move(truths)};
}

// Samples instance states from the clip's own RNG stream, so generation is
// independent of request order.
inline std::vector<InstanceInit> sample_inits(const SynthConfig& cfg, int64_t clip_index) {
  Rng rng(mix64(cfg.seed ^ mix64(0x5eed0000ULL + static_cast<uint64_t>(clip_index))));
  int64_t count = rng.uniform_int(cfg.min_instances, cfg.max_instances);
  std::vector<InstanceInit> inits(static_cast<size_t>(count));
  for (auto& init : inits) {
    init.category = static_cast<int>(rng.uniform_int(0, kCategoryCount - 1));
    init.half = rng.uniform_int(cfg.min_half, cfg.max_half);
    init.cx = rng.uniform_int(init.half, cfg.W0 - init.half);
    init.cy = rng.uniform_int(init.half, cfg.H0 - init.half);
    auto vel = [&] {
      int64_t mag = rng.uniform_int(cfg.min_speed, cfg.max_speed);
      return rng.uniform_int(0, 1) ? mag : -mag;
    };
    init.vx = vel();
    init.vy = vel();
    static const float base[kCategoryCount][3] = {
        {0.85f, 0.25f, 0.20f}, {0.20f, 0.80f, 0.30f}, {0.25f, 0.35f, 0.90f}};
    for (int c = 0; c < 3; ++c) {
      double jitter = rng.uniform(-0.08, 0.08);
      init.color[c] = std::clamp(base[init.category][c] + static_cast<float>(jitter),
                                 0.0f, 1.0f);
    }
    if (cfg.leave_enter && rng.uniform() < 0.5) {
      if (rng.uniform_int(0, 1)) {
        init.enter_t = rng.uniform_int(1, std::max<int64_t>(1, cfg.T / 2));
      } else {
        init.leave_t = rng.uniform_int(cfg.T / 2 + 1, cfg.T - 1 + 1);
      }
    }
  }
  return inits;
}

inline std::pair<VideoClip, std::vector<InstanceSequenceTruth>> generate_clip(
    const SynthConfig& cfg, int64_t clip_index) {
  cfg.validate();
  char name[32];
  std::snprintf(name, sizeof(name), "clip%04d", static_cast<int>(clip_index));
  return render_clip(cfg, sample_inits(cfg, clip_index), name);
}

// ---------------------------------------------------------------------------
// Dataset on disk: annotations.json + one tensor file per frame
// ---------------------------------------------------------------------------

struct DatasetClip {
  int64_t video_id = 0;
  VideoClip clip;  // frames undefined when loaded without pixels
  std::vector<InstanceSequenceTruth> truths;
};

struct Dataset {
  int64_t H0 = 0, W0 = 0, T = 0;
  std::vector<int> category_ids;
  std::vector<DatasetClip> clips;
};

namespace detail {

inline const nlohmann::json& require_key(const nlohmann::json& j, const std::string& key,
                                         const std::string& where) {
  if (!j.contains(key))
    throw format_error("annotation file missing key: " + (where.empty() ? key : where + "." + key));
  return j.at(key);
}

}  // namespace detail

inline void save_dataset(const std::string& dir, const std::vector<DatasetClip>& clips) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "frames");
  nlohmann::json root;
  root["categories"] = nlohmann::json::array();
  for (int c = 0; c < kCategoryCount; ++c)
    root["categories"].push_back({{"id", c}, {"name", category_name(c)}});
  root["videos"] = nlohmann::json::array();
  root["annotations"] = nlohmann::json::array();
  for (const auto& dc : clips) {
    const auto& fr = dc.clip.frames;
    int64_t T = fr.dim(0), H = fr.dim(2), W = fr.dim(3);
    nlohmann::json video;
    video["id"] = dc.video_id;
    video["T"] = T;
    video["height"] = H;
    video["width"] = W;
    std::vector<std::string> files;
    for (int64_t t = 0; t < T; ++t) {
      char fn[64];
      std::snprintf(fn, sizeof(fn), "frames/%s_f%02d.vt", dc.clip.clip_id.c_str(),
                    static_cast<int>(t));
      files.emplace_back(fn);
      auto frame = slice(fr, {{t, t + 1}});
      save_tensors<float>((fs::path(dir) / fn).string(),
                          {{"frame", reshape(frame, {3, H, W})}});
    }
    video["frame_files"] = files;
    root["videos"].push_back(video);
    for (size_t i = 0; i < dc.truths.size(); ++i) {
      const auto& tr = dc.truths[i];
      nlohmann::json ann;
      ann["video_id"] = dc.video_id;
      ann["instance_id"] = i;
      ann["category_id"] = tr.category_id;
      ann["boxes"] = tr.boxes;
      nlohmann::json rles = nlohmann::json::array();
      for (const auto& m : tr.masks) rles.push_back(rle_encode(m));
      ann["rle_masks"] = rles;
      ann["presence"] = tr.presence;
      root["annotations"].push_back(ann);
    }
  }
  std::ofstream os(fs::path(dir) / "annotations.json");
  if (!os) throw format_error("cannot write annotations in: " + dir);
  os << root.dump(1) << "\n";
}

inline Dataset load_dataset(const std::string& dir, bool load_frames = true) {
  namespace fs = std::filesystem;
  fs::path ann_path = fs::path(dir) / "annotations.json";
  std::ifstream is(ann_path);
  if (!is) throw format_error("cannot open: " + ann_path.string());
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw format_error("bad annotation JSON: " + std::string(e.what()));
  }
  const auto& categories = detail::require_key(root, "categories", "");
  const auto& videos = detail::require_key(root, "videos", "");
  const auto& annotations = detail::require_key(root, "annotations", "");

  Dataset ds;
  for (size_t ci = 0; ci < categories.size(); ++ci)
    ds.category_ids.push_back(
        detail::require_key(categories[ci], "id", "categories[" + std::to_string(ci) + "]")
            .get<int>());
  std::map<int64_t, size_t> by_id;
  for (size_t vi = 0; vi < videos.size(); ++vi) {
    const auto& v = videos[vi];
    std::string where = "videos[" + std::to_string(vi) + "]";
    DatasetClip dc;
    dc.video_id = detail::require_key(v, "id", where).get<int64_t>();
    int64_t T = detail::require_key(v, "T", where).get<int64_t>();
    int64_t H = detail::require_key(v, "height", where).get<int64_t>();
    int64_t W = detail::require_key(v, "width", where).get<int64_t>();
    if (ds.H0 == 0) {
      ds.H0 = H;
      ds.W0 = W;
      ds.T = T;
    }
    auto files = detail::require_key(v, "frame_files", where)
                     .get<std::vector<std::string>>();
    if (static_cast<int64_t>(files.size()) != T)
      throw format_error(where + ".frame_files: expected " + std::to_string(T) +
                         " entries");
    char name[32];
    std::snprintf(name, sizeof(name), "clip%04d", static_cast<int>(dc.video_id));
    dc.clip.clip_id = name;
    if (load_frames) {
      std::vector<Tensor<float>> frames;
      for (const auto& f : files) {
        auto m = load_tensor_map<float>((fs::path(dir) / f).string());
        auto it = m.find("frame");
        if (it == m.end()) throw format_error("frame tensor missing in: " + f);
        frames.push_back(reshape(it->second, {1, 3, H, W}));
      }
      dc.clip.frames = concat(frames, 0);
    }
    by_id[dc.video_id] = ds.clips.size();
    ds.clips.push_back(std::move(dc));
  }
  for (size_t ai = 0; ai < annotations.size(); ++ai) {
    const auto& a = annotations[ai];
    std::string where = "annotations[" + std::to_string(ai) + "]";
    int64_t vid = detail::require_key(a, "video_id", where).get<int64_t>();
    auto it = by_id.find(vid);
    if (it == by_id.end())
      throw format_error(where + ".video_id: unknown video " + std::to_string(vid));
    DatasetClip& dc = ds.clips[it->second];
    InstanceSequenceTruth tr;
    tr.category_id = detail::require_key(a, "category_id", where).get<int>();
    tr.boxes = detail::require_key(a, "boxes", where)
                   .get<std::vector<std::array<double, 4>>>();
    tr.presence = detail::require_key(a, "presence", where).get<std::vector<bool>>();
    for (const auto& counts : detail::require_key(a, "rle_masks", where))
      tr.masks.push_back(rle_decode(counts.get<std::vector<int64_t>>(), ds.H0, ds.W0));
    if (tr.boxes.size() != tr.masks.size() || tr.boxes.size() != tr.presence.size())
      throw format_error(where + ": boxes/rle_masks/presence lengths differ");
    dc.truths.push_back(std::move(tr));
  }
  return ds;
}

}  // namespace vistr
