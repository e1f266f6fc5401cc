#pragma once

// The full network: per-frame CNN backbone, feature flattening in (t, h, w)
// raster order, transformer encoder over the clip-level sequence, instance
// query decoder, class/box heads, mask feature fusion against per-frame
// feature maps, and the 3D-convolution instance sequence segmentation head.
//
// Prediction slot j corresponds to instance slot (j mod n) of frame
// floor(j / n); that grouping rule is shared with matching and evaluation.

#include <set>

#include "vistr/nn_ops.hpp"
#include "vistr/posenc.hpp"
#include "vistr/serialize.hpp"

namespace vistr {

enum class QueryMode { video, frame, instance, prediction };
enum class MaskFeatureSource { encoder, backbone };

inline QueryMode parse_query_mode(const std::string& s) {
  if (s == "video") return QueryMode::video;
  if (s == "frame") return QueryMode::frame;
  if (s == "instance") return QueryMode::instance;
  if (s == "prediction") return QueryMode::prediction;
  throw config_error("unknown query_mode: " + s);
}

inline const char* query_mode_name(QueryMode m) {
  switch (m) {
    case QueryMode::video: return "video";
    case QueryMode::frame: return "frame";
    case QueryMode::instance: return "instance";
    default: return "prediction";
  }
}

struct ModelConfig {
  int64_t d = 96;
  int64_t n = 5;
  int64_t T = 6;
  int64_t heads = 8;
  int64_t encoder_layers = 2;
  int64_t decoder_layers = 2;
  int64_t ffn_dim = 384;
  int64_t K = 3;  // real categories; class head emits K+1 with background last
  QueryMode query_mode = QueryMode::instance;
  bool use_positional = true;
  bool posenc_on_cross_keys = true;  // add spatial encoding to decoder cross-attention keys
  MaskFeatureSource mask_feature_source = MaskFeatureSource::encoder;
  bool use_3d_head = true;
  int64_t mask_channels = 8;       // a
  int64_t backbone_channels = 128; // C
  int64_t H0 = 96;
  int64_t W0 = 160;

  static constexpr int64_t kStride = 8;
  int64_t N() const { return n * T; }
  int64_t H() const { return H0 / kStride; }
  int64_t W() const { return W0 / kStride; }
  int64_t L() const { return T * H() * W(); }

  void validate() const {
    if (d % heads != 0) throw config_error("model: d must be divisible by heads");
    if (use_positional && (d % 3 != 0 || (d / 3) % 2 != 0))
      throw config_error("model: positional encoding needs d divisible by 3 with d/3 even");
    if (H0 % kStride != 0 || W0 % kStride != 0)
      throw config_error("model: canvas must be divisible by the backbone stride 8");
    if (n < 1 || T < 1 || K < 1) throw config_error("model: n, T, K must be positive");
    if (mask_channels < 2 || mask_channels % 2 != 0)
      throw config_error("model: mask_channels must be even and >= 2");
  }

  PositionalEncodingConfig posenc() const {
    PositionalEncodingConfig pc;
    pc.d = d;
    pc.T = T;
    pc.H = H();
    pc.W = W();
    pc.enabled = use_positional;
    return pc;
  }
};

namespace detail {

// Keep at least two channels per group.
inline int64_t norm_groups(int64_t channels) {
  for (int64_t g : {8, 4, 2})
    if (channels % g == 0 && channels / g >= 2) return g;
  return 1;
}

template <typename S>
Tensor<S> xavier(Shape shape, int64_t fan_in, int64_t fan_out, Rng& rng) {
  double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return Tensor<S>::uniform(std::move(shape), rng, static_cast<S>(-limit),
                            static_cast<S>(limit), true);
}

}  // namespace detail

template <typename S>
struct LinearLayer {
  Tensor<S> w, b;  // w [in, out]

  LinearLayer() = default;
  LinearLayer(int64_t in, int64_t out, Rng& rng)
      : w(detail::xavier<S>({in, out}, in, out, rng)),
        b(Tensor<S>::zeros({out}, true)) {}

  Tensor<S> forward(const Tensor<S>& x) const { return linear(x, w, b); }

  void collect(const std::string& prefix, std::vector<NamedTensor<S>>& out) {
    out.push_back({prefix + ".w", w});
    out.push_back({prefix + ".b", b});
  }
};

template <typename S>
struct Conv2dLayer {
  Tensor<S> w, b;  // w [Cout, Cin, kh, kw]
  Dims2 stride{1, 1}, pad{0, 0};

  Conv2dLayer() = default;
  Conv2dLayer(int64_t cin, int64_t cout, int64_t k, Dims2 stride_, Dims2 pad_, Rng& rng)
      : w(detail::xavier<S>({cout, cin, k, k}, cin * k * k, cout * k * k, rng)),
        b(Tensor<S>::zeros({1, cout, 1, 1}, true)),
        stride(stride_),
        pad(pad_) {}

  Tensor<S> forward(const Tensor<S>& x) const { return add(conv2d(x, w, stride, pad), b); }

  void collect(const std::string& prefix, std::vector<NamedTensor<S>>& out) {
    out.push_back({prefix + ".w", w});
    out.push_back({prefix + ".b", b});
  }
};

template <typename S>
struct Conv3dLayer {
  Tensor<S> w, b;  // w [Cout, Cin, kt, kh, kw]
  Dims3 stride{1, 1, 1}, pad{0, 0, 0};

  Conv3dLayer() = default;
  Conv3dLayer(int64_t cin, int64_t cout, Dims3 k, Dims3 stride_, Dims3 pad_, Rng& rng)
      : w(detail::xavier<S>({cout, cin, k[0], k[1], k[2]}, cin * k[0] * k[1] * k[2],
                            cout * k[0] * k[1] * k[2], rng)),
        b(Tensor<S>::zeros({1, cout, 1, 1, 1}, true)),
        stride(stride_),
        pad(pad_) {}

  Tensor<S> forward(const Tensor<S>& x) const { return add(conv3d(x, w, stride, pad), b); }

  void collect(const std::string& prefix, std::vector<NamedTensor<S>>& out) {
    out.push_back({prefix + ".w", w});
    out.push_back({prefix + ".b", b});
  }
};

template <typename S>
struct GroupNormLayer {
  Tensor<S> gamma, beta;
  int64_t groups = 1;

  GroupNormLayer() = default;
  explicit GroupNormLayer(int64_t channels)
      : gamma(Tensor<S>::full({channels}, S(1), true)),
        beta(Tensor<S>::zeros({channels}, true)),
        groups(detail::norm_groups(channels)) {}

  Tensor<S> forward(const Tensor<S>& x) const { return group_norm(x, gamma, beta, groups); }

  void collect(const std::string& prefix, std::vector<NamedTensor<S>>& out) {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
  }
};

template <typename S>
struct LayerNormLayer {
  Tensor<S> gamma, beta;

  LayerNormLayer() = default;
  explicit LayerNormLayer(int64_t d)
      : gamma(Tensor<S>::full({d}, S(1), true)), beta(Tensor<S>::zeros({d}, true)) {}

  Tensor<S> forward(const Tensor<S>& x) const { return layer_norm(x, gamma, beta); }

  void collect(const std::string& prefix, std::vector<NamedTensor<S>>& out) {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
  }
};

template <typename S>
struct MultiHeadAttention {
  LinearLayer<S> wq, wk, wv, wo;
  int64_t heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(int64_t d, int64_t heads_, Rng& rng)
      : wq(d, d, rng), wk(d, d, rng), wv(d, d, rng), wo(d, d, rng), heads(heads_) {}

  AttentionResult<S> forward(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                             bool want_probs = false) const {
    auto res = scaled_dot_attention(wq.forward(q), wk.forward(k), wv.forward(v), heads,
                                    want_probs);
    res.output = wo.forward(res.output);
    return res;
  }

  void collect(const std::string& prefix, std::vector<NamedTensor<S>>& out) {
    wq.collect(prefix + ".wq", out);
    wk.collect(prefix + ".wk", out);
    wv.collect(prefix + ".wv", out);
    wo.collect(prefix + ".wo", out);
  }
};

// Post-norm encoder layer; the positional encoding is added to queries and
// keys only, values stay untouched.
template <typename S>
struct EncoderLayer {
  MultiHeadAttention<S> attn;
  LinearLayer<S> ffn1, ffn2;
  LayerNormLayer<S> ln1, ln2;

  EncoderLayer() = default;
  EncoderLayer(int64_t d, int64_t heads, int64_t ffn_dim, Rng& rng)
      : attn(d, heads, rng), ffn1(d, ffn_dim, rng), ffn2(ffn_dim, d, rng), ln1(d), ln2(d) {}

  Tensor<S> forward(const Tensor<S>& x, const Tensor<S>& pe) const {
    Tensor<S> qk = pe.defined() ? add(x, pe) : x;
    auto a = attn.forward(qk, qk, x).output;
    auto y = ln1.forward(add(x, a));
    auto f = ffn2.forward(relu(ffn1.forward(y)));
    return ln2.forward(add(y, f));
  }

  void collect(const std::string& prefix, std::vector<NamedTensor<S>>& out) {
    attn.collect(prefix + ".attn", out);
    ffn1.collect(prefix + ".ffn1", out);
    ffn2.collect(prefix + ".ffn2", out);
    ln1.collect(prefix + ".ln1", out);
    ln2.collect(prefix + ".ln2", out);
  }
};

template <typename S>
struct DecoderLayer {
  MultiHeadAttention<S> self_attn, cross_attn;
  LinearLayer<S> ffn1, ffn2;
  LayerNormLayer<S> ln1, ln2, ln3;

  DecoderLayer() = default;
  DecoderLayer(int64_t d, int64_t heads, int64_t ffn_dim, Rng& rng)
      : self_attn(d, heads, rng),
        cross_attn(d, heads, rng),
        ffn1(d, ffn_dim, rng),
        ffn2(ffn_dim, d, rng),
        ln1(d),
        ln2(d),
        ln3(d) {}

  Tensor<S> forward(const Tensor<S>& x, const Tensor<S>& memory,
                    const Tensor<S>& mem_pe) const {
    auto a = self_attn.forward(x, x, x).output;
    auto y = ln1.forward(add(x, a));
    Tensor<S> keys = mem_pe.defined() ? add(memory, mem_pe) : memory;
    auto c = cross_attn.forward(y, keys, memory).output;
    y = ln2.forward(add(y, c));
    auto f = ffn2.forward(relu(ffn1.forward(y)));
    return ln3.forward(add(y, f));
  }

  void collect(const std::string& prefix, std::vector<NamedTensor<S>>& out) {
    self_attn.collect(prefix + ".self", out);
    cross_attn.collect(prefix + ".cross", out);
    ffn1.collect(prefix + ".ffn1", out);
    ffn2.collect(prefix + ".ffn2", out);
    ln1.collect(prefix + ".ln1", out);
    ln2.collect(prefix + ".ln2", out);
    ln3.collect(prefix + ".ln3", out);
  }
};

// Four-stage per-frame CNN, stride 8, channels 16 -> 32 -> 64 -> C. The /4
// stage output is retained for mask fusion.
template <typename S>
struct Backbone {
  Conv2dLayer<S> c1, c2, c3, c4;
  GroupNormLayer<S> g1, g2, g3, g4;

  Backbone() = default;
  Backbone(int64_t out_channels, Rng& rng)
      : c1(3, 16, 3, {2, 2}, {1, 1}, rng),
        c2(16, 32, 3, {2, 2}, {1, 1}, rng),
        c3(32, 64, 3, {2, 2}, {1, 1}, rng),
        c4(64, out_channels, 3, {1, 1}, {1, 1}, rng),
        g1(16),
        g2(32),
        g3(64),
        g4(out_channels) {}

  struct Output {
    Tensor<S> f0;  // [T, C, H0/8, W0/8]
    Tensor<S> b4;  // [T, 32, H0/4, W0/4]
  };

  Output forward(const Tensor<S>& clip) const {
    auto x = relu(g1.forward(c1.forward(clip)));  // /2
    auto b4 = relu(g2.forward(c2.forward(x)));    // /4
    auto y = relu(g3.forward(c3.forward(b4)));    // /8
    auto f0 = relu(g4.forward(c4.forward(y)));    // /8
    return {f0, b4};
  }

  void collect(const std::string& prefix, std::vector<NamedTensor<S>>& out) {
    c1.collect(prefix + ".c1", out);
    c2.collect(prefix + ".c2", out);
    c3.collect(prefix + ".c3", out);
    c4.collect(prefix + ".c4", out);
    g1.collect(prefix + ".g1", out);
    g2.collect(prefix + ".g2", out);
    g3.collect(prefix + ".g3", out);
    g4.collect(prefix + ".g4", out);
  }
};

// Flatten [T, d, H, W] to the sequence layout [T*H*W, d] in the shared
// (t, h, w) raster order.
template <typename S>
Tensor<S> flatten_to_sequence(const Tensor<S>& x) {
  int64_t T = x.dim(0), d = x.dim(1), H = x.dim(2), W = x.dim(3);
  return reshape(permute(x, {0, 2, 3, 1}), {T * H * W, d});
}

template <typename S>
Tensor<S> sequence_to_frames(const Tensor<S>& seq, int64_t T, int64_t H, int64_t W) {
  int64_t d = seq.dim(1);
  return permute(reshape(seq, {T, H, W, d}), {0, 3, 1, 2});  // [T, d, H, W]
}

template <typename S>
struct ModelOutput {
  Tensor<S> class_logits;  // [N, K+1]
  Tensor<S> boxes;         // [N, 4], sigmoid cxcywh
  Tensor<S> mask_logits;   // [n, 1, T, H0/4, W0/4]
  Tensor<S> encoder_out;   // [L, d]
};

template <typename S>
struct VisTRModel {
  ModelConfig cfg;
  Backbone<S> backbone;
  Conv2dLayer<S> input_proj;  // 1x1, C -> d
  std::vector<EncoderLayer<S>> encoder;
  std::vector<DecoderLayer<S>> decoder;
  Tensor<S> query_embed;  // [unique_queries, d]
  LinearLayer<S> class_head;
  LinearLayer<S> box1, box2, box3;
  // mask feature fusion
  LinearLayer<S> mh_query;
  LinearLayer<S> mh_gate;     // d -> 3a, per-instance channel gate on source features
  Conv2dLayer<S> mh_key;      // 1x1 d -> d
  Conv2dLayer<S> fuse_src;    // 1x1 d -> 3a (transformed encoded features)
  Conv2dLayer<S> fuse_conv1;  // 3x3 (3a+heads) -> 3a
  GroupNormLayer<S> fuse_gn1;
  Conv2dLayer<S> fuse_b4;     // 1x1 32 -> 3a
  Conv2dLayer<S> fuse_conv2;  // 3x3 3a -> 2a
  GroupNormLayer<S> fuse_gn2;
  Conv2dLayer<S> fuse_out;    // 3x3 2a -> a, no norm or activation
  // instance sequence segmentation
  Conv3dLayer<S> seg1, seg2, seg3, seg_out;
  GroupNormLayer<S> seg_gn1, seg_gn2, seg_gn3;
  Conv3dLayer<S> seg2d;  // ablation head: per-frame conv, output channel 1

  VisTRModel(const ModelConfig& config, Rng& rng) : cfg(config) {
    cfg.validate();
    int64_t d = cfg.d, a = cfg.mask_channels;
    backbone = Backbone<S>(cfg.backbone_channels, rng);
    input_proj = Conv2dLayer<S>(cfg.backbone_channels, d, 1, {1, 1}, {0, 0}, rng);
    for (int64_t i = 0; i < cfg.encoder_layers; ++i)
      encoder.emplace_back(d, cfg.heads, cfg.ffn_dim, rng);
    for (int64_t i = 0; i < cfg.decoder_layers; ++i)
      decoder.emplace_back(d, cfg.heads, cfg.ffn_dim, rng);
    query_embed = Tensor<S>::normal({unique_queries(), d}, rng, S(0), S(1), true);
    class_head = LinearLayer<S>(d, cfg.K + 1, rng);
    box1 = LinearLayer<S>(d, d, rng);
    box2 = LinearLayer<S>(d, d, rng);
    box3 = LinearLayer<S>(d, 4, rng);
    mh_query = LinearLayer<S>(d, d, rng);
    mh_gate = LinearLayer<S>(d, 3 * a, rng);
    mh_key = Conv2dLayer<S>(d, d, 1, {1, 1}, {0, 0}, rng);
    fuse_src = Conv2dLayer<S>(d, 3 * a, 1, {1, 1}, {0, 0}, rng);
    fuse_conv1 = Conv2dLayer<S>(3 * a + cfg.heads, 3 * a, 3, {1, 1}, {1, 1}, rng);
    fuse_gn1 = GroupNormLayer<S>(3 * a);
    fuse_b4 = Conv2dLayer<S>(32, 3 * a, 1, {1, 1}, {0, 0}, rng);
    fuse_conv2 = Conv2dLayer<S>(3 * a, 2 * a, 3, {1, 1}, {1, 1}, rng);
    fuse_gn2 = GroupNormLayer<S>(2 * a);
    fuse_out = Conv2dLayer<S>(2 * a, a, 3, {1, 1}, {1, 1}, rng);
    // only the active segmentation head is materialized
    if (cfg.use_3d_head) {
      seg1 = Conv3dLayer<S>(a, a, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}, rng);
      seg2 = Conv3dLayer<S>(a, a, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}, rng);
      seg3 = Conv3dLayer<S>(a, a, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}, rng);
      seg_gn1 = GroupNormLayer<S>(a);
      seg_gn2 = GroupNormLayer<S>(a);
      seg_gn3 = GroupNormLayer<S>(a);
      seg_out = Conv3dLayer<S>(a, 1, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}, rng);
    } else {
      seg2d = Conv3dLayer<S>(a, 1, {1, 3, 3}, {1, 1, 1}, {0, 1, 1}, rng);
    }
  }

  int64_t unique_queries() const {
    switch (cfg.query_mode) {
      case QueryMode::video: return 1;
      case QueryMode::frame: return cfg.T;
      case QueryMode::instance: return cfg.n;
      default: return cfg.N();
    }
  }

  // Expands the learned embeddings to [N, d] following the grouping rule.
  Tensor<S> build_queries() const {
    int64_t d = cfg.d, n = cfg.n, T = cfg.T;
    switch (cfg.query_mode) {
      case QueryMode::prediction:
        return query_embed;
      case QueryMode::instance: {
        std::vector<Tensor<S>> copies(static_cast<size_t>(T), query_embed);
        return concat(copies, 0);  // frame-major tiling: rows j and j+n identical
      }
      case QueryMode::frame: {
        auto tiled = add(reshape(query_embed, {T, 1, d}), Tensor<S>::zeros({T, n, d}));
        return reshape(tiled, {T * n, d});
      }
      default: {  // video
        auto tiled = add(reshape(query_embed, {1, d}), Tensor<S>::zeros({cfg.N(), d}));
        return tiled;
      }
    }
  }

  Tensor<S> encoder_forward(const Tensor<S>& src_seq, const Tensor<S>& pe) const {
    Tensor<S> e = src_seq;
    for (const auto& layer : encoder) e = layer.forward(e, pe);
    return e;
  }

  Tensor<S> decoder_forward(const Tensor<S>& memory, const Tensor<S>& queries,
                            const Tensor<S>& mem_pe) const {
    Tensor<S> o = queries;
    for (const auto& layer : decoder) o = layer.forward(o, memory, mem_pe);
    return o;
  }

  // Per-frame attention maps between instance features and the frame's
  // feature map, fused with backbone and projected source features into
  // per-instance mask features g_t, stacked over time to [n, a, T, H0/4, W0/4].
  Tensor<S> mask_head(const Tensor<S>& out_seq, const Tensor<S>& src_seq,
                      const Tensor<S>& b4) const {
    int64_t n = cfg.n, T = cfg.T, H = cfg.H(), W = cfg.W();
    int64_t h4 = cfg.H0 / 4, w4 = cfg.W0 / 4;
    auto o_frames = reshape(out_seq, {T, n, cfg.d});
    auto feat_frames = sequence_to_frames(src_seq, T, H, W);  // [T, d, H, W]
    std::vector<Tensor<S>> per_frame;
    for (int64_t t = 0; t < T; ++t) {
      auto o_t = reshape(slice(o_frames, {{t, t + 1}}), {n, cfg.d});
      auto f_t = slice(feat_frames, {{t, t + 1}});  // [1, d, H, W]
      auto q = mh_query.forward(o_t);               // [n, d]
      auto k_map = mh_key.forward(f_t);             // [1, d, H, W]
      auto k = reshape(permute(k_map, {0, 2, 3, 1}), {H * W, cfg.d});
      auto maps = attention_probs(q, k, cfg.heads);               // [heads, n, HW]
      auto maps_nchw = reshape(permute(maps, {1, 0, 2}), {n, cfg.heads, H, W});
      auto src_proj = fuse_src.forward(f_t);                      // [1, 3a, H, W]
      // per-instance channel gate; without it the shared source features can
      // settle on one union mask for every slot
      auto gate = reshape(sigmoid(mh_gate.forward(o_t)), {n, 3 * cfg.mask_channels, 1, 1});
      auto src_gated = mul(gate, src_proj);  // broadcasts to [n, 3a, H, W]
      auto x = concat<S>({src_gated, maps_nchw}, 1);
      x = relu(fuse_gn1.forward(fuse_conv1.forward(x)));
      x = upsample_bilinear(x, h4, w4);
      auto b4_t = slice(b4, {{t, t + 1}});  // [1, 32, h4, w4]
      x = add(x, fuse_b4.forward(b4_t));
      x = relu(fuse_gn2.forward(fuse_conv2.forward(x)));
      auto g_t = fuse_out.forward(x);  // [n, a, h4, w4]
      per_frame.push_back(reshape(g_t, {n, cfg.mask_channels, 1, h4, w4}));
    }
    return concat(per_frame, 2);  // [n, a, T, h4, w4]
  }

  // Three conv3d+GN+ReLU blocks and a final conv3d to one channel; the 2D
  // ablation replaces the stack with a single per-frame convolution.
  Tensor<S> segment_sequence(const Tensor<S>& g) const {
    if (!cfg.use_3d_head) return seg2d.forward(g);
    auto x = relu(seg_gn1.forward(seg1.forward(g)));
    x = relu(seg_gn2.forward(seg2.forward(x)));
    x = relu(seg_gn3.forward(seg3.forward(x)));
    return seg_out.forward(x);  // [n, 1, T, h4, w4]
  }

  ModelOutput<S> forward(const Tensor<S>& clip) const {
    if (clip.rank() != 4 || clip.dim(0) != cfg.T || clip.dim(1) != 3 ||
        clip.dim(2) != cfg.H0 || clip.dim(3) != cfg.W0)
      throw std::invalid_argument("model: clip shape " + shape_str(clip.shape()) +
                                  " does not match config [T,3,H0,W0]");
    auto bb = backbone.forward(clip);
    auto f1 = input_proj.forward(bb.f0);          // [T, d, H, W]
    auto src_seq = flatten_to_sequence(f1);       // [L, d]
    Tensor<S> pe;
    if (cfg.use_positional) pe = positional_encoding_sequence<S>(cfg.posenc());
    auto e = encoder_forward(src_seq, pe);
    auto o = decoder_forward(e, build_queries(), cfg.posenc_on_cross_keys ? pe : Tensor<S>());

    ModelOutput<S> out;
    out.encoder_out = e;
    out.class_logits = class_head.forward(o);
    out.boxes = sigmoid(box3.forward(relu(box2.forward(relu(box1.forward(o))))));
    auto mask_src = cfg.mask_feature_source == MaskFeatureSource::encoder ? e : src_seq;
    auto g = mask_head(o, mask_src, bb.b4);
    out.mask_logits = segment_sequence(g);
    return out;
  }

  std::vector<NamedTensor<S>> parameters() {
    std::vector<NamedTensor<S>> out;
    backbone.collect("backbone", out);
    input_proj.collect("input_proj", out);
    for (size_t i = 0; i < encoder.size(); ++i)
      encoder[i].collect("encoder." + std::to_string(i), out);
    for (size_t i = 0; i < decoder.size(); ++i)
      decoder[i].collect("decoder." + std::to_string(i), out);
    out.push_back({"queries", query_embed});
    class_head.collect("class_head", out);
    box1.collect("box_head.0", out);
    box2.collect("box_head.1", out);
    box3.collect("box_head.2", out);
    mh_query.collect("mask_head.query", out);
    mh_gate.collect("mask_head.gate", out);
    mh_key.collect("mask_head.key", out);
    fuse_src.collect("mask_head.src", out);
    fuse_conv1.collect("mask_head.conv1", out);
    fuse_gn1.collect("mask_head.gn1", out);
    fuse_b4.collect("mask_head.b4", out);
    fuse_conv2.collect("mask_head.conv2", out);
    fuse_gn2.collect("mask_head.gn2", out);
    fuse_out.collect("mask_head.out", out);
    if (cfg.use_3d_head) {
      seg1.collect("seg_head.0", out);
      seg_gn1.collect("seg_head.gn0", out);
      seg2.collect("seg_head.1", out);
      seg_gn2.collect("seg_head.gn1", out);
      seg3.collect("seg_head.2", out);
      seg_gn3.collect("seg_head.gn2", out);
      seg_out.collect("seg_head.out", out);
    } else {
      seg2d.collect("seg_head.flat", out);
    }
    // names must be unique for checkpointing
    std::set<std::string> seen;
    for (const auto& nt : out)
      if (!seen.insert(nt.name).second)
        throw std::logic_error("duplicate parameter name: " + nt.name);
    return out;
  }

  void save_checkpoint(const std::string& path) { save_tensors(path, parameters()); }

  void load_checkpoint(const std::string& path) {
    auto m = load_tensor_map<S>(path);
    auto params = parameters();
    if (m.size() != params.size())
      throw format_error("checkpoint has " + std::to_string(m.size()) +
                         " tensors, model expects " + std::to_string(params.size()));
    for (auto& p : params) {
      auto it = m.find(p.name);
      if (it == m.end()) throw format_error("checkpoint missing tensor: " + p.name);
      if (it->second.shape() != p.tensor.shape())
        throw format_error("checkpoint shape mismatch for '" + p.name + "': file " +
                           shape_str(it->second.shape()) + " vs model " +
                           shape_str(p.tensor.shape()));
      p.tensor.values() = it->second.values();
    }
  }
};

}  // namespace vistr
