#include <gtest/gtest.h>

#include "vistr/losses.hpp"
#include "vistr/model.hpp"

using vistr::ModelConfig;
using vistr::QueryMode;
using vistr::Shape;
using TensorD = vistr::Tensor<double>;
using ModelD = vistr::VisTRModel<double>;

namespace {

ModelConfig tiny_cfg() {
  ModelConfig cfg;
  cfg.d = 24;
  cfg.n = 2;
  cfg.T = 2;
  cfg.heads = 8;
  cfg.encoder_layers = 1;
  cfg.decoder_layers = 1;
  cfg.ffn_dim = 48;
  cfg.K = 3;
  cfg.mask_channels = 4;
  cfg.backbone_channels = 32;
  cfg.H0 = 32;
  cfg.W0 = 32;
  return cfg;
}

TensorD random_clip(const ModelConfig& cfg, uint64_t seed) {
  vistr::Rng rng(seed);
  return TensorD::uniform({cfg.T, 3, cfg.H0, cfg.W0}, rng, 0, 1);
}

}  // namespace

TEST(BackboneNet, SharedWeightsAcrossFrames) {
  auto cfg = tiny_cfg();
  vistr::Rng rng(1);
  vistr::Backbone<double> bb(cfg.backbone_channels, rng);
  vistr::Rng rng2(2);
  auto frame = TensorD::uniform({1, 3, 32, 32}, rng2, 0, 1);
  auto clip = vistr::concat<double>({frame, frame}, 0);  // frame2 == frame1
  auto out = bb.forward(clip);
  int64_t half = out.f0.numel() / 2;
  for (int64_t i = 0; i < half; ++i)
    ASSERT_EQ(out.f0.values()[i], out.f0.values()[half + i]);
}

TEST(BackboneNet, StrideEightShapes) {
  ModelConfig cfg;
  cfg.H0 = 96;
  cfg.W0 = 160;
  vistr::Rng rng(3);
  vistr::Backbone<double> bb(128, rng);
  vistr::Rng rng2(4);
  auto clip = TensorD::uniform({1, 3, 96, 160}, rng2, 0, 1);
  auto out = bb.forward(clip);
  EXPECT_EQ(out.f0.shape(), (Shape{1, 128, 12, 20}));
  EXPECT_EQ(out.b4.shape(), (Shape{1, 32, 24, 40}));
}

TEST(BackboneNet, ZeroInputZeroBiasGivesZeroFeatures) {
  vistr::Rng rng(5);
  vistr::Backbone<double> bb(32, rng);  // biases and GN betas are zero-initialized
  auto clip = TensorD::zeros({2, 3, 32, 32});
  auto out = bb.forward(clip);
  for (double v : out.f0.values()) ASSERT_EQ(v, 0.0);
}

TEST(Encoder, ZeroLayersIsIdentity) {
  auto cfg = tiny_cfg();
  cfg.encoder_layers = 0;
  vistr::Rng rng(6);
  ModelD model(cfg, rng);
  auto clip = random_clip(cfg, 7);
  auto bb = model.backbone.forward(clip);
  auto src = vistr::flatten_to_sequence(model.input_proj.forward(bb.f0));
  auto out = model.forward(clip);
  EXPECT_EQ(out.encoder_out.values(), src.values());
}

TEST(Encoder, SequenceLengthArithmetic) {
  ModelConfig cfg;
  cfg.T = 6;
  cfg.H0 = 64;   // H = 8
  cfg.W0 = 80;   // W = 10
  EXPECT_EQ(cfg.L(), 480);
}

TEST(Encoder, FrameSwapPermutesSequenceBlocksExactly) {
  auto cfg = tiny_cfg();
  cfg.encoder_layers = 0;
  vistr::Rng rng(8);
  ModelD model(cfg, rng);
  auto clip = random_clip(cfg, 9);
  // swap the two frames
  auto f0 = vistr::slice(clip, {{0, 1}});
  auto f1 = vistr::slice(clip, {{1, 2}});
  auto swapped = vistr::concat<double>({f1, f0}, 0);
  auto e = model.forward(clip).encoder_out;
  auto e_sw = model.forward(swapped).encoder_out;
  int64_t block = e.numel() / 2;  // per-frame block of the sequence
  for (int64_t i = 0; i < block; ++i) {
    ASSERT_EQ(e.values()[i], e_sw.values()[block + i]);
    ASSERT_EQ(e.values()[block + i], e_sw.values()[i]);
  }
}

TEST(Encoder, FlattenFollowsSharedRasterOrder) {
  // feature value encodes its own (t, h, w); the flattened row index must be
  // the shared sequence_index of that triple
  const int64_t T = 2, d = 3, H = 4, W = 5;
  std::vector<double> data(T * d * H * W);
  for (int64_t t = 0; t < T; ++t)
    for (int64_t c = 0; c < d; ++c)
      for (int64_t h = 0; h < H; ++h)
        for (int64_t w = 0; w < W; ++w)
          data[((t * d + c) * H + h) * W + w] = 1000 * t + 100 * h + 10 * w + c;
  auto x = TensorD::from_data({T, d, H, W}, data);
  auto seq = vistr::flatten_to_sequence(x);
  for (int64_t t = 0; t < T; ++t)
    for (int64_t h = 0; h < H; ++h)
      for (int64_t w = 0; w < W; ++w) {
        int64_t row = vistr::sequence_index(t, h, w, H, W);
        for (int64_t c = 0; c < d; ++c)
          ASSERT_EQ(seq.values()[row * d + c], 1000 * t + 100 * h + 10 * w + c);
      }
}

TEST(Queries, PredictionModeHasAllUniqueRows) {
  ModelConfig cfg;
  cfg.n = 10;
  cfg.T = 36;
  cfg.K = 40;
  cfg.query_mode = QueryMode::prediction;
  cfg.H0 = 96;
  cfg.W0 = 160;
  vistr::Rng rng(10);
  ModelD model(cfg, rng);
  EXPECT_EQ(cfg.N(), 360);
  auto q = model.build_queries();
  EXPECT_EQ(q.shape(), (Shape{360, 96}));
  // class head emits K+1 = 41 logits
  EXPECT_EQ(model.class_head.w.shape(), (Shape{96, 41}));
  // spot-check uniqueness on a sample of row pairs
  vistr::Rng pick(11);
  for (int trial = 0; trial < 200; ++trial) {
    int64_t a = pick.uniform_int(0, 359), b = pick.uniform_int(0, 359);
    if (a == b) continue;
    bool differ = false;
    for (int64_t c = 0; c < 96 && !differ; ++c)
      differ = q.values()[a * 96 + c] != q.values()[b * 96 + c];
    EXPECT_TRUE(differ);
  }
}

TEST(Queries, InstanceModeTilesAcrossFrames) {
  auto cfg = tiny_cfg();
  cfg.n = 3;
  cfg.T = 4;
  cfg.query_mode = QueryMode::instance;
  vistr::Rng rng(12);
  ModelD model(cfg, rng);
  EXPECT_EQ(model.query_embed.shape(), (Shape{3, 24}));
  auto q = model.build_queries();
  ASSERT_EQ(q.shape(), (Shape{12, 24}));
  for (int64_t j = 0; j < 12 - 3; ++j)
    for (int64_t c = 0; c < 24; ++c)
      ASSERT_EQ(q.values()[j * 24 + c], q.values()[(j + 3) * 24 + c]);
}

TEST(Queries, FrameModeRepeatsWithinFrame) {
  auto cfg = tiny_cfg();
  cfg.n = 3;
  cfg.T = 2;
  cfg.query_mode = QueryMode::frame;
  vistr::Rng rng(13);
  ModelD model(cfg, rng);
  EXPECT_EQ(model.query_embed.shape(), (Shape{2, 24}));
  auto q = model.build_queries();
  // rows 0..2 equal (frame 0), rows 3..5 equal (frame 1), frames differ
  for (int64_t j = 0; j < 3; ++j)
    for (int64_t c = 0; c < 24; ++c) {
      ASSERT_EQ(q.values()[j * 24 + c], q.values()[c]);
      ASSERT_EQ(q.values()[(3 + j) * 24 + c], q.values()[3 * 24 + c]);
    }
  bool differ = false;
  for (int64_t c = 0; c < 24 && !differ; ++c)
    differ = q.values()[c] != q.values()[3 * 24 + c];
  EXPECT_TRUE(differ);
}

TEST(Queries, VideoModeRepeatsEverywhere) {
  auto cfg = tiny_cfg();
  cfg.query_mode = QueryMode::video;
  vistr::Rng rng(14);
  ModelD model(cfg, rng);
  EXPECT_EQ(model.query_embed.shape(), (Shape{1, 24}));
  auto q = model.build_queries();
  for (int64_t j = 0; j < cfg.N(); ++j)
    for (int64_t c = 0; c < 24; ++c) ASSERT_EQ(q.values()[j * 24 + c], q.values()[c]);
}

TEST(Decoder, ZeroLayersReturnsQueries) {
  auto cfg = tiny_cfg();
  cfg.decoder_layers = 0;
  vistr::Rng rng(15);
  ModelD model(cfg, rng);
  auto queries = model.build_queries();
  auto memory = TensorD::zeros({cfg.L(), cfg.d});
  auto o = model.decoder_forward(memory, queries, TensorD());
  EXPECT_EQ(o.values(), queries.values());
}

TEST(Decoder, PermutingQueryRowsPermutesOutputs) {
  auto cfg = tiny_cfg();
  vistr::Rng rng(16);
  ModelD model(cfg, rng);
  vistr::Rng rng2(17);
  auto memory = TensorD::uniform({cfg.L(), cfg.d}, rng2, -1, 1);
  auto queries = TensorD::uniform({cfg.N(), cfg.d}, rng2, -1, 1);
  // swap rows 0 and 2
  auto swapped_q = vistr::concat<double>(
      {vistr::slice(queries, {{2, 3}}), vistr::slice(queries, {{1, 2}}),
       vistr::slice(queries, {{0, 1}}), vistr::slice(queries, {{3, -1}})},
      0);
  auto o = model.decoder_forward(memory, queries, TensorD());
  auto o_sw = model.decoder_forward(memory, swapped_q, TensorD());
  int64_t d = cfg.d;
  // equivariance is exact up to float reassociation in the attention sums
  for (int64_t c = 0; c < d; ++c) {
    EXPECT_NEAR(o.values()[0 * d + c], o_sw.values()[2 * d + c], 1e-12);
    EXPECT_NEAR(o.values()[2 * d + c], o_sw.values()[0 * d + c], 1e-12);
    EXPECT_NEAR(o.values()[1 * d + c], o_sw.values()[1 * d + c], 1e-12);
  }
}

TEST(Heads, BoxesAreSigmoidBounded) {
  auto cfg = tiny_cfg();
  vistr::Rng rng(18);
  ModelD model(cfg, rng);
  auto out = model.forward(random_clip(cfg, 19));
  EXPECT_EQ(out.boxes.shape(), (Shape{cfg.N(), 4}));
  for (double v : out.boxes.values()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  EXPECT_EQ(out.class_logits.shape(), (Shape{cfg.N(), cfg.K + 1}));
}

TEST(Heads, ZeroedFinalLayersGiveCenterBoxAndUniformClasses) {
  auto cfg = tiny_cfg();
  vistr::Rng rng(20);
  ModelD model(cfg, rng);
  std::fill(model.box3.w.values().begin(), model.box3.w.values().end(), 0.0);
  std::fill(model.box3.b.values().begin(), model.box3.b.values().end(), 0.0);
  std::fill(model.class_head.w.values().begin(), model.class_head.w.values().end(), 0.0);
  std::fill(model.class_head.b.values().begin(), model.class_head.b.values().end(), 0.0);
  auto out = model.forward(random_clip(cfg, 21));
  for (double v : out.boxes.values()) EXPECT_DOUBLE_EQ(v, 0.5);
  auto probs = vistr::softmax(out.class_logits, 1);
  for (double p : probs.values()) EXPECT_NEAR(p, 1.0 / (cfg.K + 1), 1e-12);
}

TEST(MaskHead, OutputShapesAndSourceParity) {
  auto cfg = tiny_cfg();
  vistr::Rng rng(22);
  ModelD model(cfg, rng);
  auto clip = random_clip(cfg, 23);
  auto out = model.forward(clip);
  EXPECT_EQ(out.mask_logits.shape(), (Shape{cfg.n, 1, cfg.T, cfg.H0 / 4, cfg.W0 / 4}));
  // backbone-sourced mask features produce the same shapes
  model.cfg.mask_feature_source = vistr::MaskFeatureSource::backbone;
  auto out2 = model.forward(clip);
  EXPECT_EQ(out2.mask_logits.shape(), out.mask_logits.shape());
  EXPECT_NE(out2.mask_logits.values(), out.mask_logits.values());
}

TEST(MaskHead, AttentionMapsAreRowStochastic) {
  vistr::Rng rng(24);
  auto q = TensorD::uniform({3, 24}, rng, -1, 1);
  auto k = TensorD::uniform({20, 24}, rng, -1, 1);
  auto maps = vistr::attention_probs(q, k, 8);  // [heads, 3, 20]
  EXPECT_EQ(maps.shape(), (Shape{8, 3, 20}));
  for (double v : maps.values()) EXPECT_GE(v, 0.0);
  auto sums = vistr::sum(maps, {2});
  for (double s : sums.values()) EXPECT_NEAR(s, 1.0, 1e-6);
}

TEST(SegHead, TwoDAblationMatchesShape) {
  auto cfg = tiny_cfg();
  cfg.use_3d_head = false;
  vistr::Rng rng(25);
  ModelD model(cfg, rng);
  auto out = model.forward(random_clip(cfg, 26));
  EXPECT_EQ(out.mask_logits.shape(), (Shape{cfg.n, 1, cfg.T, cfg.H0 / 4, cfg.W0 / 4}));
}

TEST(Model, ForwardIsDeterministic) {
  auto cfg = tiny_cfg();
  vistr::Rng rng(27);
  ModelD model(cfg, rng);
  auto clip = random_clip(cfg, 28);
  auto a = model.forward(clip);
  auto b = model.forward(clip);
  EXPECT_EQ(a.class_logits.values(), b.class_logits.values());
  EXPECT_EQ(a.boxes.values(), b.boxes.values());
  EXPECT_EQ(a.mask_logits.values(), b.mask_logits.values());
}

TEST(Model, EveryParameterReceivesGradient) {
  auto cfg = tiny_cfg();
  vistr::Rng rng(29);
  ModelD model(cfg, rng);
  auto clip = random_clip(cfg, 30);
  auto out = model.forward(clip);
  // two ground-truth instances on the tiny canvas
  std::vector<vistr::InstanceSequenceTruth> truths;
  for (int i = 0; i < 2; ++i) {
    vistr::InstanceSequenceTruth tr;
    tr.category_id = i;
    for (int64_t t = 0; t < cfg.T; ++t) {
      vistr::BinaryMask m = vistr::BinaryMask::empty(cfg.H0, cfg.W0);
      for (int64_t y = 0; y < 8; ++y)
        for (int64_t x = 0; x < 8; ++x) m.at(8 + y, 4 + i * 16 + x) = 1;
      tr.masks.push_back(m);
      tr.boxes.push_back(vistr::derive_box(m));
      tr.presence.push_back(true);
    }
    truths.push_back(tr);
  }
  auto res = vistr::hungarian_loss(out.class_logits, out.boxes, out.mask_logits, cfg.n,
                                   cfg.T, truths, {}, cfg.H0, cfg.W0);
  res.total.backward();
  for (auto& p : model.parameters()) {
    const auto& g = p.tensor.grad_buffer();
    ASSERT_FALSE(g.empty()) << p.name << " never reached by backward";
    bool nonzero = false;
    for (double v : g) nonzero = nonzero || v != 0.0;
    EXPECT_TRUE(nonzero) << p.name << " has all-zero gradient";
  }
}

TEST(Model, CheckpointRoundTripReproducesForward) {
  auto cfg = tiny_cfg();
  vistr::Rng rng(31);
  ModelD model(cfg, rng);
  auto clip = random_clip(cfg, 32);
  auto before = model.forward(clip);
  std::string path = ::testing::TempDir() + "model_ckpt.vt";
  model.save_checkpoint(path);
  vistr::Rng rng2(99);  // different init
  ModelD model2(cfg, rng2);
  model2.load_checkpoint(path);
  auto after = model2.forward(clip);
  EXPECT_EQ(before.class_logits.values(), after.class_logits.values());
  EXPECT_EQ(before.mask_logits.values(), after.mask_logits.values());
  std::remove(path.c_str());
}

TEST(Model, CheckpointConfigMismatchIsDescriptive) {
  auto cfg = tiny_cfg();
  vistr::Rng rng(33);
  ModelD model(cfg, rng);
  std::string path = ::testing::TempDir() + "model_ckpt_mismatch.vt";
  model.save_checkpoint(path);
  auto cfg2 = cfg;
  cfg2.query_mode = QueryMode::prediction;  // different query tensor shape
  vistr::Rng rng2(34);
  ModelD model2(cfg2, rng2);
  try {
    model2.load_checkpoint(path);
    FAIL() << "expected format_error";
  } catch (const vistr::format_error& e) {
    EXPECT_NE(std::string(e.what()).find("queries"), std::string::npos);
  }
  std::remove(path.c_str());
}

TEST(Model, InvalidConfigsThrow) {
  auto cfg = tiny_cfg();
  cfg.d = 25;  // not divisible by heads or 3
  vistr::Rng rng(35);
  EXPECT_THROW(ModelD(cfg, rng), vistr::config_error);
  auto cfg2 = tiny_cfg();
  cfg2.H0 = 30;  // not divisible by stride
  EXPECT_THROW(ModelD(cfg2, rng), vistr::config_error);
}
