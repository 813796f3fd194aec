#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "sliceattn.hpp"

using namespace sliceattn;

// ---------------------------------------------------------------------------
// Boxes

TEST(Boxes, IouHandValues) {
  const Box a{0, 0, 10, 10};
  EXPECT_DOUBLE_EQ(iou(a, a), 1.0);
  EXPECT_DOUBLE_EQ(iou(a, Box{5, 0, 15, 10}), 50.0 / 150.0);
  EXPECT_DOUBLE_EQ(iou(a, Box{1, 1, 10, 10}), 0.81);
  EXPECT_DOUBLE_EQ(iou(a, Box{10, 0, 20, 10}), 0.0);  // shared edge only
  EXPECT_DOUBLE_EQ(iou(a, Box{30, 30, 40, 40}), 0.0);
  EXPECT_DOUBLE_EQ(iou(a, Box{2, 2, 4, 4}), 0.04);
  EXPECT_DOUBLE_EQ(iou(Box{2, 2, 4, 4}, a), 0.04);
}

TEST(Boxes, EncodeDecodeRoundTrip) {
  Rng rng(1);
  for (int n = 0; n < 200; ++n) {
    const Box ref{rng.uniform(0, 20), rng.uniform(0, 20), rng.uniform(25, 50), rng.uniform(25, 50)};
    const Box tgt{rng.uniform(0, 20), rng.uniform(0, 20), rng.uniform(25, 60), rng.uniform(25, 60)};
    const Box back = decode_box(ref, encode_box(ref, tgt));
    EXPECT_NEAR(back.x1, tgt.x1, 1e-9);
    EXPECT_NEAR(back.y1, tgt.y1, 1e-9);
    EXPECT_NEAR(back.x2, tgt.x2, 1e-9);
    EXPECT_NEAR(back.y2, tgt.y2, 1e-9);
  }
  const BoxDelta d = encode_box(Box{0, 0, 10, 10}, Box{5, 0, 25, 10});
  EXPECT_DOUBLE_EQ(d.dx, 1.0);
  EXPECT_DOUBLE_EQ(d.dy, 0.0);
  EXPECT_DOUBLE_EQ(d.dw, std::log(2.0));
  EXPECT_DOUBLE_EQ(d.dh, 0.0);
  EXPECT_THROW(encode_box(Box{0, 0, 0, 5}, Box{0, 0, 1, 1}), InputError);
}

TEST(Boxes, DecodeClampsScale) {
  const Box b = decode_box(Box{0, 0, 16, 16}, BoxDelta{0, 0, 100.0, 100.0});
  EXPECT_NEAR(b.width(), 1000.0, 1e-9);
  EXPECT_NEAR(b.height(), 1000.0, 1e-9);
}

TEST(Boxes, ClipKeepsInside) {
  const Box c = clip_box(Box{-5, -1, 70, 30}, 64, 64);
  EXPECT_EQ(c, (Box{0, 0, 64, 30}));
}

TEST(Boxes, OrderByScoreBreaksTiesByIndex) {
  const std::vector<double> s{0.5, 0.9, 0.5, 0.9, 0.1};
  EXPECT_EQ(order_by_score(s), (std::vector<std::size_t>{1, 3, 0, 2, 4}));
}

TEST(Boxes, NmsHandExample) {
  const std::vector<Box> boxes{{0, 0, 10, 10}, {1, 1, 10, 10}, {20, 20, 30, 30}, {5, 0, 15, 10}};
  const std::vector<double> scores{0.9, 0.8, 0.7, 0.6};
  EXPECT_EQ(nms(boxes, scores, 0.5), (std::vector<std::size_t>{0, 2, 3}));
  EXPECT_EQ(nms(boxes, scores, 0.3), (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(nms(boxes, scores, 0.5, 2), (std::vector<std::size_t>{0, 2}));
  // IoU equal to the threshold suppresses.
  EXPECT_EQ(nms(boxes, scores, 0.81), (std::vector<std::size_t>{0, 2, 3}));
  EXPECT_EQ(nms(boxes, scores, 0.82), (std::vector<std::size_t>{0, 1, 2, 3}));
  EXPECT_THROW(nms(boxes, std::vector<double>{1.0}, 0.5), InputError);
}

TEST(Boxes, NmsKeptSetIsPairwiseSeparated) {
  Rng rng(2);
  for (int n = 0; n < 30; ++n) {
    std::vector<Box> boxes;
    std::vector<double> scores;
    for (int i = 0; i < 40; ++i) {
      const double x = rng.uniform(0, 40), y = rng.uniform(0, 40);
      boxes.push_back(Box{x, y, x + rng.uniform(4, 20), y + rng.uniform(4, 20)});
      scores.push_back(rng.uniform());
    }
    const auto keep = nms(boxes, scores, 0.5);
    for (std::size_t a = 0; a < keep.size(); ++a) {
      for (std::size_t b = a + 1; b < keep.size(); ++b) {
        EXPECT_LT(iou(boxes[keep[a]], boxes[keep[b]]), 0.5);
        EXPECT_GE(scores[keep[a]], scores[keep[b]]);
      }
    }
    // Every dropped box overlaps some kept box with a higher score.
    const std::set<std::size_t> kept(keep.begin(), keep.end());
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      if (kept.contains(i)) continue;
      bool covered = false;
      for (std::size_t k : keep) covered = covered || (iou(boxes[i], boxes[k]) >= 0.5 && scores[k] >= scores[i]);
      EXPECT_TRUE(covered);
    }
  }
}

TEST(Boxes, AnchorLayout) {
  const std::vector<double> sizes{6, 12}, ratios{0.5, 1, 2};
  const auto a = generate_anchors(3, 4, 4, sizes, ratios);
  ASSERT_EQ(a.size(), 2u * 3u * 3u * 4u);
  // Index a * (H*W) + y * W + x.
  const Box& first = a[0];
  EXPECT_DOUBLE_EQ(first.cx(), 2.0);
  EXPECT_DOUBLE_EQ(first.cy(), 2.0);
  const Box& b = a[4 * 12 + 2 * 4 + 3];  // size 12, ratio 1, y 2, x 3
  EXPECT_DOUBLE_EQ(b.cx(), 14.0);
  EXPECT_DOUBLE_EQ(b.cy(), 10.0);
  EXPECT_NEAR(b.width(), 12.0, 1e-12);
  for (std::size_t s = 0; s < 2; ++s)
    for (std::size_t r = 0; r < 3; ++r) {
      const Box& x = a[(s * 3 + r) * 12];
      EXPECT_NEAR(x.height() / x.width(), ratios[r], 1e-12);
      EXPECT_NEAR(x.area(), sizes[s] * sizes[s], 1e-9);
    }
}

// ---------------------------------------------------------------------------
// Slice grouping

namespace {

Tensor numbered_volume(std::size_t slices, std::size_t h = 2, std::size_t w = 2) {
  Tensor v(Shape{slices, h, w});
  for (std::size_t s = 0; s < slices; ++s)
    for (std::size_t i = 0; i < h * w; ++i) v[s * h * w + i] = static_cast<double>(s);
  return v;
}

}  // namespace

TEST(SliceDeck, ExtractCentersAndPads) {
  const Tensor vol = numbered_volume(12);
  const SliceDeck mid = extract_deck(vol, 6, 3, 2.5, "v");
  ASSERT_EQ(mid.slice_count(), 9u);
  EXPECT_EQ(mid.key_index, 4u);
  for (std::size_t j = 0; j < 9; ++j) EXPECT_EQ(mid.slices.at(j, 0, 0), 2.0 + static_cast<double>(j));
  const SliceDeck low = extract_deck(vol, 1, 3, 2.5, "v");
  const std::vector<double> expect_low{0, 0, 0, 0, 1, 2, 3, 4, 5};
  for (std::size_t j = 0; j < 9; ++j) EXPECT_EQ(low.slices.at(j, 1, 1), expect_low[j]);
  const SliceDeck high = extract_deck(vol, 11, 3, 2.5, "v");
  EXPECT_EQ(high.slices.at(8, 0, 0), 11.0);
  EXPECT_EQ(high.slices.at(4, 0, 0), 11.0);
  EXPECT_EQ(high.slices.at(0, 0, 0), 7.0);
  EXPECT_THROW(extract_deck(vol, 12, 3, 1.0, "v"), InputError);
  EXPECT_THROW(extract_deck(Tensor(Shape{2, 2}), 0, 3, 1.0, "v"), InputError);
}

TEST(SliceDeck, GroupsThreeSlicesPerImage) {
  const SliceDeck deck = extract_deck(numbered_volume(20), 10, 5, 1.0, "v");
  const auto images = group_slices(deck, 5);
  ASSERT_EQ(images.size(), 5u);
  for (std::size_t j = 0; j < 5; ++j) {
    ASSERT_EQ(images[j].shape(), (Shape{3, 2, 2}));
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(images[j].at(c, 0, 0), 3.0 + static_cast<double>(3 * j + c));
  }
  // Key slice is the middle channel of the middle image.
  EXPECT_EQ(images[2].at(1, 0, 0), 10.0);
}

TEST(SliceDeck, ShortDeckIsPaddedAroundKey) {
  SliceDeck deck{numbered_volume(3), 1, 1.0, "v"};
  const auto images = group_slices(deck, 3);
  ASSERT_EQ(images.size(), 3u);
  EXPECT_EQ(images[1].at(1, 0, 0), 1.0);
  EXPECT_EQ(images[0].at(0, 0, 0), 0.0);
  EXPECT_EQ(images[2].at(2, 0, 0), 2.0);
}

// ---------------------------------------------------------------------------
// Parameters

namespace {

std::vector<std::string> names(const ParamStore& p) {
  std::vector<std::string> out;
  for (const auto& [n, _] : p) out.push_back(n);
  return out;
}

PipelineConfig with_attention(bool contextual, bool spatial) {
  PipelineConfig c;
  c.attention.enable_contextual = contextual;
  c.attention.enable_spatial = spatial;
  return c;
}

}  // namespace

TEST(Params, AttentionParamsFollowConfig) {
  const ParamStore both = init_params(with_attention(true, true), 0);
  const ParamStore none = init_params(with_attention(false, false), 0);
  const ParamStore c_only = init_params(with_attention(true, false), 0);
  const ParamStore s_only = init_params(with_attention(false, true), 0);
  EXPECT_TRUE(both.contains(kContextualWeights) && both.contains(kSpatialBias));
  EXPECT_FALSE(none.contains(kContextualWeights) || none.contains(kContextualBias) ||
               none.contains(kSpatialWeights) || none.contains(kSpatialBias));
  EXPECT_TRUE(c_only.contains(kContextualWeights) && !c_only.contains(kSpatialWeights));
  EXPECT_TRUE(s_only.contains(kSpatialWeights) && !s_only.contains(kContextualWeights));
  EXPECT_EQ(both.size(), none.size() + 4);
  const Tensor& w = both.get(kContextualWeights);
  EXPECT_EQ(w.shape(), (Shape{16, 16, 3, 3}));
  for (double v : w.data()) EXPECT_EQ(v, 0.0);
}

TEST(Params, SharedParamsIndependentOfAttentionChoice) {
  const ParamStore both = init_params(with_attention(true, true), 4);
  const ParamStore none = init_params(with_attention(false, false), 4);
  for (const auto& [name, t] : none) {
    ASSERT_TRUE(both.contains(name)) << name;
    EXPECT_EQ(both.get(name).storage(), t.storage()) << name;
  }
}

TEST(Params, SeedDeterminesInit) {
  const ParamStore a = init_params(PipelineConfig{}, 5), b = init_params(PipelineConfig{}, 5);
  const ParamStore c = init_params(PipelineConfig{}, 6);
  EXPECT_EQ(names(a), names(b));
  EXPECT_EQ(a.get("rpn.conv.w").storage(), b.get("rpn.conv.w").storage());
  EXPECT_NE(a.get("rpn.conv.w").storage(), c.get("rpn.conv.w").storage());
}

TEST(Params, ShapesOfDefaultModel) {
  const ParamStore p = init_params(PipelineConfig{}, 0);
  EXPECT_EQ(p.get("backbone.conv1.w").shape(), (Shape{8, 3, 3, 3}));
  EXPECT_EQ(p.get("backbone.conv4.w").shape(), (Shape{16, 16, 3, 3}));
  EXPECT_EQ(p.get("rpn.conv.w").shape(), (Shape{32, 48, 3, 3}));
  EXPECT_EQ(p.get("rpn.cls.w").shape(), (Shape{9, 32, 1, 1}));
  EXPECT_EQ(p.get("rpn.reg.w").shape(), (Shape{36, 32, 1, 1}));
  EXPECT_EQ(p.get("head.psroi.w").shape(), (Shape{36, 48, 1, 1}));
  EXPECT_EQ(p.get("head.fc1.w").shape(), (Shape{36, 64}));
  EXPECT_EQ(p.get("head.reg.w").shape(), (Shape{64, 4}));
}

TEST(Params, ConfigValidation) {
  PipelineConfig c;
  c.M = 2;
  EXPECT_THROW(c.validate(), ContractError);
  c = PipelineConfig{};
  c.backbone_strides.pop_back();
  EXPECT_THROW(c.validate(), ContractError);
  c = PipelineConfig{};
  c.anchor_ratios.clear();
  EXPECT_THROW(c.validate(), ContractError);
}

// ---------------------------------------------------------------------------
// Forward pass

namespace {

Sample sample_for(std::size_t index, std::size_t size = 32) {
  PhantomSpec spec;
  spec.image_size = size;
  spec.lesion_diameter_px = {5.0, std::min(24.0, static_cast<double>(size) - 4.0)};
  spec.seed = 21;
  return generate_one(spec, index);
}

}  // namespace

TEST(Pipeline, ForwardShapes) {
  const PipelineConfig config;
  ParamStore params = init_params(config, 0);
  const Sample s = sample_for(0, 64);
  Graph g;
  BoundParams bound(g, params);
  const PipelineForward f = forward_pipeline(g, bound, config, s.deck);
  EXPECT_EQ(f.images.size(), 3u);
  EXPECT_EQ(f.backbone.data.shape(), (Shape{3, 16, 16, 16}));
  EXPECT_EQ(f.features.shape(), (Shape{48, 16, 16}));
  EXPECT_EQ(f.rpn.logits.shape(), (Shape{9, 16, 16}));
  EXPECT_EQ(f.rpn.deltas.shape(), (Shape{36, 16, 16}));
  EXPECT_EQ(f.rpn.anchor_count(), 9u * 256u);
  EXPECT_EQ(f.attention.fields.size(), 2u);
}

TEST(Pipeline, FeaturesConcatenateImagesInOrder) {
  const PipelineConfig config = with_attention(false, false);
  ParamStore params = init_params(config, 0);
  const Sample s = sample_for(1);
  Graph g;
  BoundParams bound(g, params);
  const PipelineForward f = forward_pipeline(g, bound, config, s.deck);
  const Tensor& stack = f.backbone.data.value();
  const Tensor& agg = f.features.value();
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t d = 0; d < 16; ++d) EXPECT_EQ(agg.at(i * 16 + d, 2, 3), stack.at(i, d, 2, 3));
}

// Zero-initialized attention convs give all-ones fields, so the untrained
// model with attention matches the one without, bit for bit.
TEST(Pipeline, UntrainedAttentionIsExactIdentity) {
  const Sample s = sample_for(2);
  ParamStore with = init_params(with_attention(true, true), 3);
  ParamStore without = init_params(with_attention(false, false), 3);
  const InferenceResult a = run_detector(with, with_attention(true, true), s.deck);
  const InferenceResult b = run_detector(without, with_attention(false, false), s.deck);
  EXPECT_EQ(a.features.storage(), b.features.storage());
  ASSERT_EQ(a.detections.size(), b.detections.size());
  for (std::size_t i = 0; i < a.detections.size(); ++i) {
    EXPECT_EQ(a.detections[i].box, b.detections[i].box);
    EXPECT_EQ(a.detections[i].score, b.detections[i].score);
  }
  ASSERT_EQ(a.attention_fields.size(), 2u);
  for (const Tensor& f : a.attention_fields)
    for (double v : f.data()) EXPECT_EQ(v, 1.0);
  EXPECT_EQ(a.attention_kinds[0], AttentionKind::contextual);
  EXPECT_EQ(a.attention_kinds[1], AttentionKind::spatial);
}

TEST(Pipeline, DetectorOutputIsWellFormed) {
  const PipelineConfig config;
  ParamStore params = init_params(config, 0);
  for (std::size_t idx = 0; idx < 3; ++idx) {
    const Sample s = sample_for(idx, 64);
    const InferenceResult r = run_detector(params, config, s.deck);
    EXPECT_LE(r.detections.size(), config.max_detections);
    for (std::size_t i = 0; i < r.detections.size(); ++i) {
      const Detection& d = r.detections[i];
      EXPECT_EQ(d.image_id, s.deck.volume_id);
      EXPECT_GE(d.score, config.score_threshold);
      EXPECT_LE(d.score, 1.0);
      EXPECT_TRUE(d.box.valid());
      EXPECT_GE(d.box.x1, 0.0);
      EXPECT_LE(d.box.x2, 64.0);
      if (i > 0) {
        EXPECT_LE(d.score, r.detections[i - 1].score);
      }
    }
  }
}

TEST(Pipeline, BoxToCells) {
  const ops::CellRect r = box_to_cells(Box{5, 9, 13, 17}, 4, 16, 16);
  EXPECT_EQ(r.y0, 2u);
  EXPECT_EQ(r.y1, 5u);
  EXPECT_EQ(r.x0, 1u);
  EXPECT_EQ(r.x1, 4u);
  const ops::CellRect tiny = box_to_cells(Box{4, 4, 4.5, 4.5}, 4, 16, 16);
  EXPECT_EQ(tiny.y1 - tiny.y0, 1u);
  const ops::CellRect edge = box_to_cells(Box{60, 60, 70, 70}, 4, 16, 16);
  EXPECT_EQ(edge.x1, 16u);
  EXPECT_LT(edge.x0, edge.x1);
}

// ---------------------------------------------------------------------------
// Labels and losses

TEST(Labels, ThresholdsAndBestMatch) {
  const std::vector<Box> gts{{0, 0, 10, 10}, {40, 40, 50, 50}};
  const std::vector<Box> boxes{
      {0, 0, 10, 10},    // 1.0 -> positive
      {0, 0, 10, 18},    // 0.5625 -> ignored
      {5, 0, 15, 10},    // 1/3 -> ignored
      {20, 20, 30, 30},  // 0 -> negative
      {42, 42, 55, 55},  // best for gt 1 (0.37) -> positive by best match
  };
  const AnchorLabels l = label_boxes(boxes, gts, 0.7, 0.3, true);
  EXPECT_EQ(l.label, (std::vector<int>{1, -1, -1, 0, 1}));
  EXPECT_EQ(l.matched[4], 1u);
  const AnchorLabels plain = label_boxes(boxes, gts, 0.7, 0.3, false);
  EXPECT_EQ(plain.label, (std::vector<int>{1, -1, -1, 0, -1}));
  const AnchorLabels empty = label_boxes(boxes, {}, 0.7, 0.3, true);
  EXPECT_EQ(empty.label, std::vector<int>(5, 0));
}

TEST(Labels, SamplingRespectsBudget) {
  std::vector<int> labels(100, 0);
  for (std::size_t i = 0; i < 40; ++i) labels[i * 2] = 1;
  labels[1] = -1;
  Rng rng(3);
  const auto s = sample_labeled(labels, 32, 0.25, rng);
  ASSERT_EQ(s.size(), 32u);
  std::size_t pos = 0;
  for (std::size_t i : s) {
    EXPECT_NE(labels[i], -1);
    pos += labels[i] == 1;
  }
  EXPECT_EQ(pos, 8u);
  EXPECT_TRUE(std::is_sorted(s.begin(), s.end()));
  Rng r2(3);
  EXPECT_EQ(sample_labeled(labels, 32, 0.25, r2), s);
}

TEST(Loss, FiniteAndPositiveWithGradients) {
  const PipelineConfig config;
  ParamStore params = init_params(config, 0);
  const Sample s = sample_for(4, 64);
  Graph g;
  BoundParams bound(g, params);
  const PipelineForward f = forward_pipeline(g, bound, config, s.deck);
  Rng rng(7);
  const LossTerms loss = detection_loss(g, bound, config, f, s.ground_truth, rng);
  const double total = loss.total.value().item();
  EXPECT_TRUE(std::isfinite(total));
  EXPECT_GT(loss.rpn_cls, 0.0);
  EXPECT_GT(loss.head_cls, 0.0);
  EXPECT_GE(loss.rpn_reg, 0.0);
  EXPECT_NEAR(total, loss.cls() + loss.reg(), 1e-12);
  params.zero_grad();
  g.backward(loss.total);
  EXPECT_TRUE(params.get("rpn.cls.w").grad.has_value());
  EXPECT_TRUE(params.get("head.fc1.w").grad.has_value());
  EXPECT_TRUE(params.get(kContextualWeights).grad.has_value());
}

TEST(Loss, PipelineGradcheckPasses) {
  const GradCheckReport rep = pipeline_gradcheck(1);
  EXPECT_TRUE(rep.passed()) << rep.max_error();
  EXPECT_FALSE(pipeline_gradcheck(1, true).passed());
}
