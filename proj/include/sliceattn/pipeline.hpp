#pragma once

// (2+1)D detector: 3M slices -> M three-channel images -> shared backbone ->
// dual attention -> channel concatenation -> RPN + position-sensitive ROI
// head. Everything between the input slices and the losses is recorded on a
// Graph, so one backward() trains the whole stack.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "sliceattn/attention.hpp"
#include "sliceattn/autograd.hpp"
#include "sliceattn/boxes.hpp"
#include "sliceattn/error.hpp"
#include "sliceattn/ops.hpp"
#include "sliceattn/params.hpp"
#include "sliceattn/rng.hpp"
#include "sliceattn/tensor.hpp"

namespace sliceattn {

// 3M consecutive CT-like slices [S, H, W] around a key slice.
struct SliceDeck {
  Tensor slices;
  std::size_t key_index = 0;
  double slice_interval_mm = 1.0;
  std::string volume_id;

  std::size_t slice_count() const { return slices.rank() == 3 ? slices.dim(0) : 0; }
  std::size_t height() const { return slices.dim(1); }
  std::size_t width() const { return slices.dim(2); }
};

struct PipelineConfig {
  std::size_t M = 3;

  // Backbone: one 3x3 conv + ReLU per entry.
  std::vector<std::size_t> backbone_channels = {8, 16, 16, 16};
  std::vector<std::size_t> backbone_strides = {2, 1, 2, 1};

  std::vector<double> anchor_sizes = {6.0, 12.0, 24.0};
  std::vector<double> anchor_ratios = {0.5, 1.0, 2.0};
  std::size_t rpn_channels = 32;

  std::size_t psroi_bins = 3;
  std::size_t psroi_channels_per_bin = 4;
  std::size_t fc_hidden = 64;

  double nms_iou = 0.5;
  double rpn_nms_iou = 0.7;
  std::size_t pre_nms_top = 200;
  std::size_t post_nms_top = 48;
  std::size_t max_detections = 20;
  double score_threshold = 0.01;

  // Anchor / ROI labeling and sampling for the losses.
  double rpn_pos_iou = 0.7;
  double rpn_neg_iou = 0.3;
  std::size_t rpn_batch = 64;
  double rpn_pos_fraction = 0.5;
  double head_pos_iou = 0.5;
  double head_neg_iou = 0.5;
  std::size_t head_batch = 32;
  double head_pos_fraction = 0.25;
  double rpn_smooth_l1_beta = 1.0 / 9.0;
  double head_smooth_l1_beta = 1.0;
  // Head regression targets are divided by these before the loss.
  std::vector<double> head_delta_std = {0.1, 0.1, 0.2, 0.2};

  AttentionConfig attention;

  std::size_t slice_count() const { return 3 * M; }
  std::size_t feature_channels() const { return backbone_channels.back(); }
  std::size_t anchors_per_cell() const { return anchor_sizes.size() * anchor_ratios.size(); }
  std::size_t total_stride() const {
    std::size_t s = 1;
    for (std::size_t v : backbone_strides) s *= v;
    return s;
  }

  void validate() const {
    if (M == 0 || M % 2 == 0) throw ContractError("M must be a positive odd integer");
    if (backbone_channels.empty() || backbone_channels.size() != backbone_strides.size()) {
      throw ContractError("backbone channels/strides must be nonempty and equal length");
    }
    for (std::size_t s : backbone_strides) {
      if (s == 0) throw ContractError("backbone strides must be positive");
    }
    if (anchor_sizes.empty() || anchor_ratios.empty()) {
      throw ContractError("anchor sizes and ratios must be nonempty");
    }
    if (psroi_bins == 0) throw ContractError("psroi_bins must be >= 1");
    if (head_delta_std.size() != 4) throw ContractError("head_delta_std needs 4 entries");
    attention.validate();
  }
};

// ---------------------------------------------------------------------------
// Slice grouping

// Window of 3M slices centered on `key`, repeating the first/last slice where
// the window runs off the volume.
inline SliceDeck extract_deck(const Tensor& volume, std::size_t key, std::size_t M,
                              double slice_interval_mm, std::string volume_id) {
  if (volume.rank() != 3 || volume.dim(0) == 0) throw InputError("volume must be [S,H,W], S>=1");
  if (key >= volume.dim(0)) {
    throw InputError("key slice " + std::to_string(key) + " out of range [0," +
                     std::to_string(volume.dim(0)) + ")");
  }
  const std::size_t n = 3 * M;
  const long long half = static_cast<long long>(n - 1) / 2;
  const std::size_t h = volume.dim(1), w = volume.dim(2), plane = h * w;
  Tensor slices(Shape{n, h, w});
  for (std::size_t j = 0; j < n; ++j) {
    long long src = static_cast<long long>(key) - half + static_cast<long long>(j);
    src = std::clamp<long long>(src, 0, static_cast<long long>(volume.dim(0)) - 1);
    std::copy_n(volume.data().begin() + static_cast<std::ptrdiff_t>(src * plane), plane,
                slices.storage().begin() + static_cast<std::ptrdiff_t>(j * plane));
  }
  return SliceDeck{std::move(slices), static_cast<std::size_t>(half), slice_interval_mm,
                   std::move(volume_id)};
}

// Image j holds window slices 3j, 3j+1, 3j+2; the key slice lands in the
// middle channel of the middle image. Decks shorter than 3M are edge-padded
// around their key slice first.
inline std::vector<Tensor> group_slices(const SliceDeck& deck, std::size_t M) {
  if (deck.slice_count() == 0) throw InputError("group_slices: empty deck");
  const SliceDeck* src = &deck;
  SliceDeck padded;
  if (deck.slice_count() != 3 * M || deck.key_index != (3 * M - 1) / 2) {
    padded = extract_deck(deck.slices, deck.key_index, M, deck.slice_interval_mm, deck.volume_id);
    src = &padded;
  }
  const std::size_t h = src->height(), w = src->width(), plane = h * w;
  std::vector<Tensor> images;
  images.reserve(M);
  for (std::size_t j = 0; j < M; ++j) {
    Tensor img(Shape{3, h, w});
    std::copy_n(src->slices.data().begin() + static_cast<std::ptrdiff_t>(3 * j * plane),
                3 * plane, img.storage().begin());
    images.push_back(std::move(img));
  }
  return images;
}

// ---------------------------------------------------------------------------
// Parameters

namespace detail {

inline std::uint64_t name_hash(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// Centered uniform init with bound gain * sqrt(3 / fan_in); each parameter
// draws from its own stream so adding or removing a module leaves every
// other parameter's initial value unchanged.
inline Tensor uniform_init(Shape shape, std::size_t fan_in, double gain, std::uint64_t seed,
                           const std::string& name) {
  Tensor t(std::move(shape));
  Rng rng(mix_seed(seed, name_hash(name)));
  const double bound = gain * std::sqrt(3.0 / static_cast<double>(fan_in));
  for (double& v : t.storage()) v = rng.uniform(-bound, bound);
  return t;
}

}  // namespace detail

inline constexpr const char* kContextualWeights = "attention.contextual.w";
inline constexpr const char* kContextualBias = "attention.contextual.b";
inline constexpr const char* kSpatialWeights = "attention.spatial.w";
inline constexpr const char* kSpatialBias = "attention.spatial.b";

inline std::string backbone_param(std::size_t layer, const char* suffix) {
  return "backbone.conv" + std::to_string(layer + 1) + "." + suffix;
}

// Builds the parameter set for `config`. Attention convs are zero so the
// untrained model starts at the attention-free mapping; parameters of
// disabled attention modules are not created at all.
inline ParamStore init_params(const PipelineConfig& config, std::uint64_t seed) {
  config.validate();
  ParamStore p;
  const double relu_gain = std::sqrt(2.0);
  const double head_gain = 0.1;
  std::size_t c_in = 3;
  for (std::size_t i = 0; i < config.backbone_channels.size(); ++i) {
    const std::size_t c_out = config.backbone_channels[i];
    const std::string w = backbone_param(i, "w");
    p.add(w, detail::uniform_init(Shape{c_out, c_in, 3, 3}, c_in * 9, relu_gain, seed, w));
    p.add(backbone_param(i, "b"), Tensor(Shape{c_out}));
    c_in = c_out;
  }
  const std::size_t D = config.feature_channels();
  const std::size_t k = config.attention.attention_conv_kernel;
  if (config.attention.enable_contextual) {
    p.add(kContextualWeights, Tensor(Shape{D, D, k, k}));
    p.add(kContextualBias, Tensor(Shape{D}));
  }
  if (config.attention.enable_spatial) {
    p.add(kSpatialWeights, Tensor(Shape{D, D, k, k}));
    p.add(kSpatialBias, Tensor(Shape{D}));
  }
  const std::size_t agg = config.M * D;
  const std::size_t R = config.rpn_channels;
  const std::size_t A = config.anchors_per_cell();
  p.add("rpn.conv.w", detail::uniform_init(Shape{R, agg, 3, 3}, agg * 9, relu_gain, seed,
                                           "rpn.conv.w"));
  p.add("rpn.conv.b", Tensor(Shape{R}));
  p.add("rpn.cls.w", detail::uniform_init(Shape{A, R, 1, 1}, R, head_gain, seed, "rpn.cls.w"));
  p.add("rpn.cls.b", Tensor(Shape{A}));
  p.add("rpn.reg.w",
        detail::uniform_init(Shape{4 * A, R, 1, 1}, R, head_gain, seed, "rpn.reg.w"));
  p.add("rpn.reg.b", Tensor(Shape{4 * A}));

  const std::size_t kk = config.psroi_bins * config.psroi_bins;
  const std::size_t ps = kk * config.psroi_channels_per_bin;
  p.add("head.psroi.w",
        detail::uniform_init(Shape{ps, agg, 1, 1}, agg, 1.0, seed, "head.psroi.w"));
  p.add("head.psroi.b", Tensor(Shape{ps}));
  const std::size_t H = config.fc_hidden;
  p.add("head.fc1.w", detail::uniform_init(Shape{ps, H}, ps, relu_gain, seed, "head.fc1.w"));
  p.add("head.fc1.b", Tensor(Shape{H}));
  p.add("head.cls.w", detail::uniform_init(Shape{H, 1}, H, head_gain, seed, "head.cls.w"));
  p.add("head.cls.b", Tensor(Shape{1}));
  p.add("head.reg.w", detail::uniform_init(Shape{H, 4}, H, head_gain, seed, "head.reg.w"));
  p.add("head.reg.b", Tensor(Shape{4}));
  return p;
}

// Lazily binds ParamStore tensors as graph leaves (one leaf per name).
class BoundParams {
 public:
  BoundParams(Graph& graph, ParamStore& store) : graph_(graph), store_(store) {}

  Var operator()(const std::string& name) {
    auto it = vars_.find(name);
    if (it != vars_.end()) return it->second;
    Var v = graph_.param(store_.get(name));
    vars_.emplace(name, v);
    return v;
  }
  bool has(const std::string& name) const { return store_.contains(name); }
  Graph& graph() { return graph_; }

 private:
  Graph& graph_;
  ParamStore& store_;
  std::map<std::string, Var> vars_;
};

// ---------------------------------------------------------------------------
// Forward stages

// Runs the M images through the shared conv/ReLU stack as one batch, so the
// same weights see every image.
inline FeatureStack backbone_forward(Graph& g, const std::vector<Tensor>& images,
                                     BoundParams& params, const PipelineConfig& config) {
  if (images.empty()) throw InputError("backbone_forward: no images");
  const Shape& s0 = images[0].shape();
  if (s0.size() != 3) throw DimensionError("backbone_forward: images must be [C,H,W]");
  Tensor batch(Shape{images.size(), s0[0], s0[1], s0[2]});
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].shape() != s0) throw DimensionError("backbone_forward: image shapes differ");
    std::copy(images[i].data().begin(), images[i].data().end(),
              batch.storage().begin() + static_cast<std::ptrdiff_t>(i * images[i].numel()));
  }
  Var x = g.constant(std::move(batch));
  for (std::size_t i = 0; i < config.backbone_channels.size(); ++i) {
    x = ops::relu(ops::conv2d(x, params(backbone_param(i, "w")), params(backbone_param(i, "b")),
                              config.backbone_strides[i], 1));
  }
  return FeatureStack::wrap(x);
}

inline std::optional<AttentionConv> bind_attention(BoundParams& params, const char* w,
                                                   const char* b) {
  if (!params.has(w)) return std::nullopt;
  return AttentionConv{params(w), params(b)};
}

// Channel concatenation of the M per-image maps in image order:
// [M, D, H, W] -> [M*D, H, W]. Row-major layout makes this a reshape.
inline Var aggregate_features(const FeatureStack& stack) {
  return ops::reshape(stack.data, Shape{stack.images() * stack.channels(), stack.height(),
                                        stack.width()});
}

struct RpnOutput {
  Var logits;  // [A, h, w]
  Var deltas;  // [4A, h, w]; channel 4a+j holds delta j of anchor shape a
  std::vector<Box> anchors;
  std::size_t feat_h = 0, feat_w = 0;

  std::size_t anchor_count() const { return anchors.size(); }
  // Flat index into `deltas` of component j for anchor index i.
  std::size_t delta_index(std::size_t i, std::size_t j) const {
    const std::size_t cells = feat_h * feat_w;
    return (4 * (i / cells) + j) * cells + i % cells;
  }
  BoxDelta delta(std::size_t i) const {
    const Tensor& d = deltas.value();
    return BoxDelta{d[delta_index(i, 0)], d[delta_index(i, 1)], d[delta_index(i, 2)],
                    d[delta_index(i, 3)]};
  }
};

inline RpnOutput rpn_forward(Var features, BoundParams& params, const PipelineConfig& config) {
  Var hidden =
      ops::relu(ops::conv2d(features, params("rpn.conv.w"), params("rpn.conv.b"), 1, 1));
  RpnOutput out;
  out.logits = ops::conv2d(hidden, params("rpn.cls.w"), params("rpn.cls.b"), 1, 0);
  out.deltas = ops::conv2d(hidden, params("rpn.reg.w"), params("rpn.reg.b"), 1, 0);
  out.feat_h = features.value().dim(1);
  out.feat_w = features.value().dim(2);
  out.anchors = generate_anchors(out.feat_h, out.feat_w, config.total_stride(),
                                 config.anchor_sizes, config.anchor_ratios);
  return out;
}

// Decodes every anchor, keeps the top `pre_nms_top` by objectness, applies
// NMS at rpn_nms_iou and returns at most post_nms_top proposals (clipped to
// the image, at least one pixel on each side).
inline std::vector<Box> propose(const RpnOutput& rpn, const PipelineConfig& config,
                                double image_w, double image_h) {
  const Tensor& logits = rpn.logits.value();
  std::vector<Box> boxes;
  std::vector<double> scores;
  for (std::size_t i : order_by_score(logits.data())) {
    if (boxes.size() >= config.pre_nms_top) break;
    const Box b = clip_box(decode_box(rpn.anchors[i], rpn.delta(i)), image_w, image_h);
    if (b.width() < 1.0 || b.height() < 1.0) continue;
    boxes.push_back(b);
    scores.push_back(logits[i]);
  }
  std::vector<Box> kept;
  for (std::size_t i : nms(boxes, scores, config.rpn_nms_iou, config.post_nms_top)) {
    kept.push_back(boxes[i]);
  }
  return kept;
}

// Image-space box -> half-open feature-cell rectangle (at least one cell).
inline ops::CellRect box_to_cells(const Box& b, std::size_t stride, std::size_t feat_h,
                                  std::size_t feat_w) {
  const double s = static_cast<double>(stride);
  auto lo = [&](double v, std::size_t extent) {
    const double c = std::floor(v / s);
    return static_cast<std::size_t>(std::clamp(c, 0.0, static_cast<double>(extent - 1)));
  };
  auto hi = [&](double v, std::size_t extent) {
    const double c = std::ceil(v / s);
    return static_cast<std::size_t>(std::clamp(c, 0.0, static_cast<double>(extent)));
  };
  ops::CellRect r{lo(b.y1, feat_h), hi(b.y2, feat_h), lo(b.x1, feat_w), hi(b.x2, feat_w)};
  if (r.y1 <= r.y0) r.y1 = r.y0 + 1;
  if (r.x1 <= r.x0) r.x1 = r.x0 + 1;
  return r;
}

struct HeadOutput {
  std::vector<Box> rois;
  Var logits;  // [R]
  Var deltas;  // [R, 4], normalized by head_delta_std
};

// Position-sensitive score maps (1x1 conv), k x k PS average pooling, then
// two fully connected layers: fc1 + ReLU, and the cls / reg outputs.
inline HeadOutput head_forward(Var features, const std::vector<Box>& rois, BoundParams& params,
                               const PipelineConfig& config) {
  if (rois.empty()) throw InputError("head_forward: no regions");
  Var maps = ops::conv2d(features, params("head.psroi.w"), params("head.psroi.b"), 1, 0);
  const std::size_t fh = features.value().dim(1), fw = features.value().dim(2);
  std::vector<ops::CellRect> cells;
  cells.reserve(rois.size());
  for (const Box& b : rois) cells.push_back(box_to_cells(b, config.total_stride(), fh, fw));
  Var pooled = ops::psroi_pool(maps, cells, config.psroi_bins);
  Var hidden = ops::relu(ops::linear(pooled, params("head.fc1.w"), params("head.fc1.b")));
  HeadOutput out;
  out.rois = rois;
  out.logits = ops::reshape(ops::linear(hidden, params("head.cls.w"), params("head.cls.b")),
                            Shape{rois.size()});
  out.deltas = ops::linear(hidden, params("head.reg.w"), params("head.reg.b"));
  return out;
}

inline BoxDelta head_delta(const HeadOutput& head, std::size_t r, const PipelineConfig& config) {
  const Tensor& d = head.deltas.value();
  const auto& sd = config.head_delta_std;
  return BoxDelta{d[4 * r] * sd[0], d[4 * r + 1] * sd[1], d[4 * r + 2] * sd[2],
                  d[4 * r + 3] * sd[3]};
}

// Everything up to the RPN for one deck.
struct PipelineForward {
  std::vector<Tensor> images;
  FeatureStack backbone;
  DualAttentionResult attention;
  Var features;  // aggregated [M*D, h, w]
  RpnOutput rpn;
  double image_w = 0, image_h = 0;
};

inline PipelineForward forward_pipeline(Graph& g, BoundParams& params,
                                        const PipelineConfig& config, const SliceDeck& deck) {
  config.validate();
  PipelineForward f;
  f.images = group_slices(deck, config.M);
  f.image_h = static_cast<double>(deck.height());
  f.image_w = static_cast<double>(deck.width());
  f.backbone = backbone_forward(g, f.images, params, config);
#ifdef SLICEATTN_NO_ATTENTION
  f.attention = DualAttentionResult{f.backbone, {}, {}};
#else
  f.attention = dual_attention(f.backbone, config.attention,
                               bind_attention(params, kContextualWeights, kContextualBias),
                               bind_attention(params, kSpatialWeights, kSpatialBias));
#endif
  f.features = aggregate_features(f.attention.refined);
  f.rpn = rpn_forward(f.features, params, config);
  return f;
}

// Scores the proposals with the head, refines boxes, applies NMS. Scores
// are sigmoid probabilities.
inline std::vector<Detection> propose_and_detect(const PipelineForward& f, BoundParams& params,
                                                 const PipelineConfig& config) {
  const std::vector<Box> proposals = propose(f.rpn, config, f.image_w, f.image_h);
  if (proposals.empty()) return {};
  const HeadOutput head = head_forward(f.features, proposals, params, config);
  std::vector<Box> boxes;
  std::vector<double> scores;
  const Tensor& logits = head.logits.value();
  for (std::size_t r = 0; r < proposals.size(); ++r) {
    const double score = ops::sigmoid_scalar(logits[r]);
    if (score < config.score_threshold) continue;
    const Box b =
        clip_box(decode_box(proposals[r], head_delta(head, r, config)), f.image_w, f.image_h);
    if (!b.valid()) continue;
    boxes.push_back(b);
    scores.push_back(score);
  }
  std::vector<Detection> dets;
  for (std::size_t i : nms(boxes, scores, config.nms_iou, config.max_detections)) {
    dets.push_back(Detection{boxes[i], scores[i], {}});
  }
  return dets;
}

struct InferenceResult {
  std::vector<Detection> detections;
  std::vector<Tensor> attention_fields;  // values of the produced fields
  std::vector<AttentionKind> attention_kinds;
  Tensor features;                       // aggregated features
};

inline InferenceResult run_detector(ParamStore& store, const PipelineConfig& config,
                                    const SliceDeck& deck) {
  Graph g;
  BoundParams params(g, store);
  PipelineForward f = forward_pipeline(g, params, config, deck);
  InferenceResult out;
  out.detections = propose_and_detect(f, params, config);
  for (Detection& d : out.detections) d.image_id = deck.volume_id;
  for (const AttentionField& field : f.attention.fields) {
    out.attention_fields.push_back(field.weights.value());
    out.attention_kinds.push_back(field.kind);
  }
  out.features = f.features.value();
  return out;
}

// ---------------------------------------------------------------------------
// Losses

struct AnchorLabels {
  std::vector<int> label;            // 1 positive, 0 negative, -1 ignored
  std::vector<std::size_t> matched;  // index of best-overlap ground truth
};

// Labels boxes against ground truth: IoU >= pos_iou positive, < neg_iou
// negative, otherwise ignored. With `best_match`, the highest-IoU box(es) of
// each ground truth are positive as well.
inline AnchorLabels label_boxes(const std::vector<Box>& boxes, const std::vector<Box>& gts,
                                double pos_iou, double neg_iou, bool best_match) {
  AnchorLabels out;
  out.label.assign(boxes.size(), 0);
  out.matched.assign(boxes.size(), 0);
  if (gts.empty()) return out;
  std::vector<double> gt_best(gts.size(), 0.0);
  std::vector<double> best(boxes.size(), 0.0);
  std::vector<std::vector<double>> ov(boxes.size(), std::vector<double>(gts.size()));
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    for (std::size_t j = 0; j < gts.size(); ++j) {
      const double v = iou(boxes[i], gts[j]);
      ov[i][j] = v;
      if (v > best[i]) {
        best[i] = v;
        out.matched[i] = j;
      }
      gt_best[j] = std::max(gt_best[j], v);
    }
  }
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    if (best[i] >= pos_iou) {
      out.label[i] = 1;
    } else if (best[i] < neg_iou) {
      out.label[i] = 0;
    } else {
      out.label[i] = -1;
    }
  }
  if (best_match) {
    for (std::size_t j = 0; j < gts.size(); ++j) {
      if (gt_best[j] <= 0.0) continue;
      for (std::size_t i = 0; i < boxes.size(); ++i) {
        if (ov[i][j] == gt_best[j]) {
          out.label[i] = 1;
          out.matched[i] = j;
        }
      }
    }
  }
  return out;
}

// Random subset of labeled boxes: up to batch*pos_fraction positives, the
// remainder negatives. Returned indices are sorted.
inline std::vector<std::size_t> sample_labeled(const std::vector<int>& labels, std::size_t batch,
                                               double pos_fraction, Rng& rng) {
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1) pos.push_back(i);
    if (labels[i] == 0) neg.push_back(i);
  }
  rng.shuffle(pos);
  rng.shuffle(neg);
  const auto max_pos = static_cast<std::size_t>(static_cast<double>(batch) * pos_fraction);
  if (pos.size() > max_pos) pos.resize(max_pos);
  const std::size_t n_neg = batch > pos.size() ? batch - pos.size() : 0;
  if (neg.size() > n_neg) neg.resize(n_neg);
  std::vector<std::size_t> out = pos;
  out.insert(out.end(), neg.begin(), neg.end());
  std::sort(out.begin(), out.end());
  return out;
}

struct LossTerms {
  Var total;
  double rpn_cls = 0, rpn_reg = 0, head_cls = 0, head_reg = 0;

  double cls() const { return rpn_cls + head_cls; }
  double reg() const { return rpn_reg + head_reg; }
};

struct LossPart {
  Var cls;
  Var reg;
};

// Mean BCE over the sampled boxes plus smooth-L1 over positive boxes'
// deltas, both normalized by the sample count.
inline LossPart sampled_loss(Graph& g, Var logits_flat, Var deltas_flat,
                             const std::vector<std::size_t>& sampled,
                             const std::vector<int>& labels,
                             const std::vector<BoxDelta>& targets,
                             const std::function<std::size_t(std::size_t, std::size_t)>& didx,
                             double beta) {
  const std::size_t n = std::max<std::size_t>(sampled.size(), 1);
  const double inv = 1.0 / static_cast<double>(n);
  std::vector<double> t, w;
  std::vector<std::size_t> reg_idx;
  std::vector<double> reg_t, reg_w;
  for (std::size_t i : sampled) {
    t.push_back(labels[i] == 1 ? 1.0 : 0.0);
    w.push_back(inv);
    if (labels[i] == 1) {
      const BoxDelta& d = targets[i];
      const double vals[4] = {d.dx, d.dy, d.dw, d.dh};
      for (std::size_t j = 0; j < 4; ++j) {
        reg_idx.push_back(didx(i, j));
        reg_t.push_back(vals[j]);
        reg_w.push_back(inv);
      }
    }
  }
  LossPart part;
  part.cls = ops::bce_with_logits_sum(ops::gather(logits_flat, sampled), std::move(t),
                                      std::move(w));
  if (reg_idx.empty()) {
    part.reg = g.constant(Tensor::scalar(0.0));
  } else {
    part.reg = ops::smooth_l1_sum(ops::gather(deltas_flat, std::move(reg_idx)), std::move(reg_t),
                                  std::move(reg_w), beta);
  }
  return part;
}

// Joint RPN + head loss for one deck. Head regions are the current proposals
// plus the ground-truth boxes, unless `fixed_rois` pins them (used where the
// loss must be a smooth function of the parameters, e.g. gradient checks).
inline LossTerms detection_loss(Graph& g, BoundParams& params, const PipelineConfig& config,
                                const PipelineForward& f, const std::vector<Box>& gts, Rng& rng,
                                const std::optional<std::vector<Box>>& fixed_rois = std::nullopt) {
  // RPN
  const AnchorLabels al =
      label_boxes(f.rpn.anchors, gts, config.rpn_pos_iou, config.rpn_neg_iou, true);
  std::vector<BoxDelta> anchor_targets(f.rpn.anchors.size());
  for (std::size_t i = 0; i < f.rpn.anchors.size(); ++i) {
    if (al.label[i] == 1) anchor_targets[i] = encode_box(f.rpn.anchors[i], gts[al.matched[i]]);
  }
  const std::vector<std::size_t> rpn_sampled =
      sample_labeled(al.label, config.rpn_batch, config.rpn_pos_fraction, rng);
  const RpnOutput& rpn = f.rpn;
  LossPart rpn_loss = sampled_loss(
      g, rpn.logits, rpn.deltas, rpn_sampled, al.label, anchor_targets,
      [&rpn](std::size_t i, std::size_t j) { return rpn.delta_index(i, j); },
      config.rpn_smooth_l1_beta);

  // Head
  std::vector<Box> rois;
  if (fixed_rois) {
    rois = *fixed_rois;
  } else {
    rois = propose(f.rpn, config, f.image_w, f.image_h);
    rois.insert(rois.end(), gts.begin(), gts.end());
  }
  LossTerms out;
  Var head_cls = g.constant(Tensor::scalar(0.0));
  Var head_reg = g.constant(Tensor::scalar(0.0));
  if (!rois.empty()) {
    const AnchorLabels rl =
        label_boxes(rois, gts, config.head_pos_iou, config.head_neg_iou, false);
    const std::vector<std::size_t> head_sampled =
        sample_labeled(rl.label, config.head_batch, config.head_pos_fraction, rng);
    if (!head_sampled.empty()) {
      std::vector<Box> chosen;
      std::vector<int> labels;
      std::vector<BoxDelta> targets;
      for (std::size_t i : head_sampled) {
        chosen.push_back(rois[i]);
        labels.push_back(rl.label[i]);
        BoxDelta t{};
        if (rl.label[i] == 1) {
          t = encode_box(rois[i], gts[rl.matched[i]]);
          const auto& sd = config.head_delta_std;
          t = BoxDelta{t.dx / sd[0], t.dy / sd[1], t.dw / sd[2], t.dh / sd[3]};
        }
        targets.push_back(t);
      }
      const HeadOutput head = head_forward(f.features, chosen, params, config);
      std::vector<std::size_t> all(chosen.size());
      std::iota(all.begin(), all.end(), std::size_t{0});
      LossPart hp = sampled_loss(
          g, head.logits, head.deltas, all, labels, targets,
          [](std::size_t i, std::size_t j) { return 4 * i + j; }, config.head_smooth_l1_beta);
      head_cls = hp.cls;
      head_reg = hp.reg;
    }
  }
  out.rpn_cls = rpn_loss.cls.value().item();
  out.rpn_reg = rpn_loss.reg.value().item();
  out.head_cls = head_cls.value().item();
  out.head_reg = head_reg.value().item();
  out.total = ops::add(ops::add(rpn_loss.cls, rpn_loss.reg), ops::add(head_cls, head_reg));
  return out;
}

}  // namespace sliceattn
