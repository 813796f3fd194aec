#pragma once

// Central finite-difference checks of the analytic gradients.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "sliceattn/attention.hpp"
#include "sliceattn/autograd.hpp"
#include "sliceattn/ops.hpp"
#include "sliceattn/params.hpp"
#include "sliceattn/pipeline.hpp"
#include "sliceattn/rng.hpp"
#include "sliceattn/synthdata.hpp"

namespace sliceattn {

inline constexpr double kAttentionGradTolerance = 1e-4;
inline constexpr double kPipelineGradTolerance = 1e-3;

struct GradCheckOptions {
  double step = 1e-5;
  std::size_t max_coords = 0;  // per tensor; 0 checks every coordinate
  std::uint64_t seed = 0;      // coordinate subsampling
  bool flip_sign = false;      // negate analytic gradients (harness self-test)
  // Also difference with step/2 and flag coordinates where the two central
  // differences disagree: a kink (ReLU, max, smooth-L1 knee) lies within the
  // step there and the central difference is not a derivative estimate.
  bool detect_kinks = false;
  bool stop_at_kink = false;  // abandon the check at the first flagged coordinate
};

struct GradCheckEntry {
  std::string name;
  std::size_t coords = 0;
  double rel_error = 0;
  double analytic_norm = 0;
  double numeric_norm = 0;
  std::size_t kinks = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0;
  std::size_t attempts = 1;  // evaluation points tried before a kink-free one

  double max_error() const {
    double m = 0.0;
    for (const GradCheckEntry& e : entries) m = std::max(m, e.rel_error);
    return m;
  }
  std::size_t kinks() const {
    std::size_t n = 0;
    for (const GradCheckEntry& e : entries) n += e.kinks;
    return n;
  }
  bool passed() const { return !entries.empty() && kinks() == 0 && max_error() < tolerance; }
};

// Two central differences (steps h and h/2) at a smooth point differ by
// O(h^2); a kink within the step moves them apart by O(1) times the slope
// jump. Differences above this (absolute plus relative) flag a kink.
inline constexpr double kKinkAbsTolerance = 1e-7;
inline constexpr double kKinkRelTolerance = 1e-5;

// Denominator floor of relative_error. Some gradients are exactly zero (a
// per-channel bias in front of a softmax over the axis it is constant
// along); both sides are then rounding noise and their ratio is meaningless.
inline constexpr double kGradNormFloor = 1e-5;

// ||a - n|| / max(||a||, ||n||, floor).
inline double relative_error(const std::vector<double>& a, const std::vector<double>& n,
                             double floor = kGradNormFloor) {
  double diff = 0, na = 0, nn = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - n[i]) * (a[i] - n[i]);
    na += a[i] * a[i];
    nn += n[i] * n[i];
  }
  const double denom = std::max(std::sqrt(std::max(na, nn)), floor);
  return denom == 0.0 ? 0.0 : std::sqrt(diff) / denom;
}

inline double norm(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// Builds a scalar loss on `g`. Target tensors must enter the graph through
// g.input() / g.param() so their gradients are collected.
using LossBuilder = std::function<Var(Graph&)>;

struct GradTarget {
  std::string name;
  Tensor* tensor;
};

inline GradCheckReport check_gradients(const LossBuilder& build, const std::vector<GradTarget>& targets,
                                       const GradCheckOptions& opt, double tolerance) {
  for (const GradTarget& t : targets) {
    t.tensor->requires_grad = true;
    t.tensor->zero_grad();
  }
  {
    Graph g;
    g.backward(build(g));
  }
  std::vector<std::vector<double>> analytic;
  for (const GradTarget& t : targets) {
    analytic.push_back(t.tensor->grad ? *t.tensor->grad
                                      : std::vector<double>(t.tensor->numel(), 0.0));
    if (opt.flip_sign) {
      for (double& v : analytic.back()) v = -v;
    }
    t.tensor->requires_grad = false;
    t.tensor->zero_grad();
  }
  auto loss_value = [&] {
    Graph g;
    return build(g).value().item();
  };
  GradCheckReport rep;
  rep.tolerance = tolerance;
  Rng rng(opt.seed);
  for (std::size_t ti = 0; ti < targets.size(); ++ti) {
    Tensor& t = *targets[ti].tensor;
    std::vector<std::size_t> coords(t.numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opt.max_coords > 0 && coords.size() > opt.max_coords) {
      rng.shuffle(coords);
      coords.resize(opt.max_coords);
      std::sort(coords.begin(), coords.end());
    }
    std::vector<double> a, n;
    std::size_t kinks = 0;
    auto central = [&](std::size_t c, double orig, double h) {
      t[c] = orig + h;
      const double up = loss_value();
      t[c] = orig - h;
      const double down = loss_value();
      t[c] = orig;
      return (up - down) / (2.0 * h);
    };
    for (std::size_t c : coords) {
      const double orig = t[c];
      const double d = central(c, orig, opt.step);
      if (opt.detect_kinks) {
        const double half = central(c, orig, 0.5 * opt.step);
        if (std::abs(d - half) > kKinkAbsTolerance + kKinkRelTolerance * std::abs(d)) {
          ++kinks;
          if (opt.stop_at_kink) break;
        }
      }
      n.push_back(d);
      a.push_back(analytic[ti][c]);
    }
    a.resize(n.size());
    rep.entries.push_back(GradCheckEntry{targets[ti].name, n.size(), relative_error(a, n),
                                         norm(a), norm(n), kinks});
    if (kinks > 0 && opt.stop_at_kink) break;
  }
  return rep;
}

namespace detail {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  for (double& v : t.storage()) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace detail

// Contextual, spatial and dual attention on a random [3,4,5,6] stack with
// random phi weights; the loss is a random linear functional of the refined
// features.
inline GradCheckReport attention_gradcheck(std::uint64_t seed, bool flip_sign = false) {
  Rng rng(seed);
  const std::size_t M = 3, D = 4, H = 5, W = 6;
  Tensor stack = detail::random_tensor(Shape{M, D, H, W}, rng, -1.0, 1.0);
  Tensor cw = detail::random_tensor(Shape{D, D, 3, 3}, rng, -0.5, 0.5);
  Tensor cb = detail::random_tensor(Shape{D}, rng, -0.5, 0.5);
  Tensor sw = detail::random_tensor(Shape{D, D, 3, 3}, rng, -0.5, 0.5);
  Tensor sb = detail::random_tensor(Shape{D}, rng, -0.5, 0.5);
  const Tensor probe = detail::random_tensor(Shape{M, D, H, W}, rng, -1.0, 1.0);
  GradCheckOptions opt;
  opt.flip_sign = flip_sign;

  GradCheckReport all;
  all.tolerance = kAttentionGradTolerance;
  const struct {
    const char* name;
    bool contextual, spatial;
  } cases[] = {{"contextual", true, false}, {"spatial", false, true}, {"dual", true, true}};
  for (const auto& c : cases) {
    AttentionConfig cfg;
    cfg.enable_contextual = c.contextual;
    cfg.enable_spatial = c.spatial;
    cfg.contextual_temperature = 1.5;
    cfg.spatial_temperature = 2.5;
    LossBuilder build = [&](Graph& g) {
      const FeatureStack fs = FeatureStack::wrap(g.input(stack));
      std::optional<AttentionConv> phi_c, phi_s;
      if (c.contextual) phi_c = AttentionConv{g.input(cw), g.input(cb)};
      if (c.spatial) phi_s = AttentionConv{g.input(sw), g.input(sb)};
      const DualAttentionResult r = dual_attention(fs, cfg, phi_c, phi_s);
      return ops::sum(ops::mul(r.refined.data, g.constant(probe)));
    };
    std::vector<GradTarget> targets{{"stack", &stack}};
    if (c.contextual) {
      targets.push_back({"phi_c.w", &cw});
      targets.push_back({"phi_c.b", &cb});
    }
    if (c.spatial) {
      targets.push_back({"phi_s.w", &sw});
      targets.push_back({"phi_s.b", &sb});
    }
    const GradCheckReport rep = check_gradients(build, targets, opt, kAttentionGradTolerance);
    for (GradCheckEntry e : rep.entries) {
      e.name = std::string(c.name) + "/" + e.name;
      all.entries.push_back(e);
    }
  }
  return all;
}

namespace detail {

inline GradCheckReport pipeline_gradcheck_at(std::uint64_t point, bool flip_sign,
                                             std::size_t coords_per_tensor, bool stop_at_kink) {
  PhantomSpec spec;
  spec.image_size = 16;
  spec.lesion_diameter_px = {5.0, 9.0};
  spec.distractor_count = {1, 2};
  spec.seed = point;
  const Sample sample = generate_one(spec, 0);

  PipelineConfig config;
  config.anchor_sizes = {4.0, 8.0};
  config.anchor_ratios = {1.0};
  ParamStore params = init_params(config, point);
  Rng rng(mix_seed(point, 0x4743));
  for (const char* name : {kContextualWeights, kContextualBias, kSpatialWeights, kSpatialBias}) {
    for (double& v : params.get(name).storage()) v = rng.uniform(-0.2, 0.2);
  }

  std::vector<Box> rois = sample.ground_truth;
  for (const Box& b : sample.ground_truth) {
    rois.push_back(Box{b.x1 + 2, b.y1 + 1, b.x2 + 2, b.y2 + 1});
    rois.push_back(Box{1, 1, 9, 9});
    rois.push_back(Box{6, 4, 15, 14});
  }
  const std::uint64_t sampling_seed = mix_seed(point, 0x53414d50);
  LossBuilder build = [&](Graph& g) {
    BoundParams bound(g, params);
    const PipelineForward f = forward_pipeline(g, bound, config, sample.deck);
    Rng sampling(sampling_seed);
    return detection_loss(g, bound, config, f, sample.ground_truth, sampling, rois).total;
  };
  std::vector<GradTarget> targets;
  for (auto& [name, t] : params) targets.push_back({name, &t});
  GradCheckOptions opt;
  opt.flip_sign = flip_sign;
  opt.max_coords = coords_per_tensor;
  opt.seed = mix_seed(point, 0x434f4f52);
  opt.detect_kinks = true;
  opt.stop_at_kink = stop_at_kink;
  return check_gradients(build, targets, opt, kPipelineGradTolerance);
}

}  // namespace detail

inline constexpr std::size_t kPipelineGradMaxAttempts = 8;

// Full detection loss on a 16x16 phantom with M=3, nonzero attention
// weights and pinned head regions, so pooling bins do not move under the
// perturbation. Checks a random subset of coordinates in every parameter.
// ReLU and smooth-L1 kinks can still fall within the step at a given point,
// so candidate points derived from `seed` are tried in turn and the first
// with no flagged coordinate is reported. If none is found the last report
// is returned and fails.
inline GradCheckReport pipeline_gradcheck(std::uint64_t seed, bool flip_sign = false,
                                          std::size_t coords_per_tensor = 40) {
  GradCheckReport rep;
  for (std::size_t attempt = 0; attempt < kPipelineGradMaxAttempts; ++attempt) {
    const std::uint64_t point = attempt == 0 ? seed : mix_seed(seed, 0x4b494e4b + attempt);
    const bool last = attempt + 1 == kPipelineGradMaxAttempts;
    rep = detail::pipeline_gradcheck_at(point, flip_sign, coords_per_tensor, !last);
    rep.attempts = attempt + 1;
    if (rep.kinks() == 0) break;
  }
  return rep;
}

}  // namespace sliceattn
