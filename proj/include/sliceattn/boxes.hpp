#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "sliceattn/error.hpp"

namespace sliceattn {

// Axis-aligned box in pixel coordinates, half-open [x1,x2) x [y1,y2).
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  bool valid() const { return x2 > x1 && y2 > y1; }

  friend bool operator==(const Box&, const Box&) = default;
};

struct Detection {
  Box box;
  double score = 0.0;
  std::string image_id;
};

inline double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

// Regression target relative to a reference box (anchor or proposal).
struct BoxDelta {
  double dx = 0, dy = 0, dw = 0, dh = 0;
};

// Largest log-scale delta applied when decoding; keeps exp() bounded.
inline constexpr double kMaxLogScale = 4.135166556742356;  // ln(1000/16)

inline Box decode_box(const Box& ref, const BoxDelta& d) {
  const double w = ref.width(), h = ref.height();
  const double cx = ref.cx() + d.dx * w;
  const double cy = ref.cy() + d.dy * h;
  const double nw = w * std::exp(std::min(d.dw, kMaxLogScale));
  const double nh = h * std::exp(std::min(d.dh, kMaxLogScale));
  return Box{cx - 0.5 * nw, cy - 0.5 * nh, cx + 0.5 * nw, cy + 0.5 * nh};
}

inline BoxDelta encode_box(const Box& ref, const Box& target) {
  if (!ref.valid() || !target.valid()) throw InputError("encode_box: degenerate box");
  const double w = ref.width(), h = ref.height();
  return BoxDelta{(target.cx() - ref.cx()) / w, (target.cy() - ref.cy()) / h,
                  std::log(target.width() / w), std::log(target.height() / h)};
}

inline Box clip_box(const Box& b, double width, double height) {
  return Box{std::clamp(b.x1, 0.0, width), std::clamp(b.y1, 0.0, height),
             std::clamp(b.x2, 0.0, width), std::clamp(b.y2, 0.0, height)};
}

// Anchors tiled over a feature grid. Index layout: a * (H*W) + y * W + x,
// centered at ((x + 0.5) * stride, (y + 0.5) * stride). ratio = height/width.
inline std::vector<Box> generate_anchors(std::size_t feat_h, std::size_t feat_w,
                                         std::size_t stride, std::span<const double> sizes,
                                         std::span<const double> ratios) {
  std::vector<Box> anchors;
  anchors.reserve(sizes.size() * ratios.size() * feat_h * feat_w);
  for (double size : sizes) {
    for (double ratio : ratios) {
      const double w = size / std::sqrt(ratio);
      const double h = size * std::sqrt(ratio);
      for (std::size_t y = 0; y < feat_h; ++y) {
        for (std::size_t x = 0; x < feat_w; ++x) {
          const double cx = (static_cast<double>(x) + 0.5) * static_cast<double>(stride);
          const double cy = (static_cast<double>(y) + 0.5) * static_cast<double>(stride);
          anchors.push_back(Box{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h});
        }
      }
    }
  }
  return anchors;
}

// Indices ordered by descending score; equal scores keep ascending index.
inline std::vector<std::size_t> order_by_score(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

// Greedy non-maximum suppression. Returns kept indices in descending score
// order; a box is dropped when its IoU with an already kept box is >= threshold.
inline std::vector<std::size_t> nms(std::span<const Box> boxes, std::span<const double> scores,
                                    double iou_threshold, std::size_t max_keep = SIZE_MAX) {
  if (boxes.size() != scores.size()) throw InputError("nms: boxes/scores length mismatch");
  std::vector<std::size_t> keep;
  for (std::size_t idx : order_by_score(scores)) {
    if (keep.size() >= max_keep) break;
    bool suppressed = false;
    for (std::size_t k : keep) {
      if (iou(boxes[idx], boxes[k]) >= iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) keep.push_back(idx);
  }
  return keep;
}

}  // namespace sliceattn
