#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "sliceattn/boxes.hpp"
#include "sliceattn/error.hpp"

namespace sliceattn {

inline constexpr double kMatchIou = 0.5;
inline const std::vector<double> kFpRates = {0.5, 1.0, 2.0, 4.0, 8.0, 16.0};

struct MatchResult {
  std::vector<bool> is_tp;       // per detection, input order
  std::vector<int> matched_gt;   // per detection, -1 when FP
  std::vector<bool> gt_hit;      // per ground truth

  std::size_t tp() const { return static_cast<std::size_t>(std::count(is_tp.begin(), is_tp.end(), true)); }
  std::size_t fp() const { return is_tp.size() - tp(); }
};

// Greedy one-to-one matching in descending score order (ties by input
// index). Each detection takes the unmatched ground truth with the highest
// IoU, provided that IoU is strictly above the threshold, and the lowest
// index among equal IoUs; later detections on an already matched ground truth
// are false positives.
inline MatchResult match_detections(std::span<const Detection> dets, std::span<const Box> gts,
                                    double iou_threshold = kMatchIou) {
  MatchResult r;
  r.is_tp.assign(dets.size(), false);
  r.matched_gt.assign(dets.size(), -1);
  r.gt_hit.assign(gts.size(), false);
  std::vector<double> scores;
  scores.reserve(dets.size());
  for (const Detection& d : dets) scores.push_back(d.score);
  for (std::size_t i : order_by_score(scores)) {
    int best = -1;
    double best_iou = iou_threshold;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (r.gt_hit[g]) continue;
      const double v = iou(dets[i].box, gts[g]);
      if (v > best_iou) {
        best_iou = v;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0) {
      r.is_tp[i] = true;
      r.matched_gt[i] = best;
      r.gt_hit[static_cast<std::size_t>(best)] = true;
    }
  }
  return r;
}

struct FrocPoint {
  double threshold = 0;
  double fp_per_image = 0;
  double sensitivity = 0;
};

// Detections and annotations of one image.
struct ImageResult {
  std::string image_id;
  std::vector<Detection> detections;
  std::vector<Box> ground_truth;
};

struct EvalReport {
  std::vector<double> fp_rates;
  std::vector<double> sensitivity_at;  // parallel to fp_rates
  std::vector<FrocPoint> froc;         // descending threshold
  std::size_t images = 0;
  std::size_t lesions = 0;
  std::map<std::string, EvalReport> strata;

  double sensitivity_at_rate(double rate) const {
    for (std::size_t i = 0; i < fp_rates.size(); ++i) {
      if (fp_rates[i] == rate) return sensitivity_at[i];
    }
    throw InputError("FP rate not in report");
  }
};

// Sweeps the score threshold over every distinct detection score. At each
// threshold the curve records total FPs / image count and the fraction of
// ground truths hit. Sensitivity at a target rate is the best sensitivity
// among curve points whose FP rate does not exceed the target (0 if none).
inline EvalReport froc(std::span<const ImageResult> images, std::span<const double> fp_rates,
                       double iou_threshold = kMatchIou) {
  if (images.empty()) throw InputError("froc: no images");
  EvalReport rep;
  rep.images = images.size();
  rep.fp_rates.assign(fp_rates.begin(), fp_rates.end());
  struct Scored {
    double score;
    bool tp;
  };
  std::vector<Scored> all;
  for (const ImageResult& img : images) {
    rep.lesions += img.ground_truth.size();
    const MatchResult m = match_detections(img.detections, img.ground_truth, iou_threshold);
    for (std::size_t i = 0; i < img.detections.size(); ++i) {
      all.push_back(Scored{img.detections[i].score, m.is_tp[i]});
    }
  }
  if (rep.lesions == 0) throw InputError("froc: no ground-truth lesions, sensitivity undefined");
  std::stable_sort(all.begin(), all.end(),
                   [](const Scored& a, const Scored& b) { return a.score > b.score; });
  const double n_img = static_cast<double>(images.size());
  const double n_gt = static_cast<double>(rep.lesions);
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < all.size(); ++i) {
    (all[i].tp ? tp : fp) += 1;
    if (i + 1 == all.size() || all[i + 1].score != all[i].score) {
      rep.froc.push_back(FrocPoint{all[i].score, static_cast<double>(fp) / n_img,
                                   static_cast<double>(tp) / n_gt});
    }
  }
  for (double rate : rep.fp_rates) {
    double best = 0.0;
    for (const FrocPoint& p : rep.froc) {
      if (p.fp_per_image <= rate) best = std::max(best, p.sensitivity);
    }
    rep.sensitivity_at.push_back(best);
  }
  return rep;
}

inline EvalReport froc(std::span<const ImageResult> images) { return froc(images, kFpRates); }

inline std::string report_csv(const EvalReport& rep) {
  std::ostringstream os;
  os.precision(10);
  os << "stratum,fp_rate,sensitivity\n";
  auto rows = [&](const std::string& name, const EvalReport& r) {
    for (std::size_t i = 0; i < r.fp_rates.size(); ++i) {
      os << name << ',' << r.fp_rates[i] << ',' << r.sensitivity_at[i] << '\n';
    }
  };
  rows("all", rep);
  for (const auto& [name, sub] : rep.strata) rows(name, sub);
  return os.str();
}

inline std::string froc_csv(const EvalReport& rep) {
  std::ostringstream os;
  os.precision(17);
  os << "threshold,fp_per_image,sensitivity\n";
  for (const FrocPoint& p : rep.froc) {
    os << p.threshold << ',' << p.fp_per_image << ',' << p.sensitivity << '\n';
  }
  return os.str();
}

}  // namespace sliceattn
