#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "sliceattn/eval.hpp"
#include "sliceattn/params.hpp"
#include "sliceattn/pipeline.hpp"
#include "sliceattn/synthdata.hpp"

namespace sliceattn {

inline std::vector<ImageResult> detect_all(ParamStore& params, const PipelineConfig& config,
                                           const std::vector<Sample>& samples) {
  std::vector<ImageResult> out;
  out.reserve(samples.size());
  for (const Sample& s : samples) {
    InferenceResult r = run_detector(params, config, s.deck);
    out.push_back(ImageResult{s.deck.volume_id, std::move(r.detections), s.ground_truth});
  }
  return out;
}

// Ground truth echoed back as score-1 detections.
inline std::vector<ImageResult> oracle_detections(const std::vector<Sample>& samples) {
  std::vector<ImageResult> out;
  for (const Sample& s : samples) {
    ImageResult r{s.deck.volume_id, {}, s.ground_truth};
    for (const Box& b : s.ground_truth) r.detections.push_back(Detection{b, 1.0, s.deck.volume_id});
    out.push_back(std::move(r));
  }
  return out;
}

// Overall report plus "diameter:<bin>" and "interval:<bin>" strata. Strata
// without lesions are omitted.
inline EvalReport evaluate_with_strata(const std::vector<ImageResult>& results,
                                       const std::vector<Sample>& samples) {
  EvalReport rep = froc(results);
  for (auto criterion : {StratifyBy::diameter, StratifyBy::slice_interval}) {
    const std::string prefix = criterion == StratifyBy::diameter ? "diameter:" : "interval:";
    for (const auto& [bin, idx] : stratify(samples, criterion)) {
      std::vector<ImageResult> subset;
      std::size_t lesions = 0;
      for (std::size_t i : idx) {
        subset.push_back(results[i]);
        lesions += results[i].ground_truth.size();
      }
      if (lesions == 0) continue;
      rep.strata[prefix + bin] = froc(subset);
    }
  }
  return rep;
}

}  // namespace sliceattn
