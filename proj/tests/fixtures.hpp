#pragma once

// Datasets and runs shared by the unit tests and the acceptance binary.

#include <cstddef>
#include <vector>

#include "sliceattn.hpp"

namespace sliceattn::fixtures {

// Eight default 64x64 phantoms used for smoke and overfit runs.
inline PhantomSpec smoke_spec() {
  PhantomSpec spec;
  spec.seed = 3;
  return spec;
}

inline constexpr std::size_t kSmokeCount = 8;

inline std::vector<Sample> smoke_set() { return generate(smoke_spec(), kSmokeCount); }

struct OverfitRun {
  double first_loss = 0;
  double last_loss = 0;
  std::size_t steps = 0;
};

// 200 optimizer steps (50 epochs x 4 batches of 2) at the default learning
// rate with no drops.
inline OverfitRun overfit_smoke() {
  const std::vector<Sample> data = smoke_set();
  const PipelineConfig pipeline;
  TrainConfig config;
  config.epochs = 50;
  config.lr_drop_epochs = {};
  ParamStore params = init_params(pipeline, config.init_seed);
  const TrainResult r = train(params, data, pipeline, config);
  return OverfitRun{r.log.front().loss_total, r.log.back().loss_total, r.log.size()};
}

}  // namespace sliceattn::fixtures
