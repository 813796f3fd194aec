#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "sliceattn/autograd.hpp"
#include "sliceattn/error.hpp"
#include "sliceattn/params.hpp"
#include "sliceattn/pipeline.hpp"
#include "sliceattn/rng.hpp"
#include "sliceattn/synthdata.hpp"

namespace sliceattn {

struct TrainConfig {
  double lr = 0.001;
  double momentum = 0.9;
  double weight_decay = 5e-5;
  std::size_t epochs = 6;
  std::vector<std::size_t> lr_drop_epochs = {4, 5};
  double lr_drop_factor = 10.0;
  std::size_t batch_size = 2;
  std::uint64_t seed = 0;       // shuffling and loss sampling
  std::uint64_t init_seed = 0;  // parameter initialization
  std::size_t threads = 1;

  void validate() const {
    if (!(lr >= 0.0)) throw ContractError("lr must be >= 0");
    if (!(lr_drop_factor > 1.0)) throw ContractError("lr_drop_factor must be > 1");
    if (momentum < 0.0 || weight_decay < 0.0) {
      throw ContractError("momentum and weight_decay must be >= 0");
    }
    if (batch_size == 0) throw ContractError("batch_size must be >= 1");
  }

  // Learning rate during 1-based `epoch`: divided by the factor once for
  // every drop epoch that has already completed.
  double lr_at_epoch(std::size_t epoch) const {
    double v = lr;
    for (std::size_t d : lr_drop_epochs) {
      if (epoch > d) v /= lr_drop_factor;
    }
    return v;
  }
};

// L2 weight decay applies to conv/FC weights outside the attention modules.
inline bool uses_weight_decay(const std::string& name) {
  const bool is_weight = name.size() >= 2 && name.compare(name.size() - 2, 2, ".w") == 0;
  return is_weight && name.rfind("attention.", 0) != 0;
}

struct SgdState {
  std::map<std::string, std::vector<double>> velocity;
};

// v <- momentum * v + grad + decay * param;  param <- param - lr * v.
// A parameter without a populated gradient is treated as having zero
// gradient.
inline void sgd_step(ParamStore& params, SgdState& state, const TrainConfig& config, double lr) {
  for (auto& [name, t] : params) {
    if (t.grad) {
      for (double g : *t.grad) {
        if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter " + name);
      }
    }
  }
  for (auto& [name, t] : params) {
    std::vector<double>& v = state.velocity[name];
    if (v.empty()) v.assign(t.numel(), 0.0);
    const double decay = uses_weight_decay(name) ? config.weight_decay : 0.0;
    auto data = t.data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double g = t.grad ? (*t.grad)[i] : 0.0;
      v[i] = config.momentum * v[i] + g + decay * data[i];
      data[i] -= lr * v[i];
    }
  }
}

struct LossLogRow {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double loss_cls = 0;
  double loss_reg = 0;
  double loss_total = 0;
  double lr = 0;
};

inline std::string loss_log_csv(const std::vector<LossLogRow>& rows) {
  std::ostringstream os;
  os.precision(17);
  os << "epoch,step,loss_cls,loss_reg,loss_total,lr\n";
  for (const LossLogRow& r : rows) {
    os << r.epoch << ',' << r.step << ',' << r.loss_cls << ',' << r.loss_reg << ','
       << r.loss_total << ',' << r.lr << '\n';
  }
  return os.str();
}

struct SampleGradient {
  std::vector<std::vector<double>> grads;  // ParamStore order
  double cls = 0, reg = 0, total = 0;
};

// Loss and parameter gradients of one sample, computed on a private copy of
// the parameters so samples can run concurrently.
inline SampleGradient sample_gradient(const ParamStore& params, const PipelineConfig& config,
                                      const Sample& sample, std::uint64_t sampling_seed) {
  ParamStore local = params;
  local.zero_grad();
  Graph g;
  BoundParams bound(g, local);
  const PipelineForward f = forward_pipeline(g, bound, config, sample.deck);
  Rng rng(sampling_seed);
  const LossTerms loss = detection_loss(g, bound, config, f, sample.ground_truth, rng);
  SampleGradient out;
  out.cls = loss.cls();
  out.reg = loss.reg();
  out.total = loss.total.value().item();
  if (!std::isfinite(out.total)) throw NumericError("loss diverged (non-finite)");
  g.backward(loss.total);
  for (auto& [name, t] : local) {
    out.grads.push_back(t.grad ? std::move(*t.grad) : std::vector<double>(t.numel(), 0.0));
  }
  return out;
}

struct TrainResult {
  std::vector<LossLogRow> log;
  std::vector<double> epoch_mean_loss;
};

struct TrainHooks {
  // Called after every optimizer step.
  std::function<void(const LossLogRow&)> on_step;
  // Called after every epoch with the 1-based epoch number.
  std::function<void(std::size_t, const ParamStore&)> on_epoch_end;
};

// Mini-batch SGD over `data`. The shuffle order, loss sampling and gradient
// reduction order depend only on config.seed, so a run is bitwise
// reproducible regardless of `threads`.
inline TrainResult train(ParamStore& params, const std::vector<Sample>& data,
                         const PipelineConfig& pipeline, const TrainConfig& config,
                         const TrainHooks& hooks = {}) {
  if (data.empty()) throw InputError("train: empty dataset");
  pipeline.validate();
  config.validate();
  TrainResult result;
  SgdState state;
  std::size_t step = 0;
  const std::size_t threads = std::max<std::size_t>(1, config.threads);
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle(mix_seed(config.seed, 0x5348554646ULL + epoch));
    shuffle.shuffle(order);
    const double lr = config.lr_at_epoch(epoch);
    double epoch_total = 0.0;
    std::size_t epoch_steps = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      ++step;
      const std::size_t stop = std::min(order.size(), start + config.batch_size);
      const std::size_t n = stop - start;
      std::vector<SampleGradient> parts(n);
      auto work = [&](std::size_t b) {
        const std::uint64_t seed = mix_seed(mix_seed(config.seed, step), b);
        parts[b] = sample_gradient(params, pipeline, data[order[start + b]], seed);
      };
      if (threads > 1 && n > 1) {
        for (std::size_t b0 = 0; b0 < n; b0 += threads) {
          std::vector<std::thread> pool;
          std::vector<std::exception_ptr> errors(std::min(threads, n - b0));
          for (std::size_t b = b0; b < std::min(n, b0 + threads); ++b) {
            pool.emplace_back([&, b] {
              try {
                work(b);
              } catch (...) {
                errors[b - b0] = std::current_exception();
              }
            });
          }
          for (auto& t : pool) t.join();
          for (auto& e : errors) {
            if (e) std::rethrow_exception(e);
          }
        }
      } else {
        for (std::size_t b = 0; b < n; ++b) work(b);
      }
      // Reduce in batch-index order.
      const double inv = 1.0 / static_cast<double>(n);
      LossLogRow row{epoch, step, 0, 0, 0, lr};
      std::size_t p = 0;
      for (auto& [name, t] : params) {
        std::vector<double>& g = t.ensure_grad();
        std::fill(g.begin(), g.end(), 0.0);
        for (std::size_t b = 0; b < n; ++b) {
          const std::vector<double>& src = parts[b].grads[p];
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += src[i];
        }
        for (double& v : g) v *= inv;
        ++p;
      }
      for (const SampleGradient& s : parts) {
        row.loss_cls += s.cls * inv;
        row.loss_reg += s.reg * inv;
        row.loss_total += s.total * inv;
      }
      sgd_step(params, state, config, lr);
      params.zero_grad();
      result.log.push_back(row);
      if (hooks.on_step) hooks.on_step(row);
      epoch_total += row.loss_total;
      ++epoch_steps;
    }
    result.epoch_mean_loss.push_back(epoch_total / static_cast<double>(epoch_steps));
    if (hooks.on_epoch_end) hooks.on_epoch_end(epoch, params);
  }
  return result;
}

}  // namespace sliceattn
