#pragma once

// Cross-slice contextual attention and intra-slice spatial attention over a
// stack of per-image feature maps X[i] (i = image index), each [D,H,W].
//
//   contextual:  C = phi_C(X_i);  C' = softmax over i (temperature T_c);
//                C'' = C' / max_i |C'|;  X' = C'' * X
//   spatial:     S = phi_S(X'_i); S' = softmax over (h,w) (temperature T_s);
//                S'' = S' / max_{h,w} |S'|;  X'' = S'' * X'
//
// phi_C and phi_S are single same-padding convolutions D -> D shared across
// the images. Softmax outputs are strictly positive, so the |.| in the
// max-normalization never changes a value; it is kept to match the formula.

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "sliceattn/autograd.hpp"
#include "sliceattn/error.hpp"
#include "sliceattn/ops.hpp"

namespace sliceattn {

// Per-image features [M, D, H, W] on a graph.
struct FeatureStack {
  Var data;

  std::size_t images() const { return data.value().dim(0); }
  std::size_t channels() const { return data.value().dim(1); }
  std::size_t height() const { return data.value().dim(2); }
  std::size_t width() const { return data.value().dim(3); }

  static FeatureStack wrap(Var v) {
    const Tensor& t = v.value();
    if (t.rank() != 4 || t.dim(0) == 0) {
      throw DimensionError("feature stack must be [M,D,H,W] with M >= 1, got " +
                           shape_str(t.shape()));
    }
    return FeatureStack{v};
  }
};

enum class AttentionKind { contextual, spatial };

inline const char* to_string(AttentionKind k) {
  return k == AttentionKind::contextual ? "contextual" : "spatial";
}

// Normalized attention weights, same shape as the stack they reweight.
struct AttentionField {
  Var weights;
  AttentionKind kind;
};

struct AttentionConfig {
  double contextual_temperature = 2.0;
  double spatial_temperature = 3.0;
  bool enable_contextual = true;
  bool enable_spatial = true;
  std::size_t attention_conv_kernel = 3;

  void validate() const {
    if (!(contextual_temperature > 0.0) || !(spatial_temperature > 0.0)) {
      throw ContractError("attention temperatures must be > 0");
    }
    if (attention_conv_kernel == 0 || attention_conv_kernel % 2 == 0) {
      throw ContractError("attention conv kernel must be a positive odd integer");
    }
  }
};

// Weights [D, D, k, k] and bias [D] of phi_C or phi_S.
struct AttentionConv {
  Var weights;
  Var bias;
};

struct AttentionStage {
  FeatureStack refined;
  AttentionField field;
  Var logits;   // phi output, [M,D,H,W]
  Var softmax;  // C' or S', [M,D,H,W]
};

namespace detail {

inline Var attention_logits(const FeatureStack& stack, const AttentionConv& conv) {
  const Tensor& w = conv.weights.value();
  if (w.rank() != 4 || w.dim(0) != stack.channels()) {
    throw DimensionError("attention conv must map " + std::to_string(stack.channels()) +
                         " channels to " + std::to_string(stack.channels()) + ", got weights " +
                         shape_str(w.shape()));
  }
  const std::size_t k = w.dim(2);
  if (k % 2 == 0) throw DimensionError("attention conv kernel must be odd for same padding");
  return ops::conv2d(stack.data, conv.weights, conv.bias, 1, k / 2);
}

}  // namespace detail

// Softmax across the image axis (axis 0) then max-normalization across the
// same axis. Returns {softmax, field}.
inline std::pair<Var, Var> contextual_field_from_logits(Var logits, double temperature) {
  Var soft = ops::softmax_over_axis(logits, 0, temperature);
  Var field = ops::max_normalize_over_axis(soft, 0);
  return {soft, field};
}

// Softmax over all H*W positions of each (i, d) plane, then max-normalization
// over the same positions. Returns {softmax, field}, both [M,D,H,W].
inline std::pair<Var, Var> spatial_field_from_logits(Var logits, double temperature) {
  const Shape shape = logits.shape();
  if (shape.size() != 4) throw DimensionError("spatial logits must be [M,D,H,W]");
  Var planes = ops::reshape(logits, Shape{shape[0], shape[1], shape[2] * shape[3]});
  Var soft = ops::softmax_over_axis(planes, 2, temperature);
  Var field = ops::max_normalize_over_axis(soft, 2);
  return {ops::reshape(soft, shape), ops::reshape(field, shape)};
}

inline AttentionStage contextual_attention(const FeatureStack& stack, const AttentionConv& phi_c,
                                           double temperature) {
  Var logits = detail::attention_logits(stack, phi_c);
  auto [soft, field] = contextual_field_from_logits(logits, temperature);
  Var refined = ops::mul(field, stack.data);
  return AttentionStage{FeatureStack{refined}, AttentionField{field, AttentionKind::contextual},
                        logits, soft};
}

inline AttentionStage spatial_attention(const FeatureStack& stack, const AttentionConv& phi_s,
                                        double temperature) {
  Var logits = detail::attention_logits(stack, phi_s);
  auto [soft, field] = spatial_field_from_logits(logits, temperature);
  Var refined = ops::mul(field, stack.data);
  return AttentionStage{FeatureStack{refined}, AttentionField{field, AttentionKind::spatial},
                        logits, soft};
}

struct DualAttentionResult {
  FeatureStack refined;
  std::vector<AttentionField> fields;
  std::vector<AttentionStage> stages;
};

// Contextual then spatial; a disabled module passes its input through
// untouched. Parameters of a disabled module may be absent.
inline DualAttentionResult dual_attention(const FeatureStack& stack, const AttentionConfig& config,
                                          const std::optional<AttentionConv>& phi_c,
                                          const std::optional<AttentionConv>& phi_s) {
  config.validate();
  DualAttentionResult out{stack, {}, {}};
  if (config.enable_contextual) {
    if (!phi_c) throw ContractError("contextual attention enabled but phi_C missing");
    AttentionStage st = contextual_attention(out.refined, *phi_c, config.contextual_temperature);
    out.refined = st.refined;
    out.fields.push_back(st.field);
    out.stages.push_back(st);
  }
  if (config.enable_spatial) {
    if (!phi_s) throw ContractError("spatial attention enabled but phi_S missing");
    AttentionStage st = spatial_attention(out.refined, *phi_s, config.spatial_temperature);
    out.refined = st.refined;
    out.fields.push_back(st.field);
    out.stages.push_back(st);
  }
  return out;
}

}  // namespace sliceattn
