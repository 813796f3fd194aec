#pragma once

// Differentiable operations on Graph-tracked tensors. Each op computes its
// forward value eagerly and records a closure that maps the output gradient
// back onto its parents.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sliceattn/autograd.hpp"
#include "sliceattn/error.hpp"
#include "sliceattn/tensor.hpp"

namespace sliceattn::ops {

namespace detail {

inline Graph& graph_of(Var a) {
  if (a.graph == nullptr) throw ContractError("op on detached Var");
  return *a.graph;
}

inline Graph& graph_of(Var a, Var b) {
  if (a.graph != b.graph) throw ContractError("op mixes Vars from different graphs");
  return graph_of(a);
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

}  // namespace detail

inline Var add(Var a, Var b) {
  Graph& g = detail::graph_of(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  detail::require_same_shape(x, y, "add");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] + y[i];
  const std::size_t ia = a.id, ib = b.id;
  return g.record(std::move(out), {ia, ib}, [ia, ib](Graph& gr, std::size_t self) {
    auto go = gr.grad_out(self);
    for (std::size_t id : {ia, ib}) {
      if (double* gi = gr.grad_in(id)) {
        for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i];
      }
    }
  });
}

inline Var sub(Var a, Var b) {
  Graph& g = detail::graph_of(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  detail::require_same_shape(x, y, "sub");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] - y[i];
  const std::size_t ia = a.id, ib = b.id;
  return g.record(std::move(out), {ia, ib}, [ia, ib](Graph& gr, std::size_t self) {
    auto go = gr.grad_out(self);
    if (double* gi = gr.grad_in(ia)) {
      for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i];
    }
    if (double* gi = gr.grad_in(ib)) {
      for (std::size_t i = 0; i < go.size(); ++i) gi[i] -= go[i];
    }
  });
}

// Elementwise (Hadamard) product.
inline Var mul(Var a, Var b) {
  Graph& g = detail::graph_of(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  detail::require_same_shape(x, y, "mul");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] * y[i];
  const std::size_t ia = a.id, ib = b.id;
  return g.record(std::move(out), {ia, ib}, [ia, ib](Graph& gr, std::size_t self) {
    auto go = gr.grad_out(self);
    const Tensor& xv = gr.value(ia);
    const Tensor& yv = gr.value(ib);
    if (double* gi = gr.grad_in(ia)) {
      for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i] * yv[i];
    }
    if (double* gi = gr.grad_in(ib)) {
      for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i] * xv[i];
    }
  });
}

inline Var scale(Var a, double s) {
  Graph& g = detail::graph_of(a);
  Tensor out = a.value();
  for (double& v : out.storage()) v *= s;
  const std::size_t ia = a.id;
  return g.record(std::move(out), {ia}, [ia, s](Graph& gr, std::size_t self) {
    auto go = gr.grad_out(self);
    if (double* gi = gr.grad_in(ia)) {
      for (std::size_t i = 0; i < go.size(); ++i) gi[i] += s * go[i];
    }
  });
}

inline Var relu(Var a) {
  Graph& g = detail::graph_of(a);
  Tensor out = a.value();
  for (double& v : out.storage()) v = v > 0.0 ? v : 0.0;
  const std::size_t ia = a.id;
  return g.record(std::move(out), {ia}, [ia](Graph& gr, std::size_t self) {
    auto go = gr.grad_out(self);
    const Tensor& x = gr.value(ia);
    if (double* gi = gr.grad_in(ia)) {
      for (std::size_t i = 0; i < go.size(); ++i) {
        if (x[i] > 0.0) gi[i] += go[i];
      }
    }
  });
}

inline double sigmoid_scalar(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline Var sigmoid(Var a) {
  Graph& g = detail::graph_of(a);
  Tensor out = a.value();
  for (double& v : out.storage()) v = sigmoid_scalar(v);
  const std::size_t ia = a.id;
  return g.record(std::move(out), {ia}, [ia](Graph& gr, std::size_t self) {
    auto go = gr.grad_out(self);
    const Tensor& y = gr.value(self);
    if (double* gi = gr.grad_in(ia)) {
      for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i] * y[i] * (1.0 - y[i]);
    }
  });
}

inline Var sum(Var a) {
  Graph& g = detail::graph_of(a);
  const Tensor& x = a.value();
  double s = 0.0;
  for (double v : x.data()) s += v;
  const std::size_t ia = a.id;
  return g.record(Tensor::scalar(s), {ia}, [ia](Graph& gr, std::size_t self) {
    const double go = gr.grad_out(self)[0];
    if (double* gi = gr.grad_in(ia)) {
      const std::size_t n = gr.value(ia).numel();
      for (std::size_t i = 0; i < n; ++i) gi[i] += go;
    }
  });
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

inline Var reshape(Var a, Shape shape) {
  Graph& g = detail::graph_of(a);
  Tensor out = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id;
  return g.record(std::move(out), {ia}, [ia](Graph& gr, std::size_t self) {
    auto go = gr.grad_out(self);
    if (double* gi = gr.grad_in(ia)) {
      for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i];
    }
  });
}

inline Var flatten(Var a) { return reshape(a, Shape{a.numel()}); }

// [m,k] x [k,n] -> [m,n]
inline Var matmul(Var a, Var b) {
  Graph& g = detail::graph_of(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.rank() != 2 || y.rank() != 2 || x.dim(1) != y.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(x.shape()) + " and " +
                         shape_str(y.shape()));
  }
  const std::size_t m = x.dim(0), k = x.dim(1), n = y.dim(1);
  Tensor out(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = &out[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const double xv = x[i * k + p];
      const double* yrow = &y[p * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += xv * yrow[j];
    }
  }
  const std::size_t ia = a.id, ib = b.id;
  return g.record(std::move(out), {ia, ib}, [ia, ib, m, k, n](Graph& gr, std::size_t self) {
    auto go = gr.grad_out(self);
    const Tensor& xv = gr.value(ia);
    const Tensor& yv = gr.value(ib);
    if (double* gx = gr.grad_in(ia)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += go[i * n + j] * yv[p * n + j];
          gx[i * k + p] += acc;
        }
    }
    if (double* gy = gr.grad_in(ib)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double xval = xv[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gy[p * n + j] += xval * go[i * n + j];
        }
    }
  });
}

// Adds a [n] bias to every row of an [m,n] matrix.
inline Var add_row_bias(Var a, Var bias) {
  Graph& g = detail::graph_of(a, bias);
  const Tensor& x = a.value();
  const Tensor& b = bias.value();
  if (x.rank() != 2 || b.rank() != 1 || b.dim(0) != x.dim(1)) {
    throw DimensionError("add_row_bias: incompatible shapes " + shape_str(x.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t m = x.dim(0), n = x.dim(1);
  Tensor out = x;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += b[j];
  const std::size_t ia = a.id, ib = bias.id;
  return g.record(std::move(out), {ia, ib}, [ia, ib, m, n](Graph& gr, std::size_t self) {
    auto go = gr.grad_out(self);
    if (double* gx = gr.grad_in(ia)) {
      for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
    }
    if (double* gb = gr.grad_in(ib)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += go[i * n + j];
    }
  });
}

// Fully connected layer: x[m,in] * w[in,out] + b[out].
inline Var linear(Var x, Var w, Var b) { return add_row_bias(matmul(x, w), b); }

// Concatenates rank-3 [D_i,H,W] tensors along the channel axis, preserving
// block order.
inline Var concat_along_channel(std::span<const Var> inputs) {
  if (inputs.empty()) throw DimensionError("concat_along_channel: no inputs");
  Graph& g = detail::graph_of(inputs[0]);
  const Tensor& first = inputs[0].value();
  if (first.rank() != 3) throw DimensionError("concat_along_channel: inputs must be rank 3");
  const std::size_t h = first.dim(1), w = first.dim(2);
  std::size_t channels = 0;
  std::vector<std::size_t> ids;
  std::vector<std::size_t> sizes;
  for (Var v : inputs) {
    detail::graph_of(inputs[0], v);
    const Tensor& t = v.value();
    if (t.rank() != 3 || t.dim(1) != h || t.dim(2) != w) {
      throw DimensionError("concat_along_channel: shape mismatch " + shape_str(t.shape()) +
                           " vs " + shape_str(first.shape()));
    }
    channels += t.dim(0);
    ids.push_back(v.id);
    sizes.push_back(t.numel());
  }
  Tensor out(Shape{channels, h, w});
  std::size_t off = 0;
  for (Var v : inputs) {
    const Tensor& t = v.value();
    std::copy(t.data().begin(), t.data().end(), out.storage().begin() + off);
    off += t.numel();
  }
  return g.record(std::move(out), ids, [ids, sizes](Graph& gr, std::size_t self) {
    auto go = gr.grad_out(self);
    std::size_t o = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (double* gi = gr.grad_in(ids[k])) {
        for (std::size_t i = 0; i < sizes[k]; ++i) gi[i] += go[o + i];
      }
      o += sizes[k];
    }
  });
}

inline Var concat_along_channel(std::initializer_list<Var> inputs) {
  return concat_along_channel(std::span<const Var>(inputs.begin(), inputs.size()));
}

// Picks entries of the flattened input; the result has shape [indices.size()].
inline Var gather(Var a, std::vector<std::size_t> indices) {
  Graph& g = detail::graph_of(a);
  const Tensor& x = a.value();
  Tensor out(Shape{indices.size()});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= x.numel()) throw DimensionError("gather: index out of range");
    out[i] = x[indices[i]];
  }
  const std::size_t ia = a.id;
  return g.record(std::move(out), {ia},
                  [ia, idx = std::move(indices)](Graph& gr, std::size_t self) {
                    auto go = gr.grad_out(self);
                    if (double* gi = gr.grad_in(ia)) {
                      for (std::size_t i = 0; i < idx.size(); ++i) gi[idx[i]] += go[i];
                    }
                  });
}

struct ConvGeometry {
  std::size_t batch, c_in, h, w, c_out, k, stride, pad, h_out, w_out;
};

namespace detail {

inline ConvGeometry conv_geometry(const Tensor& in, const Tensor& wt, const Tensor& b,
                                  std::size_t stride, std::size_t pad) {
  if (stride == 0) throw DimensionError("conv2d: stride must be positive");
  if (in.rank() != 3 && in.rank() != 4) {
    throw DimensionError("conv2d: input must be [C,H,W] or [N,C,H,W], got " +
                         shape_str(in.shape()));
  }
  if (wt.rank() != 4 || wt.dim(2) != wt.dim(3)) {
    throw DimensionError("conv2d: weights must be [C_out,C_in,k,k], got " +
                         shape_str(wt.shape()));
  }
  const bool batched = in.rank() == 4;
  ConvGeometry geo{};
  geo.batch = batched ? in.dim(0) : 1;
  geo.c_in = in.dim(batched ? 1 : 0);
  geo.h = in.dim(batched ? 2 : 1);
  geo.w = in.dim(batched ? 3 : 2);
  geo.c_out = wt.dim(0);
  geo.k = wt.dim(2);
  geo.stride = stride;
  geo.pad = pad;
  if (wt.dim(1) != geo.c_in) {
    throw DimensionError("conv2d: weights expect " + std::to_string(wt.dim(1)) +
                         " input channels, input has " + std::to_string(geo.c_in));
  }
  if (b.rank() != 1 || b.dim(0) != geo.c_out) {
    throw DimensionError("conv2d: bias must be [" + std::to_string(geo.c_out) + "], got " +
                         shape_str(b.shape()));
  }
  if (geo.k == 0 || geo.k > geo.h + 2 * pad || geo.k > geo.w + 2 * pad) {
    throw DimensionError("conv2d: kernel larger than padded input");
  }
  geo.h_out = (geo.h + 2 * pad - geo.k) / stride + 1;
  geo.w_out = (geo.w + 2 * pad - geo.k) / stride + 1;
  return geo;
}

// Valid output range [lo, hi) along one axis for kernel tap `t`:
// in = out*stride + t - pad must lie in [0, extent).
inline std::pair<std::size_t, std::size_t> tap_range(std::size_t t, std::size_t pad,
                                                     std::size_t stride, std::size_t extent,
                                                     std::size_t out_extent) {
  const long long shift = static_cast<long long>(t) - static_cast<long long>(pad);
  const long long s = static_cast<long long>(stride);
  long long lo = 0;
  if (shift < 0) lo = (-shift + s - 1) / s;
  long long hi = (static_cast<long long>(extent) - 1 - shift);
  hi = hi < 0 ? 0 : hi / s + 1;
  hi = std::min<long long>(hi, static_cast<long long>(out_extent));
  if (lo > hi) lo = hi;
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

}  // namespace detail

// 2D cross-correlation with square kernels. Accepts a single image [C,H,W]
// or a batch [N,C,H,W]; a batch shares the same weights across images.
inline Var conv2d(Var input, Var weights, Var bias, std::size_t stride, std::size_t padding) {
  Graph& g = detail::graph_of(input, weights);
  detail::graph_of(input, bias);
  const Tensor& in = input.value();
  const Tensor& wt = weights.value();
  const Tensor& bs = bias.value();
  const ConvGeometry geo = detail::conv_geometry(in, wt, bs, stride, padding);

  Shape out_shape = in.rank() == 4 ? Shape{geo.batch, geo.c_out, geo.h_out, geo.w_out}
                                   : Shape{geo.c_out, geo.h_out, geo.w_out};
  Tensor out(out_shape);
  const std::size_t in_plane = geo.h * geo.w;
  const std::size_t out_plane = geo.h_out * geo.w_out;
  const std::size_t kk = geo.k * geo.k;

  for (std::size_t n = 0; n < geo.batch; ++n) {
    for (std::size_t co = 0; co < geo.c_out; ++co) {
      double* op = &out[(n * geo.c_out + co) * out_plane];
      std::fill(op, op + out_plane, bs[co]);
      for (std::size_t ci = 0; ci < geo.c_in; ++ci) {
        const double* ip = &in[(n * geo.c_in + ci) * in_plane];
        const double* wp = &wt[(co * geo.c_in + ci) * kk];
        for (std::size_t ky = 0; ky < geo.k; ++ky) {
          const auto [oy_lo, oy_hi] = detail::tap_range(ky, geo.pad, geo.stride, geo.h, geo.h_out);
          for (std::size_t kx = 0; kx < geo.k; ++kx) {
            const double wv = wp[ky * geo.k + kx];
            const auto [ox_lo, ox_hi] =
                detail::tap_range(kx, geo.pad, geo.stride, geo.w, geo.w_out);
            for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
              const double* irow = ip + (oy * geo.stride + ky - geo.pad) * geo.w;
              double* orow = op + oy * geo.w_out;
              if (geo.stride == 1) {
                for (std::size_t ox = ox_lo; ox < ox_hi; ++ox)
                  orow[ox] += wv * irow[ox + kx - geo.pad];
              } else {
                for (std::size_t ox = ox_lo; ox < ox_hi; ++ox)
                  orow[ox] += wv * irow[ox * geo.stride + kx - geo.pad];
              }
            }
          }
        }
      }
    }
  }

  const std::size_t ii = input.id, iw = weights.id, ib = bias.id;
  return g.record(std::move(out), {ii, iw, ib}, [ii, iw, ib, geo](Graph& gr, std::size_t self) {
    auto go = gr.grad_out(self);
    const Tensor& inv = gr.value(ii);
    const Tensor& wtv = gr.value(iw);
    double* gin = gr.grad_in(ii);
    double* gw = gr.grad_in(iw);
    double* gb = gr.grad_in(ib);
    const std::size_t in_plane = geo.h * geo.w;
    const std::size_t out_plane = geo.h_out * geo.w_out;
    const std::size_t kk = geo.k * geo.k;
    for (std::size_t n = 0; n < geo.batch; ++n) {
      for (std::size_t co = 0; co < geo.c_out; ++co) {
        const double* gop = &go[(n * geo.c_out + co) * out_plane];
        if (gb) {
          double acc = 0.0;
          for (std::size_t i = 0; i < out_plane; ++i) acc += gop[i];
          gb[co] += acc;
        }
        for (std::size_t ci = 0; ci < geo.c_in; ++ci) {
          const std::size_t ioff = (n * geo.c_in + ci) * in_plane;
          const std::size_t woff = (co * geo.c_in + ci) * kk;
          for (std::size_t ky = 0; ky < geo.k; ++ky) {
            const auto [oy_lo, oy_hi] =
                detail::tap_range(ky, geo.pad, geo.stride, geo.h, geo.h_out);
            for (std::size_t kx = 0; kx < geo.k; ++kx) {
              const auto [ox_lo, ox_hi] =
                  detail::tap_range(kx, geo.pad, geo.stride, geo.w, geo.w_out);
              const double wv = wtv[woff + ky * geo.k + kx];
              double wacc = 0.0;
              for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
                const std::size_t irow = ioff + (oy * geo.stride + ky - geo.pad) * geo.w;
                const double* grow = gop + oy * geo.w_out;
                if (gw) {
                  const double* ir = &inv[irow];
                  for (std::size_t ox = ox_lo; ox < ox_hi; ++ox)
                    wacc += grow[ox] * ir[ox * geo.stride + kx - geo.pad];
                }
                if (gin) {
                  double* gi = gin + irow;
                  for (std::size_t ox = ox_lo; ox < ox_hi; ++ox)
                    gi[ox * geo.stride + kx - geo.pad] += wv * grow[ox];
                }
              }
              if (gw) gw[woff + ky * geo.k + kx] += wacc;
            }
          }
        }
      }
    }
  });
}

// Softmax along `axis` with temperature: exp((x - max) / T) / sum. The
// axis-wise maximum is subtracted before exponentiation.
inline Var softmax_over_axis(Var a, std::size_t axis, double temperature) {
  if (!(temperature > 0.0)) throw ContractError("softmax temperature must be > 0");
  Graph& g = detail::graph_of(a);
  const Tensor& x = a.value();
  const AxisSplit sp = split_at_axis(x.shape(), axis);
  Tensor out(x.shape());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.n * sp.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < sp.n; ++i) mx = std::max(mx, x[base + i * sp.inner]);
      double total = 0.0;
      for (std::size_t i = 0; i < sp.n; ++i) {
        const double e = std::exp((x[base + i * sp.inner] - mx) / temperature);
        out[base + i * sp.inner] = e;
        total += e;
      }
      for (std::size_t i = 0; i < sp.n; ++i) out[base + i * sp.inner] /= total;
    }
  }
  const std::size_t ia = a.id;
  return g.record(std::move(out), {ia}, [ia, sp, temperature](Graph& gr, std::size_t self) {
    auto go = gr.grad_out(self);
    const Tensor& y = gr.value(self);
    double* gi = gr.grad_in(ia);
    if (!gi) return;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t in = 0; in < sp.inner; ++in) {
        const std::size_t base = o * sp.n * sp.inner + in;
        double dot = 0.0;
        for (std::size_t i = 0; i < sp.n; ++i) {
          const std::size_t k = base + i * sp.inner;
          dot += go[k] * y[k];
        }
        for (std::size_t i = 0; i < sp.n; ++i) {
          const std::size_t k = base + i * sp.inner;
          gi[k] += y[k] * (go[k] - dot) / temperature;
        }
      }
    }
  });
}

// Divides by the axis-wise maximum absolute value so that the largest
// magnitude along `axis` becomes 1. Ties pick the lowest index for the
// gradient route through the maximum.
inline Var max_normalize_over_axis(Var a, std::size_t axis) {
  Graph& g = detail::graph_of(a);
  const Tensor& x = a.value();
  const AxisSplit sp = split_at_axis(x.shape(), axis);
  Tensor out(x.shape());
  std::vector<std::size_t> arg(sp.outer * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.n * sp.inner + in;
      std::size_t best = 0;
      double mx = std::abs(x[base]);
      for (std::size_t i = 1; i < sp.n; ++i) {
        const double v = std::abs(x[base + i * sp.inner]);
        if (v > mx) {
          mx = v;
          best = i;
        }
      }
      if (mx == 0.0) {
        throw NumericError("max_normalize_over_axis: all-zero slice along axis " +
                           std::to_string(axis));
      }
      arg[o * sp.inner + in] = best;
      for (std::size_t i = 0; i < sp.n; ++i)
        out[base + i * sp.inner] = x[base + i * sp.inner] / mx;
    }
  }
  const std::size_t ia = a.id;
  return g.record(std::move(out), {ia},
                  [ia, sp, arg = std::move(arg)](Graph& gr, std::size_t self) {
                    auto go = gr.grad_out(self);
                    const Tensor& xv = gr.value(ia);
                    double* gi = gr.grad_in(ia);
                    if (!gi) return;
                    for (std::size_t o = 0; o < sp.outer; ++o) {
                      for (std::size_t in = 0; in < sp.inner; ++in) {
                        const std::size_t base = o * sp.n * sp.inner + in;
                        const std::size_t jm = base + arg[o * sp.inner + in] * sp.inner;
                        const double m = std::abs(xv[jm]);
                        double dot = 0.0;
                        for (std::size_t i = 0; i < sp.n; ++i) {
                          const std::size_t k = base + i * sp.inner;
                          gi[k] += go[k] / m;
                          dot += go[k] * xv[k];
                        }
                        const double sign = xv[jm] >= 0.0 ? 1.0 : -1.0;
                        gi[jm] -= sign * dot / (m * m);
                      }
                    }
                  });
}

// Sum over entries of weight_i * BCE(sigmoid(logit_i), target_i), computed in
// the log-sum-exp stable form.
inline Var bce_with_logits_sum(Var logits, std::vector<double> targets,
                               std::vector<double> weights) {
  Graph& g = detail::graph_of(logits);
  const Tensor& z = logits.value();
  if (targets.size() != z.numel() || weights.size() != z.numel()) {
    throw DimensionError("bce_with_logits_sum: target/weight length mismatch");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < z.numel(); ++i) {
    const double v = z[i];
    total += weights[i] * (std::max(v, 0.0) - v * targets[i] + std::log1p(std::exp(-std::abs(v))));
  }
  const std::size_t ia = logits.id;
  return g.record(Tensor::scalar(total), {ia},
                  [ia, t = std::move(targets), w = std::move(weights)](Graph& gr,
                                                                       std::size_t self) {
                    const double go = gr.grad_out(self)[0];
                    const Tensor& zv = gr.value(ia);
                    if (double* gi = gr.grad_in(ia)) {
                      for (std::size_t i = 0; i < t.size(); ++i)
                        gi[i] += go * w[i] * (sigmoid_scalar(zv[i]) - t[i]);
                    }
                  });
}

// Sum over entries of weight_i * smoothL1(pred_i - target_i; beta).
inline Var smooth_l1_sum(Var pred, std::vector<double> targets, std::vector<double> weights,
                         double beta) {
  Graph& g = detail::graph_of(pred);
  const Tensor& p = pred.value();
  if (targets.size() != p.numel() || weights.size() != p.numel()) {
    throw DimensionError("smooth_l1_sum: target/weight length mismatch");
  }
  if (!(beta > 0.0)) throw ContractError("smooth_l1_sum: beta must be > 0");
  double total = 0.0;
  for (std::size_t i = 0; i < p.numel(); ++i) {
    const double d = std::abs(p[i] - targets[i]);
    total += weights[i] * (d < beta ? 0.5 * d * d / beta : d - 0.5 * beta);
  }
  const std::size_t ia = pred.id;
  return g.record(Tensor::scalar(total), {ia},
                  [ia, beta, t = std::move(targets), w = std::move(weights)](Graph& gr,
                                                                             std::size_t self) {
                    const double go = gr.grad_out(self)[0];
                    const Tensor& pv = gr.value(ia);
                    if (double* gi = gr.grad_in(ia)) {
                      for (std::size_t i = 0; i < t.size(); ++i) {
                        const double d = pv[i] - t[i];
                        const double dd = std::abs(d) < beta ? d / beta : (d > 0 ? 1.0 : -1.0);
                        gi[i] += go * w[i] * dd;
                      }
                    }
                  });
}

// Half-open cell rectangle on a feature map.
struct CellRect {
  std::size_t y0, y1, x0, x1;
};

// Integer k x k binning of a feature-space region [y0,y1) x [x0,x1). Bins
// whose computed extent is empty are widened to one cell, clamped to the map.
inline std::vector<CellRect> psroi_bins(const CellRect& roi, std::size_t k, std::size_t height,
                                        std::size_t width) {
  auto split = [](std::size_t lo, std::size_t hi, std::size_t k, std::size_t b,
                  std::size_t extent) {
    const std::size_t len = hi - lo;
    std::size_t s = lo + (b * len) / k;
    std::size_t e = lo + ((b + 1) * len + k - 1) / k;
    if (s >= extent) s = extent - 1;
    if (e > extent) e = extent;
    if (e <= s) e = s + 1;
    return std::pair{s, e};
  };
  std::vector<CellRect> bins;
  bins.reserve(k * k);
  for (std::size_t by = 0; by < k; ++by) {
    const auto [ys, ye] = split(roi.y0, roi.y1, k, by, height);
    for (std::size_t bx = 0; bx < k; ++bx) {
      const auto [xs, xe] = split(roi.x0, roi.x1, k, bx, width);
      bins.push_back(CellRect{ys, ye, xs, xe});
    }
  }
  return bins;
}

// Position-sensitive average pooling. features: [k*k*P, H, W]; channel group
// g (channels g*P .. g*P+P-1) is averaged only over bin g of each region.
// Returns [R, k*k*P] with out[r, g*P + p].
inline Var psroi_pool(Var features, const std::vector<CellRect>& rois, std::size_t k) {
  Graph& g = detail::graph_of(features);
  const Tensor& f = features.value();
  if (f.rank() != 3) throw DimensionError("psroi_pool: features must be [C,H,W]");
  if (k == 0 || f.dim(0) % (k * k) != 0) {
    throw DimensionError("psroi_pool: channel count " + std::to_string(f.dim(0)) +
                         " is not a multiple of k*k");
  }
  const std::size_t channels = f.dim(0), height = f.dim(1), width = f.dim(2);
  const std::size_t per_bin = channels / (k * k);
  std::vector<std::vector<CellRect>> all_bins;
  all_bins.reserve(rois.size());
  for (const CellRect& r : rois) {
    if (r.y1 <= r.y0 || r.x1 <= r.x0 || r.y0 >= height || r.x0 >= width) {
      throw DimensionError("psroi_pool: region outside feature map");
    }
    all_bins.push_back(psroi_bins(r, k, height, width));
  }
  Tensor out(Shape{rois.size(), channels});
  for (std::size_t r = 0; r < rois.size(); ++r) {
    for (std::size_t b = 0; b < k * k; ++b) {
      const CellRect& bin = all_bins[r][b];
      const double inv = 1.0 / static_cast<double>((bin.y1 - bin.y0) * (bin.x1 - bin.x0));
      for (std::size_t p = 0; p < per_bin; ++p) {
        const std::size_t c = b * per_bin + p;
        double acc = 0.0;
        for (std::size_t y = bin.y0; y < bin.y1; ++y)
          for (std::size_t x = bin.x0; x < bin.x1; ++x) acc += f[(c * height + y) * width + x];
        out[r * channels + c] = acc * inv;
      }
    }
  }
  const std::size_t ia = features.id;
  return g.record(std::move(out), {ia},
                  [ia, k, channels, height, width, per_bin,
                   bins = std::move(all_bins)](Graph& gr, std::size_t self) {
                    auto go = gr.grad_out(self);
                    double* gi = gr.grad_in(ia);
                    if (!gi) return;
                    for (std::size_t r = 0; r < bins.size(); ++r) {
                      for (std::size_t b = 0; b < k * k; ++b) {
                        const CellRect& bin = bins[r][b];
                        const double inv =
                            1.0 / static_cast<double>((bin.y1 - bin.y0) * (bin.x1 - bin.x0));
                        for (std::size_t p = 0; p < per_bin; ++p) {
                          const std::size_t c = b * per_bin + p;
                          const double gv = go[r * channels + c] * inv;
                          for (std::size_t y = bin.y0; y < bin.y1; ++y)
                            for (std::size_t x = bin.x0; x < bin.x1; ++x)
                              gi[(c * height + y) * width + x] += gv;
                        }
                      }
                    }
                  });
}

}  // namespace sliceattn::ops
