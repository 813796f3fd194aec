#pragma once

// Text and image renderings of attention fields.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "sliceattn/config.hpp"
#include "sliceattn/error.hpp"
#include "sliceattn/tensor.hpp"

namespace sliceattn {

namespace detail {

inline void check_field(const Tensor& field, const std::optional<std::size_t>& channel) {
  if (field.rank() != 4) throw DimensionError("attention field must be [M,D,H,W]");
  if (channel && *channel >= field.dim(1)) {
    throw InputError("channel " + std::to_string(*channel) + " out of range [0," +
                     std::to_string(field.dim(1)) + ")");
  }
}

// Field value at (i, y, x): the given channel, or the mean over channels.
inline double field_value(const Tensor& field, std::size_t i, std::size_t y, std::size_t x,
                          const std::optional<std::size_t>& channel) {
  if (channel) return field.at(i, *channel, y, x);
  double s = 0.0;
  for (std::size_t d = 0; d < field.dim(1); ++d) s += field.at(i, d, y, x);
  return s / static_cast<double>(field.dim(1));
}

}  // namespace detail

// One row per image, one column per feature position (y, x) in row-major
// order. Header: image,y0_x0,y0_x1,...
inline std::string contextual_csv(const Tensor& field,
                                  const std::optional<std::size_t>& channel = std::nullopt) {
  detail::check_field(field, channel);
  const std::size_t M = field.dim(0), H = field.dim(2), W = field.dim(3);
  std::string out = "image";
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) out += ",y" + std::to_string(y) + "_x" + std::to_string(x);
  out += '\n';
  for (std::size_t i = 0; i < M; ++i) {
    out += std::to_string(i);
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        out += ',' + detail::format_value(detail::field_value(field, i, y, x, channel));
      }
    out += '\n';
  }
  return out;
}

// Binary 8-bit PGM (P5) of image `i`'s map, scaled so its maximum is 255.
inline std::string spatial_pgm(const Tensor& field, std::size_t image,
                               const std::optional<std::size_t>& channel = std::nullopt) {
  detail::check_field(field, channel);
  if (image >= field.dim(0)) throw InputError("image index out of range");
  const std::size_t H = field.dim(2), W = field.dim(3);
  std::vector<double> v;
  v.reserve(H * W);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) v.push_back(detail::field_value(field, image, y, x, channel));
  const double peak = *std::max_element(v.begin(), v.end());
  std::string out = "P5\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
  for (double x : v) {
    const double scaled = peak > 0.0 ? std::round(255.0 * x / peak) : 0.0;
    out += static_cast<char>(static_cast<unsigned char>(std::clamp(scaled, 0.0, 255.0)));
  }
  return out;
}

}  // namespace sliceattn
