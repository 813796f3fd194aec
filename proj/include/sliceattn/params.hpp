#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "sliceattn/binary_io.hpp"
#include "sliceattn/error.hpp"
#include "sliceattn/tensor.hpp"

namespace sliceattn {

// Named model parameters in insertion order. Insertion order is the
// checkpoint order and the optimizer's iteration order.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor value) {
    if (index_.contains(name)) throw ContractError("duplicate parameter " + name);
    value.requires_grad = true;
    index_[name] = entries_.size();
    entries_.emplace_back(name, std::move(value));
    return entries_.back().second;
  }

  bool contains(const std::string& name) const { return index_.contains(name); }

  Tensor& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter " + name);
    return entries_[it->second].second;
  }
  const Tensor& get(const std::string& name) const {
    return const_cast<ParamStore*>(this)->get(name);
  }

  std::size_t size() const { return entries_.size(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  std::size_t total_numel() const {
    std::size_t n = 0;
    for (const auto& [_, t] : entries_) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [_, t] : entries_) t.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::map<std::string, std::size_t> index_;
};

inline constexpr char kCheckpointMagic[4] = {'S', 'A', 'T', 'N'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// "SATN", u32 version, then per tensor: u32 name length, name bytes, u32 rank,
// rank x u32 extents, numel x f64. All little-endian; tensors run to EOF.
inline std::string encode_checkpoint(const ParamStore& params) {
  io::ByteWriter w;
  w.raw(std::string_view(kCheckpointMagic, 4));
  w.u32(kCheckpointVersion);
  for (const auto& [name, t] : params) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.raw(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (double v : t.data()) w.f64(v);
  }
  return w.bytes();
}

inline ParamStore decode_checkpoint(std::string_view bytes, const std::string& source) {
  io::ByteReader r(bytes, source);
  if (r.raw(4) != std::string_view(kCheckpointMagic, 4)) {
    throw IoError(source + ": not a SATN checkpoint");
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw IoError(source + ": unsupported checkpoint version " + std::to_string(version));
  }
  ParamStore params;
  while (!r.at_end()) {
    const std::string name = r.raw(r.u32());
    const std::uint32_t rank = r.u32();
    if (rank > kMaxRank) throw IoError(source + ": tensor " + name + " has rank > 4");
    Shape shape(rank);
    for (auto& d : shape) d = r.u32();
    std::vector<double> data(shape_numel(shape));
    for (double& v : data) v = r.f64();
    params.add(name, Tensor(std::move(shape), std::move(data)));
  }
  return params;
}

inline void save_checkpoint(const std::filesystem::path& path, const ParamStore& params) {
  io::write_file(path, encode_checkpoint(params));
}

inline ParamStore load_checkpoint(const std::filesystem::path& path) {
  const std::string bytes = io::read_file(path);
  return decode_checkpoint(bytes, path.string());
}

}  // namespace sliceattn
