#pragma once

// Flat `key = value` configuration files. Blank lines and lines starting
// with '#' are ignored. Lists are comma separated; ranges are "lo,hi".

#include <charconv>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "sliceattn/binary_io.hpp"
#include "sliceattn/error.hpp"
#include "sliceattn/pipeline.hpp"
#include "sliceattn/synthdata.hpp"
#include "sliceattn/train.hpp"

namespace sliceattn {

using KeyValues = std::map<std::string, std::string>;

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto not_space = [](char c) { return c != ' ' && c != '\t' && c != '\r' && c != '\n'; };
  std::size_t b = 0, e = s.size();
  while (b < e && !not_space(s[b])) ++b;
  while (e > b && !not_space(s[e - 1])) --e;
  return s.substr(b, e - b);
}

inline std::vector<std::string_view> split_list(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = s.find(',', start);
    out.push_back(trim(s.substr(start, comma == std::string_view::npos ? s.npos : comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

template <typename T>
T parse_number(std::string_view text, const std::string& key) {
  T v{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size() || text.empty()) {
    throw InputError("config key '" + key + "': cannot parse '" + std::string(text) + "'");
  }
  return v;
}

inline bool parse_bool(std::string_view text, const std::string& key) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw InputError("config key '" + key + "': expected true or false, got '" + std::string(text) +
                   "'");
}

// Shortest representation that reads back to the same value.
template <typename T>
std::string format_value(T v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

}  // namespace detail

inline KeyValues parse_key_values(std::string_view text, const std::string& source) {
  KeyValues kv;
  std::size_t lineno = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    ++lineno;
    const std::string_view line = detail::trim(text.substr(start, end - start));
    start = end + 1;
    if (line.empty() || line.front() == '#') continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw InputError(source + ":" + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key(detail::trim(line.substr(0, eq)));
    if (key.empty()) throw InputError(source + ":" + std::to_string(lineno) + ": empty key");
    if (kv.count(key)) {
      throw InputError(source + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
    }
    kv[key] = std::string(detail::trim(line.substr(eq + 1)));
  }
  return kv;
}

// Named bindings between config keys and struct fields, used to load and
// dump one config section.
class ConfigFields {
 public:
  template <std::unsigned_integral T>
  void bind(const std::string& key, T& ref) {
    add(key, [&ref, key](std::string_view s) { ref = detail::parse_number<T>(s, key); },
        [&ref] { return detail::format_value(ref); });
  }
  void bind(const std::string& key, double& ref) {
    add(key, [&ref, key](std::string_view s) { ref = detail::parse_number<double>(s, key); },
        [&ref] { return detail::format_value(ref); });
  }
  void bind(const std::string& key, bool& ref) {
    add(key, [&ref, key](std::string_view s) { ref = detail::parse_bool(s, key); },
        [&ref] { return std::string(ref ? "true" : "false"); });
  }
  template <typename T>
  void bind(const std::string& key, std::vector<T>& ref) {
    add(key,
        [&ref, key](std::string_view s) {
          std::vector<T> v;
          if (!s.empty()) {
            for (std::string_view part : detail::split_list(s)) {
              v.push_back(detail::parse_number<T>(part, key));
            }
          }
          ref = std::move(v);
        },
        [&ref] {
          std::string out;
          for (std::size_t i = 0; i < ref.size(); ++i) {
            if (i) out += ", ";
            out += detail::format_value(ref[i]);
          }
          return out;
        });
  }
  template <typename T>
  void bind(const std::string& key, Range<T>& ref) {
    add(key,
        [&ref, key](std::string_view s) {
          const auto parts = detail::split_list(s);
          if (parts.size() != 2) {
            throw InputError("config key '" + key + "': expected 'lo, hi'");
          }
          ref = Range<T>{detail::parse_number<T>(parts[0], key),
                         detail::parse_number<T>(parts[1], key)};
        },
        [&ref] { return detail::format_value(ref.lo) + ", " + detail::format_value(ref.hi); });
  }

  // Applies every key in `kv`; an unknown key is an error.
  void load(const KeyValues& kv, const std::string& source) const {
    for (const auto& [key, value] : kv) {
      auto it = index_.find(key);
      if (it == index_.end()) throw InputError(source + ": unknown config key '" + key + "'");
      fields_[it->second].parse(value);
    }
  }

  std::string dump() const {
    std::string out;
    for (const Field& f : fields_) out += f.key + " = " + f.format() + "\n";
    return out;
  }

  KeyValues snapshot() const {
    KeyValues kv;
    for (const Field& f : fields_) kv[f.key] = f.format();
    return kv;
  }

 private:
  struct Field {
    std::string key;
    std::function<void(std::string_view)> parse;
    std::function<std::string()> format;
  };

  void add(const std::string& key, std::function<void(std::string_view)> parse,
           std::function<std::string()> format) {
    if (index_.count(key)) throw ContractError("config key bound twice: " + key);
    index_[key] = fields_.size();
    fields_.push_back(Field{key, std::move(parse), std::move(format)});
  }

  std::vector<Field> fields_;
  std::map<std::string, std::size_t> index_;
};

inline ConfigFields pipeline_fields(PipelineConfig& c) {
  ConfigFields f;
  f.bind("M", c.M);
  f.bind("backbone_channels", c.backbone_channels);
  f.bind("backbone_strides", c.backbone_strides);
  f.bind("anchor_sizes", c.anchor_sizes);
  f.bind("anchor_ratios", c.anchor_ratios);
  f.bind("rpn_channels", c.rpn_channels);
  f.bind("psroi_bins", c.psroi_bins);
  f.bind("psroi_channels_per_bin", c.psroi_channels_per_bin);
  f.bind("fc_hidden", c.fc_hidden);
  f.bind("nms_iou", c.nms_iou);
  f.bind("rpn_nms_iou", c.rpn_nms_iou);
  f.bind("pre_nms_top", c.pre_nms_top);
  f.bind("post_nms_top", c.post_nms_top);
  f.bind("max_detections", c.max_detections);
  f.bind("score_threshold", c.score_threshold);
  f.bind("rpn_pos_iou", c.rpn_pos_iou);
  f.bind("rpn_neg_iou", c.rpn_neg_iou);
  f.bind("rpn_batch", c.rpn_batch);
  f.bind("rpn_pos_fraction", c.rpn_pos_fraction);
  f.bind("head_pos_iou", c.head_pos_iou);
  f.bind("head_neg_iou", c.head_neg_iou);
  f.bind("head_batch", c.head_batch);
  f.bind("head_pos_fraction", c.head_pos_fraction);
  f.bind("rpn_smooth_l1_beta", c.rpn_smooth_l1_beta);
  f.bind("head_smooth_l1_beta", c.head_smooth_l1_beta);
  f.bind("head_delta_std", c.head_delta_std);
  f.bind("contextual_temperature", c.attention.contextual_temperature);
  f.bind("spatial_temperature", c.attention.spatial_temperature);
  f.bind("enable_contextual", c.attention.enable_contextual);
  f.bind("enable_spatial", c.attention.enable_spatial);
  f.bind("attention_conv_kernel", c.attention.attention_conv_kernel);
  return f;
}

inline ConfigFields train_fields(TrainConfig& c) {
  ConfigFields f;
  f.bind("lr", c.lr);
  f.bind("momentum", c.momentum);
  f.bind("weight_decay", c.weight_decay);
  f.bind("epochs", c.epochs);
  f.bind("lr_drop_epochs", c.lr_drop_epochs);
  f.bind("lr_drop_factor", c.lr_drop_factor);
  f.bind("batch_size", c.batch_size);
  f.bind("seed", c.seed);
  f.bind("init_seed", c.init_seed);
  f.bind("threads", c.threads);
  return f;
}

inline ConfigFields phantom_fields(PhantomSpec& s) {
  ConfigFields f;
  f.bind("image_size", s.image_size);
  f.bind("M", s.M);
  f.bind("lesion_count", s.lesion_count);
  f.bind("lesion_diameter_px", s.lesion_diameter_px);
  f.bind("lesion_slice_span", s.lesion_slice_span);
  f.bind("distractor_count", s.distractor_count);
  f.bind("lesion_amplitude", s.lesion_amplitude);
  f.bind("aspect", s.aspect);
  f.bind("noise_sigma", s.noise_sigma);
  f.bind("slice_interval_mm", s.slice_interval_mm);
  f.bind("seed", s.seed);
  return f;
}

template <typename Config>
Config load_config(const std::filesystem::path& path, ConfigFields (*fields)(Config&),
                   Config config = {}) {
  fields(config).load(parse_key_values(io::read_file(path), path.string()), path.string());
  return config;
}

inline PipelineConfig load_pipeline_config(const std::filesystem::path& path) {
  return load_config<PipelineConfig>(path, pipeline_fields);
}
inline TrainConfig load_train_config(const std::filesystem::path& path) {
  return load_config<TrainConfig>(path, train_fields);
}
inline PhantomSpec load_phantom_spec(const std::filesystem::path& path) {
  return load_config<PhantomSpec>(path, phantom_fields);
}

inline std::string dump_config(PipelineConfig c) { return pipeline_fields(c).dump(); }
inline std::string dump_config(TrainConfig c) { return train_fields(c).dump(); }
inline std::string dump_config(PhantomSpec s) { return phantom_fields(s).dump(); }

inline KeyValues config_snapshot(PipelineConfig c) { return pipeline_fields(c).snapshot(); }
inline KeyValues config_snapshot(TrainConfig c) { return train_fields(c).snapshot(); }
inline KeyValues config_snapshot(PhantomSpec s) { return phantom_fields(s).snapshot(); }

}  // namespace sliceattn
