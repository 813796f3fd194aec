#pragma once

// Seeded generator of CT-like slice decks. Each sample is 3M slices of
// smooth background texture plus Gaussian noise, with lesions (anisotropic
// Gaussian bumps) centered on the key slice and distractor bumps that look
// the same but never touch the key slice. A lesion's box is the tight
// bounding box of the pixels where its key-slice profile is >= half its peak.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "sliceattn/binary_io.hpp"
#include "sliceattn/boxes.hpp"
#include "sliceattn/error.hpp"
#include "sliceattn/pipeline.hpp"
#include "sliceattn/rng.hpp"
#include "sliceattn/tensor.hpp"

namespace sliceattn {

template <typename T>
struct Range {
  T lo{};
  T hi{};

  bool nonempty() const { return lo <= hi; }
  bool contains(T v) const { return lo <= v && v <= hi; }
};

struct PhantomSpec {
  std::size_t image_size = 64;
  std::size_t M = 3;
  Range<std::size_t> lesion_count{1, 1};
  Range<double> lesion_diameter_px{5.0, 24.0};
  Range<std::size_t> lesion_slice_span{1, 3};
  Range<std::size_t> distractor_count{2, 4};
  Range<double> lesion_amplitude{0.35, 0.5};
  Range<double> aspect{0.7, 1.0};
  double noise_sigma = 0.03;
  Range<double> slice_interval_mm{1.0, 5.0};
  std::uint64_t seed = 1;

  void validate() const {
    if (image_size < 8) throw SpecError("image_size must be >= 8");
    if (M == 0 || M % 2 == 0) throw SpecError("M must be a positive odd integer");
    if (!lesion_count.nonempty() || !lesion_diameter_px.nonempty() ||
        !lesion_slice_span.nonempty() || !distractor_count.nonempty() ||
        !lesion_amplitude.nonempty() || !aspect.nonempty() || !slice_interval_mm.nonempty()) {
      throw SpecError("phantom spec ranges must be nonempty (lo <= hi)");
    }
    if (lesion_diameter_px.lo < 2.0) throw SpecError("lesion diameter must be >= 2 px");
    if (lesion_diameter_px.hi + 2.0 > static_cast<double>(image_size)) {
      throw SpecError("lesion diameter " + std::to_string(lesion_diameter_px.hi) +
                      " px does not fit a " + std::to_string(image_size) + " px image");
    }
    if (lesion_slice_span.lo == 0 || lesion_slice_span.hi > 3 * M) {
      throw SpecError("lesion slice span must lie in [1, 3M]");
    }
    if (aspect.lo <= 0.0 || aspect.hi > 1.0) throw SpecError("aspect must lie in (0, 1]");
    if (noise_sigma < 0.0) throw SpecError("noise_sigma must be >= 0");
    if (slice_interval_mm.lo <= 0.0) throw SpecError("slice interval must be > 0");
  }
};

struct LesionInfo {
  double diameter_px = 0;
  std::size_t slice_span = 0;
};

struct Sample {
  SliceDeck deck;
  std::vector<Box> ground_truth;
  std::vector<LesionInfo> lesions;  // parallel to ground_truth

  double slice_interval_mm() const { return deck.slice_interval_mm; }
};

inline std::string volume_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "vol_%05zu", index);
  return buf;
}

namespace detail {

// FWHM = 2 sqrt(2 ln 2) sigma
inline constexpr double kFwhmPerSigma = 2.3548200450309493;

struct Bump {
  double cx, cy, sx, sy, amplitude;
};

inline void add_bump(Tensor& slices, std::size_t slice, const Bump& b) {
  const std::size_t h = slices.dim(1), w = slices.dim(2);
  const double rx = 4.0 * b.sx, ry = 4.0 * b.sy;
  const auto x0 = static_cast<std::size_t>(std::max(0.0, std::floor(b.cx - rx)));
  const auto x1 = static_cast<std::size_t>(std::clamp(std::ceil(b.cx + rx), 0.0, double(w)));
  const auto y0 = static_cast<std::size_t>(std::max(0.0, std::floor(b.cy - ry)));
  const auto y1 = static_cast<std::size_t>(std::clamp(std::ceil(b.cy + ry), 0.0, double(h)));
  for (std::size_t y = y0; y < y1; ++y) {
    const double dy = (static_cast<double>(y) + 0.5 - b.cy) / b.sy;
    for (std::size_t x = x0; x < x1; ++x) {
      const double dx = (static_cast<double>(x) + 0.5 - b.cx) / b.sx;
      slices.at(slice, y, x) += b.amplitude * std::exp(-0.5 * (dx * dx + dy * dy));
    }
  }
}

// Tight half-open box around pixels whose profile is >= half of the peak.
inline Box half_max_box(const Bump& b, std::size_t size) {
  double x1 = 1e300, y1 = 1e300, x2 = -1e300, y2 = -1e300;
  for (std::size_t y = 0; y < size; ++y) {
    const double dy = (static_cast<double>(y) + 0.5 - b.cy) / b.sy;
    for (std::size_t x = 0; x < size; ++x) {
      const double dx = (static_cast<double>(x) + 0.5 - b.cx) / b.sx;
      if (std::exp(-0.5 * (dx * dx + dy * dy)) >= 0.5) {
        x1 = std::min(x1, double(x));
        y1 = std::min(y1, double(y));
        x2 = std::max(x2, double(x) + 1.0);
        y2 = std::max(y2, double(y) + 1.0);
      }
    }
  }
  return Box{x1, y1, x2, y2};
}

// Per-slice scale of a structure spanning `span` slices starting at offset
// `first` relative to the key slice: 1 at offset `peak`, tapering linearly
// to 0.6 at the farther end, 0 outside.
inline double fade(long long offset, long long first, std::size_t span, double peak) {
  const long long last = first + static_cast<long long>(span) - 1;
  if (offset < first || offset > last) return 0.0;
  const double reach = std::max(peak - static_cast<double>(first), static_cast<double>(last) - peak);
  if (reach <= 0.0) return 1.0;
  return 1.0 - 0.4 * std::abs(static_cast<double>(offset) - peak) / reach;
}

}  // namespace detail

// Sample `index` of the stream defined by `spec`; a pure function of both.
inline Sample generate_one(const PhantomSpec& spec, std::size_t index) {
  spec.validate();
  Rng rng(mix_seed(spec.seed, index));
  const std::size_t n = 3 * spec.M;
  const std::size_t size = spec.image_size;
  const long long half = static_cast<long long>(n - 1) / 2;
  const double fsize = static_cast<double>(size);
  Tensor slices(Shape{n, size, size}, 0.0);

  // Background: slowly drifting broad bumps on a flat base.
  struct Blob {
    double cx, cy, sigma, amplitude, drift_x, drift_y;
  };
  std::vector<Blob> blobs;
  for (int i = 0; i < 3; ++i) {
    blobs.push_back(Blob{rng.uniform(0.0, fsize), rng.uniform(0.0, fsize),
                         rng.uniform(0.15, 0.4) * fsize, rng.uniform(-0.05, 0.05),
                         rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)});
  }
  for (std::size_t s = 0; s < n; ++s) {
    const double t = static_cast<double>(s) - static_cast<double>(half);
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) slices.at(s, y, x) = 0.25;
    }
    for (const Blob& b : blobs) {
      detail::add_bump(slices, s,
                       detail::Bump{b.cx + t * b.drift_x, b.cy + t * b.drift_y, b.sigma, b.sigma,
                                    b.amplitude});
    }
  }

  auto draw_bump = [&](double diameter) {
    const double aspect = rng.uniform(spec.aspect.lo, spec.aspect.hi);
    const double s_long = diameter / detail::kFwhmPerSigma;
    const bool wide = rng.uniform() < 0.5;
    const double sx = wide ? s_long : s_long * aspect;
    const double sy = wide ? s_long * aspect : s_long;
    const double margin_x = 0.5 * sx * detail::kFwhmPerSigma + 1.0;
    const double margin_y = 0.5 * sy * detail::kFwhmPerSigma + 1.0;
    return detail::Bump{rng.uniform(margin_x, fsize - margin_x),
                        rng.uniform(margin_y, fsize - margin_y), sx, sy,
                        rng.uniform(spec.lesion_amplitude.lo, spec.lesion_amplitude.hi)};
  };
  // Lesions peak on the key slice (offset 0), so their key-slice profile is
  // the drawn bump; distractors peak at the middle of their own span.
  auto paint = [&](const detail::Bump& b, long long first, std::size_t span, double peak) {
    for (std::size_t s = 0; s < n; ++s) {
      const double f = detail::fade(static_cast<long long>(s) - half, first, span, peak);
      if (f <= 0.0) continue;
      const double shrink = std::sqrt(f);
      detail::add_bump(slices, s,
                       detail::Bump{b.cx, b.cy, b.sx * shrink, b.sy * shrink, b.amplitude * f});
    }
  };

  Sample sample;
  const auto lesion_count =
      static_cast<std::size_t>(rng.integer(static_cast<long long>(spec.lesion_count.lo),
                                           static_cast<long long>(spec.lesion_count.hi)));
  for (std::size_t l = 0; l < lesion_count; ++l) {
    const double diameter = rng.uniform(spec.lesion_diameter_px.lo, spec.lesion_diameter_px.hi);
    const auto span = static_cast<std::size_t>(rng.integer(
        static_cast<long long>(spec.lesion_slice_span.lo),
        static_cast<long long>(spec.lesion_slice_span.hi)));
    // Slices before the key; even spans put the extra slice on a random side.
    long long before = static_cast<long long>(span - 1) / 2;
    if (span % 2 == 0 && rng.uniform() < 0.5) before += 1;
    before = std::min(before, half);
    const detail::Bump b = draw_bump(diameter);
    paint(b, -before, span, 0.0);
    sample.ground_truth.push_back(detail::half_max_box(b, size));
    sample.lesions.push_back(LesionInfo{diameter, span});
  }

  const auto distractors =
      static_cast<std::size_t>(rng.integer(static_cast<long long>(spec.distractor_count.lo),
                                           static_cast<long long>(spec.distractor_count.hi)));
  for (std::size_t d = 0; d < distractors; ++d) {
    const double diameter = rng.uniform(spec.lesion_diameter_px.lo, spec.lesion_diameter_px.hi);
    auto span = static_cast<std::size_t>(rng.integer(
        static_cast<long long>(spec.lesion_slice_span.lo),
        static_cast<long long>(spec.lesion_slice_span.hi)));
    span = std::min<std::size_t>(span, static_cast<std::size_t>(half));
    const detail::Bump b = draw_bump(diameter);
    const long long max_gap = std::max<long long>(1, half - static_cast<long long>(span) + 1);
    const long long gap = rng.integer(1, max_gap);
    const bool above = rng.uniform() < 0.5;
    const long long first = above ? gap : -(gap + static_cast<long long>(span) - 1);
    paint(b, first, span, static_cast<double>(first) + 0.5 * static_cast<double>(span - 1));
  }

  for (double& v : slices.storage()) {
    if (spec.noise_sigma > 0.0) v += spec.noise_sigma * rng.normal();
    // Stored volumes are float32; round here so files and memory agree.
    v = static_cast<double>(static_cast<float>(std::clamp(v, 0.0, 1.0)));
  }
  const double interval = rng.uniform(spec.slice_interval_mm.lo, spec.slice_interval_mm.hi);
  sample.deck = SliceDeck{std::move(slices), static_cast<std::size_t>(half), interval,
                          volume_name(index)};
  return sample;
}

inline std::vector<Sample> generate(const PhantomSpec& spec, std::size_t count,
                                    std::size_t first_index = 0) {
  if (count == 0) throw InputError("generate: count must be >= 1");
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_one(spec, first_index + i));
  return out;
}

// ---------------------------------------------------------------------------
// Strata

enum class StratifyBy { diameter, slice_interval };

// [0,10) "<10", [10,30) "10~30", [30,inf) ">30"
inline std::string diameter_bin(double diameter) {
  if (diameter < 10.0) return "<10";
  if (diameter < 30.0) return "10~30";
  return ">30";
}

// [0,2.5) "<2.5", [2.5,inf) ">2.5"
inline std::string interval_bin(double interval_mm) {
  return interval_mm < 2.5 ? "<2.5" : ">2.5";
}

// Partitions sample indices; a sample's diameter is that of its first lesion.
inline std::map<std::string, std::vector<std::size_t>> stratify(const std::vector<Sample>& samples,
                                                                 StratifyBy criterion) {
  std::map<std::string, std::vector<std::size_t>> bins;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Sample& s = samples[i];
    std::string key;
    if (criterion == StratifyBy::diameter) {
      key = diameter_bin(s.lesions.empty() ? 0.0 : s.lesions.front().diameter_px);
    } else {
      key = interval_bin(s.slice_interval_mm());
    }
    bins[key].push_back(i);
  }
  return bins;
}

// ---------------------------------------------------------------------------
// Files

inline constexpr char kVolumeMagic[4] = {'S', 'V', 'O', 'L'};
inline constexpr std::uint32_t kVolumeVersion = 1;

// "SVOL", u32 version, u32 slices, u32 H, u32 W, f64 slice interval (mm),
// then slices*H*W f32 voxels in row-major order; little-endian throughout.
inline std::string encode_volume(const Tensor& slices, double slice_interval_mm) {
  if (slices.rank() != 3) throw DimensionError("volume must be [S,H,W]");
  io::ByteWriter w;
  w.raw(std::string_view(kVolumeMagic, 4));
  w.u32(kVolumeVersion);
  for (std::size_t a = 0; a < 3; ++a) w.u32(static_cast<std::uint32_t>(slices.dim(a)));
  w.f64(slice_interval_mm);
  for (double v : slices.data()) w.f32(static_cast<float>(v));
  return w.bytes();
}

struct Volume {
  Tensor slices;
  double slice_interval_mm = 0;
};

inline Volume decode_volume(std::string_view bytes, const std::string& source) {
  io::ByteReader r(bytes, source);
  if (r.raw(4) != std::string_view(kVolumeMagic, 4)) throw IoError(source + ": not an SVOL file");
  const std::uint32_t version = r.u32();
  if (version != kVolumeVersion) {
    throw IoError(source + ": unsupported volume version " + std::to_string(version));
  }
  const std::size_t s = r.u32(), h = r.u32(), w = r.u32();
  Volume v;
  v.slice_interval_mm = r.f64();
  std::vector<double> data(s * h * w);
  for (double& x : data) x = static_cast<double>(r.f32());
  if (!r.at_end()) throw IoError(source + ": trailing bytes after voxel data");
  v.slices = Tensor(Shape{s, h, w}, std::move(data));
  return v;
}

inline void save_volume(const std::filesystem::path& path, const Tensor& slices,
                        double slice_interval_mm) {
  io::write_file(path, encode_volume(slices, slice_interval_mm));
}

inline Volume load_volume(const std::filesystem::path& path) {
  return decode_volume(io::read_file(path), path.string());
}

inline constexpr const char* kAnnotationHeader =
    "volume_id,key_slice,x1,y1,x2,y2,diameter,slice_span";

struct AnnotationRow {
  std::string volume_id;
  std::size_t key_slice = 0;
  Box box;
  double diameter = 0;
  std::size_t slice_span = 0;
};

inline std::string format_number(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline std::string encode_annotations(const std::vector<AnnotationRow>& rows) {
  std::ostringstream os;
  os << kAnnotationHeader << '\n';
  for (const AnnotationRow& r : rows) {
    os << r.volume_id << ',' << r.key_slice << ',' << format_number(r.box.x1) << ','
       << format_number(r.box.y1) << ',' << format_number(r.box.x2) << ','
       << format_number(r.box.y2) << ',' << format_number(r.diameter) << ',' << r.slice_span
       << '\n';
  }
  return os.str();
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline std::vector<AnnotationRow> decode_annotations(const std::string& text,
                                                     const std::string& source) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) throw IoError(source + ": empty annotation file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kAnnotationHeader) throw IoError(source + ": unexpected annotation header");
  std::vector<AnnotationRow> rows;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 8) {
      throw IoError(source + ":" + std::to_string(lineno) + ": expected 8 fields");
    }
    try {
      rows.push_back(AnnotationRow{f[0], std::stoul(f[1]),
                                   Box{std::stod(f[2]), std::stod(f[3]), std::stod(f[4]),
                                       std::stod(f[5])},
                                   std::stod(f[6]), std::stoul(f[7])});
    } catch (const std::exception&) {
      throw IoError(source + ":" + std::to_string(lineno) + ": malformed number");
    }
  }
  return rows;
}

inline constexpr const char* kAnnotationFile = "annotations.csv";

// Writes vol_XXXXX.svol files plus annotations.csv into `dir`.
inline void save_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples) {
  io::ensure_directory(dir);
  std::vector<AnnotationRow> rows;
  for (const Sample& s : samples) {
    save_volume(dir / (s.deck.volume_id + ".svol"), s.deck.slices, s.deck.slice_interval_mm);
    for (std::size_t i = 0; i < s.ground_truth.size(); ++i) {
      rows.push_back(AnnotationRow{s.deck.volume_id, s.deck.key_index, s.ground_truth[i],
                                   s.lesions[i].diameter_px, s.lesions[i].slice_span});
    }
  }
  io::write_file(dir / kAnnotationFile, encode_annotations(rows));
}

// Loads every volume listed in annotations.csv, in file-name order, as a
// deck of 3M slices around its key slice.
inline std::vector<Sample> load_dataset(const std::filesystem::path& dir, std::size_t M) {
  if (!std::filesystem::is_directory(dir)) throw IoError("data directory not found: " + dir.string());
  const auto ann_path = dir / kAnnotationFile;
  const auto rows = decode_annotations(io::read_file(ann_path), ann_path.string());
  std::map<std::string, std::vector<const AnnotationRow*>> by_volume;
  for (const AnnotationRow& r : rows) by_volume[r.volume_id].push_back(&r);
  if (by_volume.empty()) throw IoError("no annotated volumes in " + dir.string());
  std::vector<Sample> samples;
  for (const auto& [id, list] : by_volume) {
    const Volume vol = load_volume(dir / (id + ".svol"));
    Sample s;
    s.deck = extract_deck(vol.slices, list.front()->key_slice, M, vol.slice_interval_mm, id);
    for (const AnnotationRow* r : list) {
      s.ground_truth.push_back(r->box);
      s.lesions.push_back(LesionInfo{r->diameter, r->slice_span});
    }
    samples.push_back(std::move(s));
  }
  return samples;
}

}  // namespace sliceattn
