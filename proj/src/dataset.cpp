#include "dfq/dataset.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include "binary_io.hpp"
#include "dfq/error.hpp"

namespace dfq {

Tensor<float> Dataset::batch(Index begin, Index count) const {
  if (begin < 0 || count <= 0 || begin + count > size()) {
    throw ContractError("dataset batch [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                        ") outside dataset of size " + std::to_string(size()));
  }
  const Index m = sample_numel();
  return Tensor<float>({count, sample_shape[0], sample_shape[1], sample_shape[2]},
                       images.segment(begin * m, count * m));
}

std::span<const int> Dataset::batch_labels(Index begin, Index count) const {
  return std::span<const int>(labels).subspan(static_cast<std::size_t>(begin), static_cast<std::size_t>(count));
}

Tensor<float> Dataset::gather(std::span<const Index> indices) const {
  const Index m = sample_numel();
  Eigen::ArrayXf data(static_cast<Index>(indices.size()) * m);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    data.segment(static_cast<Index>(i) * m, m) = images.segment(indices[i] * m, m);
  }
  return Tensor<float>({static_cast<Index>(indices.size()), sample_shape[0], sample_shape[1], sample_shape[2]},
                       std::move(data));
}

namespace {

// Pattern intensity in [0,1] at pixel (y,x) for a normalized coordinate frame.
struct PatternParams {
  double cx, cy;    // center, pixels
  double size;      // radius / half-width, pixels
  double freq;      // cycles per image
  double phase;
  int band;         // frequency band for class ids >= 10
};

double pattern_value(int pattern, const PatternParams& p, double y, double x, double extent) {
  using std::numbers::pi;
  const double f = p.freq * (1.0 + 0.5 * p.band) * 2.0 * pi / extent;
  const double dy = y - p.cy, dx = x - p.cx;
  const double r = std::sqrt(dx * dx + dy * dy);
  switch (pattern) {
    case 0: return 0.5 + 0.5 * std::sin(f * y + p.phase);
    case 1: return 0.5 + 0.5 * std::sin(f * x + p.phase);
    case 2: return 0.5 + 0.5 * std::sin(f * (x + y) / std::numbers::sqrt2 + p.phase);
    case 3: return 0.5 + 0.5 * std::sin(f * (x - y) / std::numbers::sqrt2 + p.phase);
    case 4: {
      const double cell = extent / (2.0 * p.freq * (1.0 + 0.5 * p.band));
      const long a = static_cast<long>(std::floor((x + p.phase) / cell));
      const long b = static_cast<long>(std::floor((y + p.phase) / cell));
      return ((a + b) & 1) ? 1.0 : 0.0;
    }
    case 5: return r <= p.size ? 1.0 : 0.0;
    case 6: return std::abs(r - p.size) <= 0.3 * p.size ? 1.0 : 0.0;
    case 7: return (std::abs(dx) <= p.size && std::abs(dy) <= p.size) ? 1.0 : 0.0;
    case 8: {
      const double arm = 0.3 * p.size;
      const bool on = (std::abs(dx) <= arm && std::abs(dy) <= 1.4 * p.size) ||
                      (std::abs(dy) <= arm && std::abs(dx) <= 1.4 * p.size);
      return on ? 1.0 : 0.0;
    }
    default: {
      const double arm = 0.42 * p.size;
      const bool on = (std::abs(dx - dy) <= arm || std::abs(dx + dy) <= arm) && std::abs(dx) <= 1.2 * p.size &&
                      std::abs(dy) <= 1.2 * p.size;
      return on ? 1.0 : 0.0;
    }
  }
}

}  // namespace

Dataset make_desk_dataset(int classes, int samples_per_class, std::uint64_t seed) {
  if (classes < 2) throw ContractError("make_desk_dataset: need at least 2 classes, got " + std::to_string(classes));
  if (classes > 65535) throw ContractError("make_desk_dataset: class count exceeds u16 labels");
  if (samples_per_class < 1) throw ContractError("make_desk_dataset: samples_per_class must be positive");

  constexpr int C = 3, H = 32, W = 32;
  Dataset ds;
  ds.sample_shape = {C, H, W};
  ds.class_count = classes;
  const Index count = static_cast<Index>(classes) * samples_per_class;
  const Index m = ds.sample_numel();
  ds.images.resize(count * m);
  ds.labels.resize(static_cast<std::size_t>(count));

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  // Overall intensity scale; signal and noise both scale with it.
  constexpr double kScale = 2.5;

  for (Index i = 0; i < count; ++i) {
    const int label = static_cast<int>(i % classes);
    ds.labels[static_cast<std::size_t>(i)] = label;
    PatternParams p{};
    p.cx = H * (0.3 + 0.4 * unit(rng));
    p.cy = W * (0.3 + 0.4 * unit(rng));
    p.size = 5.0 + 5.0 * unit(rng);
    p.freq = 2.0 + 1.5 * unit(rng);
    p.phase = 2.0 * std::numbers::pi * unit(rng);
    p.band = label / 10;
    std::array<double, C> color{};
    for (double& c : color) c = (unit(rng) < 0.5 ? -1.0 : 1.0) * (0.5 + 0.7 * unit(rng));
    const double offset = 0.4 * (unit(rng) - 0.5);
    float* dst = ds.images.data() + i * m;
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        const double v = 2.0 * pattern_value(label % 10, p, y, x, H) - 1.0;
        for (int c = 0; c < C; ++c) {
          dst[(c * H + y) * W + x] = static_cast<float>(kScale * (color[static_cast<std::size_t>(c)] * v + offset + noise(rng)));
        }
      }
    }
  }
  return ds;
}

void write_dataset(std::ostream& os, const Dataset& ds) {
  if (ds.class_count < 1 || ds.class_count > 65536) throw ContractError("dataset class count does not fit u16 labels");
  if (ds.images.size() != ds.size() * ds.sample_numel()) throw ShapeError("dataset image buffer length mismatch");
  detail::BinaryWriter w(os);
  w.tag("DFQD");
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(ds.size()));
  w.u32(static_cast<std::uint32_t>(ds.class_count));
  for (int e : ds.sample_shape) w.u32(static_cast<std::uint32_t>(e));
  const Index m = ds.sample_numel();
  for (Index i = 0; i < ds.size(); ++i) {
    w.u16(static_cast<std::uint16_t>(ds.labels[static_cast<std::size_t>(i)]));
    w.f32s(ds.images.data() + i * m, static_cast<std::size_t>(m));
  }
}

Dataset read_dataset(std::istream& is) {
  detail::BinaryReader r(is, "dataset");
  if (!detail::tag_equals(r.tag(), "DFQD")) throw FormatError(FormatError::Kind::BadMagic, "dataset: bad magic (expected DFQD)");
  const std::uint32_t version = r.u32();
  if (version != kDatasetVersion) {
    throw FormatError(FormatError::Kind::VersionMismatch, "dataset: unsupported version " + std::to_string(version));
  }
  Dataset ds;
  const std::uint32_t count = r.u32();
  ds.class_count = static_cast<int>(r.u32());
  for (int& e : ds.sample_shape) e = static_cast<int>(r.u32());
  for (int e : ds.sample_shape) {
    if (e <= 0) throw FormatError(FormatError::Kind::ShapeMismatch, "dataset: non-positive sample extent");
  }
  if (ds.class_count < 1) throw FormatError(FormatError::Kind::Malformed, "dataset: class count must be positive");
  const Index m = ds.sample_numel();
  ds.images.resize(static_cast<Index>(count) * m);
  ds.labels.resize(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const int label = r.u16();
    if (label >= ds.class_count) {
      throw FormatError(FormatError::Kind::Malformed, "dataset: label " + std::to_string(label) + " out of range");
    }
    ds.labels[i] = label;
    r.f32s(ds.images.data() + static_cast<Index>(i) * m, static_cast<std::size_t>(m));
  }
  if (!r.at_end()) throw FormatError(FormatError::Kind::ShapeMismatch, "dataset: trailing bytes after declared samples");
  return ds;
}

void save_dataset(const std::filesystem::path& path, const Dataset& ds) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError(FormatError::Kind::Io, "cannot open " + path.string() + " for writing");
  write_dataset(os, ds);
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError(FormatError::Kind::Io, "cannot open " + path.string());
  return read_dataset(is);
}

}  // namespace dfq
