#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

#include "dfq/tensor.hpp"

namespace dfq {

// Labeled image set in NCHW order.
struct Dataset {
  std::array<int, 3> sample_shape{};  // channels, height, width
  int class_count = 0;
  Eigen::ArrayXf images;
  std::vector<int> labels;

  Index size() const noexcept { return static_cast<Index>(labels.size()); }
  Index sample_numel() const noexcept {
    return static_cast<Index>(sample_shape[0]) * sample_shape[1] * sample_shape[2];
  }
  Tensor<float> batch(Index begin, Index count) const;
  std::span<const int> batch_labels(Index begin, Index count) const;
  // Gathers an arbitrary index set (e.g. a shuffled minibatch).
  Tensor<float> gather(std::span<const Index> indices) const;
};

// Procedural 10-pattern image set (gratings, checkerboard, filled and outlined shapes)
// with random placement, color and gaussian noise. classes >= 2.
Dataset make_desk_dataset(int classes, int samples_per_class, std::uint64_t seed);

// Raw-binary format: "DFQD", u32 version, u32 count, u32 class_count,
// u32 x3 sample shape, then per sample a u16 label and float32 values.
inline constexpr std::uint32_t kDatasetVersion = 1;

void write_dataset(std::ostream& os, const Dataset& ds);
Dataset read_dataset(std::istream& is);
void save_dataset(const std::filesystem::path& path, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace dfq
