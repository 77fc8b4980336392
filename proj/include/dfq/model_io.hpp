#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>

#include "dfq/model.hpp"

namespace dfq {

// Model file layout (little-endian):
//   "DFQM", u32 version, u32 class_count, u32 x3 input shape, u32 layer count
//   layer table: u32 kind, i32 in, out, kernel, stride, padding, skip_from,
//                u8 has_bias, f32 eps, u32 tensor count, per tensor u32 rank + u32 dims
//   payload:     float32 tensors in declaration order
// Quantized models append a "QTAB" section after the payload (see quant_io).
inline constexpr std::uint32_t kModelVersion = 1;

void write_model(std::ostream& os, const ModelGraph& model);
// Reads exactly one model section; leaves the stream positioned after it.
ModelGraph read_model(std::istream& is);

void save_model(const std::filesystem::path& path, const ModelGraph& model);
// Accepts a plain model file or a quantized model file (the quant table is ignored).
ModelGraph load_model(const std::filesystem::path& path);

}  // namespace dfq
