#include "dfq/model_io.hpp"

#include <fstream>

#include "binary_io.hpp"
#include "dfq/error.hpp"

namespace dfq {

namespace {

// Tensors a layer carries, in payload order.
std::vector<std::pair<Shape, Eigen::ArrayXf*>> layer_tensors(Layer& l) {
  std::vector<std::pair<Shape, Eigen::ArrayXf*>> out;
  switch (l.kind) {
    case LayerKind::Conv2d:
    case LayerKind::Linear:
      out.emplace_back(l.weight_shape(), &l.weight);
      if (l.has_bias) out.emplace_back(Shape{l.out_channels}, &l.bias);
      break;
    case LayerKind::BatchNorm2d:
      out.emplace_back(Shape{l.out_channels}, &l.weight);
      out.emplace_back(Shape{l.out_channels}, &l.bias);
      out.emplace_back(Shape{l.out_channels}, &l.stats.mean);
      out.emplace_back(Shape{l.out_channels}, &l.stats.std);
      break;
    default:
      break;
  }
  return out;
}

bool known_kind(std::uint32_t k) { return k >= 1 && k <= 8; }

}  // namespace

void write_model(std::ostream& os, const ModelGraph& model) {
  model.validate();
  ModelGraph copy = model;
  detail::BinaryWriter w(os);
  w.tag("DFQM");
  w.u32(kModelVersion);
  w.u32(static_cast<std::uint32_t>(copy.class_count));
  for (int e : copy.input_shape) w.u32(static_cast<std::uint32_t>(e));
  w.u32(static_cast<std::uint32_t>(copy.layers.size()));
  for (Layer& l : copy.layers) {
    w.u32(static_cast<std::uint32_t>(l.kind));
    for (int v : {l.in_channels, l.out_channels, l.kernel, l.stride, l.padding, l.skip_from}) {
      w.u32(static_cast<std::uint32_t>(v));
    }
    w.u8(l.has_bias ? 1 : 0);
    w.f32(l.eps);
    const auto tensors = layer_tensors(l);
    w.u32(static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [shape, data] : tensors) {
      w.u32(static_cast<std::uint32_t>(shape.size()));
      for (Index e : shape) w.u32(static_cast<std::uint32_t>(e));
    }
  }
  for (Layer& l : copy.layers) {
    for (const auto& [shape, data] : layer_tensors(l)) w.f32s(data->data(), static_cast<std::size_t>(data->size()));
  }
}

ModelGraph read_model(std::istream& is) {
  detail::BinaryReader r(is, "model");
  if (!detail::tag_equals(r.tag(), "DFQM")) {
    throw FormatError(FormatError::Kind::BadMagic, "model: bad magic (expected DFQM)");
  }
  const std::uint32_t version = r.u32();
  if (version != kModelVersion) {
    throw FormatError(FormatError::Kind::VersionMismatch,
                      "model: unsupported version " + std::to_string(version) + " (expected " +
                          std::to_string(kModelVersion) + ")");
  }
  ModelGraph model;
  model.class_count = static_cast<int>(r.u32());
  for (int& e : model.input_shape) e = static_cast<int>(r.u32());
  const std::uint32_t count = r.u32();
  if (count > 100000) throw FormatError(FormatError::Kind::Malformed, "model: implausible layer count");
  model.layers.resize(count);

  std::vector<std::vector<Shape>> declared(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Layer& l = model.layers[i];
    const std::uint32_t kind = r.u32();
    if (!known_kind(kind)) {
      throw FormatError(FormatError::Kind::Malformed, "model: layer " + std::to_string(i) + " has unknown kind " +
                                                          std::to_string(kind));
    }
    l.kind = static_cast<LayerKind>(kind);
    for (int* v : {&l.in_channels, &l.out_channels, &l.kernel, &l.stride, &l.padding, &l.skip_from}) {
      *v = static_cast<int>(r.u32());
    }
    l.has_bias = r.u8() != 0;
    l.eps = r.f32();
    const std::uint32_t tensors = r.u32();
    if (tensors > 8) throw FormatError(FormatError::Kind::Malformed, "model: implausible tensor count");
    for (std::uint32_t t = 0; t < tensors; ++t) {
      const std::uint32_t rank = r.u32();
      if (rank > 8) throw FormatError(FormatError::Kind::Malformed, "model: implausible tensor rank");
      Shape s(rank);
      for (Index& e : s) e = static_cast<Index>(r.u32());
      declared[i].push_back(std::move(s));
    }
  }

  for (std::uint32_t i = 0; i < count; ++i) {
    Layer& l = model.layers[i];
    // Size the buffers from hyperparameters, then check the header agrees.
    if (l.kind == LayerKind::Conv2d || l.kind == LayerKind::Linear || l.kind == LayerKind::BatchNorm2d) {
      if (l.out_channels <= 0 || l.out_channels > (1 << 20) || l.in_channels < 0 || l.in_channels > (1 << 20) ||
          l.kernel < 0 || l.kernel > 64) {
        throw FormatError(FormatError::Kind::Malformed, "model: layer " + std::to_string(i) + " hyperparameters out of range");
      }
      l.weight.resize(shape_numel(l.weight_shape()));
      if (l.has_bias) l.bias.resize(l.out_channels);
      if (l.kind == LayerKind::BatchNorm2d) {
        l.stats.mean.resize(l.out_channels);
        l.stats.std.resize(l.out_channels);
      }
    }
    auto tensors = layer_tensors(l);
    if (tensors.size() != declared[i].size()) {
      throw FormatError(FormatError::Kind::ShapeMismatch,
                        "model: layer " + std::to_string(i) + " declares " + std::to_string(declared[i].size()) +
                            " tensors, hyperparameters imply " + std::to_string(tensors.size()));
    }
    for (std::size_t t = 0; t < tensors.size(); ++t) {
      if (tensors[t].first != declared[i][t]) {
        throw FormatError(FormatError::Kind::ShapeMismatch,
                          "model: layer " + std::to_string(i) + " tensor " + std::to_string(t) + " header shape " +
                              shape_string(declared[i][t]) + " vs hyperparameters " + shape_string(tensors[t].first));
      }
    }
  }
  for (Layer& l : model.layers) {
    for (const auto& [shape, data] : layer_tensors(l)) r.f32s(data->data(), static_cast<std::size_t>(data->size()));
  }
  try {
    model.validate();
  } catch (const Error& e) {
    throw FormatError(FormatError::Kind::ShapeMismatch, std::string("model: invalid layer table: ") + e.what());
  }
  return model;
}

void save_model(const std::filesystem::path& path, const ModelGraph& model) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError(FormatError::Kind::Io, "cannot open " + path.string() + " for writing");
  write_model(os, model);
}

ModelGraph load_model(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError(FormatError::Kind::Io, "cannot open " + path.string());
  ModelGraph model = read_model(is);
  detail::BinaryReader r(is, "model");
  if (!r.at_end() && !detail::tag_equals(r.tag(), "QTAB")) {
    throw FormatError(FormatError::Kind::Malformed, "model: unexpected trailing data after payload");
  }
  return model;
}

}  // namespace dfq
