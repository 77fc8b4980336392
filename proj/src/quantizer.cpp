#include "dfq/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "binary_io.hpp"
#include "dfq/log.hpp"
#include "dfq/model_io.hpp"

namespace dfq {

double compute_delta(double l, double u, int bits) {
  if (!(u > l)) {
    throw ContractError("quantizer range must satisfy u > l (l=" + std::to_string(l) + ", u=" + std::to_string(u) + ")");
  }
  if (bits < kMinBits || bits > kMaxBits) {
    throw ContractError("bit-width " + std::to_string(bits) + " outside [" + std::to_string(kMinBits) + ", " +
                        std::to_string(kMaxBits) + "]");
  }
  return (u - l) / static_cast<double>((1 << bits) - 1);
}

QuantParams::QuantParams(double l, double u, int bits)
    : l_(l), u_(u), bits_(bits), delta_(compute_delta(l, u, bits)) {}

namespace {

inline double code_of(double x, const QuantParams& p) {
  const double q = std::round((x - p.l()) / p.delta());
  return std::clamp(q, 0.0, static_cast<double>(p.max_code()));
}

}  // namespace

template <typename S>
Eigen::ArrayXi quantize(const Array<S>& x, const QuantParams& p) {
  Eigen::ArrayXi codes(x.size());
  for (Index i = 0; i < x.size(); ++i) codes[i] = static_cast<int>(code_of(static_cast<double>(x[i]), p));
  return codes;
}

template <typename S>
Array<S> dequantize(const Eigen::ArrayXi& codes, const QuantParams& p) {
  Array<S> out(codes.size());
  for (Index i = 0; i < codes.size(); ++i) {
    if (codes[i] < 0 || codes[i] > p.max_code()) {
      throw ContractError("dequantize: code " + std::to_string(codes[i]) + " outside [0, " +
                          std::to_string(p.max_code()) + "]");
    }
    out[i] = static_cast<S>(codes[i] * p.delta() + p.l());
  }
  return out;
}

template <typename S>
Array<S> fake_quant_values(const Array<S>& x, const QuantParams& p) {
  Array<S> out(x.size());
  for (Index i = 0; i < x.size(); ++i) out[i] = static_cast<S>(code_of(static_cast<double>(x[i]), p) * p.delta() + p.l());
  return out;
}

template <typename S>
Tensor<S> fake_quant(Tape<S>& tape, const Tensor<S>& x, const QuantParams& p) {
  Tensor<S> out(x.shape(), fake_quant_values(x.data(), p));
  if (x.requires_grad()) {
    tape.record(out, [x, p](const Array<S>& g) {
      const auto& v = x.data();
      Array<S> dx(v.size());
      for (Index i = 0; i < v.size(); ++i) {
        const double xi = static_cast<double>(v[i]);
        dx[i] = (xi >= p.l() && xi <= p.u()) ? g[i] : S(0);
      }
      x.accumulate_grad(dx);
    });
  }
  return out;
}

const char* site_kind_name(SiteKind kind) {
  switch (kind) {
    case SiteKind::Weight: return "weight";
    case SiteKind::PostRelu: return "post-relu";
    case SiteKind::PostResidual: return "post-residual";
  }
  return "unknown";
}

bool QuantModel::calibrated() const {
  return std::all_of(act_quant.begin(), act_quant.end(), [](const auto& kv) { return kv.second.has_value(); });
}

SiteKind QuantModel::act_site_kind(int layer) const {
  return base.layers.at(static_cast<std::size_t>(layer)).kind == LayerKind::Relu ? SiteKind::PostRelu
                                                                                 : SiteKind::PostResidual;
}

void QuantModel::require_calibrated() const {
  for (const auto& [layer, p] : act_quant) {
    if (!p) {
      throw ContractError("quantized model is uncalibrated: activation site " + base.layer_name(layer) +
                          " has no clipping range");
    }
  }
}

std::vector<int> activation_sites(const ModelGraph& model) {
  std::vector<int> sites;
  const auto& layers = model.layers;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].kind == LayerKind::Relu) {
      sites.push_back(static_cast<int>(i));
    } else if (layers[i].kind == LayerKind::ResidualAdd &&
               (i + 1 == layers.size() || layers[i + 1].kind != LayerKind::Relu)) {
      sites.push_back(static_cast<int>(i));
    }
  }
  return sites;
}

QuantModel quantize_weights(const ModelGraph& model, int bits) {
  model.validate();
  compute_delta(0.0, 1.0, bits);  // bit-width check
  QuantModel qm;
  qm.base = model;
  qm.bits = bits;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const Layer& layer = model.layers[i];
    if (layer.kind != LayerKind::Conv2d && layer.kind != LayerKind::Linear) continue;
    double l = layer.weight.minCoeff();
    double u = layer.weight.maxCoeff();
    if (!(u > l)) {
      const double band = std::numeric_limits<float>::epsilon() * std::max(1.0, std::abs(l));
      log_warning(model.layer_name(static_cast<int>(i)) + ": constant weight tensor, widening range by " +
                  std::to_string(band));
      l -= band;
      u += band;
    }
    qm.weight_quant.emplace(static_cast<int>(i), QuantParams(l, u, bits));
  }
  for (int site : activation_sites(model)) qm.act_quant.emplace(site, std::nullopt);
  return qm;
}

QuantModel unquantized(const ModelGraph& model) {
  QuantModel qm = quantize_weights(model, kMaxBits);
  qm.enabled = false;
  return qm;
}

template <typename S>
ForwardResult<S> quantized_forward(Tape<S>& tape, const QuantModel& qm, const Parameters<S>& params,
                                   const Tensor<S>& batch, const QuantForwardOptions& opts) {
  if (qm.enabled && !opts.calibration_mode) qm.require_calibrated();
  ForwardOptions fwd;
  fwd.mode = opts.mode;
  fwd.probes = opts.probes;
  fwd.collect_bn_stats = opts.collect_bn_stats;
  fwd.bn_override = opts.bn_override;
  if (!qm.enabled) return model_forward(tape, qm.base, params, batch, fwd);

  ForwardHooks<S> hooks;
  hooks.weight = [&qm](Tape<S>& t, int layer, const Tensor<S>& w) {
    const auto it = qm.weight_quant.find(layer);
    return it == qm.weight_quant.end() ? w : fake_quant(t, w, it->second);
  };
  hooks.activation = [&qm, &opts](Tape<S>& t, int layer, const Tensor<S>& out) {
    const auto it = qm.act_quant.find(layer);
    if (it == qm.act_quant.end() || opts.skip_activation_quant) return out;
    if (!it->second) {
      if (opts.calibration_mode) return out;
      throw ContractError("uncalibrated activation site " + qm.base.layer_name(layer));
    }
    return fake_quant(t, out, *it->second);
  };
  return model_forward(tape, qm.base, params, batch, fwd, &hooks);
}

template <typename S>
ForwardResult<S> quantized_forward(Tape<S>& tape, const QuantModel& qm, const Tensor<S>& batch,
                                   const QuantForwardOptions& opts) {
  return quantized_forward(tape, qm, bind_parameters<S>(qm.base, false), batch, opts);
}

Tensor<float> quantized_logits(const QuantModel& qm, const Tensor<float>& batch) {
  Tape<float> tape;
  return quantized_forward(tape, qm, batch).logits;
}

namespace {
constexpr std::uint32_t kQuantTableVersion = kModelVersion;
}

void write_quant_model(std::ostream& os, const QuantModel& qm) {
  write_model(os, qm.base);
  detail::BinaryWriter w(os);
  w.tag("QTAB");
  w.u32(kQuantTableVersion);
  w.u32(static_cast<std::uint32_t>(qm.bits));
  w.u8(qm.enabled ? 1 : 0);
  w.u32(static_cast<std::uint32_t>(qm.weight_quant.size() + qm.act_quant.size()));
  auto entry = [&w](int layer, SiteKind kind, const std::optional<QuantParams>& p) {
    w.u32(static_cast<std::uint32_t>(layer));
    w.u8(static_cast<std::uint8_t>(kind));
    w.u8(p ? 1 : 0);
    w.f64(p ? p->l() : 0.0);
    w.f64(p ? p->u() : 0.0);
    w.u32(static_cast<std::uint32_t>(p ? p->bits() : 0));
  };
  for (const auto& [layer, p] : qm.weight_quant) entry(layer, SiteKind::Weight, p);
  for (const auto& [layer, p] : qm.act_quant) entry(layer, qm.act_site_kind(layer), p);
}

QuantModel read_quant_model(std::istream& is) {
  QuantModel qm;
  qm.base = read_model(is);
  detail::BinaryReader r(is, "quant table");
  if (r.at_end()) throw FormatError(FormatError::Kind::Malformed, "model file has no quant table (QTAB section)");
  if (!detail::tag_equals(r.tag(), "QTAB")) {
    throw FormatError(FormatError::Kind::BadMagic, "quant table: bad section tag (expected QTAB)");
  }
  const std::uint32_t version = r.u32();
  if (version != kQuantTableVersion) {
    throw FormatError(FormatError::Kind::VersionMismatch, "quant table: unsupported version " + std::to_string(version));
  }
  qm.bits = static_cast<int>(r.u32());
  qm.enabled = r.u8() != 0;
  const std::uint32_t count = r.u32();
  if (count > qm.base.layers.size() * 2) throw FormatError(FormatError::Kind::Malformed, "quant table: implausible entry count");

  const std::vector<int> sites = activation_sites(qm.base);
  for (std::uint32_t e = 0; e < count; ++e) {
    const int layer = static_cast<int>(r.u32());
    const std::uint8_t kind = r.u8();
    const bool set = r.u8() != 0;
    const double l = r.f64();
    const double u = r.f64();
    const int bits = static_cast<int>(r.u32());
    if (layer < 0 || static_cast<std::size_t>(layer) >= qm.base.layers.size() || kind > 2) {
      throw FormatError(FormatError::Kind::Malformed, "quant table: entry " + std::to_string(e) + " is malformed");
    }
    std::optional<QuantParams> p;
    if (set) {
      try {
        p = QuantParams(l, u, bits);
      } catch (const ContractError& err) {
        throw FormatError(FormatError::Kind::Malformed, std::string("quant table: ") + err.what());
      }
    }
    const LayerKind lk = qm.base.layers[static_cast<std::size_t>(layer)].kind;
    if (static_cast<SiteKind>(kind) == SiteKind::Weight) {
      if ((lk != LayerKind::Conv2d && lk != LayerKind::Linear) || !p) {
        throw FormatError(FormatError::Kind::ShapeMismatch, "quant table: weight entry for " + qm.base.layer_name(layer));
      }
      qm.weight_quant.emplace(layer, *p);
    } else {
      if (std::find(sites.begin(), sites.end(), layer) == sites.end()) {
        throw FormatError(FormatError::Kind::ShapeMismatch,
                          "quant table: " + qm.base.layer_name(layer) + " is not an activation site");
      }
      qm.act_quant.emplace(layer, p);
    }
  }
  return qm;
}

void save_quant_model(const std::filesystem::path& path, const QuantModel& qm) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError(FormatError::Kind::Io, "cannot open " + path.string() + " for writing");
  write_quant_model(os, qm);
}

QuantModel load_quant_model(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError(FormatError::Kind::Io, "cannot open " + path.string());
  QuantModel qm = read_quant_model(is);
  detail::BinaryReader r(is, "quant model");
  if (!r.at_end()) throw FormatError(FormatError::Kind::Malformed, "quant model: trailing data after quant table");
  return qm;
}

#define DFQ_INSTANTIATE_QUANT(S)                                                                       \
  template Eigen::ArrayXi quantize(const Array<S>&, const QuantParams&);                              \
  template Array<S> dequantize(const Eigen::ArrayXi&, const QuantParams&);                            \
  template Array<S> fake_quant_values(const Array<S>&, const QuantParams&);                           \
  template Tensor<S> fake_quant(Tape<S>&, const Tensor<S>&, const QuantParams&);                      \
  template ForwardResult<S> quantized_forward(Tape<S>&, const QuantModel&, const Parameters<S>&,      \
                                              const Tensor<S>&, const QuantForwardOptions&);          \
  template ForwardResult<S> quantized_forward(Tape<S>&, const QuantModel&, const Tensor<S>&,          \
                                              const QuantForwardOptions&);

DFQ_INSTANTIATE_QUANT(float)
DFQ_INSTANTIATE_QUANT(double)

#undef DFQ_INSTANTIATE_QUANT

}  // namespace dfq
