#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <vector>

#include "dfq/model.hpp"
#include "dfq/tensor.hpp"

namespace dfq {

inline constexpr int kMinBits = 2;
inline constexpr int kMaxBits = 8;

// Uniform quantizer over [l, u] with 2^b codes; delta is derived and never set
// independently.
class QuantParams {
 public:
  QuantParams() = default;
  // Throws ContractError unless u > l and kMinBits <= b <= kMaxBits.
  QuantParams(double l, double u, int bits);

  double l() const noexcept { return l_; }
  double u() const noexcept { return u_; }
  int bits() const noexcept { return bits_; }
  double delta() const noexcept { return delta_; }
  std::int32_t max_code() const noexcept { return (std::int32_t{1} << bits_) - 1; }

 private:
  double l_ = 0.0;
  double u_ = 1.0;
  int bits_ = 8;
  double delta_ = 1.0 / 255.0;
};

double compute_delta(double l, double u, int bits);

// clamp(round((x - l) / delta), 0, 2^b - 1), rounding half away from zero.
template <typename S>
Eigen::ArrayXi quantize(const Array<S>& x, const QuantParams& p);
// q * delta + l. Throws ContractError for codes outside [0, 2^b - 1].
template <typename S>
Array<S> dequantize(const Eigen::ArrayXi& codes, const QuantParams& p);
// dequantize(quantize(x)) without materializing the codes.
template <typename S>
Array<S> fake_quant_values(const Array<S>& x, const QuantParams& p);

// Differentiable fake quantization with a straight-through gradient inside
// [l, u] and zero gradient outside.
template <typename S>
Tensor<S> fake_quant(Tape<S>& tape, const Tensor<S>& x, const QuantParams& p);

enum class SiteKind : std::uint8_t { Weight = 0, PostRelu = 1, PostResidual = 2 };

const char* site_kind_name(SiteKind kind);

struct QuantModel {
  ModelGraph base;
  int bits = 8;
  // When false every quantizer is bypassed (full-precision control runs).
  bool enabled = true;
  std::map<int, QuantParams> weight_quant;
  std::map<int, std::optional<QuantParams>> act_quant;

  bool calibrated() const;
  SiteKind act_site_kind(int layer) const;
  // Throws ContractError naming the first unset site.
  void require_calibrated() const;
};

// Layer ids that carry an activation quantizer: every ReLU output, plus
// residual adds not immediately followed by a ReLU.
std::vector<int> activation_sites(const ModelGraph& model);

// Per-tensor min/max weight quantizers on every conv and linear layer;
// activation sites are created unset.
QuantModel quantize_weights(const ModelGraph& model, int bits);

// Same layout as quantize_weights but with quantization bypassed.
QuantModel unquantized(const ModelGraph& model);

struct QuantForwardOptions {
  BNMode mode = BNMode::EvalStats;
  std::vector<int> probes;
  bool collect_bn_stats = false;
  const std::vector<BNStats>* bn_override = nullptr;
  // Pass activations through unset sites instead of rejecting them.
  bool calibration_mode = false;
  // Do not quantize activations even where a range is set.
  bool skip_activation_quant = false;
};

template <typename S>
ForwardResult<S> quantized_forward(Tape<S>& tape, const QuantModel& qm, const Parameters<S>& params,
                                   const Tensor<S>& batch, const QuantForwardOptions& opts = {});

template <typename S>
ForwardResult<S> quantized_forward(Tape<S>& tape, const QuantModel& qm, const Tensor<S>& batch,
                                   const QuantForwardOptions& opts = {});

// Gradient-free eval-stats logits of a calibrated model.
Tensor<float> quantized_logits(const QuantModel& qm, const Tensor<float>& batch);

// Base model file followed by a quant table:
//   "QTAB", u32 version, u32 bits, u8 enabled, u32 entry count,
//   per entry u32 layer, u8 site kind, u8 set, f64 l, f64 u, u32 b
void write_quant_model(std::ostream& os, const QuantModel& qm);
QuantModel read_quant_model(std::istream& is);
void save_quant_model(const std::filesystem::path& path, const QuantModel& qm);
QuantModel load_quant_model(const std::filesystem::path& path);

}  // namespace dfq
