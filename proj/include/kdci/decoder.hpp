#pragma once

// U-Net reconstruction network with manual backpropagation.
//
// Layout for depth D and base filter count f:
//   level i < D   : conv3x3 -> act -> conv3x3 -> act -> (skip_i) -> maxpool 2x2
//   bottleneck    : conv3x3 -> act -> conv3x3 -> act            (tapped, f * 2^D channels)
//   level i down  : upconv 2x2/2 -> concat(skip_i) -> conv3x3 -> act -> conv3x3 -> act
//   head          : conv1x1 to C channels, plus the scaled input when residual
// Activations are leaky ReLU. There are no normalization layers.

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <span>
#include <vector>

#include "kdci/common.hpp"

namespace kdci {

struct DecoderConfig {
  int in_channels = 1;
  int width_factor = 1;
  int depth = 3;
  /// 0 selects 8 * width_factor.
  int base_filters = 0;
  std::uint64_t seed = 0;
  bool residual = true;
  /// Constant applied to the decoder input before the first layer.
  double input_scale = 1.0;
  double leaky_slope = 0.1;

  int filters() const { return base_filters > 0 ? base_filters : 8 * width_factor; }
  void validate() const;
};

void to_json(nlohmann::json& j, const DecoderConfig& c);
void from_json(const nlohmann::json& j, DecoderConfig& c);

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Innermost feature map of one sample, tagged as the bottleneck.
using FeatureMap = Image;

struct DecodeResult {
  std::vector<Image> reconstruction;
  std::vector<FeatureMap> bottleneck;
};

/// Intermediate values kept by a forward pass for the backward pass.
struct DecoderTape {
  struct Conv {
    RowMat cols;
    RowMat pre_activation;  // empty for the head
  };
  struct Pool {
    std::vector<int> argmax;
    int height = 0, width = 0;
  };
  int batch = 0;
  std::vector<Conv> convs;
  std::vector<Pool> pools;
  std::vector<RowMat> up_inputs;
  RowMat head_input;
};

class DecoderNet {
 public:
  /// Throws ConfigError if height or width is not divisible by 2^depth.
  DecoderNet(DecoderConfig config, int height, int width);

  const DecoderConfig& config() const { return config_; }
  int height() const { return height_; }
  int width() const { return width_; }
  /// (channels, height, width) of the bottleneck feature map.
  std::array<int, 3> bottleneck_shape() const;

  std::size_t num_parameters() const { return params_.size(); }
  std::span<double> parameters() { return params_; }
  std::span<const double> parameters() const { return params_; }

  DecodeResult decode(std::span<const Image> inputs) const;
  DecodeResult decode(std::span<const Image> inputs, DecoderTape& tape) const;

  /// Backpropagates dL/d(reconstruction) and, when non-empty, dL/d(bottleneck).
  /// Parameter gradients are accumulated into `grad`; returns dL/d(inputs).
  std::vector<Image> backward(const DecoderTape& tape, std::span<const Image> d_reconstruction,
                              std::span<const Image> d_bottleneck, std::span<double> grad) const;

 private:
  struct ConvSpec {
    int in = 0, out = 0, kernel = 3;
    std::size_t w_off = 0, b_off = 0;
  };
  struct UpSpec {
    int in = 0, out = 0;
    std::size_t w_off = 0, b_off = 0;
  };

  DecodeResult run(std::span<const Image> inputs, DecoderTape* tape) const;

  DecoderConfig config_;
  int height_ = 0;
  int width_ = 0;
  std::vector<ConvSpec> convs_;  // execution order; the last one is the 1x1 head
  std::vector<UpSpec> ups_;      // ups_[i] produces level i
  std::vector<double> params_;
};

/// Sum of squared decoder parameters.
double param_l2(const DecoderNet& net);

/// SHA-256 over the raw parameter bytes.
std::string parameter_checksum(std::span<const double> params);

inline constexpr int kCheckpointFormatVersion = 1;

nlohmann::json decoder_to_json(const DecoderNet& net);
DecoderNet decoder_from_json(const nlohmann::json& j);

}  // namespace kdci
