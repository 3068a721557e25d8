#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "setgen/deform.hpp"
#include "setgen/tensor.hpp"

namespace setgen {

using Rng = std::mt19937_64;

struct ConvLayer {
  Tensor weight;
  Tensor bias;
};

/// Convolutional VAE without a linear bottleneck: E stride-2 conv layers
/// halve every spatial axis, the last layer's channels split into mu and
/// log-variance halves, and E stride-2 transposed convs plus a sigmoid conv
/// map the spatial latent back to an image.
struct VaeConfig {
  Index spatial_rank = 2;
  Index image_channels = 1;
  std::vector<Index> encoder_widths{32, 32, 32, 64};
  std::vector<Index> decoder_widths{32, 32, 32, 32};
  double slope = 0.2;

  Index levels() const { return static_cast<Index>(encoder_widths.size()); }
  Index latent_channels() const { return encoder_widths.back() / 2; }
  /// Latent shape for an input geometry (batch included).
  Shape latent_shape(const VolumeGeometry& input, Index batch) const;
  void validate() const;
};

struct EncoderParams {
  std::vector<ConvLayer> layers;
};

struct DecoderParams {
  std::vector<ConvLayer> layers;
  ConvLayer output;
};

struct VaeParams {
  VaeConfig config;
  EncoderParams encoder;
  DecoderParams decoder;
};

struct LatentCode {
  Tensor mu;
  Tensor log_var;
  Tensor z;
};

/// U-shaped velocity predictor: (moving, fixed) -> d-channel SVF. Down path
/// of stride-2 convs, up path of stride-2 transposed convs each followed by
/// a merge conv over the concatenated skip connection, then a linear head
/// initialised near zero.
struct RegNetConfig {
  Index spatial_rank = 2;
  std::vector<Index> encoder_widths{16, 32, 32, 32};
  std::vector<Index> decoder_widths{32, 32, 32, 16};
  double slope = 0.2;
  double head_scale = 1e-5;

  Index levels() const { return static_cast<Index>(encoder_widths.size()); }
  void validate() const;
};

struct RegNetParams {
  RegNetConfig config;
  std::vector<ConvLayer> down;
  std::vector<ConvLayer> up;
  std::vector<ConvLayer> merge;
  ConvLayer head;
};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

VaeParams init_vae(const VaeConfig& config, std::uint64_t seed);
RegNetParams init_regnet(const RegNetConfig& config, std::uint64_t seed);

/// Parameter handles in a fixed order; shares storage with `p`.
NamedTensors named_parameters(const VaeParams& p);
NamedTensors named_parameters(const RegNetParams& p);
NamedTensors named_parameters(const EncoderParams& p);
NamedTensors named_parameters(const DecoderParams& p);

void set_trainable(const NamedTensors& params, bool trainable);
/// Deep copy with fresh leaves (independent storage).
VaeParams clone(const VaeParams& p);
RegNetParams clone(const RegNetParams& p);

/// mu/log-variance from the final conv split; z = mu + exp(log_var/2) * eps
/// when sampling, otherwise z = mu.
LatentCode encode(const Tensor& x, const VaeParams& p, Rng& rng, bool sample);
LatentCode encode(const Tensor& x, const VaeParams& p);
Tensor decode(const Tensor& z, const VaeParams& p);

VelocityField predict_velocity(const Tensor& moving, const Tensor& fixed, const RegNetParams& p);

nlohmann::json to_json(const VaeConfig& c);
nlohmann::json to_json(const RegNetConfig& c);
VaeConfig vae_config_from_json(const nlohmann::json& j);
RegNetConfig regnet_config_from_json(const nlohmann::json& j);

}  // namespace setgen
