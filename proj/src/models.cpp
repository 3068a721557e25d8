#include "setgen/models.hpp"

#include <cmath>
#include <string>

namespace setgen {

namespace {

Shape kernel_shape(Index out, Index in, Index rank) {
  Shape s{out, in};
  s.insert(s.end(), static_cast<std::size_t>(rank), 3);
  return s;
}

/// He-uniform weights for fan-in `fan_in`, scaled by `gain`, zero bias.
ConvLayer make_layer(Shape weight_shape, Index bias_size, Index fan_in, double slope, double gain, Rng& rng) {
  const double bound = gain * std::sqrt(6.0 / ((1.0 + slope * slope) * static_cast<double>(fan_in)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Array w(std::move(weight_shape));
  for (Index i = 0; i < w.size(); ++i) w[i] = dist(rng);
  return {Tensor::leaf(std::move(w), true), Tensor::leaf(Array::zeros(Shape{bias_size}), true)};
}

Tensor conv_block(const Tensor& x, const ConvLayer& l, int stride) {
  return add_channel_bias(conv_nd(x, l.weight, stride, 1), l.bias);
}

Tensor up_block(const Tensor& x, const ConvLayer& l) {
  return add_channel_bias(conv_transpose_nd(x, l.weight, 2, 1), l.bias);
}

void append(NamedTensors& out, const std::string& prefix, const ConvLayer& l) {
  out.emplace_back(prefix + ".weight", l.weight);
  out.emplace_back(prefix + ".bias", l.bias);
}

ConvLayer clone_layer(const ConvLayer& l) {
  return {Tensor::leaf(l.weight.value(), l.weight.requires_grad()), Tensor::leaf(l.bias.value(), l.bias.requires_grad())};
}

std::vector<ConvLayer> clone_layers(const std::vector<ConvLayer>& ls) {
  std::vector<ConvLayer> out;
  for (const auto& l : ls) out.push_back(clone_layer(l));
  return out;
}

void check_input(const char* op, const Tensor& x, Index rank, Index channels) {
  const Shape& s = x.shape();
  if (static_cast<Index>(s.size()) != rank + 2)
    throw ShapeError(op, "rank", "expected " + std::to_string(rank) + " spatial axes, got " + shape_string(s));
  if (s[1] != channels)
    throw ShapeError(op, "channels", "expected " + std::to_string(channels) + ", got " + std::to_string(s[1]));
}

}  // namespace

Shape VaeConfig::latent_shape(const VolumeGeometry& input, Index batch) const {
  Shape s{batch, latent_channels()};
  const Index factor = Index{1} << levels();
  for (std::size_t a = 0; a < input.dims.size(); ++a) {
    if (input.dims[a] % factor != 0)
      throw ShapeError("vae", "spatial[" + std::to_string(a) + "]",
                       "extent " + std::to_string(input.dims[a]) + " not divisible by " + std::to_string(factor));
    s.push_back(input.dims[a] / factor);
  }
  return s;
}

void VaeConfig::validate() const {
  if (spatial_rank != 2 && spatial_rank != 3) throw Error(ErrorKind::usage, "vae: spatial rank must be 2 or 3");
  if (encoder_widths.empty()) throw Error(ErrorKind::usage, "vae: no encoder layers");
  if (encoder_widths.back() % 2 != 0) throw Error(ErrorKind::usage, "vae: final encoder width must be even");
  if (decoder_widths.size() != encoder_widths.size())
    throw Error(ErrorKind::usage, "vae: decoder needs one transposed conv per encoder layer");
}

void RegNetConfig::validate() const {
  if (spatial_rank != 2 && spatial_rank != 3) throw Error(ErrorKind::usage, "regnet: spatial rank must be 2 or 3");
  if (encoder_widths.empty() || decoder_widths.size() != encoder_widths.size())
    throw Error(ErrorKind::usage, "regnet: encoder and decoder need the same, nonzero number of levels");
}

VaeParams init_vae(const VaeConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  VaeParams p;
  p.config = config;
  const Index r = config.spatial_rank;
  const Index kvol = static_cast<Index>(std::pow(3, r));
  Index in = config.image_channels;
  for (std::size_t i = 0; i < config.encoder_widths.size(); ++i) {
    const Index out = config.encoder_widths[i];
    const double gain = i + 1 == config.encoder_widths.size() ? 0.5 : 1.0;
    p.encoder.layers.push_back(make_layer(kernel_shape(out, in, r), out, in * kvol, config.slope, gain, rng));
    in = out;
  }
  in = config.latent_channels();
  for (Index out : config.decoder_widths) {
    p.decoder.layers.push_back(make_layer(kernel_shape(in, out, r), out, in * kvol, config.slope, 1.0, rng));
    in = out;
  }
  p.decoder.output =
      make_layer(kernel_shape(config.image_channels, in, r), config.image_channels, in * kvol, config.slope, 1.0, rng);
  return p;
}

RegNetParams init_regnet(const RegNetConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  RegNetParams p;
  p.config = config;
  const Index r = config.spatial_rank;
  const Index kvol = static_cast<Index>(std::pow(3, r));
  const Index levels = config.levels();
  const Index input_channels = 2;
  Index in = input_channels;
  for (Index out : config.encoder_widths) {
    p.down.push_back(make_layer(kernel_shape(out, in, r), out, in * kvol, config.slope, 1.0, rng));
    in = out;
  }
  for (Index j = 0; j < levels; ++j) {
    const Index out = config.decoder_widths[static_cast<std::size_t>(j)];
    p.up.push_back(make_layer(kernel_shape(in, out, r), out, in * kvol, config.slope, 1.0, rng));
    const Index skip_level = levels - 1 - j;
    const Index skip = skip_level == 0 ? input_channels : config.encoder_widths[static_cast<std::size_t>(skip_level - 1)];
    p.merge.push_back(make_layer(kernel_shape(out, out + skip, r), out, (out + skip) * kvol, config.slope, 1.0, rng));
    in = out;
  }
  p.head = make_layer(kernel_shape(r, in, r), r, in * kvol, config.slope, config.head_scale, rng);
  return p;
}

NamedTensors named_parameters(const EncoderParams& p) {
  NamedTensors out;
  for (std::size_t i = 0; i < p.layers.size(); ++i) append(out, "encoder." + std::to_string(i), p.layers[i]);
  return out;
}

NamedTensors named_parameters(const DecoderParams& p) {
  NamedTensors out;
  for (std::size_t i = 0; i < p.layers.size(); ++i) append(out, "decoder." + std::to_string(i), p.layers[i]);
  append(out, "decoder.out", p.output);
  return out;
}

NamedTensors named_parameters(const VaeParams& p) {
  NamedTensors out = named_parameters(p.encoder);
  NamedTensors dec = named_parameters(p.decoder);
  out.insert(out.end(), dec.begin(), dec.end());
  return out;
}

NamedTensors named_parameters(const RegNetParams& p) {
  NamedTensors out;
  for (std::size_t i = 0; i < p.down.size(); ++i) append(out, "reg.down." + std::to_string(i), p.down[i]);
  for (std::size_t i = 0; i < p.up.size(); ++i) {
    append(out, "reg.up." + std::to_string(i), p.up[i]);
    append(out, "reg.merge." + std::to_string(i), p.merge[i]);
  }
  append(out, "reg.head", p.head);
  return out;
}

void set_trainable(const NamedTensors& params, bool trainable) {
  for (auto [name, t] : params) t.set_requires_grad(trainable);
}

VaeParams clone(const VaeParams& p) {
  VaeParams c;
  c.config = p.config;
  c.encoder.layers = clone_layers(p.encoder.layers);
  c.decoder.layers = clone_layers(p.decoder.layers);
  c.decoder.output = clone_layer(p.decoder.output);
  return c;
}

RegNetParams clone(const RegNetParams& p) {
  RegNetParams c;
  c.config = p.config;
  c.down = clone_layers(p.down);
  c.up = clone_layers(p.up);
  c.merge = clone_layers(p.merge);
  c.head = clone_layer(p.head);
  return c;
}

LatentCode encode(const Tensor& x, const VaeParams& p, Rng& rng, bool sample) {
  const VaeConfig& c = p.config;
  check_input("encode", x, c.spatial_rank, c.image_channels);
  (void)c.latent_shape(VolumeGeometry::of(x.shape()), x.dim(0));
  Tensor h = x;
  const std::size_t n = p.encoder.layers.size();
  for (std::size_t i = 0; i < n; ++i) {
    h = conv_block(h, p.encoder.layers[i], 2);
    if (i + 1 < n) h = leaky_relu(h, c.slope);
  }
  LatentCode code;
  const Index half = c.latent_channels();
  code.mu = slice_channels(h, 0, half);
  code.log_var = slice_channels(h, half, half);
  if (sample) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Array eps(code.mu.shape());
    for (Index i = 0; i < eps.size(); ++i) eps[i] = normal(rng);
    code.z = code.mu + exp(0.5 * code.log_var) * Tensor::constant(std::move(eps));
  } else {
    code.z = code.mu;
  }
  return code;
}

LatentCode encode(const Tensor& x, const VaeParams& p) {
  Rng unused(0);
  return encode(x, p, unused, false);
}

Tensor decode(const Tensor& z, const VaeParams& p) {
  const VaeConfig& c = p.config;
  check_input("decode", z, c.spatial_rank, c.latent_channels());
  Tensor h = z;
  for (const auto& l : p.decoder.layers) h = leaky_relu(up_block(h, l), c.slope);
  return sigmoid(conv_block(h, p.decoder.output, 1));
}

VelocityField predict_velocity(const Tensor& moving, const Tensor& fixed, const RegNetParams& p) {
  const RegNetConfig& c = p.config;
  check_input("predict_velocity", moving, c.spatial_rank, 1);
  if (moving.shape() != fixed.shape())
    throw ShapeError("predict_velocity", "geometry", shape_string(moving.shape()) + " vs " + shape_string(fixed.shape()));
  const Index factor = Index{1} << c.levels();
  for (std::size_t a = 2; a < moving.shape().size(); ++a)
    if (moving.shape()[a] % factor != 0)
      throw ShapeError("predict_velocity", "spatial[" + std::to_string(a - 2) + "]",
                       "extent not divisible by " + std::to_string(factor));
  std::vector<Tensor> skips{concat_channels({moving, fixed})};
  Tensor h = skips.front();
  for (const auto& l : p.down) {
    h = leaky_relu(conv_block(h, l, 2), c.slope);
    skips.push_back(h);
  }
  const std::size_t levels = p.down.size();
  for (std::size_t j = 0; j < levels; ++j) {
    h = leaky_relu(up_block(h, p.up[j]), c.slope);
    h = leaky_relu(conv_block(concat_channels({h, skips[levels - 1 - j]}), p.merge[j], 1), c.slope);
  }
  return velocity_field(conv_block(h, p.head, 1));
}

nlohmann::json to_json(const VaeConfig& c) {
  return {{"spatial_rank", c.spatial_rank},
          {"image_channels", c.image_channels},
          {"encoder_widths", c.encoder_widths},
          {"decoder_widths", c.decoder_widths},
          {"slope", c.slope}};
}

nlohmann::json to_json(const RegNetConfig& c) {
  return {{"spatial_rank", c.spatial_rank},
          {"encoder_widths", c.encoder_widths},
          {"decoder_widths", c.decoder_widths},
          {"slope", c.slope},
          {"head_scale", c.head_scale}};
}

VaeConfig vae_config_from_json(const nlohmann::json& j) {
  VaeConfig c;
  c.spatial_rank = j.at("spatial_rank").get<Index>();
  c.image_channels = j.at("image_channels").get<Index>();
  c.encoder_widths = j.at("encoder_widths").get<std::vector<Index>>();
  c.decoder_widths = j.at("decoder_widths").get<std::vector<Index>>();
  c.slope = j.at("slope").get<double>();
  c.validate();
  return c;
}

RegNetConfig regnet_config_from_json(const nlohmann::json& j) {
  RegNetConfig c;
  c.spatial_rank = j.at("spatial_rank").get<Index>();
  c.encoder_widths = j.at("encoder_widths").get<std::vector<Index>>();
  c.decoder_widths = j.at("decoder_widths").get<std::vector<Index>>();
  c.slope = j.at("slope").get<double>();
  c.head_scale = j.at("head_scale").get<double>();
  c.validate();
  return c;
}

}  // namespace setgen
