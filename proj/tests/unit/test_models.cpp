#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "scratch.hpp"
#include "setgen/checkpoint.hpp"
#include "setgen/models.hpp"

using namespace setgen;

namespace {

VaeConfig small_vae() {
  VaeConfig c;
  c.encoder_widths = {4, 4, 8};
  c.decoder_widths = {4, 4, 4};
  return c;
}

RegNetConfig small_reg() {
  RegNetConfig c;
  c.encoder_widths = {4, 4};
  c.decoder_widths = {4, 4};
  return c;
}

bool same_params(const NamedTensors& a, const NamedTensors& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].first != b[i].first || !bitwise_equal(a[i].second.value(), b[i].second.value())) return false;
  return true;
}

}  // namespace

TEST_CASE("default VAE maps 64x64 to a 32x4x4 latent and back") {
  NoGradGuard g;
  const VaeParams vae = init_vae(VaeConfig{}, 1);
  std::mt19937_64 rng(1);
  const Tensor x = Tensor::constant(oracle::uniform({1, 1, 64, 64}, rng, 0.0, 1.0));
  const LatentCode code = encode(x, vae);
  CHECK(code.mu.shape() == Shape{1, 32, 4, 4});
  CHECK(code.log_var.shape() == code.mu.shape());
  CHECK(VaeConfig{}.latent_shape(VolumeGeometry(Shape{64, 64}), 1) == Shape{1, 32, 4, 4});
  const Tensor y = decode(code.z, vae);
  CHECK(y.shape() == Shape{1, 1, 64, 64});
}

TEST_CASE("3-D VAE and registration net preserve the volume shape") {
  NoGradGuard g;
  VaeConfig vc = small_vae();
  vc.spatial_rank = 3;
  RegNetConfig rc = small_reg();
  rc.spatial_rank = 3;
  const VaeParams vae = init_vae(vc, 2);
  const RegNetParams reg = init_regnet(rc, 3);
  std::mt19937_64 rng(2);
  const Tensor x = Tensor::constant(oracle::uniform({2, 1, 16, 16, 8}, rng, 0.0, 1.0));
  CHECK(decode(encode(x, vae).z, vae).shape() == x.shape());
  const VelocityField v = predict_velocity(x, x, reg);
  CHECK(v.values.shape() == Shape{2, 3, 16, 16, 8});
}

TEST_CASE("inputs not divisible by the encoder depth are rejected") {
  NoGradGuard g;
  const VaeParams vae = init_vae(small_vae(), 1);
  CHECK_THROWS_AS(encode(Tensor::constant(Array(Shape{1, 1, 20, 16})), vae), ShapeError);
  CHECK_THROWS_AS(encode(Tensor::constant(Array(Shape{1, 2, 16, 16})), vae), ShapeError);
}

TEST_CASE("encoding is deterministic and seeded sampling is repeatable") {
  NoGradGuard g;
  const VaeParams vae = init_vae(small_vae(), 4);
  std::mt19937_64 data(3);
  const Tensor x = Tensor::constant(oracle::uniform({1, 1, 16, 16}, data, 0.0, 1.0));

  CHECK(bitwise_equal(encode(x, vae).z.value(), encode(x, vae).z.value()));
  CHECK(bitwise_equal(encode(x, vae).z.value(), encode(x, vae).mu.value()));

  Rng a(9), b(9), c(10);
  const Array za = encode(x, vae, a, true).z.value();
  CHECK(bitwise_equal(za, encode(x, vae, b, true).z.value()));
  CHECK_FALSE(za == encode(x, vae, c, true).z.value());
}

TEST_CASE("sampled codes average to mu") {
  NoGradGuard g;
  const VaeParams vae = init_vae(small_vae(), 5);
  std::mt19937_64 data(4);
  const Tensor x = Tensor::constant(oracle::uniform({1, 1, 16, 16}, data, 0.0, 1.0));
  const LatentCode ref = encode(x, vae);
  Array mean(ref.mu.shape());
  Rng rng(11);
  constexpr int draws = 10000;
  for (int s = 0; s < draws; ++s) mean.data() += encode(x, vae, rng, true).z.value().data();
  mean.data() /= draws;
  for (Index e = 0; e < mean.size(); ++e) {
    const double sigma = std::exp(0.5 * ref.log_var.value()[e]);
    CHECK(std::abs(mean[e] - ref.mu.value()[e]) < 3.0 * sigma / 100.0);
  }
}

TEST_CASE("decoder output stays inside the unit interval") {
  NoGradGuard g;
  const VaeParams vae = init_vae(small_vae(), 6);
  const Shape latent = small_vae().latent_shape(VolumeGeometry(Shape{16, 16}), 1);
  for (double level : {-5.0, 5.0}) {
    const Array y = decode(Tensor::constant(Array(latent, level)), vae).value();
    CHECK(y.data().minCoeff() > 0.0);
    CHECK(y.data().maxCoeff() < 1.0);
  }
  for (double level : {-1e6, 1e6}) {
    const Array y = decode(Tensor::constant(Array(latent, level)), vae).value();
    CHECK(y.data().isFinite().all());
    CHECK(y.data().minCoeff() >= 0.0);
    CHECK(y.data().maxCoeff() <= 1.0);
  }
}

TEST_CASE("initialisation is seeded and activations stay finite") {
  const VaeParams a = init_vae(VaeConfig{}, 7), b = init_vae(VaeConfig{}, 7), c = init_vae(VaeConfig{}, 8);
  CHECK(same_params(named_parameters(a), named_parameters(b)));
  CHECK_FALSE(same_params(named_parameters(a), named_parameters(c)));
  for (const auto& [name, t] : named_parameters(init_vae(VaeConfig{}, 0))) CHECK(t.value().data().isFinite().all());

  NoGradGuard g;
  const RegNetParams reg = init_regnet(RegNetConfig{}, 0);
  std::mt19937_64 rng(5);
  const Tensor m = Tensor::constant(oracle::uniform({1, 1, 64, 64}, rng, 0.0, 1.0));
  const Tensor f = Tensor::constant(oracle::uniform({1, 1, 64, 64}, rng, 0.0, 1.0));
  const Array v = predict_velocity(m, f, reg).values.value();
  CHECK(v.shape() == Shape{1, 2, 64, 64});
  CHECK(v.data().isFinite().all());
  CHECK(v.data().abs().maxCoeff() < 1e-2);  // near-zero head at initialisation
  CHECK(bitwise_equal(v, predict_velocity(m, f, reg).values.value()));
  CHECK(decode(encode(m, a).z, a).value().data().isFinite().all());
}

TEST_CASE("clone owns independent storage") {
  VaeParams a = init_vae(small_vae(), 1);
  VaeParams b = clone(a);
  CHECK(same_params(named_parameters(a), named_parameters(b)));
  named_parameters(b).front().second.mutable_value()[0] += 1.0;
  CHECK_FALSE(same_params(named_parameters(a), named_parameters(b)));
}

TEST_CASE("checkpoints round-trip bitwise") {
  ScratchDir dir("ckpt");
  const VaeParams vae = init_vae(small_vae(), 12);
  const RegNetParams reg = init_regnet(small_reg(), 13);
  save_checkpoint(dir / "vae.ckpt", make_checkpoint(vae, {{"seed", 12}, {"iteration", 40}}));
  save_checkpoint(dir / "reg.ckpt", make_checkpoint(reg));

  const Checkpoint loaded = load_checkpoint(dir / "vae.ckpt");
  CHECK(loaded.metadata.at("iteration") == 40);
  const VaeParams vae2 = vae_from_checkpoint(loaded);
  CHECK(same_params(named_parameters(vae), named_parameters(vae2)));
  CHECK(to_json(vae2.config) == to_json(vae.config));
  const RegNetParams reg2 = regnet_from_checkpoint(load_checkpoint(dir / "reg.ckpt"));
  CHECK(same_params(named_parameters(reg), named_parameters(reg2)));

  save_checkpoint(dir / "again.ckpt", make_checkpoint(vae2, {{"seed", 12}, {"iteration", 40}}));
  CHECK(read_file(dir / "again.ckpt") == read_file(dir / "vae.ckpt"));
}

TEST_CASE("checkpoint loading rejects incomplete or foreign contents") {
  ScratchDir dir("ckpt_bad");
  const VaeParams vae = init_vae(small_vae(), 1);

  Checkpoint missing = make_checkpoint(vae);
  missing.tensors.pop_back();
  CHECK_THROWS_AS(vae_from_checkpoint(missing), DataError);

  Checkpoint extra = make_checkpoint(vae);
  extra.tensors.emplace_back("stray", Array(Shape{2}));
  CHECK_THROWS_AS(vae_from_checkpoint(extra), DataError);

  Checkpoint reshaped = make_checkpoint(vae);
  reshaped.tensors.front().second = Array(Shape{1});
  CHECK_THROWS_AS(vae_from_checkpoint(reshaped), DataError);

  CHECK_THROWS_AS(regnet_from_checkpoint(make_checkpoint(vae)), DataError);

  save_checkpoint(dir / "ok.ckpt", make_checkpoint(vae));
  std::string bytes = read_file(dir / "ok.ckpt");
  write_file_atomic(dir / "short.ckpt", bytes.substr(0, bytes.size() - 8));
  CHECK_THROWS_AS(load_checkpoint(dir / "short.ckpt"), DataError);
  bytes[0] = 'X';
  write_file_atomic(dir / "magic.ckpt", bytes);
  CHECK_THROWS_AS(load_checkpoint(dir / "magic.ckpt"), DataError);
  CHECK_THROWS_AS(load_checkpoint(dir / "absent.ckpt"), DataError);
}

TEST_CASE("architecture configs round-trip through JSON") {
  VaeConfig v = small_vae();
  v.slope = 0.1;
  const VaeConfig v2 = vae_config_from_json(to_json(v));
  CHECK(v2.encoder_widths == v.encoder_widths);
  CHECK(v2.slope == 0.1);
  RegNetConfig r = small_reg();
  r.head_scale = 0.5;
  CHECK(to_json(regnet_config_from_json(to_json(r))) == to_json(r));

  VaeConfig odd = small_vae();
  odd.encoder_widths.back() = 7;
  CHECK_THROWS_AS(odd.validate(), Error);
}
