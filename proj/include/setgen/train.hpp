#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include <json.hpp>

#include "setgen/deform.hpp"
#include "setgen/losses.hpp"
#include "setgen/models.hpp"
#include "setgen/optim.hpp"

namespace setgen {

// ---------------------------------------------------------------------------
// Registration pretraining

struct RegPretrainConfig {
  std::size_t iterations = 2000;
  std::uint64_t seed = 0;
  double lr = 1e-3;
  double smoothness = 0.01;  ///< weight of mean |grad v|^2
  IntegrationConfig integration;
  RegNetConfig network;
};

struct RegPretrainRecord {
  std::size_t iter = 0;
  double lr = 0;
  double similarity = 0;
  double smoothness = 0;
  double total = 0;
};

struct RegistrationLoss {
  Tensor similarity;
  Tensor smoothness;
  Tensor total;
  VelocityField velocity;
};

/// Sum over axes of mean squared forward differences of v.
Tensor velocity_smoothness(const VelocityField& v);

/// MSE(moving o exp(v), fixed) + lambda * smoothness(v), v = Reg(moving, fixed).
RegistrationLoss registration_loss(const Tensor& moving, const Tensor& fixed, const RegNetParams& reg,
                                   const RegPretrainConfig& cfg);

/// Trains a fresh registration network on random ordered pairs of `images`
/// (each [1,1,spatial...]). Throws NumericalError on a non-finite loss.
RegNetParams pretrain_registration(const std::vector<Array>& images, const RegPretrainConfig& cfg,
                                   const std::function<void(const RegPretrainRecord&)>& on_iteration = {});

struct RegistrationQuality {
  double warped_mse = 0;
  double unregistered_mse = 0;
  double ratio() const { return unregistered_mse > 0 ? warped_mse / unregistered_mse : 0.0; }
};

/// Mean over `pairs` (moving, fixed) of MSE before and after registration.
RegistrationQuality evaluate_registration(const RegNetParams& reg, const std::vector<Array>& images,
                                          const std::vector<IndexPair>& pairs, const IntegrationConfig& integration);

// ---------------------------------------------------------------------------
// Siamese template training

/// Which registration direction produces the template->subject field.
enum class FieldConvention {
  template_moving,  ///< v = Reg(template, I_k); phi_k = exp(v), phi_k^-1 = exp(-v)
  subject_moving,   ///< v = Reg(I_k, template); phi_k^-1 = exp(v), phi_k = exp(-v)
};

struct SiameseConfig {
  LossWeights weights;
  IntegrationConfig integration;
  bool sample_latent = true;
  FieldConvention convention = FieldConvention::template_moving;
};

/// Everything one siamese forward pass produces.
struct SiameseStep {
  LatentCode code1;
  LatentCode code2;
  Tensor templ;
  Tensor recon1;
  Tensor recon2;
  DeformationField phi1, phi2;  ///< template -> subject
  DeformationField inv1, inv2;  ///< subject -> template
  DisplacementField u1, u2;     ///< displacements of inv1, inv2
  LossParts parts;
  LossBreakdown loss;
};

/// Encodes both inputs, decodes the averaged latent into the pair template,
/// registers both inputs against it with the (frozen) network, and
/// evaluates every loss term. Terms with zero weight are evaluated without
/// recording gradients.
SiameseStep siamese_forward(const Tensor& i1, const Tensor& i2, const VaeParams& vae, const RegNetParams& reg,
                            const SiameseConfig& cfg, Rng& rng);

struct TrainConfig {
  std::size_t epochs = 3;
  std::size_t iterations_per_epoch = 0;  ///< 0: every unordered pair once
  std::uint64_t seed = 0;
  SiameseConfig siamese;
  ScheduleConfig schedule{1e-4, 0.0, 4.0};  ///< period in epochs
  std::size_t checkpoint_every = 0;         ///< iterations; 0 disables
  VaeConfig network;

  void validate() const;
};

struct TrainRecord {
  std::size_t iter = 0;
  double lr = 0;
  LossBreakdown loss;
};

struct TrainCallbacks {
  std::function<void(const TrainRecord&)> on_iteration;
  std::function<void(const VaeParams&, std::size_t iter)> on_checkpoint;
};

/// Optimises `vae` in place; `reg` is frozen for the whole run (restored
/// afterwards) but stays on the differentiable path. On a non-finite loss
/// or gradient throws NumericalError with `vae` still holding the last
/// good parameters.
void train_siamese(VaeParams& vae, const RegNetParams& reg, const std::vector<Array>& images, const TrainConfig& cfg,
                   const TrainCallbacks& callbacks = {});

nlohmann::json to_json(const TrainRecord& r);
nlohmann::json to_json(const RegPretrainRecord& r);

}  // namespace setgen
