#pragma once

#include <json.hpp>

#include "setgen/deform.hpp"
#include "setgen/tensor.hpp"

namespace setgen {

/// Weights of the five training terms (sim, kl, even, temp, warped).
struct LossWeights {
  double sim = 300.0;
  double kl = 0.0002;
  double even = 5.0;
  double temp = 100.0;
  double warped = 200.0;

  void validate() const;
};

/// Unweighted terms of one siamese step.
struct LossParts {
  Tensor sim;
  Tensor kl;
  Tensor even;
  Tensor temp;
  Tensor warped;
};

struct LossBreakdown {
  double sim = 0;
  double kl = 0;
  double even = 0;
  double temp = 0;
  double warped = 0;
  double total_value = 0;
  Tensor total;  ///< differentiable weighted sum
};

/// Mean squared error over all voxels.
Tensor mse(const Tensor& a, const Tensor& b);

Tensor recon_loss(const Tensor& x, const Tensor& reconstruction);

/// -1/2 sum(1 + log_var - mu^2 - exp(log_var)) over latent elements,
/// averaged over the batch.
Tensor kl_loss(const Tensor& mu, const Tensor& log_var);

/// Mean over voxels of |u1 + u2|^2 (squared norm over components).
Tensor even_loss(const DisplacementField& u1, const DisplacementField& u2);

/// Sim(template o phi1, I1) + Sim(template o phi2, I2), Sim = MSE.
Tensor temp_loss(const Tensor& templ, const Tensor& i1, const Tensor& i2, const DeformationField& phi1,
                 const DeformationField& phi2);

/// Sim(I1 o inv1, I2 o inv2), Sim = MSE.
Tensor warped_loss(const Tensor& i1, const Tensor& i2, const DeformationField& inv1, const DeformationField& inv2);

/// Weighted sum; undefined parts count as zero.
LossBreakdown total_loss(const LossParts& parts, const LossWeights& w);

nlohmann::json to_json(const LossWeights& w);
LossWeights loss_weights_from_json(const nlohmann::json& j);
nlohmann::json to_json(const LossBreakdown& b);

}  // namespace setgen
