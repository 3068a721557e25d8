#include "setgen/losses.hpp"

#include <cmath>

namespace setgen {

void LossWeights::validate() const {
  for (double v : {sim, kl, even, temp, warped})
    if (!std::isfinite(v) || v < 0) throw Error(ErrorKind::usage, "loss weights must be finite and nonnegative");
}

Tensor mse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("mse", "shape", shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  return mean(square(a - b));
}

Tensor recon_loss(const Tensor& x, const Tensor& reconstruction) { return mse(x, reconstruction); }

Tensor kl_loss(const Tensor& mu, const Tensor& log_var) {
  if (mu.shape() != log_var.shape())
    throw ShapeError("kl_loss", "shape", shape_string(mu.shape()) + " vs " + shape_string(log_var.shape()));
  const double batch = static_cast<double>(mu.dim(0));
  Tensor inner = (log_var + 1.0) - square(mu) - exp(log_var);
  return (-0.5 / batch) * sum(inner);
}

Tensor even_loss(const DisplacementField& u1, const DisplacementField& u2) {
  if (u1.values.shape() != u2.values.shape())
    throw ShapeError("even_loss", "shape", shape_string(u1.values.shape()) + " vs " + shape_string(u2.values.shape()));
  const Tensor s = u1.values + u2.values;
  // Mean over voxels of the squared norm: sum over components / voxel count.
  const double components = static_cast<double>(s.dim(1));
  return components * mean(square(s));
}

Tensor temp_loss(const Tensor& templ, const Tensor& i1, const Tensor& i2, const DeformationField& phi1,
                 const DeformationField& phi2) {
  return mse(warp(templ, phi1), i1) + mse(warp(templ, phi2), i2);
}

Tensor warped_loss(const Tensor& i1, const Tensor& i2, const DeformationField& inv1, const DeformationField& inv2) {
  return mse(warp(i1, inv1), warp(i2, inv2));
}

LossBreakdown total_loss(const LossParts& parts, const LossWeights& w) {
  w.validate();
  LossBreakdown b;
  Tensor total;
  auto add = [&](const Tensor& term, double weight, double& slot) {
    if (!term.defined()) return;
    slot = term.item();
    if (weight == 0.0) return;
    Tensor weighted = weight * term;
    total = total.defined() ? total + weighted : weighted;
  };
  add(parts.sim, w.sim, b.sim);
  add(parts.kl, w.kl, b.kl);
  add(parts.even, w.even, b.even);
  add(parts.temp, w.temp, b.temp);
  add(parts.warped, w.warped, b.warped);
  b.total = total.defined() ? total : Tensor::scalar(0.0);
  b.total_value = b.total.item();
  return b;
}

nlohmann::json to_json(const LossWeights& w) {
  return {{"lambda1", w.sim}, {"lambda2", w.kl}, {"lambda3", w.even}, {"lambda4", w.temp}, {"lambda5", w.warped}};
}

LossWeights loss_weights_from_json(const nlohmann::json& j) {
  LossWeights w;
  w.sim = j.at("lambda1").get<double>();
  w.kl = j.at("lambda2").get<double>();
  w.even = j.at("lambda3").get<double>();
  w.temp = j.at("lambda4").get<double>();
  w.warped = j.at("lambda5").get<double>();
  w.validate();
  return w;
}

nlohmann::json to_json(const LossBreakdown& b) {
  return {{"sim", b.sim}, {"kl", b.kl}, {"even", b.even}, {"temp", b.temp}, {"warped", b.warped}, {"total", b.total_value}};
}

}  // namespace setgen
