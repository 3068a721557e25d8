#include "setgen/train.hpp"

#include <cmath>
#include <optional>
#include <string>

namespace setgen {

namespace {

Tensor image_tensor(const Array& a) { return Tensor::constant(a); }

bool grads_finite(const NamedTensors& params) {
  for (const auto& [name, t] : params)
    if (t.has_grad() && !t.grad().data().allFinite()) return false;
  return true;
}

void zero_grads(const NamedTensors& params) {
  for (auto [name, t] : params) t.zero_grad();
}

/// Marks a parameter set frozen for its lifetime, then restores the flags.
class FreezeGuard {
 public:
  explicit FreezeGuard(NamedTensors params) : params_(std::move(params)) {
    for (auto& [name, t] : params_) {
      flags_.push_back(t.requires_grad());
      t.set_requires_grad(false);
    }
  }
  ~FreezeGuard() {
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i].second.set_requires_grad(flags_[i]);
  }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  NamedTensors params_;
  std::vector<bool> flags_;
};

}  // namespace

// ---------------------------------------------------------------------------
// Registration

Tensor velocity_smoothness(const VelocityField& v) {
  Tensor total;
  for (Index a = 0; a < v.geometry.rank(); ++a) {
    Tensor term = mean(square(spatial_diff(v.values, a)));
    total = total.defined() ? total + term : term;
  }
  return total;
}

RegistrationLoss registration_loss(const Tensor& moving, const Tensor& fixed, const RegNetParams& reg,
                                   const RegPretrainConfig& cfg) {
  RegistrationLoss out;
  out.velocity = predict_velocity(moving, fixed, reg);
  const DeformationField phi = integrate_svf(out.velocity, cfg.integration);
  out.similarity = mse(warp(moving, phi), fixed);
  out.smoothness = velocity_smoothness(out.velocity);
  out.total = out.similarity + cfg.smoothness * out.smoothness;
  return out;
}

RegNetParams pretrain_registration(const std::vector<Array>& images, const RegPretrainConfig& cfg,
                                   const std::function<void(const RegPretrainRecord&)>& on_iteration) {
  if (images.size() < 2) throw DataError("registration pretraining needs at least 2 subjects");
  cfg.integration.validate();
  RegNetParams reg = init_regnet(cfg.network, cfg.seed);
  const NamedTensors params = named_parameters(reg);
  set_trainable(params, true);
  PairSampler sampler(images.size(), cfg.seed + 1);
  Rng flip(cfg.seed + 2);
  AdamState adam;
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    auto [a, b] = sampler.next();
    if (flip() & 1) std::swap(a, b);
    zero_grads(params);
    const RegistrationLoss loss = registration_loss(image_tensor(images[a]), image_tensor(images[b]), reg, cfg);
    const double total = loss.total.item();
    if (!std::isfinite(total))
      throw NumericalError("registration pretraining diverged at iteration " + std::to_string(it) + " (loss " +
                           std::to_string(total) + ")");
    backward(loss.total);
    if (!grads_finite(params))
      throw NumericalError("registration pretraining: non-finite gradient at iteration " + std::to_string(it));
    adam_step(params, adam, cfg.lr);
    if (on_iteration) on_iteration({it, cfg.lr, loss.similarity.item(), loss.smoothness.item(), total});
  }
  return reg;
}

RegistrationQuality evaluate_registration(const RegNetParams& reg, const std::vector<Array>& images,
                                          const std::vector<IndexPair>& pairs, const IntegrationConfig& integration) {
  NoGradGuard guard;
  RegistrationQuality q;
  if (pairs.empty()) return q;
  for (const auto& [m, f] : pairs) {
    const Tensor moving = image_tensor(images.at(m));
    const Tensor fixed = image_tensor(images.at(f));
    const DeformationField phi = integrate_svf(predict_velocity(moving, fixed, reg), integration);
    q.warped_mse += mse(warp(moving, phi), fixed).item();
    q.unregistered_mse += mse(moving, fixed).item();
  }
  q.warped_mse /= static_cast<double>(pairs.size());
  q.unregistered_mse /= static_cast<double>(pairs.size());
  return q;
}

// ---------------------------------------------------------------------------
// Siamese

SiameseStep siamese_forward(const Tensor& i1, const Tensor& i2, const VaeParams& vae, const RegNetParams& reg,
                            const SiameseConfig& cfg, Rng& rng) {
  const LossWeights& w = cfg.weights;
  SiameseStep s;
  s.code1 = encode(i1, vae, rng, cfg.sample_latent);
  s.code2 = encode(i2, vae, rng, cfg.sample_latent);
  s.templ = decode(0.5 * (s.code1.z + s.code2.z), vae);

  auto with_grad_if = [](bool on, auto&& fn) {
    if (on) return fn();
    NoGradGuard guard;
    return fn();
  };

  s.parts.sim = with_grad_if(w.sim != 0.0, [&] {
    s.recon1 = decode(s.code1.z, vae);
    s.recon2 = decode(s.code2.z, vae);
    return recon_loss(i1, s.recon1) + recon_loss(i2, s.recon2);
  });
  s.parts.kl = with_grad_if(w.kl != 0.0, [&] {
    return kl_loss(s.code1.mu, s.code1.log_var) + kl_loss(s.code2.mu, s.code2.log_var);
  });

  const bool fields_need_grad = w.even != 0.0 || w.temp != 0.0 || w.warped != 0.0;
  with_grad_if(fields_need_grad, [&] {
    auto fields = [&](const Tensor& subject, DeformationField& phi, DeformationField& inv) {
      if (cfg.convention == FieldConvention::template_moving) {
        const VelocityField v = predict_velocity(s.templ, subject, reg);
        phi = integrate_svf(v, cfg.integration);
        inv = invert(v, cfg.integration);
      } else {
        const VelocityField v = predict_velocity(subject, s.templ, reg);
        inv = integrate_svf(v, cfg.integration);
        phi = invert(v, cfg.integration);
      }
    };
    fields(i1, s.phi1, s.inv1);
    fields(i2, s.phi2, s.inv2);
    s.u1 = displacement_of(s.inv1);
    s.u2 = displacement_of(s.inv2);
    return 0;
  });

  s.parts.even = with_grad_if(w.even != 0.0, [&] { return even_loss(s.u1, s.u2); });
  s.parts.temp = with_grad_if(w.temp != 0.0, [&] { return temp_loss(s.templ, i1, i2, s.phi1, s.phi2); });
  s.parts.warped = with_grad_if(w.warped != 0.0, [&] { return warped_loss(i1, i2, s.inv1, s.inv2); });
  s.loss = total_loss(s.parts, w);
  return s;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw Error(ErrorKind::usage, "train: epochs must be >= 1");
  siamese.weights.validate();
  siamese.integration.validate();
  schedule.validate();
}

void train_siamese(VaeParams& vae, const RegNetParams& reg, const std::vector<Array>& images, const TrainConfig& cfg,
                   const TrainCallbacks& callbacks) {
  cfg.validate();
  if (images.size() < 2) throw DataError("siamese training needs at least 2 subjects");
  FreezeGuard frozen(named_parameters(reg));
  const NamedTensors params = named_parameters(vae);
  set_trainable(params, true);

  PairSampler sampler(images.size(), cfg.seed + 1);
  Rng rng(cfg.seed);
  const std::size_t per_epoch = cfg.iterations_per_epoch ? cfg.iterations_per_epoch : sampler.pairs_per_epoch();
  const std::size_t total_iters = per_epoch * cfg.epochs;
  ScheduleConfig schedule = cfg.schedule;
  schedule.period = cfg.schedule.period * static_cast<double>(per_epoch);
  AdamState adam;

  for (std::size_t it = 0; it < total_iters; ++it) {
    const double lr = cosine_lr(static_cast<double>(it), schedule);
    const auto [a, b] = sampler.next();
    zero_grads(params);
    SiameseStep step = siamese_forward(image_tensor(images[a]), image_tensor(images[b]), vae, reg, cfg.siamese, rng);
    if (!std::isfinite(step.loss.total_value))
      throw NumericalError("siamese training: non-finite loss at iteration " + std::to_string(it));
    backward(step.loss.total);
    if (!grads_finite(params))
      throw NumericalError("siamese training: non-finite gradient at iteration " + std::to_string(it));
    adam_step(params, adam, lr);
    if (callbacks.on_iteration) {
      TrainRecord rec{it, lr, step.loss};
      rec.loss.total = Tensor();
      callbacks.on_iteration(rec);
    }
    if (callbacks.on_checkpoint && cfg.checkpoint_every && (it + 1) % cfg.checkpoint_every == 0)
      callbacks.on_checkpoint(vae, it + 1);
  }
}

nlohmann::json to_json(const TrainRecord& r) {
  nlohmann::json j = to_json(r.loss);
  j["iter"] = r.iter;
  j["lr"] = r.lr;
  return j;
}

nlohmann::json to_json(const RegPretrainRecord& r) {
  return {{"iter", r.iter}, {"lr", r.lr}, {"similarity", r.similarity}, {"smoothness", r.smoothness}, {"total", r.total}};
}

}  // namespace setgen
