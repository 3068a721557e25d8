#include "setgen/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace setgen {

void adam_step(std::vector<Array*> params, const std::vector<const Array*>& grads, AdamState& state, double lr) {
  if (params.size() != grads.size()) throw Error(ErrorKind::usage, "adam_step: params/grads count mismatch");
  if (state.first_moment.empty()) {
    for (const Array* p : params) {
      state.first_moment.push_back(Array::zeros(p->shape()));
      state.second_moment.push_back(Array::zeros(p->shape()));
    }
  }
  if (state.first_moment.size() != params.size()) throw Error(ErrorKind::usage, "adam_step: state/parameter count mismatch");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = state.first_moment[i].data();
    auto& v = state.second_moment[i].data();
    if (m.size() != params[i]->size()) throw ShapeError("adam_step", "parameter " + std::to_string(i), "moment shape mismatch");
    if (grads[i]) {
      const auto& g = grads[i]->data();
      m = state.beta1 * m + (1.0 - state.beta1) * g;
      v = state.beta2 * v + (1.0 - state.beta2) * g.square();
    } else {
      m *= state.beta1;
      v *= state.beta2;
    }
    params[i]->data() -= lr * (m / c1) / ((v / c2).sqrt() + state.eps);
  }
}

void adam_step(const NamedTensors& params, AdamState& state, double lr) {
  std::vector<Array*> values;
  std::vector<const Array*> grads;
  for (auto [name, t] : params) {
    values.push_back(&t.mutable_value());
    grads.push_back(t.has_grad() ? &t.grad() : nullptr);
  }
  adam_step(std::move(values), grads, state, lr);
}

void ScheduleConfig::validate() const {
  if (!(min_lr >= 0 && min_lr <= base_lr)) throw Error(ErrorKind::usage, "schedule: need 0 <= min_lr <= base_lr");
  if (!(period >= 1)) throw Error(ErrorKind::usage, "schedule: period must be >= 1");
}

double cosine_lr(double step, const ScheduleConfig& cfg) {
  cfg.validate();
  const double phase = std::fmod(step, cfg.period) / cfg.period;
  return cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + std::cos(std::numbers::pi * phase));
}

PairSampler::PairSampler(std::size_t n, std::uint64_t seed) : rng_(seed) {
  if (n < 2) throw Error(ErrorKind::usage, "pair sampling needs at least 2 subjects");
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) pairs_.emplace_back(i, j);
  reshuffle();
}

void PairSampler::reshuffle() {
  // Fisher-Yates with an explicit draw so the order is library-independent.
  for (std::size_t i = pairs_.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng_() % i);
    std::swap(pairs_[i - 1], pairs_[j]);
  }
  cursor_ = 0;
}

IndexPair PairSampler::next() {
  if (cursor_ == pairs_.size()) {
    ++epoch_;
    reshuffle();
  }
  return pairs_[cursor_++];
}

std::vector<IndexPair> sample_pairs(std::size_t n, std::uint64_t seed, std::size_t count) {
  PairSampler s(n, seed);
  std::vector<IndexPair> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(s.next());
  return out;
}

}  // namespace setgen
