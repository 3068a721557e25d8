#pragma once

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

#include "setgen/models.hpp"

namespace setgen {

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step = 0;
  std::vector<Array> first_moment;
  std::vector<Array> second_moment;
};

/// Bias-corrected Adam update of every parameter from its accumulated
/// gradient (a missing gradient counts as zero). Moments are allocated on
/// first use.
void adam_step(const NamedTensors& params, AdamState& state, double lr);

/// Same update on raw arrays.
void adam_step(std::vector<Array*> params, const std::vector<const Array*>& grads, AdamState& state, double lr);

struct ScheduleConfig {
  double base_lr = 1e-4;
  double min_lr = 0.0;
  double period = 4.0;  ///< restart length, same unit as `step`

  void validate() const;
};

/// Cosine annealing with warm restarts:
/// min + (base - min) * (1 + cos(pi * (step mod T) / T)) / 2.
double cosine_lr(double step, const ScheduleConfig& cfg);

using IndexPair = std::pair<std::size_t, std::size_t>;

/// Endless stream of unordered subject pairs (i < j). Each epoch visits all
/// n(n-1)/2 pairs once in a fresh seeded shuffle.
class PairSampler {
 public:
  PairSampler(std::size_t n, std::uint64_t seed);

  IndexPair next();
  std::size_t pairs_per_epoch() const noexcept { return pairs_.size(); }
  std::size_t epoch() const noexcept { return epoch_; }

 private:
  void reshuffle();

  std::vector<IndexPair> pairs_;
  std::size_t cursor_ = 0;
  std::size_t epoch_ = 0;
  std::mt19937_64 rng_;
};

/// First `count` draws of a PairSampler.
std::vector<IndexPair> sample_pairs(std::size_t n, std::uint64_t seed, std::size_t count);

}  // namespace setgen
