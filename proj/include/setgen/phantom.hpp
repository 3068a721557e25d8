#pragma once

#include <cstdint>
#include <vector>

#include "setgen/models.hpp"
#include "setgen/volume.hpp"

namespace setgen {

struct PhantomConfig {
  std::size_t n = 16;
  VolumeGeometry geometry{Shape{64, 64}};
  int labels = 4;
  double smoothness = 8.0;  ///< blur sigma of the velocity noise, voxels
  double magnitude = 6.0;   ///< max |v| over the group, voxels
  double noise = 0.02;      ///< intensity noise amplitude (clip bound)
  std::uint64_t seed = 0;   ///< per-subject deformations and noise
  std::uint64_t anatomy_seed = 0;  ///< base anatomy; share it between train and held-out groups

  void validate() const;
};

struct PhantomGroup {
  std::vector<SubjectVolume> subjects;
  /// Noise-free base anatomy, the constructed center of the group.
  SubjectVolume center;
  /// Mean-centred velocity per subject, [1,d,dims...].
  std::vector<Array> velocities;
};

/// Intensity band [lo, hi] of label k (0 = background at 0).
std::pair<double, double> label_band(int label, int label_count);

/// Separable Gaussian blur over the trailing `rank` axes of `x`, with
/// border-replicating boundaries. sigma <= 0 returns x.
Array gaussian_blur(const Array& x, Index rank, double sigma);

/// Gaussian-blurred white noise of shape [1, channels, dims...].
Array smooth_noise(const VolumeGeometry& geometry, Index channels, double sigma, Rng& rng);

/// Rescales a [B,d,dims...] field so that its largest per-voxel vector norm is
/// `max_norm` (zero fields stay zero).
void scale_to_max_norm(Array& field, double max_norm);

/// Largest per-voxel vector norm of a [B,d,dims...] field.
double max_vector_norm(const Array& field);

PhantomGroup gen_phantoms(const PhantomConfig& cfg);

}  // namespace setgen
