#include "setgen/phantom.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

namespace setgen {

void PhantomConfig::validate() const {
  if (n < 2) throw Error(ErrorKind::usage, "phantoms: group size must be >= 2");
  if (labels < 1 || labels > 16) throw Error(ErrorKind::usage, "phantoms: label count must be in [1, 16]");
  if (!(smoothness > 0.0)) throw Error(ErrorKind::usage, "phantoms: smoothness must be positive");
  if (!(noise >= 0.0 && noise <= 0.25)) throw Error(ErrorKind::usage, "phantoms: noise amplitude must be in [0, 0.25]");
  const double limit = static_cast<double>(*std::min_element(geometry.dims.begin(), geometry.dims.end())) / 8.0;
  if (!(magnitude >= 0.0) || magnitude > limit)
    throw Error(ErrorKind::usage, "phantoms: magnitude " + std::to_string(magnitude) + " outside [0, " +
                                      std::to_string(limit) + "] for geometry " + shape_string(geometry.dims));
}

std::pair<double, double> label_band(int label, int label_count) {
  if (label <= 0) return {0.0, 0.0};
  const double width = 0.75 / label_count;
  const double lo = 0.25 + (label - 1) * width;
  return {lo, lo + 0.5 * width};
}

Array gaussian_blur(const Array& x, Index rank, double sigma) {
  if (sigma <= 0.0) return x;
  const Shape& shape = x.shape();
  if (rank < 1 || rank > x.rank()) throw ShapeError("gaussian_blur", "rank", shape_string(shape));
  const auto radius = static_cast<Index>(std::ceil(3.0 * sigma));
  std::vector<double> taps(static_cast<std::size_t>(2 * radius + 1));
  double norm = 0.0;
  for (Index k = -radius; k <= radius; ++k) {
    const double w = std::exp(-0.5 * (k * k) / (sigma * sigma));
    taps[static_cast<std::size_t>(k + radius)] = w;
    norm += w;
  }
  for (double& w : taps) w /= norm;

  Array cur = x;
  Array next(shape);
  for (Index axis = x.rank() - rank; axis < x.rank(); ++axis) {
    const Index n = shape[static_cast<std::size_t>(axis)];
    const Index inner = x.stride(axis);
    const Index outer = x.size() / (n * inner);
    for (Index o = 0; o < outer; ++o)
      for (Index i = 0; i < n; ++i)
        for (Index r = 0; r < inner; ++r) {
          double acc = 0.0;
          for (Index k = -radius; k <= radius; ++k) {
            const Index j = std::clamp<Index>(i + k, 0, n - 1);
            acc += taps[static_cast<std::size_t>(k + radius)] * cur[(o * n + j) * inner + r];
          }
          next[(o * n + i) * inner + r] = acc;
        }
    std::swap(cur, next);
  }
  return cur;
}

Array smooth_noise(const VolumeGeometry& geometry, Index channels, double sigma, Rng& rng) {
  // Blur on a domain padded by the kernel radius and crop, so edge voxels are
  // not averaged over replicated samples (which would inflate their variance).
  const Index pad = sigma > 0.0 ? static_cast<Index>(std::ceil(3.0 * sigma)) : 0;
  Shape padded = geometry.dims;
  for (Index& n : padded) n += 2 * pad;
  const VolumeGeometry big(padded);
  Array noise(big.tensor_shape(1, channels));
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Index i = 0; i < noise.size(); ++i) noise[i] = normal(rng);
  const Array blurred = gaussian_blur(noise, geometry.rank(), sigma);

  Array out(geometry.tensor_shape(1, channels));
  const Index rank = geometry.rank();
  const Index voxels = geometry.voxels();
  const Index big_voxels = big.voxels();
  std::vector<Index> idx(static_cast<std::size_t>(rank));
  for (Index v = 0; v < voxels; ++v) {
    Index rest = v, src = 0;
    for (Index a = rank - 1; a >= 0; --a) {
      idx[static_cast<std::size_t>(a)] = rest % geometry.dims[static_cast<std::size_t>(a)];
      rest /= geometry.dims[static_cast<std::size_t>(a)];
    }
    for (Index a = 0; a < rank; ++a) src = src * padded[static_cast<std::size_t>(a)] + idx[static_cast<std::size_t>(a)] + pad;
    for (Index c = 0; c < channels; ++c) out[c * voxels + v] = blurred[c * big_voxels + src];
  }
  return out;
}

double max_vector_norm(const Array& field) {
  const Index batch = field.dim(0);
  const Index d = field.dim(1);
  const Index voxels = field.size() / (batch * d);
  double best = 0.0;
  for (Index b = 0; b < batch; ++b)
    for (Index v = 0; v < voxels; ++v) {
      double sq = 0.0;
      for (Index c = 0; c < d; ++c) {
        const double x = field[(b * d + c) * voxels + v];
        sq += x * x;
      }
      best = std::max(best, sq);
    }
  return std::sqrt(best);
}

void scale_to_max_norm(Array& field, double max_norm) {
  const double m = max_vector_norm(field);
  if (m > 0.0) field.data() *= max_norm / m;
}

namespace {

Rng stream(std::uint64_t seed, std::uint64_t subject, std::uint64_t purpose) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(subject), static_cast<std::uint32_t>(purpose)};
  return Rng(seq);
}

// Inner boundary of the outer shell (normalised radius) and the radius of the
// inner structures (fraction of the smallest extent). Thin, small parts keep
// the overlap sensitive to deformations of a few voxels.
constexpr double kCore = 0.75;
constexpr double kBlob = 0.07;

struct Anatomy {
  LabelArray labels;  // dims
  Array texture;      // dims, in [0,1]
};

Anatomy base_anatomy(const PhantomConfig& cfg) {
  const VolumeGeometry& g = cfg.geometry;
  const Index rank = g.rank();
  const auto extent = static_cast<double>(*std::min_element(g.dims.begin(), g.dims.end()));
  Rng rng = stream(cfg.anatomy_seed, 0, 100);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  // Shared boundary wobble, a smooth field of amplitude 0.12 in normalised radius.
  Array wobble = smooth_noise(g, 1, extent / 6.0, rng);
  scale_to_max_norm(wobble, 0.12);

  std::vector<double> centre(static_cast<std::size_t>(rank));
  for (Index a = 0; a < rank; ++a) centre[static_cast<std::size_t>(a)] = 0.5 * (g.dims[static_cast<std::size_t>(a)] - 1);

  struct Blob {
    std::vector<double> c, r;
  };
  std::vector<Blob> blobs;
  {
    Blob outer{centre, {}};
    for (Index a = 0; a < rank; ++a)
      outer.r.push_back(g.dims[static_cast<std::size_t>(a)] * (a == 0 ? 0.38 : 0.32) * (0.95 + 0.1 * unit(rng)));
    blobs.push_back(outer);
  }
  const double phase = 2.0 * std::numbers::pi * unit(rng);
  for (int k = 2; k <= cfg.labels; ++k) {
    const double theta = phase + 2.0 * std::numbers::pi * (k - 2) / std::max(1, cfg.labels - 1);
    Blob b{centre, {}};
    const double offset = 0.17 * extent;
    b.c[static_cast<std::size_t>(rank - 2)] += offset * std::cos(theta);
    b.c[static_cast<std::size_t>(rank - 1)] += offset * std::sin(theta);
    const double radius = kBlob * extent * (0.9 + 0.2 * unit(rng));
    b.r.assign(static_cast<std::size_t>(rank), radius);
    blobs.push_back(b);
  }

  Anatomy out{LabelArray(g.dims, 0), Array(g.dims)};
  std::vector<Index> idx(static_cast<std::size_t>(rank), 0);
  for (Index v = 0; v < g.voxels(); ++v) {
    Index rest = v;
    for (Index a = rank - 1; a >= 0; --a) {
      idx[static_cast<std::size_t>(a)] = rest % g.dims[static_cast<std::size_t>(a)];
      rest /= g.dims[static_cast<std::size_t>(a)];
    }
    int label = 0;
    {
      // the outer region is a shell around an unlabelled core
      double sq = 0.0;
      for (std::size_t a = 0; a < idx.size(); ++a) {
        const double t = (idx[a] - blobs[0].c[a]) / blobs[0].r[a];
        sq += t * t;
      }
      const double r = std::sqrt(sq) + wobble[v];
      if (r < 1.0 && r >= kCore) label = 1;
    }
    for (std::size_t k = 1; k < blobs.size(); ++k) {
      double sq = 0.0;
      for (std::size_t a = 0; a < idx.size(); ++a) {
        const double t = (idx[a] - blobs[k].c[a]) / blobs[k].r[a];
        sq += t * t;
      }
      if (std::sqrt(sq) + wobble[v] < 1.0) label = static_cast<int>(k) + 1;
    }
    out.labels[v] = label;
  }

  Array texture = smooth_noise(g, 1, 2.0, rng);
  const double lo = texture.data().minCoeff();
  const double hi = texture.data().maxCoeff();
  texture.data() = hi > lo ? ((texture.data() - lo) / (hi - lo)).eval() : Array::Storage::Constant(texture.size(), 0.5);
  out.texture = texture.reshaped(g.dims);
  return out;
}

Array band_intensity(const LabelArray& labels, const Array& texture, int label_count) {
  Array out(labels.shape());
  for (Index v = 0; v < out.size(); ++v) {
    const auto [lo, hi] = label_band(labels[v], label_count);
    out[v] = lo + (hi - lo) * texture[v];
  }
  return out;
}

}  // namespace

PhantomGroup gen_phantoms(const PhantomConfig& cfg) {
  cfg.validate();
  const VolumeGeometry& g = cfg.geometry;
  const Anatomy base = base_anatomy(cfg);

  PhantomGroup group;
  group.center.geometry = g;
  group.center.intensities = band_intensity(base.labels, base.texture, cfg.labels);
  group.center.labels = base.labels;
  group.center.id = "center";

  // Velocities: blurred noise, centred across the group, one common scale.
  for (std::size_t i = 0; i < cfg.n; ++i) {
    Rng rng = stream(cfg.seed, i, 1);
    group.velocities.push_back(smooth_noise(g, g.rank(), cfg.smoothness, rng));
  }
  Array mean(group.velocities[0].shape());
  for (const Array& v : group.velocities) mean.data() += v.data();
  mean.data() /= static_cast<double>(cfg.n);
  double largest = 0.0;
  for (Array& v : group.velocities) {
    v.data() -= mean.data();
    largest = std::max(largest, max_vector_norm(v));
  }
  for (Array& v : group.velocities) {
    if (cfg.magnitude == 0.0 || largest == 0.0)
      v.data().setZero();
    else
      v.data() *= cfg.magnitude / largest;
  }

  NoGradGuard no_grad;
  const Tensor texture = Tensor::constant(as_batched(base.texture));
  const LabelArray labels = as_batched(base.labels);
  for (std::size_t i = 0; i < cfg.n; ++i) {
    const DeformationField phi = integrate_svf(velocity_field(Tensor::constant(group.velocities[i])));
    const LabelArray warped_labels = unbatched(warp_labels(labels, phi));
    const Array warped_texture = unbatched(warp(texture, phi).value());
    Array intensity = band_intensity(warped_labels, warped_texture, cfg.labels);
    if (cfg.noise > 0.0) {
      Rng rng = stream(cfg.seed, i, 2);
      std::normal_distribution<double> normal(0.0, 0.5 * cfg.noise);
      for (Index v = 0; v < intensity.size(); ++v) {
        const double e = std::clamp(normal(rng), -cfg.noise, cfg.noise);
        intensity[v] = std::clamp(intensity[v] + e, 0.0, 1.0);
      }
    }
    SubjectVolume s;
    s.geometry = g;
    s.intensities = std::move(intensity);
    s.labels = warped_labels;
    char id[32];
    std::snprintf(id, sizeof id, "subject_%03zu", i);
    s.id = id;
    group.subjects.push_back(std::move(s));
  }
  return group;
}

}  // namespace setgen
