#pragma once

#include <vector>

#include "setgen/tensor.hpp"

namespace setgen {

/// Voxel domain of a volume: 2 or 3 spatial axes, each at least 4 voxels.
struct VolumeGeometry {
  Shape dims;
  std::vector<double> spacing;

  VolumeGeometry() = default;
  explicit VolumeGeometry(Shape dims_, std::vector<double> spacing_ = {});

  Index rank() const { return static_cast<Index>(dims.size()); }
  Index voxels() const { return shape_size(dims); }
  /// [batch, channels, dims...]
  Shape tensor_shape(Index batch, Index channels) const;
  bool same_domain(const VolumeGeometry& other) const { return dims == other.dims; }

  /// Geometry of a [B,C,spatial...] shape.
  static VolumeGeometry of(const Shape& tensor_shape);
};

/// Stationary velocity v, [B,d,spatial...], voxels per unit time.
struct VelocityField {
  VolumeGeometry geometry;
  Tensor values;
};

/// Displacement u with phi(x) = x + u(x), [B,d,spatial...], voxels.
struct DisplacementField {
  VolumeGeometry geometry;
  Tensor values;
};

/// Absolute target coordinates phi(x), [B,d,spatial...], voxel units.
struct DeformationField {
  VolumeGeometry geometry;
  Tensor map;
};

struct IntegrationConfig {
  int steps = 7;  ///< squarings; the flow is integrated over t in [0, 1]
  void validate() const;
};

/// Identity coordinate grid [batch, d, dims...]; channel a holds the index
/// along spatial axis a.
Array identity_grid(const VolumeGeometry& geometry, Index batch);

VelocityField velocity_field(Tensor values);
DisplacementField displacement_field(Tensor values);

DeformationField identity_deformation(const VolumeGeometry& geometry, Index batch);
DeformationField deformation_from_displacement(const DisplacementField& u);

/// exp(v) by scaling and squaring: u = v / 2^K, then K times
/// u <- u + u(x + u(x)); returns x + u.
DeformationField integrate_svf(const VelocityField& v, const IntegrationConfig& cfg = {});

/// phi^{-1} = exp(-v).
DeformationField invert(const VelocityField& v, const IntegrationConfig& cfg = {});

/// (f o g)(x) = f(g(x)), evaluated as g(x) + u_f(g(x)) so that clamped
/// samples outside the domain keep f's border displacement.
DeformationField compose(const DeformationField& f, const DeformationField& g);

/// image o phi, same shape as image.
Tensor warp(const Tensor& image, const DeformationField& phi);

/// Nearest-neighbour warp of an integer label volume [B,1,spatial...].
LabelArray warp_labels(const LabelArray& labels, const DeformationField& phi);

/// u = phi - id.
DisplacementField displacement_of(const DeformationField& phi);

}  // namespace setgen
