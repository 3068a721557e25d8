#include "setgen/deform.hpp"

#include <cmath>
#include <string>

#include "setgen/kernels.hpp"

namespace setgen {

VolumeGeometry::VolumeGeometry(Shape dims_, std::vector<double> spacing_)
    : dims(std::move(dims_)), spacing(std::move(spacing_)) {
  if (dims.size() != 2 && dims.size() != 3)
    throw ShapeError("VolumeGeometry", "rank", "spatial rank must be 2 or 3, got " + std::to_string(dims.size()));
  for (std::size_t a = 0; a < dims.size(); ++a)
    if (dims[a] < 4)
      throw ShapeError("VolumeGeometry", "spatial[" + std::to_string(a) + "]",
                       "extent " + std::to_string(dims[a]) + " below 4");
  if (spacing.empty()) spacing.assign(dims.size(), 1.0);
  if (spacing.size() != dims.size())
    throw ShapeError("VolumeGeometry", "spacing", "expected " + std::to_string(dims.size()) + " entries");
}

Shape VolumeGeometry::tensor_shape(Index batch, Index channels) const {
  Shape s{batch, channels};
  s.insert(s.end(), dims.begin(), dims.end());
  return s;
}

VolumeGeometry VolumeGeometry::of(const Shape& tensor_shape) {
  if (tensor_shape.size() < 4) throw ShapeError("VolumeGeometry", "rank", shape_string(tensor_shape));
  return VolumeGeometry(Shape(tensor_shape.begin() + 2, tensor_shape.end()));
}

void IntegrationConfig::validate() const {
  if (steps < 1 || steps > 12)
    throw Error(ErrorKind::usage, "integration steps must lie in [1, 12], got " + std::to_string(steps));
}

Array identity_grid(const VolumeGeometry& geometry, Index batch) {
  const Index d = geometry.rank();
  Array grid(geometry.tensor_shape(batch, d));
  const Index vox = geometry.voxels();
  for (Index a = 0; a < d; ++a) {
    Index inner = 1;
    for (Index o = a + 1; o < d; ++o) inner *= geometry.dims[static_cast<std::size_t>(o)];
    const Index n = geometry.dims[static_cast<std::size_t>(a)];
    for (Index v = 0; v < vox; ++v) {
      const double coord = static_cast<double>((v / inner) % n);
      for (Index b = 0; b < batch; ++b) grid[(b * d + a) * vox + v] = coord;
    }
  }
  return grid;
}

namespace {

void check_field(const char* op, const Tensor& t) {
  const Shape& s = t.shape();
  if (s.size() != 4 && s.size() != 5) throw ShapeError(op, "rank", "field must be [B,d,spatial...], got " + shape_string(s));
  if (s[1] != static_cast<Index>(s.size()) - 2)
    throw ShapeError(op, "channels", "field of rank " + std::to_string(s.size() - 2) + " needs that many channels, has " +
                                         std::to_string(s[1]));
}

void check_same(const char* op, const VolumeGeometry& a, const VolumeGeometry& b) {
  if (!a.same_domain(b)) throw ShapeError(op, "geometry", shape_string(a.dims) + " vs " + shape_string(b.dims));
}

Tensor identity_tensor(const VolumeGeometry& geometry, Index batch) {
  return Tensor::constant(identity_grid(geometry, batch));
}

}  // namespace

VelocityField velocity_field(Tensor values) {
  check_field("velocity_field", values);
  return {VolumeGeometry::of(values.shape()), std::move(values)};
}

DisplacementField displacement_field(Tensor values) {
  check_field("displacement_field", values);
  return {VolumeGeometry::of(values.shape()), std::move(values)};
}

DeformationField identity_deformation(const VolumeGeometry& geometry, Index batch) {
  return {geometry, identity_tensor(geometry, batch)};
}

DeformationField deformation_from_displacement(const DisplacementField& u) {
  return {u.geometry, u.values + identity_tensor(u.geometry, u.values.dim(0))};
}

DeformationField integrate_svf(const VelocityField& v, const IntegrationConfig& cfg) {
  cfg.validate();
  check_field("integrate_svf", v.values);
  const Index batch = v.values.dim(0);
  const Tensor id = identity_tensor(v.geometry, batch);
  Tensor u = std::ldexp(1.0, -cfg.steps) * v.values;
  for (int k = 0; k < cfg.steps; ++k) u = u + grid_sample(u, id + u);
  return {v.geometry, id + u};
}

DeformationField invert(const VelocityField& v, const IntegrationConfig& cfg) {
  return integrate_svf({v.geometry, -v.values}, cfg);
}

DeformationField compose(const DeformationField& f, const DeformationField& g) {
  check_same("compose", f.geometry, g.geometry);
  const DisplacementField uf = displacement_of(f);
  return {g.geometry, g.map + grid_sample(uf.values, g.map)};
}

Tensor warp(const Tensor& image, const DeformationField& phi) {
  const VolumeGeometry img = VolumeGeometry::of(image.shape());
  check_same("warp", img, phi.geometry);
  return grid_sample(image, phi.map);
}

LabelArray warp_labels(const LabelArray& labels, const DeformationField& phi) {
  const auto g = kernels::sample_geometry("warp_labels", labels.shape(), phi.map.shape());
  LabelArray out(labels.shape());
  kernels::sample_nearest(labels.ptr(), phi.map.value().ptr(), g, out.ptr());
  return out;
}

DisplacementField displacement_of(const DeformationField& phi) {
  return {phi.geometry, phi.map - identity_tensor(phi.geometry, phi.map.dim(0))};
}

}  // namespace setgen
