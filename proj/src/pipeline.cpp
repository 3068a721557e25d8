#include "setgen/pipeline.hpp"

#include <algorithm>
#include <chrono>

#include "setgen/checkpoint.hpp"
#include "setgen/parallel.hpp"

namespace setgen {

namespace fs = std::filesystem;

const VolumeGeometry& SubjectGroup::geometry() const {
  if (subjects.empty()) throw DataError("empty subject group");
  return subjects.front().geometry;
}

bool SubjectGroup::has_labels() const {
  return !subjects.empty() && std::all_of(subjects.begin(), subjects.end(), [](const SubjectVolume& s) {
    return s.labels.has_value();
  });
}

void SubjectGroup::validate() const {
  const VolumeGeometry& g = geometry();
  for (const SubjectVolume& s : subjects) {
    if (!s.geometry.same_domain(g))
      throw DataError("subject '" + s.id + "' has geometry " + shape_string(s.geometry.dims) + ", group uses " +
                      shape_string(g.dims));
    s.validate();
  }
}

std::string to_string(TemplateMethod m) {
  switch (m) {
    case TemplateMethod::setgen: return "setgen";
    case TemplateMethod::setgen_plus: return "setgen+";
    case TemplateMethod::ave: return "ave";
    case TemplateMethod::naive_average: return "naive-average";
  }
  return "setgen";
}

TemplateMethod template_method_from_string(const std::string& s) {
  if (s == "setgen") return TemplateMethod::setgen;
  if (s == "setgen+") return TemplateMethod::setgen_plus;
  if (s == "ave") return TemplateMethod::ave;
  if (s == "naive-average") return TemplateMethod::naive_average;
  throw DataError("unknown template method '" + s + "'");
}

Array ordered_mean(const std::vector<const Array*>& arrays) {
  if (arrays.empty()) throw DataError("ordered_mean of an empty list");
  const Shape& shape = arrays.front()->shape();
  for (const Array* a : arrays)
    if (a->shape() != shape) throw ShapeError("ordered_mean", "shape", shape_string(a->shape()) + " vs " + shape_string(shape));
  Array out(shape);
  std::vector<double> column(arrays.size());
  const auto n = static_cast<double>(arrays.size());
  for (Index e = 0; e < out.size(); ++e) {
    for (std::size_t i = 0; i < arrays.size(); ++i) column[i] = (*arrays[i])[e];
    std::sort(column.begin(), column.end());
    double acc = 0.0;
    for (double v : column) acc += v;
    out[e] = acc / n;
  }
  return out;
}

Array ordered_mean(const std::vector<Array>& arrays) {
  std::vector<const Array*> ptrs;
  for (const Array& a : arrays) ptrs.push_back(&a);
  return ordered_mean(ptrs);
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

void check_template(const SubjectGroup& group, const Array& templ) {
  if (templ.shape() != group.geometry().dims)
    throw DataError("template shape " + shape_string(templ.shape()) + " does not match group geometry " +
                    shape_string(group.geometry().dims));
}

Array mean_intensity(const SubjectGroup& group) {
  std::vector<const Array*> ptrs;
  for (const SubjectVolume& s : group.subjects) ptrs.push_back(&s.intensities);
  return ordered_mean(ptrs);
}

Array mean_warped(const std::vector<SubjectFields>& fields) {
  std::vector<const Array*> ptrs;
  for (const SubjectFields& f : fields) ptrs.push_back(&f.warped);
  return unbatched(ordered_mean(ptrs));
}

}  // namespace

std::vector<SubjectFields> register_group(const SubjectGroup& group, const Array& templ, const RegNetParams& reg,
                                          const PipelineConfig& cfg) {
  group.validate();
  check_template(group, templ);
  cfg.integration.validate();
  const Array templ_batched = as_batched(templ);
  std::vector<SubjectFields> out(group.size());
  parallel_for(group.size(), [&](std::size_t i) {
    NoGradGuard no_grad;
    const SubjectVolume& s = group.subjects[i];
    const Tensor t = Tensor::constant(templ_batched);
    const Tensor subject = Tensor::constant(s.batched());
    DeformationField phi, inv;
    VelocityField v;
    if (cfg.convention == FieldConvention::template_moving) {
      v = predict_velocity(t, subject, reg);
      phi = integrate_svf(v, cfg.integration);
      inv = invert(v, cfg.integration);
    } else {
      v = predict_velocity(subject, t, reg);
      inv = integrate_svf(v, cfg.integration);
      phi = invert(v, cfg.integration);
    }
    SubjectFields& f = out[i];
    f.id = s.id;
    f.velocity = v.values.value();
    f.phi = phi.map.value();
    f.inverse = inv.map.value();
    f.displacement = displacement_of(inv).values.value();
    f.warped = warp(subject, inv).value();
    if (s.labels) f.warped_labels = warp_labels(as_batched(*s.labels), inv);
  });
  return out;
}

TemplateResult generate_template(const SubjectGroup& group, const VaeParams& vae, const RegNetParams& reg,
                                 const PipelineConfig& cfg) {
  const auto start = Clock::now();
  group.validate();
  const VolumeGeometry& g = group.geometry();
  // Throws if the grid is not divisible by the encoder's downsampling.
  (void)vae.config.latent_shape(g, 1);
  std::vector<Array> codes(group.size());
  parallel_for(group.size(), [&](std::size_t i) {
    NoGradGuard no_grad;
    codes[i] = encode(Tensor::constant(group.subjects[i].batched()), vae).mu.value();
  });
  TemplateResult r;
  {
    NoGradGuard no_grad;
    r.templ = unbatched(decode(Tensor::constant(ordered_mean(codes)), vae).value());
  }
  r.fields = register_group(group, r.templ, reg, cfg);
  r.method = TemplateMethod::setgen;
  r.seconds = seconds_since(start);
  return r;
}

TemplateResult refine_template(const TemplateResult& result, const SubjectGroup& group, const RegNetParams& reg,
                               const PipelineConfig& cfg) {
  const auto start = Clock::now();
  check_template(group, result.templ);
  const std::vector<SubjectFields> current =
      result.fields.size() == group.size() ? result.fields : register_group(group, result.templ, reg, cfg);
  TemplateResult r;
  r.templ = mean_warped(current);
  r.fields = register_group(group, r.templ, reg, cfg);
  r.method = TemplateMethod::setgen_plus;
  r.seconds = result.seconds + seconds_since(start);
  return r;
}

TemplateResult ave_baseline(const SubjectGroup& group, const RegNetParams& reg, int iters, const PipelineConfig& cfg) {
  if (iters < 0) throw Error(ErrorKind::usage, "ave_baseline: iteration count must be >= 0");
  const auto start = Clock::now();
  group.validate();
  TemplateResult r;
  r.templ = mean_intensity(group);
  for (int it = 0; it < iters; ++it) r.templ = mean_warped(register_group(group, r.templ, reg, cfg));
  r.fields = register_group(group, r.templ, reg, cfg);
  r.method = TemplateMethod::ave;
  r.seconds = seconds_since(start);
  return r;
}

TemplateResult naive_average(const SubjectGroup& group, const RegNetParams& reg, const PipelineConfig& cfg) {
  TemplateResult r = ave_baseline(group, reg, 0, cfg);
  r.method = TemplateMethod::naive_average;
  return r;
}

void write_template_result(const fs::path& dir, const TemplateResult& result, const VolumeGeometry& geometry) {
  fs::create_directories(dir / "fields");
  write_volume(dir / "template", result.templ, VolumeKind::image, geometry.spacing);
  nlohmann::json subjects = nlohmann::json::array();
  for (const SubjectFields& f : result.fields) {
    const fs::path base = dir / "fields" / f.id;
    auto spatial_field = [](const Array& a) { return a.reshaped(Shape(a.shape().begin() + 1, a.shape().end())); };
    write_volume(base.string() + "_velocity", spatial_field(f.velocity), VolumeKind::velocity, geometry.spacing);
    write_volume(base.string() + "_displacement", spatial_field(f.displacement), VolumeKind::displacement,
                 geometry.spacing);
    write_volume(base.string() + "_warped", unbatched(f.warped), VolumeKind::image, geometry.spacing);
    if (f.warped_labels) write_labels(base.string() + "_warped_labels", unbatched(*f.warped_labels), geometry.spacing);
    subjects.push_back(f.id);
  }
  const nlohmann::json manifest = {{"format", "setgen-template"},
                                   {"method", to_string(result.method)},
                                   {"n", result.fields.size()},
                                   {"subjects", subjects},
                                   {"shape", geometry.dims},
                                   {"spacing", geometry.spacing}};
  write_file_atomic(dir / "template_manifest.json", manifest.dump(2) + "\n");
}

TemplateResult read_template(const fs::path& dir) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file(dir / "template_manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw DataError((dir / "template_manifest.json").string() + ": " + e.what());
  }
  StoredVolume v = read_volume(dir / "template");
  if (v.kind != VolumeKind::image) throw DataError((dir / "template").string() + ": not an image volume");
  TemplateResult r;
  r.templ = std::move(v.values);
  r.method = template_method_from_string(manifest.value("method", "setgen"));
  return r;
}

}  // namespace setgen
