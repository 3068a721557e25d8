#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "setgen/models.hpp"
#include "setgen/train.hpp"
#include "setgen/volume.hpp"

namespace setgen {

/// N >= 1 subjects on one grid.
struct SubjectGroup {
  std::vector<SubjectVolume> subjects;

  const VolumeGeometry& geometry() const;
  std::size_t size() const { return subjects.size(); }
  bool has_labels() const;
  void validate() const;
};

enum class TemplateMethod { setgen, setgen_plus, ave, naive_average };

std::string to_string(TemplateMethod m);
TemplateMethod template_method_from_string(const std::string& s);

/// Registration of one subject against a template. Every array is batched
/// ([1,...]); `inverse` warps the subject onto the template and
/// `displacement` is its displacement.
struct SubjectFields {
  std::string id;
  Array velocity;
  Array phi;
  Array inverse;
  Array displacement;
  Array warped;
  std::optional<LabelArray> warped_labels;
};

struct TemplateResult {
  Array templ;  ///< spatial dims, values in [0,1]
  std::vector<SubjectFields> fields;
  TemplateMethod method = TemplateMethod::setgen;
  double seconds = 0.0;
};

struct PipelineConfig {
  IntegrationConfig integration;
  FieldConvention convention = FieldConvention::template_moving;
};

/// Elementwise mean of equally shaped arrays. Each element is summed in
/// ascending value order, so the result does not depend on input order.
Array ordered_mean(const std::vector<const Array*>& arrays);
Array ordered_mean(const std::vector<Array>& arrays);

/// Registers every subject to `templ` (spatial dims) with the frozen network.
std::vector<SubjectFields> register_group(const SubjectGroup& group, const Array& templ, const RegNetParams& reg,
                                          const PipelineConfig& cfg = {});

/// decode(mean_i mu(I_i)) followed by register_group.
TemplateResult generate_template(const SubjectGroup& group, const VaeParams& vae, const RegNetParams& reg,
                                 const PipelineConfig& cfg = {});

/// One SETGen+ step: template <- mean of warped subjects, then re-register.
TemplateResult refine_template(const TemplateResult& result, const SubjectGroup& group, const RegNetParams& reg,
                               const PipelineConfig& cfg = {});

/// Iterative averaging: start from the voxel mean and `iters` times register
/// and re-average. Fields are those of the final template.
TemplateResult ave_baseline(const SubjectGroup& group, const RegNetParams& reg, int iters = 6,
                            const PipelineConfig& cfg = {});

/// Voxelwise mean of the group, registered like the other methods.
TemplateResult naive_average(const SubjectGroup& group, const RegNetParams& reg, const PipelineConfig& cfg = {});

/// Directory layout:
///   template.{json,raw}
///   fields/<id>_velocity, <id>_displacement, <id>_warped, <id>_warped_labels
///   template_manifest.json  {method, n, subjects, geometry}
void write_template_result(const std::filesystem::path& dir, const TemplateResult& result,
                           const VolumeGeometry& geometry);

/// Loads the template image and method tag (fields are not loaded).
TemplateResult read_template(const std::filesystem::path& dir);

}  // namespace setgen
