#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "setgen/pipeline.hpp"

namespace setgen {

struct DiceTable {
  double mean = 0.0;
  std::vector<int> labels;
  std::vector<double> per_label;  ///< aligned with `labels`
};

/// Mean over all N^2 ordered pairs (i = j included) and the given labels of
/// 2|A∩B| / (|A|+|B|). A label absent from both maps scores 1, absent from
/// one scores 0. Needs at least 2 maps of one shape.
DiceTable pairwise_dice(const std::vector<LabelArray>& maps, const std::vector<int>& labels);

/// Labels 1..max over all maps.
std::vector<int> foreground_labels(const std::vector<LabelArray>& maps);

/// ||mean_i u_i||_2 over every voxel and component. With `normalized` the
/// norm is divided by sqrt(voxels).
double centrality(const std::vector<Array>& fields, bool normalized = false);

/// mean_i ||u_i||_2, same normalisation rule as centrality.
double avg_disp(const std::vector<Array>& fields, bool normalized = false);

struct GroupEvalReport {
  std::string method;
  std::size_t n = 0;
  int label_count = 0;
  double dice = 0.0;
  std::vector<int> labels;
  std::vector<double> per_label_dice;
  double centrality = 0.0;
  double avg_disp = 0.0;
  bool normalized = false;
  double runtime_seconds = 0.0;

  bool operator==(const GroupEvalReport&) const = default;
};

struct EvalConfig {
  PipelineConfig pipeline;
  bool normalized = false;
};

/// Registers the group if `result` has no fields for it, then scores the
/// warped labels and subject->template displacements.
GroupEvalReport evaluate(const SubjectGroup& group, const TemplateResult& result, const RegNetParams& reg,
                         const EvalConfig& cfg = {});

nlohmann::json to_json(const GroupEvalReport& r);
GroupEvalReport eval_report_from_json(const nlohmann::json& j);
/// "label,dice" rows.
std::string per_label_csv(const GroupEvalReport& r);

}  // namespace setgen
