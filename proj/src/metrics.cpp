#include "setgen/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>

#include "setgen/parallel.hpp"

namespace setgen {

namespace {

double sorted_sum(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  double acc = 0.0;
  for (double x : v) acc += x;
  return acc;
}

double pair_term(Index inter, Index a, Index b) {
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

}  // namespace

std::vector<int> foreground_labels(const std::vector<LabelArray>& maps) {
  int top = 0;
  for (const LabelArray& m : maps) top = std::max(top, m.data().maxCoeff());
  std::vector<int> out;
  for (int k = 1; k <= top; ++k) out.push_back(k);
  return out;
}

DiceTable pairwise_dice(const std::vector<LabelArray>& maps, const std::vector<int>& labels) {
  if (maps.size() < 2) throw DataError("pairwise Dice needs at least 2 label maps");
  if (labels.empty()) throw DataError("pairwise Dice needs at least one label");
  for (const LabelArray& m : maps)
    if (m.shape() != maps.front().shape())
      throw ShapeError("pairwise_dice", "shape", shape_string(m.shape()) + " vs " + shape_string(maps.front().shape()));

  const std::size_t n = maps.size();
  const std::size_t nl = labels.size();
  std::map<int, std::size_t> slot;
  for (std::size_t k = 0; k < nl; ++k) slot[labels[k]] = k;
  auto slot_of = [&](int label) -> long {
    const auto it = slot.find(label);
    return it == slot.end() ? -1 : static_cast<long>(it->second);
  };

  std::vector<std::vector<Index>> volume(n, std::vector<Index>(nl, 0));
  for (std::size_t i = 0; i < n; ++i)
    for (Index v = 0; v < maps[i].size(); ++v)
      if (const long k = slot_of(maps[i][v]); k >= 0) ++volume[i][static_cast<std::size_t>(k)];

  // terms[k][i*n+j]; off-diagonal pairs are symmetric so only i<j is counted.
  std::vector<std::vector<double>> terms(nl, std::vector<double>(n * n, 0.0));
  parallel_for(n, [&](std::size_t i) {
    std::vector<Index> inter(nl);
    for (std::size_t j = i; j < n; ++j) {
      std::fill(inter.begin(), inter.end(), 0);
      const LabelArray& a = maps[i];
      const LabelArray& b = maps[j];
      for (Index v = 0; v < a.size(); ++v)
        if (a[v] == b[v])
          if (const long k = slot_of(a[v]); k >= 0) ++inter[static_cast<std::size_t>(k)];
      for (std::size_t k = 0; k < nl; ++k) {
        const double t = pair_term(inter[k], volume[i][k], volume[j][k]);
        terms[k][i * n + j] = t;
        terms[k][j * n + i] = t;
      }
    }
  });

  DiceTable t;
  t.labels = labels;
  const auto pairs = static_cast<double>(n * n);
  for (std::size_t k = 0; k < nl; ++k) t.per_label.push_back(sorted_sum(terms[k]) / pairs);
  t.mean = sorted_sum(t.per_label) / static_cast<double>(nl);
  return t;
}

double centrality(const std::vector<Array>& fields, bool normalized) {
  if (fields.empty()) throw DataError("centrality of an empty field list");
  const Array mean = ordered_mean(fields);
  double sq = 0.0;
  for (Index e = 0; e < mean.size(); ++e) sq += mean[e] * mean[e];
  double norm = std::sqrt(sq);
  if (normalized) norm /= std::sqrt(static_cast<double>(mean.size() / mean.dim(1) / mean.dim(0)));
  return norm;
}

double avg_disp(const std::vector<Array>& fields, bool normalized) {
  if (fields.empty()) throw DataError("avg_disp of an empty field list");
  std::vector<double> norms;
  for (const Array& u : fields) {
    if (u.shape() != fields.front().shape())
      throw ShapeError("avg_disp", "shape", shape_string(u.shape()) + " vs " + shape_string(fields.front().shape()));
    double n = std::sqrt(u.data().square().sum());
    if (normalized) n /= std::sqrt(static_cast<double>(u.size() / u.dim(1) / u.dim(0)));
    norms.push_back(n);
  }
  return sorted_sum(norms) / static_cast<double>(fields.size());
}

GroupEvalReport evaluate(const SubjectGroup& group, const TemplateResult& result, const RegNetParams& reg,
                         const EvalConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  group.validate();
  const std::vector<SubjectFields> fields =
      result.fields.size() == group.size() ? result.fields : register_group(group, result.templ, reg, cfg.pipeline);

  GroupEvalReport r;
  r.method = to_string(result.method);
  r.n = group.size();
  r.normalized = cfg.normalized;

  std::vector<Array> displacements;
  for (const SubjectFields& f : fields) displacements.push_back(f.displacement);
  r.centrality = centrality(displacements, cfg.normalized);
  r.avg_disp = avg_disp(displacements, cfg.normalized);

  if (group.has_labels() && group.size() >= 2) {
    std::vector<LabelArray> warped;
    for (const SubjectFields& f : fields) {
      if (!f.warped_labels) throw DataError("subject '" + f.id + "' has labels but no warped label map");
      warped.push_back(*f.warped_labels);
    }
    std::vector<LabelArray> originals;
    for (const SubjectVolume& s : group.subjects) originals.push_back(*s.labels);
    r.labels = foreground_labels(originals);
    r.label_count = static_cast<int>(r.labels.size());
    if (!r.labels.empty()) {
      const DiceTable d = pairwise_dice(warped, r.labels);
      r.dice = d.mean;
      r.per_label_dice = d.per_label;
    }
  }
  r.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

nlohmann::json to_json(const GroupEvalReport& r) {
  nlohmann::json per = nlohmann::json::object();
  for (std::size_t k = 0; k < r.labels.size(); ++k) per[std::to_string(r.labels[k])] = r.per_label_dice[k];
  return {{"method", r.method},
          {"n", r.n},
          {"label_count", r.label_count},
          {"dice", r.dice},
          {"labels", r.labels},
          {"per_label_dice", r.per_label_dice},
          {"per_label", per},
          {"centrality", r.centrality},
          {"avg_disp", r.avg_disp},
          {"normalized", r.normalized},
          {"runtime_seconds", r.runtime_seconds}};
}

GroupEvalReport eval_report_from_json(const nlohmann::json& j) {
  try {
    GroupEvalReport r;
    r.method = j.at("method").get<std::string>();
    r.n = j.at("n").get<std::size_t>();
    r.label_count = j.at("label_count").get<int>();
    r.dice = j.at("dice").get<double>();
    r.labels = j.at("labels").get<std::vector<int>>();
    r.per_label_dice = j.at("per_label_dice").get<std::vector<double>>();
    r.centrality = j.at("centrality").get<double>();
    r.avg_disp = j.at("avg_disp").get<double>();
    r.normalized = j.at("normalized").get<bool>();
    r.runtime_seconds = j.at("runtime_seconds").get<double>();
    if (r.labels.size() != r.per_label_dice.size()) throw DataError("labels and per_label_dice differ in length");
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("eval report: ") + e.what());
  }
}

std::string per_label_csv(const GroupEvalReport& r) {
  std::string out = "label,dice\n";
  char line[64];
  for (std::size_t k = 0; k < r.labels.size(); ++k) {
    std::snprintf(line, sizeof line, "%d,%.17g\n", r.labels[k], r.per_label_dice[k]);
    out += line;
  }
  return out;
}

}  // namespace setgen
