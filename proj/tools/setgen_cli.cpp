// setgen: command-line front end for phantom generation, training, template
// construction, evaluation and slice export.

#include <glob.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "setgen/checkpoint.hpp"
#include "setgen/metrics.hpp"
#include "setgen/parallel.hpp"
#include "setgen/phantom.hpp"
#include "setgen/pipeline.hpp"
#include "setgen/train.hpp"
#include "setgen/volume.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace setgen;

namespace {

constexpr const char* kVersion = "0.1.0";

using Clock = std::chrono::steady_clock;

struct Common {
  std::size_t threads = 0;  // 0: SETGEN_THREADS or 1
  std::uint64_t seed = 0;
};

/// Written next to each command's primary output once the command succeeds.
struct RunManifest {
  std::string subcommand;
  json config = json::object();
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  json timings = json::object();

  void write(const fs::path& path, const Common& common, Clock::time_point start) {
    timings["wall_seconds"] = std::chrono::duration<double>(Clock::now() - start).count();
    const json j = {{"subcommand", subcommand},
                    {"tool_version", kVersion},
                    {"seed", common.seed},
                    {"threads", thread_count()},
                    {"config", config},
                    {"inputs", inputs},
                    {"outputs", outputs},
                    {"timings", timings}};
    write_file_atomic(path, j.dump(2) + "\n");
  }
};

fs::path sibling(const fs::path& p, const std::string& suffix) {
  fs::path out = p;
  out += suffix;
  return out;
}

std::vector<Index> parse_size(const std::string& text) {
  std::vector<Index> dims;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      std::size_t used = 0;
      const long v = std::stol(part, &used);
      if (used != part.size() || v < 1) throw std::invalid_argument(part);
      dims.push_back(v);
    } catch (const std::exception&) {
      throw Error(ErrorKind::usage, "--size: '" + text + "' is not a list of positive integers");
    }
  }
  if (dims.size() == 1) dims.push_back(dims[0]);
  if (dims.size() < 2 || dims.size() > 3) throw Error(ErrorKind::usage, "--size takes 1 to 3 comma-separated extents");
  return dims;
}

/// Volume bases matching a glob, sorted by path. Accepts patterns matching
/// the .json sidecars, the .raw blobs or both, and .nii images.
std::vector<fs::path> expand_glob(const std::string& pattern) {
  glob_t g{};
  const int rc = ::glob(pattern.c_str(), 0, nullptr, &g);
  std::set<std::string> bases;
  if (rc == 0)
    for (std::size_t i = 0; i < g.gl_pathc; ++i) {
      const fs::path p(g.gl_pathv[i]);
      if (p.extension() == ".nii") bases.insert(p.string());
      else if (p.extension() == ".json" || p.extension() == ".raw") bases.insert(volume_base(p).string());
    }
  globfree(&g);
  if (bases.empty()) throw DataError("no volumes match '" + pattern + "'");
  return {bases.begin(), bases.end()};
}

/// Subject image bases in a data directory (its subjects/ subdirectory if present).
std::vector<fs::path> data_images(const fs::path& dir) {
  const fs::path root = fs::is_directory(dir / "subjects") ? dir / "subjects" : dir;
  if (!fs::is_directory(root)) throw DataError("data directory '" + dir.string() + "' does not exist");
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.path().extension() == ".nii") out.push_back(entry.path());
    if (entry.path().extension() != ".json") continue;
    const json sidecar = json::parse(read_file(entry.path()), nullptr, false);
    if (!sidecar.is_discarded() && sidecar.value("kind", "") == "image") out.push_back(volume_base(entry.path()));
  }
  std::sort(out.begin(), out.end());
  if (out.size() < 2) throw DataError("data directory '" + root.string() + "' holds fewer than 2 images");
  return out;
}

std::vector<Array> load_images(const std::vector<fs::path>& paths) {
  std::vector<Array> images;
  std::optional<Shape> shape;
  for (const fs::path& p : paths) {
    SubjectVolume s = load_subject(p);
    if (shape && *shape != s.geometry.dims)
      throw DataError(p.string() + ": shape " + shape_string(s.geometry.dims) + " differs from " + shape_string(*shape));
    shape = s.geometry.dims;
    images.push_back(s.batched());
  }
  return images;
}

SubjectGroup load_group(const std::vector<fs::path>& images, const std::vector<fs::path>& labels) {
  if (!labels.empty() && labels.size() != images.size())
    throw DataError(std::to_string(images.size()) + " images but " + std::to_string(labels.size()) + " label maps");
  SubjectGroup group;
  for (std::size_t i = 0; i < images.size(); ++i)
    group.subjects.push_back(load_subject(images[i], labels.empty() ? std::nullopt : std::optional(labels[i])));
  group.validate();
  return group;
}

std::vector<std::string> strings(const std::vector<fs::path>& paths) {
  std::vector<std::string> out;
  for (const auto& p : paths) out.push_back(p.string());
  return out;
}

class JsonLines {
 public:
  explicit JsonLines(const fs::path& path) : path_(path), tmp_(sibling(path, ".partial")), out_(tmp_, std::ios::binary) {
    if (!out_) throw DataError("cannot open log " + tmp_.string());
  }
  void write(const json& j) { out_ << j.dump() << '\n'; }
  void commit() {
    out_.close();
    fs::rename(tmp_, path_);
  }

 private:
  fs::path path_, tmp_;
  std::ofstream out_;
};

// ---------------------------------------------------------------------------

struct GenPhantomsArgs {
  std::string out;
  std::size_t n = 16;
  std::string size = "64,64";
  int labels = 4;
  double magnitude = 6.0;
  double noise = 0.02;
  double smoothness = 8.0;
  std::uint64_t anatomy_seed = 0;
};

void run_gen_phantoms(const GenPhantomsArgs& a, const Common& common) {
  const auto start = Clock::now();
  PhantomConfig cfg;
  cfg.n = a.n;
  cfg.geometry = VolumeGeometry(parse_size(a.size));
  cfg.labels = a.labels;
  cfg.magnitude = a.magnitude;
  cfg.noise = a.noise;
  cfg.smoothness = a.smoothness;
  cfg.seed = common.seed;
  cfg.anatomy_seed = a.anatomy_seed;
  const PhantomGroup group = gen_phantoms(cfg);

  const fs::path out(a.out);
  fs::create_directories(out / "subjects");
  fs::create_directories(out / "labels");
  RunManifest m;
  m.subcommand = "gen-phantoms";
  for (const SubjectVolume& s : group.subjects) {
    write_volume(out / "subjects" / s.id, s.intensities, VolumeKind::image);
    write_labels(out / "labels" / s.id, *s.labels);
    m.outputs.push_back((out / "subjects" / s.id).string());
  }
  write_volume(out / "center", group.center.intensities, VolumeKind::image);
  write_labels(out / "center_labels", *group.center.labels);
  m.outputs.push_back((out / "center").string());
  m.config = {{"n", cfg.n},           {"size", cfg.geometry.dims}, {"labels", cfg.labels},
              {"magnitude", cfg.magnitude}, {"noise", cfg.noise}, {"smoothness", cfg.smoothness},
              {"anatomy_seed", cfg.anatomy_seed}};
  m.write(out / "run_manifest.json", common, start);
}

struct PretrainArgs {
  std::string data;
  std::size_t iters = 2000;
  std::string out;
  double lr = 1e-3;
  double smoothness = 0.01;
  std::string log;
};

void run_pretrain(const PretrainArgs& a, const Common& common) {
  const auto start = Clock::now();
  const std::vector<fs::path> paths = data_images(a.data);
  const std::vector<Array> images = load_images(paths);
  RegPretrainConfig cfg;
  cfg.iterations = a.iters;
  cfg.seed = common.seed;
  cfg.lr = a.lr;
  cfg.smoothness = a.smoothness;
  cfg.network.spatial_rank = images.front().rank() - 2;

  const fs::path out(a.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  const fs::path log_path = a.log.empty() ? sibling(out, ".log.jsonl") : fs::path(a.log);
  JsonLines log(log_path);
  const RegNetParams reg =
      pretrain_registration(images, cfg, [&](const RegPretrainRecord& r) { log.write(to_json(r)); });
  log.commit();

  const RegistrationQuality q = evaluate_registration(reg, images, sample_pairs(images.size(), common.seed + 3, 32),
                                                      cfg.integration);
  const json config = {{"iterations", cfg.iterations},
                       {"lr", cfg.lr},
                       {"smoothness", cfg.smoothness},
                       {"integration_steps", cfg.integration.steps},
                       {"seed", cfg.seed}};
  save_checkpoint(out, make_checkpoint(reg, {{"training", config}}));

  RunManifest m;
  m.subcommand = "pretrain-reg";
  m.config = config;
  m.config["validation"] = {{"warped_mse", q.warped_mse}, {"unregistered_mse", q.unregistered_mse}, {"ratio", q.ratio()}};
  m.inputs = strings(paths);
  m.outputs = {out.string(), log_path.string()};
  m.write(sibling(out, ".manifest.json"), common, start);
}

struct TrainArgs {
  std::string data;
  std::string reg;
  std::size_t epochs = 3;
  std::size_t iters_per_epoch = 0;
  LossWeights weights;
  double lr = 1e-4;
  std::string out;
  std::string log;
  std::size_t checkpoint_every = 0;
};

void run_train(const TrainArgs& a, const Common& common) {
  const auto start = Clock::now();
  const std::vector<fs::path> paths = data_images(a.data);
  const std::vector<Array> images = load_images(paths);
  const RegNetParams reg = regnet_from_checkpoint(load_checkpoint(a.reg));

  TrainConfig cfg;
  cfg.epochs = a.epochs;
  cfg.iterations_per_epoch = a.iters_per_epoch;
  cfg.seed = common.seed;
  cfg.siamese.weights = a.weights;
  cfg.schedule.base_lr = a.lr;
  cfg.checkpoint_every = a.checkpoint_every;
  cfg.network.spatial_rank = images.front().rank() - 2;
  if (reg.config.spatial_rank != cfg.network.spatial_rank)
    throw DataError("registration checkpoint is " + std::to_string(reg.config.spatial_rank) + "-D, data is " +
                    std::to_string(cfg.network.spatial_rank) + "-D");
  (void)cfg.network.latent_shape(VolumeGeometry::of(images.front().shape()), 1);
  cfg.validate();

  const fs::path out(a.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  const fs::path log_path = a.log.empty() ? sibling(out, ".log.jsonl") : fs::path(a.log);
  const json config = {{"epochs", cfg.epochs},
                       {"iterations_per_epoch", cfg.iterations_per_epoch},
                       {"weights", to_json(cfg.siamese.weights)},
                       {"base_lr", cfg.schedule.base_lr},
                       {"min_lr", cfg.schedule.min_lr},
                       {"restart_period_epochs", cfg.schedule.period},
                       {"integration_steps", cfg.siamese.integration.steps},
                       {"seed", cfg.seed}};

  VaeParams vae = init_vae(cfg.network, common.seed);
  JsonLines log(log_path);
  TrainCallbacks callbacks;
  callbacks.on_iteration = [&](const TrainRecord& r) { log.write(to_json(r)); };
  callbacks.on_checkpoint = [&](const VaeParams& p, std::size_t it) {
    save_checkpoint(sibling(out, "." + std::to_string(it)),
                    make_checkpoint(p, {{"training", config}, {"iteration", it}}));
  };
  std::size_t finished = 0;
  TrainCallbacks counting = callbacks;
  counting.on_iteration = [&](const TrainRecord& r) {
    callbacks.on_iteration(r);
    finished = r.iter + 1;
  };
  try {
    train_siamese(vae, reg, images, cfg, counting);
  } catch (const NumericalError&) {
    // Keep the last good parameters for inspection, then fail.
    log.commit();
    save_checkpoint(sibling(out, ".diverged"), make_checkpoint(vae, {{"training", config}, {"iteration", finished}}));
    throw;
  }
  log.commit();
  save_checkpoint(out, make_checkpoint(vae, {{"training", config}, {"iteration", finished}}));

  RunManifest m;
  m.subcommand = "train";
  m.config = config;
  m.config["reg"] = a.reg;
  m.inputs = strings(paths);
  m.inputs.push_back(a.reg);
  m.outputs = {out.string(), log_path.string()};
  m.write(sibling(out, ".manifest.json"), common, start);
}

struct TemplateArgs {
  std::string inputs;
  std::string vae;
  std::string reg;
  std::string out;
  bool refine = false;
  std::string method = "setgen";
  int ave_iters = 6;
};

void run_template(const TemplateArgs& a, const Common& common) {
  const auto start = Clock::now();
  const std::vector<fs::path> paths = expand_glob(a.inputs);
  const SubjectGroup group = load_group(paths, {});
  const RegNetParams reg = regnet_from_checkpoint(load_checkpoint(a.reg));

  TemplateResult r;
  if (a.method == "setgen") {
    if (a.vae.empty()) throw Error(ErrorKind::usage, "template: --vae is required for --method setgen");
    r = generate_template(group, vae_from_checkpoint(load_checkpoint(a.vae)), reg);
    if (a.refine) r = refine_template(r, group, reg);
  } else if (a.method == "ave") {
    r = ave_baseline(group, reg, a.ave_iters);
  } else if (a.method == "naive-average") {
    r = naive_average(group, reg);
  } else {
    throw Error(ErrorKind::usage, "template: unknown --method '" + a.method + "'");
  }
  if (a.refine && a.method != "setgen") throw Error(ErrorKind::usage, "template: --refine applies to --method setgen");

  const fs::path out(a.out);
  write_template_result(out, r, group.geometry());
  RunManifest m;
  m.subcommand = "template";
  m.config = {{"method", to_string(r.method)}, {"n", group.size()}, {"vae", a.vae}, {"reg", a.reg}};
  if (a.method == "ave") m.config["ave_iters"] = a.ave_iters;
  m.inputs = strings(paths);
  m.outputs = {out.string()};
  m.timings["template_seconds"] = r.seconds;
  m.write(out / "run_manifest.json", common, start);
}

struct EvalArgs {
  std::string inputs;
  std::string labels;
  std::string templ;
  std::string reg;
  std::string report;
  bool normalized = false;
};

void run_eval(const EvalArgs& a, const Common& common) {
  const auto start = Clock::now();
  const std::vector<fs::path> images = expand_glob(a.inputs);
  const std::vector<fs::path> labels = expand_glob(a.labels);
  const SubjectGroup group = load_group(images, labels);
  const RegNetParams reg = regnet_from_checkpoint(load_checkpoint(a.reg));
  const TemplateResult t = read_template(a.templ);
  EvalConfig cfg;
  cfg.normalized = a.normalized;
  const GroupEvalReport report = evaluate(group, t, reg, cfg);

  const fs::path out(a.report);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  fs::path csv = out;
  csv.replace_extension(".csv");
  write_file_atomic(out, to_json(report).dump(2) + "\n");
  write_file_atomic(csv, per_label_csv(report));

  RunManifest m;
  m.subcommand = "eval";
  m.config = {{"template", a.templ}, {"reg", a.reg}, {"normalized", a.normalized}};
  m.inputs = strings(images);
  for (const auto& l : labels) m.inputs.push_back(l.string());
  m.outputs = {out.string(), csv.string()};
  m.write(sibling(out, ".manifest.json"), common, start);
}

struct SliceArgs {
  std::string volume;
  std::string axis = "z";
  Index index = 0;
  std::string out;
};

void run_slice(const SliceArgs& a, const Common& common) {
  const auto start = Clock::now();
  if (a.axis.size() != 1) throw Error(ErrorKind::usage, "--axis must be x, y or z");
  const StoredVolume v = read_volume(a.volume);
  if (v.kind != VolumeKind::image) throw DataError(a.volume + ": slice export needs an image volume");
  export_slice(v.values, a.axis[0], a.index, a.out);
  RunManifest m;
  m.subcommand = "slice";
  m.config = {{"axis", a.axis}, {"index", a.index}};
  m.inputs = {a.volume};
  m.outputs = {a.out};
  m.write(sibling(a.out, ".manifest.json"), common, start);
}

const char* kind_name(ErrorKind k) {
  switch (k) {
    case ErrorKind::usage: return "usage";
    case ErrorKind::data: return "data";
    case ErrorKind::numerical: return "numerical";
  }
  return "data";
}

int fail(ErrorKind kind, const std::string& message) {
  std::cerr << json{{"error", kind_name(kind)}, {"message", message}}.dump() << std::endl;
  return static_cast<int>(kind);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Scalable groupwise template generation"};
  app.set_version_flag("--version", std::string("setgen ") + kVersion);
  app.require_subcommand(1);

  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--threads", common.threads, "worker threads (default SETGEN_THREADS or 1)");
    sub->add_option("--seed", common.seed, "seed for every random choice");
  };

  GenPhantomsArgs gen;
  CLI::App* gen_cmd = app.add_subcommand("gen-phantoms", "write a synthetic subject group");
  gen_cmd->add_option("--out", gen.out, "output directory")->required();
  gen_cmd->add_option("--n", gen.n, "group size")->capture_default_str();
  gen_cmd->add_option("--size", gen.size, "grid extents, e.g. 64,64 or 32,32,32")->capture_default_str();
  gen_cmd->add_option("--labels", gen.labels, "foreground labels")->capture_default_str();
  gen_cmd->add_option("--magnitude", gen.magnitude, "max velocity norm, voxels")->capture_default_str();
  gen_cmd->add_option("--noise", gen.noise, "intensity noise amplitude")->capture_default_str();
  gen_cmd->add_option("--smoothness", gen.smoothness, "velocity blur sigma, voxels")->capture_default_str();
  gen_cmd->add_option("--anatomy-seed", gen.anatomy_seed, "seed of the base anatomy")->capture_default_str();
  add_common(gen_cmd);

  PretrainArgs pre;
  CLI::App* pre_cmd = app.add_subcommand("pretrain-reg", "train the registration network");
  pre_cmd->add_option("--data", pre.data, "phantom or image directory")->required();
  pre_cmd->add_option("--iters", pre.iters, "iterations")->capture_default_str();
  pre_cmd->add_option("--out", pre.out, "checkpoint path")->required();
  pre_cmd->add_option("--lr", pre.lr, "Adam step size")->capture_default_str();
  pre_cmd->add_option("--smoothness", pre.smoothness, "velocity gradient penalty")->capture_default_str();
  pre_cmd->add_option("--log", pre.log, "JSON-lines log (default CKPT.log.jsonl)");
  add_common(pre_cmd);

  TrainArgs tr;
  CLI::App* train_cmd = app.add_subcommand("train", "siamese VAE training through the frozen registration net");
  train_cmd->add_option("--data", tr.data, "phantom or image directory")->required();
  train_cmd->add_option("--reg", tr.reg, "registration checkpoint")->required();
  train_cmd->add_option("--epochs", tr.epochs, "epochs over all subject pairs")->capture_default_str();
  train_cmd->add_option("--iters-per-epoch", tr.iters_per_epoch, "0 = every unordered pair")->capture_default_str();
  train_cmd->add_option("--lambda1", tr.weights.sim, "reconstruction weight")->capture_default_str();
  train_cmd->add_option("--lambda2", tr.weights.kl, "KL weight")->capture_default_str();
  train_cmd->add_option("--lambda3", tr.weights.even, "even-displacement weight")->capture_default_str();
  train_cmd->add_option("--lambda4", tr.weights.temp, "template-similarity weight")->capture_default_str();
  train_cmd->add_option("--lambda5", tr.weights.warped, "warped-similarity weight")->capture_default_str();
  train_cmd->add_option("--lr", tr.lr, "base learning rate")->capture_default_str();
  train_cmd->add_option("--checkpoint-every", tr.checkpoint_every, "iterations between snapshots, 0 = off");
  train_cmd->add_option("--out", tr.out, "checkpoint path")->required();
  train_cmd->add_option("--log", tr.log, "JSON-lines log (default CKPT.log.jsonl)");
  add_common(train_cmd);

  TemplateArgs tp;
  CLI::App* tp_cmd = app.add_subcommand("template", "build a group template");
  tp_cmd->add_option("--inputs", tp.inputs, "glob of subject volumes")->required();
  tp_cmd->add_option("--vae", tp.vae, "VAE checkpoint");
  tp_cmd->add_option("--reg", tp.reg, "registration checkpoint")->required();
  tp_cmd->add_option("--out", tp.out, "output directory")->required();
  tp_cmd->add_flag("--refine", tp.refine, "one warped-average refinement step");
  tp_cmd->add_option("--method", tp.method, "setgen | ave | naive-average")->capture_default_str();
  tp_cmd->add_option("--ave-iters", tp.ave_iters, "iterations for --method ave")->capture_default_str();
  add_common(tp_cmd);

  EvalArgs ev;
  CLI::App* ev_cmd = app.add_subcommand("eval", "score a template on a labelled group");
  ev_cmd->add_option("--inputs", ev.inputs, "glob of subject volumes")->required();
  ev_cmd->add_option("--labels", ev.labels, "glob of label volumes, same order as --inputs")->required();
  ev_cmd->add_option("--template", ev.templ, "template directory")->required();
  ev_cmd->add_option("--reg", ev.reg, "registration checkpoint")->required();
  ev_cmd->add_option("--report", ev.report, "report JSON (CSV written alongside)")->required();
  ev_cmd->add_flag("--normalized", ev.normalized, "divide field norms by sqrt(voxels)");
  add_common(ev_cmd);

  SliceArgs sl;
  CLI::App* sl_cmd = app.add_subcommand("slice", "export one slice as PGM");
  sl_cmd->add_option("--volume", sl.volume, "image volume")->required();
  sl_cmd->add_option("--axis", sl.axis, "x, y or z")->capture_default_str();
  sl_cmd->add_option("--index", sl.index, "slice index")->capture_default_str();
  sl_cmd->add_option("--out", sl.out, "output .pgm")->required();
  add_common(sl_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(ErrorKind::usage, e.what());
  }

  try {
    if (common.threads) set_thread_count(common.threads);
    if (*gen_cmd) run_gen_phantoms(gen, common);
    if (*pre_cmd) run_pretrain(pre, common);
    if (*train_cmd) run_train(tr, common);
    if (*tp_cmd) run_template(tp, common);
    if (*ev_cmd) run_eval(ev, common);
    if (*sl_cmd) run_slice(sl, common);
  } catch (const Error& e) {
    return fail(e.kind(), e.what());
  } catch (const json::exception& e) {
    return fail(ErrorKind::data, e.what());
  } catch (const fs::filesystem_error& e) {
    return fail(ErrorKind::data, e.what());
  } catch (const std::exception& e) {
    return fail(ErrorKind::data, e.what());
  }
  return 0;
}
