#include <doctest.h>

#include <sys/wait.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "nifti_writer.hpp"
#include "scratch.hpp"
#include "setgen/volume.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
  int code = -1;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Runs the tool with the given arguments (already shell-safe), capturing stderr.
Run cli(const ScratchDir& dir, const std::string& args) {
  const fs::path err = dir / "stderr.txt";
  const std::string cmd = std::string(SETGEN_CLI) + " " + args + " > /dev/null 2> " + err.string();
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.err = slurp(err);
  return r;
}

/// The failure report is exactly one JSON object on one line.
json error_line(const Run& r) {
  REQUIRE(std::count(r.err.begin(), r.err.end(), '\n') == 1);
  return json::parse(r.err);
}

std::size_t line_count(const fs::path& p) {
  const std::string s = slurp(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

/// Every regular file under `root` keyed by relative path; manifests lose
/// their timing block and the paths they record.
std::vector<std::pair<std::string, std::string>> tree(const fs::path& root) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::string body = slurp(e.path());
    if (e.path().filename().string().find("manifest") != std::string::npos) {
      json j = json::parse(body);
      for (const char* key : {"timings", "inputs", "outputs"}) j.erase(key);
      body = j.dump();
    }
    out.emplace_back(fs::relative(e.path(), root).string(), body);
  }
  std::sort(out.begin(), out.end());
  return out;
}

const char* kTinyGroup = "--n 4 --size 16 --magnitude 1.5 --seed 7";

}  // namespace

TEST_CASE("usage errors exit 2 with a one-line JSON report") {
  ScratchDir dir("cli_usage");
  for (const std::string& args : {std::string(""), std::string("gen-phantoms"), std::string("frobnicate"),
                                 "gen-phantoms --out " + (dir / "x").string() + " --size 4,a",
                                 "gen-phantoms --out " + (dir / "x").string() + " --size 16 --magnitude 3",
                                 "gen-phantoms --out " + (dir / "x").string() + " --n 1"}) {
    INFO("args: " << args);
    const Run r = cli(dir, args);
    CHECK(r.code == 2);
    const json j = error_line(r);
    CHECK(j["error"] == "usage");
    CHECK(j["message"].get<std::string>().size() > 0);
  }
  CHECK(!fs::exists(dir / "x"));
}

TEST_CASE("missing or malformed inputs exit 3") {
  ScratchDir dir("cli_data");
  const Run a = cli(dir, "pretrain-reg --data " + (dir / "absent").string() + " --out " + (dir / "r.ckpt").string());
  CHECK(a.code == 3);
  CHECK(error_line(a)["error"] == "data");

  REQUIRE(cli(dir, "gen-phantoms --out " + (dir / "g").string() + " " + kTinyGroup).code == 0);
  const Run b = cli(dir, "train --data " + (dir / "g").string() + " --reg " + (dir / "absent.ckpt").string() +
                             " --out " + (dir / "v.ckpt").string());
  CHECK(b.code == 3);
  CHECK(!fs::exists(dir / "v.ckpt"));

  std::ofstream(dir / "junk.ckpt") << "not a checkpoint";
  const Run c = cli(dir, "train --data " + (dir / "g").string() + " --reg " + (dir / "junk.ckpt").string() +
                             " --out " + (dir / "v.ckpt").string());
  CHECK(c.code == 3);
  const Run d = cli(dir, "slice --volume " + (dir / "g/subjects/subject_000").string() + " --axis z --index 9 --out " +
                             (dir / "s.pgm").string());
  CHECK(d.code == 2);
  CHECK(!fs::exists(dir / "s.pgm"));
}

TEST_CASE("--version succeeds") {
  ScratchDir dir("cli_version");
  CHECK(cli(dir, "--version").code == 0);
}

TEST_CASE("phantom generation is reproducible and honours magnitude zero") {
  ScratchDir dir("cli_phantoms");
  const std::string a = (dir / "a").string(), b = (dir / "b").string(), z = (dir / "z").string();
  REQUIRE(cli(dir, "gen-phantoms --out " + a + " " + kTinyGroup).code == 0);
  REQUIRE(cli(dir, "gen-phantoms --out " + b + " " + kTinyGroup).code == 0);
  CHECK(tree(a) == tree(b));
  for (const char* name : {"center.json", "center.raw", "center_labels.raw", "run_manifest.json",
                           "subjects/subject_003.raw", "labels/subject_003.json"})
    CHECK(fs::exists(dir / "a" / name));
  const json m = json::parse(slurp(dir / "a/run_manifest.json"));
  CHECK(m["subcommand"] == "gen-phantoms");
  CHECK(m["seed"] == 7);
  CHECK(m["timings"].contains("wall_seconds"));

  REQUIRE(cli(dir, "gen-phantoms --out " + z + " --n 3 --size 16 --magnitude 0 --noise 0").code == 0);
  const setgen::StoredVolume center = setgen::read_volume(dir / "z/center");
  for (int i = 0; i < 3; ++i) {
    const setgen::StoredVolume s = setgen::read_volume(dir / "z/subjects" / ("subject_00" + std::to_string(i)));
    CHECK(setgen::bitwise_equal(s.values, center.values));
  }
}

TEST_CASE("a tiny run through every subcommand is reproducible") {
  ScratchDir dir("cli_pipeline");
  const std::string data = (dir / "data").string();
  REQUIRE(cli(dir, "gen-phantoms --out " + data + " " + kTinyGroup).code == 0);

  auto pipeline = [&](const std::string& tag) {
    const fs::path out = dir / tag;
    fs::create_directories(out);
    const std::string reg = (out / "reg.ckpt").string(), vae = (out / "vae.ckpt").string();
    REQUIRE(cli(dir, "pretrain-reg --data " + data + " --iters 6 --out " + reg + " --seed 3 --threads 1").code == 0);
    REQUIRE(cli(dir, "train --data " + data + " --reg " + reg +
                         " --epochs 2 --iters-per-epoch 3 --checkpoint-every 3 --out " + vae + " --seed 4 --threads 1")
                .code == 0);
    const std::string inputs = "'" + data + "/subjects/*.json'", labels = "'" + data + "/labels/*.json'";
    REQUIRE(cli(dir, "template --inputs " + inputs + " --vae " + vae + " --reg " + reg + " --out " +
                         (out / "templ").string() + " --refine --threads 1")
                .code == 0);
    REQUIRE(cli(dir, "template --inputs " + inputs + " --reg " + reg + " --method ave --ave-iters 2 --out " +
                         (out / "ave").string() + " --threads 1")
                .code == 0);
    REQUIRE(cli(dir, "eval --inputs " + inputs + " --labels " + labels + " --template " + (out / "templ").string() +
                         " --reg " + reg + " --report " + (out / "report.json").string() + " --threads 1")
                .code == 0);
    REQUIRE(cli(dir, "slice --volume " + (out / "templ/template").string() + " --index 0 --out " +
                         (out / "templ.pgm").string())
                .code == 0);
    return out;
  };

  const fs::path first = pipeline("one");
  CHECK(line_count(first / "reg.ckpt.log.jsonl") == 6);
  CHECK(line_count(first / "vae.ckpt.log.jsonl") == 6);
  CHECK(fs::exists(first / "vae.ckpt.3"));
  CHECK(fs::exists(first / "vae.ckpt.6"));
  const json report = json::parse(slurp(first / "report.json"));
  CHECK(report["method"] == "setgen+");
  CHECK(report["n"] == 4);
  CHECK(report["dice"].get<double>() >= 0.0);
  CHECK(report["dice"].get<double>() <= 1.0);
  CHECK(report["centrality"].get<double>() <= report["avg_disp"].get<double>() * (1.0 + 1e-12));
  CHECK(slurp(first / "report.csv").rfind("label,dice\n", 0) == 0);
  CHECK(slurp(first / "templ.pgm").rfind("P5\n16 16\n255\n", 0) == 0);
  const json train_manifest = json::parse(slurp(first / "vae.ckpt.manifest.json"));
  CHECK(train_manifest["subcommand"] == "train");

  // the report's runtime is a timing field as well
  auto masked = [](std::vector<std::pair<std::string, std::string>> t) {
    for (auto& [name, body] : t)
      if (name == "report.json") {
        json j = json::parse(body);
        j.erase("runtime_seconds");
        body = j.dump();
      }
    return t;
  };
  const fs::path second = pipeline("two");
  auto a = masked(tree(first)), b = masked(tree(second));
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    INFO("file " << a[i].first);
    CHECK(a[i].first == b[i].first);
    // configs may name checkpoints inside the run directory
    if (a[i].first.find("manifest") == std::string::npos) CHECK(a[i].second == b[i].second);
  }
}

TEST_CASE("NIfTI images are accepted as subject inputs") {
  ScratchDir dir("cli_nifti");
  fs::create_directories(dir / "nii");
  for (int k = 0; k < 3; ++k) {
    nifti_writer::NiftiLayout spec;
    spec.dims = {16, 16};
    std::vector<double> v;
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) v.push_back(std::exp(-((x - 7.5 - k) * (x - 7.5 - k) + (y - 7.5) * (y - 7.5)) / 20.0));
    nifti_writer::write_bytes(dir / "nii" / ("s" + std::to_string(k) + ".nii"), nifti_writer::nifti_bytes(spec, v));
  }
  const std::string reg = (dir / "reg.ckpt").string();
  REQUIRE(cli(dir, "pretrain-reg --data " + (dir / "nii").string() + " --iters 3 --out " + reg).code == 0);
  CHECK(json::parse(slurp(dir / "reg.ckpt.manifest.json"))["inputs"].size() == 3);
  REQUIRE(cli(dir, "template --inputs '" + (dir / "nii").string() + "/*.nii' --reg " + reg +
                       " --method naive-average --out " + (dir / "naive").string())
              .code == 0);
  const json m = json::parse(slurp(dir / "naive/template_manifest.json"));
  CHECK(m["n"] == 3);
  CHECK(m["subjects"][0] == "s0");
}
