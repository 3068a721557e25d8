#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "oracles.hpp"
#include "scratch.hpp"
#include "setgen/parallel.hpp"
#include "setgen/phantom.hpp"
#include "setgen/pipeline.hpp"
#include "setgen/train.hpp"

using namespace setgen;

namespace {

SubjectGroup phantom_group(std::size_t n, std::uint64_t seed, double magnitude = 1.5) {
  PhantomConfig pc;
  pc.n = n;
  pc.geometry = VolumeGeometry(Shape{16, 16});
  pc.labels = 3;
  pc.smoothness = 4.0;
  pc.magnitude = magnitude;
  pc.seed = seed;
  return SubjectGroup{gen_phantoms(pc).subjects};
}

VaeParams tiny_vae(std::uint64_t seed) {
  VaeConfig c;
  c.encoder_widths = {4, 4, 8};
  c.decoder_widths = {4, 4, 4};
  return init_vae(c, seed);
}

/// A registration net whose untrained output is clearly nonzero.
RegNetParams active_reg(std::uint64_t seed) {
  RegNetConfig c;
  c.encoder_widths = {4, 4};
  c.decoder_widths = {4, 4};
  c.head_scale = 0.5;
  return init_regnet(c, seed);
}

/// A registration net that predicts (almost) zero motion.
RegNetParams still_reg() {
  RegNetConfig c;
  c.encoder_widths = {4, 4};
  c.decoder_widths = {4, 4};
  return init_regnet(c, 1);
}

const SubjectFields& by_id(const TemplateResult& r, const std::string& id) {
  return *std::find_if(r.fields.begin(), r.fields.end(), [&](const SubjectFields& f) { return f.id == id; });
}

void check_same_fields(const TemplateResult& a, const TemplateResult& b) {
  REQUIRE(a.fields.size() == b.fields.size());
  for (const SubjectFields& f : a.fields) {
    const SubjectFields& g = by_id(b, f.id);
    CHECK(bitwise_equal(f.velocity, g.velocity));
    CHECK(bitwise_equal(f.displacement, g.displacement));
    CHECK(bitwise_equal(f.warped, g.warped));
    CHECK(*f.warped_labels == *g.warped_labels);
  }
}

}  // namespace

TEST_CASE("ordered mean is exact for permutations") {
  std::mt19937_64 rng(1);
  std::vector<Array> xs;
  for (int i = 0; i < 9; ++i) xs.push_back(oracle::uniform({3, 7}, rng, -1e3, 1e3));
  const Array m = ordered_mean(xs);
  std::vector<Array> ys = xs;
  for (int t = 0; t < 5; ++t) {
    std::shuffle(ys.begin(), ys.end(), rng);
    CHECK(bitwise_equal(ordered_mean(ys), m));
  }
  double s = 0.0;
  for (const Array& x : xs) s += x[4];
  CHECK(m[4] == doctest::Approx(s / 9.0).epsilon(1e-13));
  CHECK_THROWS_AS(ordered_mean(std::vector<Array>{}), DataError);
}

TEST_CASE("a single subject's template is its own reconstruction") {
  const SubjectGroup g{{phantom_group(3, 2).subjects[1]}};
  const VaeParams vae = tiny_vae(3);
  const TemplateResult r = generate_template(g, vae, active_reg(4));
  NoGradGuard ng;
  const Array recon = unbatched(decode(encode(Tensor::constant(g.subjects[0].batched()), vae).mu, vae).value());
  CHECK(bitwise_equal(r.templ, recon));
  CHECK(r.fields.size() == 1);
  CHECK(r.method == TemplateMethod::setgen);
}

TEST_CASE("template generation does not depend on subject order") {
  const SubjectGroup g = phantom_group(6, 5);
  SubjectGroup shuffled = g;
  std::mt19937_64 rng(6);
  std::shuffle(shuffled.subjects.begin(), shuffled.subjects.end(), rng);
  const VaeParams vae = tiny_vae(7);
  const RegNetParams reg = active_reg(8);
  const TemplateResult a = generate_template(g, vae, reg), b = generate_template(shuffled, vae, reg);
  CHECK(bitwise_equal(a.templ, b.templ));
  check_same_fields(a, b);

  const TemplateResult ave_a = ave_baseline(g, reg, 2), ave_b = ave_baseline(shuffled, reg, 2);
  CHECK(bitwise_equal(ave_a.templ, ave_b.templ));
}

TEST_CASE("pair template matches the training path") {
  const SubjectGroup g = phantom_group(2, 9);
  const VaeParams vae = tiny_vae(10);
  const RegNetParams reg = active_reg(11);
  const TemplateResult r = generate_template(g, vae, reg);
  SiameseConfig cfg;
  cfg.sample_latent = false;
  Rng rng(0);
  NoGradGuard ng;
  const SiameseStep s = siamese_forward(Tensor::constant(g.subjects[0].batched()),
                                        Tensor::constant(g.subjects[1].batched()), vae, reg, cfg, rng);
  CHECK(bitwise_equal(r.templ, unbatched(s.templ.value())));
  // the test-stage field of subject 1 is the training-path inverse field
  CHECK(bitwise_equal(r.fields[0].inverse, s.inv1.map.value()));
}

TEST_CASE("results do not depend on the worker count") {
  const SubjectGroup g = phantom_group(5, 12);
  const VaeParams vae = tiny_vae(13);
  const RegNetParams reg = active_reg(14);
  set_thread_count(1);
  const TemplateResult one = generate_template(g, vae, reg);
  set_thread_count(4);
  const TemplateResult four = generate_template(g, vae, reg);
  set_thread_count(1);
  CHECK(bitwise_equal(one.templ, four.templ));
  check_same_fields(one, four);
}

TEST_CASE("refinement and averaging on identical subjects keep the subject") {
  const SubjectVolume s = phantom_group(2, 15).subjects[0];
  SubjectGroup g;
  for (int i = 0; i < 4; ++i) {
    g.subjects.push_back(s);
    g.subjects.back().id = "copy_" + std::to_string(i);
  }
  const RegNetParams reg = still_reg();
  const TemplateResult seed = generate_template(g, tiny_vae(16), reg);
  const TemplateResult refined = refine_template(seed, g, reg);
  CHECK(refined.method == TemplateMethod::setgen_plus);
  CHECK((refined.templ.data() - s.intensities.data()).abs().mean() < 0.01);

  const TemplateResult ave = ave_baseline(g, reg, 6);
  CHECK(ave.method == TemplateMethod::ave);
  CHECK((ave.templ.data() - s.intensities.data()).abs().maxCoeff() < 1e-3);
  for (const SubjectFields& f : ave.fields) CHECK(f.displacement.data().abs().maxCoeff() < 1e-3);
}

TEST_CASE("zero averaging iterations give the voxel mean") {
  const SubjectGroup g = phantom_group(4, 17);
  const RegNetParams reg = active_reg(18);
  const TemplateResult r = ave_baseline(g, reg, 0);
  const TemplateResult naive = naive_average(g, reg);
  for (Index v = 0; v < r.templ.size(); ++v) {
    double s = 0.0;
    for (const SubjectVolume& x : g.subjects) s += x.intensities[v];
    CHECK(r.templ[v] == doctest::Approx(s / 4.0).epsilon(1e-14));
  }
  CHECK(bitwise_equal(r.templ, naive.templ));
  CHECK(naive.method == TemplateMethod::naive_average);
  CHECK_THROWS_AS(ave_baseline(g, reg, -1), Error);
}

TEST_CASE("templates stay in the unit interval and warped labels stay in the label set") {
  const SubjectGroup g = phantom_group(5, 19);
  const RegNetParams reg = active_reg(20);
  const TemplateResult results[] = {generate_template(g, tiny_vae(21), reg), ave_baseline(g, reg, 2)};
  for (const TemplateResult& r : results) {
    CHECK(r.templ.data().minCoeff() >= 0.0);
    CHECK(r.templ.data().maxCoeff() <= 1.0);
    const TemplateResult refined = refine_template(r, g, reg);
    CHECK(refined.templ.data().minCoeff() >= 0.0);
    CHECK(refined.templ.data().maxCoeff() <= 1.0);
    for (const SubjectFields& f : r.fields) {
      std::set<int> before, after;
      const LabelArray& orig = *by_id(r, f.id).warped_labels;
      for (Index v = 0; v < orig.size(); ++v) after.insert(orig[v]);
      for (const SubjectVolume& s : g.subjects)
        if (s.id == f.id)
          for (Index v = 0; v < s.labels->size(); ++v) before.insert((*s.labels)[v]);
      CHECK(std::includes(before.begin(), before.end(), after.begin(), after.end()));
    }
  }
}

TEST_CASE("group and template geometry are validated") {
  SubjectGroup g = phantom_group(2, 22);
  const RegNetParams reg = active_reg(23);
  CHECK_THROWS_AS(register_group(g, Array(Shape{8, 8}), reg), DataError);
  PhantomConfig pc;
  pc.n = 2;
  pc.geometry = VolumeGeometry(Shape{32, 16});
  pc.magnitude = 1.0;
  g.subjects.push_back(gen_phantoms(pc).subjects[0]);
  CHECK_THROWS_AS(g.validate(), DataError);
  CHECK_THROWS_AS(generate_template(SubjectGroup{}, tiny_vae(1), reg), DataError);

  SubjectGroup odd;
  pc.geometry = VolumeGeometry(Shape{20, 20});
  odd.subjects = gen_phantoms(pc).subjects;
  CHECK_THROWS_AS(generate_template(odd, tiny_vae(1), reg), ShapeError);
}

TEST_CASE("template directories round-trip") {
  ScratchDir dir("template");
  const SubjectGroup g = phantom_group(3, 24);
  const TemplateResult r = generate_template(g, tiny_vae(25), active_reg(26));
  write_template_result(dir.path(), r, g.geometry());
  for (const char* name : {"template.json", "template.raw", "template_manifest.json", "fields/subject_001_velocity.json",
                           "fields/subject_001_displacement.raw", "fields/subject_002_warped.json",
                           "fields/subject_000_warped_labels.raw"})
    CHECK(std::filesystem::exists(dir / name));
  const TemplateResult back = read_template(dir.path());
  CHECK(back.method == TemplateMethod::setgen);
  CHECK(bitwise_equal(back.templ, r.templ.cast<float>().cast<double>()));

  const StoredVolume u = read_volume(dir / "fields/subject_001_displacement");
  CHECK(u.kind == VolumeKind::displacement);
  CHECK(u.shape == Shape{2, 16, 16});

  const TemplateResult tagged{r.templ, {}, TemplateMethod::setgen_plus, 0.0};
  ScratchDir dir2("template_plus");
  write_template_result(dir2.path(), tagged, g.geometry());
  CHECK(read_template(dir2.path()).method == TemplateMethod::setgen_plus);
  CHECK_THROWS_AS(read_template(dir / "absent"), DataError);
}

TEST_CASE("method tags round-trip") {
  for (TemplateMethod m : {TemplateMethod::setgen, TemplateMethod::setgen_plus, TemplateMethod::ave,
                           TemplateMethod::naive_average})
    CHECK(template_method_from_string(to_string(m)) == m);
  CHECK_THROWS_AS(template_method_from_string("mean"), DataError);
}
