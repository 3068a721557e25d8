#include <doctest.h>

#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "oracles.hpp"
#include "nifti_writer.hpp"
#include "scratch.hpp"
#include "setgen/checkpoint.hpp"
#include "setgen/metrics.hpp"
#include "setgen/phantom.hpp"
#include "setgen/volume.hpp"

#ifndef SETGEN_FIXTURE_DIR
#error "SETGEN_FIXTURE_DIR must point at tests/fixtures"
#endif

using namespace setgen;
using namespace nifti_writer;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) { return read_file(p); }

PhantomConfig small_phantoms(std::uint64_t seed = 0) {
  PhantomConfig pc;
  pc.n = 6;
  pc.geometry = VolumeGeometry(Shape{32, 32});
  pc.labels = 4;
  pc.smoothness = 5.0;
  pc.magnitude = 2.0;
  pc.seed = seed;
  return pc;
}

}  // namespace

TEST_CASE("volumes round-trip at stored precision") {
  ScratchDir dir("vol");
  std::mt19937_64 rng(1);
  const Array img = oracle::uniform({5, 6, 7}, rng, 0.0, 1.0).cast<float>().cast<double>();
  write_volume(dir / "img", img, VolumeKind::image, {1.0, 0.5, 2.0});
  const StoredVolume back = read_volume(dir / "img.json");
  CHECK(back.kind == VolumeKind::image);
  CHECK(back.shape == Shape{5, 6, 7});
  CHECK(back.spacing == std::vector<double>{1.0, 0.5, 2.0});
  CHECK(bitwise_equal(back.values, img));
  CHECK(bitwise_equal(read_volume(dir / "img.raw").values, img));

  LabelArray labels(Shape{4, 9});
  for (Index i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i * 1777 % 65536);
  write_labels(dir / "lab", labels);
  const StoredVolume lb = read_volume(dir / "lab");
  CHECK(lb.kind == VolumeKind::labels);
  CHECK(lb.labels == labels);

  const nlohmann::json side = nlohmann::json::parse(slurp(dir / "lab.json"));
  CHECK(side.at("dtype") == "uint16");
  CHECK(side.at("data") == "lab.raw");
  CHECK(fs::file_size(dir / "lab.raw") == 36 * 2);
  CHECK(fs::file_size(dir / "img.raw") == 210 * 4);
}

TEST_CASE("random volumes survive 1000 write/read cycles") {
  ScratchDir dir("fuzz");
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> rank(1, 4), extent(1, 9), kind(0, 3), label(0, 65535);
  for (int t = 0; t < 1000; ++t) {
    Shape shape;
    for (int a = rank(rng); a > 0; --a) shape.push_back(extent(rng));
    const VolumeKind k = static_cast<VolumeKind>(kind(rng));
    const fs::path base = dir / ("v" + std::to_string(t % 7));
    if (k == VolumeKind::labels) {
      LabelArray l(shape);
      for (Index i = 0; i < l.size(); ++i) l[i] = label(rng);
      write_labels(base, l);
      const StoredVolume b = read_volume(base);
      REQUIRE(b.labels == l);
    } else {
      const Array a = oracle::uniform(shape, rng, -1e6, 1e6).cast<float>().cast<double>();
      write_volume(base, a, k);
      const StoredVolume b = read_volume(base);
      REQUIRE(b.kind == k);
      REQUIRE(bitwise_equal(b.values, a));
    }
  }
}

TEST_CASE("malformed volumes are rejected") {
  ScratchDir dir("bad");
  write_volume(dir / "x", Array(Shape{4, 4}, 0.25), VolumeKind::image);
  const std::string raw = slurp(dir / "x.raw");
  write_bytes(dir / "x.raw", raw.substr(0, raw.size() - 4));
  CHECK_THROWS_AS(read_volume(dir / "x"), DataError);
  write_bytes(dir / "x.raw", raw + "pad!");
  CHECK_THROWS_AS(read_volume(dir / "x"), DataError);

  write_volume(dir / "y", Array(Shape{4, 4}, 0.25), VolumeKind::image);
  nlohmann::json side = nlohmann::json::parse(slurp(dir / "y.json"));
  side["dtype"] = "uint16";  // image stored as integers
  write_bytes(dir / "y.json", side.dump());
  CHECK_THROWS_AS(read_volume(dir / "y"), DataError);
  write_bytes(dir / "y.json", "{not json");
  CHECK_THROWS_AS(read_volume(dir / "y"), DataError);
  CHECK_THROWS_AS(read_volume(dir / "missing"), DataError);

  LabelArray neg(Shape{2, 2}, -1);
  CHECK_THROWS_AS(write_labels(dir / "neg", neg), DataError);
  CHECK_THROWS_AS(write_volume(dir / "huge", Array(Shape{2}, 1e300), VolumeKind::image), DataError);
}

TEST_CASE("subjects load with labels and validate their range") {
  ScratchDir dir("subject");
  write_volume(dir / "s", Array(Shape{8, 8}, 0.5), VolumeKind::image);
  write_labels(dir / "s_labels", LabelArray(Shape{8, 8}, 2));
  const SubjectVolume s = load_subject(dir / "s.json", dir / "s_labels");
  CHECK(s.id == "s");
  CHECK(s.labels.has_value());
  CHECK(s.batched().shape() == Shape{1, 1, 8, 8});
  write_labels(dir / "wrong", LabelArray(Shape{8, 4}, 2));
  CHECK_THROWS_AS(load_subject(dir / "s", dir / "wrong"), Error);
  write_volume(dir / "bright", Array(Shape{8, 8}, 1.5), VolumeKind::image);
  CHECK_THROWS_AS(load_subject(dir / "bright"), DataError);
}

TEST_CASE("NIfTI-1 reader") {
  ScratchDir dir("nifti");
  std::vector<double> vals(64);
  for (std::size_t i = 0; i < 64; ++i) vals[i] = static_cast<double>(i) * 0.5 - 3.0;
  NiftiLayout spec;
  spec.dims = {4, 4, 4};
  spec.pixdim = {0.8f, 0.9f, 1.2f};
  write_bytes(dir / "cube.nii", nifti_bytes(spec, vals));
  const SubjectVolume s = read_nifti1(dir / "cube.nii");
  CHECK(s.geometry.dims == Shape{4, 4, 4});
  CHECK(s.intensities[0] == 0.0);
  CHECK(s.intensities[63] == 1.0);
  CHECK(s.intensities[1] == doctest::Approx(1.0 / 63.0));
  CHECK(s.geometry.spacing == std::vector<double>{1.2f, 0.9f, 0.8f});  // z, y, x

  // x fastest on disk becomes the last array axis
  NiftiLayout flat;
  flat.dims = {5, 4};
  flat.datatype = 4;
  std::vector<double> ramp(20);
  for (std::size_t i = 0; i < 20; ++i) ramp[i] = static_cast<double>(i % 5);  // varies along x
  write_bytes(dir / "flat.nii", nifti_bytes(flat, ramp));
  const SubjectVolume f = read_nifti1(dir / "flat.nii");
  CHECK(f.geometry.dims == Shape{4, 5});
  CHECK(f.intensities[1] == 0.25);
  CHECK(f.intensities[5] == 0.0);

  NiftiLayout bytes;
  bytes.dims = {4, 4, 4};
  bytes.datatype = 2;
  bytes.vox_offset = 400;
  bytes.slope = 2.0f;
  bytes.inter = 10.0f;
  std::vector<double> u8(64, 7.0);
  u8[5] = 9.0;
  write_bytes(dir / "u8.nii", nifti_bytes(bytes, u8));
  const SubjectVolume b = read_nifti1(dir / "u8.nii");
  CHECK(b.intensities[5] == 1.0);
  CHECK(b.intensities[4] == 0.0);

  NiftiLayout magic = spec;
  magic.magic = "ni1";
  write_bytes(dir / "magic.nii", nifti_bytes(magic, vals));
  CHECK_THROWS_AS(read_nifti1(dir / "magic.nii"), DataError);

  NiftiLayout dtype = spec;
  dtype.datatype = 64;  // float64
  write_bytes(dir / "dtype.nii", nifti_bytes(dtype, {}) + std::string(512, '\0'));
  CHECK_THROWS_AS(read_nifti1(dir / "dtype.nii"), DataError);

  const std::string full = nifti_bytes(spec, vals);
  write_bytes(dir / "short.nii", full.substr(0, full.size() - 10));
  CHECK_THROWS_AS(read_nifti1(dir / "short.nii"), DataError);
  write_bytes(dir / "stub.nii", full.substr(0, 200));
  CHECK_THROWS_AS(read_nifti1(dir / "stub.nii"), DataError);
}

TEST_CASE("PGM slices") {
  ScratchDir dir("pgm");
  export_slice(Array(Shape{3, 5}, 0.5), 'z', 0, dir / "half.pgm");
  CHECK_THROWS_AS(export_slice(Array(Shape{3, 5}, 0.5), 'z', 1, dir / "bad.pgm"), Error);
  CHECK_THROWS_AS(export_slice(Array(Shape{3, 5}, 0.5), 'x', 0, dir / "bad.pgm"), Error);
  const std::string half = slurp(dir / "half.pgm");
  CHECK(half.substr(0, 11) == "P5\n5 3\n255\n");
  CHECK(half.size() == 11 + 15);
  for (std::size_t i = 11; i < half.size(); ++i) CHECK(static_cast<unsigned char>(half[i]) == 128);

  Array vol(Shape{2, 3, 4});
  for (Index i = 0; i < vol.size(); ++i) vol[i] = static_cast<double>(i) / 23.0;
  export_slice(vol, 'z', 1, dir / "z.pgm");
  const std::string z = slurp(dir / "z.pgm");
  CHECK(z.substr(0, 11) == "P5\n4 3\n255\n");
  CHECK(static_cast<unsigned char>(z[11]) == static_cast<unsigned char>(std::lround(12.0 / 23.0 * 255)));
  export_slice(vol, 'x', 3, dir / "x.pgm");
  CHECK(slurp(dir / "x.pgm").substr(0, 11) == "P5\n3 2\n255\n");
  export_slice(vol, 'y', 0, dir / "y.pgm");
  CHECK(slurp(dir / "y.pgm").substr(0, 11) == "P5\n4 2\n255\n");

  CHECK_THROWS_AS(export_slice(vol, 'z', 2, dir / "bad.pgm"), Error);
  CHECK_THROWS_AS(export_slice(vol, 'x', -1, dir / "bad.pgm"), Error);
  CHECK_THROWS_AS(export_slice(vol, 'w', 0, dir / "bad.pgm"), Error);
  CHECK_FALSE(fs::exists(dir / "bad.pgm"));

  Array clipped = Array::from({1, 3}, {-0.5, 1.5, 0.001});
  export_slice(clipped, 'z', 0, dir / "clip.pgm");
  const std::string c = slurp(dir / "clip.pgm");
  CHECK(static_cast<unsigned char>(c[c.size() - 3]) == 0);
  CHECK(static_cast<unsigned char>(c[c.size() - 2]) == 255);
  CHECK(static_cast<unsigned char>(c[c.size() - 1]) == 0);
}

TEST_CASE("golden phantom slice") {
  ScratchDir dir("golden");
  const PhantomGroup g = gen_phantoms(small_phantoms(3));
  export_slice(g.subjects[2].intensities, 'z', 0, dir / "slice.pgm");
  const fs::path golden = fs::path(SETGEN_FIXTURE_DIR) / "phantom_subject_002.pgm";
  REQUIRE(fs::exists(golden));
  CHECK(slurp(dir / "slice.pgm") == slurp(golden));
}

TEST_CASE("phantoms without motion or noise equal the base anatomy") {
  PhantomConfig pc = small_phantoms();
  pc.magnitude = 0.0;
  pc.noise = 0.0;
  const PhantomGroup g = gen_phantoms(pc);
  for (const SubjectVolume& s : g.subjects) {
    CHECK(bitwise_equal(s.intensities, g.center.intensities));
    CHECK(*s.labels == *g.center.labels);
  }
}

TEST_CASE("phantoms are seeded") {
  const PhantomGroup a = gen_phantoms(small_phantoms(4)), b = gen_phantoms(small_phantoms(4));
  const PhantomGroup c = gen_phantoms(small_phantoms(5));
  for (std::size_t i = 0; i < a.subjects.size(); ++i) {
    CHECK(bitwise_equal(a.subjects[i].intensities, b.subjects[i].intensities));
    CHECK(*a.subjects[i].labels == *b.subjects[i].labels);
  }
  CHECK_FALSE(a.subjects[0].intensities == c.subjects[0].intensities);
  // the anatomy follows its own seed
  CHECK(bitwise_equal(a.center.intensities, c.center.intensities));
  PhantomConfig other = small_phantoms(4);
  other.anatomy_seed = 1;
  CHECK_FALSE(gen_phantoms(other).center.intensities == a.center.intensities);
}

TEST_CASE("phantom velocities are centred and scaled to the magnitude") {
  const PhantomGroup g = gen_phantoms(small_phantoms(6));
  Array sum(g.velocities[0].shape());
  double largest = 0.0;
  for (const Array& v : g.velocities) {
    sum.data() += v.data();
    largest = std::max(largest, max_vector_norm(v));
  }
  CHECK(sum.data().abs().maxCoeff() < 1e-12);
  CHECK(largest == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("labelled phantom voxels sit inside their intensity band") {
  PhantomConfig pc = small_phantoms(7);
  pc.noise = 0.05;
  const PhantomGroup g = gen_phantoms(pc);
  for (const SubjectVolume& s : g.subjects) {
    for (Index v = 0; v < s.intensities.size(); ++v) {
      const auto [lo, hi] = label_band((*s.labels)[v], pc.labels);
      CHECK(s.intensities[v] >= lo - pc.noise - 1e-12);
      CHECK(s.intensities[v] <= hi + pc.noise + 1e-12);
    }
    CHECK(s.intensities.data().minCoeff() >= 0.0);
    CHECK(s.intensities.data().maxCoeff() <= 1.0);
  }
}

TEST_CASE("phantom overlap drops as the magnitude grows") {
  double previous = 1.0;
  for (double m : {1.0, 2.5, 4.0}) {
    PhantomConfig pc = small_phantoms(8);
    pc.n = 8;
    pc.magnitude = m;
    const PhantomGroup g = gen_phantoms(pc);
    std::vector<LabelArray> maps;
    for (const SubjectVolume& s : g.subjects) maps.push_back(*s.labels);
    const double dice = pairwise_dice(maps, foreground_labels(maps)).mean;
    CHECK(dice < previous);
    previous = dice;
  }
}

TEST_CASE("phantom configuration limits") {
  PhantomConfig pc = small_phantoms();
  pc.magnitude = 4.5;  // more than 32 / 8
  CHECK_THROWS_AS(gen_phantoms(pc), Error);
  pc = small_phantoms();
  pc.n = 1;
  CHECK_THROWS_AS(gen_phantoms(pc), Error);
  pc = small_phantoms();
  pc.labels = 0;
  CHECK_THROWS_AS(gen_phantoms(pc), Error);
  CHECK(label_band(0, 4) == std::pair<double, double>{0.0, 0.0});
}
