#include "setgen/volume.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>

#include <json.hpp>

#include "setgen/checkpoint.hpp"
#include "setgen/kernels.hpp"

namespace setgen {

static_assert(std::endian::native == std::endian::little, "volume I/O assumes a little-endian host");

namespace fs = std::filesystem;

void SubjectVolume::validate() const {
  if (intensities.shape() != geometry.dims)
    throw ShapeError("SubjectVolume", "geometry", shape_string(intensities.shape()) + " vs " + shape_string(geometry.dims));
  if (!intensities.data().allFinite() || intensities.data().minCoeff() < 0.0 || intensities.data().maxCoeff() > 1.0)
    throw DataError("subject '" + id + "': intensities must be finite and within [0,1]");
  if (labels) {
    if (labels->shape() != geometry.dims)
      throw ShapeError("SubjectVolume", "labels", shape_string(labels->shape()) + " vs " + shape_string(geometry.dims));
    if (labels->data().minCoeff() < 0) throw DataError("subject '" + id + "': negative label");
  }
}

Array SubjectVolume::batched() const { return as_batched(intensities); }

Array as_batched(const Array& spatial) {
  Shape s{1, 1};
  s.insert(s.end(), spatial.shape().begin(), spatial.shape().end());
  return spatial.reshaped(std::move(s));
}

LabelArray as_batched(const LabelArray& spatial) {
  Shape s{1, 1};
  s.insert(s.end(), spatial.shape().begin(), spatial.shape().end());
  return spatial.reshaped(std::move(s));
}

Array unbatched(const Array& batched) {
  if (batched.rank() < 3 || batched.dim(0) != 1 || batched.dim(1) != 1)
    throw ShapeError("unbatched", "batch", shape_string(batched.shape()));
  return batched.reshaped(Shape(batched.shape().begin() + 2, batched.shape().end()));
}

LabelArray unbatched(const LabelArray& batched) {
  if (batched.rank() < 3 || batched.dim(0) != 1 || batched.dim(1) != 1)
    throw ShapeError("unbatched", "batch", shape_string(batched.shape()));
  return batched.reshaped(Shape(batched.shape().begin() + 2, batched.shape().end()));
}

std::string to_string(VolumeKind kind) {
  switch (kind) {
    case VolumeKind::image: return "image";
    case VolumeKind::labels: return "labels";
    case VolumeKind::velocity: return "velocity";
    case VolumeKind::displacement: return "displacement";
  }
  return "image";
}

VolumeKind volume_kind_from_string(const std::string& s) {
  if (s == "image") return VolumeKind::image;
  if (s == "labels") return VolumeKind::labels;
  if (s == "velocity") return VolumeKind::velocity;
  if (s == "displacement") return VolumeKind::displacement;
  throw DataError("unknown volume kind '" + s + "'");
}

fs::path volume_base(const fs::path& path) {
  if (path.extension() == ".json" || path.extension() == ".raw") {
    fs::path base = path;
    base.replace_extension();
    return base;
  }
  return path;
}

namespace {

fs::path with_suffix(const fs::path& base, const char* suffix) {
  fs::path p = base;
  p += suffix;
  return p;
}

std::vector<double> spacing_for(const Shape& shape, VolumeKind kind, const std::vector<double>& spacing) {
  const std::size_t spatial = (kind == VolumeKind::velocity || kind == VolumeKind::displacement) ? shape.size() - 1 : shape.size();
  if (spacing.empty()) return std::vector<double>(spatial, 1.0);
  if (spacing.size() != spatial) throw ShapeError("write_volume", "spacing", "expected " + std::to_string(spatial) + " entries");
  return spacing;
}

void write_pair(const fs::path& path, const Shape& shape, const char* dtype, VolumeKind kind,
                const std::vector<double>& spacing, const std::string& blob) {
  const fs::path base = volume_base(path);
  const fs::path raw = with_suffix(base, ".raw");
  nlohmann::json sidecar = {{"shape", shape},
                            {"dtype", dtype},
                            {"kind", to_string(kind)},
                            {"spacing", spacing_for(shape, kind, spacing)},
                            {"data", raw.filename().string()}};
  write_file_atomic(raw, blob);
  write_file_atomic(with_suffix(base, ".json"), sidecar.dump(2) + "\n");
}

}  // namespace

void write_volume(const fs::path& path, const Array& values, VolumeKind kind, const std::vector<double>& spacing) {
  if (kind == VolumeKind::labels) throw DataError("write_volume: use write_labels for label maps");
  std::string blob(static_cast<std::size_t>(values.size()) * sizeof(float), '\0');
  for (Index i = 0; i < values.size(); ++i) {
    const double v = values[i];
    if (std::isfinite(v) && std::abs(v) > std::numeric_limits<float>::max())
      throw DataError("write_volume: value outside float32 range");
    const float f = static_cast<float>(v);
    std::memcpy(blob.data() + i * sizeof(float), &f, sizeof(float));
  }
  write_pair(path, values.shape(), "float32", kind, spacing, blob);
}

void write_labels(const fs::path& path, const LabelArray& labels, const std::vector<double>& spacing) {
  std::string blob(static_cast<std::size_t>(labels.size()) * sizeof(std::uint16_t), '\0');
  for (Index i = 0; i < labels.size(); ++i) {
    const int v = labels[i];
    if (v < 0 || v > 65535) throw DataError("write_labels: label " + std::to_string(v) + " outside uint16 range");
    const auto u = static_cast<std::uint16_t>(v);
    std::memcpy(blob.data() + i * sizeof(std::uint16_t), &u, sizeof(u));
  }
  write_pair(path, labels.shape(), "uint16", VolumeKind::labels, spacing, blob);
}

StoredVolume read_volume(const fs::path& path) {
  const fs::path base = volume_base(path);
  const fs::path json_path = with_suffix(base, ".json");
  nlohmann::json sidecar;
  try {
    sidecar = nlohmann::json::parse(read_file(json_path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("volume sidecar " + json_path.string() + ": " + e.what());
  }
  StoredVolume v;
  try {
    v.shape = sidecar.at("shape").get<Shape>();
    v.kind = volume_kind_from_string(sidecar.at("kind").get<std::string>());
    v.spacing = sidecar.at("spacing").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("volume sidecar " + json_path.string() + ": " + e.what());
  }
  const std::string dtype = sidecar.value("dtype", "");
  const fs::path raw = base.parent_path() / sidecar.value("data", with_suffix(base, ".raw").filename().string());
  const std::string blob = read_file(raw);
  const Index n = shape_size(v.shape);
  if (dtype == "float32") {
    if (v.kind == VolumeKind::labels) throw DataError(json_path.string() + ": labels must be uint16");
    if (blob.size() != static_cast<std::size_t>(n) * sizeof(float))
      throw DataError(raw.string() + ": expected " + std::to_string(n * sizeof(float)) + " bytes, found " +
                      std::to_string(blob.size()));
    v.values = Array(v.shape);
    for (Index i = 0; i < n; ++i) {
      float f;
      std::memcpy(&f, blob.data() + i * sizeof(float), sizeof(float));
      v.values[i] = f;
    }
  } else if (dtype == "uint16") {
    if (v.kind != VolumeKind::labels) throw DataError(json_path.string() + ": uint16 is reserved for labels");
    if (blob.size() != static_cast<std::size_t>(n) * sizeof(std::uint16_t))
      throw DataError(raw.string() + ": expected " + std::to_string(n * sizeof(std::uint16_t)) + " bytes, found " +
                      std::to_string(blob.size()));
    v.labels = LabelArray(v.shape);
    for (Index i = 0; i < n; ++i) {
      std::uint16_t u;
      std::memcpy(&u, blob.data() + i * sizeof(u), sizeof(u));
      v.labels[i] = u;
    }
  } else {
    throw DataError(json_path.string() + ": unsupported dtype '" + dtype + "'");
  }
  return v;
}

SubjectVolume load_subject(const fs::path& image, const std::optional<fs::path>& labels) {
  SubjectVolume s;
  if (image.extension() == ".nii") {
    s = read_nifti1(image);
  } else {
    StoredVolume img = read_volume(image);
    if (img.kind != VolumeKind::image) throw DataError(image.string() + ": not an image volume");
    s.geometry = VolumeGeometry(img.shape, img.spacing);
    s.intensities = std::move(img.values);
    s.id = volume_base(image).filename().string();
  }
  if (labels) {
    StoredVolume lab = read_volume(*labels);
    if (lab.kind != VolumeKind::labels) throw DataError(labels->string() + ": not a label volume");
    s.labels = std::move(lab.labels);
  }
  s.validate();
  return s;
}

void export_slice(const Array& volume, char axis, Index index, const fs::path& path) {
  const Shape& s = volume.shape();
  Index rows = 0;
  Index cols = 0;
  std::vector<double> pixels;
  if (s.size() == 2) {
    // a 2-D image is the single z-slice of a one-slice volume
    if (axis != 'z') throw Error(ErrorKind::usage, std::string("a 2-D image has only axis z, got '") + axis + "'");
    if (index != 0) throw Error(ErrorKind::usage, "slice index " + std::to_string(index) + " outside [0, 1)");
    rows = s[0];
    cols = s[1];
    pixels.assign(volume.span().begin(), volume.span().end());
  } else if (s.size() == 3) {
    int fixed;
    switch (axis) {
      case 'z': fixed = 0; break;
      case 'y': fixed = 1; break;
      case 'x': fixed = 2; break;
      default: throw Error(ErrorKind::usage, std::string("slice axis must be x, y or z, got '") + axis + "'");
    }
    if (index < 0 || index >= s[static_cast<std::size_t>(fixed)])
      throw Error(ErrorKind::usage, "slice index " + std::to_string(index) + " outside [0, " +
                                        std::to_string(s[static_cast<std::size_t>(fixed)]) + ")");
    std::array<Index, 2> free{};
    for (int a = 0, k = 0; a < 3; ++a)
      if (a != fixed) free[static_cast<std::size_t>(k++)] = a;
    rows = s[static_cast<std::size_t>(free[0])];
    cols = s[static_cast<std::size_t>(free[1])];
    pixels.resize(static_cast<std::size_t>(rows * cols));
    for (Index r = 0; r < rows; ++r)
      for (Index c = 0; c < cols; ++c) {
        Index idx[3];
        idx[fixed] = index;
        idx[free[0]] = r;
        idx[free[1]] = c;
        pixels[static_cast<std::size_t>(r * cols + c)] = volume[(idx[0] * s[1] + idx[1]) * s[2] + idx[2]];
      }
  } else {
    throw ShapeError("export_slice", "rank", "expected a 2-D or 3-D volume, got " + shape_string(s));
  }
  std::string bytes = "P5\n" + std::to_string(cols) + " " + std::to_string(rows) + "\n255\n";
  for (double v : pixels) {
    const double c = std::isfinite(v) ? std::clamp(v, 0.0, 1.0) : 0.0;
    bytes.push_back(static_cast<char>(static_cast<unsigned char>(kernels::round_half_away(c * 255.0))));
  }
  write_file_atomic(path, bytes);
}

}  // namespace setgen
