#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "setgen/deform.hpp"
#include "setgen/ndarray.hpp"

namespace setgen {

/// One subject: intensities in [0,1] over `geometry.dims`, optional labels
/// on the same grid (0 = background).
struct SubjectVolume {
  VolumeGeometry geometry;
  Array intensities;
  std::optional<LabelArray> labels;
  std::string id;

  void validate() const;
  /// Intensities as a [1,1,dims...] network input.
  Array batched() const;
};

/// Views an array of shape dims as [1,1,dims...].
Array as_batched(const Array& spatial);
LabelArray as_batched(const LabelArray& spatial);
/// Drops the leading [1,1] axes.
Array unbatched(const Array& batched);
LabelArray unbatched(const LabelArray& batched);

// ---------------------------------------------------------------------------
// Raw + JSON sidecar volumes
//
// A volume `base` is stored as `base.raw` (little-endian, row-major, slowest
// axis first) and `base.json`:
//   {"shape": [...], "dtype": "float32" | "uint16",
//    "kind": "image" | "labels" | "velocity" | "displacement",
//    "spacing": [...], "data": "<file name of base.raw>"}
// Images and label maps have shape = spatial dims; vector fields have shape
// [d, dims...].

enum class VolumeKind { image, labels, velocity, displacement };

std::string to_string(VolumeKind kind);
VolumeKind volume_kind_from_string(const std::string& s);

struct StoredVolume {
  VolumeKind kind = VolumeKind::image;
  Shape shape;
  std::vector<double> spacing;
  Array values;        ///< float kinds
  LabelArray labels;   ///< labels kind
};

/// Accepts `base`, `base.json` or `base.raw`.
std::filesystem::path volume_base(const std::filesystem::path& path);

/// Stores float kinds as float32 (values outside float range are an error).
void write_volume(const std::filesystem::path& path, const Array& values, VolumeKind kind,
                  const std::vector<double>& spacing = {});
/// Stores labels as uint16 (values outside [0, 65535] are an error).
void write_labels(const std::filesystem::path& path, const LabelArray& labels, const std::vector<double>& spacing = {});
StoredVolume read_volume(const std::filesystem::path& path);

/// Reads an image volume (and optional label file) into a SubjectVolume.
/// Images ending in .nii go through read_nifti1; labels are always sidecar
/// volumes.
SubjectVolume load_subject(const std::filesystem::path& image, const std::optional<std::filesystem::path>& labels = {});

// ---------------------------------------------------------------------------
// NIfTI-1 (uncompressed single-file .nii subset)

/// Parses a 348-byte header with magic "n+1\0", datatype uint8 / int16 /
/// float32, honours vox_offset and scl_slope/scl_inter, and min-max
/// normalises intensities to [0,1]. NIfTI stores x fastest, so the returned
/// shape is [nz, ny, nx] (or [ny, nx]) with spacing reordered to match.
SubjectVolume read_nifti1(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// PGM export

/// Writes one slice as binary PGM (P5, maxval 255); pixel =
/// round_half_away(clamp(v, 0, 1) * 255). `axis` is 'x', 'y' or 'z', where
/// x is the fastest (last) array axis and z the slowest. A 2-D image is a
/// single z-slice: only axis 'z', index 0.
void export_slice(const Array& volume, char axis, Index index, const std::filesystem::path& path);

}  // namespace setgen
