#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>

#include "setgen/checkpoint.hpp"
#include "setgen/volume.hpp"

namespace setgen {

namespace {

constexpr std::size_t kHeaderBytes = 348;

enum : std::int16_t { dt_uint8 = 2, dt_int16 = 4, dt_float32 = 16 };

class HeaderReader {
 public:
  HeaderReader(const std::string& bytes, bool swap) : bytes_(bytes), swap_(swap) {}

  template <class T>
  T get(std::size_t offset) const {
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, bytes_.data() + offset, sizeof(T));
    if (swap_) std::reverse(raw, raw + sizeof(T));
    T v;
    std::memcpy(&v, raw, sizeof(T));
    return v;
  }

 private:
  const std::string& bytes_;
  bool swap_;
};

}  // namespace

SubjectVolume read_nifti1(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const std::string where = path.string() + ": ";
  if (bytes.size() < kHeaderBytes) throw DataError(where + "truncated NIfTI header");
  if (std::memcmp(bytes.data() + 344, "n+1\0", 4) != 0)
    throw DataError(where + "bad NIfTI magic (expected single-file \"n+1\")");

  std::int32_t sizeof_hdr;
  std::memcpy(&sizeof_hdr, bytes.data(), 4);
  bool swap = false;
  if (sizeof_hdr != 348) {
    HeaderReader probe(bytes, true);
    if (probe.get<std::int32_t>(0) != 348) throw DataError(where + "sizeof_hdr is not 348");
    swap = true;
  }
  const HeaderReader h(bytes, swap);

  const int ndim = h.get<std::int16_t>(40);
  if (ndim < 2 || ndim > 7) throw DataError(where + "dim[0] = " + std::to_string(ndim) + " out of range");
  std::vector<Index> extent;
  for (int i = 1; i <= ndim; ++i) {
    const int n = h.get<std::int16_t>(40 + 2 * i);
    if (n < 1) throw DataError(where + "dim[" + std::to_string(i) + "] = " + std::to_string(n));
    extent.push_back(n);
  }
  // Trailing singleton axes (time, vector) collapse; anything else is unsupported.
  while (extent.size() > 2 && extent.back() == 1) extent.pop_back();
  if (extent.size() > 3) throw DataError(where + "only 2-D and 3-D volumes are supported");

  const std::int16_t datatype = h.get<std::int16_t>(70);
  std::size_t elem;
  switch (datatype) {
    case dt_uint8: elem = 1; break;
    case dt_int16: elem = 2; break;
    case dt_float32: elem = 4; break;
    default: throw DataError(where + "unsupported NIfTI datatype " + std::to_string(datatype));
  }

  const float vox_offset = h.get<float>(108);
  if (!(vox_offset >= 0.0f)) throw DataError(where + "negative vox_offset");
  const auto offset = static_cast<std::size_t>(vox_offset);
  Index count = 1;
  for (Index n : extent) count *= n;
  if (bytes.size() < offset + static_cast<std::size_t>(count) * elem)
    throw DataError(where + "truncated voxel data (need " + std::to_string(offset + count * elem) + " bytes, have " +
                    std::to_string(bytes.size()) + ")");

  float slope = h.get<float>(112);
  const float inter = h.get<float>(116);
  if (slope == 0.0f || !std::isfinite(slope)) slope = 1.0f;

  // NIfTI is x-fastest; reversing the axes gives our slowest-first order with
  // an identical byte layout.
  Shape shape(extent.rbegin(), extent.rend());
  std::vector<double> spacing;
  for (std::size_t i = 0; i < extent.size(); ++i) {
    const float p = h.get<float>(80 + 4 * i);
    spacing.push_back(p > 0.0f && std::isfinite(p) ? p : 1.0);
  }
  std::reverse(spacing.begin(), spacing.end());

  Array values(shape);
  const HeaderReader data(bytes, swap);
  for (Index i = 0; i < count; ++i) {
    const std::size_t at = offset + static_cast<std::size_t>(i) * elem;
    double v;
    switch (datatype) {
      case dt_uint8: v = static_cast<unsigned char>(bytes[at]); break;
      case dt_int16: v = data.get<std::int16_t>(at); break;
      default: v = data.get<float>(at); break;
    }
    if (!std::isfinite(v)) throw DataError(where + "non-finite voxel at index " + std::to_string(i));
    values[i] = slope * v + inter;
  }
  const double lo = values.data().minCoeff();
  const double hi = values.data().maxCoeff();
  if (hi > lo)
    values.data() = (values.data() - lo) / (hi - lo);
  else
    values.data().setZero();

  SubjectVolume s;
  s.geometry = VolumeGeometry(shape, spacing);
  s.intensities = std::move(values);
  s.id = path.stem().string();
  s.validate();
  return s;
}

}  // namespace setgen
