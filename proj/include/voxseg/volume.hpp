#pragma once

// 3D scalar grids with physical spacing, 2D slices, and file I/O in a
// MetaImage-compatible subset.
//
// Storage order is fixed: x fastest, then y, then z (axial-slice-major).
// The file format is a text header (.mhd) next to a raw little-endian
// payload; see read_volume()/write_volume() for the exact key set.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace voxseg {

template <class T>
struct Image2 {
  int width = 0;
  int height = 0;
  std::vector<T> data;

  Image2() = default;
  Image2(int w, int h, T fill = T{}) : width(w), height(h), data(size_t(w) * h, fill) {}

  T& at(int i, int j) { return data[size_t(j) * width + i]; }
  const T& at(int i, int j) const { return data[size_t(j) * width + i]; }
  size_t size() const { return data.size(); }
};

using ImageF = Image2<float>;

template <class T>
struct Grid3 {
  std::array<int, 3> dims{0, 0, 0};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::vector<T> data;

  Grid3() = default;
  Grid3(std::array<int, 3> d, std::array<double, 3> s, T fill = T{})
      : dims(d), spacing(s), data(size_t(d[0]) * d[1] * d[2], fill) {
    if (d[0] <= 0 || d[1] <= 0 || d[2] <= 0)
      throw std::invalid_argument("Grid3: dims must be strictly positive");
    if (s[0] <= 0 || s[1] <= 0 || s[2] <= 0)
      throw std::invalid_argument("Grid3: spacing must be strictly positive");
  }

  int nx() const { return dims[0]; }
  int ny() const { return dims[1]; }
  int nz() const { return dims[2]; }
  size_t size() const { return data.size(); }

  size_t index(int x, int y, int z) const {
    return (size_t(z) * dims[1] + y) * dims[0] + x;
  }
  T& at(int x, int y, int z) { return data[index(x, y, z)]; }
  const T& at(int x, int y, int z) const { return data[index(x, y, z)]; }

  bool in_bounds(int x, int y, int z) const {
    return x >= 0 && x < dims[0] && y >= 0 && y < dims[1] && z >= 0 && z < dims[2];
  }

  /// Clamped accessor (replicate border).
  const T& at_clamped(int x, int y, int z) const {
    auto cl = [](int v, int n) { return v < 0 ? 0 : (v >= n ? n - 1 : v); };
    return data[index(cl(x, dims[0]), cl(y, dims[1]), cl(z, dims[2]))];
  }

  bool same_geometry(const Grid3& o) const {
    return dims == o.dims;
  }

  bool operator==(const Grid3& o) const {
    return dims == o.dims && spacing == o.spacing && data == o.data;
  }
};

using Volume = Grid3<float>;
using Mask = Grid3<uint8_t>;
using LabelVolume = Grid3<uint32_t>;

enum class Axis { axial, coronal, sagittal };

inline const char* axis_name(Axis a) {
  switch (a) {
    case Axis::axial: return "axial";
    case Axis::coronal: return "coronal";
    default: return "sagittal";
  }
}

/// Extracts one orthogonal plane. Index is checked, not clamped.
/// axial z: img(i,j) = v(i, j, z); coronal y: img(i,j) = v(i, y, j);
/// sagittal x: img(i,j) = v(x, i, j).
template <class T>
Image2<T> extract_slice(const Grid3<T>& v, Axis axis, int index) {
  auto check = [&](int extent) {
    if (index < 0 || index >= extent) {
      std::ostringstream oss;
      oss << "extract_slice: " << axis_name(axis) << " index " << index
          << " out of range [0, " << extent << ")";
      throw std::out_of_range(oss.str());
    }
  };
  Image2<T> img;
  switch (axis) {
    case Axis::axial: {
      check(v.nz());
      img = Image2<T>(v.nx(), v.ny());
      for (int j = 0; j < v.ny(); ++j)
        for (int i = 0; i < v.nx(); ++i) img.at(i, j) = v.at(i, j, index);
      break;
    }
    case Axis::coronal: {
      check(v.ny());
      img = Image2<T>(v.nx(), v.nz());
      for (int j = 0; j < v.nz(); ++j)
        for (int i = 0; i < v.nx(); ++i) img.at(i, j) = v.at(i, index, j);
      break;
    }
    case Axis::sagittal: {
      check(v.nx());
      img = Image2<T>(v.ny(), v.nz());
      for (int j = 0; j < v.nz(); ++j)
        for (int i = 0; i < v.ny(); ++i) img.at(i, j) = v.at(index, i, j);
      break;
    }
  }
  return img;
}

// ---------------------------------------------------------------------------
// MetaImage-subset I/O.
//
// Header keys, all required, no others allowed:
//   ObjectType = Image
//   NDims = 3
//   DimSize = nx ny nz
//   ElementSpacing = sx sy sz
//   ElementType = MET_FLOAT | MET_UCHAR | MET_UINT
//   ElementByteOrderMSB = False
//   ElementDataFile = <raw file, relative to the header>

namespace detail {

template <class T>
struct MetType;
template <>
struct MetType<float> {
  static constexpr const char* name = "MET_FLOAT";
  using wire = uint32_t;
};
template <>
struct MetType<uint8_t> {
  static constexpr const char* name = "MET_UCHAR";
  using wire = uint8_t;
};
template <>
struct MetType<uint32_t> {
  static constexpr const char* name = "MET_UINT";
  using wire = uint32_t;
};

inline std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <class T>
void encode_le(const std::vector<T>& in, std::vector<unsigned char>& out) {
  using W = typename MetType<T>::wire;
  out.resize(in.size() * sizeof(W));
  unsigned char* p = out.data();
  for (const T& v : in) {
    W w = std::bit_cast<W>(v);
    for (size_t b = 0; b < sizeof(W); ++b) *p++ = (unsigned char)(w >> (8 * b));
  }
}

template <class T>
void decode_le(const std::vector<unsigned char>& in, std::vector<T>& out) {
  using W = typename MetType<T>::wire;
  out.resize(in.size() / sizeof(W));
  const unsigned char* p = in.data();
  for (T& v : out) {
    W w = 0;
    for (size_t b = 0; b < sizeof(W); ++b) w |= W(uint64_t(*p++) << (8 * b));
    v = std::bit_cast<T>(w);
  }
}

}  // namespace detail

template <class T>
void write_volume(const Grid3<T>& v, const std::filesystem::path& header_path) {
  if (v.dims[0] <= 0 || v.dims[1] <= 0 || v.dims[2] <= 0)
    throw std::invalid_argument("write_volume: dims must be strictly positive");
  if (v.data.size() != size_t(v.dims[0]) * v.dims[1] * v.dims[2])
    throw std::invalid_argument("write_volume: data length does not match dims");
  if (v.spacing[0] <= 0 || v.spacing[1] <= 0 || v.spacing[2] <= 0)
    throw std::invalid_argument("write_volume: spacing must be strictly positive");
  if constexpr (std::is_same_v<T, float>) {
    for (float x : v.data)
      if (!std::isfinite(x))
        throw std::invalid_argument("write_volume: payload contains non-finite values");
  }

  std::filesystem::path raw_path = header_path;
  raw_path.replace_extension(".raw");

  std::vector<unsigned char> bytes;
  detail::encode_le(v.data, bytes);
  {
    std::ofstream raw(raw_path, std::ios::binary | std::ios::trunc);
    if (!raw) throw std::runtime_error("write_volume: cannot open " + raw_path.string());
    raw.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!raw) throw std::runtime_error("write_volume: write failed for " + raw_path.string());
  }

  char spacing_buf[96];
  std::snprintf(spacing_buf, sizeof spacing_buf, "%.17g %.17g %.17g", v.spacing[0],
                v.spacing[1], v.spacing[2]);
  std::ofstream hdr(header_path, std::ios::trunc);
  if (!hdr) throw std::runtime_error("write_volume: cannot open " + header_path.string());
  hdr << "ObjectType = Image\n"
      << "NDims = 3\n"
      << "DimSize = " << v.dims[0] << ' ' << v.dims[1] << ' ' << v.dims[2] << '\n'
      << "ElementSpacing = " << spacing_buf << '\n'
      << "ElementType = " << detail::MetType<T>::name << '\n'
      << "ElementByteOrderMSB = False\n"
      << "ElementDataFile = " << raw_path.filename().string() << '\n';
  if (!hdr) throw std::runtime_error("write_volume: write failed for " + header_path.string());
}

template <class T>
Grid3<T> read_volume(const std::filesystem::path& header_path) {
  std::ifstream hdr(header_path);
  if (!hdr)
    throw std::runtime_error("read_volume: cannot open header " + header_path.string());

  const std::array<std::string, 7> required = {
      "ObjectType",     "NDims",          "DimSize",        "ElementSpacing",
      "ElementType",    "ElementByteOrderMSB", "ElementDataFile"};
  std::array<std::string, 7> values;
  std::array<bool, 7> seen{};

  std::string line;
  while (std::getline(hdr, line)) {
    if (detail::trim(line).empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("read_volume: malformed header line '" + line + "' in " +
                               header_path.string());
    std::string key = detail::trim(line.substr(0, eq));
    std::string value = detail::trim(line.substr(eq + 1));
    bool known = false;
    for (size_t k = 0; k < required.size(); ++k) {
      if (key == required[k]) {
        if (seen[k])
          throw std::runtime_error("read_volume: duplicate header key '" + key + "'");
        seen[k] = true;
        values[k] = value;
        known = true;
        break;
      }
    }
    if (!known)
      throw std::runtime_error("read_volume: unsupported header key '" + key + "'");
  }
  for (size_t k = 0; k < required.size(); ++k)
    if (!seen[k])
      throw std::runtime_error("read_volume: missing header key '" + required[k] + "'");

  if (values[0] != "Image")
    throw std::runtime_error("read_volume: ObjectType must be Image");
  if (values[1] != "3")
    throw std::runtime_error("read_volume: NDims must be 3");
  if (values[5] != "False")
    throw std::runtime_error("read_volume: ElementByteOrderMSB must be False");

  static const std::array<std::string, 3> known_types = {"MET_FLOAT", "MET_UCHAR", "MET_UINT"};
  bool type_known = false;
  for (auto& t : known_types) type_known |= (values[4] == t);
  if (!type_known)
    throw std::runtime_error("read_volume: unsupported element type '" + values[4] + "'");
  if (values[4] != detail::MetType<T>::name)
    throw std::runtime_error("read_volume: element type mismatch: file has " + values[4] +
                             ", expected " + detail::MetType<T>::name);

  Grid3<T> v;
  {
    std::istringstream ds(values[2]);
    if (!(ds >> v.dims[0] >> v.dims[1] >> v.dims[2]))
      throw std::runtime_error("read_volume: cannot parse DimSize '" + values[2] + "'");
    if (v.dims[0] <= 0 || v.dims[1] <= 0 || v.dims[2] <= 0)
      throw std::runtime_error("read_volume: DimSize must be strictly positive");
  }
  {
    std::istringstream ss(values[3]);
    if (!(ss >> v.spacing[0] >> v.spacing[1] >> v.spacing[2]))
      throw std::runtime_error("read_volume: cannot parse ElementSpacing '" + values[3] + "'");
    if (v.spacing[0] <= 0 || v.spacing[1] <= 0 || v.spacing[2] <= 0)
      throw std::runtime_error("read_volume: ElementSpacing must be strictly positive");
  }

  std::filesystem::path raw_path = header_path.parent_path() / values[6];
  std::ifstream raw(raw_path, std::ios::binary);
  if (!raw)
    throw std::runtime_error("read_volume: cannot open payload " + raw_path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(raw)),
                                   std::istreambuf_iterator<char>());

  using W = typename detail::MetType<T>::wire;
  size_t expected = size_t(v.dims[0]) * v.dims[1] * v.dims[2] * sizeof(W);
  if (bytes.size() != expected) {
    std::ostringstream oss;
    oss << "read_volume: payload size mismatch for " << raw_path.string() << ": expected "
        << expected << " bytes, got " << bytes.size();
    throw std::runtime_error(oss.str());
  }
  detail::decode_le(bytes, v.data);
  return v;
}

}  // namespace voxseg
