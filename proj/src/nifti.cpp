#include "brainseg/nifti.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <memory>

namespace brainseg {
namespace {

static_assert(std::endian::native == std::endian::little, "NIfTI writer assumes a little-endian host");

bool has_gz_suffix(const std::filesystem::path& path) { return path.extension() == ".gz"; }

std::vector<unsigned char> read_all(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("no such file: " + path.string());
  // gzread passes uncompressed input through unchanged.
  std::unique_ptr<gzFile_s, int (*)(gzFile)> file(gzopen(path.string().c_str(), "rb"), gzclose);
  if (!file) throw IoError("cannot open " + path.string());
  std::vector<unsigned char> bytes;
  std::array<unsigned char, 1 << 16> chunk{};
  for (;;) {
    const int n = gzread(file.get(), chunk.data(), static_cast<unsigned>(chunk.size()));
    if (n < 0) {
      int errnum = 0;
      const char* msg = gzerror(file.get(), &errnum);
      throw FormatError(path.string() + ": corrupt compressed stream (" + (msg ? msg : "unknown") + ")");
    }
    if (n == 0) break;
    bytes.insert(bytes.end(), chunk.begin(), chunk.begin() + n);
  }
  return bytes;
}

void write_all(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  if (has_gz_suffix(path)) {
    std::unique_ptr<gzFile_s, int (*)(gzFile)> file(gzopen(path.string().c_str(), "wb6"), gzclose);
    if (!file) throw IoError("cannot write " + path.string());
    if (gzwrite(file.get(), bytes.data(), static_cast<unsigned>(bytes.size())) != static_cast<int>(bytes.size())) {
      throw IoError("short write to " + path.string());
    }
    if (gzclose(file.release()) != Z_OK) throw IoError("failed to finalize " + path.string());
    return;
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

/// Byte cursor over the raw header with optional byte swapping.
class HeaderReader {
 public:
  HeaderReader(const std::vector<unsigned char>& bytes, bool swap) : bytes_(bytes), swap_(swap) {}

  template <typename T>
  T get(std::size_t offset) const {
    std::array<unsigned char, sizeof(T)> raw{};
    std::memcpy(raw.data(), bytes_.data() + offset, sizeof(T));
    if (swap_) std::reverse(raw.begin(), raw.end());
    T v;
    std::memcpy(&v, raw.data(), sizeof(T));
    return v;
  }

 private:
  const std::vector<unsigned char>& bytes_;
  bool swap_;
};

/// pixdim is float32 on disk; widening through the shortest decimal form
/// makes a stored 0.96 read back as the double 0.96.
double widen_spacing(float v) {
  std::array<char, 32> text{};
  auto [end, ec] = std::to_chars(text.data(), text.data() + text.size(), v);
  double out = v;
  if (ec == std::errc{}) std::from_chars(text.data(), end, out);
  return out;
}

struct Decoded {
  Shape3 shape;
  Spacing spacing;
  std::vector<double> values;
  bool integral_type = false;
};

int bytes_per_voxel(short datatype) {
  switch (datatype) {
    case nifti::kUInt8:
    case nifti::kInt8:
      return 1;
    case nifti::kInt16:
    case nifti::kUInt16:
      return 2;
    case nifti::kInt32:
    case nifti::kFloat32:
      return 4;
    case nifti::kFloat64:
      return 8;
    default:
      return 0;
  }
}

template <typename T>
void decode_payload(const unsigned char* src, std::size_t n, bool swap, std::vector<double>& out) {
  out.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::array<unsigned char, sizeof(T)> raw{};
    std::memcpy(raw.data(), src + i * sizeof(T), sizeof(T));
    if (swap) std::reverse(raw.begin(), raw.end());
    T v;
    std::memcpy(&v, raw.data(), sizeof(T));
    out[i] = static_cast<double>(v);
  }
}

Decoded decode(const std::filesystem::path& path) {
  const auto bytes = read_all(path);
  const std::string where = path.string() + ": ";
  if (bytes.size() < static_cast<std::size_t>(nifti::kHeaderSize)) {
    throw FormatError(where + "truncated header (" + std::to_string(bytes.size()) + " of 348 bytes, field sizeof_hdr)");
  }
  int sizeof_hdr = 0;
  std::memcpy(&sizeof_hdr, bytes.data(), 4);
  bool swap = false;
  if (sizeof_hdr != nifti::kHeaderSize) {
    swap = true;
    if (HeaderReader(bytes, true).get<int>(0) != nifti::kHeaderSize) {
      throw FormatError(where + "field sizeof_hdr is " + std::to_string(sizeof_hdr) + ", expected 348");
    }
  }
  if (std::memcmp(bytes.data() + 344, "n+1\0", 4) != 0) {
    throw FormatError(where + "field magic is not \"n+1\" (only single-file NIfTI-1 is supported)");
  }
  const HeaderReader h(bytes, swap);

  std::array<short, 8> dim{};
  for (int i = 0; i < 8; ++i) dim[i] = h.get<short>(40 + 2 * i);
  if (dim[0] < 2 || dim[0] > 7) throw FormatError(where + "field dim[0] = " + std::to_string(dim[0]) + " is invalid");
  for (int i = 1; i <= dim[0]; ++i) {
    if (dim[i] <= 0) throw FormatError(where + "field dim[" + std::to_string(i) + "] is not positive");
  }
  for (int i = 4; i <= dim[0]; ++i) {
    if (dim[i] != 1) throw FormatError(where + "field dim[" + std::to_string(i) + "] > 1; only 3D images are supported");
  }
  Decoded out;
  out.shape = {dim[1], dim[2], dim[0] >= 3 ? dim[3] : 1};

  std::array<float, 8> pixdim{};
  for (int i = 0; i < 8; ++i) pixdim[i] = h.get<float>(76 + 4 * i);
  const int nd = std::min<int>(dim[0], 3);
  for (int i = 1; i <= nd; ++i) {
    if (!(pixdim[i] > 0.0f) || !std::isfinite(pixdim[i])) {
      throw FormatError(where + "field pixdim[" + std::to_string(i) + "] = " + std::to_string(pixdim[i]) +
                        " is not a positive spacing");
    }
  }
  out.spacing = {widen_spacing(pixdim[1]), widen_spacing(pixdim[2]), nd >= 3 ? widen_spacing(pixdim[3]) : 1.0};

  const short datatype = h.get<short>(70);
  const int bpv = bytes_per_voxel(datatype);
  if (bpv == 0) throw UnsupportedTypeError(where + "unsupported datatype code " + std::to_string(datatype));
  const short bitpix = h.get<short>(72);
  if (bitpix != bpv * 8) {
    throw FormatError(where + "field bitpix = " + std::to_string(bitpix) + " disagrees with datatype " +
                      std::to_string(datatype));
  }
  const float vox_offset = h.get<float>(108);
  if (!(vox_offset >= static_cast<float>(nifti::kHeaderSize)) || vox_offset != std::floor(vox_offset)) {
    throw FormatError(where + "field vox_offset = " + std::to_string(vox_offset) + " is invalid");
  }
  const auto offset = static_cast<std::size_t>(vox_offset);
  const std::size_t n = out.shape.voxels();
  if (bytes.size() < offset + n * static_cast<std::size_t>(bpv)) {
    throw FormatError(where + "truncated voxel payload: expected " + std::to_string(n * bpv) + " bytes at vox_offset " +
                      std::to_string(offset) + ", file has " + std::to_string(bytes.size()));
  }
  const unsigned char* src = bytes.data() + offset;
  switch (datatype) {
    case nifti::kUInt8:
      decode_payload<std::uint8_t>(src, n, swap, out.values);
      break;
    case nifti::kInt8:
      decode_payload<std::int8_t>(src, n, swap, out.values);
      break;
    case nifti::kInt16:
      decode_payload<std::int16_t>(src, n, swap, out.values);
      break;
    case nifti::kUInt16:
      decode_payload<std::uint16_t>(src, n, swap, out.values);
      break;
    case nifti::kInt32:
      decode_payload<std::int32_t>(src, n, swap, out.values);
      break;
    case nifti::kFloat32:
      decode_payload<float>(src, n, swap, out.values);
      break;
    case nifti::kFloat64:
      decode_payload<double>(src, n, swap, out.values);
      break;
    default:
      break;
  }
  out.integral_type = datatype != nifti::kFloat32 && datatype != nifti::kFloat64;

  const float slope = h.get<float>(112);
  const float inter = h.get<float>(116);
  if (slope != 0.0f && std::isfinite(slope) && std::isfinite(inter) && (slope != 1.0f || inter != 0.0f)) {
    for (auto& v : out.values) v = v * slope + inter;
    out.integral_type = false;
  }
  return out;
}

template <typename T>
void put(std::vector<unsigned char>& buf, std::size_t offset, T v) {
  std::memcpy(buf.data() + offset, &v, sizeof(T));
}

std::vector<unsigned char> encode_header(const Shape3& shape, const Spacing& spacing, short datatype, int bpv) {
  std::vector<unsigned char> buf(nifti::kVoxOffset + shape.voxels() * static_cast<std::size_t>(bpv), 0);
  put<int>(buf, 0, nifti::kHeaderSize);
  put<char>(buf, 38, 'r');
  const std::array<short, 8> dim = {3, static_cast<short>(shape.x), static_cast<short>(shape.y),
                                    static_cast<short>(shape.z), 1, 1, 1, 1};
  for (int i = 0; i < 8; ++i) put<short>(buf, 40 + 2 * i, dim[i]);
  put<short>(buf, 70, datatype);
  put<short>(buf, 72, static_cast<short>(bpv * 8));
  const std::array<float, 8> pixdim = {1.0f, static_cast<float>(spacing.dx), static_cast<float>(spacing.dy),
                                       static_cast<float>(spacing.dz), 1.0f, 1.0f, 1.0f, 1.0f};
  for (int i = 0; i < 8; ++i) put<float>(buf, 76 + 4 * i, pixdim[i]);
  put<float>(buf, 108, static_cast<float>(nifti::kVoxOffset));
  put<float>(buf, 112, 1.0f);
  put<char>(buf, 123, 2);  // xyzt_units: millimeters
  put<short>(buf, 254, 1);  // sform_code: scanner
  put<float>(buf, 280, pixdim[1]);
  put<float>(buf, 296 + 4, pixdim[2]);
  put<float>(buf, 312 + 8, pixdim[3]);
  std::memcpy(buf.data() + 344, "n+1\0", 4);
  return buf;
}

void check_dims_fit(const Shape3& s, const std::filesystem::path& path) {
  constexpr int kMax = 32767;
  if (s.x > kMax || s.y > kMax || s.z > kMax) {
    throw ArgumentError(path.string() + ": dimensions exceed the NIfTI-1 limit of 32767");
  }
}

}  // namespace

ScalarVolume load_nifti(const std::filesystem::path& path) {
  auto d = decode(path);
  std::vector<float> data(d.values.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    data[i] = static_cast<float>(d.values[i]);
    if (!std::isfinite(data[i])) throw FormatError(path.string() + ": voxel " + std::to_string(i) + " is not finite");
  }
  return ScalarVolume(d.shape, d.spacing, std::move(data));
}

LabelVolume load_nifti_labels(const std::filesystem::path& path) {
  auto d = decode(path);
  std::vector<std::int16_t> data(d.values.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double v = d.values[i];
    if (!d.integral_type && v != std::round(v)) {
      throw FormatError(path.string() + ": voxel " + std::to_string(i) + " holds non-integral label " +
                        std::to_string(v));
    }
    if (v < 0.0 || v > label::kMaxCode) {
      throw FormatError(path.string() + ": label code " + std::to_string(static_cast<long long>(v)) +
                        " at voxel " + std::to_string(i) + " is outside the valid range 0..10");
    }
    data[i] = static_cast<std::int16_t>(v);
  }
  return LabelVolume(d.shape, d.spacing, std::move(data));
}

void save_nifti(const ScalarVolume& volume, const std::filesystem::path& path) {
  check_dims_fit(volume.shape(), path);
  auto buf = encode_header(volume.shape(), volume.spacing(), nifti::kFloat32, 4);
  std::memcpy(buf.data() + nifti::kVoxOffset, volume.data().data(), volume.size() * sizeof(float));
  write_all(path, buf);
}

void save_nifti(const LabelVolume& volume, const std::filesystem::path& path) {
  check_dims_fit(volume.shape(), path);
  auto buf = encode_header(volume.shape(), volume.spacing(), nifti::kInt16, 2);
  std::memcpy(buf.data() + nifti::kVoxOffset, volume.data().data(), volume.size() * sizeof(std::int16_t));
  write_all(path, buf);
}

}  // namespace brainseg
