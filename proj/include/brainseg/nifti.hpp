#pragma once

#include <filesystem>

#include "brainseg/volume.hpp"

namespace brainseg {

/// NIfTI-1 single-file images (.nii, or .nii.gz when the path ends in ".gz").
///
/// Readable payloads: uint8, int8, int16, uint16, int32, float32, float64.
/// Written payloads: float32 for intensity volumes, int16 for label volumes.
/// Spacing comes from pixdim[1..3]; orientation fields are read past but
/// otherwise ignored, since inputs are assumed co-registered.
namespace nifti {

inline constexpr int kHeaderSize = 348;
inline constexpr int kVoxOffset = 352;

enum DataType : short {
  kUInt8 = 2,
  kInt16 = 4,
  kInt32 = 8,
  kFloat32 = 16,
  kFloat64 = 64,
  kInt8 = 256,
  kUInt16 = 512,
};

}  // namespace nifti

ScalarVolume load_nifti(const std::filesystem::path& path);

/// Loads an integer-valued image as labels. Float payloads are accepted only
/// when every value is integral. Codes outside 0..10 raise FormatError.
LabelVolume load_nifti_labels(const std::filesystem::path& path);

void save_nifti(const ScalarVolume& volume, const std::filesystem::path& path);
void save_nifti(const LabelVolume& volume, const std::filesystem::path& path);

}  // namespace brainseg
