#pragma once

#include <cstdint>
#include <vector>

#include "brainseg/volume.hpp"

namespace brainseg {

struct NormalizedScan {
  MultiModalScan scan;
  /// Modalities whose standard deviation was below 1e-12; they are output as zeros.
  std::vector<Modality> degenerate;
};

/// Per-modality z-scoring with mean and population standard deviation taken
/// over every voxel of the volume.
NormalizedScan normalize_patient(const MultiModalScan& scan);

/// Affine map applied about the image center, composed as
/// rotation * shear * scale acting on (col, row) coordinates.
struct AffineParams {
  double rotation_deg = 0.0;
  double shear = 0.0;
  double scale_x = 1.0;
  double scale_y = 1.0;
};

struct AugmentedPair {
  Image2D image;
  LabelPlane labels;
};

/// Resamples image (bilinear) and labels (nearest) under the same map.
/// Samples falling outside the source read as 0.
AugmentedPair affine_augment(const Image2D& image, const LabelPlane& labels, const AffineParams& params);

struct AugmentationConfig {
  double rotation_range = 15.0;  ///< degrees, draws from [-r, r]
  double shear_range = 0.1;
  double scale_min = 0.9;
  double scale_max = 1.1;
  /// Augmented copies per slice, one per transform family in the order
  /// rotation, shear, x-scale, y-scale. 4 gives five slices per original.
  int copies_per_slice = 4;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Slices every subject along z and emits each slice followed by its
/// augmented copies. Deterministic given cfg.seed.
std::vector<AugmentedPair> build_augmented_dataset(const std::vector<Subject>& subjects,
                                                   std::span<const Modality> modality_order,
                                                   const AugmentationConfig& cfg);

/// Slices without augmentation.
std::vector<AugmentedPair> slice_dataset(const std::vector<Subject>& subjects, std::span<const Modality> modality_order);

}  // namespace brainseg
