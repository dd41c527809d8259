#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "brainseg/volume.hpp"

namespace brainseg {

/// Mean intensity of one structure in each sequence, indexed like Modality.
struct ModalityIntensity {
  double t1 = 0.0;
  double ir = 0.0;
  double flair = 0.0;

  double of(Modality m) const;
};

/// Default contrast table for codes 1..8 (index 0 holds GM).
std::array<ModalityIntensity, label::kNumStructures> default_intensity_table();

struct PhantomConfig {
  Shape3 shape = {64, 64, 24};
  Spacing spacing = {0.96, 0.96, 3.00};
  double noise_sigma = 0.05;
  std::array<ModalityIntensity, label::kNumStructures> intensities = default_intensity_table();
  /// Number of spherical infarction blobs (code 9) carved into white matter.
  int infarct_blobs = 0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Nested ellipsoids (CSF shell, GM ribbon, WM core) with basal ganglia and
/// ventricles inside the WM, 1-3 WMH spheres in the remaining WM, and the
/// cerebellum and brain stem in the lowest third of slices. Each subject gets
/// radius jitter of up to 10% from its derived seed. Deterministic in
/// (cfg.seed, subject_index).
Subject generate_subject(const PhantomConfig& cfg, int subject_index);

std::vector<Subject> generate_cohort(const PhantomConfig& cfg, int n = 7);

/// Challenge directory layout below `dir`:
///   pre/FLAIR.nii.gz, pre/reg_T1.nii.gz, pre/reg_IR.nii.gz, segm.nii.gz
void write_subject_dir(const Subject& subject, const std::filesystem::path& dir);

/// Reads the layout written by write_subject_dir. Missing sequences are
/// skipped; segm.nii.gz is optional. The subject id is the directory name.
Subject read_subject_dir(const std::filesystem::path& dir);

/// Subject directories directly below `root`, sorted by name.
std::vector<std::filesystem::path> list_subject_dirs(const std::filesystem::path& root);

}  // namespace brainseg
