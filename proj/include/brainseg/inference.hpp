#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "brainseg/drunet.hpp"
#include "brainseg/volume.hpp"

namespace brainseg {

/// Per-voxel class distribution. Channel k of voxel i lives at
/// data[k * voxels + i], voxels ordered as in Volume.
class ProbabilityVolume {
 public:
  ProbabilityVolume() = default;
  ProbabilityVolume(Shape3 shape, Spacing spacing, int classes);

  const Shape3& shape() const { return shape_; }
  const Spacing& spacing() const { return spacing_; }
  int classes() const { return classes_; }
  std::size_t voxels() const { return shape_.voxels(); }

  double& at(int k, std::size_t voxel) { return data_[static_cast<std::size_t>(k) * voxels() + voxel]; }
  double at(int k, std::size_t voxel) const { return data_[static_cast<std::size_t>(k) * voxels() + voxel]; }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  /// Channel k as a float32 intensity volume.
  ScalarVolume channel(int k) const;

  /// Throws NumericError unless every voxel sums to 1 within `tol` with values in [0, 1].
  void validate(double tol = 1e-5) const;

  friend bool operator==(const ProbabilityVolume&, const ProbabilityVolume&) = default;

 private:
  Shape3 shape_;
  Spacing spacing_;
  int classes_ = 0;
  std::vector<double> data_;
};

/// Runs the network slice by slice along z in eval mode. Slices whose height
/// or width is not a multiple of 4 are reflect-padded at the bottom/right and
/// the padding is cropped from the output.
ProbabilityVolume predict_probabilities(const Network& net, const MultiModalScan& scan,
                                        std::span<const Modality> modality_order, int slices_per_batch = 8);

/// Voxel-wise mean per channel. The per-voxel reduction runs over the member
/// values in ascending order so the result does not depend on argument order,
/// and n identical inputs reproduce the input exactly.
ProbabilityVolume ensemble_average(const std::vector<ProbabilityVolume>& volumes);

/// Lowest class index among the per-voxel maxima.
LabelVolume argmax_labels(const ProbabilityVolume& probs);

struct Ensemble {
  std::vector<Network> members;
  std::vector<Modality> modality_order;
};

/// Averaged member probabilities for one scan.
ProbabilityVolume ensemble_probabilities(const Ensemble& ensemble, const MultiModalScan& scan);

/// Single-stage pipeline: argmax of the averaged ensemble output with codes
/// 9 and 10 folded into background.
LabelVolume run_submission1(const Ensemble& ensemble, const MultiModalScan& scan);

/// Produces a binary (0/1) WMH mask on the scan grid. The second argument is
/// the coarse stage's averaged probabilities, for segmenters that reuse it.
using WmhSegmenter = std::function<LabelVolume(const MultiModalScan&, const ProbabilityVolume& coarse)>;

/// Default segmenter: voxels whose coarse argmax is WMH.
WmhSegmenter coarse_wmh_segmenter();

/// Sets `target` on voxels flagged in mask `source`, optionally only where the
/// coarse label is one of `only_over`.
struct FusionRule {
  std::string source;
  std::int16_t target = 0;
  std::vector<std::int16_t> only_over;  ///< empty: any coarse label
};

struct FusionPolicy {
  std::vector<FusionRule> rules;

  /// (1) "csf" -> CSF where coarse is background or CSF; (2) "wmh" -> WMH.
  static FusionPolicy default_policy();
  void validate(const std::map<std::string, LabelVolume>& sources) const;
};

/// Applies the rules in order over the coarse labels. Voxels matched by no
/// rule keep their coarse label.
LabelVolume fuse_labels(const LabelVolume& coarse, const std::map<std::string, LabelVolume>& sources,
                        const FusionPolicy& policy);

/// Multi-stage pipeline: coarse labels from `coarse`, a "csf" mask where the
/// CSF ensemble's CSF probability exceeds `csf_threshold`, and a "wmh" mask
/// from `wmh`, fused under `policy`. The CSF probability is channel 1 for a
/// two-class CSF model and channel 5 otherwise.
LabelVolume run_submission2(const Ensemble& coarse, const Ensemble& csf, const WmhSegmenter& wmh,
                            const MultiModalScan& scan, const FusionPolicy& policy, double csf_threshold = 0.5);

}  // namespace brainseg
