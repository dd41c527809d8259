#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "brainseg/volume.hpp"

namespace brainseg {

/// A metric value, or std::nullopt when it is undefined for the inputs
/// (e.g. Dice of two empty masks). Undefined values never enter averages.
using MetricValue = std::optional<double>;

/// 2|G & P| / (|G| + |P|) over the binary masks of class `c`.
MetricValue dice(const LabelVolume& reference, const LabelVolume& prediction, int c);

/// 95th-percentile symmetric surface distance in millimeters.
///
/// Surface voxels are class voxels with at least one of their 6 face
/// neighbours outside the class (or outside the volume). Each directed value
/// is the 95th percentile, linearly interpolated between order statistics,
/// of the distances from one surface to the nearest voxel of the other
/// surface; the result is the larger directed value. Undefined when either
/// mask is empty.
MetricValue hd95(const LabelVolume& reference, const LabelVolume& prediction, int c, const Spacing& spacing);
MetricValue hd95(const LabelVolume& reference, const LabelVolume& prediction, int c);

/// 1 - |V_G - V_P| / (V_G + V_P). Undefined when both masks are empty.
MetricValue volumetric_similarity(const LabelVolume& reference, const LabelVolume& prediction, int c);

/// |V_G - V_P| / V_G, the relative volume difference. Undefined when V_G = 0.
MetricValue relative_volume_difference(const LabelVolume& reference, const LabelVolume& prediction, int c);

/// Linear-interpolation percentile (q in [0, 100]) of unsorted values.
double percentile(std::vector<double> values, double q);

struct ClassMetrics {
  int code = 0;
  bool in_reference = false;
  MetricValue dice;
  MetricValue hd95;
  MetricValue vs;
};

struct MetricReport {
  std::vector<ClassMetrics> classes;  ///< codes 1..8 in order
  MetricValue mean_dice;
  MetricValue mean_hd95;
  MetricValue mean_vs;
};

/// All three metrics for codes 1..8. Averages run over classes present in the
/// reference, skipping undefined values.
MetricReport evaluate_all(const LabelVolume& reference, const LabelVolume& prediction, const Spacing& spacing);

/// "NA" for undefined values, otherwise %.10g.
std::string format_metric(const MetricValue& v);

/// Columns: subject,class,dice,hd95,vs. Class is the short structure name;
/// a final "Averaged" row carries the means.
void write_report_csv(const std::vector<std::pair<std::string, MetricReport>>& reports,
                      const std::filesystem::path& path);
void write_report_json(const std::vector<std::pair<std::string, MetricReport>>& reports,
                       const std::filesystem::path& path);

}  // namespace brainseg
