#include "brainseg/volume.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

namespace brainseg {

void Spacing::validate() const {
  if (!(dx > 0.0) || !(dy > 0.0) || !(dz > 0.0) || !std::isfinite(dx) || !std::isfinite(dy) ||
      !std::isfinite(dz)) {
    throw ArgumentError("voxel spacing must be strictly positive, got (" + std::to_string(dx) + ", " +
                        std::to_string(dy) + ", " + std::to_string(dz) + ")");
  }
}

std::string to_string(const Shape3& s) {
  return "(" + std::to_string(s.x) + ", " + std::to_string(s.y) + ", " + std::to_string(s.z) + ")";
}

std::string_view label_name(int code) {
  static constexpr std::string_view kNames[] = {"Background", "GM",         "BG",        "WM",
                                                "WMH",        "CSF",        "Ventricles", "Cerebellum",
                                                "BrainStem",  "Infarction", "Other"};
  if (code < 0 || code > label::kMaxCode) return "?";
  return kNames[code];
}

void validate_label_codes(const LabelVolume& labels) {
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto v = labels[i];
    if (v < 0 || v > label::kMaxCode) {
      throw FormatError("label code " + std::to_string(v) + " at voxel " + std::to_string(i) +
                        " is outside the valid range 0..10");
    }
  }
}

LabelVolume remap_pathology_to_background(LabelVolume labels) {
  for (auto& v : labels.data()) {
    if (v == label::kInfarction || v == label::kOther) v = label::kBackground;
  }
  return labels;
}

std::string_view modality_name(Modality m) {
  switch (m) {
    case Modality::T1:
      return "T1";
    case Modality::IR:
      return "IR";
    case Modality::FLAIR:
      return "FLAIR";
  }
  return "?";
}

Modality parse_modality(std::string_view name) {
  std::string upper(name);
  std::transform(upper.begin(), upper.end(), upper.begin(), [](unsigned char c) { return std::toupper(c); });
  if (upper == "T1") return Modality::T1;
  if (upper == "IR" || upper == "T1-IR" || upper == "T1IR") return Modality::IR;
  if (upper == "FLAIR" || upper == "T2-FLAIR") return Modality::FLAIR;
  throw ArgumentError("unknown modality name '" + std::string(name) + "'");
}

std::vector<Modality> parse_modality_list(const std::vector<std::string>& names) {
  std::vector<Modality> out;
  out.reserve(names.size());
  for (const auto& n : names) out.push_back(parse_modality(n));
  return out;
}

MultiModalScan::MultiModalScan(std::string subject_id, std::map<Modality, ScalarVolume> modalities)
    : subject_id_(std::move(subject_id)), modalities_(std::move(modalities)) {
  if (modalities_.empty()) throw ArgumentError("scan '" + subject_id_ + "' has no modalities");
  const auto& ref = modalities_.begin()->second;
  for (const auto& [m, vol] : modalities_) {
    if (!vol.same_grid(ref)) {
      throw ShapeError("modality " + std::string(modality_name(m)) + " of scan '" + subject_id_ +
                       "' has grid " + to_string(vol.shape()) + " but " +
                       std::string(modality_name(modalities_.begin()->first)) + " has " + to_string(ref.shape()));
    }
    for (float v : vol.data()) {
      if (!std::isfinite(v)) {
        throw NumericError("modality " + std::string(modality_name(m)) + " of scan '" + subject_id_ +
                           "' contains non-finite intensities");
      }
    }
  }
}

const ScalarVolume& MultiModalScan::get(Modality m) const {
  auto it = modalities_.find(m);
  if (it == modalities_.end()) {
    throw ArgumentError("scan '" + subject_id_ + "' has no " + std::string(modality_name(m)) + " modality");
  }
  return it->second;
}

void Subject::validate() const {
  if (labels && !labels->same_grid(scan.shape(), scan.spacing())) {
    throw ShapeError("labels of subject '" + id + "' have grid " + to_string(labels->shape()) +
                     " but the scan has " + to_string(scan.shape()));
  }
}

Image2D extract_axial_slice(const MultiModalScan& scan, int z, std::span<const Modality> order) {
  const auto& shape = scan.shape();
  if (z < 0 || z >= shape.z) {
    throw ArgumentError("slice index " + std::to_string(z) + " out of range [0, " + std::to_string(shape.z) + ")");
  }
  if (order.empty()) throw ArgumentError("modality order is empty");
  Image2D img(static_cast<int>(order.size()), shape.y, shape.x);
  const std::size_t plane = shape.plane();
  for (std::size_t c = 0; c < order.size(); ++c) {
    auto src = scan.get(order[c]).plane(z);
    std::copy(src.begin(), src.end(), img.data.begin() + static_cast<std::ptrdiff_t>(c * plane));
  }
  return img;
}

LabelPlane extract_label_plane(const LabelVolume& labels, int z) {
  const auto& shape = labels.shape();
  if (z < 0 || z >= shape.z) {
    throw ArgumentError("slice index " + std::to_string(z) + " out of range [0, " + std::to_string(shape.z) + ")");
  }
  LabelPlane out(shape.y, shape.x);
  auto src = labels.plane(z);
  std::copy(src.begin(), src.end(), out.data.begin());
  return out;
}

}  // namespace brainseg
