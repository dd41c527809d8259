#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "brainseg/error.hpp"

namespace brainseg {

/// Physical voxel size in millimeters. Defaults to the acquisition grid of the
/// registered challenge sequences.
struct Spacing {
  double dx = 0.96;
  double dy = 0.96;
  double dz = 3.00;

  void validate() const;
  friend bool operator==(const Spacing&, const Spacing&) = default;
};

struct Shape3 {
  int x = 0;
  int y = 0;
  int z = 0;

  std::size_t voxels() const {
    return static_cast<std::size_t>(x) * static_cast<std::size_t>(y) * static_cast<std::size_t>(z);
  }
  std::size_t plane() const { return static_cast<std::size_t>(x) * static_cast<std::size_t>(y); }
  friend bool operator==(const Shape3&, const Shape3&) = default;
};

std::string to_string(const Shape3& s);

/// Dense voxel grid. Storage is x-fastest, then y, then z, so every axial
/// plane (fixed z) is one contiguous Y-by-X block. This is also the on-disk
/// NIfTI order.
template <typename T>
class Volume {
 public:
  using value_type = T;

  Volume() = default;
  Volume(Shape3 shape, Spacing spacing, T fill = T{})
      : shape_(shape), spacing_(spacing), data_(checked_size(shape), fill) {
    spacing_.validate();
  }
  Volume(Shape3 shape, Spacing spacing, std::vector<T> data)
      : shape_(shape), spacing_(spacing), data_(std::move(data)) {
    spacing_.validate();
    if (data_.size() != checked_size(shape)) {
      throw ShapeError("volume data length " + std::to_string(data_.size()) +
                       " does not match shape " + to_string(shape));
    }
  }

  const Shape3& shape() const { return shape_; }
  const Spacing& spacing() const { return spacing_; }
  std::size_t size() const { return data_.size(); }

  std::size_t index(int x, int y, int z) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(shape_.x) *
               (static_cast<std::size_t>(y) + static_cast<std::size_t>(shape_.y) * static_cast<std::size_t>(z));
  }
  T& at(int x, int y, int z) { return data_[index(x, y, z)]; }
  const T& at(int x, int y, int z) const { return data_[index(x, y, z)]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  const std::vector<T>& values() const { return data_; }

  /// Contiguous axial plane z (Y rows of X values).
  std::span<const T> plane(int z) const {
    return std::span<const T>(data_).subspan(static_cast<std::size_t>(z) * shape_.plane(), shape_.plane());
  }
  std::span<T> plane(int z) {
    return std::span<T>(data_).subspan(static_cast<std::size_t>(z) * shape_.plane(), shape_.plane());
  }

  bool same_grid(const Shape3& s, const Spacing& sp) const { return shape_ == s && spacing_ == sp; }
  template <typename U>
  bool same_grid(const Volume<U>& other) const {
    return same_grid(other.shape(), other.spacing());
  }

  friend bool operator==(const Volume&, const Volume&) = default;

 private:
  static std::size_t checked_size(const Shape3& s) {
    if (s.x <= 0 || s.y <= 0 || s.z <= 0) throw ShapeError("volume shape must be positive, got " + to_string(s));
    return s.voxels();
  }

  Shape3 shape_;
  Spacing spacing_;
  std::vector<T> data_;
};

using ScalarVolume = Volume<float>;
using LabelVolume = Volume<std::int16_t>;

/// Label codes. 1-8 are the eight scored brain structures; 9 and 10 are the
/// pathology labels that are folded into background for training and output.
namespace label {
inline constexpr std::int16_t kBackground = 0;
inline constexpr std::int16_t kGrayMatter = 1;
inline constexpr std::int16_t kBasalGanglia = 2;
inline constexpr std::int16_t kWhiteMatter = 3;
inline constexpr std::int16_t kWhiteMatterLesion = 4;
inline constexpr std::int16_t kCsf = 5;
inline constexpr std::int16_t kVentricles = 6;
inline constexpr std::int16_t kCerebellum = 7;
inline constexpr std::int16_t kBrainStem = 8;
inline constexpr std::int16_t kInfarction = 9;
inline constexpr std::int16_t kOther = 10;
inline constexpr std::int16_t kMaxCode = 10;
inline constexpr int kNumStructures = 8;
}  // namespace label

/// Short name used in reports ("GM", "BG", ...). Codes outside 0..10 give "?".
std::string_view label_name(int code);

/// Throws FormatError if any code lies outside 0..10.
void validate_label_codes(const LabelVolume& labels);

/// Replace codes 9 and 10 with background.
LabelVolume remap_pathology_to_background(LabelVolume labels);

enum class Modality { T1, IR, FLAIR };

std::string_view modality_name(Modality m);
/// Accepts "T1", "IR", "T1-IR", "FLAIR" (case-insensitive); ArgumentError otherwise.
Modality parse_modality(std::string_view name);
std::vector<Modality> parse_modality_list(const std::vector<std::string>& names);

/// Co-registered sequences of one subject. All members share shape and spacing.
class MultiModalScan {
 public:
  MultiModalScan() = default;
  MultiModalScan(std::string subject_id, std::map<Modality, ScalarVolume> modalities);

  const std::string& subject_id() const { return subject_id_; }
  const std::map<Modality, ScalarVolume>& modalities() const { return modalities_; }
  bool has(Modality m) const { return modalities_.count(m) != 0; }
  /// ArgumentError if absent.
  const ScalarVolume& get(Modality m) const;
  const Shape3& shape() const { return modalities_.begin()->second.shape(); }
  const Spacing& spacing() const { return modalities_.begin()->second.spacing(); }

 private:
  std::string subject_id_;
  std::map<Modality, ScalarVolume> modalities_;
};

struct Subject {
  std::string id;
  MultiModalScan scan;
  std::optional<LabelVolume> labels;

  /// Checks that labels (when present) sit on the scan grid.
  void validate() const;
};

/// Channel-first 2D image: data[(c * height + row) * width + col].
struct Image2D {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> data;

  Image2D() = default;
  Image2D(int c, int h, int w, float fill = 0.0f)
      : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {}

  float& at(int c, int row, int col) { return data[(static_cast<std::size_t>(c) * height + row) * width + col]; }
  float at(int c, int row, int col) const { return data[(static_cast<std::size_t>(c) * height + row) * width + col]; }
  friend bool operator==(const Image2D&, const Image2D&) = default;
};

struct LabelPlane {
  int height = 0;
  int width = 0;
  std::vector<std::int16_t> data;

  LabelPlane() = default;
  LabelPlane(int h, int w, std::int16_t fill = 0)
      : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill) {}

  std::int16_t& at(int row, int col) { return data[static_cast<std::size_t>(row) * width + col]; }
  std::int16_t at(int row, int col) const { return data[static_cast<std::size_t>(row) * width + col]; }
  friend bool operator==(const LabelPlane&, const LabelPlane&) = default;
};

/// Axial plane z, rows = y, columns = x, channels stacked in `order`.
Image2D extract_axial_slice(const MultiModalScan& scan, int z, std::span<const Modality> order);
LabelPlane extract_label_plane(const LabelVolume& labels, int z);

}  // namespace brainseg
