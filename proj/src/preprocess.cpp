#include "brainseg/preprocess.hpp"

#include <cmath>
#include <numbers>
#include <random>

namespace brainseg {

NormalizedScan normalize_patient(const MultiModalScan& scan) {
  std::map<Modality, ScalarVolume> out;
  std::vector<Modality> degenerate;
  for (const auto& [m, vol] : scan.modalities()) {
    const auto values = vol.data();
    const double n = static_cast<double>(values.size());
    double mean = 0.0;
    for (float v : values) mean += v;
    mean /= n;
    double ss = 0.0;
    for (float v : values) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / n);

    ScalarVolume norm(vol.shape(), vol.spacing(), 0.0f);
    if (sd < 1e-12) {
      degenerate.push_back(m);
    } else {
      auto dst = norm.data();
      for (std::size_t i = 0; i < values.size(); ++i) dst[i] = static_cast<float>((values[i] - mean) / sd);
    }
    out.emplace(m, std::move(norm));
  }
  return {MultiModalScan(scan.subject_id(), std::move(out)), std::move(degenerate)};
}

namespace {

struct Affine2 {
  double a, b, c, d;  // [[a, b], [c, d]]

  Affine2 operator*(const Affine2& o) const {
    return {a * o.a + b * o.c, a * o.b + b * o.d, c * o.a + d * o.c, c * o.b + d * o.d};
  }
  Affine2 inverse() const {
    const double det = a * d - b * c;
    return {d / det, -b / det, -c / det, a / det};
  }
};

Affine2 forward_map(const AffineParams& p) {
  const double theta = p.rotation_deg * std::numbers::pi / 180.0;
  const Affine2 rot{std::cos(theta), -std::sin(theta), std::sin(theta), std::cos(theta)};
  const Affine2 shear{1.0, p.shear, 0.0, 1.0};
  const Affine2 scale{p.scale_x, 0.0, 0.0, p.scale_y};
  return rot * shear * scale;
}

float bilinear(const Image2D& img, int c, double x, double y) {
  const double x0f = std::floor(x);
  const double y0f = std::floor(y);
  const int x0 = static_cast<int>(x0f);
  const int y0 = static_cast<int>(y0f);
  const double fx = x - x0f;
  const double fy = y - y0f;
  auto sample = [&](int col, int row) -> double {
    if (col < 0 || row < 0 || col >= img.width || row >= img.height) return 0.0;
    return img.at(c, row, col);
  };
  double v = sample(x0, y0) * (1.0 - fx) * (1.0 - fy);
  if (fx != 0.0) v += sample(x0 + 1, y0) * fx * (1.0 - fy);
  if (fy != 0.0) v += sample(x0, y0 + 1) * (1.0 - fx) * fy;
  if (fx != 0.0 && fy != 0.0) v += sample(x0 + 1, y0 + 1) * fx * fy;
  return static_cast<float>(v);
}

}  // namespace

AugmentedPair affine_augment(const Image2D& image, const LabelPlane& labels, const AffineParams& params) {
  if (image.height != labels.height || image.width != labels.width) {
    throw ShapeError("image is " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                     " but labels are " + std::to_string(labels.height) + "x" + std::to_string(labels.width));
  }
  if (!(params.scale_x > 0.0) || !(params.scale_y > 0.0)) {
    throw ArgumentError("affine scale factors must be positive");
  }
  const Affine2 inv = forward_map(params).inverse();
  const double cx = (image.width - 1) / 2.0;
  const double cy = (image.height - 1) / 2.0;

  AugmentedPair out{Image2D(image.channels, image.height, image.width), LabelPlane(labels.height, labels.width)};
  for (int row = 0; row < image.height; ++row) {
    for (int col = 0; col < image.width; ++col) {
      const double u = col - cx;
      const double v = row - cy;
      const double sx = inv.a * u + inv.b * v + cx;
      const double sy = inv.c * u + inv.d * v + cy;
      for (int c = 0; c < image.channels; ++c) out.image.at(c, row, col) = bilinear(image, c, sx, sy);
      const long nc = std::lround(sx);
      const long nr = std::lround(sy);
      if (nc >= 0 && nr >= 0 && nc < labels.width && nr < labels.height) {
        out.labels.at(row, col) = labels.at(static_cast<int>(nr), static_cast<int>(nc));
      }
    }
  }
  return out;
}

void AugmentationConfig::validate() const {
  if (!(rotation_range >= 0.0) || !(shear_range >= 0.0)) throw ConfigError("augmentation ranges must be non-negative");
  if (!(scale_min > 0.0) || !(scale_min <= 1.0) || !(scale_max >= 1.0)) {
    throw ConfigError("augmentation scale interval must be positive and contain 1");
  }
  if (copies_per_slice < 0 || copies_per_slice > 4) throw ConfigError("copies_per_slice must be in 0..4");
}

std::vector<AugmentedPair> slice_dataset(const std::vector<Subject>& subjects, std::span<const Modality> modality_order) {
  std::vector<AugmentedPair> out;
  for (const auto& s : subjects) {
    if (!s.labels) throw ArgumentError("subject '" + s.id + "' has no labels");
    s.validate();
    for (int z = 0; z < s.scan.shape().z; ++z) {
      out.push_back({extract_axial_slice(s.scan, z, modality_order), extract_label_plane(*s.labels, z)});
    }
  }
  return out;
}

std::vector<AugmentedPair> build_augmented_dataset(const std::vector<Subject>& subjects,
                                                   std::span<const Modality> modality_order,
                                                   const AugmentationConfig& cfg) {
  cfg.validate();
  for (const auto& s : subjects) {
    if (!s.labels) throw ArgumentError("subject '" + s.id + "' has no labels");
  }
  std::mt19937_64 rng(cfg.seed);
  auto draw = [&rng](double lo, double hi) {
    if (lo == hi) return lo;
    return std::uniform_real_distribution<double>(lo, hi)(rng);
  };

  std::vector<AugmentedPair> out;
  for (auto& base : slice_dataset(subjects, modality_order)) {
    std::vector<AffineParams> copies;
    for (int family = 0; family < cfg.copies_per_slice; ++family) {
      AffineParams p;
      switch (family) {
        case 0:
          p.rotation_deg = draw(-cfg.rotation_range, cfg.rotation_range);
          break;
        case 1:
          p.shear = draw(-cfg.shear_range, cfg.shear_range);
          break;
        case 2:
          p.scale_x = draw(cfg.scale_min, cfg.scale_max);
          break;
        case 3:
          p.scale_y = draw(cfg.scale_min, cfg.scale_max);
          break;
      }
      copies.push_back(p);
    }
    std::vector<AugmentedPair> augmented;
    for (const auto& p : copies) augmented.push_back(affine_augment(base.image, base.labels, p));
    out.push_back(std::move(base));
    for (auto& a : augmented) out.push_back(std::move(a));
  }
  return out;
}

}  // namespace brainseg
