#include "brainseg/phantom.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <random>

#include "brainseg/nifti.hpp"

namespace brainseg {

double ModalityIntensity::of(Modality m) const {
  switch (m) {
    case Modality::T1:
      return t1;
    case Modality::IR:
      return ir;
    case Modality::FLAIR:
      return flair;
  }
  return 0.0;
}

std::array<ModalityIntensity, label::kNumStructures> default_intensity_table() {
  // {T1, IR, FLAIR} for GM, BG, WM, WMH, CSF, ventricles, cerebellum, brain stem.
  return {{
      {0.55, 0.50, 0.60},
      {0.65, 0.60, 0.55},
      {0.80, 0.80, 0.45},
      {0.60, 0.55, 0.95},
      {0.20, 0.10, 0.15},
      {0.15, 0.05, 0.10},
      {0.70, 0.65, 0.50},
      {0.75, 0.70, 0.40},
  }};
}

void PhantomConfig::validate() const {
  if (shape.x < 24 || shape.y < 24 || shape.z < 6) {
    throw ConfigError("phantom shape " + to_string(shape) + " is too small to place all structures (need >= 24x24x6)");
  }
  spacing.validate();
  if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be >= 0");
  if (infarct_blobs < 0) throw ConfigError("infarct_blobs must be >= 0");
  const auto& gm = intensities[label::kGrayMatter - 1];
  const auto& wm = intensities[label::kWhiteMatter - 1];
  const auto& wmh = intensities[label::kWhiteMatterLesion - 1];
  const auto& csf = intensities[label::kCsf - 1];
  if (!(wmh.flair > wm.flair)) throw ConfigError("intensity table must have FLAIR(WMH) > FLAIR(WM)");
  if (!(wm.t1 > gm.t1 && gm.t1 > csf.t1)) throw ConfigError("intensity table must have T1(WM) > T1(GM) > T1(CSF)");
}

namespace {

struct Ellipsoid {
  double cx, cy, cz;  // voxel coordinates
  double rx, ry, rz;  // voxel radii

  double radius(int x, int y, int z) const {
    const double u = (x - cx) / rx;
    const double v = (y - cy) / ry;
    const double w = (z - cz) / rz;
    return std::sqrt(u * u + v * v + w * w);
  }
};

/// Carves spheres of physical radius [r_lo, r_hi] mm centred on random
/// candidate voxels, converting only voxels currently labelled `host`.
void carve_blobs(LabelVolume& labels, std::mt19937_64& rng, int count, std::int16_t code, std::int16_t host,
                 const std::vector<std::size_t>& candidates, double r_lo, double r_hi) {
  if (candidates.empty()) return;
  const auto& s = labels.shape();
  const auto& sp = labels.spacing();
  std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
  std::uniform_real_distribution<double> radius(r_lo, r_hi);
  for (int b = 0; b < count; ++b) {
    const std::size_t c = candidates[pick(rng)];
    const int cx = static_cast<int>(c % s.x);
    const int cy = static_cast<int>((c / s.x) % s.y);
    const int cz = static_cast<int>(c / s.plane());
    const double r = radius(rng);
    const int ex = static_cast<int>(std::ceil(r / sp.dx));
    const int ey = static_cast<int>(std::ceil(r / sp.dy));
    const int ez = static_cast<int>(std::ceil(r / sp.dz));
    for (int z = std::max(0, cz - ez); z <= std::min(s.z - 1, cz + ez); ++z) {
      for (int y = std::max(0, cy - ey); y <= std::min(s.y - 1, cy + ey); ++y) {
        for (int x = std::max(0, cx - ex); x <= std::min(s.x - 1, cx + ex); ++x) {
          const double dx = (x - cx) * sp.dx;
          const double dy = (y - cy) * sp.dy;
          const double dz = (z - cz) * sp.dz;
          if (dx * dx + dy * dy + dz * dz <= r * r && labels.at(x, y, z) == host) labels.at(x, y, z) = code;
        }
      }
    }
  }
}

}  // namespace

Subject generate_subject(const PhantomConfig& cfg, int subject_index) {
  cfg.validate();
  std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed & 0xFFFFFFFFu), static_cast<std::uint32_t>(cfg.seed >> 32),
                    static_cast<std::uint32_t>(subject_index)};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> jitter(0.9, 1.1);

  const auto& s = cfg.shape;
  const double rx = 0.46 * s.x * jitter(rng);
  const double ry = 0.46 * s.y * jitter(rng);
  const double rz = 0.48 * s.z * jitter(rng);
  const Ellipsoid head{(s.x - 1) / 2.0, (s.y - 1) / 2.0, (s.z - 1) / 2.0, rx, ry, rz};
  const double gm_inner = 0.70;
  const double csf_inner = 0.86;

  const std::array<Ellipsoid, 2> ganglia = {
      Ellipsoid{head.cx - 0.24 * rx, head.cy + 0.05 * ry, head.cz, 0.12 * rx, 0.18 * ry, 0.30 * rz},
      Ellipsoid{head.cx + 0.24 * rx, head.cy + 0.05 * ry, head.cz, 0.12 * rx, 0.18 * ry, 0.30 * rz}};
  const std::array<Ellipsoid, 2> ventricles = {
      Ellipsoid{head.cx - 0.09 * rx, head.cy - 0.05 * ry, head.cz + 0.05 * rz, 0.07 * rx, 0.26 * ry, 0.30 * rz},
      Ellipsoid{head.cx + 0.09 * rx, head.cy - 0.05 * ry, head.cz + 0.05 * rz, 0.07 * rx, 0.26 * ry, 0.30 * rz}};
  const double low_z = s.z / 3.0;
  const Ellipsoid cerebellum{head.cx, head.cy + 0.50 * ry, 0.18 * s.z, 0.42 * rx, 0.24 * ry, 0.18 * s.z};
  const Ellipsoid brain_stem{head.cx, head.cy + 0.12 * ry, 0.20 * s.z, 0.12 * rx, 0.12 * ry, 0.22 * s.z};

  LabelVolume labels(s, cfg.spacing, label::kBackground);
  std::vector<std::size_t> deep_wm;
  for (int z = 0; z < s.z; ++z) {
    for (int y = 0; y < s.y; ++y) {
      for (int x = 0; x < s.x; ++x) {
        const double r = head.radius(x, y, z);
        if (r >= 1.0) continue;
        std::int16_t code = r >= csf_inner ? label::kCsf : (r >= gm_inner ? label::kGrayMatter : label::kWhiteMatter);
        if (code == label::kWhiteMatter) {
          for (const auto& e : ganglia) {
            if (e.radius(x, y, z) < 1.0) code = label::kBasalGanglia;
          }
          for (const auto& e : ventricles) {
            if (e.radius(x, y, z) < 1.0) code = label::kVentricles;
          }
        }
        if (r < csf_inner && z < low_z) {
          if (cerebellum.radius(x, y, z) < 1.0) code = label::kCerebellum;
          if (brain_stem.radius(x, y, z) < 1.0) code = label::kBrainStem;
        }
        labels.at(x, y, z) = code;
        if (code == label::kWhiteMatter && r < 0.55 && z >= low_z) deep_wm.push_back(labels.index(x, y, z));
      }
    }
  }

  std::uniform_int_distribution<int> blob_count(1, 3);
  carve_blobs(labels, rng, blob_count(rng), label::kWhiteMatterLesion, label::kWhiteMatter, deep_wm, 3.5, 5.0);
  carve_blobs(labels, rng, cfg.infarct_blobs, label::kInfarction, label::kWhiteMatter, deep_wm, 4.0, 6.0);

  std::array<std::size_t, label::kMaxCode + 1> counts{};
  for (auto v : labels.data()) ++counts[v];
  for (int c = 1; c <= label::kNumStructures; ++c) {
    if (counts[c] == 0) {
      throw ConfigError("phantom shape " + to_string(s) + " is too small to place structure " +
                        std::string(label_name(c)));
    }
  }

  std::map<Modality, ScalarVolume> modalities;
  std::normal_distribution<double> noise(0.0, 1.0);
  for (Modality m : {Modality::T1, Modality::IR, Modality::FLAIR}) {
    ScalarVolume vol(s, cfg.spacing, 0.0f);
    for (std::size_t i = 0; i < vol.size(); ++i) {
      const int code = labels[i];
      double mean = 0.0;
      if (code >= 1 && code <= label::kNumStructures) {
        mean = cfg.intensities[code - 1].of(m);
      } else if (code == label::kInfarction) {
        mean = 0.5 * cfg.intensities[label::kCsf - 1].of(m) + 0.5 * cfg.intensities[label::kWhiteMatter - 1].of(m);
      }
      vol[i] = static_cast<float>(cfg.noise_sigma > 0.0 ? mean + cfg.noise_sigma * noise(rng) : mean);
    }
    modalities.emplace(m, std::move(vol));
  }

  const std::string id = std::to_string(subject_index + 1);
  Subject subject{id, MultiModalScan(id, std::move(modalities)), std::move(labels)};
  return subject;
}

std::vector<Subject> generate_cohort(const PhantomConfig& cfg, int n) {
  if (n < 2) throw ArgumentError("a cohort needs at least 2 subjects");
  std::vector<Subject> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) out.push_back(generate_subject(cfg, i));
  return out;
}

namespace {

constexpr std::pair<Modality, const char*> kLayout[] = {
    {Modality::FLAIR, "FLAIR"}, {Modality::T1, "reg_T1"}, {Modality::IR, "reg_IR"}};

std::filesystem::path find_image(const std::filesystem::path& stem) {
  for (const char* ext : {".nii.gz", ".nii"}) {
    auto p = stem;
    p += ext;
    if (std::filesystem::exists(p)) return p;
  }
  return {};
}

}  // namespace

void write_subject_dir(const Subject& subject, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "pre", ec);
  if (ec) throw IoError("cannot create " + (dir / "pre").string() + ": " + ec.message());
  for (const auto& [m, name] : kLayout) {
    if (subject.scan.has(m)) save_nifti(subject.scan.get(m), dir / "pre" / (std::string(name) + ".nii.gz"));
  }
  if (subject.labels) save_nifti(*subject.labels, dir / "segm.nii.gz");
}

Subject read_subject_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("not a subject directory: " + dir.string());
  const std::string id = dir.filename().string();
  std::map<Modality, ScalarVolume> modalities;
  for (const auto& [m, name] : kLayout) {
    const auto p = find_image(dir / "pre" / name);
    if (!p.empty()) modalities.emplace(m, load_nifti(p));
  }
  if (modalities.empty()) throw IoError(dir.string() + " contains no pre/FLAIR, pre/reg_T1 or pre/reg_IR image");
  Subject s{id, MultiModalScan(id, std::move(modalities)), std::nullopt};
  const auto seg = find_image(dir / "segm");
  if (!seg.empty()) s.labels = load_nifti_labels(seg);
  s.validate();
  return s;
}

std::vector<std::filesystem::path> list_subject_dirs(const std::filesystem::path& root) {
  if (!std::filesystem::is_directory(root)) throw IoError("data directory does not exist: " + root.string());
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(root)) {
    if (e.is_directory() && std::filesystem::is_directory(e.path() / "pre")) out.push_back(e.path());
  }
  // Numeric names sort numerically so "10" follows "9".
  auto numeric = [](const std::string& s) {
    return !s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); });
  };
  std::sort(out.begin(), out.end(), [&](const auto& a, const auto& b) {
    const auto na = a.filename().string();
    const auto nb = b.filename().string();
    if (numeric(na) && numeric(nb) && na.size() != nb.size()) return na.size() < nb.size();
    return na < nb;
  });
  return out;
}

}  // namespace brainseg
