#include "brainseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "json.hpp"

namespace brainseg {
namespace {

void check_grid(const LabelVolume& a, const LabelVolume& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("reference grid " + to_string(a.shape()) + " differs from prediction grid " + to_string(b.shape()));
  }
}

struct Counts {
  std::size_t ref = 0;
  std::size_t pred = 0;
  std::size_t both = 0;
};

Counts count(const LabelVolume& ref, const LabelVolume& pred, int c) {
  check_grid(ref, pred);
  Counts n;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const bool g = ref[i] == c;
    const bool p = pred[i] == c;
    n.ref += g;
    n.pred += p;
    n.both += g && p;
  }
  return n;
}

std::vector<unsigned char> surface(const LabelVolume& v, int c) {
  const auto& s = v.shape();
  std::vector<unsigned char> out(v.size(), 0);
  for (int z = 0; z < s.z; ++z) {
    for (int y = 0; y < s.y; ++y) {
      for (int x = 0; x < s.x; ++x) {
        if (v.at(x, y, z) != c) continue;
        const bool edge = x == 0 || y == 0 || z == 0 || x == s.x - 1 || y == s.y - 1 || z == s.z - 1;
        if (edge || v.at(x - 1, y, z) != c || v.at(x + 1, y, z) != c || v.at(x, y - 1, z) != c ||
            v.at(x, y + 1, z) != c || v.at(x, y, z - 1) != c || v.at(x, y, z + 1) != c) {
          out[v.index(x, y, z)] = 1;
        }
      }
    }
  }
  return out;
}

constexpr double kInf = std::numeric_limits<double>::infinity();

/// Lower envelope of parabolas along one line: out[p] = min_q f[q] + w (p - q)^2.
void edt_line(const double* f, double* out, int n, double w, std::vector<int>& v, std::vector<double>& z) {
  v.resize(n);
  z.resize(n + 1);
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] == kInf) continue;
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
      continue;
    }
    double s;
    for (;;) {
      const int r = v[k];
      s = ((f[q] + w * q * q) - (f[r] + w * r * r)) / (2.0 * w * (q - r));
      if (s <= z[k] && k > 0) {
        --k;
        continue;
      }
      break;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kInf;
  }
  if (k < 0) {
    std::fill(out, out + n, kInf);
    return;
  }
  int j = 0;
  for (int p = 0; p < n; ++p) {
    while (z[j + 1] < p) ++j;
    const double d = p - v[j];
    out[p] = f[v[j]] + w * d * d;
  }
}

/// Exact squared Euclidean distance (mm^2) from every voxel to the nearest
/// feature voxel, separable over x, y, z.
std::vector<double> squared_distance_map(const std::vector<unsigned char>& feature, const Shape3& s, const Spacing& sp) {
  std::vector<double> d(feature.size());
  for (std::size_t i = 0; i < feature.size(); ++i) d[i] = feature[i] ? 0.0 : kInf;
  const int longest = std::max({s.x, s.y, s.z});
  std::vector<double> in(longest), out(longest), zbuf;
  std::vector<int> vbuf;
  auto pass = [&](int n, std::size_t stride, double w, auto base_of, std::size_t lines) {
    for (std::size_t l = 0; l < lines; ++l) {
      const std::size_t base = base_of(l);
      for (int i = 0; i < n; ++i) in[i] = d[base + i * stride];
      edt_line(in.data(), out.data(), n, w, vbuf, zbuf);
      for (int i = 0; i < n; ++i) d[base + i * stride] = out[i];
    }
  };
  const std::size_t sx = static_cast<std::size_t>(s.x);
  const std::size_t sxy = s.plane();
  pass(s.x, 1, sp.dx * sp.dx, [&](std::size_t l) { return l * sx; }, static_cast<std::size_t>(s.y) * s.z);
  pass(s.y, sx, sp.dy * sp.dy, [&](std::size_t l) { return (l / sx) * sxy + (l % sx); },
       sx * static_cast<std::size_t>(s.z));
  pass(s.z, sxy, sp.dz * sp.dz, [&](std::size_t l) { return l; }, sxy);
  return d;
}

double directed_hd95(const std::vector<unsigned char>& from, const std::vector<double>& to_sq) {
  std::vector<double> dist;
  for (std::size_t i = 0; i < from.size(); ++i) {
    if (from[i]) dist.push_back(std::sqrt(to_sq[i]));
  }
  return percentile(std::move(dist), 95.0);
}

}  // namespace

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw ArgumentError("percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = static_cast<std::size_t>(std::ceil(pos));
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + (values[hi] - values[lo]) * frac;
}

MetricValue dice(const LabelVolume& reference, const LabelVolume& prediction, int c) {
  const Counts n = count(reference, prediction, c);
  if (n.ref + n.pred == 0) return std::nullopt;
  return static_cast<double>(2 * n.both) / static_cast<double>(n.ref + n.pred);
}

MetricValue volumetric_similarity(const LabelVolume& reference, const LabelVolume& prediction, int c) {
  const Counts n = count(reference, prediction, c);
  const std::size_t sum = n.ref + n.pred;
  if (sum == 0) return std::nullopt;
  const std::size_t diff = n.ref > n.pred ? n.ref - n.pred : n.pred - n.ref;
  return static_cast<double>(sum - diff) / static_cast<double>(sum);
}

MetricValue relative_volume_difference(const LabelVolume& reference, const LabelVolume& prediction, int c) {
  const Counts n = count(reference, prediction, c);
  if (n.ref == 0) return std::nullopt;
  const std::size_t diff = n.ref > n.pred ? n.ref - n.pred : n.pred - n.ref;
  return static_cast<double>(diff) / static_cast<double>(n.ref);
}

MetricValue hd95(const LabelVolume& reference, const LabelVolume& prediction, int c, const Spacing& spacing) {
  check_grid(reference, prediction);
  spacing.validate();
  const auto g = surface(reference, c);
  const auto p = surface(prediction, c);
  if (std::find(g.begin(), g.end(), 1) == g.end() || std::find(p.begin(), p.end(), 1) == p.end()) return std::nullopt;
  const auto& s = reference.shape();
  const double gp = directed_hd95(g, squared_distance_map(p, s, spacing));
  const double pg = directed_hd95(p, squared_distance_map(g, s, spacing));
  return std::max(gp, pg);
}

MetricValue hd95(const LabelVolume& reference, const LabelVolume& prediction, int c) {
  return hd95(reference, prediction, c, reference.spacing());
}

MetricReport evaluate_all(const LabelVolume& reference, const LabelVolume& prediction, const Spacing& spacing) {
  check_grid(reference, prediction);
  MetricReport report;
  double sd = 0.0, sh = 0.0, sv = 0.0;
  int nd = 0, nh = 0, nv = 0;
  for (int c = 1; c <= label::kNumStructures; ++c) {
    ClassMetrics m;
    m.code = c;
    m.in_reference = std::find(reference.data().begin(), reference.data().end(), c) != reference.data().end();
    m.dice = dice(reference, prediction, c);
    m.hd95 = hd95(reference, prediction, c, spacing);
    m.vs = volumetric_similarity(reference, prediction, c);
    if (m.in_reference) {
      if (m.dice) sd += *m.dice, ++nd;
      if (m.hd95) sh += *m.hd95, ++nh;
      if (m.vs) sv += *m.vs, ++nv;
    }
    report.classes.push_back(m);
  }
  if (nd) report.mean_dice = sd / nd;
  if (nh) report.mean_hd95 = sh / nh;
  if (nv) report.mean_vs = sv / nv;
  return report;
}

std::string format_metric(const MetricValue& v) {
  if (!v) return "NA";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.10g", *v);
  return buf;
}

void write_report_csv(const std::vector<std::pair<std::string, MetricReport>>& reports,
                      const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "subject,class,dice,hd95,vs\n";
  for (const auto& [subject, r] : reports) {
    for (const auto& m : r.classes) {
      out << subject << ',' << label_name(m.code) << ',' << format_metric(m.dice) << ',' << format_metric(m.hd95) << ','
          << format_metric(m.vs) << '\n';
    }
    out << subject << ",Averaged," << format_metric(r.mean_dice) << ',' << format_metric(r.mean_hd95) << ','
        << format_metric(r.mean_vs) << '\n';
  }
  if (!out) throw IoError("short write to " + path.string());
}

void write_report_json(const std::vector<std::pair<std::string, MetricReport>>& reports,
                       const std::filesystem::path& path) {
  auto value = [](const MetricValue& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json doc = nlohmann::json::array();
  for (const auto& [subject, r] : reports) {
    nlohmann::json classes = nlohmann::json::array();
    for (const auto& m : r.classes) {
      classes.push_back({{"code", m.code},
                         {"name", std::string(label_name(m.code))},
                         {"in_reference", m.in_reference},
                         {"dice", value(m.dice)},
                         {"hd95", value(m.hd95)},
                         {"vs", value(m.vs)}});
    }
    doc.push_back({{"subject", subject},
                   {"classes", classes},
                   {"averaged", {{"dice", value(r.mean_dice)}, {"hd95", value(r.mean_hd95)}, {"vs", value(r.mean_vs)}}}});
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << doc.dump(2) << '\n';
}

}  // namespace brainseg
