#include "brainseg/inference.hpp"

#include <algorithm>
#include <cmath>

#include "brainseg/error.hpp"

namespace brainseg {

ProbabilityVolume::ProbabilityVolume(Shape3 shape, Spacing spacing, int classes)
    : shape_(shape), spacing_(spacing), classes_(classes) {
  if (classes < 1) throw ArgumentError("probability volume needs at least one class");
  if (shape.x <= 0 || shape.y <= 0 || shape.z <= 0) throw ShapeError("probability volume shape must be positive");
  data_.assign(static_cast<std::size_t>(classes) * shape.voxels(), 0.0);
}

ScalarVolume ProbabilityVolume::channel(int k) const {
  if (k < 0 || k >= classes_) throw ArgumentError("channel " + std::to_string(k) + " out of range");
  ScalarVolume out(shape_, spacing_, 0.0f);
  for (std::size_t i = 0; i < voxels(); ++i) out[i] = static_cast<float>(at(k, i));
  return out;
}

void ProbabilityVolume::validate(double tol) const {
  for (std::size_t i = 0; i < voxels(); ++i) {
    double sum = 0.0;
    for (int k = 0; k < classes_; ++k) {
      const double p = at(k, i);
      if (!(p >= 0.0 && p <= 1.0)) throw NumericError("probability outside [0, 1] at voxel " + std::to_string(i));
      sum += p;
    }
    if (std::abs(sum - 1.0) > tol) throw NumericError("probabilities at voxel " + std::to_string(i) + " sum to " +
                                                      std::to_string(sum));
  }
}

namespace {

/// Mirror index into [0, n) without repeating the edge sample.
int reflect(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  int m = i % period;
  if (m < 0) m += period;
  return m < n ? m : period - m;
}

int round_up4(int v) { return (v + 3) / 4 * 4; }

}  // namespace

ProbabilityVolume predict_probabilities(const Network& net, const MultiModalScan& scan,
                                        std::span<const Modality> modality_order, int slices_per_batch) {
  if (static_cast<int>(modality_order.size()) != net.config().in_channels) {
    throw ArgumentError("modality order has " + std::to_string(modality_order.size()) + " entries but the network takes " +
                        std::to_string(net.config().in_channels) + " channels");
  }
  for (Modality m : modality_order) scan.get(m);
  if (slices_per_batch < 1) slices_per_batch = 1;

  const Shape3& s = scan.shape();
  const int h = s.y;
  const int w = s.x;
  const int ph = round_up4(h);
  const int pw = round_up4(w);
  const int k = net.config().num_classes;
  ProbabilityVolume out(s, scan.spacing(), k);
  const std::size_t plane = s.plane();

  for (int z0 = 0; z0 < s.z; z0 += slices_per_batch) {
    const int nz = std::min(slices_per_batch, s.z - z0);
    Tensor batch(nz, static_cast<int>(modality_order.size()), ph, pw);
    for (int b = 0; b < nz; ++b) {
      for (std::size_t c = 0; c < modality_order.size(); ++c) {
        auto src = scan.get(modality_order[c]).plane(z0 + b);
        for (int row = 0; row < ph; ++row) {
          const int sr = reflect(row, h);
          for (int col = 0; col < pw; ++col) {
            batch.at(b, static_cast<int>(c), row, col) = src[static_cast<std::size_t>(sr) * w + reflect(col, w)];
          }
        }
      }
    }
    const Tensor probs = softmax_probabilities(net.predict(batch));
    for (int b = 0; b < nz; ++b) {
      const std::size_t base = static_cast<std::size_t>(z0 + b) * plane;
      for (int cls = 0; cls < k; ++cls) {
        for (int row = 0; row < h; ++row) {
          for (int col = 0; col < w; ++col) {
            out.at(cls, base + static_cast<std::size_t>(row) * w + col) = probs.at(b, cls, row, col);
          }
        }
      }
    }
  }
  return out;
}

ProbabilityVolume ensemble_average(const std::vector<ProbabilityVolume>& volumes) {
  if (volumes.empty()) throw ArgumentError("ensemble_average needs at least one volume");
  const auto& first = volumes.front();
  for (const auto& v : volumes) {
    if (v.shape() != first.shape() || v.classes() != first.classes()) {
      throw ArgumentError("ensemble members disagree on shape or class count");
    }
  }
  ProbabilityVolume out(first.shape(), first.spacing(), first.classes());
  std::vector<double> vals(volumes.size());
  const std::size_t n = first.values().size();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t m = 0; m < volumes.size(); ++m) vals[m] = volumes[m].values()[i];
    std::sort(vals.begin(), vals.end());
    // Running mean: exact when all members agree.
    double mean = vals[0];
    for (std::size_t m = 1; m < vals.size(); ++m) mean += (vals[m] - mean) / static_cast<double>(m + 1);
    out.values()[i] = mean;
  }
  return out;
}

LabelVolume argmax_labels(const ProbabilityVolume& probs) {
  LabelVolume out(probs.shape(), probs.spacing(), 0);
  for (std::size_t i = 0; i < probs.voxels(); ++i) {
    int best = 0;
    for (int k = 1; k < probs.classes(); ++k) {
      if (probs.at(k, i) > probs.at(best, i)) best = k;
    }
    out[i] = static_cast<std::int16_t>(best);
  }
  return out;
}

ProbabilityVolume ensemble_probabilities(const Ensemble& ensemble, const MultiModalScan& scan) {
  if (ensemble.members.empty()) throw ArgumentError("ensemble is empty");
  std::vector<ProbabilityVolume> probs;
  probs.reserve(ensemble.members.size());
  for (const auto& net : ensemble.members) probs.push_back(predict_probabilities(net, scan, ensemble.modality_order));
  return ensemble_average(probs);
}

LabelVolume run_submission1(const Ensemble& ensemble, const MultiModalScan& scan) {
  return remap_pathology_to_background(argmax_labels(ensemble_probabilities(ensemble, scan)));
}

WmhSegmenter coarse_wmh_segmenter() {
  return [](const MultiModalScan&, const ProbabilityVolume& coarse) {
    LabelVolume labels = argmax_labels(coarse);
    for (auto& v : labels.data()) v = v == label::kWhiteMatterLesion ? 1 : 0;
    return labels;
  };
}

FusionPolicy FusionPolicy::default_policy() {
  return {{{"csf", label::kCsf, {label::kBackground, label::kCsf}}, {"wmh", label::kWhiteMatterLesion, {}}}};
}

void FusionPolicy::validate(const std::map<std::string, LabelVolume>& sources) const {
  if (rules.empty()) throw ConfigError("fusion policy has no rules");
  for (const auto& r : rules) {
    if (sources.count(r.source) == 0) throw ConfigError("fusion rule names unknown source '" + r.source + "'");
    if (r.target < 0 || r.target > label::kMaxCode) throw ConfigError("fusion rule target outside 0..10");
  }
}

LabelVolume fuse_labels(const LabelVolume& coarse, const std::map<std::string, LabelVolume>& sources,
                        const FusionPolicy& policy) {
  policy.validate(sources);
  for (const auto& [name, mask] : sources) {
    if (mask.shape() != coarse.shape()) {
      throw ArgumentError("fusion source '" + name + "' has grid " + to_string(mask.shape()) + " but coarse labels have " +
                          to_string(coarse.shape()));
    }
  }
  LabelVolume out = coarse;
  for (const auto& rule : policy.rules) {
    const auto& mask = sources.at(rule.source);
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (mask[i] == 0) continue;
      if (!rule.only_over.empty() &&
          std::find(rule.only_over.begin(), rule.only_over.end(), coarse[i]) == rule.only_over.end()) {
        continue;
      }
      out[i] = rule.target;
    }
  }
  return out;
}

LabelVolume run_submission2(const Ensemble& coarse, const Ensemble& csf, const WmhSegmenter& wmh,
                            const MultiModalScan& scan, const FusionPolicy& policy, double csf_threshold) {
  const ProbabilityVolume coarse_probs = ensemble_probabilities(coarse, scan);
  const LabelVolume coarse_labels = remap_pathology_to_background(argmax_labels(coarse_probs));

  const ProbabilityVolume csf_probs = ensemble_probabilities(csf, scan);
  if (csf_probs.shape() != coarse_probs.shape()) throw ArgumentError("CSF stage grid differs from the coarse stage");
  const int csf_channel = csf_probs.classes() == 2 ? 1 : label::kCsf;
  if (csf_channel >= csf_probs.classes()) throw ArgumentError("CSF model has no CSF channel");
  LabelVolume csf_mask(scan.shape(), scan.spacing(), 0);
  for (std::size_t i = 0; i < csf_mask.size(); ++i) csf_mask[i] = csf_probs.at(csf_channel, i) > csf_threshold ? 1 : 0;

  LabelVolume wmh_mask = wmh(scan, coarse_probs);
  if (wmh_mask.shape() != scan.shape()) throw ArgumentError("WMH segmenter returned a mask on a different grid");

  std::map<std::string, LabelVolume> sources;
  sources.emplace("csf", std::move(csf_mask));
  sources.emplace("wmh", std::move(wmh_mask));
  return fuse_labels(coarse_labels, sources, policy);
}

}  // namespace brainseg
