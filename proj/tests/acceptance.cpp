// Acceptance gate: one PASS/FAIL line per criterion, exit status 1 if any fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>

#include "brainseg/drunet.hpp"
#include "brainseg/inference.hpp"
#include "brainseg/metrics.hpp"
#include "brainseg/nifti.hpp"
#include "brainseg/phantom.hpp"
#include "brainseg/pipeline.hpp"
#include "brainseg/preprocess.hpp"
#include "brainseg/training.hpp"
#include "oracles.hpp"

using namespace brainseg;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool ok = false;
  std::string detail;
};

/// Accumulates failed sub-checks into one outcome.
struct Checks {
  std::ostringstream fails;
  std::ostringstream info;
  void expect(bool cond, const std::string& what) {
    if (!cond) fails << what << "; ";
  }
  Outcome result() const {
    const std::string f = fails.str();
    return {f.empty(), f.empty() ? info.str() : f + info.str()};
  }
};

int failures = 0;

void criterion(int id, const std::string& name, double limit_s, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (secs > limit_s) {
    o.ok = false;
    o.detail += " over time limit";
  }
  if (!o.ok) ++failures;
  std::printf("%s %d %s (%.2fs / %.0fs limit) %s\n", o.ok ? "PASS" : "FAIL", id, name.c_str(), secs, limit_s,
              o.detail.c_str());
  std::fflush(stdout);
}

DRUNetConfig net_config(int in, int k, int f) {
  DRUNetConfig c;
  c.in_channels = in;
  c.num_classes = k;
  c.base_filters = f;
  return c;
}

Tensor random_tensor(std::uint64_t seed, int n, int c, int h, int w) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  Tensor t(n, c, h, w);
  for (auto& v : t.data) v = nd(rng);
  return t;
}

ProbabilityVolume random_probs(Shape3 s, int k, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.01, 1.0);
  ProbabilityVolume p(s, Spacing{}, k);
  for (std::size_t i = 0; i < p.voxels(); ++i) {
    double sum = 0;
    for (int c = 0; c < k; ++c) sum += p.at(c, i) = u(rng);
    for (int c = 0; c < k; ++c) p.at(c, i) /= sum;
  }
  return p;
}

std::vector<std::string> read_lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

std::size_t fields(const std::string& line) { return static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1; }

const std::vector<Modality> kAll = {Modality::FLAIR, Modality::T1, Modality::IR};

Outcome parameter_budget() {
  Checks c;
  const Network net(net_config(3, 9, 32), 0);
  const std::size_t n = count_parameters(net);
  const std::size_t closed = oracle::drunet_parameter_count(3, 9, 32, net.config().upsample_kernel);
  const double dev = (static_cast<double>(n) - 156105.0) / 156105.0;
  c.expect(std::abs(dev) <= 0.10, "count outside +/-10% of 156105");
  c.expect(n == closed, "count differs from closed form " + std::to_string(closed));
  c.info << "count=" << n << " closed_form=" << closed << " deviation=" << dev * 100 << "%";
  return c.result();
}

Outcome metric_oracles() {
  Checks c;
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> side(1, 16);
  const Spacing spacings[] = {{1, 1, 1}, {0.96, 0.96, 3.0}, {0.7, 1.3, 2.1}};
  int compared = 0;
  double worst_hd = 0;
  for (int t = 0; t < 200; ++t) {
    const Shape3 s{side(rng), side(rng), side(rng)};
    const Spacing sp = spacings[t % 3];
    const auto g = oracle::random_labels(rng, s, 3);
    const auto p = oracle::random_labels(rng, s, 3);
    for (int k = 1; k <= 3; ++k) {
      const auto [dn, dd] = oracle::dice_fraction(g, p, k);
      const auto d = dice(g, p, k);
      c.expect(d.has_value() == (dd > 0), "dice definedness");
      if (d && dd > 0) c.expect(*d == static_cast<double>(dn) / static_cast<double>(dd), "dice value");
      const auto [vn, vd] = oracle::vs_fraction(g, p, k);
      const auto v = volumetric_similarity(g, p, k);
      c.expect(v.has_value() == (vd > 0), "vs definedness");
      if (v && vd > 0) c.expect(*v == static_cast<double>(vn) / static_cast<double>(vd), "vs value");
      const double bh = oracle::hd95_brute_force(g, p, k, sp);
      const auto h = hd95(g, p, k, sp);
      c.expect(h.has_value() == (bh >= 0), "hd95 definedness");
      if (h && bh >= 0) {
        worst_hd = std::max(worst_hd, std::abs(*h - bh));
        c.expect(std::abs(*h - bh) < 1e-9, "hd95 value");
      }
      ++compared;
    }
  }
  c.info << "pairs=200 class_comparisons=" << compared << " max_hd95_error=" << worst_hd;
  return c.result();
}

Outcome geometric_anchor() {
  Checks c;
  const Shape3 grid{20, 14, 4};
  const Spacing unit{1, 1, 1};
  const Spacing aniso{0.96, 0.96, 3.0};
  const auto g = oracle::box(grid, unit, 2, 12, 2, 12, 1, 3);
  const auto p = oracle::box(grid, unit, 5, 15, 2, 12, 1, 3);
  const auto ga = oracle::box(grid, aniso, 2, 12, 2, 12, 1, 3);
  const auto pa = oracle::box(grid, aniso, 5, 15, 2, 12, 1, 3);
  const double d = dice(g, p, 1).value();
  const double h = hd95(g, p, 1, unit).value();
  const double ha = hd95(ga, pa, 1).value();
  c.expect(d == 0.7, "dice != 0.7");
  c.expect(std::abs(h - 3.0) < 1e-9, "hd95 unit spacing != 3.0");
  c.expect(std::abs(ha - 2.88) < 1e-9, "hd95 anisotropic != 2.88");
  c.info << "dice=" << d << " hd95=" << h << " hd95_aniso=" << ha;
  return c.result();
}

Outcome gradient_check() {
  Checks c;
  Network net(net_config(1, 2, 4), 21);
  net.set_mode(Mode::Train);
  const Tensor x = random_tensor(22, 2, 1, 8, 8);
  std::vector<std::int16_t> labels(2 * 64);
  std::mt19937_64 rng(23);
  for (auto& l : labels) l = static_cast<std::int16_t>(rng() % 2);
  net.zero_grad();
  const auto res = cross_entropy_loss(net.forward(x), labels);
  net.backward(res.grad);

  std::vector<std::pair<std::size_t, std::size_t>> candidates;
  for (std::size_t a = 0; a < net.arrays().size(); ++a) {
    if (!net.arrays()[a].trainable) continue;
    for (std::size_t i = 0; i < net.arrays()[a].numel(); ++i) candidates.push_back({a, i});
  }
  std::shuffle(candidates.begin(), candidates.end(), rng);
  const std::size_t samples = 64;
  const double h = 1e-5;
  double worst = 0;
  for (std::size_t s = 0; s < samples; ++s) {
    const auto [a, i] = candidates[s];
    Network probe = net;
    double& v = probe.arrays()[a].value[i];
    const double orig = v;
    v = orig + h;
    const double up = cross_entropy_loss(probe.forward(x), labels).loss;
    v = orig - h;
    const double down = cross_entropy_loss(probe.forward(x), labels).loss;
    const double numeric = (up - down) / (2 * h);
    const double analytic = net.arrays()[a].grad[i];
    worst = std::max(worst, std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6}));
  }
  c.expect(worst < 1e-4, "max relative error too large");
  c.info << "samples=" << samples << " max_rel_error=" << worst;
  return c.result();
}

Outcome overfit() {
  Checks c;
  PhantomConfig pc;
  pc.shape = {64, 64, 16};
  pc.noise_sigma = 0.0;
  const auto subjects = prepare_subjects({generate_subject(pc, 0)});
  const auto data = slice_dataset(subjects, kAll);
  TrainConfig tc;
  tc.batch_size = 8;
  tc.learning_rate = 1e-2;
  tc.seed = 5;
  tc.epochs = 200 / static_cast<int>((data.size() + 7) / 8);
  const auto r = train_model(Network(net_config(3, 9, 8), 5), data, tc);
  c.expect(r.history.size() == 200, "ran " + std::to_string(r.history.size()) + " steps");
  const auto pred = argmax_labels(predict_probabilities(r.net, subjects[0].scan, kAll));
  const auto& ref = *subjects[0].labels;
  double sum = 0;
  for (int k : {label::kGrayMatter, label::kWhiteMatter, label::kCsf}) {
    const double d = dice(ref, pred, k).value();
    c.info << "dice[" << k << "]=" << d << " ";
    sum += d;
  }
  const double mean = sum / 3;
  c.expect(mean > 0.85, "mean Dice <= 0.85");
  c.info << "mean=" << mean << " loss " << r.history.front().loss << "->" << r.history.back().loss;
  return c.result();
}

Outcome ensemble_identities() {
  Checks c;
  const auto p = random_probs(Shape3{13, 11, 5}, 9, 6);
  const std::vector<ProbabilityVolume> five(5, p);
  c.expect(ensemble_average(five) == p, "average of identical volumes differs from input");
  PhantomConfig pc;
  pc.shape = {32, 28, 6};
  const auto scan = normalize_patient(generate_subject(pc, 0).scan).scan;
  const Network net(net_config(3, 9, 8), 10);
  const Ensemble one{{net}, kAll};
  const Ensemble many{{net, net, net, net, net}, kAll};
  c.expect(run_submission1(many, scan) == run_submission1(one, scan), "5 identical members differ from one");
  c.expect(ensemble_probabilities(many, scan) == ensemble_probabilities(one, scan), "averaged probabilities differ");
  return c.result();
}

Outcome loso_harness() {
  Checks c;
  const fs::path d = fs::temp_directory_path() / "brainseg_acceptance_loso";
  fs::remove_all(d);
  std::ostringstream log;
  PhantomConfig pc;
  pc.shape = {32, 32, 8};
  pc.infarct_blobs = 1;
  c.expect(cmd_phantom(7, d / "data", 11, pc, log, log) == 0, "phantom command failed");
  std::ofstream(d / "cfg.json") << R"({"data_dir": "data", "output_dir": "out", "network": {"base_filters": 4},
    "train": {"epochs": 1, "batch_size": 8, "seed": 3}, "augmentation": {"enabled": false}, "ensemble_size": 1})";
  const int rc = cmd_loso(d / "cfg.json", std::nullopt, std::nullopt, log, log);
  c.expect(rc == 0, "loso exit code " + std::to_string(rc) + ": " + log.str().substr(0, 200));
  const fs::path out = d / "out" / "loso";
  const auto splits = read_lines(out / "splits.csv");
  c.expect(splits.size() == 8, "splits.csv has " + std::to_string(splits.size()) + " lines");
  const auto t1 = read_lines(out / "table1.csv");
  c.expect(t1.size() == 4, "table1 rows");
  if (t1.size() == 4) {
    c.expect(t1[1].rfind("Dice,", 0) == 0 && t1[2].rfind("H95,", 0) == 0 && t1[3].rfind("VS,", 0) == 0, "metric rows");
    for (const auto& l : t1) c.expect(fields(l) == 8, "table1 row width");
  }
  int pathology_in_ref = 0;
  for (const auto& dir : list_subject_dirs(d / "data")) {
    const std::string id = dir.filename().string();
    const auto pred = load_nifti_labels(out / "predictions" / (id + "_segm.nii.gz"));
    for (auto v : pred.data()) {
      if (v == label::kInfarction || v == label::kOther) {
        c.expect(false, "prediction " + id + " has code " + std::to_string(v));
        break;
      }
    }
    for (auto v : load_nifti_labels(dir / "segm.nii.gz").data()) pathology_in_ref += v == label::kInfarction;
  }
  c.info << "splits=" << splits.size() - 1 << " table1=" << (t1.empty() ? 0 : t1.size() - 1) << "x"
         << (t1.empty() ? 0 : fields(t1[0]) - 1) << " reference_code9_voxels=" << pathology_in_ref;
  return c.result();
}

Outcome preprocessing_invariants() {
  Checks c;
  const Subject s = generate_subject(PhantomConfig{}, 0);
  const auto n = normalize_patient(s.scan);
  double worst_mean = 0, worst_sd = 0;
  for (const auto& [m, v] : n.scan.modalities()) {
    double mean = 0;
    for (float x : v.data()) mean += x;
    mean /= static_cast<double>(v.size());
    double ss = 0;
    for (float x : v.data()) ss += (x - mean) * (x - mean);
    const double sd = std::sqrt(ss / static_cast<double>(v.size()));
    worst_mean = std::max(worst_mean, std::abs(mean));
    worst_sd = std::max(worst_sd, std::abs(sd - 1));
  }
  c.expect(worst_mean < 1e-6, "mean too far from 0");
  c.expect(worst_sd < 1e-6, "deviation too far from 1");

  std::mt19937_64 rng(8);
  std::uniform_real_distribution<float> u(-1, 1);
  Image2D img(3, 13, 17);
  for (auto& v : img.data) v = u(rng);
  LabelPlane lab(13, 17);
  for (auto& v : lab.data) v = static_cast<std::int16_t>(rng() % 11);
  const auto id = affine_augment(img, lab, AffineParams{});
  c.expect(id.image == img && id.labels == lab, "identity affine changed the slice");

  PhantomConfig pc;
  pc.shape = {32, 32, 10};
  const std::vector<Subject> subjects = {generate_subject(pc, 0), generate_subject(pc, 1)};
  AugmentationConfig ac;
  ac.seed = 9;
  const auto a = build_augmented_dataset(subjects, kAll, ac);
  const auto b = build_augmented_dataset(subjects, kAll, ac);
  c.expect(a.size() == 5 * 20, "dataset size " + std::to_string(a.size()) + " != 100");
  bool same = a.size() == b.size();
  for (std::size_t i = 0; same && i < a.size(); ++i) same = a[i].image == b[i].image && a[i].labels == b[i].labels;
  c.expect(same, "same seed gave a different dataset");
  c.info << "max|mean|=" << worst_mean << " max|sd-1|=" << worst_sd << " dataset=" << a.size();
  return c.result();
}

Outcome weight_round_trip() {
  Checks c;
  Network net(net_config(3, 9, 8), 31);
  net.set_mode(Mode::Train);
  net.forward(random_tensor(32, 2, 3, 16, 16));
  net.set_mode(Mode::Eval);
  const fs::path path = fs::temp_directory_path() / "brainseg_acceptance.drw";
  save_weights(net, path);
  const Network back = load_weights(net.config(), path);
  c.expect(back.arrays().size() == net.arrays().size(), "array count");
  for (std::size_t i = 0; i < std::min(back.arrays().size(), net.arrays().size()); ++i) {
    c.expect(back.arrays()[i].name == net.arrays()[i].name && back.arrays()[i].value == net.arrays()[i].value,
             "array " + net.arrays()[i].name);
  }
  const Tensor x = random_tensor(33, 3, 3, 24, 20);
  c.expect(back.predict(x).data == net.predict(x).data, "eval predictions differ");
  c.info << "arrays=" << net.arrays().size();
  return c.result();
}

}  // namespace

int main() {
  criterion(1, "parameter budget", 1, parameter_budget);
  criterion(2, "metric oracles", 120, metric_oracles);
  criterion(3, "geometric anchor", 1, geometric_anchor);
  criterion(4, "gradient check", 60, gradient_check);
  criterion(5, "overfit sanity", 600, overfit);
  criterion(6, "ensemble identities", 60, ensemble_identities);
  criterion(7, "LOSO harness", 300, loso_harness);
  criterion(8, "normalization and augmentation invariants", 60, preprocessing_invariants);
  criterion(9, "weight-format round-trip", 60, weight_round_trip);
  std::printf("%s: %d of 9 criteria failed\n", failures == 0 ? "ACCEPTED" : "REJECTED", failures);
  return failures == 0 ? 0 : 1;
}
