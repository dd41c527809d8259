#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "brainseg/error.hpp"
#include "brainseg/phantom.hpp"
#include "brainseg/training.hpp"
#include "doctest.h"

using namespace brainseg;
namespace fs = std::filesystem;

namespace {

DRUNetConfig tiny(int in = 1, int k = 2, int f = 4) {
  DRUNetConfig c;
  c.in_channels = in;
  c.num_classes = k;
  c.base_filters = f;
  return c;
}

/// Two-class toy slices: a bright square on a dark background.
std::vector<AugmentedPair> squares(int n, int size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> noise(0.0f, 0.1f);
  std::uniform_int_distribution<int> pos(1, size / 2);
  std::vector<AugmentedPair> out;
  for (int i = 0; i < n; ++i) {
    AugmentedPair p{Image2D(1, size, size), LabelPlane(size, size)};
    const int r0 = pos(rng), c0 = pos(rng);
    for (int r = 0; r < size; ++r)
      for (int c = 0; c < size; ++c) {
        const bool in = r >= r0 && r < r0 + size / 3 && c >= c0 && c < c0 + size / 3;
        p.image.at(0, r, c) = (in ? 1.0f : -1.0f) + noise(rng);
        p.labels.at(r, c) = in ? 1 : 0;
      }
    out.push_back(std::move(p));
  }
  return out;
}

/// Five-point central difference.
double finite_diff(const Tensor& logits, std::span<const std::int16_t> labels, std::span<const double> w,
                   std::size_t i, double h) {
  auto f = [&](double d) {
    Tensor t = logits;
    t.data[i] += d;
    return cross_entropy_loss(t, labels, w).loss;
  };
  return (-f(2 * h) + 8 * f(h) - 8 * f(-h) + f(-2 * h)) / (12 * h);
}

}  // namespace

TEST_CASE("uniform logits give ln K for any labels") {
  Tensor logits(2, 9, 3, 3);
  std::vector<std::int16_t> labels(18);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<std::int16_t>(i % 9);
  CHECK(cross_entropy_loss(logits, labels).loss == doctest::Approx(std::log(9.0)).epsilon(1e-14));
  CHECK(std::log(9.0) == doctest::Approx(2.19722).epsilon(1e-5));
  std::fill(labels.begin(), labels.end(), 3);
  CHECK(cross_entropy_loss(logits, labels).loss == doctest::Approx(std::log(9.0)).epsilon(1e-14));
}

TEST_CASE("confident correct logits give near-zero loss") {
  Tensor logits(1, 9, 2, 2);
  std::vector<std::int16_t> labels = {0, 4, 8, 2};
  for (int p = 0; p < 4; ++p) logits.data[labels[p] * 4 + p] = 50.0;
  const auto r = cross_entropy_loss(logits, labels);
  CHECK(r.loss >= 0.0);
  CHECK(r.loss < 1e-6);
}

TEST_CASE("loss gradient matches central differences") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd(0, 2);
  Tensor logits(2, 5, 3, 4);
  for (auto& v : logits.data) v = nd(rng);
  std::vector<std::int16_t> labels(24);
  for (auto& l : labels) l = static_cast<std::int16_t>(rng() % 5);
  const std::vector<double> weights = {0.5, 1.0, 2.0, 0.0, 3.0};
  for (bool weighted : {false, true}) {
    std::span<const double> w = weighted ? std::span<const double>(weights) : std::span<const double>();
    const auto r = cross_entropy_loss(logits, labels, w);
    double worst = 0;
    for (std::size_t i = 0; i < logits.data.size(); ++i) {
      const double n = finite_diff(logits, labels, w, i, 1e-3);
      worst = std::max(worst, std::abs(n - r.grad.data[i]) / std::max({std::abs(n), std::abs(r.grad.data[i]), 1e-6}));
    }
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("weighted loss is the weighted mean") {
  Tensor logits(1, 2, 1, 2);
  logits.data = {0.0, 0.0, 1.0, -1.0};  // pixel 0: (0, 1), pixel 1: (0, -1)
  std::vector<std::int16_t> labels = {0, 1};
  const std::vector<double> w = {1.0, 3.0};
  const double nll0 = std::log(1 + std::exp(1.0));
  const double nll1 = std::log(1 + std::exp(1.0));
  CHECK(cross_entropy_loss(logits, labels, w).loss == doctest::Approx((1 * nll0 + 3 * nll1) / 4));
}

TEST_CASE("loss argument errors") {
  Tensor logits(1, 3, 2, 2);
  std::vector<std::int16_t> labels = {0, 1, 2, 3};
  CHECK_THROWS_AS(cross_entropy_loss(logits, labels), ArgumentError);
  labels.pop_back();
  CHECK_THROWS_AS(cross_entropy_loss(logits, labels), ShapeError);
  labels = {0, 1, 2, 0};
  const std::vector<double> w = {1.0, 1.0};
  CHECK_THROWS_AS(cross_entropy_loss(logits, labels, w), ArgumentError);
}

TEST_CASE("inverse frequency weights") {
  auto d = squares(2, 12, 1);
  const auto w = inverse_frequency_weights(d, 3);
  REQUIRE(w.size() == 3);
  CHECK(w[2] == 0.0);
  CHECK(w[1] > w[0]);
  CHECK((w[0] + w[1]) / 2 == doctest::Approx(1.0));
}

TEST_CASE("LOSO splits partition the cohort") {
  std::vector<std::string> ids = {"1", "2", "3", "4", "5", "6", "7"};
  const auto s = loso_splits(ids);
  REQUIRE(s.size() == 7);
  std::multiset<std::string> tests;
  for (std::size_t i = 0; i < s.size(); ++i) {
    CHECK(s[i].test_id == ids[i]);
    CHECK(s[i].train_ids.size() == 6);
    std::set<std::string> all(s[i].train_ids.begin(), s[i].train_ids.end());
    CHECK(all.count(s[i].test_id) == 0);
    all.insert(s[i].test_id);
    CHECK(all.size() == 7);
    tests.insert(s[i].test_id);
  }
  for (const auto& id : ids) CHECK(tests.count(id) == 1);
  CHECK(loso_splits({"a", "b"}).size() == 2);
  CHECK_THROWS_AS(loso_splits({"a"}), ArgumentError);
  CHECK_THROWS_AS(loso_splits({"a", "b", "a"}), ArgumentError);
}

TEST_CASE("step count and determinism") {
  const auto data = squares(5, 8, 2);
  TrainConfig cfg;
  cfg.batch_size = 2;
  cfg.epochs = 3;
  cfg.seed = 5;
  const auto a = train_model(Network(tiny(), 1), data, cfg);
  CHECK(a.history.size() == 9);
  CHECK(a.history.back().epoch == 2);
  const auto b = train_model(Network(tiny(), 1), data, cfg);
  bool same = a.history.size() == b.history.size();
  for (std::size_t i = 0; same && i < a.history.size(); ++i) same = a.history[i].loss == b.history[i].loss;
  CHECK(same);
  for (std::size_t i = 0; i < a.net.arrays().size(); ++i) CHECK(a.net.arrays()[i].value == b.net.arrays()[i].value);
  cfg.seed = 6;
  const auto c = train_model(Network(tiny(), 1), data, cfg);
  bool differs = false;
  for (std::size_t i = 0; i < a.history.size(); ++i) differs = differs || a.history[i].loss != c.history[i].loss;
  CHECK(differs);
}

TEST_CASE("zero learning rate leaves trainable parameters unchanged") {
  const auto data = squares(4, 8, 3);
  TrainConfig cfg;
  cfg.learning_rate = 0.0;
  cfg.batch_size = 4;
  cfg.epochs = 4;
  const Network init(tiny(), 2);
  const auto r = train_model(init, data, cfg);
  for (std::size_t i = 0; i < init.arrays().size(); ++i) {
    if (init.arrays()[i].trainable) CHECK(r.net.arrays()[i].value == init.arrays()[i].value);
  }
  // A full batch in a fixed network gives the same loss every step, up to
  // the summation order of the shuffled batch.
  for (const auto& h : r.history) CHECK(h.loss == doctest::Approx(r.history.front().loss).epsilon(1e-12));
}

TEST_CASE("overfitting a single repeated batch") {
  const auto data = squares(2, 16, 4);
  TrainConfig cfg;
  cfg.batch_size = 2;
  cfg.epochs = 200;
  cfg.learning_rate = 1e-2;
  const auto r = train_model(Network(tiny(1, 2, 8), 3), data, cfg);
  REQUIRE(r.history.size() == 200);
  CHECK(r.history.back().loss < 0.1 * r.history.front().loss);
}

TEST_CASE("sgd also descends") {
  const auto data = squares(2, 8, 5);
  TrainConfig cfg;
  cfg.optimizer = OptimizerKind::Sgd;
  cfg.learning_rate = 0.1;
  cfg.batch_size = 2;
  cfg.epochs = 30;
  const auto r = train_model(Network(tiny(), 4), data, cfg);
  CHECK(r.history.back().loss < r.history.front().loss);
}

TEST_CASE("training input errors are raised before any step") {
  auto data = squares(3, 8, 6);
  TrainConfig cfg;
  CHECK_THROWS_AS(train_model(Network(tiny(2), 0), data, cfg), ShapeError);
  CHECK_THROWS_AS(train_model(Network(tiny(), 0), {}, cfg), ArgumentError);
  auto odd = squares(1, 10, 1);
  CHECK_THROWS_AS(train_model(Network(tiny(), 0), odd, cfg), ShapeError);
  data[2].labels.at(0, 0) = 2;
  CHECK_THROWS_AS(train_model(Network(tiny(), 0), data, cfg), ArgumentError);
  cfg.batch_size = 0;
  CHECK_THROWS_AS(train_model(Network(tiny(), 0), squares(1, 8, 1), cfg), ConfigError);
}

TEST_CASE("ensemble members use seed + i") {
  const auto data = squares(3, 8, 7);
  TrainConfig cfg;
  cfg.batch_size = 2;
  cfg.epochs = 2;
  cfg.seed = 10;
  const auto ens = train_ensemble(tiny(), data, cfg, 3);
  REQUIRE(ens.size() == 3);
  for (int i = 0; i < 3; ++i) {
    TrainConfig ci = cfg;
    ci.seed = cfg.seed + i;
    const auto single = train_model(Network(tiny(), cfg.seed + i), data, ci);
    for (std::size_t a = 0; a < single.net.arrays().size(); ++a) {
      CHECK(ens[i].net.arrays()[a].value == single.net.arrays()[a].value);
    }
  }
  CHECK(ens[0].net.arrays()[0].value != ens[1].net.arrays()[0].value);
  CHECK(ens[1].net.arrays()[0].value != ens[2].net.arrays()[0].value);
  CHECK_THROWS_AS(train_ensemble(tiny(), data, cfg, 0), ArgumentError);
  const auto again = train_ensemble(tiny(), data, cfg, 3);
  for (int i = 0; i < 3; ++i) CHECK(again[i].net.arrays()[5].value == ens[i].net.arrays()[5].value);
}

TEST_CASE("loss history CSV") {
  const fs::path p = fs::temp_directory_path() / "brainseg_loss.csv";
  write_loss_history_csv({{0, 0, 0.5}, {1, 0, 0.25}}, p);
  std::ifstream in(p);
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  CHECK(header == "step,epoch,loss");
  CHECK(row == "0,0,0.5");
}
