#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "brainseg/drunet.hpp"
#include "brainseg/error.hpp"
#include "brainseg/training.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace brainseg;
namespace fs = std::filesystem;

namespace {

Tensor random_input(std::uint64_t seed, int n, int c, int h, int w) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  Tensor t(n, c, h, w);
  for (auto& v : t.data) v = nd(rng);
  return t;
}

DRUNetConfig tiny(int in = 1, int k = 2, int f = 4) {
  DRUNetConfig c;
  c.in_channels = in;
  c.num_classes = k;
  c.base_filters = f;
  return c;
}

fs::path tmpdir() {
  const fs::path d = fs::temp_directory_path() / "brainseg_test_drunet";
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST_CASE("parameter count equals the closed-form layer sum") {
  for (int in : {1, 2, 3})
    for (int k : {2, 9})
      for (int f : {4, 8, 32})
        for (int up : {2, 3}) {
          DRUNetConfig c = tiny(in, k, f);
          c.upsample_kernel = up;
          CHECK(count_parameters(Network(c, 0)) == oracle::drunet_parameter_count(in, k, f, up));
        }
}

TEST_CASE("reference configuration lands within 10% of 156,105") {
  const Network net(DRUNetConfig{}, 0);
  const auto n = count_parameters(net);
  CHECK(n == 144905);
  CHECK(n >= 140495);
  CHECK(n <= 171716);
}

TEST_CASE("single 3x3 convolution 32 to 32 holds 9,248 parameters") {
  const Network net(DRUNetConfig{}, 0);
  CHECK(net.find("block2.conv1.weight")->numel() + net.find("block2.conv1.bias")->numel() == 9248);
}

TEST_CASE("count ignores non-trainable arrays") {
  Network net(tiny(), 0);
  const auto* rm = net.find("block1.bn1.running_mean");
  REQUIRE(rm != nullptr);
  CHECK_FALSE(rm->trainable);
  for (auto& a : net.arrays()) a.trainable = false;
  CHECK(count_parameters(net) == 0);
}

TEST_CASE("initialization is a function of the seed") {
  const Network a(DRUNetConfig{}, 7), b(DRUNetConfig{}, 7), c(DRUNetConfig{}, 8);
  bool same = true, differ = false;
  for (std::size_t i = 0; i < a.arrays().size(); ++i) {
    same = same && a.arrays()[i].value == b.arrays()[i].value;
    differ = differ || a.arrays()[i].value != c.arrays()[i].value;
  }
  CHECK(same);
  CHECK(differ);
  const auto& g = a.find("block3.bn2.gamma")->value;
  const auto& be = a.find("block3.bn2.beta")->value;
  for (double v : g) CHECK(v == 1.0);
  for (double v : be) CHECK(v == 0.0);
  // Names are unique.
  std::set<std::string> names;
  for (const auto& arr : a.arrays()) names.insert(arr.name);
  CHECK(names.size() == a.arrays().size());
}

TEST_CASE("forward preserves spatial size") {
  Network net(DRUNetConfig{}, 1);
  net.set_mode(Mode::Eval);
  const Tensor out = net.forward(random_input(1, 2, 3, 16, 16));
  CHECK(out.n == 2);
  CHECK(out.c == 9);
  CHECK(out.h == 16);
  CHECK(out.w == 16);
  Network small(tiny(2, 3, 4), 1);
  for (auto [h, w] : {std::pair{4, 4}, std::pair{8, 12}, std::pair{20, 36}}) {
    const Tensor o = small.forward(random_input(2, 1, 2, h, w));
    CHECK(o.h == h);
    CHECK(o.w == w);
  }
}

TEST_CASE("eval mode is pure, train mode updates running statistics") {
  Network net(tiny(), 3);
  const Tensor x = random_input(3, 2, 1, 8, 8);
  net.set_mode(Mode::Eval);
  const Tensor a = net.forward(x);
  const Tensor b = net.predict(x);
  CHECK(a.data == b.data);
  const auto before = net.find("block1.bn1.running_mean")->value;
  net.set_mode(Mode::Train);
  net.forward(x);
  CHECK(net.find("block1.bn1.running_mean")->value != before);
}

TEST_CASE("zero input with a zeroed head gives uniform probabilities") {
  Network net(DRUNetConfig{}, 4);
  for (auto* name : {"head.weight", "head.bias"}) {
    auto& v = net.find(name)->value;
    std::fill(v.begin(), v.end(), 0.0);
  }
  net.set_mode(Mode::Eval);
  const Tensor p = softmax_probabilities(net.forward(Tensor(1, 3, 8, 8)));
  for (double v : p.data) CHECK(v == doctest::Approx(1.0 / 9).epsilon(1e-15));
}

TEST_CASE("shape errors name expected and actual") {
  Network net(DRUNetConfig{}, 0);
  try {
    net.predict(Tensor(1, 2, 8, 8));
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string m = e.what();
    CHECK(m.find("expected 3") != std::string::npos);
    CHECK(m.find("got 2") != std::string::npos);
  }
  CHECK_THROWS_AS(net.predict(Tensor(1, 3, 10, 8)), ShapeError);
  CHECK_THROWS_AS(net.predict(Tensor(1, 3, 8, 6)), ShapeError);
  Network fresh(tiny(), 0);
  CHECK_THROWS_AS(fresh.backward(Tensor(1, 2, 8, 8)), ArgumentError);
  DRUNetConfig bad;
  bad.num_classes = 1;
  CHECK_THROWS_AS(Network(bad, 0), ConfigError);
  bad = {};
  bad.upsample_kernel = 4;
  CHECK_THROWS_AS(Network(bad, 0), ConfigError);
}

TEST_CASE("dilations widen the receptive field") {
  // An impulse 40 pixels away from the probe reaches it through the dilated
  // network but not through an otherwise identical undilated twin.
  DRUNetConfig dil = tiny(1, 2, 4);
  DRUNetConfig flat = dil;
  flat.down_dilations = {1, 1, 1};
  flat.up_dilations = {1, 1, 1};
  const int h = 16, w = 128, row = 8, src = 20, probe = 60;
  Tensor zero(1, 1, h, w);
  Tensor impulse = zero;
  impulse.at(0, 0, row, src) = 1.0;
  auto response = [&](const DRUNetConfig& c) {
    const Network net(c, 11);
    const Tensor a = net.predict(impulse);
    const Tensor b = net.predict(zero);
    double d = 0;
    for (int k = 0; k < 2; ++k) d += std::abs(a.at(0, k, row, probe) - b.at(0, k, row, probe));
    return d;
  };
  CHECK(response(dil) > 0.0);
  CHECK(response(flat) == 0.0);
}

TEST_CASE("zeroed residual block computes ReLU of its input") {
  Network net(DRUNetConfig{}, 5);
  for (int block : {2, 3}) {
    net.zero_block(block);
    const auto acts = net.probe_blocks(random_input(5, 2, 3, 16, 16));
    const auto& a = acts[block - 1];
    REQUIRE(a.input.data.size() == a.output.data.size());
    for (std::size_t i = 0; i < a.input.data.size(); ++i) {
      REQUIRE(a.output.data[i] == std::max(0.0, a.input.data[i]));
    }
  }
}

TEST_CASE("softmax contract") {
  Tensor z(1, 4, 2, 2);
  for (double v : softmax_probabilities(z).data) CHECK(v == 0.25);
  Tensor big(1, 2, 1, 1);
  big.data = {1000.0, 0.0};
  const Tensor p = softmax_probabilities(big);
  CHECK(p.data[0] == 1.0);
  CHECK(p.data[1] >= 0.0);
  CHECK(p.data[1] < 1e-300);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd(0, 4);
  Tensor r(3, 9, 4, 5);
  for (auto& v : r.data) v = nd(rng);
  const Tensor q = softmax_probabilities(r);
  for (int b = 0; b < 3; ++b)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 5; ++x) {
        std::vector<double> logits(9);
        for (int k = 0; k < 9; ++k) logits[k] = r.at(b, k, y, x);
        const auto ref = oracle::softmax_direct(logits);
        double sum = 0;
        for (int k = 0; k < 9; ++k) {
          CHECK(std::abs(q.at(b, k, y, x) - static_cast<double>(ref[k])) < 1e-12);
          sum += q.at(b, k, y, x);
        }
        CHECK(std::abs(sum - 1) < 1e-6);
      }
  r.data[7] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(softmax_probabilities(r), NumericError);
  r.data[7] = std::nan("");
  CHECK_THROWS_AS(softmax_probabilities(r), NumericError);
}

TEST_CASE("analytic gradients match central differences") {
  Network net(tiny(1, 2, 4), 21);
  REQUIRE(count_parameters(net) <= 5000);
  const Tensor x = random_input(22, 2, 1, 8, 8);
  std::vector<std::int16_t> labels(2 * 64);
  std::mt19937_64 rng(23);
  for (auto& l : labels) l = static_cast<std::int16_t>(rng() % 2);
  auto loss_at = [&](Network& n) { return cross_entropy_loss(n.forward(x), labels).loss; };

  net.zero_grad();
  const auto res = cross_entropy_loss(net.forward(x), labels);
  net.backward(res.grad);

  std::vector<std::pair<std::size_t, std::size_t>> candidates;
  for (std::size_t a = 0; a < net.arrays().size(); ++a) {
    if (!net.arrays()[a].trainable) continue;
    for (std::size_t i = 0; i < net.arrays()[a].numel(); ++i) candidates.push_back({a, i});
  }
  std::shuffle(candidates.begin(), candidates.end(), rng);
  double worst = 0;
  const double h = 1e-5;
  for (std::size_t s = 0; s < 60; ++s) {
    const auto [a, i] = candidates[s];
    Network probe = net;
    double& p = probe.arrays()[a].value[i];
    const double orig = p;
    p = orig + h;
    const double up = loss_at(probe);
    p = orig - h;
    const double down = loss_at(probe);
    const double numeric = (up - down) / (2 * h);
    const double analytic = net.arrays()[a].grad[i];
    const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    worst = std::max(worst, rel);
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("weight files round-trip bit-exactly") {
  Network net(tiny(3, 9, 8), 31);
  // Move running statistics away from their initial values first.
  net.forward(random_input(32, 2, 3, 8, 8));
  net.set_mode(Mode::Eval);
  const auto path = tmpdir() / "w.drw";
  save_weights(net, path);
  const Network back = load_weights(net.config(), path);
  REQUIRE(back.arrays().size() == net.arrays().size());
  for (std::size_t i = 0; i < net.arrays().size(); ++i) {
    CHECK(back.arrays()[i].name == net.arrays()[i].name);
    CHECK(back.arrays()[i].shape == net.arrays()[i].shape);
    CHECK(back.arrays()[i].value == net.arrays()[i].value);
  }
  const Tensor x = random_input(33, 3, 3, 12, 16);
  CHECK(back.predict(x).data == net.predict(x).data);
  CHECK(back.mode() == Mode::Eval);
}

TEST_CASE("weight file errors") {
  Network net(tiny(), 0);
  const auto path = tmpdir() / "e.drw";
  save_weights(net, path);
  CHECK_THROWS_AS(load_weights(tiny(1, 3, 4), path), ShapeError);
  CHECK_THROWS_AS(load_weights(tiny(), tmpdir() / "missing.drw"), IoError);
  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto write = [&](const std::string& b) {
    std::ofstream out(tmpdir() / "bad.drw", std::ios::binary);
    out << b;
  };
  write("DRW2" + bytes.substr(4));
  CHECK_THROWS_AS(load_weights(tiny(), tmpdir() / "bad.drw"), FormatError);
  write(bytes.substr(0, bytes.size() - 1));
  CHECK_THROWS_AS(load_weights(tiny(), tmpdir() / "bad.drw"), FormatError);
  write(bytes + "x");
  CHECK_THROWS_AS(load_weights(tiny(), tmpdir() / "bad.drw"), FormatError);
  // The header starts with the magic and a little-endian version 1.
  CHECK(bytes.substr(0, 4) == "DRW1");
  CHECK(bytes[4] == 1);
  CHECK(bytes[5] == 0);
}
