#include "brainseg/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <set>

#include "brainseg/error.hpp"

namespace brainseg {

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be finite and >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must be in [0, 1)");
  if (!(epsilon > 0.0)) throw ConfigError("Adam epsilon must be positive");
  for (double w : class_weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("class weights must be finite and non-negative");
  }
}

LossResult cross_entropy_loss(const Tensor& logits, std::span<const std::int16_t> labels,
                              std::span<const double> class_weights) {
  const std::size_t plane = logits.plane();
  const int k = logits.c;
  if (labels.size() != static_cast<std::size_t>(logits.n) * plane) {
    throw ShapeError("label count " + std::to_string(labels.size()) + " does not match logits " +
                     logits.shape_string());
  }
  if (!class_weights.empty() && class_weights.size() != static_cast<std::size_t>(k)) {
    throw ArgumentError("expected " + std::to_string(k) + " class weights, got " + std::to_string(class_weights.size()));
  }
  LossResult out{0.0, Tensor(logits.n, logits.c, logits.h, logits.w)};
  double total_weight = 0.0;
  std::vector<double> prob(k);
  for (int b = 0; b < logits.n; ++b) {
    const double* src = logits.item(b);
    double* g = out.grad.item(b);
    for (std::size_t p = 0; p < plane; ++p) {
      const int y = labels[b * plane + p];
      if (y < 0 || y >= k) {
        throw ArgumentError("label " + std::to_string(y) + " is not a valid class for " + std::to_string(k) + " outputs");
      }
      double mx = -std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) mx = std::max(mx, src[c * plane + p]);
      double sum = 0.0;
      for (int c = 0; c < k; ++c) {
        prob[c] = std::exp(src[c * plane + p] - mx);
        sum += prob[c];
      }
      const double w = class_weights.empty() ? 1.0 : class_weights[y];
      out.loss += w * (std::log(sum) - (src[y * plane + p] - mx));
      total_weight += w;
      for (int c = 0; c < k; ++c) g[c * plane + p] = w * (prob[c] / sum - (c == y ? 1.0 : 0.0));
    }
  }
  if (!(total_weight > 0.0)) throw NumericError("total class weight of the batch is zero");
  out.loss /= total_weight;
  for (auto& v : out.grad.data) v /= total_weight;
  return out;
}

std::vector<double> inverse_frequency_weights(const std::vector<AugmentedPair>& dataset, int num_classes) {
  std::vector<double> counts(num_classes, 0.0);
  double total = 0.0;
  for (const auto& s : dataset) {
    for (auto v : s.labels.data) {
      if (v < 0 || v >= num_classes) throw ArgumentError("label " + std::to_string(v) + " exceeds class count");
      counts[v] += 1.0;
      total += 1.0;
    }
  }
  std::vector<double> w(num_classes, 0.0);
  double sum = 0.0;
  int present = 0;
  for (int c = 0; c < num_classes; ++c) {
    if (counts[c] > 0.0) {
      w[c] = total / (num_classes * counts[c]);
      sum += w[c];
      ++present;
    }
  }
  if (present > 0) {
    for (auto& v : w) v *= present / sum;
  }
  return w;
}

std::vector<LosoSplit> loso_splits(const std::vector<std::string>& subject_ids) {
  if (subject_ids.size() < 2) throw ArgumentError("leave-one-subject-out needs at least 2 subjects");
  std::set<std::string> seen;
  for (const auto& id : subject_ids) {
    if (!seen.insert(id).second) throw ArgumentError("duplicate subject id '" + id + "'");
  }
  std::vector<LosoSplit> splits;
  for (std::size_t i = 0; i < subject_ids.size(); ++i) {
    LosoSplit s;
    s.test_id = subject_ids[i];
    for (std::size_t j = 0; j < subject_ids.size(); ++j) {
      if (j != i) s.train_ids.push_back(subject_ids[j]);
    }
    splits.push_back(std::move(s));
  }
  return splits;
}

std::pair<Tensor, std::vector<std::int16_t>> make_batch(const std::vector<AugmentedPair>& dataset,
                                                        std::span<const std::size_t> indices) {
  const auto& first = dataset.at(indices.front()).image;
  Tensor x(static_cast<int>(indices.size()), first.channels, first.height, first.width);
  std::vector<std::int16_t> y;
  y.reserve(indices.size() * first.height * first.width);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& s = dataset.at(indices[b]);
    std::copy(s.image.data.begin(), s.image.data.end(), x.item(static_cast<int>(b)));
    y.insert(y.end(), s.labels.data.begin(), s.labels.data.end());
  }
  return {std::move(x), std::move(y)};
}

namespace {

void check_dataset(const Network& net, const std::vector<AugmentedPair>& dataset) {
  if (dataset.empty()) throw ArgumentError("training dataset is empty");
  const auto& cfg = net.config();
  const int h = dataset.front().image.height;
  const int w = dataset.front().image.width;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto& s = dataset[i];
    if (s.image.channels != cfg.in_channels) {
      throw ShapeError("sample " + std::to_string(i) + " has " + std::to_string(s.image.channels) +
                       " channels, network expects " + std::to_string(cfg.in_channels));
    }
    if (s.image.height != h || s.image.width != w || s.labels.height != h || s.labels.width != w) {
      throw ShapeError("sample " + std::to_string(i) + " does not share the dataset's " + std::to_string(h) + "x" +
                       std::to_string(w) + " slice size");
    }
    if (h % 4 != 0 || w % 4 != 0) throw ShapeError("training slices must have height and width divisible by 4");
    for (auto v : s.labels.data) {
      if (v < 0 || v >= cfg.num_classes) {
        throw ArgumentError("sample " + std::to_string(i) + " holds label " + std::to_string(v) + " but the network has " +
                            std::to_string(cfg.num_classes) + " classes");
      }
    }
  }
}

class Optimizer {
 public:
  Optimizer(const Network& net, const TrainConfig& cfg) : cfg_(cfg) {
    for (const auto& a : net.arrays()) {
      m_.emplace_back(a.trainable ? a.numel() : 0, 0.0);
      v_.emplace_back(a.trainable ? a.numel() : 0, 0.0);
    }
  }

  void step(Network& net) {
    ++t_;
    const double lr = cfg_.learning_rate;
    const double c1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double c2 = 1.0 - std::pow(cfg_.beta2, t_);
    auto& arrays = net.arrays();
    for (std::size_t i = 0; i < arrays.size(); ++i) {
      auto& a = arrays[i];
      if (!a.trainable) continue;
      for (std::size_t j = 0; j < a.numel(); ++j) {
        const double g = a.grad[j];
        if (cfg_.optimizer == OptimizerKind::Sgd) {
          a.value[j] -= lr * g;
          continue;
        }
        m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * g;
        v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * g * g;
        a.value[j] -= lr * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + cfg_.epsilon);
      }
      snap_to_float(a.value);
    }
  }

 private:
  const TrainConfig& cfg_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  int t_ = 0;
};

}  // namespace

TrainResult train_model(Network net, const std::vector<AugmentedPair>& dataset, const TrainConfig& cfg) {
  cfg.validate();
  check_dataset(net, dataset);
  if (!cfg.class_weights.empty() && cfg.class_weights.size() != static_cast<std::size_t>(net.config().num_classes)) {
    throw ConfigError("class_weights has " + std::to_string(cfg.class_weights.size()) + " entries, expected " +
                      std::to_string(net.config().num_classes));
  }
  net.set_mode(Mode::Train);
  Optimizer opt(net, cfg);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(dataset.size());
  TrainResult result{std::move(net), {}};
  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t count = std::min<std::size_t>(cfg.batch_size, order.size() - start);
      auto [x, y] = make_batch(dataset, std::span<const std::size_t>(order).subspan(start, count));
      result.net.zero_grad();
      const Tensor logits = result.net.forward(x);
      const LossResult loss = cross_entropy_loss(logits, y, cfg.class_weights);
      if (!std::isfinite(loss.loss)) {
        throw NumericError("training loss became non-finite at step " + std::to_string(step));
      }
      result.net.backward(loss.grad);
      opt.step(result.net);
      result.history.push_back({step, epoch, loss.loss});
      ++step;
    }
  }
  result.net.set_mode(Mode::Eval);
  return result;
}

std::vector<TrainResult> train_ensemble(const DRUNetConfig& config, const std::vector<AugmentedPair>& dataset,
                                        const TrainConfig& cfg, int members) {
  if (members < 1) throw ArgumentError("ensemble needs at least one member");
  std::vector<TrainResult> out;
  out.reserve(members);
  for (int i = 0; i < members; ++i) {
    TrainConfig member_cfg = cfg;
    member_cfg.seed = cfg.seed + static_cast<std::uint64_t>(i);
    out.push_back(train_model(build_network(config, member_cfg.seed), dataset, member_cfg));
  }
  return out;
}

void write_loss_history_csv(const std::vector<LossRecord>& history, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "step,epoch,loss\n";
  char buf[64];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof(buf), "%.17g", r.loss);
    out << r.step << ',' << r.epoch << ',' << buf << '\n';
  }
  if (!out) throw IoError("short write to " + path.string());
}

}  // namespace brainseg
