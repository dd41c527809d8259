#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "brainseg/drunet.hpp"
#include "brainseg/preprocess.hpp"

namespace brainseg {

enum class OptimizerKind { Adam, Sgd };

struct TrainConfig {
  double learning_rate = 1e-3;
  int batch_size = 8;
  int epochs = 1;
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::Adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  /// Per-class loss weights; empty means unweighted.
  std::vector<double> class_weights;

  void validate() const;
};

struct LossResult {
  double loss = 0.0;
  Tensor grad;  ///< dLoss/dLogits, same shape as the logits
};

/// Mean pixel-wise categorical cross-entropy. With class weights the mean is
/// weighted, sum_i w[y_i] * nll_i / sum_i w[y_i]. `labels` holds B*H*W codes
/// in NCHW pixel order.
LossResult cross_entropy_loss(const Tensor& logits, std::span<const std::int16_t> labels,
                              std::span<const double> class_weights = {});

/// Inverse-frequency weights N / (K * count_k), normalised to mean 1 over the
/// classes that occur; absent classes get weight 0.
std::vector<double> inverse_frequency_weights(const std::vector<AugmentedPair>& dataset, int num_classes);

struct LosoSplit {
  std::vector<std::string> train_ids;
  std::string test_id;
};

/// One split per subject, holding out subjects in input order.
std::vector<LosoSplit> loso_splits(const std::vector<std::string>& subject_ids);

struct LossRecord {
  int step = 0;
  int epoch = 0;
  double loss = 0.0;
};

struct TrainResult {
  Network net;
  std::vector<LossRecord> history;
};

/// Mini-batch training with a fresh seed-determined permutation each epoch.
/// Runs epochs * ceil(N / batch_size) optimizer steps.
TrainResult train_model(Network net, const std::vector<AugmentedPair>& dataset, const TrainConfig& cfg);

/// Member i is initialised and shuffled with seed cfg.seed + i.
std::vector<TrainResult> train_ensemble(const DRUNetConfig& config, const std::vector<AugmentedPair>& dataset,
                                        const TrainConfig& cfg, int members = 5);

/// Columns: step,epoch,loss.
void write_loss_history_csv(const std::vector<LossRecord>& history, const std::filesystem::path& path);

/// Stacks dataset[indices] into an NCHW batch and the matching label codes.
std::pair<Tensor, std::vector<std::int16_t>> make_batch(const std::vector<AugmentedPair>& dataset,
                                                        std::span<const std::size_t> indices);

}  // namespace brainseg
