#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "brainseg/tensor.hpp"

namespace brainseg {

/// Dilated residual U-Net topology.
///
///   down: block1 (standard, d0) -> maxpool -> block2 (residual, d1) -> maxpool -> block3 (residual, d2)
///   up:   upsample -> concat block2 -> block4 (residual, u0)
///         upsample -> concat block1 -> block5 (residual, u1) -> block6 (standard, u2) -> 1x1 head
///
/// Every block is two 3x3 dilated convolutions, each followed by batch norm;
/// ReLU after the first, and after the residual sum (or second BN) at the end.
/// Residual blocks whose input width differs from base_filters (the two
/// blocks fed by a concatenation) use a 1x1 convolution + BN shortcut.
struct DRUNetConfig {
  int in_channels = 3;
  int num_classes = 9;
  int base_filters = 32;
  std::array<int, 3> down_dilations = {1, 2, 4};
  std::array<int, 3> up_dilations = {4, 2, 1};
  /// Kernel of the stride-2 transposed convolution used for upsampling (2 or 3).
  int upsample_kernel = 3;

  void validate() const;
  friend bool operator==(const DRUNetConfig&, const DRUNetConfig&) = default;
};

/// One named array of network state. Running batch-norm statistics are
/// stored here too, with trainable = false.
struct ParameterArray {
  std::string name;
  std::vector<int> shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool trainable = true;

  std::size_t numel() const { return value.size(); }
};

enum class Mode { Train, Eval };

struct BlockActivation {
  Tensor input;
  Tensor output;
};

/// Rounds every element to the nearest float32. Network state is kept on the
/// float32 grid so that weight files reproduce it exactly.
void snap_to_float(std::vector<double>& values);

class Network {
 public:
  Network(const DRUNetConfig& config, std::uint64_t seed);
  Network(const Network&);
  Network& operator=(const Network&);
  Network(Network&&) noexcept;
  Network& operator=(Network&&) noexcept;
  ~Network();

  const DRUNetConfig& config() const { return config_; }
  Mode mode() const { return mode_; }
  void set_mode(Mode m) { mode_ = m; }

  std::vector<ParameterArray>& arrays() { return arrays_; }
  const std::vector<ParameterArray>& arrays() const { return arrays_; }
  /// nullptr when absent.
  ParameterArray* find(const std::string& name);
  const ParameterArray* find(const std::string& name) const;

  /// Train mode: batch statistics for BN, caches activations for backward()
  /// and updates running statistics. Eval mode: same as predict().
  Tensor forward(const Tensor& input);

  /// Eval-mode forward using running statistics. Does not touch the network.
  Tensor predict(const Tensor& input) const;

  /// Eval-mode input and output of blocks 1..6 (index 0..5) for one batch.
  std::array<BlockActivation, 6> probe_blocks(const Tensor& input) const;

  /// Back-propagates dLoss/dLogits from the last train-mode forward() and
  /// accumulates into every trainable array's grad.
  Tensor backward(const Tensor& grad_logits);

  void zero_grad();

  /// Zeroes the two convolution weights, their biases, and the BN shifts of
  /// block `index` (1-based). Useful for probing the residual path.
  void zero_block(int index);

 private:
  struct Impl;

  DRUNetConfig config_;
  Mode mode_ = Mode::Train;
  std::vector<ParameterArray> arrays_;
  std::unique_ptr<Impl> impl_;
};

/// He-normal convolution weights from `seed`, zero biases, BN scale 1 shift 0.
Network build_network(const DRUNetConfig& config, std::uint64_t seed);

/// Sum of trainable element counts (running statistics excluded).
std::size_t count_parameters(const Network& net);

/// Per-pixel softmax over the channel axis, max-subtracted. Throws
/// NumericError on non-finite input.
Tensor softmax_probabilities(const Tensor& logits);

/// DRW1 weight files: "DRW1", u32 version, u32 entry count, then per entry
/// u16 name length, name bytes, u8 rank, u32 dims, float32 payload.
/// Little-endian throughout. Running statistics are included.
void save_weights(const Network& net, const std::filesystem::path& path);

/// Loads a DRW1 file into a network built from `config`. Every array of the
/// network must be present with a matching shape.
Network load_weights(const DRUNetConfig& config, const std::filesystem::path& path);

}  // namespace brainseg
