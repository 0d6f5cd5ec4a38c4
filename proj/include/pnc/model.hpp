#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pnc/binary_io.hpp"
#include "pnc/tensor.hpp"

namespace pnc {

enum class LayerKind { conv, dense };

/// One parametric layer followed by optional rectifier and 2x2 max pool.
/// Dense weights are [out, in]; conv weights are [out, in, kh, kw].
struct Layer {
  LayerKind kind = LayerKind::dense;
  Tensor weight;
  Tensor bias;
  std::size_t pad = 0;
  bool relu = true;
  bool pool = false;

  std::size_t out_width() const { return weight.dim(0); }
};

Tensor apply_layer(const Layer& layer, const Tensor& x);

/// A maskable unit of the network. The mask acts on the output channels
/// (conv) or units (dense) of the block's last layer.
struct Block {
  std::vector<Layer> layers;

  std::size_t maskable_width() const { return layers.back().out_width(); }
};

/// Provenance carried into checkpoints.
struct ModelMeta {
  std::vector<int> classes;  // original dataset labels, in output order
  std::uint64_t seed = 0;
  std::size_t epochs = 0;
  double test_accuracy = -1.0;
};

/// One soft or binary vector per block, each of length maskable_width.
using BlockMasks = std::vector<Tensor>;

class NetworkModel {
 public:
  std::string arch_id;
  std::vector<Block> blocks;
  Layer head;
  std::size_t num_classes = 0;
  Dims input_dims{1, 28, 28};
  ModelMeta meta;

  std::size_t depth() const { return blocks.size(); }
  /// Per-sample dims entering block `r`; r == depth() gives the head input.
  const Dims& block_input_dims(std::size_t r) const;
  std::size_t feature_width() const { return head.weight.dim(1); }
  std::vector<std::size_t> maskable_widths() const;

  NamedTensors named_parameters() const;
  std::vector<Tensor> parameters() const;
  void set_trainable(bool on);
  NetworkModel clone() const;

  /// Recomputes the per-block dims by a zero forward pass; validates chaining.
  void infer_dims();

 private:
  std::vector<Dims> dims_;
};

NetworkModel build_lenet(std::size_t num_classes, std::uint64_t seed);
NetworkModel build_plaincnn(std::size_t num_classes, std::uint64_t seed);
/// Three-block network on 1x8x8 inputs, for tests and self checks.
NetworkModel build_toy(std::size_t num_classes, std::uint64_t seed);
/// Dispatches on "lenet" / "plaincnn" / "toy".
NetworkModel build_network(const std::string& arch_id, std::size_t num_classes, std::uint64_t seed);

Tensor run_block(const Block& block, const Tensor& x, const Tensor* mask);
/// Blocks [0, r).
Tensor forward_prefix(const NetworkModel& net, const Tensor& x, std::size_t r);
/// Blocks [r, L) with optional per-block masks; returns pre-head features.
Tensor forward_suffix(const NetworkModel& net, const Tensor& features, std::size_t r,
                      const BlockMasks* masks = nullptr);
Tensor forward_features(const NetworkModel& net, const Tensor& x, const BlockMasks* masks = nullptr);
Tensor apply_head(const Layer& head, const Tensor& features);
Tensor forward(const NetworkModel& net, const Tensor& x, const BlockMasks* masks = nullptr);

std::size_t parameter_count(const NetworkModel& net);

/// Deep copy with gradient tracking off, for backbones that stay frozen.
NetworkModel frozen_copy(const NetworkModel& net);
void validate_masks(const NetworkModel& net, const BlockMasks& masks);
BlockMasks ones_masks(const NetworkModel& net);

// Checkpoint file: magic "PNCM", u32 version, u32-prefixed JSON metadata,
// named f64 tensors (see ByteWriter::tensors).
std::string serialize_checkpoint(const NetworkModel& net);
NetworkModel parse_checkpoint(std::string_view bytes, const std::string& context = "checkpoint");
void save_checkpoint(const NetworkModel& net, const std::filesystem::path& path);
NetworkModel load_checkpoint(const std::filesystem::path& path);

}  // namespace pnc
