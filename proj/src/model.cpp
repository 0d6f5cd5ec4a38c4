#include "pnc/model.hpp"

#include <cmath>

#include "pnc/errors.hpp"
#include "pnc/rng.hpp"

namespace pnc {

namespace {

Layer make_conv(Rng& rng, std::size_t in, std::size_t out, std::size_t k, std::size_t pad, bool pool) {
  Layer l;
  l.kind = LayerKind::conv;
  l.pad = pad;
  l.pool = pool;
  l.weight = Tensor(Dims{out, in, k, k});
  const double bound = std::sqrt(6.0 / static_cast<double>(in * k * k));
  for (auto& w : l.weight.data()) w = rng.uniform(-bound, bound);
  l.bias = Tensor(Dims{out});
  return l;
}

Layer make_dense(Rng& rng, std::size_t in, std::size_t out, bool relu) {
  Layer l;
  l.kind = LayerKind::dense;
  l.relu = relu;
  l.weight = Tensor(Dims{out, in});
  const double bound = std::sqrt(6.0 / static_cast<double>(in));
  for (auto& w : l.weight.data()) w = rng.uniform(-bound, bound);
  l.bias = Tensor(Dims{out});
  return l;
}

Dims per_sample(const Tensor& t) { return Dims(t.dims().begin() + 1, t.dims().end()); }

void check_mask(const Block& block, const Tensor& mask, std::size_t index) {
  if (mask.rank() != 1 || mask.dim(0) != block.maskable_width()) {
    throw ShapeError("mask for block " + std::to_string(index) + " has dims " + dims_str(mask.dims()) +
                     ", block width is " + std::to_string(block.maskable_width()));
  }
}

}  // namespace

Tensor apply_layer(const Layer& layer, const Tensor& x) {
  Tensor y;
  if (layer.kind == LayerKind::conv) {
    y = add_bias(conv2d(x, layer.weight, layer.pad), layer.bias);
  } else {
    y = add_bias(matmul(flatten(x), transpose(layer.weight)), layer.bias);
  }
  if (layer.relu) y = relu(y);
  if (layer.pool) y = maxpool2x2(y);
  return y;
}

const Dims& NetworkModel::block_input_dims(std::size_t r) const {
  if (r >= dims_.size()) throw ContractError("block index " + std::to_string(r) + " out of range");
  return dims_[r];
}

std::vector<std::size_t> NetworkModel::maskable_widths() const {
  std::vector<std::size_t> w;
  for (const auto& b : blocks) w.push_back(b.maskable_width());
  return w;
}

NamedTensors NetworkModel::named_parameters() const {
  NamedTensors out;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    for (std::size_t l = 0; l < blocks[b].layers.size(); ++l) {
      const std::string prefix = "block" + std::to_string(b) + ".layer" + std::to_string(l);
      out.emplace_back(prefix + ".weight", blocks[b].layers[l].weight);
      out.emplace_back(prefix + ".bias", blocks[b].layers[l].bias);
    }
  }
  out.emplace_back("head.weight", head.weight);
  out.emplace_back("head.bias", head.bias);
  return out;
}

std::vector<Tensor> NetworkModel::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

void NetworkModel::set_trainable(bool on) {
  for (auto& t : parameters()) t.set_requires_grad(on);
}

NetworkModel NetworkModel::clone() const {
  NetworkModel c = *this;
  for (auto& block : c.blocks) {
    for (auto& l : block.layers) {
      l.weight = l.weight.clone();
      l.bias = l.bias.clone();
    }
  }
  c.head.weight = head.weight.clone();
  c.head.bias = head.bias.clone();
  return c;
}

void NetworkModel::infer_dims() {
  if (blocks.size() < 2) throw ContractError(arch_id + ": a network needs at least 2 blocks");
  NoGradGuard guard;
  Dims batch{1};
  batch.insert(batch.end(), input_dims.begin(), input_dims.end());
  Tensor x(batch);
  dims_.clear();
  for (const auto& block : blocks) {
    dims_.push_back(per_sample(x));
    x = run_block(block, x, nullptr);
  }
  dims_.push_back(per_sample(x));
  if (x.rank() != 2 || x.dim(1) != head.weight.dim(1)) {
    throw ShapeError(arch_id + ": last block yields " + dims_str(x.dims()) + " but head expects width " +
                     std::to_string(head.weight.dim(1)));
  }
  if (head.weight.dim(0) != num_classes) throw ShapeError(arch_id + ": head width differs from num_classes");
}

NetworkModel build_lenet(std::size_t num_classes, std::uint64_t seed) {
  if (num_classes < 2) throw ConfigError("build_lenet: need at least 2 classes");
  Rng rng(seed, "init/lenet");
  NetworkModel net;
  net.arch_id = "lenet";
  net.num_classes = num_classes;
  net.blocks.push_back(Block{{make_conv(rng, 1, 6, 5, 2, true)}});
  net.blocks.push_back(Block{{make_conv(rng, 6, 16, 5, 0, true)}});
  net.blocks.push_back(Block{{make_dense(rng, 400, 120, true), make_dense(rng, 120, 84, true)}});
  net.head = make_dense(rng, 84, num_classes, false);
  net.meta.seed = seed;
  net.infer_dims();
  return net;
}

NetworkModel build_plaincnn(std::size_t num_classes, std::uint64_t seed) {
  if (num_classes < 2) throw ConfigError("build_plaincnn: need at least 2 classes");
  Rng rng(seed, "init/plaincnn");
  NetworkModel net;
  net.arch_id = "plaincnn";
  net.num_classes = num_classes;
  net.blocks.push_back(Block{{make_conv(rng, 1, 8, 3, 1, true)}});
  net.blocks.push_back(Block{{make_conv(rng, 8, 24, 3, 1, true)}});
  net.blocks.push_back(Block{{make_dense(rng, 24 * 7 * 7, 84, true)}});
  net.head = make_dense(rng, 84, num_classes, false);
  net.meta.seed = seed;
  net.infer_dims();
  return net;
}

NetworkModel build_toy(std::size_t num_classes, std::uint64_t seed) {
  if (num_classes < 2) throw ConfigError("build_toy: need at least 2 classes");
  Rng rng(seed, "init/toy");
  NetworkModel net;
  net.arch_id = "toy";
  net.num_classes = num_classes;
  net.input_dims = {1, 8, 8};
  net.blocks.push_back(Block{{make_conv(rng, 1, 3, 3, 1, true)}});
  net.blocks.push_back(Block{{make_conv(rng, 3, 4, 3, 1, true)}});
  net.blocks.push_back(Block{{make_dense(rng, 16, 6, true)}});
  net.head = make_dense(rng, 6, num_classes, false);
  net.meta.seed = seed;
  net.infer_dims();
  return net;
}

NetworkModel build_network(const std::string& arch_id, std::size_t num_classes, std::uint64_t seed) {
  if (arch_id == "lenet") return build_lenet(num_classes, seed);
  if (arch_id == "toy") return build_toy(num_classes, seed);
  if (arch_id == "plaincnn") return build_plaincnn(num_classes, seed);
  throw ConfigError("unknown architecture '" + arch_id + "'");
}

Tensor run_block(const Block& block, const Tensor& x, const Tensor* mask) {
  Tensor y = x;
  for (const auto& layer : block.layers) y = apply_layer(layer, y);
  if (mask) y = scale_channels(y, *mask);
  return y;
}

void validate_masks(const NetworkModel& net, const BlockMasks& masks) {
  if (masks.size() != net.depth()) {
    throw ShapeError("mask set has " + std::to_string(masks.size()) + " vectors for " +
                     std::to_string(net.depth()) + " blocks");
  }
  for (std::size_t b = 0; b < masks.size(); ++b) check_mask(net.blocks[b], masks[b], b);
}

BlockMasks ones_masks(const NetworkModel& net) {
  BlockMasks m;
  for (auto w : net.maskable_widths()) m.emplace_back(Dims{w}, 1.0);
  return m;
}

Tensor forward_prefix(const NetworkModel& net, const Tensor& x, std::size_t r) {
  if (r >= net.depth()) {
    throw ContractError("forward_prefix: R=" + std::to_string(r) + " outside [0," + std::to_string(net.depth() - 1) + "]");
  }
  if (per_sample(x) != net.input_dims) {
    throw ShapeError("forward_prefix: input dims " + dims_str(x.dims()) + " do not match " + dims_str(net.input_dims));
  }
  Tensor y = x;
  for (std::size_t b = 0; b < r; ++b) y = run_block(net.blocks[b], y, nullptr);
  return y;
}

Tensor forward_suffix(const NetworkModel& net, const Tensor& features, std::size_t r, const BlockMasks* masks) {
  if (r >= net.depth()) {
    throw ContractError("forward_suffix: R=" + std::to_string(r) + " outside [0," + std::to_string(net.depth() - 1) + "]");
  }
  if (per_sample(features) != net.block_input_dims(r)) {
    throw ShapeError("forward_suffix: features " + dims_str(features.dims()) + " do not fit block " +
                     std::to_string(r) + " input " + dims_str(net.block_input_dims(r)));
  }
  if (masks) validate_masks(net, *masks);
  Tensor y = features;
  for (std::size_t b = r; b < net.depth(); ++b) y = run_block(net.blocks[b], y, masks ? &(*masks)[b] : nullptr);
  return y;
}

Tensor forward_features(const NetworkModel& net, const Tensor& x, const BlockMasks* masks) {
  return forward_suffix(net, forward_prefix(net, x, 0), 0, masks);
}

Tensor apply_head(const Layer& head, const Tensor& features) { return apply_layer(head, features); }

Tensor forward(const NetworkModel& net, const Tensor& x, const BlockMasks* masks) {
  return apply_head(net.head, forward_features(net, x, masks));
}

NetworkModel frozen_copy(const NetworkModel& net) {
  NetworkModel copy = net.clone();
  copy.set_trainable(false);
  return copy;
}

std::size_t parameter_count(const NetworkModel& net) {
  std::size_t n = 0;
  for (const auto& t : net.parameters()) n += t.size();
  return n;
}

}  // namespace pnc
