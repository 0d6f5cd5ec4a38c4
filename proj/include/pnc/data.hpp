#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "pnc/tensor.hpp"

namespace pnc {

enum class Split { train, test };

/// Grayscale images with values in [0,1] and integer labels.
struct LabeledDataset {
  std::size_t height = 28;
  std::size_t width = 28;
  std::vector<double> pixels;  // size() * height * width, row-major per image
  std::vector<int> labels;
  Split split = Split::train;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return height * width; }
  std::span<const double> image(std::size_t i) const {
    return std::span<const double>(pixels).subspan(i * image_size(), image_size());
  }
  std::vector<int> classes() const;  // sorted distinct labels
  void push_back(std::span<const double> img, int label);
};

struct Mnist {
  LabeledDataset train;
  LabeledDataset test;
};

/// Reads one IDX image file (magic 0x00000803) and its label file (0x00000801).
LabeledDataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, Split split);

/// Reads the four standard MNIST IDX files from `dir`.
Mnist load_mnist(const std::filesystem::path& dir);

/// Keeps items whose label is in `classes`. With `remap`, labels become the
/// rank of the original label within the ascending class list.
LabeledDataset class_split(const LabeledDataset& ds, const std::vector<int>& classes, bool remap);

/// Stratified sample of round(fraction * n_c) items per class, shuffled by seed.
LabeledDataset subsample(const LabeledDataset& ds, double fraction, std::uint64_t seed);

/// N x 1 x H x W batch of the selected items.
Tensor make_batch(const LabeledDataset& ds, std::span<const std::size_t> indices);
Tensor image_tensor(std::span<const double> image, std::size_t height, std::size_t width);

/// Partition of an image into grid_rows x grid_cols rectangular patches.
/// Patch extents use ceiling division, so border patches may be smaller.
class PatchGrid {
 public:
  PatchGrid(std::size_t grid_rows, std::size_t grid_cols, std::size_t height = 28, std::size_t width = 28);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t patch_count() const { return rows_ * cols_; }
  std::size_t patch_height() const { return (height_ + rows_ - 1) / rows_; }
  std::size_t patch_width() const { return (width_ + cols_ - 1) / cols_; }
  std::size_t patch_of(std::size_t y, std::size_t x) const {
    return (y / patch_height()) * cols_ + x / patch_width();
  }

 private:
  std::size_t rows_, cols_, height_, width_;
};

/// Binary keep/drop decision per patch.
struct PatchMask {
  std::vector<std::uint8_t> bits;

  std::size_t size() const { return bits.size(); }
  std::size_t ones() const;
  double density() const { return static_cast<double>(ones()) / static_cast<double>(bits.size()); }
  bool operator==(const PatchMask&) const = default;
};

/// First mask all ones; the rest Bernoulli(0.5) per bit under `seed`.
std::vector<PatchMask> gen_masks(std::size_t patch_count, std::size_t count, std::uint64_t seed);

/// Pixels of dropped patches are replaced by 0.
constexpr double kPerturbBaseline = 0.0;
std::vector<double> perturb(std::span<const double> image, const PatchMask& mask, const PatchGrid& grid);

/// One perturbed copy of `image` per mask, as an N x 1 x H x W batch.
Tensor perturb_batch(std::span<const double> image, std::span<const PatchMask> masks, const PatchGrid& grid);

}  // namespace pnc
