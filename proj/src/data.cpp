#include "pnc/data.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "pnc/binary_io.hpp"
#include "pnc/errors.hpp"
#include "pnc/rng.hpp"

namespace pnc {

namespace {

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

std::uint32_t read_be32(std::string_view bytes, std::size_t offset, const std::string& ctx) {
  if (offset + 4 > bytes.size()) throw FormatError(ctx + ": truncated header");
  std::uint32_t v = 0;
  for (std::size_t i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(bytes[offset + i]);
  return v;
}

std::string hex_magic(std::uint32_t v) {
  char buf[11];
  std::snprintf(buf, sizeof buf, "0x%08x", v);
  return buf;
}

}  // namespace

std::vector<int> LabeledDataset::classes() const {
  std::set<int> s(labels.begin(), labels.end());
  return {s.begin(), s.end()};
}

void LabeledDataset::push_back(std::span<const double> img, int label) {
  if (img.size() != image_size()) throw ShapeError("dataset: image of " + std::to_string(img.size()) + " pixels");
  pixels.insert(pixels.end(), img.begin(), img.end());
  labels.push_back(label);
}

LabeledDataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, Split split) {
  const std::string img_bytes = read_file(images);
  const std::string lbl_bytes = read_file(labels);
  const std::string ictx = images.filename().string();
  const std::string lctx = labels.filename().string();

  const auto imagic = read_be32(img_bytes, 0, ictx);
  if (imagic != kImageMagic) {
    throw FormatError(ictx + ": bad magic " + hex_magic(imagic) + ", expected " + hex_magic(kImageMagic));
  }
  const auto count = read_be32(img_bytes, 4, ictx);
  const auto rows = read_be32(img_bytes, 8, ictx);
  const auto cols = read_be32(img_bytes, 12, ictx);
  if (rows == 0 || cols == 0) throw FormatError(ictx + ": zero image extent");
  const std::uint64_t need = 16 + static_cast<std::uint64_t>(count) * rows * cols;
  if (img_bytes.size() < need) {
    throw FormatError(ictx + ": truncated, " + std::to_string(img_bytes.size()) + " bytes for " +
                      std::to_string(count) + " images");
  }

  const auto lmagic = read_be32(lbl_bytes, 0, lctx);
  if (lmagic != kLabelMagic) {
    throw FormatError(lctx + ": bad magic " + hex_magic(lmagic) + ", expected " + hex_magic(kLabelMagic));
  }
  const auto lcount = read_be32(lbl_bytes, 4, lctx);
  if (lbl_bytes.size() < 8 + static_cast<std::uint64_t>(lcount)) {
    throw FormatError(lctx + ": truncated, " + std::to_string(lbl_bytes.size()) + " bytes for " +
                      std::to_string(lcount) + " labels");
  }
  if (lcount != count) {
    throw DataError("image/label count mismatch: " + std::to_string(count) + " images vs " +
                    std::to_string(lcount) + " labels");
  }

  LabeledDataset ds;
  ds.height = rows;
  ds.width = cols;
  ds.split = split;
  ds.pixels.resize(static_cast<std::size_t>(count) * rows * cols);
  for (std::size_t i = 0; i < ds.pixels.size(); ++i) {
    ds.pixels[i] = static_cast<unsigned char>(img_bytes[16 + i]) / 255.0;
  }
  ds.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const int label = static_cast<unsigned char>(lbl_bytes[8 + i]);
    if (label > 9) throw FormatError(lctx + ": label " + std::to_string(label) + " out of range");
    ds.labels[i] = label;
  }
  return ds;
}

Mnist load_mnist(const std::filesystem::path& dir) {
  return Mnist{
      load_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte", Split::train),
      load_idx(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte", Split::test),
  };
}

LabeledDataset class_split(const LabeledDataset& ds, const std::vector<int>& classes, bool remap) {
  if (classes.empty()) throw DataError("class_split: empty class set");
  std::vector<int> sorted = classes;
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  std::map<int, int> rank;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (sorted[i] < 0 || sorted[i] > 9) throw DataError("class_split: class " + std::to_string(sorted[i]) + " outside 0..9");
    rank[sorted[i]] = static_cast<int>(i);
  }
  LabeledDataset out;
  out.height = ds.height;
  out.width = ds.width;
  out.split = ds.split;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto it = rank.find(ds.labels[i]);
    if (it == rank.end()) continue;
    out.push_back(ds.image(i), remap ? it->second : ds.labels[i]);
  }
  return out;
}

LabeledDataset subsample(const LabeledDataset& ds, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw ConfigError("subsample: fraction " + std::to_string(fraction) + " outside (0,1]");
  }
  Rng rng(seed);
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.labels[i]].push_back(i);
  std::vector<std::size_t> chosen;
  for (auto& [label, idx] : by_class) {
    const auto keep = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(idx.size())));
    rng.shuffle(idx);
    chosen.insert(chosen.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(keep));
  }
  rng.shuffle(chosen);
  LabeledDataset out;
  out.height = ds.height;
  out.width = ds.width;
  out.split = ds.split;
  for (auto i : chosen) out.push_back(ds.image(i), ds.labels[i]);
  return out;
}

Tensor make_batch(const LabeledDataset& ds, std::span<const std::size_t> indices) {
  const std::size_t n = ds.image_size();
  Tensor out(Dims{indices.size(), 1, ds.height, ds.width});
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] >= ds.size()) throw ContractError("make_batch: index out of range");
    auto img = ds.image(indices[k]);
    std::copy(img.begin(), img.end(), out.data().begin() + static_cast<std::ptrdiff_t>(k * n));
  }
  return out;
}

Tensor image_tensor(std::span<const double> image, std::size_t height, std::size_t width) {
  return Tensor(Dims{1, 1, height, width}, std::vector<double>(image.begin(), image.end()));
}

PatchGrid::PatchGrid(std::size_t grid_rows, std::size_t grid_cols, std::size_t height, std::size_t width)
    : rows_(grid_rows), cols_(grid_cols), height_(height), width_(width) {
  if (rows_ == 0 || cols_ == 0 || rows_ > height_ || cols_ > width_) {
    throw ConfigError("patch grid " + std::to_string(rows_) + "x" + std::to_string(cols_) + " invalid for " +
                      std::to_string(height_) + "x" + std::to_string(width_) + " images");
  }
}

std::size_t PatchMask::ones() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

std::vector<PatchMask> gen_masks(std::size_t patch_count, std::size_t count, std::uint64_t seed) {
  if (patch_count == 0 || count == 0) throw ConfigError("gen_masks: patch count and mask count must be positive");
  Rng rng(seed);
  std::vector<PatchMask> out;
  out.reserve(count);
  out.push_back(PatchMask{std::vector<std::uint8_t>(patch_count, 1)});
  for (std::size_t k = 1; k < count; ++k) {
    PatchMask m{std::vector<std::uint8_t>(patch_count)};
    for (auto& b : m.bits) b = rng.coin() ? 1 : 0;
    out.push_back(std::move(m));
  }
  return out;
}

namespace {
void perturb_into(std::span<const double> image, const PatchMask& mask, const PatchGrid& grid, double* out) {
  if (mask.size() != grid.patch_count()) {
    throw ShapeError("perturb: mask of length " + std::to_string(mask.size()) + " for " +
                     std::to_string(grid.patch_count()) + " patches");
  }
  if (image.size() != grid.height() * grid.width()) {
    throw ShapeError("perturb: image of " + std::to_string(image.size()) + " pixels does not match the grid");
  }
  for (std::size_t y = 0; y < grid.height(); ++y) {
    for (std::size_t x = 0; x < grid.width(); ++x) {
      const std::size_t i = y * grid.width() + x;
      out[i] = mask.bits[grid.patch_of(y, x)] ? image[i] : kPerturbBaseline;
    }
  }
}
}  // namespace

std::vector<double> perturb(std::span<const double> image, const PatchMask& mask, const PatchGrid& grid) {
  std::vector<double> out(image.size());
  perturb_into(image, mask, grid, out.data());
  return out;
}

Tensor perturb_batch(std::span<const double> image, std::span<const PatchMask> masks, const PatchGrid& grid) {
  Tensor out(Dims{masks.size(), 1, grid.height(), grid.width()});
  const std::size_t n = grid.height() * grid.width();
  for (std::size_t k = 0; k < masks.size(); ++k) perturb_into(image, masks[k], grid, out.data().data() + k * n);
  return out;
}

}  // namespace pnc
