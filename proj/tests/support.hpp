#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "pnc/data.hpp"
#include "pnc/graft.hpp"
#include "pnc/model.hpp"
#include "pnc/rng.hpp"
#include "pnc/surrogate.hpp"
#include "pnc/tensor.hpp"

namespace testing {

inline std::filesystem::path mnist_dir() {
  if (const char* env = std::getenv("PNC_MNIST_DIR")) return env;
  return "/root/data/mnist";
}

inline bool have_mnist() { return std::filesystem::exists(mnist_dir() / "train-labels-idx1-ubyte"); }

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("pnc_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline pnc::Tensor random_tensor(pnc::Dims dims, pnc::Rng& rng, double lo = -1.0, double hi = 1.0) {
  pnc::Tensor t(std::move(dims));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// Worst relative error between reverse-mode gradients and central
/// differences, |a - n| / max(|a|, |n|, 1e-3).
inline double fd_error(const std::function<pnc::Tensor()>& loss, std::vector<pnc::Tensor> leaves, double h = 1e-6) {
  for (auto& t : leaves) {
    t.zero_grad();
    t.set_requires_grad(true);
  }
  loss().backward();
  double worst = 0.0;
  for (auto& t : leaves) {
    std::vector<double> analytic(t.grad().begin(), t.grad().end());
    analytic.resize(t.size(), 0.0);  // untouched leaves carry no gradient
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double keep = t.data()[i];
      double up, down;
      {
        pnc::NoGradGuard guard;
        t.data()[i] = keep + h;
        up = loss().item();
        t.data()[i] = keep - h;
        down = loss().item();
      }
      t.data()[i] = keep;
      const double numeric = (up - down) / (2.0 * h);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-3});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
  }
  return worst;
}

/// Toy 8x8 digits: class k lights up a distinct stroke pattern plus noise.
inline pnc::LabeledDataset toy_dataset(const std::vector<int>& classes, std::size_t per_class, std::uint64_t seed) {
  pnc::Rng rng(seed);
  pnc::LabeledDataset ds;
  ds.height = 8;
  ds.width = 8;
  for (std::size_t n = 0; n < per_class; ++n) {
    for (int label : classes) {
      std::vector<double> img(64);
      for (std::size_t y = 0; y < 8; ++y) {
        for (std::size_t x = 0; x < 8; ++x) {
          const bool on = ((y + static_cast<std::size_t>(label)) % 4 == 0) || ((x * (label + 1)) % 5 == 0);
          img[y * 8 + x] = std::clamp((on ? 0.8 : 0.1) + 0.1 * rng.uniform(-1.0, 1.0), 0.0, 1.0);
        }
      }
      ds.push_back(img, label);
    }
  }
  return ds;
}

inline pnc::NetworkModel toy_net(const std::vector<int>& classes, std::uint64_t seed) {
  pnc::NetworkModel net = pnc::build_toy(classes.size(), seed);
  net.meta.classes = classes;
  return net;
}

/// Toy target over {0,1,2}, toy source over {3,4,5}, surrogates of source
/// output 0 (label 3) on `anchors`.
struct ToyClone {
  std::shared_ptr<const pnc::NetworkModel> target;
  std::shared_ptr<const pnc::NetworkModel> source;
  pnc::LabeledDataset anchors;
  pnc::LocalModelSet surrogates;
};

inline ToyClone toy_clone(std::uint64_t seed = 11, std::size_t anchors = 6) {
  ToyClone t;
  t.target = std::make_shared<const pnc::NetworkModel>(toy_net({0, 1, 2}, seed));
  t.source = std::make_shared<const pnc::NetworkModel>(toy_net({3, 4, 5}, seed + 1));
  t.anchors = toy_dataset({3}, anchors, seed + 2);
  const pnc::PatchGrid grid(2, 2, 8, 8);
  const pnc::LogitFn fn = [src = t.source](const pnc::Tensor& x) { return pnc::forward(*src, x); };
  t.surrogates = pnc::fit_set(fn, t.anchors, pnc::gen_masks(4, 12, seed + 3), grid, {0}, 1e-3, 0.5);
  t.surrogates.arch_id = "toy";
  return t;
}

}  // namespace testing
