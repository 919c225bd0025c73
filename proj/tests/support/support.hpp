#pragma once

#include <torch/torch.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <functional>
#include <random>
#include <string>

#include "tipslab/model.hpp"

namespace testsupport {

/// Central finite differences of a scalar function of one double tensor.
inline torch::Tensor numeric_grad(const std::function<double(const torch::Tensor&)>& f, const torch::Tensor& x,
                                  double h = 1e-6) {
  auto base = x.detach().clone().to(torch::kFloat64).contiguous();
  auto g = torch::zeros_like(base);
  auto* p = base.data_ptr<double>();
  auto* gp = g.data_ptr<double>();
  for (std::int64_t i = 0; i < base.numel(); ++i) {
    const double orig = p[i];
    p[i] = orig + h;
    const double fp = f(base);
    p[i] = orig - h;
    const double fm = f(base);
    p[i] = orig;
    gp[i] = (fp - fm) / (2 * h);
  }
  return g;
}

inline double relative_error(const torch::Tensor& a, const torch::Tensor& b) {
  const double num = (a - b).norm().item<double>();
  const double den = std::max(1e-12, std::max(a.norm().item<double>(), b.norm().item<double>()));
  return num / den;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("tipslab_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

/// Closed-form parameter counts of each module, written out layer by layer.
struct HandCount {
  std::int64_t encoder = 0;
  std::int64_t text = 0;
  std::int64_t head = 0;
};

inline std::int64_t block_params(std::int64_t d, std::int64_t ratio) {
  const std::int64_t norms = 4 * d;
  const std::int64_t attn = (3 * d * d + 3 * d) + (d * d + d);
  const std::int64_t mlp = (d * ratio * d + ratio * d) + (ratio * d * d + d);
  return norms + attn + mlp;
}

inline HandCount hand_count(const tipslab::model::ModelConfig& c, std::int64_t vocab_size) {
  HandCount h;
  const auto& im = c.image;
  const std::int64_t d = im.embed_dim, p = im.patch_size;
  h.encoder = (3 * p * p * d + d) + 2 * d + 2 * d + std::int64_t{im.pos_rows} * im.pos_cols * d + d +
              im.depth * block_params(d, im.mlp_ratio) + 2 * d + d * im.proj_dim;
  const auto& tx = c.text;
  const std::int64_t e = tx.embed_dim;
  h.text = vocab_size * e + tx.max_len * e + tx.depth * block_params(e, tx.mlp_ratio) + 2 * e + e * tx.proj_dim;
  const auto& hd = c.head;
  h.head = (std::int64_t{hd.in_dim} * hd.hidden_dim + hd.hidden_dim) +
           (std::int64_t{hd.hidden_dim} * hd.hidden_dim + hd.hidden_dim) +
           (std::int64_t{hd.hidden_dim} * hd.bottleneck_dim + hd.bottleneck_dim) +
           std::int64_t{hd.bottleneck_dim} * hd.prototypes;
  return h;
}

}  // namespace testsupport
