#pragma once

// Brute-force reference implementations used to check the evaluation metrics.

#include <torch/torch.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "tipslab/image.hpp"

namespace testsupport {

/// Per-class IoU by scanning the whole image once per class.
inline double oracle_miou(const tipslab::LabelMap& pred, const tipslab::LabelMap& gt, int num_classes, bool ignore_bg) {
  double sum = 0.0;
  int present = 0;
  for (int c = ignore_bg ? 1 : 0; c < num_classes; ++c) {
    long inter = 0, uni = 0;
    for (std::size_t i = 0; i < gt.labels.size(); ++i) {
      if (ignore_bg && gt.labels[i] == 0) continue;
      const bool in_p = pred.labels[i] == c;
      const bool in_g = gt.labels[i] == c;
      inter += in_p && in_g;
      uni += in_p || in_g;
    }
    if (uni == 0) continue;
    sum += static_cast<double>(inter) / static_cast<double>(uni);
    ++present;
  }
  return present ? sum / present : 1.0;
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

inline std::vector<std::vector<double>> rows_of(const torch::Tensor& t) {
  auto c = t.to(torch::kFloat64).contiguous();
  std::vector<std::vector<double>> out(static_cast<std::size_t>(c.size(0)));
  for (std::int64_t i = 0; i < c.size(0); ++i) {
    const double* p = c.data_ptr<double>() + i * c.size(1);
    out[static_cast<std::size_t>(i)].assign(p, p + c.size(1));
  }
  return out;
}

/// Exhaustive cosine neighbours, majority vote, ties to the nearest tied class.
inline std::vector<int> oracle_knn(const torch::Tensor& queries, const torch::Tensor& gallery,
                                   const std::vector<int>& labels, int k) {
  const auto q = rows_of(queries), g = rows_of(gallery);
  std::vector<int> out;
  for (const auto& qi : q) {
    std::vector<std::pair<double, int>> d;
    for (std::size_t j = 0; j < g.size(); ++j) d.emplace_back(-cosine(qi, g[j]), static_cast<int>(j));
    std::sort(d.begin(), d.end());
    std::vector<int> votes(*std::max_element(labels.begin(), labels.end()) + 1, 0);
    for (int j = 0; j < k; ++j) ++votes[labels[d[j].second]];
    const int top = *std::max_element(votes.begin(), votes.end());
    for (int j = 0; j < k; ++j) {
      if (votes[labels[d[j].second]] == top) {
        out.push_back(labels[d[j].second]);
        break;
      }
    }
  }
  return out;
}

/// Recall@1 in both directions by explicit argmax over dot products.
inline std::pair<double, double> oracle_recall(const torch::Tensor& img, const torch::Tensor& txt) {
  const auto a = rows_of(img), b = rows_of(txt);
  const int n = static_cast<int>(a.size());
  auto dot = [](const std::vector<double>& x, const std::vector<double>& y) {
    return std::inner_product(x.begin(), x.end(), y.begin(), 0.0);
  };
  int i2t = 0, t2i = 0;
  for (int i = 0; i < n; ++i) {
    int best = 0;
    for (int j = 1; j < n; ++j) best = dot(a[i], b[j]) > dot(a[i], b[best]) ? j : best;
    i2t += best == i;
    best = 0;
    for (int j = 1; j < n; ++j) best = dot(a[j], b[i]) > dot(a[best], b[i]) ? j : best;
    t2i += best == i;
  }
  return {static_cast<double>(i2t) / n, static_cast<double>(t2i) / n};
}

/// Eigenvalues (descending) and sign-fixed projections of the top 3 principal
/// axes, from torch's symmetric eigensolver.
struct OraclePca {
  std::vector<double> eigenvalues;
  torch::Tensor projections;  ///< [N, min(3, D)]
};

inline OraclePca oracle_pca(const torch::Tensor& x) {
  auto c = x.to(torch::kFloat64);
  c = c - c.mean(0, true);
  const auto cov = c.t().matmul(c) / static_cast<double>(c.size(0));
  auto [evals, evecs] = torch::linalg_eigh(cov);
  evals = evals.flip(0);
  evecs = evecs.flip(1);
  OraclePca out;
  for (std::int64_t i = 0; i < evals.size(0); ++i) out.eigenvalues.push_back(evals[i].item<double>());
  const auto m = std::min<std::int64_t>(3, evecs.size(1));
  auto v = evecs.narrow(1, 0, m).clone();
  for (std::int64_t j = 0; j < m; ++j) {
    const auto arg = v.select(1, j).abs().argmax().item<std::int64_t>();
    if (v[arg][j].item<double>() < 0) v.select(1, j).neg_();
  }
  out.projections = c.matmul(v);
  return out;
}

}  // namespace testsupport
