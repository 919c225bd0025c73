#include "tipslab/objectives.hpp"

#include <algorithm>
#include <cmath>

#include "tipslab/errors.hpp"

namespace tipslab::objectives {

namespace {

CropParams random_resized_crop(int height, int width, double min_area, double max_area, const ViewConfig& cfg,
                               int out_size, Rng& rng) {
  const double area = static_cast<double>(height) * width;
  CropParams p;
  p.out_size = out_size;
  bool found = false;
  for (int attempt = 0; attempt < 10 && !found; ++attempt) {
    const double target = area * rng.uniform(min_area, max_area);
    const double aspect = std::exp(rng.uniform(std::log(cfg.min_aspect), std::log(cfg.max_aspect)));
    const double w = std::sqrt(target * aspect);
    const double h = std::sqrt(target / aspect);
    if (w <= width && h <= height) {
      p.box = {rng.uniform(0.0, width - w), rng.uniform(0.0, height - h), w, h};
      found = true;
    }
  }
  if (!found) {
    // Square crop of the largest admissible area, centered.
    const double side = std::min({std::sqrt(area * max_area), static_cast<double>(width), static_cast<double>(height)});
    p.box = {(width - side) / 2, (height - side) / 2, side, side};
  }
  p.flip = rng.bernoulli(cfg.flip_prob);
  return p;
}

}  // namespace

ViewSet sample_views(const ImageF& image, int num_local, const ViewConfig& cfg, Rng& rng) {
  if (num_local < 0) throw ValidationError("local crop count must be >= 0");
  if (cfg.local_size >= cfg.global_size) throw ValidationError("local resolution must be below global resolution");
  if (image.height < cfg.local_size || image.width < cfg.local_size) {
    throw ValidationError("image is smaller than the local crop resolution");
  }
  ViewSet views;
  auto g = random_resized_crop(image.height, image.width, cfg.global_min_area, cfg.global_max_area, cfg,
                               cfg.global_size, rng);
  views.global_view = crop_resize(image, g.box, g.out_size, g.out_size, g.flip);
  views.crop_params.push_back(g);
  for (int i = 0; i < num_local; ++i) {
    auto l = random_resized_crop(image.height, image.width, cfg.local_min_area, cfg.local_max_area, cfg,
                                 cfg.local_size, rng);
    views.local_views.push_back(crop_resize(image, l.box, l.out_size, l.out_size, l.flip));
    views.crop_params.push_back(l);
  }
  return views;
}

// ---------------------------------------------------------------------------

int MaskVector::count() const { return static_cast<int>(std::count(m.begin(), m.end(), std::uint8_t{1})); }

MaskVector sample_mask(int n, double ratio, Rng& rng) {
  if (n < 0) throw ValidationError("mask length must be >= 0");
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ValidationError("mask ratio must lie in [0, 1]");
  MaskVector mask;
  mask.ratio = ratio;
  const auto ones = static_cast<std::size_t>(std::llround(ratio * n));
  mask.m.assign(static_cast<std::size_t>(n), 0);
  std::fill_n(mask.m.begin(), ones, std::uint8_t{1});
  rng.shuffle(mask.m);
  return mask;
}

MaskVector complement(const MaskVector& mask) {
  MaskVector c;
  c.ratio = 1.0 - mask.ratio;
  c.m.reserve(mask.m.size());
  for (auto v : mask.m) c.m.push_back(static_cast<std::uint8_t>(1 - v));
  return c;
}

torch::Tensor mask_tensor(const std::vector<MaskVector>& masks) {
  if (masks.empty()) return torch::zeros({0, 0}, torch::kBool);
  const auto n = masks.front().size();
  auto out = torch::zeros({static_cast<std::int64_t>(masks.size()), n}, torch::kUInt8);
  auto acc = out.accessor<std::uint8_t, 2>();
  for (std::size_t b = 0; b < masks.size(); ++b) {
    if (masks[b].size() != n) throw ValidationError("masks in a batch must share a length");
    for (int i = 0; i < n; ++i) acc[static_cast<std::int64_t>(b)][i] = masks[b].m[static_cast<std::size_t>(i)];
  }
  return out.to(torch::kBool);
}

// ---------------------------------------------------------------------------

CaptionStrategy CaptionStrategy::defaults(CaptionMode mode) {
  using G = synth::Granularity;
  CaptionStrategy s;
  s.mode = mode;
  switch (mode) {
    case CaptionMode::one_cls_pool:
      s.pool1 = {G::short_caption, G::medium_caption, G::long_caption};
      s.pool2 = {};
      break;
    case CaptionMode::two_cls_fixed:
      s.pool1 = {G::short_caption};
      s.pool2 = {G::medium_caption};
      break;
    case CaptionMode::two_cls_sampled:
      s.pool1 = {G::short_caption};
      s.pool2 = {G::medium_caption, G::long_caption};
      break;
  }
  return s;
}

void CaptionStrategy::validate() const {
  if (pool1.empty()) throw ValidationError("caption pool for the first CLS token is empty");
  if (uses_second_cls() && pool2.empty()) throw ValidationError("caption pool for the second CLS token is empty");
  if (mode == CaptionMode::two_cls_fixed && (pool1.size() != 1 || pool2.size() != 1)) {
    throw ValidationError("two_cls_fixed requires exactly one caption source per CLS token");
  }
}

namespace {

synth::Granularity draw(const std::vector<synth::Granularity>& pool, Rng& rng) {
  if (pool.size() == 1) return pool.front();
  return pool[static_cast<std::size_t>(rng.below(pool.size()))];
}

}  // namespace

CaptionChoice sample_caption_choice(const CaptionStrategy& strategy, Rng& rng) {
  strategy.validate();
  CaptionChoice c;
  c.cls1 = draw(strategy.pool1, rng);
  if (strategy.uses_second_cls()) c.cls2 = draw(strategy.pool2, rng);
  return c;
}

const std::string& caption_text(const synth::CaptionTriplet& captions, synth::Granularity g) {
  switch (g) {
    case synth::Granularity::short_caption:
      return captions.short_text;
    case synth::Granularity::medium_caption:
      return captions.medium_text;
    default:
      return captions.long_text;
  }
}

std::pair<std::string, std::optional<std::string>> sample_caption_pair(const synth::CaptionTriplet& captions,
                                                                       const CaptionStrategy& strategy, Rng& rng) {
  const auto choice = sample_caption_choice(strategy, rng);
  std::optional<std::string> second;
  if (choice.cls2) second = caption_text(captions, *choice.cls2);
  return {caption_text(captions, choice.cls1), second};
}

// ---------------------------------------------------------------------------

torch::Tensor clip_loss(const torch::Tensor& img, const torch::Tensor& txt, const torch::Tensor& logit_scale) {
  if (img.dim() != 2 || txt.dim() != 2) throw ValidationError("clip_loss expects [B, D] embeddings");
  if (img.size(0) != txt.size(0)) throw ValidationError("clip_loss batch sizes differ");
  if (img.size(0) == 0) throw ValidationError("clip_loss needs a non-empty batch");
  if (img.size(1) != txt.size(1)) throw ValidationError("clip_loss embedding widths differ");
  auto logits = logit_scale * torch::matmul(img, txt.t());
  auto labels = torch::arange(img.size(0), torch::TensorOptions().dtype(torch::kLong));
  auto i2t = torch::nll_loss(torch::log_softmax(logits, 1), labels);
  auto t2i = torch::nll_loss(torch::log_softmax(logits.t(), 1), labels);
  return 0.5 * (i2t + t2i);
}

torch::Tensor clip_loss(const torch::Tensor& img, const torch::Tensor& txt, double logit_scale) {
  return clip_loss(img, txt, torch::tensor(logit_scale, img.options()));
}

torch::Tensor token_cross_entropy(const torch::Tensor& teacher, const torch::Tensor& student) {
  if (teacher.sizes() != student.sizes()) throw ValidationError("teacher and student distributions differ in shape");
  return -(teacher.detach() * torch::log(torch::clamp_min(student, kLogFloor))).sum(-1);
}

torch::Tensor dino_loss(const torch::Tensor& teacher, const std::vector<torch::Tensor>& students) {
  if (teacher.dim() != 2) throw ValidationError("dino_loss expects [B, K] distributions");
  auto total = torch::zeros({teacher.size(0)}, teacher.options());
  for (const auto& s : students) {
    if (s.dim() != 2 || s.size(1) != teacher.size(1)) throw ValidationError("dino_loss prototype count K mismatch");
    if (s.size(0) != teacher.size(0)) throw ValidationError("dino_loss batch size mismatch");
    total = total + token_cross_entropy(teacher, s);
  }
  return total.mean();
}

torch::Tensor ibot_loss(const torch::Tensor& teacher, const torch::Tensor& student, const torch::Tensor& mask) {
  if (teacher.dim() != 3) throw ValidationError("ibot_loss expects [B, N, K] distributions");
  if (mask.dim() != 2 || mask.size(0) != teacher.size(0) || mask.size(1) != teacher.size(1)) {
    throw ValidationError("ibot_loss mask length does not match the token count");
  }
  auto ce = token_cross_entropy(teacher, student);
  return (ce * mask.to(ce.dtype())).sum(-1).mean();
}

torch::Tensor ibot_pp_loss(const torch::Tensor& teacher, const torch::Tensor& student) {
  if (teacher.dim() != 3) throw ValidationError("ibot_pp_loss expects [B, N, K] distributions");
  return token_cross_entropy(teacher, student).sum(-1).mean();
}

void LossWeights::validate() const {
  if (!(alpha >= 0) || !(beta >= 0)) throw ValidationError("loss weights alpha and beta must be >= 0");
}

namespace {

void require_finite(double v, const char* name) {
  if (!std::isfinite(v)) throw NumericError(std::string("non-finite loss component '") + name + "'");
}

}  // namespace

torch::Tensor combined_loss(const torch::Tensor& clip, const torch::Tensor& dino, const torch::Tensor& patch,
                            const LossWeights& w) {
  require_finite(clip.item<double>(), "clip");
  require_finite(dino.item<double>(), "dino");
  require_finite(patch.item<double>(), "patch");
  return clip + w.alpha * dino + w.beta * patch;
}

double combined_loss(double clip, double dino, double patch, const LossWeights& w) {
  require_finite(clip, "clip");
  require_finite(dino, "dino");
  require_finite(patch, "patch");
  return clip + w.alpha * dino + w.beta * patch;
}

torch::Tensor update_center(const torch::Tensor& center, const torch::Tensor& teacher_logits, double momentum) {
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ValidationError("center momentum must lie in [0, 1)");
  if (teacher_logits.numel() == 0) throw ValidationError("update_center needs a non-empty batch");
  const auto k = center.size(-1);
  if (teacher_logits.size(-1) != k) throw ValidationError("teacher logits width differs from center");
  auto mean = teacher_logits.detach().reshape({-1, k}).mean(0);
  return momentum * center + (1.0 - momentum) * mean;
}

}  // namespace tipslab::objectives
