#pragma once

// Losses and sampling procedures of the combined contrastive + self-distillation
// recipe. Prototype distributions are [..., K] probability tensors; teacher
// inputs are always detached inside the losses.

#include <torch/torch.h>

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tipslab/image.hpp"
#include "tipslab/rng.hpp"
#include "tipslab/synthdata.hpp"

namespace tipslab::objectives {

/// Floor applied to student probabilities before the log.
inline constexpr double kLogFloor = 1e-8;

// ---------------------------------------------------------------------------
// Multi-crop views

struct ViewConfig {
  int global_size = 64;
  int local_size = 32;
  double global_min_area = 0.4;
  double global_max_area = 1.0;
  double local_min_area = 0.05;
  double local_max_area = 0.4;
  double min_aspect = 3.0 / 4.0;
  double max_aspect = 4.0 / 3.0;
  double flip_prob = 0.5;
};

struct CropParams {
  CropBox box;
  bool flip = false;
  int out_size = 0;
};

struct ViewSet {
  ImageF global_view;
  std::vector<ImageF> local_views;
  std::vector<CropParams> crop_params;  ///< global first, then locals
};

/// One global crop and M local crops, each a random resized crop with a
/// horizontal flip drawn with probability flip_prob.
ViewSet sample_views(const ImageF& image, int num_local, const ViewConfig& cfg, Rng& rng);

// ---------------------------------------------------------------------------
// Patch masks

struct MaskVector {
  std::vector<std::uint8_t> m;  ///< 1 = masked
  double ratio = 0.0;

  int size() const { return static_cast<int>(m.size()); }
  int count() const;
};

/// Exactly round(ratio * n) masked positions, uniformly placed by shuffling.
MaskVector sample_mask(int n, double ratio, Rng& rng);
MaskVector complement(const MaskVector& mask);

/// Stacks per-sample masks into a bool [B, N] tensor.
torch::Tensor mask_tensor(const std::vector<MaskVector>& masks);

// ---------------------------------------------------------------------------
// Caption strategies

enum class CaptionMode { one_cls_pool, two_cls_fixed, two_cls_sampled };

struct CaptionStrategy {
  CaptionMode mode = CaptionMode::two_cls_sampled;
  std::vector<synth::Granularity> pool1 = {synth::Granularity::short_caption};
  std::vector<synth::Granularity> pool2 = {synth::Granularity::medium_caption, synth::Granularity::long_caption};

  /// Default pools for each mode: one CLS over {short, medium, long};
  /// two CLS fixed (short / medium); two CLS sampled (short / {medium, long}).
  static CaptionStrategy defaults(CaptionMode mode);
  bool uses_second_cls() const { return mode != CaptionMode::one_cls_pool; }
  void validate() const;
};

struct CaptionChoice {
  synth::Granularity cls1 = synth::Granularity::short_caption;
  std::optional<synth::Granularity> cls2;
};

CaptionChoice sample_caption_choice(const CaptionStrategy& strategy, Rng& rng);

const std::string& caption_text(const synth::CaptionTriplet& captions, synth::Granularity g);

std::pair<std::string, std::optional<std::string>> sample_caption_pair(const synth::CaptionTriplet& captions,
                                                                       const CaptionStrategy& strategy, Rng& rng);

// ---------------------------------------------------------------------------
// Losses

/// Symmetric InfoNCE over a B x B similarity matrix; diagonal entries are
/// the positive pairs.
torch::Tensor clip_loss(const torch::Tensor& img, const torch::Tensor& txt, const torch::Tensor& logit_scale);
torch::Tensor clip_loss(const torch::Tensor& img, const torch::Tensor& txt, double logit_scale);

/// Global self-distillation: batch mean of -sum_i teacher . log(student_i)
/// summed over the M local crops. teacher, student_i: [B, K].
torch::Tensor dino_loss(const torch::Tensor& teacher, const std::vector<torch::Tensor>& students);

/// Per-token cross-entropy -teacher . log(student): [B, N, K] -> [B, N].
torch::Tensor token_cross_entropy(const torch::Tensor& teacher, const torch::Tensor& student);

/// Masked-token MIM loss: batch mean of -sum_i m_i teacher_i . log(student_i).
/// mask: [B, N] bool or 0/1.
torch::Tensor ibot_loss(const torch::Tensor& teacher, const torch::Tensor& student, const torch::Tensor& mask);

/// All-token MIM loss: batch mean of -sum_i teacher_i . log(student_i).
torch::Tensor ibot_pp_loss(const torch::Tensor& teacher, const torch::Tensor& student);

struct LossWeights {
  double alpha = 1.0;  ///< DINO weight
  double beta = 2.0;   ///< patch-loss weight

  void validate() const;
};

/// clip + alpha * dino + beta * patch. Throws NumericError naming the first
/// non-finite component.
torch::Tensor combined_loss(const torch::Tensor& clip, const torch::Tensor& dino, const torch::Tensor& patch,
                            const LossWeights& w);
double combined_loss(double clip, double dino, double patch, const LossWeights& w);

/// center <- momentum * center + (1 - momentum) * mean(teacher_logits),
/// averaging over all leading dimensions.
torch::Tensor update_center(const torch::Tensor& center, const torch::Tensor& teacher_logits, double momentum);

}  // namespace tipslab::objectives
