#pragma once

// Frozen-encoder evaluation: zero-shot segmentation, mIoU, KNN, retrieval
// recall@1, linear patch probe, PCA maps and patch-loss curves.

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"
#include "tipslab/image.hpp"
#include "tipslab/synthdata.hpp"
#include "tipslab/trainer.hpp"

namespace tipslab::eval {

struct ClassPromptSet {
  std::vector<std::string> names;       ///< prompt text per entry
  std::vector<int> class_ids;           ///< class-table index per entry
  std::string prompt_template = "{}";   ///< `{}` is replaced by the class name
  bool include_background = false;
  torch::Tensor embeddings;             ///< [C, P] unit rows
};

std::string apply_template(const std::string& tmpl, const std::string& name);

/// Encodes every object class (and background when requested) with the
/// model's text tower.
ClassPromptSet build_prompts(trainer::TrainedModel& model, bool include_background,
                             const std::string& prompt_template = "{}");

struct SegPrediction {
  LabelMap pixels;               ///< class-table indices, H x W
  std::vector<int> patch_labels; ///< row-major grid
  int grid_rows = 0;
  int grid_cols = 0;
  torch::Tensor scores;          ///< [N, C] cosine similarities
};

/// Cosine argmax of patch features against the prompt embeddings, then
/// nearest upsampling of the patch grid to out_h x out_w. patch_features:
/// [rows * cols, P]; prompt embeddings need not be normalized.
SegPrediction segment_features(const torch::Tensor& patch_features, int rows, int cols, const ClassPromptSet& prompts,
                               int out_h, int out_w);

/// Last-layer value embeddings of `image`, mapped to the text space, labeled
/// by segment_features at the image's resolution.
SegPrediction zero_shot_segment(const ImageF& image, const ClassPromptSet& prompts, trainer::TrainedModel& model);

/// Nearest-neighbour resample of a label grid.
LabelMap upsample_nearest(const std::vector<int>& grid, int rows, int cols, int out_h, int out_w);

// ---------------------------------------------------------------------------
// mIoU

/// Per-class intersection and union counts, mergeable across images.
struct IouCounts {
  std::vector<std::int64_t> intersection;
  std::vector<std::int64_t> union_;
  std::vector<std::int64_t> present;  ///< pixels of the class in gt or pred

  explicit IouCounts(int num_classes = 0)
      : intersection(num_classes, 0), union_(num_classes, 0), present(num_classes, 0) {}

  /// ignore_background drops gt-background pixels and the background class.
  void add(const LabelMap& pred, const LabelMap& gt, bool ignore_background);
  void merge(const IouCounts& other);
  /// Mean IoU over classes present in gt or pred; 1.0 when none is.
  double miou(bool ignore_background) const;
};

double miou(const LabelMap& pred, const LabelMap& gt, int num_classes, bool ignore_background);

// ---------------------------------------------------------------------------
// KNN and retrieval

/// Cosine k-NN with majority vote; ties between classes go to the class of
/// the nearest neighbour among the tied ones.
std::vector<int> knn_classify(const torch::Tensor& queries, const torch::Tensor& gallery,
                              const std::vector<int>& gallery_labels, int k);

struct Recall {
  double i2t = 0.0;
  double t2i = 0.0;
};

Recall retrieval_recall_at_1(const torch::Tensor& image_embs, const torch::Tensor& text_embs);

// ---------------------------------------------------------------------------
// Linear probe

struct ProbeOptions {
  double l2 = 1e-4;
  double tolerance = 1e-6;  ///< relative change in objective
  int max_iterations = 500;
};

struct ProbeResult {
  double miou = 0.0;
  std::vector<int> predictions;
  std::vector<int> excluded_classes;  ///< absent from the training labels
  std::vector<std::string> warnings;
  int iterations = 0;
  double objective = 0.0;
};

/// Multinomial logistic regression on frozen patch features (standardized
/// with train statistics), fit by L-BFGS until the objective changes by less
/// than the tolerance; scored with mIoU at patch resolution.
ProbeResult linear_patch_probe(const torch::Tensor& train_features, const std::vector<int>& train_labels,
                               const torch::Tensor& test_features, const std::vector<int>& test_labels,
                               int num_classes, const ProbeOptions& options = {});

/// Majority label of each patch (ties go to the smaller label).
std::vector<int> patch_majority_labels(const LabelMap& mask, int patch_size);

// ---------------------------------------------------------------------------
// PCA maps

struct PcaMap {
  ImageF grid;                     ///< rows x cols, 3 channels in [0, 1]
  std::vector<double> eigenvalues; ///< all eigenvalues, descending
  torch::Tensor components;        ///< [N, 3] projections (0 for missing ranks)
  int rank = 0;                    ///< number of non-degenerate channels
};

/// PCA over the patches of one image. Component signs are fixed so the
/// largest-magnitude loading of every eigenvector is positive. Missing ranks
/// give constant 0.5 channels.
PcaMap pca_map(const torch::Tensor& patch_embeddings, int rows, int cols);

/// Nearest upsample of a PCA grid to out_h x out_w.
ImageF upsample_image(const ImageF& grid, int out_h, int out_w);

// ---------------------------------------------------------------------------
// Patch-loss telemetry

struct PatchLossCurve {
  std::string label;
  std::vector<std::int64_t> steps;
  std::vector<double> visible;
  std::vector<double> masked;
};

/// Reads loss/patch_visible and loss/patch_masked from a metrics stream;
/// missing keys are a ValidationError.
PatchLossCurve read_patch_loss_curve(const std::filesystem::path& metrics, const std::string& label);
void write_patch_loss_csv(const PatchLossCurve& curve, const std::filesystem::path& path);
void write_patch_loss_svg(const std::vector<PatchLossCurve>& curves, const std::filesystem::path& path);

/// Curves of one run written to out_dir/patch_loss.{csv,svg}.
PatchLossCurve patch_loss_report(const std::filesystem::path& metrics, const std::filesystem::path& out_dir,
                                 const std::string& label);

// ---------------------------------------------------------------------------
// Full report

struct EvalReport {
  double zero_shot_miou_with_background = 0.0;
  double zero_shot_miou_without_background = 0.0;
  double knn_top1 = 0.0;
  double i2t_r1 = 0.0;
  double t2i_r1 = 0.0;
  double probe_miou = 0.0;

  nlohmann::ordered_json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
};

/// Class of the short caption's object (the largest one in the scene).
int primary_class(const synth::CaptionTriplet& captions);

/// Runs every protocol on the run's final checkpoint over the holdout split,
/// writing eval/report.json, PCA PNGs and patch-loss curves under run_dir/eval.
EvalReport evaluate_checkpoint(const std::filesystem::path& checkpoint, const trainer::RunConfig& config,
                               const synth::Dataset& dataset, const std::filesystem::path& out_dir,
                               const std::filesystem::path& metrics = {});

EvalReport evaluate_run(const std::filesystem::path& run_dir, const trainer::RunConfig& config,
                        const synth::Dataset& dataset);

EvalReport read_report(const std::filesystem::path& path);

}  // namespace tipslab::eval
