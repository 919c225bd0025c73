#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "tipslab/ema.hpp"
#include "tipslab/model.hpp"
#include "tipslab/objectives.hpp"
#include "tipslab/synthdata.hpp"

namespace tipslab::trainer {

enum class Mode { pretrain, distill };
enum class PatchObjective { ibot, ibot_pp };
enum class InitSource { random, checkpoint };

struct ResolutionSchedule {
  int stage1_global = 32;
  int stage1_local = 16;
  int stage2_global = 64;
  int stage2_local = 32;
  std::int64_t switch_step = -1;  ///< -1: 90% of the run; == steps: single stage

  std::int64_t resolved_switch(std::int64_t steps) const;
};

struct OptimizerConfig {
  std::string name = "adamw";  ///< adamw | adafactor
  double lr = 1e-3;
  double min_lr = 1e-5;
  double warmup_fraction = 0.05;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct InitConfig {
  InitSource student_encoder = InitSource::random;
  InitSource text = InitSource::random;
  bool text_frozen = false;
  std::string checkpoint;  ///< source for `checkpoint` inits; defaults to the teacher checkpoint
};

struct DataConfig {
  std::string dir = "data/synth";
  double holdout_fraction = 0.1;  ///< tail of the dataset reserved for evaluation
  int count = 5000;               ///< generation parameters used by `synth`
  int canvas = 64;
  std::uint64_t seed = 0;
};

struct EvalConfig {
  int knn_k = 10;
  int gallery_size = 2000;
  int query_size = 500;
  int probe_train_images = 1000;
  double probe_l2 = 1e-4;
  int pca_images = 4;
  std::string retrieval_caption = "medium";  ///< short | medium | long
  std::string prompt_template = "{}";        ///< class-name prompt, `{}` is the name
};

struct RunConfig {
  int schema_version = 1;
  std::string name = "run";
  Mode mode = Mode::pretrain;
  PatchObjective patch_objective = PatchObjective::ibot_pp;
  double mask_ratio = 0.75;
  ema::EmaConfig ema;
  objectives::CaptionStrategy caption_strategy;
  objectives::LossWeights loss_weights;
  int local_crops = 6;
  ResolutionSchedule resolutions;
  OptimizerConfig optimizer;
  InitConfig init;
  std::string teacher_checkpoint;
  std::int64_t steps = 10000;
  int batch_size = 64;
  std::uint64_t seed = 0;
  model::ModelConfig model;
  double student_temperature = 0.1;
  double teacher_temperature = 0.04;
  double center_momentum = 0.9;
  double logit_scale_init = 1.0 / 0.07;
  double logit_scale_max = 100.0;
  std::int64_t checkpoint_every = 1000;  ///< 0 disables periodic checkpoints
  int threads = 1;
  DataConfig data;
  EvalConfig eval;

  /// RunConfig invariants; throws ValidationError naming the field.
  void validate() const;
  /// Model config with the position grid matched to the stage-1 resolution.
  model::ModelConfig resolved_model() const;
};

/// HWC [0, 1] image to a normalized [3, H, W] encoder input.
torch::Tensor image_tensor(const ImageF& img);

/// Per-step telemetry with fixed keys, in emission order.
using StepMetrics = std::vector<std::pair<std::string, double>>;
nlohmann::ordered_json to_json(const StepMetrics& m);
double metric(const StepMetrics& m, const std::string& key);

// ---------------------------------------------------------------------------
// Optimizers (state keyed by stable parameter names)

struct NamedParam {
  std::string name;
  torch::Tensor tensor;
};

class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual void step(double lr) = 0;
  void zero_grad();
  /// Drops the state of one parameter (after its shape changed).
  void reset_state(const std::string& name);
  void save(model::Checkpoint& ckpt) const;
  void load(const model::Checkpoint& ckpt);
  const std::vector<NamedParam>& params() const { return params_; }
  std::int64_t steps_taken() const { return t_; }

 protected:
  Optimizer(OptimizerConfig cfg, std::vector<NamedParam> params) : cfg_(std::move(cfg)), params_(std::move(params)) {}
  bool decays(const NamedParam& p) const;

  OptimizerConfig cfg_;
  std::vector<NamedParam> params_;
  std::map<std::string, std::map<std::string, torch::Tensor>> state_;
  std::int64_t t_ = 0;
};

/// Decoupled-weight-decay Adam or Adafactor (factored second moments, no
/// first moment, update clipping). Unknown names throw ValidationError.
std::unique_ptr<Optimizer> build_optimizer(const OptimizerConfig& config, std::vector<NamedParam> params);

/// Linear warmup to the peak, then cosine decay to min_lr at the last step.
double learning_rate(const OptimizerConfig& config, std::int64_t step, std::int64_t total_steps);

// ---------------------------------------------------------------------------
// Training state

struct StudentModel {
  model::ImageEncoder encoder{nullptr};
  model::ProjectionHead head{nullptr};
  model::TextEncoder text{nullptr};
  torch::Tensor log_logit_scale;

  ema::StudentModules modules() const { return {encoder, head}; }
  double logit_scale() const { return std::exp(log_logit_scale.item<double>()); }
};

struct TrainState {
  StudentModel student;
  ema::TeacherView teacher;
  torch::Tensor center_global;  ///< [K]
  torch::Tensor center_patch;   ///< [K]
  std::unique_ptr<Optimizer> optimizer;
  std::int64_t step = 0;
  int stage = 1;
};

/// Dataset plus pre-tokenized captions and the train/holdout split.
class TrainData {
 public:
  TrainData(std::shared_ptr<const synth::Dataset> dataset, const RunConfig& config);

  const synth::Dataset& dataset() const { return *dataset_; }
  const model::Vocab& vocab() const { return vocab_; }
  const std::vector<int>& train_indices() const { return train_; }
  const std::vector<int>& holdout_indices() const { return holdout_; }
  const model::TokenizedText& tokens(int sample, synth::Granularity g) const;

  /// Sample indices for a step: epoch-wise shuffles of the train split keyed
  /// by (seed, epoch), so any step's batch is computable without history.
  std::vector<int> batch_indices(std::int64_t step, int batch_size, std::uint64_t seed) const;

 private:
  std::shared_ptr<const synth::Dataset> dataset_;
  model::Vocab vocab_;
  std::vector<std::array<model::TokenizedText, 3>> tokens_;
  std::vector<int> train_;
  std::vector<int> holdout_;
  mutable std::map<std::pair<std::uint64_t, std::int64_t>, std::vector<int>> epoch_cache_;
};

struct Batch {
  std::int64_t step = 0;
  std::vector<int> indices;
};

Batch make_batch(const TrainData& data, const RunConfig& config, std::int64_t step);

/// Fresh state: seeded student init (or checkpoint inits in distill mode),
/// teacher per the EMA scope, zero centers, optimizer.
TrainState init_state(const RunConfig& config, const TrainData& data);

/// Loss tensors of one step before any parameter update. Exposed so the
/// gradient structure can be inspected.
struct StepTensors {
  torch::Tensor clip, dino, patch, total;
  torch::Tensor patch_masked, patch_visible;  ///< detached telemetry
  torch::Tensor student_patches;              ///< [B, N, D] student patch states (graph node)
  torch::Tensor mask;                         ///< [B, N] bool
  torch::Tensor teacher_cls_logits, teacher_patch_logits;
  double truncated_fraction = 0.0;
};

StepTensors compute_step_losses(const Batch& batch, TrainState& state, const RunConfig& config, const TrainData& data);

/// One optimization step in pretraining mode: losses, optimizer step, EMA
/// update, center update. Throws NumericError with a per-component dump on
/// non-finite losses.
StepMetrics pretrain_step(const Batch& batch, TrainState& state, const RunConfig& config, const TrainData& data);

/// Distillation counterpart (frozen teacher, all-token patch loss, no EMA).
StepMetrics distill_step(const Batch& batch, TrainState& state, const RunConfig& config, const TrainData& data);

/// Applies the stage-2 switch when `state.step` reaches it.
void maybe_switch_stage(TrainState& state, const RunConfig& config);

model::Checkpoint to_checkpoint(const TrainState& state, const RunConfig& config);
/// Restores a state; throws LoadError when the checkpoint's model config does
/// not match `config`.
TrainState restore_state(const model::Checkpoint& ckpt, const RunConfig& config, const TrainData& data);

// ---------------------------------------------------------------------------
// Runs

struct RunResult {
  std::filesystem::path run_dir;
  std::filesystem::path final_checkpoint;
  std::filesystem::path metrics;
};

struct RunOptions {
  std::optional<std::filesystem::path> resume;  ///< checkpoint to continue from
  std::shared_ptr<const synth::Dataset> dataset;  ///< preloaded dataset (optional)
  std::function<void(const StepMetrics&)> on_step;
  std::int64_t stop_after = -1;  ///< stop early (after this many total steps), for resume tests
};

/// Serializes `config` (YAML snapshot) to run_dir/config.yaml; provided by the
/// config module.
using ConfigWriter = std::function<std::string(const RunConfig&)>;

RunResult run_pretraining(const RunConfig& config, const std::filesystem::path& run_dir, const ConfigWriter& writer,
                          const RunOptions& options = {});
RunResult run_distillation(const RunConfig& config, const std::filesystem::path& teacher_checkpoint,
                           const std::filesystem::path& run_dir, const ConfigWriter& writer,
                           const RunOptions& options = {});

/// Inference-side bundle read back from a run checkpoint.
struct TrainedModel {
  model::ModelConfig config;
  model::ImageEncoder encoder{nullptr};
  model::ProjectionHead head{nullptr};
  model::TextEncoder text{nullptr};
  model::Vocab vocab = model::Vocab::from_templates();
  int eval_resolution = 0;
};

TrainedModel load_trained_model(const std::filesystem::path& checkpoint);

std::string checkpoint_name(std::int64_t step);

}  // namespace tipslab::trainer
