#include "tipslab/trainer.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "tipslab/errors.hpp"
#include "tipslab/rng.hpp"

namespace tipslab::trainer {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kEpochStream = 0x45504f43ULL;
constexpr std::uint64_t kSampleStream = 0x53414d50ULL;

constexpr const char* kStudentEncoder = "student/encoder/";
constexpr const char* kStudentHead = "student/head/";
constexpr const char* kStudentText = "student/text/";
constexpr const char* kLogitScale = "student/logit_scale";
constexpr const char* kTeacherEncoder = "teacher/encoder/";
constexpr const char* kTeacherHead = "teacher/head/";
constexpr const char* kCenterGlobal = "center/global";
constexpr const char* kCenterPatch = "center/patch";
constexpr const char* kPosGridParam = "student/encoder/pos_grid";

void require(bool ok, const std::string& msg) {
  if (!ok) throw ValidationError(msg);
}

torch::Tensor token_tensor(const std::vector<const model::TokenizedText*>& toks) {
  const auto b = static_cast<std::int64_t>(toks.size());
  const auto l = static_cast<std::int64_t>(toks.front()->ids.size());
  auto out = torch::empty({b, l}, torch::kInt64);
  auto* p = out.data_ptr<std::int64_t>();
  for (std::int64_t i = 0; i < b; ++i) std::copy(toks[i]->ids.begin(), toks[i]->ids.end(), p + i * l);
  return out;
}

void append_named(std::vector<NamedParam>& out, const std::string& prefix, const torch::nn::Module& m) {
  for (const auto& item : m.named_parameters(true)) {
    if (item.value().requires_grad()) out.push_back({prefix + item.key(), item.value()});
  }
}

void set_trainable(torch::nn::Module& m, bool on) {
  for (auto& p : m.parameters()) p.set_requires_grad(on);
}

std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

int global_size(const RunConfig& c, int stage) {
  return stage == 1 ? c.resolutions.stage1_global : c.resolutions.stage2_global;
}
int local_size(const RunConfig& c, int stage) {
  return stage == 1 ? c.resolutions.stage1_local : c.resolutions.stage2_local;
}

}  // namespace

// ---------------------------------------------------------------------------

torch::Tensor image_tensor(const ImageF& img) {
  auto t = torch::from_blob(const_cast<float*>(img.data.data()), {img.height, img.width, 3}, torch::kFloat32);
  return ((t.permute({2, 0, 1}) - 0.5f) / 0.25f).contiguous();
}

std::int64_t ResolutionSchedule::resolved_switch(std::int64_t steps) const {
  if (switch_step >= 0) return switch_step;
  return static_cast<std::int64_t>(std::llround(0.9 * static_cast<double>(steps)));
}

void RunConfig::validate() const {
  require(schema_version == 1, "schema_version: unsupported value " + std::to_string(schema_version));
  require(!name.empty(), "name: must be non-empty");
  require(mask_ratio >= 0.0 && mask_ratio <= 1.0, "mask_ratio: must lie in [0, 1]");
  if (mode == Mode::distill) {
    require(ema.scope == ema::EmaScope::frozen, "ema.scope: distill mode requires the frozen scope");
  } else {
    require(ema.scope == ema::EmaScope::full || ema.scope == ema::EmaScope::head_only ||
                (ema.scope == ema::EmaScope::shared && ema.allow_experimental_shared),
            "ema.scope: pretrain mode requires full or head_only");
  }
  ema.validate();
  caption_strategy.validate();
  loss_weights.validate();
  model.validate();
  require(local_crops >= 0, "local_crops: must be >= 0");
  require(steps >= 1, "steps: must be >= 1");
  require(batch_size >= 2, "batch_size: must be >= 2");
  require(threads >= 1, "threads: must be >= 1");
  const int p = model.image.patch_size;
  for (int s : {resolutions.stage1_global, resolutions.stage1_local, resolutions.stage2_global,
                resolutions.stage2_local}) {
    require(s > 0 && s % p == 0, "resolutions: every resolution must be a positive multiple of the patch size");
  }
  require(resolutions.stage1_local < resolutions.stage1_global, "resolutions.stage1_local: must be below stage1_global");
  require(resolutions.stage2_local < resolutions.stage2_global, "resolutions.stage2_local: must be below stage2_global");
  require(resolutions.switch_step >= -1 && resolutions.switch_step <= steps,
          "resolutions.switch_step: must be -1 or within [0, steps]");
  require(optimizer.name == "adamw" || optimizer.name == "adafactor",
          "optimizer.name: unknown optimizer '" + optimizer.name + "' (expected adamw or adafactor)");
  require(optimizer.lr > 0.0, "optimizer.lr: must be > 0");
  require(optimizer.min_lr >= 0.0 && optimizer.min_lr <= optimizer.lr, "optimizer.min_lr: must lie in [0, lr]");
  require(optimizer.warmup_fraction >= 0.0 && optimizer.warmup_fraction < 1.0,
          "optimizer.warmup_fraction: must lie in [0, 1)");
  require(optimizer.weight_decay >= 0.0, "optimizer.weight_decay: must be >= 0");
  require(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0, "optimizer.beta1: must lie in [0, 1)");
  require(optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0, "optimizer.beta2: must lie in [0, 1)");
  require(optimizer.eps > 0.0, "optimizer.eps: must be > 0");
  require(student_temperature > 0.0, "student_temperature: must be > 0");
  require(teacher_temperature > 0.0, "teacher_temperature: must be > 0");
  require(center_momentum >= 0.0 && center_momentum < 1.0, "center_momentum: must lie in [0, 1)");
  require(logit_scale_init > 0.0 && logit_scale_init <= logit_scale_max,
          "logit_scale_init: must lie in (0, logit_scale_max]");
  require(checkpoint_every >= 0, "checkpoint_every: must be >= 0");
  require(data.count >= 1, "data.count: must be >= 1");
  require(synth::is_valid_canvas(data.canvas), "data.canvas: must be 32, 64 or 128");
  require(data.holdout_fraction > 0.0 && data.holdout_fraction < 1.0, "data.holdout_fraction: must lie in (0, 1)");
  require(eval.knn_k >= 1, "eval.knn_k: must be >= 1");
  require(eval.gallery_size >= 1 && eval.query_size >= 1, "eval: gallery_size and query_size must be >= 1");
  require(eval.probe_train_images >= 1, "eval.probe_train_images: must be >= 1");
  require(eval.probe_l2 >= 0.0, "eval.probe_l2: must be >= 0");
  require(eval.pca_images >= 0, "eval.pca_images: must be >= 0");
  require(eval.retrieval_caption == "short" || eval.retrieval_caption == "medium" || eval.retrieval_caption == "long",
          "eval.retrieval_caption: expected short, medium or long");
  require(eval.prompt_template.find("{}") != std::string::npos, "eval.prompt_template: must contain {}");
  if (mode == Mode::pretrain) {
    require(init.student_encoder == InitSource::random && init.text == InitSource::random,
            "init: checkpoint initialization is only available in distill mode");
  }
}

model::ModelConfig RunConfig::resolved_model() const {
  auto m = model;
  m.image.pos_rows = resolutions.stage1_global / m.image.patch_size;
  m.image.pos_cols = m.image.pos_rows;
  return m;
}

nlohmann::ordered_json to_json(const StepMetrics& m) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& [k, v] : m) {
    if (k == "step" || k == "stage") {
      j[k] = static_cast<std::int64_t>(v);
    } else {
      j[k] = v;
    }
  }
  return j;
}

double metric(const StepMetrics& m, const std::string& key) {
  for (const auto& [k, v] : m) {
    if (k == key) return v;
  }
  throw ValidationError("missing metric '" + key + "'");
}

// ---------------------------------------------------------------------------
// Optimizers

void Optimizer::zero_grad() {
  for (auto& p : params_) {
    if (p.tensor.grad().defined()) p.tensor.mutable_grad() = torch::Tensor();
  }
}

void Optimizer::reset_state(const std::string& name) { state_.erase(name); }

bool Optimizer::decays(const NamedParam& p) const {
  return p.tensor.dim() >= 2 && p.name.size() >= 7 && p.name.ends_with(".weight");
}

void Optimizer::save(model::Checkpoint& ckpt) const {
  ckpt.meta["optim/name"] = cfg_.name;
  ckpt.meta["optim/t"] = std::to_string(t_);
  for (const auto& [name, slots] : state_) {
    for (const auto& [slot, t] : slots) ckpt.tensors["optim/" + name + "#" + slot] = t.detach().clone();
  }
}

void Optimizer::load(const model::Checkpoint& ckpt) {
  auto it = ckpt.meta.find("optim/name");
  if (it == ckpt.meta.end() || it->second != cfg_.name) throw LoadError("checkpoint optimizer state does not match");
  t_ = std::stoll(ckpt.meta.at("optim/t"));
  state_.clear();
  for (const auto& [key, t] : ckpt.tensors) {
    if (!key.starts_with("optim/")) continue;
    const auto hash = key.rfind('#');
    if (hash == std::string::npos) throw LoadError("malformed optimizer tensor '" + key + "'");
    state_[key.substr(6, hash - 6)][key.substr(hash + 1)] = t.clone();
  }
}

namespace {

class AdamW final : public Optimizer {
 public:
  using Optimizer::Optimizer;
  AdamW(OptimizerConfig cfg, std::vector<NamedParam> params) : Optimizer(std::move(cfg), std::move(params)) {}

  void step(double lr) override {
    torch::NoGradGuard guard;
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& p : params_) {
      const auto& g = p.tensor.grad();
      if (!g.defined()) continue;
      auto& s = state_[p.name];
      if (!s.count("exp_avg")) {
        s["exp_avg"] = torch::zeros_like(p.tensor);
        s["exp_avg_sq"] = torch::zeros_like(p.tensor);
      }
      auto& m = s["exp_avg"];
      auto& v = s["exp_avg_sq"];
      if (decays(p)) p.tensor.mul_(1.0 - lr * cfg_.weight_decay);
      m.mul_(cfg_.beta1).add_(g, 1.0 - cfg_.beta1);
      v.mul_(cfg_.beta2).addcmul_(g, g, 1.0 - cfg_.beta2);
      auto denom = (v / bc2).sqrt_().add_(cfg_.eps);
      p.tensor.addcdiv_(m, denom, -lr / bc1);
    }
  }
};

class Adafactor final : public Optimizer {
 public:
  Adafactor(OptimizerConfig cfg, std::vector<NamedParam> params) : Optimizer(std::move(cfg), std::move(params)) {}

  void step(double lr) override {
    torch::NoGradGuard guard;
    ++t_;
    constexpr double kEps1 = 1e-30;
    constexpr double kClip = 1.0;
    const double beta2 = 1.0 - std::pow(static_cast<double>(t_), -0.8);
    for (auto& p : params_) {
      const auto& g = p.tensor.grad();
      if (!g.defined()) continue;
      auto& s = state_[p.name];
      auto g2 = g * g + kEps1;
      torch::Tensor update;
      if (p.tensor.dim() >= 2) {
        auto g2m = g2.reshape({g2.size(0), -1});
        if (!s.count("row")) {
          s["row"] = torch::zeros({g2m.size(0)}, g.options());
          s["col"] = torch::zeros({g2m.size(1)}, g.options());
        }
        auto& r = s["row"];
        auto& c = s["col"];
        r.mul_(beta2).add_(g2m.mean(1), 1.0 - beta2);
        c.mul_(beta2).add_(g2m.mean(0), 1.0 - beta2);
        auto v = torch::outer(r, c) / r.mean();
        update = (g.reshape({g.size(0), -1}) / v.sqrt()).reshape(g.sizes());
      } else {
        if (!s.count("v")) s["v"] = torch::zeros_like(p.tensor);
        auto& v = s["v"];
        v.mul_(beta2).add_(g2, 1.0 - beta2);
        update = g / v.sqrt();
      }
      const double rms = update.pow(2).mean().sqrt().item<double>();
      update.div_(std::max(1.0, rms / kClip));
      if (decays(p)) p.tensor.mul_(1.0 - lr * cfg_.weight_decay);
      p.tensor.add_(update, -lr);
    }
  }
};

}  // namespace

std::unique_ptr<Optimizer> build_optimizer(const OptimizerConfig& config, std::vector<NamedParam> params) {
  if (config.name == "adamw") return std::make_unique<AdamW>(config, std::move(params));
  if (config.name == "adafactor") return std::make_unique<Adafactor>(config, std::move(params));
  throw ValidationError("optimizer.name: unknown optimizer '" + config.name + "' (expected adamw or adafactor)");
}

double learning_rate(const OptimizerConfig& config, std::int64_t step, std::int64_t total_steps) {
  if (total_steps < 1) throw ValidationError("total_steps must be >= 1");
  step = std::clamp<std::int64_t>(step, 0, total_steps - 1);
  const auto warmup = static_cast<std::int64_t>(std::floor(config.warmup_fraction * static_cast<double>(total_steps)));
  if (step < warmup) return config.lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const auto span = total_steps - 1 - warmup;
  const double progress = span > 0 ? static_cast<double>(step - warmup) / static_cast<double>(span) : 0.0;
  return config.min_lr + (config.lr - config.min_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---------------------------------------------------------------------------
// Data

TrainData::TrainData(std::shared_ptr<const synth::Dataset> dataset, const RunConfig& config)
    : dataset_(std::move(dataset)), vocab_(model::Vocab::from_templates()) {
  if (!dataset_) throw ContractError("TrainData requires a dataset");
  const int n = static_cast<int>(dataset_->size());
  const int holdout = static_cast<int>(std::llround(config.data.holdout_fraction * n));
  if (n - holdout < config.batch_size) {
    throw ValidationError("dataset has " + std::to_string(n - holdout) + " training samples, fewer than batch_size");
  }
  if (holdout < 1) throw ValidationError("data.holdout_fraction leaves no evaluation samples");
  for (int i = 0; i < n; ++i) (i < n - holdout ? train_ : holdout_).push_back(i);
  const int max_len = config.model.text.max_len;
  tokens_.reserve(static_cast<std::size_t>(n));
  for (const auto& c : dataset_->captions) {
    tokens_.push_back({model::tokenize(c.short_text, vocab_, max_len), model::tokenize(c.medium_text, vocab_, max_len),
                       model::tokenize(c.long_text, vocab_, max_len)});
  }
}

const model::TokenizedText& TrainData::tokens(int sample, synth::Granularity g) const {
  return tokens_.at(static_cast<std::size_t>(sample))[static_cast<std::size_t>(g)];
}

std::vector<int> TrainData::batch_indices(std::int64_t step, int batch_size, std::uint64_t seed) const {
  const auto n = static_cast<std::int64_t>(train_.size());
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(batch_size));
  for (int j = 0; j < batch_size; ++j) {
    const std::int64_t g = step * batch_size + j;
    const std::int64_t epoch = g / n;
    const auto key = std::make_pair(seed, epoch);
    auto it = epoch_cache_.find(key);
    if (it == epoch_cache_.end()) {
      if (epoch_cache_.size() > 4) epoch_cache_.erase(epoch_cache_.begin());
      auto perm = train_;
      auto rng = Rng::derive(seed, {kEpochStream, static_cast<std::uint64_t>(epoch)});
      rng.shuffle(perm);
      it = epoch_cache_.emplace(key, std::move(perm)).first;
    }
    out.push_back(it->second[static_cast<std::size_t>(g % n)]);
  }
  return out;
}

Batch make_batch(const TrainData& data, const RunConfig& config, std::int64_t step) {
  return {step, data.batch_indices(step, config.batch_size, config.seed)};
}

// ---------------------------------------------------------------------------
// State

namespace {

StudentModel build_student(const RunConfig& config, const model::Vocab& vocab) {
  torch::manual_seed(config.seed);
  const auto mc = config.resolved_model();
  StudentModel s;
  s.encoder = model::ImageEncoder(mc.image);
  s.head = model::ProjectionHead(mc.head);
  s.text = model::TextEncoder(mc.text, vocab.size());
  s.log_logit_scale = torch::full({}, std::log(config.logit_scale_init), torch::kFloat32).set_requires_grad(true);
  return s;
}

std::vector<NamedParam> trainable_params(const StudentModel& s) {
  std::vector<NamedParam> out;
  append_named(out, kStudentEncoder, *s.encoder);
  append_named(out, kStudentHead, *s.head);
  append_named(out, kStudentText, *s.text);
  if (s.log_logit_scale.requires_grad()) out.push_back({kLogitScale, s.log_logit_scale});
  return out;
}

void load_student_text(const model::Checkpoint& ckpt, StudentModel& s) {
  model::get_module(ckpt, kStudentText, *s.text);
  auto it = ckpt.tensors.find(kLogitScale);
  if (it == ckpt.tensors.end()) throw LoadError("checkpoint has no logit scale");
  torch::NoGradGuard g;
  s.log_logit_scale.copy_(it->second);
}

void check_model_config(const model::Checkpoint& ckpt, const model::ModelConfig& expected, const char* what) {
  auto it = ckpt.meta.find("model_config");
  if (it == ckpt.meta.end()) throw LoadError(std::string(what) + " carries no model config");
  const auto got = model::model_config_from_json(it->second);
  if (model::to_json(got) != model::to_json(expected)) {
    throw LoadError(std::string(what) + " was written for a different model configuration");
  }
}

ema::TeacherView frozen_teacher_from_run(const model::Checkpoint& ckpt) {
  const auto cfg = model::model_config_from_json(ckpt.meta.at("teacher_model_config"));
  ema::TeacherView t;
  t.scope = ema::EmaScope::frozen;
  t.encoder = model::ImageEncoder(cfg.image);
  t.encoder->set_pos_grid(std::stoi(ckpt.meta.at("teacher_pos_rows")), std::stoi(ckpt.meta.at("teacher_pos_cols")));
  t.head = model::ProjectionHead(cfg.head);
  model::get_module(ckpt, kTeacherEncoder, *t.encoder);
  model::get_module(ckpt, kTeacherHead, *t.head);
  set_trainable(*t.encoder, false);
  set_trainable(*t.head, false);
  t.provenance = ckpt.meta.count("teacher_provenance") ? ckpt.meta.at("teacher_provenance") : "frozen";
  return t;
}

}  // namespace

TrainState init_state(const RunConfig& config, const TrainData& data) {
  config.validate();
  TrainState st;
  st.student = build_student(config, data.vocab());
  const auto k = config.model.head.prototypes;
  st.center_global = torch::zeros({k});
  st.center_patch = torch::zeros({k});

  if (config.mode == Mode::distill) {
    if (config.teacher_checkpoint.empty()) throw ValidationError("teacher_checkpoint: required in distill mode");
    const auto tck = model::load_checkpoint(config.teacher_checkpoint);
    st.teacher = ema::make_frozen_teacher(tck, "frozen:" + config.teacher_checkpoint);
    const bool need_init = config.init.student_encoder == InitSource::checkpoint || config.init.text == InitSource::checkpoint;
    if (need_init) {
      const std::string src = config.init.checkpoint.empty() ? config.teacher_checkpoint : config.init.checkpoint;
      const auto ick = src == config.teacher_checkpoint ? tck : model::load_checkpoint(src);
      check_model_config(ick, config.resolved_model(), "init checkpoint");
      if (config.init.student_encoder == InitSource::checkpoint) {
        model::get_module(ick, kStudentEncoder, *st.student.encoder);
        model::get_module(ick, kStudentHead, *st.student.head);
      }
      if (config.init.text == InitSource::checkpoint) load_student_text(ick, st.student);
    }
  } else {
    st.teacher = ema::make_teacher(st.student.modules(), config.ema);
  }
  if (config.init.text_frozen) {
    set_trainable(*st.student.text, false);
    st.student.log_logit_scale.set_requires_grad(false);
  }
  st.optimizer = build_optimizer(config.optimizer, trainable_params(st.student));
  st.step = 0;
  st.stage = 1;
  return st;
}

void maybe_switch_stage(TrainState& state, const RunConfig& config) {
  if (state.stage != 1 || state.step < config.resolutions.resolved_switch(config.steps)) return;
  state.stage = 2;
  const int grid = config.resolutions.stage2_global / config.model.image.patch_size;
  if (grid == state.student.encoder->pos_rows() && grid == state.student.encoder->pos_cols()) return;
  state.student.encoder->set_pos_grid(grid, grid);
  state.optimizer->reset_state(kPosGridParam);
  if (state.teacher.scope == ema::EmaScope::full) state.teacher.encoder->set_pos_grid(grid, grid);
}

// ---------------------------------------------------------------------------
// Step

StepTensors compute_step_losses(const Batch& batch, TrainState& state, const RunConfig& config, const TrainData& data) {
  const int stage = state.stage;
  objectives::ViewConfig vc;
  vc.global_size = global_size(config, stage);
  vc.local_size = local_size(config, stage);
  const int grid = vc.global_size / config.model.image.patch_size;
  const int n_patches = grid * grid;
  const int b = static_cast<int>(batch.indices.size());
  const int m = config.local_crops;
  const bool two_cls = config.caption_strategy.uses_second_cls();

  std::vector<torch::Tensor> globals, locals;
  std::vector<objectives::MaskVector> masks;
  std::vector<const model::TokenizedText*> tok1, tok2;
  globals.reserve(static_cast<std::size_t>(b));
  int truncated = 0;
  for (int j = 0; j < b; ++j) {
    const int idx = batch.indices[static_cast<std::size_t>(j)];
    auto rng = Rng::derive(config.seed, {kSampleStream, static_cast<std::uint64_t>(batch.step), static_cast<std::uint64_t>(j)});
    const auto img = to_float(data.dataset().images[static_cast<std::size_t>(idx)]);
    auto views = objectives::sample_views(img, m, vc, rng);
    globals.push_back(image_tensor(views.global_view));
    for (const auto& l : views.local_views) locals.push_back(image_tensor(l));
    masks.push_back(objectives::sample_mask(n_patches, config.mask_ratio, rng));
    const auto choice = objectives::sample_caption_choice(config.caption_strategy, rng);
    tok1.push_back(&data.tokens(idx, choice.cls1));
    truncated += tok1.back()->truncated;
    if (two_cls) {
      tok2.push_back(&data.tokens(idx, *choice.cls2));
      truncated += tok2.back()->truncated;
    }
  }
  auto global_batch = torch::stack(globals);
  auto mask = objectives::mask_tensor(masks);

  auto& student = state.student;
  auto& teacher = state.teacher;
  if (teacher.scope == ema::EmaScope::head_only && !teacher.encoder_aliases(student.modules())) {
    throw ContractError("head_only teacher no longer shares the student encoder");
  }

  StepTensors out;
  out.mask = mask;
  torch::Tensor t_cls, t_patch;
  {
    torch::NoGradGuard guard;
    auto tout = teacher.encoder->forward(global_batch);
    out.teacher_cls_logits = teacher.head->forward(tout.cls_tokens.select(1, 0));
    out.teacher_patch_logits = teacher.head->forward(tout.patches);
    t_cls = model::prototype_dist(out.teacher_cls_logits, config.teacher_temperature, state.center_global);
    t_patch = model::prototype_dist(out.teacher_patch_logits, config.teacher_temperature, state.center_patch);
  }

  auto sout = student.encoder->forward(global_batch, mask);
  out.student_patches = sout.patches;
  auto s_patch = model::prototype_dist(student.head->forward(sout.patches), config.student_temperature);

  std::vector<const model::TokenizedText*> all_tok = tok1;
  all_tok.insert(all_tok.end(), tok2.begin(), tok2.end());
  auto txt = student.text->forward(token_tensor(all_tok));
  auto scale = student.log_logit_scale.exp();
  out.clip = objectives::clip_loss(sout.cls1, txt.narrow(0, 0, b), scale);
  if (two_cls) out.clip = 0.5 * (out.clip + objectives::clip_loss(sout.cls2, txt.narrow(0, b, b), scale));

  if (m > 0) {
    auto lout = student.encoder->forward(torch::stack(locals));
    auto s_local = model::prototype_dist(student.head->forward(lout.cls_tokens.select(1, 0)), config.student_temperature)
                       .view({b, m, -1});
    std::vector<torch::Tensor> crops;
    for (int i = 0; i < m; ++i) crops.push_back(s_local.select(1, i));
    out.dino = objectives::dino_loss(t_cls, crops);
  } else {
    out.dino = torch::zeros({});
  }

  const bool all_tokens = config.mode == Mode::distill || config.patch_objective == PatchObjective::ibot_pp;
  out.patch = all_tokens ? objectives::ibot_pp_loss(t_patch, s_patch) : objectives::ibot_loss(t_patch, s_patch, mask);
  {
    torch::NoGradGuard guard;
    auto ce = objectives::token_cross_entropy(t_patch, s_patch.detach());
    auto mf = mask.to(ce.dtype());
    out.patch_masked = (ce * mf).sum(-1).mean();
    out.patch_visible = (ce * (1 - mf)).sum(-1).mean();
  }
  const auto clip_v = out.clip.item<double>();
  const auto dino_v = out.dino.item<double>();
  const auto patch_v = out.patch.item<double>();
  if (!std::isfinite(clip_v) || !std::isfinite(dino_v) || !std::isfinite(patch_v)) {
    std::ostringstream os;
    os << "non-finite loss at step " << batch.step << ": loss/clip=" << format_double(clip_v)
       << " loss/dino=" << format_double(dino_v) << " loss/patch=" << format_double(patch_v)
       << " loss/patch_visible=" << format_double(out.patch_visible.item<double>())
       << " loss/patch_masked=" << format_double(out.patch_masked.item<double>());
    throw NumericError(os.str());
  }
  out.total = objectives::combined_loss(out.clip, out.dino, out.patch, config.loss_weights);
  out.truncated_fraction = static_cast<double>(truncated) / static_cast<double>(tok1.size() + tok2.size());
  return out;
}

namespace {

StepMetrics run_step(const Batch& batch, TrainState& state, const RunConfig& config, const TrainData& data) {
  auto t = compute_step_losses(batch, state, config, data);
  const double lr = learning_rate(config.optimizer, batch.step, config.steps);
  state.optimizer->zero_grad();
  t.total.backward();
  state.optimizer->step(lr);
  {
    torch::NoGradGuard guard;
    state.student.log_logit_scale.clamp_max_(std::log(config.logit_scale_max));
  }
  double momentum = 1.0;
  if (state.teacher.scope == ema::EmaScope::full || state.teacher.scope == ema::EmaScope::head_only) {
    momentum = ema::momentum_at(config.ema, batch.step, config.steps);
    ema::ema_update(state.teacher, state.student.modules(), momentum);
  }
  state.center_global = objectives::update_center(state.center_global, t.teacher_cls_logits, config.center_momentum);
  state.center_patch = objectives::update_center(state.center_patch, t.teacher_patch_logits, config.center_momentum);
  state.step = batch.step + 1;

  StepMetrics m;
  m.emplace_back("step", static_cast<double>(batch.step));
  m.emplace_back("stage", static_cast<double>(state.stage));
  m.emplace_back("lr", lr);
  m.emplace_back("ema_momentum", momentum);
  m.emplace_back("loss/clip", t.clip.item<double>());
  m.emplace_back("loss/dino", t.dino.item<double>());
  m.emplace_back("loss/patch", t.patch.item<double>());
  m.emplace_back("loss/patch_visible", t.patch_visible.item<double>());
  m.emplace_back("loss/patch_masked", t.patch_masked.item<double>());
  m.emplace_back("loss/total", t.total.item<double>());
  m.emplace_back("logit_scale", state.student.logit_scale());
  m.emplace_back("text/truncated_fraction", t.truncated_fraction);
  return m;
}

}  // namespace

StepMetrics pretrain_step(const Batch& batch, TrainState& state, const RunConfig& config, const TrainData& data) {
  if (config.mode != Mode::pretrain) throw ContractError("pretrain_step requires mode = pretrain");
  return run_step(batch, state, config, data);
}

StepMetrics distill_step(const Batch& batch, TrainState& state, const RunConfig& config, const TrainData& data) {
  if (config.mode != Mode::distill) throw ContractError("distill_step requires mode = distill");
  if (state.teacher.scope != ema::EmaScope::frozen) throw ContractError("distillation requires a frozen teacher");
  return run_step(batch, state, config, data);
}

// ---------------------------------------------------------------------------
// Checkpoints

model::Checkpoint to_checkpoint(const TrainState& state, const RunConfig& config) {
  model::Checkpoint ck;
  ck.step = state.step;
  ck.meta["model_config"] = model::to_json(config.resolved_model());
  ck.meta["pos_rows"] = std::to_string(state.student.encoder->pos_rows());
  ck.meta["pos_cols"] = std::to_string(state.student.encoder->pos_cols());
  ck.meta["global_resolution"] = std::to_string(global_size(config, state.stage));
  ck.meta["stage"] = std::to_string(state.stage);
  ck.meta["seed"] = std::to_string(config.seed);
  ck.meta["rng"] = "derived:seed=" + std::to_string(config.seed) + ";next_step=" + std::to_string(state.step);
  ck.meta["ema_scope"] = ema::to_string(state.teacher.scope);
  ck.meta["teacher_provenance"] = state.teacher.provenance;
  ck.meta["mode"] = config.mode == Mode::pretrain ? "pretrain" : "distill";
  model::put_module(ck, kStudentEncoder, *state.student.encoder);
  model::put_module(ck, kStudentHead, *state.student.head);
  model::put_module(ck, kStudentText, *state.student.text);
  ck.tensors[kLogitScale] = state.student.log_logit_scale.detach().clone();
  if (state.teacher.scope != ema::EmaScope::shared && state.teacher.scope != ema::EmaScope::head_only) {
    model::put_module(ck, kTeacherEncoder, *state.teacher.encoder);
  }
  if (state.teacher.scope != ema::EmaScope::shared) model::put_module(ck, kTeacherHead, *state.teacher.head);
  if (state.teacher.scope == ema::EmaScope::frozen) {
    model::ModelConfig tc;
    tc.image = state.teacher.encoder->config();
    tc.head = state.teacher.head->config();
    ck.meta["teacher_model_config"] = model::to_json(tc);
    ck.meta["teacher_pos_rows"] = std::to_string(state.teacher.encoder->pos_rows());
    ck.meta["teacher_pos_cols"] = std::to_string(state.teacher.encoder->pos_cols());
  }
  ck.tensors[kCenterGlobal] = state.center_global.clone();
  ck.tensors[kCenterPatch] = state.center_patch.clone();
  state.optimizer->save(ck);
  return ck;
}

TrainState restore_state(const model::Checkpoint& ckpt, const RunConfig& config, const TrainData& data) {
  config.validate();
  check_model_config(ckpt, config.resolved_model(), "checkpoint");
  const std::string mode = config.mode == Mode::pretrain ? "pretrain" : "distill";
  if (ckpt.meta.count("mode") && ckpt.meta.at("mode") != mode) throw LoadError("checkpoint was written by a " + ckpt.meta.at("mode") + " run");
  if (ckpt.meta.count("ema_scope") && ckpt.meta.at("ema_scope") != ema::to_string(config.ema.scope)) {
    throw LoadError("checkpoint EMA scope differs from the config");
  }
  TrainState st;
  st.student = build_student(config, data.vocab());
  st.student.encoder->set_pos_grid(std::stoi(ckpt.meta.at("pos_rows")), std::stoi(ckpt.meta.at("pos_cols")));
  model::get_module(ckpt, kStudentEncoder, *st.student.encoder);
  model::get_module(ckpt, kStudentHead, *st.student.head);
  load_student_text(ckpt, st.student);
  switch (config.ema.scope) {
    case ema::EmaScope::frozen:
      st.teacher = frozen_teacher_from_run(ckpt);
      break;
    case ema::EmaScope::full:
    case ema::EmaScope::head_only:
    case ema::EmaScope::shared:
      st.teacher = ema::make_teacher(st.student.modules(), config.ema);
      if (config.ema.scope == ema::EmaScope::full) model::get_module(ckpt, kTeacherEncoder, *st.teacher.encoder);
      if (config.ema.scope != ema::EmaScope::shared) model::get_module(ckpt, kTeacherHead, *st.teacher.head);
      break;
  }
  st.center_global = ckpt.tensors.at(kCenterGlobal).clone();
  st.center_patch = ckpt.tensors.at(kCenterPatch).clone();
  if (config.init.text_frozen) {
    set_trainable(*st.student.text, false);
    st.student.log_logit_scale.set_requires_grad(false);
  }
  st.optimizer = build_optimizer(config.optimizer, trainable_params(st.student));
  st.optimizer->load(ckpt);
  st.step = ckpt.step;
  st.stage = std::stoi(ckpt.meta.at("stage"));
  return st;
}

std::string checkpoint_name(std::int64_t step) {
  std::ostringstream os;
  os << "step_" << std::setw(6) << std::setfill('0') << step << ".ckpt";
  return os.str();
}

// ---------------------------------------------------------------------------
// Runs

namespace {

void truncate_metrics(const fs::path& path, std::int64_t keep_below) {
  std::vector<std::string> kept;
  {
    std::ifstream in(path);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      if (j.at("step").get<std::int64_t>() < keep_below) kept.push_back(line);
    }
  }
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : kept) out << l << '\n';
}

RunResult run_loop(const RunConfig& config, const fs::path& run_dir, const ConfigWriter& writer,
                   const RunOptions& options) {
  config.validate();
  torch::set_num_threads(config.threads);
  std::shared_ptr<const synth::Dataset> dataset = options.dataset;
  if (!dataset) {
    if (!fs::exists(fs::path(config.data.dir) / "manifest.json")) {
      throw IoError("dataset manifest not found under '" + config.data.dir + "'");
    }
    dataset = std::make_shared<synth::Dataset>(synth::load_dataset(config.data.dir));
  }
  TrainData data(dataset, config);

  fs::create_directories(run_dir / "checkpoints");
  {
    std::ofstream cfg(run_dir / "config.yaml", std::ios::trunc);
    cfg << writer(config);
  }
  RunResult result{run_dir, run_dir / "checkpoints" / "final.ckpt", run_dir / "metrics.jsonl"};

  TrainState state;
  if (options.resume) {
    state = restore_state(model::load_checkpoint(options.resume->string()), config, data);
    truncate_metrics(result.metrics, state.step);
  } else {
    state = init_state(config, data);
    std::ofstream(result.metrics, std::ios::trunc);
  }
  std::ofstream metrics(result.metrics, std::ios::app);
  const auto step_fn = config.mode == Mode::pretrain ? pretrain_step : distill_step;
  while (state.step < config.steps) {
    if (options.stop_after >= 0 && state.step >= options.stop_after) break;
    maybe_switch_stage(state, config);
    const auto batch = make_batch(data, config, state.step);
    StepMetrics m;
    try {
      m = step_fn(batch, state, config, data);
    } catch (const NumericError& e) {
      std::ofstream dump(run_dir / "nan_dump.txt", std::ios::trunc);
      dump << e.what() << '\n';
      throw;
    }
    metrics << to_json(m).dump() << '\n';
    metrics.flush();
    if (options.on_step) options.on_step(m);
    if (config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0 && state.step < config.steps) {
      auto ck = to_checkpoint(state, config);
      ck.config_yaml = writer(config);
      model::save_checkpoint((run_dir / "checkpoints" / checkpoint_name(state.step)).string(), ck);
    }
  }
  if (state.step == config.steps) {
    auto ck = to_checkpoint(state, config);
    ck.config_yaml = writer(config);
    model::save_checkpoint(result.final_checkpoint.string(), ck);
  }
  return result;
}

}  // namespace

RunResult run_pretraining(const RunConfig& config, const fs::path& run_dir, const ConfigWriter& writer,
                          const RunOptions& options) {
  if (config.mode != Mode::pretrain) throw ValidationError("mode: run_pretraining requires mode = pretrain");
  return run_loop(config, run_dir, writer, options);
}

RunResult run_distillation(const RunConfig& config, const fs::path& teacher_checkpoint, const fs::path& run_dir,
                           const ConfigWriter& writer, const RunOptions& options) {
  if (config.mode != Mode::distill) throw ValidationError("mode: run_distillation requires mode = distill");
  if (!fs::exists(teacher_checkpoint)) throw IoError("teacher checkpoint not found: " + teacher_checkpoint.string());
  auto c = config;
  c.teacher_checkpoint = teacher_checkpoint.string();
  return run_loop(c, run_dir, writer, options);
}

TrainedModel load_trained_model(const fs::path& checkpoint) {
  const auto ck = model::load_checkpoint(checkpoint.string());
  auto it = ck.meta.find("model_config");
  if (it == ck.meta.end()) throw LoadError("checkpoint carries no model config");
  TrainedModel tm;
  tm.config = model::model_config_from_json(it->second);
  tm.encoder = model::ImageEncoder(tm.config.image);
  tm.encoder->set_pos_grid(std::stoi(ck.meta.at("pos_rows")), std::stoi(ck.meta.at("pos_cols")));
  tm.head = model::ProjectionHead(tm.config.head);
  tm.text = model::TextEncoder(tm.config.text, tm.vocab.size());
  model::get_module(ck, kStudentEncoder, *tm.encoder);
  model::get_module(ck, kStudentHead, *tm.head);
  model::get_module(ck, kStudentText, *tm.text);
  set_trainable(*tm.encoder, false);
  set_trainable(*tm.head, false);
  set_trainable(*tm.text, false);
  tm.eval_resolution = std::stoi(ck.meta.count("global_resolution") ? ck.meta.at("global_resolution") : "64");
  return tm;
}

}  // namespace tipslab::trainer
