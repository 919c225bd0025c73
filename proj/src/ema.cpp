#include "tipslab/ema.hpp"

#include <cmath>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "tipslab/errors.hpp"

namespace tipslab::ema {

void EmaConfig::validate() const {
  if (scope == EmaScope::frozen) return;  // momentum is ignored
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ValidationError("ema.momentum must lie in [0, 1)");
  if (scope == EmaScope::shared && !allow_experimental_shared) {
    throw ValidationError("ema.scope 'shared' (no EMA) requires ema.allow_experimental_shared = true");
  }
}

std::string to_string(EmaScope scope) {
  switch (scope) {
    case EmaScope::full:
      return "full";
    case EmaScope::head_only:
      return "head_only";
    case EmaScope::frozen:
      return "frozen";
    case EmaScope::shared:
      return "shared";
  }
  return "?";
}

EmaScope parse_scope(const std::string& name) {
  if (name == "full") return EmaScope::full;
  if (name == "head_only") return EmaScope::head_only;
  if (name == "frozen") return EmaScope::frozen;
  if (name == "shared") return EmaScope::shared;
  throw ValidationError("unknown ema scope '" + name + "' (expected full, head_only, frozen)");
}

namespace {

model::ImageEncoder clone_encoder(const model::ImageEncoder& src) {
  model::ImageEncoder dst(src->config());
  dst->set_pos_grid(src->pos_rows(), src->pos_cols());
  model::copy_parameters(*dst, *src);
  for (auto& p : dst->parameters()) p.set_requires_grad(false);
  return dst;
}

model::ProjectionHead clone_head(const model::ProjectionHead& src) {
  model::ProjectionHead dst(src->config());
  model::copy_parameters(*dst, *src);
  for (auto& p : dst->parameters()) p.set_requires_grad(false);
  return dst;
}

}  // namespace

TeacherView make_frozen_teacher(const model::Checkpoint& ckpt, const std::string& provenance) {
  auto it = ckpt.meta.find("model_config");
  if (it == ckpt.meta.end()) throw LoadError("checkpoint carries no model config");
  const auto cfg = model::model_config_from_json(it->second);
  TeacherView t;
  t.scope = EmaScope::frozen;
  t.encoder = model::ImageEncoder(cfg.image);
  if (ckpt.meta.count("pos_rows") && ckpt.meta.count("pos_cols")) {
    t.encoder->set_pos_grid(std::stoi(ckpt.meta.at("pos_rows")), std::stoi(ckpt.meta.at("pos_cols")));
  }
  t.head = model::ProjectionHead(cfg.head);
  model::get_module(ckpt, kFrozenEncoderPrefix, *t.encoder);
  model::get_module(ckpt, kFrozenHeadPrefix, *t.head);
  for (auto& p : t.encoder->parameters()) p.set_requires_grad(false);
  for (auto& p : t.head->parameters()) p.set_requires_grad(false);
  t.encoder->eval();
  t.head->eval();
  t.provenance = provenance;
  return t;
}

TeacherView make_teacher(const StudentModules& student, const EmaConfig& config,
                         const std::optional<std::string>& frozen_checkpoint) {
  config.validate();
  if (config.scope == EmaScope::frozen) {
    if (!frozen_checkpoint) throw ValidationError("frozen teacher scope requires a checkpoint");
    return make_frozen_teacher(model::load_checkpoint(*frozen_checkpoint), "frozen:" + *frozen_checkpoint);
  }
  if (frozen_checkpoint) throw ValidationError("a teacher checkpoint is only accepted with the frozen scope");
  TeacherView t;
  t.scope = config.scope;
  switch (config.scope) {
    case EmaScope::full:
      t.encoder = clone_encoder(student.encoder);
      t.head = clone_head(student.head);
      t.provenance = "ema:full";
      break;
    case EmaScope::head_only:
      t.encoder = student.encoder;
      t.head = clone_head(student.head);
      t.provenance = "ema:head_only";
      break;
    case EmaScope::shared:
      t.encoder = student.encoder;
      t.head = student.head;
      t.provenance = "shared:no-ema";
      break;
    case EmaScope::frozen:
      break;
  }
  return t;
}

void ema_update_tensors(std::vector<torch::Tensor>& teacher, const std::vector<torch::Tensor>& student, double momentum) {
  if (teacher.size() != student.size()) throw ContractError("EMA parameter lists differ in length");
  torch::NoGradGuard guard;
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    if (teacher[i].sizes() != student[i].sizes()) throw ContractError("EMA parameter shapes differ");
    teacher[i].mul_(momentum).add_(student[i].detach(), 1.0 - momentum);
  }
}

void ema_update(TeacherView& teacher, const StudentModules& student, double momentum) {
  if (teacher.scope == EmaScope::frozen) throw ContractError("ema_update called on a frozen teacher");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ValidationError("EMA momentum must lie in [0, 1)");
  if (teacher.scope == EmaScope::shared) return;
  {
    auto t = teacher.head->parameters();
    ema_update_tensors(t, student.head->parameters(), momentum);
  }
  if (teacher.scope == EmaScope::full) {
    auto t = teacher.encoder->parameters();
    ema_update_tensors(t, student.encoder->parameters(), momentum);
  }
}

double momentum_at(const EmaConfig& config, std::int64_t step, std::int64_t total_steps) {
  if (config.schedule == MomentumSchedule::constant || total_steps <= 1) return config.momentum;
  const double progress = std::clamp(static_cast<double>(step) / static_cast<double>(total_steps - 1), 0.0, 1.0);
  return 1.0 - (1.0 - config.momentum) * (std::cos(std::numbers::pi * progress) + 1.0) / 2.0;
}

// ---------------------------------------------------------------------------

ParamCount count_trainable_params(const model::ModelConfig& student_config, const EmaConfig& ema_config,
                                  bool text_frozen) {
  student_config.validate();
  torch::NoGradGuard guard;
  model::ImageEncoder encoder(student_config.image);
  model::ProjectionHead head(student_config.head);
  model::TextEncoder text(student_config.text, model::Vocab::from_templates().size());

  ParamCount out;
  std::int64_t encoder_params = 0;
  auto add = [&](const std::string& prefix, const torch::nn::Module& m, bool trainable, bool shadowed,
                 std::int64_t* bucket) {
    for (const auto& item : m.named_parameters(true)) {
      const auto n = item.value().numel();
      out.rows.push_back({prefix + item.key(), item.value().sizes().vec(), trainable, shadowed});
      (trainable ? out.trainable : out.frozen) += n;
      if (shadowed) out.ema_shadow += n;
      if (bucket) *bucket += n;
    }
  };
  const bool ema_scope = ema_config.scope == EmaScope::full || ema_config.scope == EmaScope::head_only;
  add("encoder.", *encoder, true, ema_config.scope == EmaScope::full, &encoder_params);
  add("head.", *head, true, ema_scope, nullptr);
  add("text.", *text, !text_frozen, false, nullptr);
  out.rows.push_back({"logit_scale", {}, !text_frozen, false});
  (text_frozen ? out.frozen : out.trainable) += 1;
  out.total = out.trainable + out.frozen + out.ema_shadow;

  const std::int64_t head_params = model::count_parameters(*head);
  const std::int64_t full_total = out.trainable + out.frozen + encoder_params + head_params;
  out.reduction_fraction = static_cast<double>(encoder_params) / static_cast<double>(full_total);
  return out;
}

std::string format_param_table(const ParamCount& count) {
  std::ostringstream os;
  os << std::left << std::setw(44) << "name" << std::setw(16) << "shape" << std::setw(11) << "trainable"
     << "shadowed\n";
  for (const auto& r : count.rows) {
    std::string shape = "[";
    for (std::size_t i = 0; i < r.shape.size(); ++i) shape += (i ? "," : "") + std::to_string(r.shape[i]);
    shape += "]";
    os << std::left << std::setw(44) << r.name << std::setw(16) << shape << std::setw(11)
       << (r.trainable ? "yes" : "no") << (r.shadowed ? "yes" : "no") << '\n';
  }
  os << "trainable " << count.trainable << '\n';
  os << "frozen " << count.frozen << '\n';
  os << "ema_shadow " << count.ema_shadow << '\n';
  os << "total " << count.total << '\n';
  os << std::fixed << std::setprecision(4) << "head_only_reduction_fraction " << count.reduction_fraction << '\n';
  os << "reference_vit_b_reduction 0.42\n";
  return os.str();
}

}  // namespace tipslab::ema
