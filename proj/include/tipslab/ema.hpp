#pragma once

// Teacher construction and maintenance. Three scopes are supported:
//   full      - encoder and head are independent EMA copies of the student
//   head_only - the teacher encoder IS the student encoder (shared module),
//               only the head is an EMA copy
//   frozen    - encoder and head loaded from a checkpoint, never updated
// plus `shared`, an experimental mode with no EMA at all (teacher aliases the
// student encoder and head), gated behind EmaConfig::allow_experimental_shared.

#include <optional>
#include <string>
#include <vector>

#include "tipslab/model.hpp"

namespace tipslab::ema {

enum class EmaScope { full, head_only, frozen, shared };
enum class MomentumSchedule { constant, cosine };

struct EmaConfig {
  EmaScope scope = EmaScope::head_only;
  double momentum = 0.996;
  MomentumSchedule schedule = MomentumSchedule::constant;
  bool allow_experimental_shared = false;

  void validate() const;
};

std::string to_string(EmaScope scope);
EmaScope parse_scope(const std::string& name);

/// The parts of the student the teacher mirrors.
struct StudentModules {
  model::ImageEncoder encoder{nullptr};
  model::ProjectionHead head{nullptr};
};

struct TeacherView {
  EmaScope scope = EmaScope::full;
  model::ImageEncoder encoder{nullptr};
  model::ProjectionHead head{nullptr};
  std::string provenance;

  bool encoder_aliases(const StudentModules& student) const { return encoder.ptr() == student.encoder.ptr(); }
};

/// Checkpoint tensor prefixes a frozen teacher is read from.
inline constexpr const char* kFrozenEncoderPrefix = "student/encoder/";
inline constexpr const char* kFrozenHeadPrefix = "teacher/head/";

/// full: deep copy of encoder and head. head_only: aliases the encoder,
/// deep-copies the head. frozen: loads the checkpoint (its own model config
/// is read from the archive). Frozen requires a checkpoint, the other scopes
/// forbid one.
TeacherView make_teacher(const StudentModules& student, const EmaConfig& config,
                         const std::optional<std::string>& frozen_checkpoint = std::nullopt);

/// Teacher built from an already-loaded checkpoint archive.
TeacherView make_frozen_teacher(const model::Checkpoint& ckpt, const std::string& provenance);

/// theta_t <- momentum * theta_t + (1 - momentum) * theta_s for every averaged
/// tensor. Throws ContractError on a frozen teacher.
void ema_update(TeacherView& teacher, const StudentModules& student, double momentum);

/// Generic form over paired tensor lists (any dtype).
void ema_update_tensors(std::vector<torch::Tensor>& teacher, const std::vector<torch::Tensor>& student, double momentum);

/// Momentum at `step` of `total_steps`: constant, or cosine ramp from the base
/// value to 1.
double momentum_at(const EmaConfig& config, std::int64_t step, std::int64_t total_steps);

// ---------------------------------------------------------------------------
// Parameter accounting

struct ParamRow {
  std::string name;
  std::vector<std::int64_t> shape;
  bool trainable = false;
  bool shadowed = false;
};

struct ParamCount {
  std::int64_t trainable = 0;
  std::int64_t frozen = 0;      ///< student parameters held but not trained
  std::int64_t ema_shadow = 0;  ///< teacher copies under the requested scope
  std::int64_t total = 0;       ///< trainable + frozen + ema_shadow
  /// Shadow parameters head-only EMA avoids, relative to the full-EMA
  /// (trainable + frozen + shadow) total.
  double reduction_fraction = 0.0;
  std::vector<ParamRow> rows;
};

ParamCount count_trainable_params(const model::ModelConfig& student_config, const EmaConfig& ema_config,
                                  bool text_frozen = false);

/// Fixed-schema table: name, shape, trainable, shadowed, then totals.
std::string format_param_table(const ParamCount& count);

}  // namespace tipslab::ema
