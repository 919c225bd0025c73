#include "testing.hpp"

#include <cmath>
#include <set>

#include "support.hpp"
#include "tipslab/config.hpp"
#include "tipslab/errors.hpp"
#include "tipslab/trainer.hpp"

using namespace tipslab;
using namespace tipslab::trainer;
namespace fs = std::filesystem;

namespace {

std::shared_ptr<const synth::Dataset> tiny_dataset() {
  static std::shared_ptr<const synth::Dataset> ds = [] {
    const auto dir = testsupport::temp_dir("trainer_data");
    synth::generate_dataset(40, 64, 3, dir);
    return std::make_shared<const synth::Dataset>(synth::load_dataset(dir));
  }();
  return ds;
}

RunConfig tiny_config() {
  RunConfig c;
  c.name = "tiny";
  c.steps = 6;
  c.batch_size = 4;
  c.local_crops = 2;
  c.checkpoint_every = 2;
  c.data.count = 40;
  c.optimizer.warmup_fraction = 0.2;
  auto& m = c.model;
  m.image.embed_dim = 16;
  m.image.depth = 1;
  m.image.heads = 2;
  m.image.mlp_ratio = 2;
  m.image.proj_dim = 8;
  m.text.embed_dim = 16;
  m.text.depth = 1;
  m.text.heads = 2;
  m.text.mlp_ratio = 2;
  m.text.proj_dim = 8;
  m.head.in_dim = 16;
  m.head.hidden_dim = 32;
  m.head.bottleneck_dim = 8;
  m.head.prototypes = 16;
  return c;
}

RunConfig distill_config(const fs::path& teacher) {
  auto c = tiny_config();
  c.mode = Mode::distill;
  c.ema.scope = ema::EmaScope::frozen;
  c.mask_ratio = 0.0;
  c.teacher_checkpoint = teacher.string();
  return c;
}

RunOptions with_data() {
  RunOptions o;
  o.dataset = tiny_dataset();
  return o;
}

RunResult pretrain(const RunConfig& c, const fs::path& dir, RunOptions o = with_data()) {
  return run_pretraining(c, dir, config::serialize_config, o);
}

/// A short pretraining run shared as the teacher of distillation tests.
fs::path teacher_checkpoint() {
  static const fs::path path = [] {
    auto c = tiny_config();
    c.steps = 3;
    c.resolutions.switch_step = 2;
    return pretrain(c, testsupport::temp_dir("trainer_teacher")).final_checkpoint;
  }();
  return path;
}

TrainState fresh(const RunConfig& c, const TrainData& d) {
  torch::manual_seed(c.seed);
  return init_state(c, d);
}

}  // namespace

// ---------------------------------------------------------------------------
// schedules and optimizers

TEST_CASE("learning rate schedule") {
  OptimizerConfig o;
  o.lr = 1e-3;
  o.min_lr = 1e-5;
  o.warmup_fraction = 0.0;
  CHECK(learning_rate(o, 0, 100) == doctest::Approx(1e-3).epsilon(1e-12));
  CHECK(learning_rate(o, 99, 100) == doctest::Approx(1e-5).epsilon(1e-12));
  for (int s : {10, 37, 64}) {
    const double expected = 1e-5 + (1e-3 - 1e-5) * 0.5 * (1.0 + std::cos(M_PI * s / 99.0));
    CHECK(learning_rate(o, s, 100) == doctest::Approx(expected).epsilon(1e-12));
  }
  o.warmup_fraction = 0.1;
  CHECK(learning_rate(o, 0, 100) == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK(learning_rate(o, 9, 100) == doctest::Approx(1e-3).epsilon(1e-12));
  CHECK(learning_rate(o, 10, 100) == doctest::Approx(1e-3).epsilon(1e-12));
  CHECK(learning_rate(o, 99, 100) == doctest::Approx(1e-5).epsilon(1e-12));
  double prev = 1.0;
  for (int s = 10; s < 100; ++s) {
    const double lr = learning_rate(o, s, 100);
    CHECK(lr <= prev);
    prev = lr;
  }
}

TEST_CASE("optimizer construction and AdamW first step") {
  OptimizerConfig o;
  o.name = "sgd";
  CHECK_THROWS_AS(build_optimizer(o, {}), ValidationError);

  o = OptimizerConfig{};
  o.weight_decay = 0.5;
  auto bias = torch::ones({3}).requires_grad_(true);
  auto weight = torch::ones({2, 2}).requires_grad_(true);
  auto opt = build_optimizer(o, {{"layer.bias", bias}, {"layer.weight", weight}});
  (bias * 2.0).sum().backward();
  (weight * -3.0).sum().backward();
  opt->step(0.1);
  // bias-corrected first step moves by lr * g / (|g| + eps); only the matrix decays
  CHECK(bias[0].item<double>() == doctest::Approx(1.0 - 0.1 * 2.0 / (2.0 + 1e-8)).epsilon(1e-6));
  CHECK(weight[0][0].item<double>() == doctest::Approx(1.0 * (1.0 - 0.1 * 0.5) + 0.1 * 3.0 / (3.0 + 1e-8)).epsilon(1e-6));
  CHECK(opt->steps_taken() == 1);

  o.name = "adafactor";
  auto w2 = torch::ones({4, 3}).requires_grad_(true);
  auto ada = build_optimizer(o, {{"w.weight", w2}});
  (w2 * w2).sum().backward();
  ada->step(0.01);
  CHECK((w2 < 1.0).all().item<bool>());
}

TEST_CASE("optimizer state survives a checkpoint round trip") {
  OptimizerConfig o;
  auto a = torch::ones({3}).requires_grad_(true);
  auto opt = build_optimizer(o, {{"a", a}});
  (a * a).sum().backward();
  opt->step(0.1);
  model::Checkpoint ck;
  opt->save(ck);
  auto b = a.detach().clone().requires_grad_(true);
  auto opt2 = build_optimizer(o, {{"a", b}});
  opt2->load(ck);
  CHECK(opt2->steps_taken() == 1);
  for (auto* p : {&a, &b}) {
    p->mutable_grad() = torch::full({3}, 0.5);
  }
  opt->step(0.1);
  opt2->step(0.1);
  CHECK(torch::equal(a, b));
}

// ---------------------------------------------------------------------------
// data

TEST_CASE("train and holdout splits are disjoint and batches deterministic") {
  const auto c = tiny_config();
  TrainData d(tiny_dataset(), c);
  std::set<int> train(d.train_indices().begin(), d.train_indices().end());
  for (int h : d.holdout_indices()) CHECK(train.count(h) == 0);
  CHECK(train.size() + d.holdout_indices().size() == 40);
  const auto a = d.batch_indices(5, 4, 0);
  CHECK(a == d.batch_indices(5, 4, 0));
  CHECK(a != d.batch_indices(5, 4, 1));
  for (int i : a) CHECK(train.count(i) == 1);
}

// ---------------------------------------------------------------------------
// step-level properties

TEST_CASE("zero mask ratio with the ibot objective gives a zero patch loss") {
  auto c = tiny_config();
  c.patch_objective = PatchObjective::ibot;
  c.mask_ratio = 0.0;
  TrainData d(tiny_dataset(), c);
  auto s = fresh(c, d);
  const auto t = compute_step_losses(make_batch(d, c, 0), s, c, d);
  CHECK(t.patch.item<double>() == 0.0);
  CHECK(t.patch_masked.item<double>() == 0.0);
  CHECK(t.patch_visible.item<double>() > 0.0);
}

TEST_CASE("ibot++ patch loss splits into visible and masked parts") {
  auto c = tiny_config();
  TrainData d(tiny_dataset(), c);
  auto s = fresh(c, d);
  const auto t = compute_step_losses(make_batch(d, c, 0), s, c, d);
  const double total = t.patch.item<double>();
  const double parts = t.patch_visible.item<double>() + t.patch_masked.item<double>();
  CHECK(std::abs(total - parts) <= 1e-5 * std::abs(total));
  CHECK(t.mask.sum().item<std::int64_t>() == 4 * std::lround(0.75 * 16));
}

TEST_CASE("ibot gives visible student tokens no gradient, ibot++ does") {
  for (auto obj : {PatchObjective::ibot, PatchObjective::ibot_pp}) {
    auto c = tiny_config();
    c.patch_objective = obj;
    TrainData d(tiny_dataset(), c);
    auto s = fresh(c, d);
    auto t = compute_step_losses(make_batch(d, c, 0), s, c, d);
    const auto grad = torch::autograd::grad({t.patch}, {t.student_patches})[0];
    const auto visible = t.mask.logical_not();
    const double visible_norm = grad.index({visible}).norm().item<double>();
    if (obj == PatchObjective::ibot) {
      CHECK(visible_norm == 0.0);
    } else {
      CHECK(visible_norm > 0.0);
    }
    CHECK(grad.index({t.mask}).norm().item<double>() > 0.0);
  }
}

TEST_CASE("identical student and teacher give a visible loss equal to the teacher entropy") {
  auto c = tiny_config();
  c.mask_ratio = 0.0;
  c.ema.scope = ema::EmaScope::head_only;
  c.student_temperature = 0.1;
  c.teacher_temperature = 0.1;
  TrainData d(tiny_dataset(), c);
  auto s = fresh(c, d);
  const auto t = compute_step_losses(make_batch(d, c, 0), s, c, d);
  const auto p = torch::softmax(t.teacher_patch_logits.to(torch::kFloat64) / 0.1, -1);
  const double entropy = -(p * p.log()).sum({1, 2}).mean().item<double>();
  CHECK(t.patch_visible.item<double>() == doctest::Approx(entropy).epsilon(1e-4));
}

TEST_CASE("non-finite parameters raise a numeric error naming the loss") {
  auto c = tiny_config();
  TrainData d(tiny_dataset(), c);
  auto s = fresh(c, d);
  {
    torch::NoGradGuard g;
    s.student.log_logit_scale.fill_(NAN);
  }
  try {
    pretrain_step(make_batch(d, c, 0), s, c, d);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("clip") != std::string::npos);
  }
}

TEST_CASE("resolution switch grows the patch count") {
  auto c = tiny_config();
  c.resolutions.switch_step = 2;
  TrainData d(tiny_dataset(), c);
  auto s = fresh(c, d);
  std::vector<std::int64_t> tokens;
  for (std::int64_t k = 0; k < 4; ++k) {
    maybe_switch_stage(s, c);
    CHECK(s.stage == (k < 2 ? 1 : 2));
    const auto m = pretrain_step(make_batch(d, c, k), s, c, d);
    CHECK(metric(m, "stage") == s.stage);
    tokens.push_back(s.student.encoder->pos_rows() * s.student.encoder->pos_cols());
  }
  const double ratio = std::pow(double(c.resolutions.stage2_global) / c.resolutions.stage1_global, 2);
  CHECK(tokens[3] == static_cast<std::int64_t>(tokens[0] * ratio));
}

TEST_CASE("switch at the final step keeps a single stage") {
  auto c = tiny_config();
  c.steps = 3;
  c.resolutions.switch_step = 3;
  const auto r = pretrain(c, testsupport::temp_dir("trainer_single"));
  std::ifstream in(r.metrics);
  int lines = 0;
  for (std::string line; std::getline(in, line); ++lines) {
    CHECK(nlohmann::json::parse(line).at("stage").get<int>() == 1);
  }
  CHECK(lines == 3);
  CHECK(ResolutionSchedule{}.resolved_switch(10000) == 9000);
}

// ---------------------------------------------------------------------------
// runs

TEST_CASE("identical runs produce byte-identical metrics and checkpoints") {
  const auto c = tiny_config();
  const auto a = pretrain(c, testsupport::temp_dir("trainer_det_a"));
  const auto b = pretrain(c, testsupport::temp_dir("trainer_det_b"));
  CHECK(testsupport::read_file(a.metrics) == testsupport::read_file(b.metrics));
  CHECK(testsupport::read_file(a.final_checkpoint) == testsupport::read_file(b.final_checkpoint));
  CHECK(fs::exists(a.run_dir / "checkpoints" / checkpoint_name(2)));
  CHECK(fs::exists(a.run_dir / "config.yaml"));
  CHECK(checkpoint_name(12) == "step_000012.ckpt");
}

TEST_CASE("a resumed run matches an uninterrupted one") {
  auto c = tiny_config();
  c.resolutions.switch_step = 3;
  const auto full = pretrain(c, testsupport::temp_dir("trainer_full"));

  const auto dir = testsupport::temp_dir("trainer_resume");
  auto opts = with_data();
  opts.stop_after = 4;
  pretrain(c, dir, opts);
  CHECK_FALSE(fs::exists(dir / "checkpoints" / "final.ckpt"));
  opts.stop_after = -1;
  opts.resume = dir / "checkpoints" / checkpoint_name(2);
  const auto resumed = pretrain(c, dir, opts);
  CHECK(testsupport::read_file(full.metrics) == testsupport::read_file(resumed.metrics));
  CHECK(testsupport::read_file(full.final_checkpoint) == testsupport::read_file(resumed.final_checkpoint));
}

TEST_CASE("resume rejects an incompatible checkpoint") {
  auto c = tiny_config();
  const auto dir = testsupport::temp_dir("trainer_incompat");
  auto opts = with_data();
  opts.resume = teacher_checkpoint();
  c.model.head.prototypes = 32;
  CHECK_THROWS_AS(pretrain(c, dir, opts), LoadError);
}

TEST_CASE("a missing dataset is an I/O error") {
  auto c = tiny_config();
  c.data.dir = (testsupport::temp_dir("trainer_nodata") / "absent").string();
  CHECK_THROWS_AS(run_pretraining(c, testsupport::temp_dir("trainer_nodata_run"), config::serialize_config), IoError);
}

TEST_CASE("frozen teacher is unchanged by distillation") {
  const auto c = distill_config(teacher_checkpoint());
  TrainData d(tiny_dataset(), c);
  auto s = fresh(c, d);
  const auto before = model::parameter_checksum(*s.teacher.encoder) ^ model::parameter_checksum(*s.teacher.head);
  const auto student_before = model::parameter_checksum(*s.student.encoder);
  for (std::int64_t k = 0; k < 3; ++k) distill_step(make_batch(d, c, k), s, c, d);
  CHECK((model::parameter_checksum(*s.teacher.encoder) ^ model::parameter_checksum(*s.teacher.head)) == before);
  CHECK(model::parameter_checksum(*s.student.encoder) != student_before);
}

TEST_CASE("distillation with a random student and no mask") {
  const auto c = distill_config(teacher_checkpoint());
  const auto r = run_distillation(c, teacher_checkpoint(), testsupport::temp_dir("trainer_d0"), config::serialize_config,
                                  with_data());
  CHECK(fs::exists(r.final_checkpoint));
  const auto ck = model::load_checkpoint(r.final_checkpoint.string());
  CHECK(ck.meta.at("mode") == "distill");
  CHECK(ck.meta.at("teacher_provenance").find("frozen") != std::string::npos);
}

TEST_CASE("distillation from a pretrained student starts at the teacher weights") {
  auto c = distill_config(teacher_checkpoint());
  c.init.student_encoder = InitSource::checkpoint;
  c.init.text = InitSource::checkpoint;
  c.init.text_frozen = true;
  TrainData d(tiny_dataset(), c);
  auto s = fresh(c, d);
  CHECK(model::parameter_checksum(*s.student.encoder) == model::parameter_checksum(*s.teacher.encoder));
  const auto text_before = model::parameter_checksum(*s.student.text);
  const double scale_before = s.student.logit_scale();
  for (std::int64_t k = 0; k < 2; ++k) distill_step(make_batch(d, c, k), s, c, d);
  CHECK(model::parameter_checksum(*s.student.text) == text_before);
  CHECK(s.student.logit_scale() == scale_before);
  CHECK(model::parameter_checksum(*s.student.encoder) != model::parameter_checksum(*s.teacher.encoder));
}

TEST_CASE("config validation names the offending field") {
  auto c = tiny_config();
  c.mask_ratio = 1.5;
  try {
    c.validate();
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("mask_ratio") != std::string::npos);
  }
  c = tiny_config();
  c.ema.scope = ema::EmaScope::frozen;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = tiny_config();
  c.resolutions.stage1_global = 36;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = tiny_config();
  c.init.student_encoder = InitSource::checkpoint;
  CHECK_THROWS_AS(c.validate(), ValidationError);
}

TEST_CASE("trained model loads at the final resolution") {
  const auto tm = load_trained_model(teacher_checkpoint());
  CHECK(tm.eval_resolution == 64);
  CHECK(tm.encoder->pos_rows() == 8);
  CHECK_THROWS_AS(load_trained_model(testsupport::temp_dir("trainer_none") / "x.ckpt"), LoadError);
}
