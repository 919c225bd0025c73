#include "testing.hpp"

#include <cmath>

#include "support.hpp"
#include "tipslab/ema.hpp"
#include "tipslab/errors.hpp"

using namespace tipslab;
using namespace tipslab::ema;

namespace {

model::ModelConfig tiny_config() {
  model::ModelConfig c;
  c.image.embed_dim = 16;
  c.image.depth = 2;
  c.image.heads = 2;
  c.image.pos_rows = 4;
  c.image.pos_cols = 4;
  c.image.proj_dim = 8;
  c.text.embed_dim = 16;
  c.text.heads = 2;
  c.text.proj_dim = 8;
  c.text.max_len = 10;
  c.head.in_dim = 16;
  c.head.hidden_dim = 32;
  c.head.bottleneck_dim = 8;
  c.head.prototypes = 12;
  return c;
}

StudentModules make_student(const model::ModelConfig& c) {
  return {model::ImageEncoder(c.image), model::ProjectionHead(c.head)};
}

void perturb(torch::nn::Module& m) {
  torch::NoGradGuard g;
  for (auto& p : m.parameters()) p.add_(torch::randn_like(p) * 0.1);
}

EmaConfig scope(EmaScope s) {
  EmaConfig c;
  c.scope = s;
  return c;
}

}  // namespace

TEST_CASE("scalar EMA examples") {
  std::vector<torch::Tensor> t = {torch::ones({3}, torch::kFloat64)};
  ema_update_tensors(t, {torch::zeros({3}, torch::kFloat64)}, 0.99);
  CHECK(t[0][0].item<double>() == doctest::Approx(0.99).epsilon(1e-15));

  std::vector<torch::Tensor> u = {torch::randn({4})};
  const auto s = torch::randn({4});
  ema_update_tensors(u, {s}, 0.0);
  CHECK(torch::equal(u[0], s));
}

TEST_CASE("k EMA steps follow the geometric series") {
  const double lambda = 0.9, t0 = 2.5, s = -1.25;
  std::vector<torch::Tensor> t = {torch::full({5}, t0, torch::kFloat64)};
  const auto st = torch::full({5}, s, torch::kFloat64);
  for (int k = 0; k < 10; ++k) ema_update_tensors(t, {st}, lambda);
  const double lk = std::pow(lambda, 10);
  const double expected = lk * t0 + (1.0 - lk) * s;
  CHECK((t[0] - expected).abs().max().item<double>() <= 1e-10);
}

TEST_CASE("ema_update_tensors rejects mismatched lists") {
  std::vector<torch::Tensor> t = {torch::ones({3})};
  CHECK_THROWS_AS(ema_update_tensors(t, {}, 0.5), ContractError);
  CHECK_THROWS_AS(ema_update_tensors(t, {torch::ones({4})}, 0.5), ContractError);
}

TEST_CASE("head_only teacher aliases the student encoder") {
  const auto c = tiny_config();
  auto student = make_student(c);
  auto teacher = make_teacher(student, scope(EmaScope::head_only));
  CHECK(teacher.encoder_aliases(student));
  CHECK(teacher.head.ptr() != student.head.ptr());
  const auto img = torch::randn({2, 3, 32, 32});
  for (int step = 0; step < 5; ++step) {
    perturb(*student.encoder);
    perturb(*student.head);
    ema_update(teacher, student, 0.9);
    torch::NoGradGuard g;
    CHECK(torch::equal(teacher.encoder->forward(img).patches, student.encoder->forward(img).patches));
  }
  for (const auto& p : teacher.head->parameters()) CHECK_FALSE(p.requires_grad());
}

TEST_CASE("full teacher is an independent copy that trails the student") {
  const auto c = tiny_config();
  auto student = make_student(c);
  auto teacher = make_teacher(student, scope(EmaScope::full));
  CHECK_FALSE(teacher.encoder_aliases(student));
  CHECK(model::parameter_checksum(*teacher.encoder) == model::parameter_checksum(*student.encoder));
  perturb(*student.encoder);
  ema_update(teacher, student, 0.99);
  CHECK(model::parameter_checksum(*teacher.encoder) != model::parameter_checksum(*student.encoder));
  for (const auto& p : teacher.encoder->parameters()) CHECK_FALSE(p.requires_grad());

  // no gradient reaches the teacher through a loss on its output
  auto out = teacher.encoder->forward(torch::randn({1, 3, 32, 32}));
  CHECK_FALSE(out.patches.requires_grad());
}

TEST_CASE("frozen teacher is loaded from a checkpoint and refuses updates") {
  const auto dir = testsupport::temp_dir("ema_frozen");
  const auto c = tiny_config();
  auto src = make_student(c);
  model::Checkpoint ck;
  ck.meta["model_config"] = model::to_json(c);
  model::put_module(ck, kFrozenEncoderPrefix, *src.encoder);
  model::put_module(ck, kFrozenHeadPrefix, *src.head);
  const auto path = (dir / "t.ckpt").string();
  model::save_checkpoint(path, ck);

  auto student = make_student(c);
  auto teacher = make_teacher(student, scope(EmaScope::frozen), path);
  CHECK(teacher.scope == EmaScope::frozen);
  CHECK(model::parameter_checksum(*teacher.encoder) == model::parameter_checksum(*src.encoder));
  CHECK(model::parameter_checksum(*teacher.head) == model::parameter_checksum(*src.head));
  const auto before = model::parameter_checksum(*teacher.encoder);
  CHECK_THROWS_AS(ema_update(teacher, student, 0.9), ContractError);
  CHECK(model::parameter_checksum(*teacher.encoder) == before);

  CHECK_THROWS_AS(make_teacher(student, scope(EmaScope::frozen)), ValidationError);
  CHECK_THROWS_AS(make_teacher(student, scope(EmaScope::full), path), ValidationError);
  model::Checkpoint bare;
  CHECK_THROWS_AS(make_frozen_teacher(bare, "x"), LoadError);
}

TEST_CASE("shared scope is experimental and performs no averaging") {
  const auto c = tiny_config();
  auto student = make_student(c);
  auto cfg = scope(EmaScope::shared);
  CHECK_THROWS_AS(make_teacher(student, cfg), ValidationError);
  cfg.allow_experimental_shared = true;
  auto teacher = make_teacher(student, cfg);
  CHECK(teacher.head.ptr() == student.head.ptr());
  CHECK_NOTHROW(ema_update(teacher, student, 0.5));
}

TEST_CASE("momentum schedules") {
  EmaConfig c;
  c.momentum = 0.99;
  CHECK(momentum_at(c, 500, 1000) == 0.99);
  c.schedule = MomentumSchedule::cosine;
  CHECK(momentum_at(c, 0, 1000) == doctest::Approx(0.99));
  CHECK(momentum_at(c, 999, 1000) == doctest::Approx(1.0));
  const double mid = momentum_at(c, 333, 1000);
  CHECK(mid > 0.99);
  CHECK(mid < 1.0);
  c.momentum = 1.0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
}

TEST_CASE("scope names round trip") {
  for (auto s : {EmaScope::full, EmaScope::head_only, EmaScope::frozen}) CHECK(parse_scope(to_string(s)) == s);
  CHECK_THROWS_AS(parse_scope("partial"), ValidationError);
}

TEST_CASE("parameter accounting matches a hand count") {
  const auto c = tiny_config();
  const auto vocab = model::Vocab::from_templates().size();
  const auto h = testsupport::hand_count(c, vocab);

  const auto full = count_trainable_params(c, scope(EmaScope::full));
  CHECK(full.trainable == h.encoder + h.head + h.text + 1);
  CHECK(full.frozen == 0);
  CHECK(full.ema_shadow == h.encoder + h.head);
  CHECK(full.total == full.trainable + full.ema_shadow);

  const auto head_only = count_trainable_params(c, scope(EmaScope::head_only));
  CHECK(head_only.trainable == full.trainable);
  CHECK(head_only.ema_shadow == h.head);
  const double expected = static_cast<double>(h.encoder) / static_cast<double>(full.total);
  CHECK(head_only.reduction_fraction == doctest::Approx(expected).epsilon(1e-12));
  CHECK(head_only.reduction_fraction > 0.0);
  CHECK(head_only.total < full.total);

  const auto frozen_text = count_trainable_params(c, scope(EmaScope::head_only), true);
  CHECK(frozen_text.frozen == h.text + 1);
  CHECK(frozen_text.trainable == h.encoder + h.head);

  const auto table = format_param_table(head_only);
  CHECK(table.find("ema_shadow " + std::to_string(h.head)) != std::string::npos);
  CHECK(table.find("reference_vit_b_reduction 0.42") != std::string::npos);
}
