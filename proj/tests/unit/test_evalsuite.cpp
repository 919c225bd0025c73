#include "testing.hpp"

#include <cmath>
#include <fstream>

#include "oracles.hpp"
#include "support.hpp"
#include "tipslab/errors.hpp"
#include "tipslab/evalsuite.hpp"

using namespace tipslab;
using namespace tipslab::eval;

namespace {

namespace F = torch::nn::functional;

torch::Tensor unit_rows(const torch::Tensor& x) { return F::normalize(x, F::NormalizeFuncOptions().dim(-1)); }

ClassPromptSet prompts_from(const torch::Tensor& emb, std::vector<int> ids) {
  ClassPromptSet p;
  p.class_ids = std::move(ids);
  for (int id : p.class_ids) p.names.push_back("c" + std::to_string(id));
  p.embeddings = emb;
  return p;
}

LabelMap random_labels(int h, int w, int classes, Rng& rng) {
  LabelMap m(h, w);
  for (auto& l : m.labels) l = static_cast<std::uint8_t>(rng.below(static_cast<std::uint64_t>(classes)));
  return m;
}

trainer::TrainedModel random_model() {
  torch::manual_seed(0);
  trainer::TrainedModel tm;
  auto& c = tm.config;
  c.image.embed_dim = 16;
  c.image.depth = 1;
  c.image.heads = 2;
  c.image.proj_dim = 8;
  c.text.embed_dim = 16;
  c.text.depth = 1;
  c.text.heads = 2;
  c.text.proj_dim = 8;
  c.head.in_dim = 16;
  tm.encoder = model::ImageEncoder(c.image);
  tm.head = model::ProjectionHead(c.head);
  tm.text = model::TextEncoder(c.text, tm.vocab.size());
  tm.eval_resolution = 64;
  return tm;
}

}  // namespace

// ---------------------------------------------------------------------------
// zero-shot segmentation

TEST_CASE("patches equal to one class embedding are all labeled with it") {
  const auto emb = unit_rows(torch::randn({4, 6}, torch::kFloat64));
  const auto p = prompts_from(emb, {3, 5, 7, 9});
  const auto feats = emb[2].unsqueeze(0).expand({6, 6}).clone();
  const auto pred = segment_features(feats, 2, 3, p, 16, 24);
  CHECK(pred.pixels.height == 16);
  CHECK(pred.pixels.width == 24);
  for (auto l : pred.pixels.labels) CHECK(l == 7);
}

TEST_CASE("segmentation labels are invariant to positive rescaling") {
  const auto emb = torch::randn({5, 8}, torch::kFloat64);
  const auto feats = torch::randn({12, 8}, torch::kFloat64);
  const auto p = prompts_from(emb, {1, 2, 3, 4, 5});
  const auto a = segment_features(feats, 3, 4, p, 3, 4);
  const auto scaled_feats = feats * torch::rand({12, 1}, torch::kFloat64).add(0.1) * 10.0;
  const auto b = segment_features(scaled_feats, 3, 4, prompts_from(emb * 3.5, {1, 2, 3, 4, 5}), 3, 4);
  CHECK(a.patch_labels == b.patch_labels);
}

TEST_CASE("2x2 grid with a hand-set similarity table") {
  // class axes e0, e1, e2; patch directions chosen so the argmax is known
  const auto emb = torch::eye(3, torch::kFloat64);
  const auto feats = torch::tensor({{0.9, 0.1, 0.0}, {0.2, 0.3, 0.8}, {0.1, 0.7, 0.6}, {0.5, 0.4, 0.45}}, torch::kFloat64);
  const auto pred = segment_features(feats, 2, 2, prompts_from(emb, {0, 1, 2}), 4, 4);
  CHECK(pred.patch_labels == std::vector<int>{0, 2, 1, 0});
  CHECK(pred.pixels.at(0, 0) == 0);
  CHECK(pred.pixels.at(0, 3) == 2);
  CHECK(pred.pixels.at(3, 0) == 1);
  CHECK(pred.pixels.at(3, 3) == 0);
}

TEST_CASE("segmentation rejects empty prompt sets") {
  ClassPromptSet empty;
  CHECK_THROWS_AS(segment_features(torch::randn({4, 3}), 2, 2, empty, 4, 4), ValidationError);
  CHECK_THROWS_AS(segment_features(torch::randn({5, 3}), 2, 2, prompts_from(torch::eye(3), {0, 1, 2}), 4, 4),
                  ValidationError);
}

TEST_CASE("zero-shot segmentation with an untrained model stays in the class table") {
  auto tm = random_model();
  const auto with_bg = build_prompts(tm, true);
  const auto without_bg = build_prompts(tm, false);
  CHECK(with_bg.class_ids.size() == static_cast<std::size_t>(synth::num_classes()));
  CHECK(without_bg.class_ids.size() == static_cast<std::size_t>(synth::num_classes() - 1));
  CHECK(without_bg.names.front() == synth::class_name(1));
  const auto s = synth::make_sample(0, 0, 64);
  const auto pred = zero_shot_segment(s.image, without_bg, tm);
  CHECK(pred.pixels.height == 64);
  CHECK(pred.grid_rows == 8);
  for (auto l : pred.pixels.labels) {
    CHECK(l >= 1);
    CHECK(l < synth::num_classes());
  }
  CHECK(apply_template("a photo of {}", "red circle") == "a photo of red circle");
}

TEST_CASE("nearest upsampling") {
  const auto up = upsample_nearest({1, 2, 3, 4}, 2, 2, 4, 6);
  CHECK(up.at(0, 0) == 1);
  CHECK(up.at(1, 2) == 1);
  CHECK(up.at(1, 3) == 2);
  CHECK(up.at(2, 0) == 3);
  CHECK(up.at(3, 5) == 4);
  CHECK_THROWS_AS(upsample_nearest({1, 2, 3}, 2, 2, 4, 4), ValidationError);
}

// ---------------------------------------------------------------------------
// mIoU

TEST_CASE("miou examples") {
  Rng rng(1);
  const auto gt = random_labels(8, 8, 5, rng);
  CHECK(miou(gt, gt, 5, false) == 1.0);
  LabelMap a(4, 4), b(4, 4);
  std::fill(a.labels.begin(), a.labels.end(), 1);
  std::fill(b.labels.begin(), b.labels.end(), 2);
  CHECK(miou(a, b, 3, false) == 0.0);
  CHECK_THROWS_AS(miou(a, LabelMap(4, 5), 3, false), ValidationError);
}

TEST_CASE("miou matches the counting oracle") {
  Rng rng(2);
  for (int t = 0; t < 60; ++t) {
    const int c = 2 + static_cast<int>(rng.below(5));
    const auto p = random_labels(8, 8, c, rng);
    const auto g = random_labels(8, 8, c, rng);
    for (bool bg : {false, true}) CHECK(miou(p, g, c, bg) == testsupport::oracle_miou(p, g, c, bg));
  }
}

TEST_CASE("miou is invariant to consistent relabeling and mergeable") {
  Rng rng(3);
  const std::vector<std::uint8_t> perm = {0, 3, 1, 4, 2};
  for (int t = 0; t < 20; ++t) {
    auto p = random_labels(6, 6, 5, rng), g = random_labels(6, 6, 5, rng);
    auto pp = p, gp = g;
    for (auto& l : pp.labels) l = perm[l];
    for (auto& l : gp.labels) l = perm[l];
    CHECK(miou(p, g, 5, true) == doctest::Approx(miou(pp, gp, 5, true)).epsilon(1e-12));
  }
  auto p1 = random_labels(4, 4, 3, rng), g1 = random_labels(4, 4, 3, rng);
  auto p2 = random_labels(4, 4, 3, rng), g2 = random_labels(4, 4, 3, rng);
  IouCounts a(3), b(3);
  a.add(p1, g1, false);
  b.add(p2, g2, false);
  a.merge(b);
  LabelMap pc(8, 4), gc(8, 4);
  std::copy(p1.labels.begin(), p1.labels.end(), pc.labels.begin());
  std::copy(p2.labels.begin(), p2.labels.end(), pc.labels.begin() + 16);
  std::copy(g1.labels.begin(), g1.labels.end(), gc.labels.begin());
  std::copy(g2.labels.begin(), g2.labels.end(), gc.labels.begin() + 16);
  CHECK(a.miou(false) == miou(pc, gc, 3, false));
}

// ---------------------------------------------------------------------------
// KNN and retrieval

TEST_CASE("knn examples") {
  const auto g = unit_rows(torch::randn({10, 4}, torch::kFloat64));
  std::vector<int> labels = {0, 1, 2, 0, 1, 2, 0, 1, 2, 3};
  CHECK(knn_classify(g[4].unsqueeze(0), g, labels, 1) == std::vector<int>{1});
  const std::vector<int> same(10, 6);
  const auto q = torch::randn({7, 4}, torch::kFloat64);
  for (int l : knn_classify(q, g, same, 5)) CHECK(l == 6);
  CHECK_THROWS_AS(knn_classify(q, torch::zeros({0, 4}), {}, 1), ValidationError);
  CHECK_THROWS_AS(knn_classify(q, g, labels, 11), ValidationError);
}

TEST_CASE("knn matches the exhaustive oracle and ignores rotations") {
  Rng rng(4);
  for (int t = 0; t < 50; ++t) {
    const auto g = torch::randn({20, 5}, torch::kFloat64);
    const auto q = torch::randn({6, 5}, torch::kFloat64);
    std::vector<int> labels(20);
    for (auto& l : labels) l = static_cast<int>(rng.below(4));
    const int k = 1 + static_cast<int>(rng.below(7));
    const auto got = knn_classify(q, g, labels, k);
    CHECK(got == testsupport::oracle_knn(q, g, labels, k));
    const auto rot = std::get<0>(torch::linalg_qr(torch::randn({5, 5}, torch::kFloat64)));
    CHECK(knn_classify(q.matmul(rot), g.matmul(rot), labels, k) == got);
  }
}

TEST_CASE("knn ties go to the nearest neighbour's class") {
  const auto g = torch::tensor({{1.0, 0.0}, {0.9, 0.1}, {0.0, 1.0}, {0.1, 0.9}}, torch::kFloat64);
  const auto q = torch::tensor({{0.2, 1.0}}, torch::kFloat64);
  CHECK(knn_classify(q, g, {5, 5, 7, 7}, 4) == std::vector<int>{7});
}

TEST_CASE("retrieval examples") {
  const auto e = unit_rows(torch::randn({6, 6}, torch::kFloat64));
  const auto r = retrieval_recall_at_1(e, e);
  CHECK(r.i2t == 1.0);
  CHECK(r.t2i == 1.0);
  const auto eye = torch::eye(4, torch::kFloat64);
  const auto anti = eye.flip(0);
  const auto z = retrieval_recall_at_1(eye, anti);
  CHECK(z.i2t == 0.0);
  CHECK(z.t2i == 0.0);
  CHECK_THROWS_AS(retrieval_recall_at_1(eye, torch::eye(3)), ValidationError);
}

TEST_CASE("retrieval matches the argmax oracle and is permutation invariant") {
  for (int t = 0; t < 50; ++t) {
    const auto a = unit_rows(torch::randn({10, 4}, torch::kFloat64));
    const auto b = unit_rows(a + 0.8 * torch::randn({10, 4}, torch::kFloat64));
    const auto r = retrieval_recall_at_1(a, b);
    const auto [i2t, t2i] = testsupport::oracle_recall(a, b);
    CHECK(r.i2t == i2t);
    CHECK(r.t2i == t2i);
    const auto perm = torch::randperm(10, torch::kLong);
    const auto rp = retrieval_recall_at_1(a.index_select(0, perm), b.index_select(0, perm));
    CHECK(rp.i2t == r.i2t);
    CHECK(rp.t2i == r.t2i);
  }
}

// ---------------------------------------------------------------------------
// probe

TEST_CASE("probe separates linearly separable classes") {
  auto x = torch::randn({400, 4}, torch::kFloat64);
  std::vector<int> y(400);
  for (int i = 0; i < 400; ++i) {
    y[i] = i % 2;
    x[i][0] = (y[i] ? 3.0 : -3.0) + 0.3 * x[i][0].item<double>();
  }
  const auto r = linear_patch_probe(x.narrow(0, 0, 200), {y.begin(), y.begin() + 200}, x.narrow(0, 200, 200),
                                    {y.begin() + 200, y.end()}, 2);
  CHECK(r.miou == 1.0);
  CHECK(r.excluded_classes.empty());
}

TEST_CASE("probe on shuffled labels scores near chance") {
  torch::manual_seed(5);
  Rng rng(5);
  const int c = 4, n = 1000;
  const auto xtr = torch::randn({n, 8}, torch::kFloat64);
  const auto xte = torch::randn({n, 8}, torch::kFloat64);
  std::vector<int> ytr(n), yte(n);
  for (auto& l : ytr) l = static_cast<int>(rng.below(c));
  for (auto& l : yte) l = static_cast<int>(rng.below(c));
  const auto r = linear_patch_probe(xtr, ytr, xte, yte, c);

  // Monte-Carlo chance: mIoU of predictions that carry no information
  double chance = 0.0;
  LabelMap gt(1, n), pr(1, n);
  for (int i = 0; i < n; ++i) gt.labels[i] = static_cast<std::uint8_t>(yte[i]);
  for (int t = 0; t < 200; ++t) {
    for (auto& l : pr.labels) l = static_cast<std::uint8_t>(rng.below(c));
    chance += testsupport::oracle_miou(pr, gt, c, false) / 200.0;
  }
  MESSAGE("probe " << r.miou << " chance " << chance << " 1/C " << 1.0 / c);
  CHECK(std::abs(r.miou - chance) <= 0.1);

  const auto again = linear_patch_probe(xtr, ytr, xte, yte, c);
  CHECK(again.predictions == r.predictions);
  CHECK(again.miou == r.miou);
}

TEST_CASE("probe excludes classes absent from training") {
  auto x = torch::randn({60, 3}, torch::kFloat64);
  std::vector<int> ytr(30), yte(30);
  for (int i = 0; i < 30; ++i) {
    ytr[i] = i % 2;
    yte[i] = i % 3;
  }
  const auto r = linear_patch_probe(x.narrow(0, 0, 30), ytr, x.narrow(0, 30, 30), yte, 3);
  CHECK(r.excluded_classes == std::vector<int>{2});
  CHECK_FALSE(r.warnings.empty());
  for (int p : r.predictions) CHECK(p != 2);
}

TEST_CASE("patch majority labels") {
  LabelMap m(4, 4);
  // top-left patch: three 2s and one 1; top-right: tie between 3 and 5
  m.at(0, 0) = 2, m.at(0, 1) = 2, m.at(1, 0) = 2, m.at(1, 1) = 1;
  m.at(0, 2) = 5, m.at(0, 3) = 5, m.at(1, 2) = 3, m.at(1, 3) = 3;
  const auto l = patch_majority_labels(m, 2);
  CHECK(l == std::vector<int>{2, 3, 0, 0});
  CHECK_THROWS_AS(patch_majority_labels(m, 3), ValidationError);
}

// ---------------------------------------------------------------------------
// PCA

TEST_CASE("constant embeddings give a gray map") {
  const auto m = pca_map(torch::ones({6, 5}), 2, 3);
  CHECK(m.rank == 0);
  for (float v : m.grid.data) CHECK(v == 0.5f);
  CHECK_THROWS_AS(pca_map(torch::ones({2, 5}), 1, 2), ValidationError);
}

TEST_CASE("embeddings along one axis give a single-channel gradient") {
  auto x = torch::zeros({4, 3}, torch::kFloat64);
  for (int i = 0; i < 4; ++i) x[i][1] = static_cast<double>(i);
  const auto m = pca_map(x, 2, 2);
  CHECK(m.rank == 1);
  CHECK(m.grid.at(0, 0, 0) == doctest::Approx(0.0));
  CHECK(m.grid.at(1, 1, 0) == doctest::Approx(1.0));
  CHECK(m.grid.at(0, 1, 0) == doctest::Approx(1.0 / 3.0));
  for (int i = 0; i < 4; ++i) {
    CHECK(m.grid.at(i / 2, i % 2, 1) == 0.5f);
    CHECK(m.grid.at(i / 2, i % 2, 2) == 0.5f);
  }
}

TEST_CASE("4-patch hand instance") {
  // points (1,0), (-1,0), (0,2), (0,-2): covariance diag(1/2, 2)
  const auto x = torch::tensor({{1.0, 0.0}, {-1.0, 0.0}, {0.0, 2.0}, {0.0, -2.0}}, torch::kFloat64);
  const auto m = pca_map(x, 2, 2);
  REQUIRE(m.eigenvalues.size() == 2);
  CHECK(m.eigenvalues[0] == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(m.eigenvalues[1] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(m.rank == 2);
  const std::vector<float> first = {0.5f, 0.5f, 1.0f, 0.0f};
  const std::vector<float> second = {1.0f, 0.0f, 0.5f, 0.5f};
  for (int i = 0; i < 4; ++i) {
    CHECK(m.grid.at(i / 2, i % 2, 0) == doctest::Approx(first[i]).epsilon(1e-9));
    CHECK(m.grid.at(i / 2, i % 2, 1) == doctest::Approx(second[i]).epsilon(1e-9));
    CHECK(m.grid.at(i / 2, i % 2, 2) == 0.5f);
  }
}

TEST_CASE("pca matches the eigensolver oracle on random instances") {
  for (int t = 0; t < 50; ++t) {
    const auto x = torch::randn({12, 5}, torch::kFloat64) * torch::tensor({3.0, 2.0, 1.5, 1.0, 0.5}, torch::kFloat64);
    const auto m = pca_map(x, 3, 4);
    const auto o = testsupport::oracle_pca(x);
    for (std::size_t i = 0; i < o.eigenvalues.size(); ++i) {
      CHECK(std::abs(m.eigenvalues[i] - o.eigenvalues[i]) <= 1e-6 * std::max(1.0, o.eigenvalues[0]));
    }
    CHECK((m.components - o.projections).abs().max().item<double>() <= 1e-6);
  }
  const auto up = upsample_image(pca_map(torch::randn({4, 3}), 2, 2).grid, 8, 8);
  CHECK(up.height == 8);
}

// ---------------------------------------------------------------------------
// telemetry and reports

TEST_CASE("patch-loss curve files") {
  const auto dir = testsupport::temp_dir("eval_curve");
  {
    std::ofstream out(dir / "metrics.jsonl");
    for (int s = 0; s < 7; ++s) {
      out << nlohmann::json{{"step", s}, {"loss/patch_visible", 1.0 / (s + 1)}, {"loss/patch_masked", 2.0}}.dump()
          << '\n';
    }
  }
  const auto curve = patch_loss_report(dir / "metrics.jsonl", dir / "eval", "run");
  CHECK(curve.steps.size() == 7);
  CHECK(curve.visible.back() < curve.visible.front());
  std::ifstream csv(dir / "eval" / "patch_loss.csv");
  int rows = 0;
  std::string header;
  std::getline(csv, header);
  CHECK(header == "step,loss_patch_visible,loss_patch_masked");
  for (std::string line; std::getline(csv, line);) ++rows;
  CHECK(rows == 7);
  CHECK(std::filesystem::exists(dir / "eval" / "patch_loss.svg"));

  std::ofstream(dir / "bad.jsonl") << nlohmann::json{{"step", 0}, {"loss/clip", 1.0}}.dump() << '\n';
  CHECK_THROWS_AS(read_patch_loss_curve(dir / "bad.jsonl", "bad"), ValidationError);
}

TEST_CASE("report json round trip") {
  EvalReport r;
  r.zero_shot_miou_with_background = 0.25;
  r.zero_shot_miou_without_background = 0.5;
  r.knn_top1 = 0.75;
  r.i2t_r1 = 0.125;
  r.t2i_r1 = 0.375;
  r.probe_miou = 0.625;
  const auto j = r.to_json();
  CHECK(j.at("zero_shot_miou").at("without_background").get<double>() == 0.5);
  const auto back = EvalReport::from_json(nlohmann::json::parse(j.dump()));
  CHECK(back.knn_top1 == 0.75);
  CHECK(back.probe_miou == 0.625);
  CHECK(back.zero_shot_miou_with_background == 0.25);
}

TEST_CASE("primary class comes from the short caption") {
  const auto s = synth::make_sample(2, 4, 64);
  const int c = primary_class(s.captions);
  CHECK(("a " + synth::class_name(c)) == s.captions.short_text);
  CHECK_THROWS_AS(primary_class({"a purple blob", "", ""}), ValidationError);
}
