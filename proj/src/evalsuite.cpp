#include "tipslab/evalsuite.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "tipslab/errors.hpp"
#include "tipslab/objectives.hpp"

namespace tipslab::eval {

namespace fs = std::filesystem;
namespace F = torch::nn::functional;

std::string apply_template(const std::string& tmpl, const std::string& name) {
  const auto pos = tmpl.find("{}");
  if (pos == std::string::npos) throw ValidationError("prompt template must contain '{}'");
  return tmpl.substr(0, pos) + name + tmpl.substr(pos + 2);
}

ClassPromptSet build_prompts(trainer::TrainedModel& model, bool include_background, const std::string& prompt_template) {
  ClassPromptSet p;
  p.prompt_template = prompt_template;
  p.include_background = include_background;
  for (int c = include_background ? 0 : 1; c < synth::num_classes(); ++c) {
    p.class_ids.push_back(c);
    p.names.push_back(apply_template(prompt_template, synth::class_name(c)));
  }
  const int max_len = model.config.text.max_len;
  auto ids = torch::empty({static_cast<std::int64_t>(p.names.size()), max_len}, torch::kInt64);
  for (std::size_t i = 0; i < p.names.size(); ++i) {
    const auto t = model::tokenize(p.names[i], model.vocab, max_len);
    for (int j = 0; j < max_len; ++j) ids[static_cast<std::int64_t>(i)][j] = t.ids[static_cast<std::size_t>(j)];
  }
  torch::NoGradGuard guard;
  p.embeddings = model.text->forward(ids);
  return p;
}

LabelMap upsample_nearest(const std::vector<int>& grid, int rows, int cols, int out_h, int out_w) {
  if (static_cast<int>(grid.size()) != rows * cols) throw ValidationError("label grid size does not match rows x cols");
  LabelMap out(out_h, out_w);
  for (int y = 0; y < out_h; ++y) {
    const int r = y * rows / out_h;
    for (int x = 0; x < out_w; ++x) {
      const int c = x * cols / out_w;
      out.at(y, x) = static_cast<std::uint8_t>(grid[static_cast<std::size_t>(r * cols + c)]);
    }
  }
  return out;
}

SegPrediction segment_features(const torch::Tensor& patch_features, int rows, int cols, const ClassPromptSet& prompts,
                               int out_h, int out_w) {
  if (prompts.class_ids.empty() || !prompts.embeddings.defined() || prompts.embeddings.size(0) == 0) {
    throw ValidationError("zero-shot segmentation needs at least one class prompt");
  }
  if (prompts.embeddings.size(0) != static_cast<std::int64_t>(prompts.class_ids.size())) {
    throw ValidationError("prompt embeddings and class ids differ in count");
  }
  if (patch_features.dim() != 2 || patch_features.size(0) != static_cast<std::int64_t>(rows) * cols) {
    throw ValidationError("patch features must be [rows * cols, P]");
  }
  SegPrediction pred;
  pred.grid_rows = rows;
  pred.grid_cols = cols;
  auto f = F::normalize(patch_features.to(torch::kFloat64), F::NormalizeFuncOptions().dim(-1));
  auto e = F::normalize(prompts.embeddings.to(torch::kFloat64), F::NormalizeFuncOptions().dim(-1));
  pred.scores = f.matmul(e.t()).contiguous();
  const auto n = pred.scores.size(0);
  const auto c = pred.scores.size(1);
  const auto* s = pred.scores.data_ptr<double>();
  pred.patch_labels.resize(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    std::int64_t best = 0;
    for (std::int64_t j = 1; j < c; ++j) {
      if (s[i * c + j] > s[i * c + best]) best = j;
    }
    pred.patch_labels[static_cast<std::size_t>(i)] = prompts.class_ids[static_cast<std::size_t>(best)];
  }
  pred.pixels = upsample_nearest(pred.patch_labels, rows, cols, out_h, out_w);
  return pred;
}

namespace {

torch::Tensor dense_features(trainer::TrainedModel& model, const torch::Tensor& images) {
  torch::NoGradGuard guard;
  auto out = model.encoder->forward(images);
  return model.encoder->dense_text_embeddings(out.values);
}

}  // namespace

SegPrediction zero_shot_segment(const ImageF& image, const ClassPromptSet& prompts, trainer::TrainedModel& model) {
  const int p = model.config.image.patch_size;
  if (image.height % p || image.width % p) throw ValidationError("image size must be a multiple of the patch size");
  auto feats = dense_features(model, trainer::image_tensor(image).unsqueeze(0));
  return segment_features(feats[0], image.height / p, image.width / p, prompts, image.height, image.width);
}

// ---------------------------------------------------------------------------

void IouCounts::add(const LabelMap& pred, const LabelMap& gt, bool ignore_background) {
  if (pred.height != gt.height || pred.width != gt.width) throw ValidationError("prediction and ground truth differ in shape");
  const int n = static_cast<int>(intersection.size());
  for (std::size_t i = 0; i < gt.labels.size(); ++i) {
    const int g = gt.labels[i];
    const int q = pred.labels[i];
    if (g >= n || q >= n) throw ValidationError("label outside the class table");
    if (ignore_background && g == 0) continue;
    if (g == q) {
      ++intersection[static_cast<std::size_t>(g)];
      ++union_[static_cast<std::size_t>(g)];
      ++present[static_cast<std::size_t>(g)];
    } else {
      ++union_[static_cast<std::size_t>(g)];
      ++union_[static_cast<std::size_t>(q)];
      ++present[static_cast<std::size_t>(g)];
      ++present[static_cast<std::size_t>(q)];
    }
  }
}

void IouCounts::merge(const IouCounts& o) {
  if (o.intersection.size() != intersection.size()) throw ValidationError("IoU counts differ in class count");
  for (std::size_t c = 0; c < intersection.size(); ++c) {
    intersection[c] += o.intersection[c];
    union_[c] += o.union_[c];
    present[c] += o.present[c];
  }
}

double IouCounts::miou(bool ignore_background) const {
  double sum = 0.0;
  int count = 0;
  for (std::size_t c = ignore_background ? 1 : 0; c < intersection.size(); ++c) {
    if (present[c] == 0) continue;
    sum += static_cast<double>(intersection[c]) / static_cast<double>(union_[c]);
    ++count;
  }
  return count ? sum / count : 1.0;
}

double miou(const LabelMap& pred, const LabelMap& gt, int num_classes, bool ignore_background) {
  if (num_classes < 1) throw ValidationError("num_classes must be >= 1");
  IouCounts counts(num_classes);
  counts.add(pred, gt, ignore_background);
  return counts.miou(ignore_background);
}

// ---------------------------------------------------------------------------

std::vector<int> knn_classify(const torch::Tensor& queries, const torch::Tensor& gallery,
                              const std::vector<int>& gallery_labels, int k) {
  if (gallery.size(0) == 0) throw ValidationError("KNN gallery is empty");
  if (static_cast<std::int64_t>(gallery_labels.size()) != gallery.size(0)) {
    throw ValidationError("gallery labels and embeddings differ in count");
  }
  if (k < 1 || k > gallery.size(0)) throw ValidationError("k must lie in [1, gallery size]");
  auto q = F::normalize(queries.to(torch::kFloat64), F::NormalizeFuncOptions().dim(-1));
  auto g = F::normalize(gallery.to(torch::kFloat64), F::NormalizeFuncOptions().dim(-1));
  auto sims = q.matmul(g.t()).contiguous();
  const auto nq = sims.size(0);
  const auto ng = sims.size(1);
  const auto* s = sims.data_ptr<double>();
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(nq));
  std::vector<std::int64_t> order(static_cast<std::size_t>(ng));
  for (std::int64_t i = 0; i < nq; ++i) {
    for (std::int64_t j = 0; j < ng; ++j) order[static_cast<std::size_t>(j)] = j;
    const double* row = s + i * ng;
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [row](std::int64_t a, std::int64_t b) {
      return row[a] > row[b] || (row[a] == row[b] && a < b);
    });
    std::map<int, int> votes;
    int top = 0;
    for (int j = 0; j < k; ++j) top = std::max(top, ++votes[gallery_labels[static_cast<std::size_t>(order[static_cast<std::size_t>(j)])]]);
    for (int j = 0; j < k; ++j) {
      const int label = gallery_labels[static_cast<std::size_t>(order[static_cast<std::size_t>(j)])];
      if (votes[label] == top) {
        out.push_back(label);
        break;
      }
    }
  }
  return out;
}

Recall retrieval_recall_at_1(const torch::Tensor& image_embs, const torch::Tensor& text_embs) {
  if (image_embs.dim() != 2 || image_embs.sizes() != text_embs.sizes()) {
    throw ValidationError("image and text embeddings must be paired [N, D] matrices");
  }
  const auto n = image_embs.size(0);
  if (n == 0) throw ValidationError("retrieval needs at least one pair");
  auto sims = image_embs.to(torch::kFloat64).matmul(text_embs.to(torch::kFloat64).t()).contiguous();
  const auto* s = sims.data_ptr<double>();
  std::int64_t i2t = 0, t2i = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    std::int64_t best_r = 0, best_c = 0;
    for (std::int64_t j = 1; j < n; ++j) {
      if (s[i * n + j] > s[i * n + best_r]) best_r = j;
      if (s[j * n + i] > s[best_c * n + i]) best_c = j;
    }
    i2t += best_r == i;
    t2i += best_c == i;
  }
  return {static_cast<double>(i2t) / n, static_cast<double>(t2i) / n};
}

// ---------------------------------------------------------------------------

std::vector<int> patch_majority_labels(const LabelMap& mask, int patch_size) {
  if (patch_size < 1 || mask.height % patch_size || mask.width % patch_size) {
    throw ValidationError("mask size must be a multiple of the patch size");
  }
  const int rows = mask.height / patch_size;
  const int cols = mask.width / patch_size;
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(rows * cols));
  std::array<int, 256> hist{};
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      hist.fill(0);
      for (int y = 0; y < patch_size; ++y) {
        for (int x = 0; x < patch_size; ++x) ++hist[mask.at(r * patch_size + y, c * patch_size + x)];
      }
      out.push_back(static_cast<int>(std::max_element(hist.begin(), hist.end()) - hist.begin()));
    }
  }
  return out;
}

ProbeResult linear_patch_probe(const torch::Tensor& train_features, const std::vector<int>& train_labels,
                               const torch::Tensor& test_features, const std::vector<int>& test_labels,
                               int num_classes, const ProbeOptions& options) {
  if (train_features.dim() != 2 || test_features.dim() != 2 || train_features.size(1) != test_features.size(1)) {
    throw ValidationError("probe features must be [N, D] with matching D");
  }
  if (static_cast<std::int64_t>(train_labels.size()) != train_features.size(0) ||
      static_cast<std::int64_t>(test_labels.size()) != test_features.size(0)) {
    throw ValidationError("probe labels and features differ in count");
  }
  if (train_labels.empty()) throw ValidationError("probe needs training patches");
  ProbeResult res;
  std::vector<char> seen(static_cast<std::size_t>(num_classes), 0);
  for (int l : train_labels) {
    if (l < 0 || l >= num_classes) throw ValidationError("probe label outside [0, num_classes)");
    seen[static_cast<std::size_t>(l)] = 1;
  }
  for (int l : test_labels) {
    if (l < 0 || l >= num_classes) throw ValidationError("probe label outside [0, num_classes)");
  }

  torch::NoGradGuard outer;
  auto x = train_features.to(torch::kFloat64);
  auto mean = x.mean(0, true);
  auto std = x.std(0, false, true).clamp_min(1e-8);
  x = (x - mean) / std;
  auto xt = (test_features.to(torch::kFloat64) - mean) / std;
  auto y = torch::tensor(std::vector<std::int64_t>(train_labels.begin(), train_labels.end()), torch::kInt64);

  auto w = torch::zeros({x.size(1), num_classes}, torch::kFloat64).set_requires_grad(true);
  auto b = torch::zeros({num_classes}, torch::kFloat64).set_requires_grad(true);
  // classes never seen in training are kept out of the softmax
  auto absent = torch::zeros({num_classes}, torch::kFloat64);
  for (int c = 0; c < num_classes; ++c) {
    if (!seen[static_cast<std::size_t>(c)]) {
      absent[c] = -1e30;
      res.excluded_classes.push_back(c);
      res.warnings.push_back("class " + std::to_string(c) + " absent from probe training labels; excluded");
    }
  }
  auto objective = [&]() {
    auto logits = x.matmul(w) + b + absent;
    return F::cross_entropy(logits, y) + 0.5 * options.l2 * w.pow(2).sum();
  };
  torch::optim::LBFGS opt({w, b}, torch::optim::LBFGSOptions(1.0).max_iter(1).history_size(20).line_search_fn("strong_wolfe"));
  double prev = std::numeric_limits<double>::infinity();
  {
    torch::AutoGradMode grad_on(true);
    for (res.iterations = 0; res.iterations < options.max_iterations; ++res.iterations) {
      auto loss = opt.step([&] {
        opt.zero_grad();
        auto l = objective();
        l.backward();
        return l;
      });
      const double f = objective().item<double>();
      res.objective = f;
      if (std::abs(prev - f) <= options.tolerance * std::max(1.0, std::abs(f))) break;
      prev = f;
    }
  }
  auto pred = (xt.matmul(w) + b + absent).argmax(1).contiguous();
  const auto* pp = pred.data_ptr<std::int64_t>();
  res.predictions.assign(pp, pp + pred.numel());

  IouCounts counts(num_classes);
  LabelMap pm(1, static_cast<int>(test_labels.size())), gm(1, static_cast<int>(test_labels.size()));
  for (std::size_t i = 0; i < test_labels.size(); ++i) {
    pm.labels[i] = static_cast<std::uint8_t>(res.predictions[i]);
    gm.labels[i] = static_cast<std::uint8_t>(test_labels[i]);
  }
  if (num_classes > 256) throw ValidationError("probe supports at most 256 classes");
  counts.add(pm, gm, false);
  for (int c : res.excluded_classes) {
    counts.present[static_cast<std::size_t>(c)] = 0;
  }
  res.miou = counts.miou(false);
  return res;
}

// ---------------------------------------------------------------------------

PcaMap pca_map(const torch::Tensor& patch_embeddings, int rows, int cols) {
  if (patch_embeddings.dim() != 2 || patch_embeddings.size(0) != static_cast<std::int64_t>(rows) * cols) {
    throw ValidationError("PCA input must be [rows * cols, D]");
  }
  const auto n = patch_embeddings.size(0);
  if (n < 3) throw ValidationError("PCA map needs at least 3 patches");
  const auto d = patch_embeddings.size(1);
  auto xt = patch_embeddings.to(torch::kFloat64).contiguous();
  Eigen::MatrixXd x = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      xt.data_ptr<double>(), n, d);
  x.rowwise() -= x.colwise().mean();
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  const Eigen::VectorXd evals = es.eigenvalues().reverse();
  const Eigen::MatrixXd evecs = es.eigenvectors().rowwise().reverse();

  PcaMap out;
  out.eigenvalues.assign(evals.data(), evals.data() + evals.size());
  const double top = std::max(evals.size() ? evals(0) : 0.0, 0.0);
  const double floor = std::max(1e-12, 1e-9 * top);
  out.components = torch::zeros({n, 3}, torch::kFloat64);
  out.grid = ImageF(rows, cols);
  for (int k = 0; k < 3; ++k) {
    const bool valid = k < evals.size() && evals(k) > floor;
    Eigen::VectorXd proj = Eigen::VectorXd::Zero(n);
    if (valid) {
      Eigen::VectorXd v = evecs.col(k);
      Eigen::Index arg = 0;
      v.cwiseAbs().maxCoeff(&arg);
      if (v(arg) < 0) v = -v;
      proj = x * v;
      ++out.rank;
    }
    const double lo = proj.minCoeff();
    const double hi = proj.maxCoeff();
    for (std::int64_t i = 0; i < n; ++i) {
      out.components[i][k] = proj(i);
      const float value = (valid && hi - lo > 1e-12) ? static_cast<float>((proj(i) - lo) / (hi - lo)) : 0.5f;
      out.grid.at(static_cast<int>(i / cols), static_cast<int>(i % cols), k) = value;
    }
  }
  return out;
}

ImageF upsample_image(const ImageF& grid, int out_h, int out_w) {
  ImageF out(out_h, out_w);
  for (int y = 0; y < out_h; ++y) {
    for (int x = 0; x < out_w; ++x) {
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = grid.at(y * grid.height / out_h, x * grid.width / out_w, c);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

PatchLossCurve read_patch_loss_curve(const fs::path& metrics, const std::string& label) {
  std::ifstream in(metrics);
  if (!in) throw IoError("cannot read metrics file '" + metrics.string() + "'");
  PatchLossCurve curve;
  curve.label = label;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    for (const char* key : {"step", "loss/patch_visible", "loss/patch_masked"}) {
      if (!j.contains(key)) throw ValidationError(std::string("metrics record lacks telemetry key '") + key + "'");
    }
    curve.steps.push_back(j["step"].get<std::int64_t>());
    curve.visible.push_back(j["loss/patch_visible"].get<double>());
    curve.masked.push_back(j["loss/patch_masked"].get<double>());
  }
  return curve;
}

void write_patch_loss_csv(const PatchLossCurve& curve, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << "step,loss_patch_visible,loss_patch_masked\n";
  out << std::setprecision(10);
  for (std::size_t i = 0; i < curve.steps.size(); ++i) {
    out << curve.steps[i] << ',' << curve.visible[i] << ',' << curve.masked[i] << '\n';
  }
}

void write_patch_loss_svg(const std::vector<PatchLossCurve>& curves, const fs::path& path) {
  constexpr double kW = 640, kH = 360, kPad = 40;
  double max_step = 1, lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& c : curves) {
    if (!c.steps.empty()) max_step = std::max(max_step, static_cast<double>(c.steps.back()));
    for (double v : c.visible) lo = std::min(lo, v), hi = std::max(hi, v);
    for (double v : c.masked) lo = std::min(lo, v), hi = std::max(hi, v);
  }
  if (!(hi > lo)) lo = 0, hi = 1;
  const std::array<const char*, 6> colors = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << kPad << "\" y=\"20\" font-size=\"12\">patch loss (solid: visible, dashed: masked)</text>\n";
  std::size_t ci = 0;
  for (const auto& c : curves) {
    const char* color = colors[ci % colors.size()];
    for (int series = 0; series < 2; ++series) {
      const auto& v = series == 0 ? c.visible : c.masked;
      out << "<polyline fill=\"none\" stroke=\"" << color << "\"" << (series ? " stroke-dasharray=\"4 3\"" : "")
          << " points=\"";
      for (std::size_t i = 0; i < v.size(); ++i) {
        const double px = kPad + (kW - 2 * kPad) * static_cast<double>(c.steps[i]) / max_step;
        const double py = kH - kPad - (kH - 2 * kPad) * (v[i] - lo) / (hi - lo);
        out << std::fixed << std::setprecision(1) << px << ',' << py << ' ';
      }
      out << "\"/>\n";
    }
    out << "<text x=\"" << kW - 160 << "\" y=\"" << 20 + 14 * (ci + 1) << "\" font-size=\"11\" fill=\"" << color
        << "\">" << c.label << "</text>\n";
    ++ci;
  }
  out << "</svg>\n";
}

PatchLossCurve patch_loss_report(const fs::path& metrics, const fs::path& out_dir, const std::string& label) {
  auto curve = read_patch_loss_curve(metrics, label);
  fs::create_directories(out_dir);
  write_patch_loss_csv(curve, out_dir / "patch_loss.csv");
  write_patch_loss_svg({curve}, out_dir / "patch_loss.svg");
  return curve;
}

// ---------------------------------------------------------------------------

nlohmann::ordered_json EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["zero_shot_miou"] = {{"with_background", zero_shot_miou_with_background},
                         {"without_background", zero_shot_miou_without_background}};
  j["knn_top1"] = knn_top1;
  j["i2t_r1"] = i2t_r1;
  j["t2i_r1"] = t2i_r1;
  j["probe_miou"] = probe_miou;
  return j;
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport r;
  try {
    r.zero_shot_miou_with_background = j.at("zero_shot_miou").at("with_background").get<double>();
    r.zero_shot_miou_without_background = j.at("zero_shot_miou").at("without_background").get<double>();
    r.knn_top1 = j.at("knn_top1").get<double>();
    r.i2t_r1 = j.at("i2t_r1").get<double>();
    r.t2i_r1 = j.at("t2i_r1").get<double>();
    r.probe_miou = j.at("probe_miou").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed eval report: ") + e.what());
  }
  return r;
}

EvalReport read_report(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read eval report '" + path.string() + "'");
  try {
    return EvalReport::from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(std::string("eval report is not JSON: ") + e.what());
  }
}

int primary_class(const synth::CaptionTriplet& captions) {
  static const auto table = synth::class_table();
  const std::string& s = captions.short_text;
  const std::string name = s.starts_with("a ") ? s.substr(2) : s;
  for (std::size_t c = 1; c < table.size(); ++c) {
    if (table[c] == name) return static_cast<int>(c);
  }
  throw ValidationError("short caption '" + s + "' names no known class");
}

namespace {

struct Encoded {
  torch::Tensor cls_state;  ///< [B, D] unit-norm CLS-1 states
  torch::Tensor cls1, cls2; ///< [B, P]
  torch::Tensor patches;    ///< [B, N, D]
  torch::Tensor dense;      ///< [B, N, P]
};

Encoded encode(trainer::TrainedModel& m, const synth::Dataset& ds, const std::vector<int>& idx) {
  torch::NoGradGuard guard;
  std::vector<Encoded> parts;
  constexpr std::size_t kChunk = 64;
  for (std::size_t s = 0; s < idx.size(); s += kChunk) {
    std::vector<torch::Tensor> imgs;
    for (std::size_t i = s; i < std::min(idx.size(), s + kChunk); ++i) {
      imgs.push_back(trainer::image_tensor(to_float(ds.images[static_cast<std::size_t>(idx[i])])));
    }
    auto out = m.encoder->forward(torch::stack(imgs));
    parts.push_back({F::normalize(out.cls_tokens.select(1, 0), F::NormalizeFuncOptions().dim(-1)), out.cls1, out.cls2,
                     out.patches, m.encoder->dense_text_embeddings(out.values)});
  }
  Encoded e;
  auto cat = [&](auto field) {
    std::vector<torch::Tensor> v;
    for (auto& p : parts) v.push_back(p.*field);
    return torch::cat(v);
  };
  e.cls_state = cat(&Encoded::cls_state);
  e.cls1 = cat(&Encoded::cls1);
  e.cls2 = cat(&Encoded::cls2);
  e.patches = cat(&Encoded::patches);
  e.dense = cat(&Encoded::dense);
  return e;
}

torch::Tensor encode_texts(trainer::TrainedModel& m, const std::vector<std::string>& texts) {
  torch::NoGradGuard guard;
  const int max_len = m.config.text.max_len;
  auto ids = torch::empty({static_cast<std::int64_t>(texts.size()), max_len}, torch::kInt64);
  auto* p = ids.data_ptr<std::int64_t>();
  for (std::size_t i = 0; i < texts.size(); ++i) {
    const auto t = model::tokenize(texts[i], m.vocab, max_len);
    std::copy(t.ids.begin(), t.ids.end(), p + i * static_cast<std::size_t>(max_len));
  }
  std::vector<torch::Tensor> parts;
  for (std::int64_t s = 0; s < ids.size(0); s += 256) parts.push_back(m.text->forward(ids.narrow(0, s, std::min<std::int64_t>(256, ids.size(0) - s))));
  return torch::cat(parts);
}

synth::Granularity parse_granularity(const std::string& s) {
  if (s == "short") return synth::Granularity::short_caption;
  if (s == "medium") return synth::Granularity::medium_caption;
  if (s == "long") return synth::Granularity::long_caption;
  throw ValidationError("unknown caption granularity '" + s + "'");
}

}  // namespace

EvalReport evaluate_checkpoint(const fs::path& checkpoint, const trainer::RunConfig& config,
                               const synth::Dataset& dataset, const fs::path& out_dir, const fs::path& metrics) {
  auto m = trainer::load_trained_model(checkpoint);
  m.encoder->eval();
  m.text->eval();
  const int n = static_cast<int>(dataset.size());
  const int holdout = static_cast<int>(std::llround(config.data.holdout_fraction * n));
  std::vector<int> train_idx, test_idx;
  for (int i = 0; i < n - holdout; ++i) train_idx.push_back(i);
  for (int i = n - holdout; i < n; ++i) test_idx.push_back(i);
  if (static_cast<int>(test_idx.size()) > config.eval.query_size) test_idx.resize(static_cast<std::size_t>(config.eval.query_size));
  std::vector<int> gallery_idx(train_idx.begin(),
                               train_idx.begin() + std::min<std::size_t>(train_idx.size(), static_cast<std::size_t>(config.eval.gallery_size)));
  std::vector<int> probe_idx(train_idx.begin(),
                             train_idx.begin() + std::min<std::size_t>(train_idx.size(), static_cast<std::size_t>(config.eval.probe_train_images)));

  const int p = m.config.image.patch_size;
  const int canvas = dataset.images.front().height;
  const int grid = canvas / p;
  EvalReport report;

  auto test = encode(m, dataset, test_idx);
  // zero-shot segmentation, with and without the background prompt
  {
    auto prompts_bg = build_prompts(m, true, config.eval.prompt_template);
    auto prompts_fg = build_prompts(m, false, config.eval.prompt_template);
    IouCounts with_bg(synth::num_classes()), without_bg(synth::num_classes());
    for (std::size_t i = 0; i < test_idx.size(); ++i) {
      const auto& gt = dataset.masks[static_cast<std::size_t>(test_idx[i])];
      auto feats = test.dense[static_cast<std::int64_t>(i)];
      with_bg.add(segment_features(feats, grid, grid, prompts_bg, gt.height, gt.width).pixels, gt, false);
      without_bg.add(segment_features(feats, grid, grid, prompts_fg, gt.height, gt.width).pixels, gt, true);
    }
    report.zero_shot_miou_with_background = with_bg.miou(false);
    report.zero_shot_miou_without_background = without_bg.miou(true);
  }
  // KNN on the primary object class
  {
    auto gallery = encode(m, dataset, gallery_idx);
    std::vector<int> g_labels, q_labels;
    for (int i : gallery_idx) g_labels.push_back(primary_class(dataset.captions[static_cast<std::size_t>(i)]));
    for (int i : test_idx) q_labels.push_back(primary_class(dataset.captions[static_cast<std::size_t>(i)]));
    const int k = std::min<int>(config.eval.knn_k, static_cast<int>(gallery_idx.size()));
    auto pred = knn_classify(test.cls_state, gallery.cls_state, g_labels, k);
    int correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == q_labels[i];
    report.knn_top1 = static_cast<double>(correct) / static_cast<double>(pred.size());
  }
  // retrieval: the synthetic-caption token against the configured granularity
  {
    const auto g = parse_granularity(config.eval.retrieval_caption);
    std::vector<std::string> texts;
    for (int i : test_idx) texts.push_back(objectives::caption_text(dataset.captions[static_cast<std::size_t>(i)], g));
    auto txt = encode_texts(m, texts);
    const auto& img = config.caption_strategy.uses_second_cls() ? test.cls2 : test.cls1;
    const auto r = retrieval_recall_at_1(img, txt);
    report.i2t_r1 = r.i2t;
    report.t2i_r1 = r.t2i;
  }
  // linear probe on patch states
  {
    auto train = encode(m, dataset, probe_idx);
    std::vector<int> tr_labels, te_labels;
    for (int i : probe_idx) {
      auto l = patch_majority_labels(dataset.masks[static_cast<std::size_t>(i)], p);
      tr_labels.insert(tr_labels.end(), l.begin(), l.end());
    }
    for (int i : test_idx) {
      auto l = patch_majority_labels(dataset.masks[static_cast<std::size_t>(i)], p);
      te_labels.insert(te_labels.end(), l.begin(), l.end());
    }
    const auto d = train.patches.size(2);
    ProbeOptions po;
    po.l2 = config.eval.probe_l2;
    report.probe_miou = linear_patch_probe(train.patches.reshape({-1, d}), tr_labels, test.patches.reshape({-1, d}),
                                           te_labels, synth::num_classes(), po)
                            .miou;
  }

  fs::create_directories(out_dir);
  for (int i = 0; i < std::min<int>(config.eval.pca_images, static_cast<int>(test_idx.size())); ++i) {
    auto pca = pca_map(test.patches[i], grid, grid);
    std::ostringstream name;
    name << "pca_" << std::setw(2) << std::setfill('0') << i << ".png";
    write_png_rgb(out_dir / name.str(), to_u8(upsample_image(pca.grid, canvas, canvas)));
  }
  if (!metrics.empty() && fs::exists(metrics)) patch_loss_report(metrics, out_dir, config.name);
  std::ofstream(out_dir / "report.json", std::ios::trunc) << report.to_json().dump(2) << '\n';
  return report;
}

EvalReport evaluate_run(const fs::path& run_dir, const trainer::RunConfig& config, const synth::Dataset& dataset) {
  const auto ckpt = run_dir / "checkpoints" / "final.ckpt";
  if (!fs::exists(ckpt)) throw IoError("run has no final checkpoint: " + ckpt.string());
  return evaluate_checkpoint(ckpt, config, dataset, run_dir / "eval", run_dir / "metrics.jsonl");
}

}  // namespace tipslab::eval
