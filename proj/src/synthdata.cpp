#include "tipslab/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

#include "json.hpp"

#include "tipslab/errors.hpp"
#include "tipslab/rng.hpp"

namespace tipslab::synth {

namespace {

using Json = nlohmann::ordered_json;

constexpr int kSupersample = 4;
constexpr double kStarInnerRatio = 0.45;

struct Point {
  double x, y;
};

std::vector<Point> polygon(const SceneObject& obj, int canvas) {
  const double cx = obj.cx * canvas;
  const double cy = obj.cy * canvas;
  const double radius = obj.scale * canvas / 2.0;
  const double rot = obj.rotation_deg * std::numbers::pi / 180.0;
  std::vector<Point> pts;
  if (obj.shape == Shape::triangle) {
    for (int k = 0; k < 3; ++k) {
      const double a = rot - std::numbers::pi / 2 + k * 2 * std::numbers::pi / 3;
      pts.push_back({cx + radius * std::cos(a), cy + radius * std::sin(a)});
    }
  } else {
    for (int k = 0; k < 10; ++k) {
      const double r = (k % 2 == 0) ? radius : radius * kStarInnerRatio;
      const double a = rot - std::numbers::pi / 2 + k * std::numbers::pi / 5;
      pts.push_back({cx + r * std::cos(a), cy + r * std::sin(a)});
    }
  }
  return pts;
}

bool inside_polygon(const std::vector<Point>& pts, double x, double y) {
  bool in = false;
  for (std::size_t i = 0, j = pts.size() - 1; i < pts.size(); j = i++) {
    const bool crosses = (pts[i].y > y) != (pts[j].y > y);
    if (crosses && x < (pts[j].x - pts[i].x) * (y - pts[i].y) / (pts[j].y - pts[i].y) + pts[i].x) in = !in;
  }
  return in;
}

// Precomputed membership for one object (polygons are built once per render).
struct Membership {
  const SceneObject* obj;
  int canvas;
  std::vector<Point> poly;

  bool operator()(double x, double y) const {
    const double cx = obj->cx * canvas;
    const double cy = obj->cy * canvas;
    switch (obj->shape) {
      case Shape::circle: {
        const double r = obj->scale * canvas / 2.0;
        return (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r;
      }
      case Shape::square: {
        const double rot = obj->rotation_deg * std::numbers::pi / 180.0;
        const double dx = x - cx, dy = y - cy;
        const double u = dx * std::cos(rot) + dy * std::sin(rot);
        const double v = -dx * std::sin(rot) + dy * std::cos(rot);
        const double h = obj->scale * canvas / 2.0;
        return std::abs(u) <= h && std::abs(v) <= h;
      }
      default:
        return inside_polygon(poly, x, y);
    }
  }
};

std::vector<Membership> memberships(const SceneSpec& scene) {
  std::vector<Membership> out;
  out.reserve(scene.objects.size());
  for (const auto& obj : scene.objects) {
    Membership m{&obj, scene.canvas, {}};
    if (obj.shape == Shape::triangle || obj.shape == Shape::star) m.poly = polygon(obj, scene.canvas);
    out.push_back(std::move(m));
  }
  return out;
}

// Topmost object index per pixel center, -1 for background.
std::vector<int> object_ids(const SceneSpec& scene, const std::vector<Membership>& members) {
  const int n = scene.canvas;
  std::vector<int> ids(static_cast<std::size_t>(n) * n, -1);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      for (int k = static_cast<int>(members.size()) - 1; k >= 0; --k) {
        if (members[k](x + 0.5, y + 0.5)) {
          ids[static_cast<std::size_t>(y) * n + x] = k;
          break;
        }
      }
    }
  }
  return ids;
}

std::string object_name(const SceneObject& obj) {
  return std::string(kObjectPalette[obj.color].name) + " " + std::string(kShapeNames[static_cast<int>(obj.shape)]);
}

std::string relation(const SceneObject& a, const SceneObject& b) {
  const double dx = b.cx - a.cx;
  const double dy = b.cy - a.cy;
  if (std::abs(dx) >= std::abs(dy)) return dx > 0 ? "left of" : "right of";
  return dy > 0 ? "above" : "below";
}

std::size_t largest_object(const SceneSpec& scene) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < scene.objects.size(); ++i) {
    if (scene.objects[i].scale > scene.objects[best].scale) best = i;
  }
  return best;
}

std::string sample_name(int id) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06d", id);
  return buf;
}

SceneSpec scene_from_seed(std::uint64_t scene_seed, int canvas) {
  Rng rng(scene_seed);
  for (int attempt = 0; attempt < 10000; ++attempt) {
    SceneSpec scene;
    scene.seed = scene_seed;
    scene.canvas = canvas;
    scene.background = static_cast<int>(rng.below(kBackgroundPalette.size()));
    const int count = kMinObjects + static_cast<int>(rng.below(kMaxObjects - kMinObjects + 1));
    bool placed_all = true;
    for (int k = 0; k < count && placed_all; ++k) {
      SceneObject obj;
      obj.shape = static_cast<Shape>(rng.below(kShapeNames.size()));
      obj.color = static_cast<int>(rng.below(kObjectPalette.size()));
      obj.scale = rng.uniform(kMinScale, kMaxScale);
      obj.rotation_deg = rng.uniform(0.0, 360.0);
      bool placed = false;
      for (int tries = 0; tries < 100 && !placed; ++tries) {
        obj.cx = rng.uniform(0.1, 0.9);
        obj.cy = rng.uniform(0.1, 0.9);
        placed = std::all_of(scene.objects.begin(), scene.objects.end(), [&](const SceneObject& o) {
          return std::hypot(o.cx - obj.cx, o.cy - obj.cy) >= kMinCenterDistance;
        });
      }
      if (placed) {
        scene.objects.push_back(obj);
      } else {
        placed_all = false;
      }
    }
    if (!placed_all) continue;
    const auto members = memberships(scene);
    const auto ids = object_ids(scene, members);
    std::vector<int> counts(scene.objects.size(), 0);
    for (int id : ids) {
      if (id >= 0) ++counts[static_cast<std::size_t>(id)];
    }
    if (std::all_of(counts.begin(), counts.end(), [](int c) { return c >= kMinObjectPixels; })) return scene;
  }
  throw ValidationError("could not sample a valid scene for canvas " + std::to_string(canvas));
}

}  // namespace

std::string class_name(int class_idx) {
  if (class_idx == 0) return "background";
  if (class_idx < 0 || class_idx >= num_classes()) throw ValidationError("class index out of range");
  const int k = class_idx - 1;
  const int colors = static_cast<int>(kObjectPalette.size());
  return std::string(kObjectPalette[k % colors].name) + " " + std::string(kShapeNames[k / colors]);
}

std::vector<std::string> class_table() {
  std::vector<std::string> names;
  for (int c = 0; c < num_classes(); ++c) names.push_back(class_name(c));
  return names;
}

std::vector<std::string> caption_vocabulary() {
  std::set<std::string> words = {"a", "and", "on", "background", "the", "is", "left", "right", "of", "above", "below"};
  for (auto s : kShapeNames) words.emplace(s);
  for (const auto& c : kObjectPalette) words.emplace(c.name);
  for (const auto& c : kBackgroundPalette) words.emplace(c.name);
  return {words.begin(), words.end()};
}

bool is_valid_canvas(int canvas) { return canvas == 32 || canvas == 64 || canvas == 128; }

void validate_scene(const SceneSpec& scene) {
  if (!is_valid_canvas(scene.canvas)) {
    throw ValidationError("canvas must be one of 32, 64, 128 (got " + std::to_string(scene.canvas) + ")");
  }
  const auto n = static_cast<int>(scene.objects.size());
  if (n < kMinObjects || n > kMaxObjects) {
    throw ValidationError("scene must contain between 1 and 4 objects (got " + std::to_string(n) + ")");
  }
  if (scene.background < 0 || scene.background >= static_cast<int>(kBackgroundPalette.size())) {
    throw ValidationError("background color index out of range");
  }
  for (int i = 0; i < n; ++i) {
    const auto& o = scene.objects[i];
    if (o.color < 0 || o.color >= static_cast<int>(kObjectPalette.size())) {
      throw ValidationError("object color index out of range");
    }
    if (o.scale < kMinScale || o.scale > kMaxScale) throw ValidationError("object scale outside [0.1, 0.4]");
    if (o.cx < 0 || o.cx > 1 || o.cy < 0 || o.cy > 1) throw ValidationError("object center outside [0, 1]^2");
    for (int j = 0; j < i; ++j) {
      const auto& p = scene.objects[j];
      if (std::hypot(o.cx - p.cx, o.cy - p.cy) < kMinCenterDistance) {
        throw ValidationError("object centers " + std::to_string(j) + " and " + std::to_string(i) +
                              " are closer than 0.15");
      }
    }
  }
}

bool contains(const SceneObject& obj, int canvas, double x, double y) {
  Membership m{&obj, canvas, {}};
  if (obj.shape == Shape::triangle || obj.shape == Shape::star) m.poly = polygon(obj, canvas);
  return m(x, y);
}

std::pair<ImageF, LabelMap> render_scene(const SceneSpec& scene) {
  validate_scene(scene);
  const int n = scene.canvas;
  const auto members = memberships(scene);
  const auto ids = object_ids(scene, members);

  LabelMap mask(n, n);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= 0) {
      const auto& obj = scene.objects[static_cast<std::size_t>(ids[i])];
      mask.labels[i] = static_cast<std::uint8_t>(class_index(obj.shape, obj.color));
    }
  }

  ImageF image(n, n);
  const auto& bg = kBackgroundPalette[scene.background];
  constexpr double inv = 1.0 / (kSupersample * kSupersample);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      double acc[3] = {0, 0, 0};
      for (int sy = 0; sy < kSupersample; ++sy) {
        for (int sx = 0; sx < kSupersample; ++sx) {
          const double px = x + (sx + 0.5) / kSupersample;
          const double py = y + (sy + 0.5) / kSupersample;
          const PaletteColor* col = &bg;
          for (int k = static_cast<int>(members.size()) - 1; k >= 0; --k) {
            if (members[k](px, py)) {
              col = &kObjectPalette[scene.objects[k].color];
              break;
            }
          }
          acc[0] += col->r;
          acc[1] += col->g;
          acc[2] += col->b;
        }
      }
      for (int c = 0; c < 3; ++c) image.at(y, x, c) = static_cast<float>(acc[c] * inv);
    }
  }
  return {std::move(image), std::move(mask)};
}

std::string caption_scene(const SceneSpec& scene, Granularity granularity) {
  validate_scene(scene);
  const auto& objs = scene.objects;
  if (granularity == Granularity::short_caption) return "a " + object_name(objs[largest_object(scene)]);

  std::string medium;
  for (std::size_t i = 0; i < objs.size(); ++i) {
    if (i > 0) medium += " and ";
    medium += "a " + object_name(objs[i]);
  }
  if (granularity == Granularity::medium_caption) return medium;

  std::string text = medium + " on a " + std::string(kBackgroundPalette[scene.background].name) + " background";
  for (std::size_t i = 0; i + 1 < objs.size(); ++i) {
    text += " the " + object_name(objs[i]) + " is " + relation(objs[i], objs[i + 1]) + " the " +
            object_name(objs[i + 1]);
  }
  return text;
}

CaptionTriplet caption_triplet(const SceneSpec& scene) {
  return {caption_scene(scene, Granularity::short_caption), caption_scene(scene, Granularity::medium_caption),
          caption_scene(scene, Granularity::long_caption)};
}

SceneSpec sample_scene(std::uint64_t dataset_seed, std::uint64_t index, int canvas) {
  if (!is_valid_canvas(canvas)) {
    throw ValidationError("canvas must be one of 32, 64, 128 (got " + std::to_string(canvas) + ")");
  }
  const std::uint64_t scene_seed = Rng::derive(dataset_seed, {index}).next_u64();
  return scene_from_seed(scene_seed, canvas);
}

SynthSample make_sample(std::uint64_t dataset_seed, std::uint64_t index, int canvas) {
  SynthSample s;
  s.scene = sample_scene(dataset_seed, index, canvas);
  auto [image, mask] = render_scene(s.scene);
  s.image = std::move(image);
  s.mask = std::move(mask);
  s.captions = caption_triplet(s.scene);
  return s;
}

DatasetManifest generate_dataset(int count, int canvas, std::uint64_t seed, const std::filesystem::path& out_dir) {
  if (count < 1) throw ValidationError("count must be >= 1");
  if (!is_valid_canvas(canvas)) {
    throw ValidationError("canvas must be one of 32, 64, 128 (got " + std::to_string(canvas) + ")");
  }
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  if (!ec) fs::create_directories(out_dir / "masks", ec);
  if (ec) throw IoError("cannot create dataset directory " + out_dir.string() + ": " + ec.message());

  DatasetManifest manifest;
  manifest.seed = seed;
  manifest.canvas = canvas;
  manifest.classes = class_table();

  std::ofstream captions(out_dir / "captions.jsonl", std::ios::binary);
  if (!captions) throw IoError("cannot write " + (out_dir / "captions.jsonl").string());
  for (int i = 0; i < count; ++i) {
    const auto sample = make_sample(seed, static_cast<std::uint64_t>(i), canvas);
    ManifestEntry entry{i, "images/" + sample_name(i) + ".png", "masks/" + sample_name(i) + ".png"};
    write_png_rgb(out_dir / entry.image, to_u8(sample.image));
    write_png_gray(out_dir / entry.mask, sample.mask);
    Json line;
    line["id"] = i;
    line["short"] = sample.captions.short_text;
    line["medium"] = sample.captions.medium_text;
    line["long"] = sample.captions.long_text;
    captions << line.dump() << '\n';
    manifest.samples.push_back(std::move(entry));
  }
  if (!captions) throw IoError("failed writing captions.jsonl");

  Json doc;
  doc["format"] = "tipslab-synth";
  doc["version"] = 1;
  doc["seed"] = seed;
  doc["canvas"] = canvas;
  doc["count"] = count;
  doc["classes"] = manifest.classes;
  doc["captions"] = "captions.jsonl";
  Json samples = Json::array();
  for (const auto& e : manifest.samples) samples.push_back({{"id", e.id}, {"image", e.image}, {"mask", e.mask}});
  doc["samples"] = std::move(samples);
  std::ofstream mf(out_dir / "manifest.json", std::ios::binary);
  if (!mf) throw IoError("cannot write " + (out_dir / "manifest.json").string());
  mf << doc.dump(2) << '\n';
  if (!mf) throw IoError("failed writing manifest.json");
  return manifest;
}

DatasetManifest read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("dataset manifest missing: " + (dir / "manifest.json").string());
  Json doc;
  try {
    doc = Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed manifest: " + std::string(e.what()));
  }
  DatasetManifest m;
  m.seed = doc.at("seed").get<std::uint64_t>();
  m.canvas = doc.at("canvas").get<int>();
  m.classes = doc.at("classes").get<std::vector<std::string>>();
  for (const auto& s : doc.at("samples")) {
    m.samples.push_back({s.at("id").get<int>(), s.at("image").get<std::string>(), s.at("mask").get<std::string>()});
  }
  return m;
}

Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  ds.manifest = read_manifest(dir);
  std::ifstream in(dir / "captions.jsonl");
  if (!in) throw IoError("captions.jsonl missing in " + dir.string());
  std::vector<CaptionTriplet> by_id(ds.manifest.samples.size());
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = Json::parse(line);
    const auto id = j.at("id").get<std::size_t>();
    if (id >= by_id.size()) throw IoError("caption id out of range in captions.jsonl");
    by_id[id] = {j.at("short").get<std::string>(), j.at("medium").get<std::string>(), j.at("long").get<std::string>()};
  }
  for (const auto& e : ds.manifest.samples) {
    ds.images.push_back(read_png_rgb(dir / e.image));
    ds.masks.push_back(read_png_gray(dir / e.mask));
    ds.captions.push_back(by_id[static_cast<std::size_t>(e.id)]);
  }
  return ds;
}

}  // namespace tipslab::synth
