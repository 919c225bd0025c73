#pragma once

// Procedural shapes-and-captions dataset: seedable scenes of colored shapes,
// pixel-exact class masks, and captions at three granularities.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "tipslab/image.hpp"

namespace tipslab::synth {

enum class Shape : std::uint8_t { circle, square, triangle, star };

inline constexpr std::array<std::string_view, 4> kShapeNames = {"circle", "square", "triangle", "star"};

struct PaletteColor {
  std::string_view name;
  float r, g, b;
};

inline constexpr std::array<PaletteColor, 8> kObjectPalette = {{
    {"red", 0.90f, 0.10f, 0.10f},
    {"green", 0.10f, 0.75f, 0.15f},
    {"blue", 0.15f, 0.25f, 0.95f},
    {"yellow", 0.95f, 0.90f, 0.10f},
    {"purple", 0.60f, 0.15f, 0.75f},
    {"orange", 1.00f, 0.55f, 0.05f},
    {"pink", 1.00f, 0.55f, 0.75f},
    {"cyan", 0.10f, 0.90f, 0.90f},
}};

inline constexpr std::array<PaletteColor, 4> kBackgroundPalette = {{
    {"black", 0.05f, 0.05f, 0.05f},
    {"gray", 0.50f, 0.50f, 0.50f},
    {"white", 0.97f, 0.97f, 0.97f},
    {"brown", 0.40f, 0.26f, 0.13f},
}};

inline constexpr int kMinObjects = 1;
inline constexpr int kMaxObjects = 4;
inline constexpr double kMinScale = 0.1;
inline constexpr double kMaxScale = 0.4;
inline constexpr double kMinCenterDistance = 0.15;
inline constexpr int kMinObjectPixels = 16;

struct SceneObject {
  Shape shape = Shape::circle;
  int color = 0;  ///< index into kObjectPalette
  double cx = 0.5, cy = 0.5;  ///< normalized, y grows downwards
  double scale = 0.2;  ///< extent as a fraction of the canvas side
  double rotation_deg = 0.0;
};

struct SceneSpec {
  std::uint64_t seed = 0;
  std::vector<SceneObject> objects;
  int background = 0;  ///< index into kBackgroundPalette
  int canvas = 64;
};

struct CaptionTriplet {
  std::string short_text;   ///< alt-text analog: one object
  std::string medium_text;  ///< every object with its color
  std::string long_text;    ///< objects, background and relative positions
};

enum class Granularity { short_caption, medium_caption, long_caption };

struct SynthSample {
  ImageF image;
  LabelMap mask;
  CaptionTriplet captions;
  SceneSpec scene;
};

/// Background plus one class per (shape, color) pair.
constexpr int num_classes() { return 1 + static_cast<int>(kShapeNames.size() * kObjectPalette.size()); }
constexpr int class_index(Shape shape, int color) {
  return 1 + static_cast<int>(shape) * static_cast<int>(kObjectPalette.size()) + color;
}
std::string class_name(int class_idx);
std::vector<std::string> class_table();

/// Every word any caption template can emit, sorted.
std::vector<std::string> caption_vocabulary();

bool is_valid_canvas(int canvas);

/// Throws ValidationError when the scene breaks the SceneSpec invariants.
void validate_scene(const SceneSpec& scene);

/// Pixel-center membership test; x, y in pixel units.
bool contains(const SceneObject& obj, int canvas, double x, double y);

/// Renders with 4x4 supersampled anti-aliasing; the mask is hard-labeled at
/// pixel centers. Later objects occlude earlier ones.
std::pair<ImageF, LabelMap> render_scene(const SceneSpec& scene);

std::string caption_scene(const SceneSpec& scene, Granularity granularity);
CaptionTriplet caption_triplet(const SceneSpec& scene);

/// Scene number `index` of the dataset seeded by `dataset_seed`. Rejection
/// sampling guarantees separation and the per-object visible pixel minimum.
SceneSpec sample_scene(std::uint64_t dataset_seed, std::uint64_t index, int canvas);

SynthSample make_sample(std::uint64_t dataset_seed, std::uint64_t index, int canvas);

struct ManifestEntry {
  int id = 0;
  std::string image;
  std::string mask;
};

struct DatasetManifest {
  std::uint64_t seed = 0;
  int canvas = 0;
  std::vector<std::string> classes;
  std::vector<ManifestEntry> samples;
};

/// Writes manifest.json, images/NNNNNN.png, masks/NNNNNN.png and captions.jsonl.
DatasetManifest generate_dataset(int count, int canvas, std::uint64_t seed, const std::filesystem::path& out_dir);

DatasetManifest read_manifest(const std::filesystem::path& dir);

/// Fully decoded dataset held in memory (8-bit images, class masks, captions).
struct Dataset {
  DatasetManifest manifest;
  std::vector<ImageU8> images;
  std::vector<LabelMap> masks;
  std::vector<CaptionTriplet> captions;

  std::size_t size() const { return images.size(); }
};

Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace tipslab::synth
