#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace tipslab {

/// Interleaved HxWx3 image with intensities in [0, 1].
struct ImageF {
  int height = 0;
  int width = 0;
  std::vector<float> data;

  ImageF() = default;
  ImageF(int h, int w) : height(h), width(w), data(static_cast<std::size_t>(h) * w * 3, 0.0f) {}

  float& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  float at(int y, int x, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
};

/// Interleaved HxWx3 8-bit image.
struct ImageU8 {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;
};

/// HxW class indices.
struct LabelMap {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> labels;

  LabelMap() = default;
  LabelMap(int h, int w) : height(h), width(w), labels(static_cast<std::size_t>(h) * w, 0) {}

  std::uint8_t& at(int y, int x) { return labels[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return labels[static_cast<std::size_t>(y) * width + x]; }
};

ImageU8 to_u8(const ImageF& img);
ImageF to_float(const ImageU8& img);

/// Axis-aligned crop box in source pixel coordinates (continuous).
struct CropBox {
  double x0 = 0, y0 = 0, width = 0, height = 0;
};

/// Bilinear resample of `box` from `src` into an out_h x out_w image,
/// optionally mirrored horizontally. Sample points are pixel centers.
ImageF crop_resize(const ImageF& src, const CropBox& box, int out_h, int out_w, bool flip);

// Lossless PNG I/O. Writing uses fixed zlib settings and no metadata chunks so
// identical pixels give identical bytes.
void write_png_rgb(const std::filesystem::path& path, const ImageU8& img);
void write_png_gray(const std::filesystem::path& path, const LabelMap& labels);
ImageU8 read_png_rgb(const std::filesystem::path& path);
LabelMap read_png_gray(const std::filesystem::path& path);

}  // namespace tipslab
