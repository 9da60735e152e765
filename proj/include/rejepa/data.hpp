#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "rejepa/linalg.hpp"

namespace rejepa {

/// One multi-band image, band-major: value(c, y, x) = values[(c * H + y) * W + x].
struct ImageTensor {
  int bands = 0;
  int height = 0;
  int width = 0;
  std::vector<float> values;

  ImageTensor() = default;
  ImageTensor(int c, int h, int w) : bands(c), height(h), width(w), values(std::size_t(c) * h * w, 0.0f) {}

  float& at(int c, int y, int x) { return values[(std::size_t(c) * height + y) * width + x]; }
  float at(int c, int y, int x) const { return values[(std::size_t(c) * height + y) * width + x]; }
  std::size_t size() const { return values.size(); }

  bool operator==(const ImageTensor&) const = default;
};

/// Sorted, duplicate-free set of class identifiers.
using LabelSet = std::vector<std::string>;

LabelSet make_label_set(std::vector<std::string> labels);

struct ArchiveRecord {
  std::string id;
  ImageTensor image;
  LabelSet labels;

  bool operator==(const ArchiveRecord&) const = default;
};

using Archive = std::vector<ArchiveRecord>;

/// Row-major patch grid. Token t covers grid cell (t / cols, t % cols); its
/// feature vector is laid out (band, dy, dx) with dx fastest.
struct PatchSequence {
  Matrix tokens;
  int rows = 0;
  int cols = 0;
  int patch_size = 0;
  int bands = 0;

  int size() const { return rows * cols; }
};

PatchSequence patchify(const ImageTensor& image, int patch_size);
ImageTensor unpatchify(const PatchSequence& patches);

struct SyntheticConfig {
  int n_images = 512;
  int n_classes = 4;
  int bands = 3;
  int side = 32;
  int patch_size = 8;
  std::uint64_t seed = 7;
  // Additive Gaussian noise, as a fraction of the unit sinusoid amplitude.
  double noise = 0.2;

  bool operator==(const SyntheticConfig&) const = default;
};

/// Class-structured sinusoidal textures. Each class owns two plane-wave
/// components (integer cycles per image) and a band-mixing matrix; each image
/// draws phases around the class phase and adds pixel noise. Wave vectors are
/// chosen so the patch-averaged signal is exactly zero, which leaves no class
/// information in a linear mean over tokens. Output is band-standardized and
/// labelled round-robin ("class_0", "class_1", ...).
Archive generate_synthetic_archive(const SyntheticConfig& config);

/// Per-band standardization to zero mean / unit variance over all records.
void standardize_bands(Archive& archive);
void standardize_bands(ImageTensor& image);

/// Raw image file: three little-endian u32 (C, H, W) then C*H*W little-endian
/// f32 values in band-major order.
ImageTensor read_image_file(const std::filesystem::path& path);
void write_image_file(const std::filesystem::path& path, const ImageTensor& image);

/// Reads `<dir>/manifest.json` plus the referenced raw files. Rejects
/// malformed manifests, duplicate ids, shape mismatches and non-finite pixels,
/// naming the offending record. When `standardize` is set the archive is
/// band-standardized after validation.
Archive load_archive(const std::filesystem::path& dir, bool standardize = true);

/// Writes a manifest directory readable by load_archive (no standardization).
void write_archive(const Archive& archive, const std::filesystem::path& dir);

struct ArchiveSplit {
  Archive train;
  Archive held_out;
};

/// Stratified by the first label: within each class every record whose
/// within-class rank r satisfies floor((r+1)*f) > floor(r*f) is held out.
ArchiveSplit split_archive(const Archive& archive, double holdout_fraction);

/// Flattened pixels, one row per record. Used for raw-pixel baselines.
Matrix flatten_pixels(const Archive& archive);

}  // namespace rejepa
