#include "rejepa/data.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>

#include <json.hpp>

#include "rejepa/errors.hpp"
#include "rejepa/random.hpp"

static_assert(std::endian::native == std::endian::little,
              "raw image files are read and written with host byte order");

namespace rejepa {

LabelSet make_label_set(std::vector<std::string> labels) {
  std::sort(labels.begin(), labels.end());
  labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
  return labels;
}

PatchSequence patchify(const ImageTensor& image, int patch_size) {
  if (patch_size <= 0) throw ShapeError("patch_size must be positive, got " + std::to_string(patch_size));
  if (image.height % patch_size != 0 || image.width % patch_size != 0) {
    throw ShapeError("image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                     " is not divisible by patch_size " + std::to_string(patch_size));
  }
  PatchSequence seq;
  seq.rows = image.height / patch_size;
  seq.cols = image.width / patch_size;
  seq.patch_size = patch_size;
  seq.bands = image.bands;
  const int dim = image.bands * patch_size * patch_size;
  seq.tokens.resize(seq.rows * seq.cols, dim);
  for (int gy = 0; gy < seq.rows; ++gy) {
    for (int gx = 0; gx < seq.cols; ++gx) {
      const int t = gy * seq.cols + gx;
      int k = 0;
      for (int c = 0; c < image.bands; ++c)
        for (int dy = 0; dy < patch_size; ++dy)
          for (int dx = 0; dx < patch_size; ++dx)
            seq.tokens(t, k++) = image.at(c, gy * patch_size + dy, gx * patch_size + dx);
    }
  }
  return seq;
}

ImageTensor unpatchify(const PatchSequence& patches) {
  const int p = patches.patch_size;
  ImageTensor image(patches.bands, patches.rows * p, patches.cols * p);
  if (patches.tokens.rows() != patches.size() || patches.tokens.cols() != patches.bands * p * p) {
    throw ShapeError("patch sequence shape does not match its grid");
  }
  for (int gy = 0; gy < patches.rows; ++gy) {
    for (int gx = 0; gx < patches.cols; ++gx) {
      const int t = gy * patches.cols + gx;
      int k = 0;
      for (int c = 0; c < patches.bands; ++c)
        for (int dy = 0; dy < p; ++dy)
          for (int dx = 0; dx < p; ++dx)
            image.at(c, gy * p + dy, gx * p + dx) = static_cast<float>(patches.tokens(t, k++));
    }
  }
  return image;
}

namespace {

struct WaveVector {
  int kx;
  int ky;
};

struct ClassTexture {
  std::array<WaveVector, 2> waves;
  std::array<double, 2> phase;
  std::vector<std::array<double, 2>> mixing;  // one row per band
};

std::vector<WaveVector> candidate_waves(int side, int grid) {
  const int kmax = std::max(1, side / 4);
  std::vector<WaveVector> out;
  for (int kx = 0; kx <= kmax; ++kx) {
    for (int ky = -kmax; ky <= kmax; ++ky) {
      if (kx == 0 && ky <= 0) continue;
      if (kx * kx + ky * ky > kmax * kmax) continue;
      // A plane wave averages to zero over the patch grid unless both of its
      // components are multiples of the grid size.
      if (grid > 1 && kx % grid == 0 && ky % grid == 0) continue;
      out.push_back({kx, ky});
    }
  }
  return out;
}

}  // namespace

Archive generate_synthetic_archive(const SyntheticConfig& config) {
  if (config.n_classes < 2) throw ConfigError("n_classes must be >= 2");
  if (config.n_images < config.n_classes) throw ConfigError("n_images must be >= n_classes");
  if (config.bands < 1) throw ConfigError("bands must be >= 1");
  if (config.patch_size < 1 || config.side < 1 || config.side % config.patch_size != 0) {
    throw ConfigError("side must be a positive multiple of patch_size");
  }
  if (!(config.noise >= 0.0)) throw ConfigError("noise must be >= 0");

  Rng rng(derive_seed({config.seed, 0x5e}));
  std::vector<WaveVector> candidates = candidate_waves(config.side, config.side / config.patch_size);
  if (candidates.size() < std::size_t(2 * config.n_classes)) {
    throw ConfigError("side " + std::to_string(config.side) + " is too small for " +
                      std::to_string(config.n_classes) + " distinct texture classes");
  }
  std::shuffle(candidates.begin(), candidates.end(), rng);

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  constexpr double two_pi = 2.0 * std::numbers::pi;

  std::vector<ClassTexture> classes(config.n_classes);
  for (int c = 0; c < config.n_classes; ++c) {
    ClassTexture& tex = classes[c];
    tex.waves = {candidates[2 * c], candidates[2 * c + 1]};
    tex.phase = {two_pi * unit(rng), two_pi * unit(rng)};
    tex.mixing.resize(config.bands);
    for (auto& row : tex.mixing) {
      double a = normal(rng), b = normal(rng);
      const double norm = std::hypot(a, b);
      row = norm > 0 ? std::array<double, 2>{a / norm, b / norm} : std::array<double, 2>{1.0, 0.0};
    }
  }

  const int side = config.side;
  Archive archive;
  archive.reserve(config.n_images);
  for (int i = 0; i < config.n_images; ++i) {
    const int label = i % config.n_classes;
    const ClassTexture& tex = classes[label];
    ArchiveRecord record;
    char id[32];
    std::snprintf(id, sizeof(id), "img_%05d", i);
    record.id = id;
    record.labels = {"class_" + std::to_string(label)};
    record.image = ImageTensor(config.bands, side, side);

    std::array<std::vector<double>, 2> components;
    for (int k = 0; k < 2; ++k) {
      const double phase = tex.phase[k] + std::numbers::pi * (unit(rng) - 0.5);
      components[k].resize(std::size_t(side) * side);
      for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x)
          components[k][std::size_t(y) * side + x] =
              std::sin(two_pi * (tex.waves[k].kx * x + tex.waves[k].ky * y) / side + phase);
    }
    for (int b = 0; b < config.bands; ++b) {
      for (int y = 0; y < side; ++y) {
        for (int x = 0; x < side; ++x) {
          const std::size_t p = std::size_t(y) * side + x;
          const double v = tex.mixing[b][0] * components[0][p] + tex.mixing[b][1] * components[1][p] +
                           config.noise * normal(rng);
          record.image.at(b, y, x) = static_cast<float>(v);
        }
      }
    }
    archive.push_back(std::move(record));
  }
  standardize_bands(archive);
  return archive;
}

void standardize_bands(Archive& archive) {
  if (archive.empty()) return;
  const int bands = archive.front().image.bands;
  for (const auto& r : archive) {
    if (r.image.bands != bands) throw ShapeError("record " + r.id + " has a different band count");
  }
  for (int c = 0; c < bands; ++c) {
    double sum = 0.0, sq = 0.0;
    std::size_t count = 0;
    for (const auto& r : archive) {
      const std::size_t plane = std::size_t(r.image.height) * r.image.width;
      const float* v = r.image.values.data() + c * plane;
      for (std::size_t i = 0; i < plane; ++i) sum += v[i];
      count += plane;
    }
    const double mean = sum / double(count);
    for (const auto& r : archive) {
      const std::size_t plane = std::size_t(r.image.height) * r.image.width;
      const float* v = r.image.values.data() + c * plane;
      for (std::size_t i = 0; i < plane; ++i) sq += (v[i] - mean) * (v[i] - mean);
    }
    const double stdev = std::sqrt(sq / double(count));
    const double scale = stdev > 0.0 ? 1.0 / stdev : 1.0;
    for (auto& r : archive) {
      const std::size_t plane = std::size_t(r.image.height) * r.image.width;
      float* v = r.image.values.data() + c * plane;
      for (std::size_t i = 0; i < plane; ++i) v[i] = static_cast<float>((v[i] - mean) * scale);
    }
  }
}

void standardize_bands(ImageTensor& image) {
  Archive single(1);
  single[0].image = std::move(image);
  standardize_bands(single);
  image = std::move(single[0].image);
}

ImageTensor read_image_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image file " + path.string());
  std::uint32_t header[3];
  if (!in.read(reinterpret_cast<char*>(header), sizeof(header))) {
    throw IngestionError("image file " + path.string() + " is shorter than its 12-byte header");
  }
  const std::uint64_t count = std::uint64_t(header[0]) * header[1] * header[2];
  if (header[0] == 0 || header[1] == 0 || header[2] == 0 || count > (std::uint64_t(1) << 32)) {
    throw IngestionError("image file " + path.string() + " has an invalid shape header");
  }
  ImageTensor image{static_cast<int>(header[0]), static_cast<int>(header[1]), static_cast<int>(header[2])};
  if (!in.read(reinterpret_cast<char*>(image.values.data()), std::streamsize(count * sizeof(float)))) {
    throw IngestionError("image file " + path.string() + " holds fewer values than its header declares");
  }
  in.peek();
  if (!in.eof()) throw IngestionError("image file " + path.string() + " has trailing bytes after its payload");
  return image;
}

void write_image_file(const std::filesystem::path& path, const ImageTensor& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write image file " + path.string());
  const std::uint32_t header[3] = {std::uint32_t(image.bands), std::uint32_t(image.height),
                                   std::uint32_t(image.width)};
  out.write(reinterpret_cast<const char*>(header), sizeof(header));
  out.write(reinterpret_cast<const char*>(image.values.data()), std::streamsize(image.size() * sizeof(float)));
  if (!out) throw IoError("short write to " + path.string());
}

Archive load_archive(const std::filesystem::path& dir, bool standardize) {
  const auto manifest_path = dir / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot open manifest " + manifest_path.string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError("malformed manifest " + manifest_path.string() + ": " + e.what());
  }
  if (!manifest.is_array()) throw IngestionError("manifest " + manifest_path.string() + " must be a JSON array");

  Archive archive;
  std::set<std::string> seen;
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    const auto& entry = manifest[i];
    const std::string where = "manifest entry " + std::to_string(i);
    if (!entry.is_object() || !entry.contains("id") || !entry["id"].is_string()) {
      throw IngestionError(where + " lacks a string \"id\"");
    }
    ArchiveRecord record;
    record.id = entry["id"].get<std::string>();
    const std::string rec = "record '" + record.id + "'";
    if (!entry.contains("file") || !entry["file"].is_string()) throw IngestionError(rec + " lacks a string \"file\"");
    if (!entry.contains("labels") || !entry["labels"].is_array()) {
      throw IngestionError(rec + " lacks a \"labels\" array");
    }
    std::vector<std::string> labels;
    for (const auto& l : entry["labels"]) {
      if (!l.is_string()) throw IngestionError(rec + " has a non-string label");
      labels.push_back(l.get<std::string>());
    }
    record.labels = make_label_set(std::move(labels));
    if (!seen.insert(record.id).second) throw IngestionError("duplicate " + rec);
    try {
      record.image = read_image_file(dir / entry["file"].get<std::string>());
    } catch (const Error& e) {
      throw IngestionError(rec + ": " + e.what());
    }
    for (float v : record.image.values) {
      if (!std::isfinite(v)) throw IngestionError(rec + " contains a non-finite pixel value");
    }
    if (!archive.empty()) {
      const auto& first = archive.front().image;
      if (record.image.bands != first.bands || record.image.height != first.height ||
          record.image.width != first.width) {
        throw IngestionError(rec + " shape mismatch: " + std::to_string(record.image.bands) + "x" +
                             std::to_string(record.image.height) + "x" + std::to_string(record.image.width) +
                             " vs archive " + std::to_string(first.bands) + "x" + std::to_string(first.height) +
                             "x" + std::to_string(first.width));
      }
    }
    archive.push_back(std::move(record));
  }
  if (standardize) standardize_bands(archive);
  return archive;
}

void write_archive(const Archive& archive, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create archive directory " + dir.string() + ": " + ec.message());
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& r : archive) {
    const std::string file = r.id + ".bin";
    write_image_file(dir / file, r.image);
    manifest.push_back({{"id", r.id}, {"file", file}, {"labels", r.labels}});
  }
  std::ofstream out(dir / "manifest.json");
  if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(1) << "\n";
}

ArchiveSplit split_archive(const Archive& archive, double holdout_fraction) {
  if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0)) {
    throw ConfigError("holdout_fraction must lie in [0, 1)");
  }
  ArchiveSplit split;
  std::map<std::string, int> rank;
  for (const auto& r : archive) {
    const std::string key = r.labels.empty() ? std::string() : r.labels.front();
    const int k = rank[key]++;
    const bool hold = std::floor((k + 1) * holdout_fraction) > std::floor(k * holdout_fraction);
    (hold ? split.held_out : split.train).push_back(r);
  }
  return split;
}

Matrix flatten_pixels(const Archive& archive) {
  if (archive.empty()) return Matrix();
  Matrix out(archive.size(), archive.front().image.size());
  for (std::size_t i = 0; i < archive.size(); ++i) {
    if (archive[i].image.size() != std::size_t(out.cols())) throw ShapeError("records differ in size");
    for (std::size_t j = 0; j < archive[i].image.size(); ++j) out(i, j) = archive[i].image.values[j];
  }
  return out;
}

}  // namespace rejepa
