#pragma once

// Image datasets, N-way K-shot episode sampling and input preprocessing.

#include "fumnet/rng.hpp"

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace fumnet {

using Index = Eigen::Index;

/// Raised for anything wrong with input data: missing files, bad images,
/// datasets too small for the requested episodes.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Channel-major image, values nominally in [0, 1] before normalization.
struct Image {
  Index channels = 0;
  Index height = 0;
  Index width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(Index c, Index h, Index w, float fill = 0.0f)
      : channels(c), height(h), width(w), pixels(static_cast<std::size_t>(c * h * w), fill) {}

  float& at(Index c, Index y, Index x) { return pixels[static_cast<std::size_t>((c * height + y) * width + x)]; }
  float at(Index c, Index y, Index x) const {
    return pixels[static_cast<std::size_t>((c * height + y) * width + x)];
  }
  Index size() const { return channels * height * width; }
};

enum class Split { train, val, test };

std::string to_string(Split split);

struct ClassRecord {
  std::string class_id;
  std::vector<Image> samples;
};

struct Dataset {
  std::vector<ClassRecord> classes;
  Split split = Split::train;

  Index num_classes() const { return static_cast<Index>(classes.size()); }
  const Image& image(Index class_index, Index sample_index) const {
    return classes.at(static_cast<std::size_t>(class_index)).samples.at(static_cast<std::size_t>(sample_index));
  }
};

struct SampleRef {
  Index class_index = 0;  // index into Dataset::classes
  Index sample_index = 0;

  friend bool operator==(const SampleRef&, const SampleRef&) = default;
};

/// One task. Labels are episode-local: the i-th sampled class is label i.
/// Support is ordered class-major: class 0's K shots, then class 1's, ...
struct Episode {
  Index n_way = 0;
  Index k_shot = 0;
  std::vector<Index> classes;  // dataset class index for each label
  std::vector<SampleRef> support;
  std::vector<Index> support_labels;
  std::vector<SampleRef> query;
  std::vector<Index> query_labels;

  Index query_size() const { return static_cast<Index>(query.size()); }
};

/// Uniformly picks n_way classes, then k_shot support and the query samples
/// without replacement inside each class. The query is split across classes
/// as evenly as possible; (query_size mod n_way) labels drawn at random
/// receive one extra query, so no label is favoured on average.
Episode sample_episode(const Dataset& dataset, Index n_way, Index k_shot, Index query_size, Rng& rng);

struct PreprocessConfig {
  Index target = 84;
  Index channels = 3;
  double crop_ratio = 0.875;  // shorter side is scaled to round(target / crop_ratio)
  std::array<float, 3> mean{0.5f, 0.5f, 0.5f};
  std::array<float, 3> stddev{0.5f, 0.5f, 0.5f};
};

/// Bilinear resampling with half-pixel centers and edge clamping.
Image resize_bilinear(const Image& image, Index height, Index width);

/// Scale the shorter side to round(target / crop_ratio), center-crop
/// target x target, then normalize each channel as (v - mean) / std.
/// Grayscale input is replicated to the configured channel count.
Image preprocess(const Image& raw, const PreprocessConfig& config);

struct SyntheticConfig {
  Index num_classes = 30;
  Index samples_per_class = 30;
  double noise_sigma = 0.1;
  Index max_shift = 4;
  std::uint64_t seed = 0;
  Index image_size = 84;
  Index channels = 3;
};

/// Raw synthetic images in [0, 1]: one smooth random prototype per class
/// plus per-sample gaussian noise and a circular shift of at most
/// max_shift pixels, clipped to [0, 1].
Dataset generate_synthetic_dataset(const SyntheticConfig& config);

/// The smooth random field used as a class prototype.
Image synthetic_prototype(const SyntheticConfig& config, Index class_index);

struct DatasetSplits {
  Dataset train;
  Dataset val;
  Dataset test;
};

/// Class counts used when partitioning a synthetic dataset: val and test
/// each get num_classes / 6 (at least one), train gets the rest.
std::array<Index, 3> synthetic_split_sizes(Index num_classes);

/// Partitions classes in order (train first, then val, then test).
DatasetSplits partition_classes(Dataset all, const std::array<Index, 3>& sizes);

/// Generates, preprocesses and partitions a synthetic dataset.
DatasetSplits make_synthetic_splits(const SyntheticConfig& config, const PreprocessConfig& preprocess_config);

void preprocess_in_place(Dataset& dataset, const PreprocessConfig& config);

/// Loads root/<class>/<images> for every class named in split_file (one
/// class name per line, blank lines ignored) and preprocesses the images.
Dataset load_folder_dataset(const std::filesystem::path& root, const std::filesystem::path& split_file, Split split,
                            const PreprocessConfig& config);

/// Writes a dataset of raw [0, 1] images as root/<class>/<nnnn>.ppm and the
/// train.txt / val.txt / test.txt split files.
void write_folder_dataset(const DatasetSplits& splits, const std::filesystem::path& root);

// Image files: binary netpbm (P5/P6) always; JPEG when built with libjpeg.
Image read_image(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Image& image);

}  // namespace fumnet
