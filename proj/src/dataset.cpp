#include "fumnet/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace fumnet {

std::string to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "unknown";
}

namespace {

// Partial Fisher-Yates: the first `count` entries of the result are a
// uniform sample without replacement from [0, n).
std::vector<Index> choose_without_replacement(Index n, Index count, Rng& rng) {
  std::vector<Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Index{0});
  for (Index i = 0; i < count; ++i) {
    const Index j = i + static_cast<Index>(uniform_index(rng, static_cast<std::uint64_t>(n - i)));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  idx.resize(static_cast<std::size_t>(count));
  return idx;
}

}  // namespace

Episode sample_episode(const Dataset& dataset, Index n_way, Index k_shot, Index query_size, Rng& rng) {
  if (n_way < 1 || k_shot < 1 || query_size < 0) {
    throw std::invalid_argument("sample_episode: need n_way >= 1, k_shot >= 1, query_size >= 0");
  }
  if (dataset.num_classes() < n_way) {
    throw DataError("cannot sample a " + std::to_string(n_way) + "-way episode from the " + to_string(dataset.split) +
                    " split: it has only " + std::to_string(dataset.num_classes()) + " classes");
  }
  Episode ep;
  ep.n_way = n_way;
  ep.k_shot = k_shot;
  ep.classes = choose_without_replacement(dataset.num_classes(), n_way, rng);

  const Index base = query_size / n_way;
  std::vector<Index> queries_for(static_cast<std::size_t>(n_way), base);
  for (Index label : choose_without_replacement(n_way, query_size % n_way, rng)) {
    ++queries_for[static_cast<std::size_t>(label)];
  }
  for (Index label = 0; label < n_way; ++label) {
    const Index cls = ep.classes[static_cast<std::size_t>(label)];
    const Index queries = queries_for[static_cast<std::size_t>(label)];
    const auto& record = dataset.classes[static_cast<std::size_t>(cls)];
    const Index available = static_cast<Index>(record.samples.size());
    if (available < k_shot + queries) {
      throw DataError("class '" + record.class_id + "' has " + std::to_string(available) + " samples but the episode needs " +
                      std::to_string(k_shot) + " support + " + std::to_string(queries) + " query");
    }
    const auto picks = choose_without_replacement(available, k_shot + queries, rng);
    for (Index i = 0; i < k_shot + queries; ++i) {
      const SampleRef ref{cls, picks[static_cast<std::size_t>(i)]};
      if (i < k_shot) {
        ep.support.push_back(ref);
        ep.support_labels.push_back(label);
      } else {
        ep.query.push_back(ref);
        ep.query_labels.push_back(label);
      }
    }
  }
  return ep;
}

// ---------------------------------------------------------------------------

Image resize_bilinear(const Image& image, Index height, Index width) {
  if (image.height < 1 || image.width < 1 || height < 1 || width < 1) {
    throw DataError("resize: degenerate image dimensions");
  }
  Image out(image.channels, height, width);
  const double sy = static_cast<double>(image.height) / static_cast<double>(height);
  const double sx = static_cast<double>(image.width) / static_cast<double>(width);
  struct Tap {
    Index lo, hi;
    double frac;
  };
  auto taps = [](Index n_out, Index n_in, double scale) {
    std::vector<Tap> t(static_cast<std::size_t>(n_out));
    for (Index i = 0; i < n_out; ++i) {
      double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(n_in - 1));
      const Index lo = static_cast<Index>(std::floor(src));
      const Index hi = std::min(lo + 1, n_in - 1);
      t[static_cast<std::size_t>(i)] = {lo, hi, src - static_cast<double>(lo)};
    }
    return t;
  };
  const auto ty = taps(height, image.height, sy);
  const auto tx = taps(width, image.width, sx);
  for (Index c = 0; c < image.channels; ++c) {
    for (Index y = 0; y < height; ++y) {
      const Tap& a = ty[static_cast<std::size_t>(y)];
      for (Index x = 0; x < width; ++x) {
        const Tap& b = tx[static_cast<std::size_t>(x)];
        const double top = image.at(c, a.lo, b.lo) * (1.0 - b.frac) + image.at(c, a.lo, b.hi) * b.frac;
        const double bottom = image.at(c, a.hi, b.lo) * (1.0 - b.frac) + image.at(c, a.hi, b.hi) * b.frac;
        out.at(c, y, x) = static_cast<float>(top * (1.0 - a.frac) + bottom * a.frac);
      }
    }
  }
  return out;
}

Image preprocess(const Image& raw, const PreprocessConfig& config) {
  if (raw.height < 1 || raw.width < 1 || raw.channels < 1) throw DataError("preprocess: degenerate image dimensions");
  if (raw.channels != 1 && raw.channels != config.channels) {
    throw DataError("preprocess: image has " + std::to_string(raw.channels) + " channels, expected " +
                    std::to_string(config.channels));
  }
  if (config.channels > 3) throw std::invalid_argument("preprocess: at most 3 channels are supported");
  const Index scaled_short = static_cast<Index>(std::lround(static_cast<double>(config.target) / config.crop_ratio));
  if (scaled_short < config.target) throw std::invalid_argument("preprocess: crop_ratio must be <= 1");
  Index h, w;
  if (raw.height <= raw.width) {
    h = scaled_short;
    w = static_cast<Index>(std::lround(static_cast<double>(raw.width) * scaled_short / static_cast<double>(raw.height)));
  } else {
    w = scaled_short;
    h = static_cast<Index>(std::lround(static_cast<double>(raw.height) * scaled_short / static_cast<double>(raw.width)));
  }
  const Image scaled = resize_bilinear(raw, h, w);
  const Index top = (h - config.target) / 2;
  const Index left = (w - config.target) / 2;
  Image out(config.channels, config.target, config.target);
  for (Index c = 0; c < config.channels; ++c) {
    const Index src_c = raw.channels == 1 ? 0 : c;
    const float mean = config.mean[static_cast<std::size_t>(c)];
    const float inv_std = 1.0f / config.stddev[static_cast<std::size_t>(c)];
    for (Index y = 0; y < config.target; ++y) {
      for (Index x = 0; x < config.target; ++x) {
        out.at(c, y, x) = (scaled.at(src_c, top + y, left + x) - mean) * inv_std;
      }
    }
  }
  return out;
}

void preprocess_in_place(Dataset& dataset, const PreprocessConfig& config) {
  for (auto& cls : dataset.classes) {
    for (auto& img : cls.samples) img = preprocess(img, config);
  }
}

// ---------------------------------------------------------------------------

Image synthetic_prototype(const SyntheticConfig& config, Index class_index) {
  constexpr Index grid = 6;
  Rng rng = make_stream(config.seed, "synthetic/prototype", static_cast<std::uint64_t>(class_index));
  Image coarse(config.channels, grid, grid);
  for (auto& v : coarse.pixels) v = static_cast<float>(uniform_unit(rng));
  return resize_bilinear(coarse, config.image_size, config.image_size);
}

Dataset generate_synthetic_dataset(const SyntheticConfig& config) {
  if (config.num_classes < 3 || config.samples_per_class < 6) {
    throw std::invalid_argument("synthetic dataset needs num_classes >= 3 and samples_per_class >= 6");
  }
  if (config.noise_sigma < 0.0 || config.max_shift < 0 || config.image_size < 1 || config.channels < 1) {
    throw std::invalid_argument("synthetic dataset: invalid noise, shift or image size");
  }
  Dataset ds;
  const Index n = config.image_size;
  for (Index cls = 0; cls < config.num_classes; ++cls) {
    ClassRecord record;
    std::ostringstream name;
    name << "class_" << std::setw(3) << std::setfill('0') << cls;
    record.class_id = name.str();
    const Image proto = synthetic_prototype(config, cls);
    Rng rng = make_stream(config.seed, "synthetic/sample", static_cast<std::uint64_t>(cls));
    for (Index s = 0; s < config.samples_per_class; ++s) {
      const Index span = 2 * config.max_shift + 1;
      const Index dy = static_cast<Index>(uniform_index(rng, static_cast<std::uint64_t>(span))) - config.max_shift;
      const Index dx = static_cast<Index>(uniform_index(rng, static_cast<std::uint64_t>(span))) - config.max_shift;
      Image img(config.channels, n, n);
      for (Index c = 0; c < config.channels; ++c) {
        for (Index y = 0; y < n; ++y) {
          const Index sy = ((y - dy) % n + n) % n;
          for (Index x = 0; x < n; ++x) {
            const Index sx = ((x - dx) % n + n) % n;
            double v = proto.at(c, sy, sx);
            if (config.noise_sigma > 0.0) v += config.noise_sigma * standard_normal(rng);
            img.at(c, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
          }
        }
      }
      record.samples.push_back(std::move(img));
    }
    ds.classes.push_back(std::move(record));
  }
  return ds;
}

std::array<Index, 3> synthetic_split_sizes(Index num_classes) {
  const Index held_out = std::max<Index>(1, num_classes / 6);
  return {num_classes - 2 * held_out, held_out, held_out};
}

DatasetSplits partition_classes(Dataset all, const std::array<Index, 3>& sizes) {
  if (sizes[0] + sizes[1] + sizes[2] != all.num_classes()) {
    throw std::invalid_argument("partition_classes: split sizes do not add up to the class count");
  }
  DatasetSplits out;
  out.train.split = Split::train;
  out.val.split = Split::val;
  out.test.split = Split::test;
  std::size_t next = 0;
  Dataset* targets[3] = {&out.train, &out.val, &out.test};
  for (int s = 0; s < 3; ++s) {
    for (Index i = 0; i < sizes[static_cast<std::size_t>(s)]; ++i) targets[s]->classes.push_back(std::move(all.classes[next++]));
  }
  return out;
}

DatasetSplits make_synthetic_splits(const SyntheticConfig& config, const PreprocessConfig& preprocess_config) {
  Dataset all = generate_synthetic_dataset(config);
  preprocess_in_place(all, preprocess_config);
  return partition_classes(std::move(all), synthetic_split_sizes(config.num_classes));
}

// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> read_split_file(const std::filesystem::path& split_file) {
  std::ifstream in(split_file);
  if (!in) throw DataError("cannot open split file " + split_file.string());
  std::vector<std::string> names;
  std::string line;
  while (std::getline(in, line)) {
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto last = line.find_last_not_of(" \t\r");
    names.push_back(line.substr(first, last - first + 1));
  }
  if (names.empty()) throw DataError("split file " + split_file.string() + " lists no classes");
  return names;
}

bool is_image_file(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext == ".ppm" || ext == ".pgm" || ext == ".pnm" || ext == ".jpg" || ext == ".jpeg";
}

}  // namespace

Dataset load_folder_dataset(const std::filesystem::path& root, const std::filesystem::path& split_file, Split split,
                            const PreprocessConfig& config) {
  namespace fs = std::filesystem;
  Dataset ds;
  ds.split = split;
  for (const auto& name : read_split_file(split_file)) {
    const fs::path dir = root / name;
    if (!fs::is_directory(dir)) throw DataError("class '" + name + "' listed in " + split_file.string() + " has no directory " + dir.string());
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.is_regular_file() && is_image_file(entry.path())) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    if (files.size() < 2) {
      throw DataError("class '" + name + "' has " + std::to_string(files.size()) + " images; at least 2 are required");
    }
    ClassRecord record;
    record.class_id = name;
    for (const auto& f : files) record.samples.push_back(preprocess(read_image(f), config));
    ds.classes.push_back(std::move(record));
  }
  return ds;
}

void write_folder_dataset(const DatasetSplits& splits, const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw DataError("cannot create " + root.string() + ": " + ec.message());
  const std::pair<const Dataset*, const char*> parts[] = {
      {&splits.train, "train.txt"}, {&splits.val, "val.txt"}, {&splits.test, "test.txt"}};
  for (const auto& [ds, file] : parts) {
    std::ofstream list(root / file, std::ios::binary);
    if (!list) throw DataError("cannot write " + (root / file).string());
    for (const auto& cls : ds->classes) {
      list << cls.class_id << '\n';
      const fs::path dir = root / cls.class_id;
      fs::create_directories(dir, ec);
      if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());
      for (std::size_t i = 0; i < cls.samples.size(); ++i) {
        std::ostringstream name;
        name << std::setw(4) << std::setfill('0') << i << ".ppm";
        write_ppm(dir / name.str(), cls.samples[i]);
      }
    }
  }
}

}  // namespace fumnet
