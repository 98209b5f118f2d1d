#include "fumnet/checkpoint.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <set>

namespace fumnet {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void put_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }
void put_i64(std::ostream& out, std::int64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); }
void put_string(std::ostream& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

class Reader {
 public:
  explicit Reader(std::vector<char> bytes) : bytes_(std::move(bytes)) {}

  void read(void* dst, std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) throw CheckpointError(std::string("checkpoint truncated while reading ") + what);
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32(const char* what) {
    std::uint32_t v;
    read(&v, 4, what);
    return v;
  }
  std::int64_t i64(const char* what) {
    std::int64_t v;
    read(&v, 8, what);
    return v;
  }
  std::string string(const char* what) {
    const std::uint32_t n = u32(what);
    std::string s(n, '\0');
    read(s.data(), n, what);
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::vector<char> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const FumModel<float>& model, const CheckpointMeta& meta) {
  NamedTensors<float> records = model.parameters();
  for (auto& b : model.buffers()) records.push_back(b);

  nlohmann::json header;
  header["config"] = nlohmann::json::parse(to_json(model.config()));
  header["val_accuracy"] = meta.val_accuracy;
  header["episode"] = meta.episode;

  // Write to a sibling file first so a failed write never clobbers a good checkpoint.
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
    out.write(kCheckpointMagic, sizeof kCheckpointMagic);
    put_u32(out, kCheckpointVersion);
    put_string(out, header.dump());
    put_u32(out, static_cast<std::uint32_t>(records.size()));
    for (const auto& r : records) {
      put_string(out, r.name);
      put_u32(out, static_cast<std::uint32_t>(r.tensor.rank()));
      for (Index d : r.tensor.shape()) put_i64(out, d);
      const Eigen::VectorXf values = r.tensor.data().template cast<float>();
      out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * 4));
    }
    if (!out) throw CheckpointError("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  Reader r(std::vector<char>(std::istreambuf_iterator<char>(in), {}));

  char magic[8];
  r.read(magic, 8, "magic bytes");
  if (std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw CheckpointError("not a checkpoint (bad magic bytes / unknown version): " + path.string());
  }
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }

  Checkpoint ck;
  try {
    const auto header = nlohmann::json::parse(r.string("header"));
    ck.config = model_config_from_json(header.at("config").dump());
    ck.meta.val_accuracy = header.at("val_accuracy").get<double>();
    ck.meta.episode = header.at("episode").get<Index>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint header: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("malformed checkpoint header: ") + e.what());
  }

  const std::uint32_t count = r.u32("record count");
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.string("record name");
    const std::uint32_t rank = r.u32("record rank");
    if (rank > 8) throw CheckpointError("malformed record " + name + ": rank " + std::to_string(rank));
    Shape shape;
    Index total = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const std::int64_t d = r.i64("record shape");
      if (d < 1 || d > (Index{1} << 32)) throw CheckpointError("malformed record " + name + ": bad dimension");
      shape.push_back(d);
      total *= d;
    }
    Eigen::VectorXf values(total);
    r.read(values.data(), static_cast<std::size_t>(total) * 4, "tensor data");
    ck.tensors.emplace(std::move(name), Tensor<float>(std::move(shape), std::move(values)));
  }
  if (!r.done()) throw CheckpointError("trailing bytes after the last checkpoint record");
  return ck;
}

void apply_checkpoint(const Checkpoint& checkpoint, FumModel<float>& model) {
  NamedTensors<float> targets = model.parameters();
  for (auto& b : model.buffers()) targets.push_back(b);
  std::set<std::string> used;
  for (auto& t : targets) {
    const auto it = checkpoint.tensors.find(t.name);
    if (it == checkpoint.tensors.end()) throw CheckpointError("checkpoint has no tensor " + t.name);
    if (it->second.shape() != t.tensor.shape()) {
      throw CheckpointError("shape mismatch for " + t.name + ": checkpoint " + to_string(it->second.shape()) +
                            ", model " + to_string(t.tensor.shape()));
    }
    used.insert(t.name);
  }
  for (const auto& [name, _] : checkpoint.tensors) {
    if (!used.contains(name)) throw CheckpointError("checkpoint tensor " + name + " does not exist in the model");
  }
  for (auto& t : targets) t.tensor.data() = checkpoint.tensors.at(t.name).data();
}

}  // namespace fumnet
