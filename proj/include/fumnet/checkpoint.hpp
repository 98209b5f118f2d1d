#pragma once

// Binary checkpoints: magic bytes, format version, a JSON blob holding the
// model config and run metadata, then one record per parameter and buffer
// (name, rank, dims, little-endian float32 values).

#include "fumnet/model.hpp"

#include <filesystem>
#include <map>

namespace fumnet {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[8] = {'F', 'U', 'M', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  double val_accuracy = 0.0;
  Index episode = 0;
};

struct Checkpoint {
  ModelConfig config;
  CheckpointMeta meta;
  std::map<std::string, Tensor<float>> tensors;
};

void save_checkpoint(const std::filesystem::path& path, const FumModel<float>& model, const CheckpointMeta& meta = {});

/// Throws CheckpointError on bad magic, unsupported version or a truncated
/// or malformed file.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies checkpoint values into the model. Throws CheckpointError naming
/// the tensor on a missing entry or shape mismatch.
void apply_checkpoint(const Checkpoint& checkpoint, FumModel<float>& model);

}  // namespace fumnet
