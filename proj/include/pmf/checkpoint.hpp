#pragma once

#include <filesystem>
#include <memory>
#include <vector>

#include <json.hpp>

#include "pmf/classifier.hpp"

namespace pmf {

inline constexpr char kCheckpointMagic[8] = {'P', 'M', 'F', 'C', 'K', 'P', 'T', '1'};
inline constexpr int kCheckpointVersion = 1;

/// Layout: 8-byte magic, u64 little-endian manifest length, UTF-8 JSON
/// manifest {format_version, configs, tensors: [{name, dtype, shape, offset,
/// length}]}, then the tensor payloads back to back. Offsets are relative to
/// the start of the payload section.
struct TensorContainer {
  nlohmann::json configs;
  std::vector<NamedTensor> tensors;
};

void write_container(const std::filesystem::path& path, const TensorContainer& c);
TensorContainer read_container(const std::filesystem::path& path);

/// Stores every tensor of the model plus its config().
void save_checkpoint(const Classifier& model, const std::filesystem::path& path);
/// Rebuilds the classifier and restores every tensor bitwise.
std::unique_ptr<Classifier> load_checkpoint(const std::filesystem::path& path);

/// Backbone files: one encoder's config and tensors.
void save_encoder(const EncoderParams& enc, const std::filesystem::path& path);
EncoderParams load_encoder(const std::filesystem::path& path);

}  // namespace pmf
