#include "pmf/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace pmf {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void write_container(const std::filesystem::path& path, const TensorContainer& c) {
  nlohmann::json table = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& nt : c.tensors) {
    const std::size_t len = nt.tensor.nbytes();
    table.push_back({{"name", nt.name},
                     {"dtype", dtype_name(nt.tensor.dtype())},
                     {"shape", nt.tensor.shape()},
                     {"offset", offset},
                     {"length", len}});
    offset += len;
  }
  const nlohmann::json manifest{
      {"format_version", kCheckpointVersion}, {"configs", c.configs}, {"tensors", table}};
  const std::string text = manifest.dump();
  const std::uint64_t mlen = text.size();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open checkpoint for writing: " + path.string());
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  out.write(reinterpret_cast<const char*>(&mlen), sizeof mlen);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& nt : c.tensors) {
    visit_dtype(nt.tensor.dtype(), [&]<class T>() {
      auto d = nt.tensor.data<T>();
      out.write(reinterpret_cast<const char*>(d.data()), static_cast<std::streamsize>(d.size_bytes()));
    });
  }
  if (!out) throw Error("checkpoint write failed: " + path.string());
}

TensorContainer read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint: " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = path.string() + ": ";
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw Error(where + "bad magic (not a PMFCKPT1 checkpoint)");
  }
  std::uint64_t mlen = 0;
  std::memcpy(&mlen, bytes.data() + 8, sizeof mlen);
  if (mlen > bytes.size() - 16) throw Error(where + "truncated manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(mlen));
  } catch (const nlohmann::json::exception& e) {
    throw Error(where + "malformed manifest: " + e.what());
  }
  const int version = manifest.value("format_version", -1);
  if (version != kCheckpointVersion) {
    throw Error(where + "format version mismatch: file has " + std::to_string(version) +
                ", reader supports " + std::to_string(kCheckpointVersion));
  }
  const std::size_t base = 16 + mlen;
  const std::size_t payload = bytes.size() - base;

  TensorContainer c;
  c.configs = manifest.at("configs");
  std::size_t expected_offset = 0;
  for (const auto& entry : manifest.at("tensors")) {
    const auto name = entry.at("name").get<std::string>();
    const DType dt = parse_dtype(entry.at("dtype").get<std::string>());
    const auto shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::size_t>();
    const auto length = entry.at("length").get<std::size_t>();
    if (offset != expected_offset) {
      throw Error(where + "tensor '" + name + "' offset " + std::to_string(offset) +
                  (offset < expected_offset ? " overlaps the previous tensor" : " leaves a gap") +
                  " (expected " + std::to_string(expected_offset) + ")");
    }
    if (length != shape_numel(shape) * dtype_size(dt)) {
      throw Error(where + "length mismatch for tensor '" + name + "': shape " + shape_str(shape) +
                  " needs " + std::to_string(shape_numel(shape) * dtype_size(dt)) +
                  " bytes, manifest says " + std::to_string(length));
    }
    if (offset + length > payload) {
      throw Error(where + "length mismatch: tensor '" + name + "' runs past the end of the payload");
    }
    Tensor t = visit_dtype(dt, [&]<class T>() {
      std::vector<T> v(shape_numel(shape));
      std::memcpy(v.data(), bytes.data() + base + offset, length);
      return Tensor::from_buffer<T>(std::move(v), shape);
    });
    c.tensors.push_back({name, t});
    expected_offset = offset + length;
  }
  if (expected_offset != payload) {
    throw Error(where + "length mismatch: payload has " + std::to_string(payload) +
                " bytes, tensors account for " + std::to_string(expected_offset));
  }
  return c;
}

void save_checkpoint(const Classifier& model, const std::filesystem::path& path) {
  write_container(path, TensorContainer{nlohmann::json{{"model", model.config()}}, model.named_tensors()});
}

std::unique_ptr<Classifier> load_checkpoint(const std::filesystem::path& path) {
  TensorContainer c = read_container(path);
  if (!c.configs.contains("model")) throw Error(path.string() + ": checkpoint has no model config");
  auto model = make_classifier(c.configs.at("model"), 0);
  const auto dst = model->named_tensors();
  if (dst.size() != c.tensors.size()) {
    throw Error(path.string() + ": checkpoint holds " + std::to_string(c.tensors.size()) +
                " tensors, model expects " + std::to_string(dst.size()));
  }
  assign_tensors(dst, c.tensors);
  return model;
}

void save_encoder(const EncoderParams& enc, const std::filesystem::path& path) {
  write_container(path, TensorContainer{nlohmann::json{{"encoder", enc.config},
                                                       {"dtype", dtype_name(enc.dtype)}},
                                        enc.named_tensors()});
}

EncoderParams load_encoder(const std::filesystem::path& path) {
  TensorContainer c = read_container(path);
  if (!c.configs.contains("encoder")) throw Error(path.string() + ": file holds no encoder config");
  const auto cfg = c.configs.at("encoder").get<EncoderConfig>();
  const DType dt = parse_dtype(c.configs.value("dtype", std::string("f32")));
  Rng rng(0);
  EncoderParams enc = init_encoder(cfg, dt, rng);
  assign_tensors(enc.named_tensors(), c.tensors);
  enc.set_trainable(false);
  return enc;
}

}  // namespace pmf
