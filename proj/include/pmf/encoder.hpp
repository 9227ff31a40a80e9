#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "pmf/rng.hpp"
#include "pmf/tensor.hpp"

namespace pmf {

enum class Modality { image, text };

const char* modality_name(Modality m);

/// Row-major h x w x c grid.
struct Image {
  std::vector<float> values;
  std::size_t h = 0, w = 0, c = 0;

  bool operator==(const Image&) const = default;
};

struct EncoderConfig {
  Modality modality = Modality::image;
  std::size_t layers = 6;
  std::size_t dim = 32;
  std::size_t heads = 2;
  std::size_t mlp_ratio = 2;
  // image
  std::size_t image_h = 32, image_w = 32, channels = 1, patch = 8;
  // text
  std::size_t vocab = 64, max_len = 16;
  double ln_eps = 1e-5;

  void validate() const;
  /// Token rows including CLS.
  std::size_t seq_len() const;
  std::size_t patch_dim() const { return patch * patch * channels; }

  static EncoderConfig image_default();
  static EncoderConfig text_default();

  bool operator==(const EncoderConfig&) const = default;
};

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);

/// Rows of a token matrix plus the attendable flag for each row.
struct TokenSequence {
  Tensor tokens;
  std::vector<std::uint8_t> mask;

  std::size_t size() const { return mask.size(); }
};

struct LayerParams {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_gain, ln2_bias;
  Tensor w_up, b_up, w_down, b_down;

  std::vector<NamedTensor> named(const std::string& prefix) const;
};

struct EncoderParams {
  EncoderConfig config;
  DType dtype = DType::f32;
  // image: patch projection (patch_dim x d) + bias; text: word table (vocab x d)
  Tensor embed_w, embed_b;
  Tensor pos;  // seq_len x d
  Tensor cls;  // 1 x d
  std::vector<LayerParams> layers;
  Tensor final_gain, final_bias;  // norm applied to the pooled CLS row

  std::vector<NamedTensor> named_tensors(const std::string& prefix = "") const;
  void set_trainable(bool trainable);
  /// True iff every tensor requires grad.
  bool trainable() const;
  /// True iff no tensor requires grad.
  bool frozen() const;
  EncoderParams clone() const;
};

EncoderParams init_encoder(const EncoderConfig& config, DType dtype, Rng& rng);

TokenSequence embed_image(const Image& image, const EncoderParams& params);
TokenSequence embed_text(std::span<const std::int64_t> token_ids, const EncoderParams& params);

/// Pre-norm layer: x += MHSA(LN1(x)); x += MLP(LN2(x)). Masked rows are
/// excluded as keys and pass through unchanged.
TokenSequence transformer_layer(const TokenSequence& seq, const LayerParams& layer,
                                const EncoderConfig& config);

/// Runs layers [0, lf) and returns the input of layer lf. Frozen encoders run
/// with recording suspended.
TokenSequence encode_base(const TokenSequence& seq, const EncoderParams& params, std::size_t lf);

/// Runs layers [from, to).
TokenSequence encode_range(const TokenSequence& seq, const EncoderParams& params, std::size_t from,
                           std::size_t to);

/// Normalized CLS row (1 x d) of a final-layer sequence.
Tensor pooled_cls(const TokenSequence& seq, const EncoderParams& params);

/// Copies values into `dst` tensors by name; shapes and dtypes must match.
void assign_tensors(const std::vector<NamedTensor>& dst, const std::vector<NamedTensor>& src);

}  // namespace pmf
