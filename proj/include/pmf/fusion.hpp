#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "pmf/encoder.hpp"

namespace pmf {

enum class LossKind { single_label, multi_label };

const char* loss_kind_name(LossKind k);
LossKind parse_loss_kind(const std::string& name);

/// Where fusion starts in each tower and how long each prompt kind is.
/// A prompt kind with length 0 is disabled. identity_mapping replaces the
/// bottleneck mapping with the identity (only legal for equal widths).
struct FusionConfig {
  std::size_t lf_img = 4;
  std::size_t lf_txt = 4;
  std::size_t m_qp = 4;
  std::size_t m_qcp = 4;
  std::size_t m_fcp = 4;
  std::size_t n_classes = 2;
  LossKind loss = LossKind::single_label;
  bool identity_mapping = false;

  /// Lf = L - 2 in both towers, M = 4 for every prompt kind.
  static FusionConfig defaults_for(const EncoderConfig& img, const EncoderConfig& txt);
  void validate(const EncoderConfig& img, const EncoderConfig& txt) const;
  std::size_t fusion_layers(const EncoderConfig& img) const { return img.layers - lf_img; }

  bool operator==(const FusionConfig&) const = default;
};

void to_json(nlohmann::json& j, const FusionConfig& c);
void from_json(const nlohmann::json& j, FusionConfig& c);

/// max(1, floor(min(d_src, d_dst) / 2))
std::size_t bottleneck_dim(std::size_t d_src, std::size_t d_dst);

struct ModalityPrompts {
  Tensor qp, qcp, fcp;  // undefined when the kind's length is 0
};

struct LayerPrompts {
  ModalityPrompts img, txt;
};

struct PromptBank {
  std::vector<LayerPrompts> layers;  // one per fusion layer

  std::size_t row_count() const;
  std::vector<NamedTensor> named_tensors(const std::string& prefix = "prompts.") const;
};

/// Every entry i.i.d. N(0, 0.02^2) from the seeded stream.
PromptBank init_prompts(const FusionConfig& config, std::size_t d_img, std::size_t d_txt,
                        std::size_t fusion_layers, DType dtype, std::uint64_t seed);

/// x -> W2 relu(W1 x + b1) + b2, applied row-wise.
struct MappingFunction {
  std::size_t d_src = 0, d_dst = 0;
  bool identity = false;
  Tensor w1, b1, w2, b2;

  std::size_t bottleneck() const { return identity ? 0 : w1.cols(); }
  std::vector<NamedTensor> named(const std::string& prefix) const;
};

MappingFunction init_mapping(std::size_t d_src, std::size_t d_dst, DType dtype, Rng& rng);
MappingFunction identity_mapping(std::size_t d);

struct LinearHead {
  Tensor w, b;  // (in x classes), (1 x classes)
};

LinearHead init_head(std::size_t in, std::size_t classes, DType dtype, Rng& rng);

/// Two frozen towers fused by per-layer prompts and mappings, classified by
/// two heads whose pre-softmax logits are averaged.
struct PmfModel {
  EncoderParams img, txt;
  FusionConfig fusion;
  PromptBank prompts;
  std::vector<MappingFunction> img_to_txt, txt_to_img;  // f and f'
  LinearHead head_img, head_txt;

  DType dtype() const { return img.dtype; }
  std::size_t fusion_layers() const { return fusion.fusion_layers(img.config); }
  std::vector<NamedTensor> named_tensors() const;
  std::vector<NamedTensor> trainable_tensors() const;
  std::vector<NamedTensor> backbone_tensors() const;
};

/// Assembles a PMF model around the given backbones (which are frozen in
/// place). Prompts, mappings, and heads draw from streams forked off seed.
PmfModel build_pmf(EncoderParams img, EncoderParams txt, const FusionConfig& fusion,
                   std::uint64_t seed);

/// Runs the layer on [z || qcp || qp] and returns the rows at the qp
/// positions. Returns an undefined tensor when qp is absent.
Tensor querying_stage(const TokenSequence& z, const Tensor& qcp, const Tensor& qp,
                      const LayerParams& layer, const EncoderConfig& config);

Tensor map_intermediate(const Tensor& queried, const MappingFunction& mapping);

/// Runs the other tower's layer on [z' || fcp || y_qp] and keeps the first
/// z'.size() rows.
TokenSequence fusion_stage(const TokenSequence& z_other, const Tensor& fcp, const Tensor& y_qp,
                           const LayerParams& layer, const EncoderConfig& config);

/// One two-way fusion layer; k indexes the fusion layers (0 = first).
std::pair<TokenSequence, TokenSequence> fusion_layer_forward(const TokenSequence& z_img,
                                                             const TokenSequence& z_txt,
                                                             std::size_t k, const PmfModel& model);

/// Frozen prefix of both towers: embeddings plus layers below Lf, with
/// recording suspended.
std::pair<TokenSequence, TokenSequence> pmf_base_features(const Image& image,
                                                          std::span<const std::int64_t> text,
                                                          const PmfModel& model);

/// Fusion layers and heads on top of base features. Returns (1 x classes).
Tensor pmf_forward_from_base(const TokenSequence& base_img, const TokenSequence& base_txt,
                             const PmfModel& model);

Tensor pmf_forward(const Image& image, std::span<const std::int64_t> text, const PmfModel& model);

/// 0.5 * (head_img(cls_img) + head_txt(cls_txt))
Tensor averaged_heads(const Tensor& cls_img, const Tensor& cls_txt, const LinearHead& head_img,
                      const LinearHead& head_txt);

struct ParamBreakdown {
  std::size_t prompts = 0;
  std::size_t mappings = 0;
  std::size_t heads = 0;
  std::size_t total = 0;
  double mapping_share = 0.0;
};

void to_json(nlohmann::json& j, const ParamBreakdown& b);

/// Closed-form trainable-parameter count; allocates nothing.
ParamBreakdown count_trainable_params(const EncoderConfig& img, const EncoderConfig& txt,
                                      const FusionConfig& fusion);

}  // namespace pmf
