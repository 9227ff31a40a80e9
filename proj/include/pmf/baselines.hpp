#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pmf/fusion.hpp"

namespace pmf {

// linear: frozen towers, one head on [CLS_img || CLS_txt].
// late_concat: same architecture, everything trainable.
// prompt_*_only: deep prompts on one frozen tower plus a head on its CLS.
enum class BaselineKind { linear, late_concat, prompt_img_only, prompt_txt_only };

const char* baseline_kind_name(BaselineKind k);
std::optional<BaselineKind> parse_baseline_kind(const std::string& name);

struct BaselineModel {
  BaselineKind kind = BaselineKind::linear;
  EncoderParams img, txt;
  LinearHead head;
  std::vector<Tensor> prompts;  // one (prompt_len x d) block per layer of the prompted tower
  std::size_t prompt_len = 10;
  std::size_t n_classes = 2;
  LossKind loss = LossKind::single_label;

  DType dtype() const { return img.dtype; }
  bool uses_image() const { return kind != BaselineKind::prompt_txt_only; }
  bool uses_text() const { return kind != BaselineKind::prompt_img_only; }
  std::vector<NamedTensor> named_tensors() const;
};

/// late_concat trains private copies of the backbones; the other kinds freeze
/// the given backbones in place.
BaselineModel build_baseline(BaselineKind kind, const EncoderParams& img, const EncoderParams& txt,
                             std::size_t n_classes, LossKind loss, std::uint64_t seed,
                             std::size_t prompt_len = 10);

/// Names of the parameters the kind trains, in named_tensors() order.
std::vector<std::string> trainable_set(const BaselineModel& model);
std::vector<NamedTensor> trainable_tensors(const BaselineModel& model);

/// Runs one prompted tower: [z || P_l] through every layer l, dropping prompt rows.
TokenSequence deep_prompted_encode(const TokenSequence& seq, const EncoderParams& params,
                                   const std::vector<Tensor>& prompts);

/// Output of the frozen, untracked part of a baseline: final sequences of
/// both towers for linear, the embedded sequence of the prompted tower for
/// prompt kinds. late_concat has no frozen part.
struct BaselineInputs {
  TokenSequence img, txt;
};

BaselineInputs baseline_prepare(const BaselineModel& model, const Image* image,
                                std::optional<std::span<const std::int64_t>> text);
Tensor baseline_forward_prepared(const BaselineModel& model, const BaselineInputs& inputs);

/// Head logits (1 x classes). Missing inputs for a kind that needs them throw.
Tensor baseline_forward(const BaselineModel& model, const Image* image,
                        std::optional<std::span<const std::int64_t>> text);

}  // namespace pmf
