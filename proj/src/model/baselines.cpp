#include "pmf/baselines.hpp"

#include <algorithm>

#include "pmf/ops.hpp"
#include "pmf/tape.hpp"

namespace pmf {

const char* baseline_kind_name(BaselineKind k) {
  switch (k) {
    case BaselineKind::linear: return "linear";
    case BaselineKind::late_concat: return "late_concat";
    case BaselineKind::prompt_img_only: return "prompt_img_only";
    case BaselineKind::prompt_txt_only: return "prompt_txt_only";
  }
  return "?";
}

std::optional<BaselineKind> parse_baseline_kind(const std::string& name) {
  for (auto k : {BaselineKind::linear, BaselineKind::late_concat, BaselineKind::prompt_img_only,
                 BaselineKind::prompt_txt_only}) {
    if (name == baseline_kind_name(k)) return k;
  }
  return std::nullopt;
}

std::vector<NamedTensor> BaselineModel::named_tensors() const {
  auto out = img.named_tensors("img.");
  auto t = txt.named_tensors("txt.");
  out.insert(out.end(), t.begin(), t.end());
  for (std::size_t l = 0; l < prompts.size(); ++l) {
    out.push_back({"prompt." + std::to_string(l), prompts[l]});
  }
  out.push_back({"head.W", head.w});
  out.push_back({"head.b", head.b});
  return out;
}

BaselineModel build_baseline(BaselineKind kind, const EncoderParams& img, const EncoderParams& txt,
                             std::size_t n_classes, LossKind loss, std::uint64_t seed,
                             std::size_t prompt_len) {
  if (img.dtype != txt.dtype) throw Error("build_baseline: backbones have different dtypes");
  BaselineModel m;
  m.kind = kind;
  m.n_classes = n_classes;
  m.loss = loss;
  m.prompt_len = prompt_len;
  if (kind == BaselineKind::late_concat) {
    m.img = img.clone();
    m.txt = txt.clone();
    m.img.set_trainable(true);
    m.txt.set_trainable(true);
  } else {
    m.img = img;
    m.txt = txt;
    m.img.set_trainable(false);
    m.txt.set_trainable(false);
  }
  Rng root(seed);
  const DType dt = img.dtype;
  std::size_t head_in = img.config.dim + txt.config.dim;
  if (kind == BaselineKind::prompt_img_only || kind == BaselineKind::prompt_txt_only) {
    if (prompt_len == 0) throw Error("build_baseline: prompt length must be positive");
    const auto& tower = kind == BaselineKind::prompt_img_only ? m.img : m.txt;
    head_in = tower.config.dim;
    Rng prng = root.fork("prompts");
    for (std::size_t l = 0; l < tower.config.layers; ++l) {
      std::vector<double> v(prompt_len * tower.config.dim);
      for (auto& x : v) x = prng.normal(0.0, 0.02);
      m.prompts.push_back(Tensor::from_vector(v, {prompt_len, tower.config.dim}, dt, true));
    }
  }
  Rng hrng = root.fork("heads");
  m.head = init_head(head_in, n_classes, dt, hrng);
  return m;
}

std::vector<NamedTensor> trainable_tensors(const BaselineModel& model) {
  std::vector<NamedTensor> out;
  for (auto& nt : model.named_tensors()) {
    if (nt.tensor.requires_grad()) out.push_back(nt);
  }
  return out;
}

std::vector<std::string> trainable_set(const BaselineModel& model) {
  std::vector<std::string> names;
  for (auto& nt : trainable_tensors(model)) names.push_back(nt.name);
  return names;
}

TokenSequence deep_prompted_encode(const TokenSequence& seq, const EncoderParams& params,
                                   const std::vector<Tensor>& prompts) {
  if (prompts.size() != params.layers.size()) {
    throw Error("deep_prompted_encode: need one prompt block per layer");
  }
  TokenSequence cur = seq;
  const std::size_t n = seq.size();
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    std::vector<std::uint8_t> mask = cur.mask;
    mask.insert(mask.end(), prompts[l].rows(), 1);
    TokenSequence in{ops::concat_rows({cur.tokens, prompts[l]}), std::move(mask)};
    TokenSequence out = transformer_layer(in, params.layers[l], params.config);
    cur = TokenSequence{ops::slice_rows(out.tokens, 0, n), seq.mask};
  }
  return cur;
}

namespace {

void check_inputs(const BaselineModel& m, const Image* image,
                  const std::optional<std::span<const std::int64_t>>& text) {
  if (m.uses_image() && image == nullptr) {
    throw Error(std::string("baseline ") + baseline_kind_name(m.kind) + " needs an image input");
  }
  if (m.uses_text() && !text) {
    throw Error(std::string("baseline ") + baseline_kind_name(m.kind) + " needs a text input");
  }
}

TokenSequence run_tower(const TokenSequence& embedded, const EncoderParams& params) {
  return encode_range(embedded, params, 0, params.layers.size());
}

}  // namespace

BaselineInputs baseline_prepare(const BaselineModel& m, const Image* image,
                                std::optional<std::span<const std::int64_t>> text) {
  check_inputs(m, image, text);
  if (m.kind == BaselineKind::late_concat) {
    throw Error("baseline_prepare: late_concat has no frozen prefix");
  }
  NoGradScope scope;
  BaselineInputs in;
  switch (m.kind) {
    case BaselineKind::linear:
      in.img = run_tower(embed_image(*image, m.img), m.img);
      in.txt = run_tower(embed_text(*text, m.txt), m.txt);
      break;
    case BaselineKind::prompt_img_only:
      in.img = embed_image(*image, m.img);
      break;
    case BaselineKind::prompt_txt_only:
      in.txt = embed_text(*text, m.txt);
      break;
    case BaselineKind::late_concat:
      break;
  }
  return in;
}

Tensor baseline_forward_prepared(const BaselineModel& m, const BaselineInputs& in) {
  switch (m.kind) {
    case BaselineKind::linear:
      return ops::linear(ops::concat_cols(pooled_cls(in.img, m.img), pooled_cls(in.txt, m.txt)), m.head.w, m.head.b);
    case BaselineKind::prompt_img_only:
      return ops::linear(pooled_cls(deep_prompted_encode(in.img, m.img, m.prompts), m.img), m.head.w, m.head.b);
    case BaselineKind::prompt_txt_only:
      return ops::linear(pooled_cls(deep_prompted_encode(in.txt, m.txt, m.prompts), m.txt), m.head.w, m.head.b);
    case BaselineKind::late_concat:
      break;
  }
  throw Error("baseline_forward_prepared: late_concat needs raw inputs");
}

Tensor baseline_forward(const BaselineModel& m, const Image* image,
                        std::optional<std::span<const std::int64_t>> text) {
  check_inputs(m, image, text);
  if (m.kind != BaselineKind::late_concat) {
    return baseline_forward_prepared(m, baseline_prepare(m, image, text));
  }
  Tensor ci = pooled_cls(run_tower(embed_image(*image, m.img), m.img), m.img);
  Tensor ct = pooled_cls(run_tower(embed_text(*text, m.txt), m.txt), m.txt);
  return ops::linear(ops::concat_cols(ci, ct), m.head.w, m.head.b);
}

}  // namespace pmf
