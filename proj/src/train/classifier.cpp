#include "pmf/classifier.hpp"

#include "pmf/ops.hpp"
#include "pmf/tape.hpp"

namespace pmf {

std::vector<NamedTensor> Classifier::trainable_tensors() const {
  std::vector<NamedTensor> out;
  for (auto& nt : named_tensors()) {
    if (nt.tensor.requires_grad()) out.push_back(nt);
  }
  return out;
}

std::vector<NamedTensor> Classifier::frozen_tensors() const {
  std::vector<NamedTensor> out;
  for (auto& nt : named_tensors()) {
    if (!nt.tensor.requires_grad()) out.push_back(nt);
  }
  return out;
}

Prepared PmfClassifier::prepare(const MultimodalRecord& r) const {
  auto [img, txt] = pmf_base_features(r.image, r.tokens, model_);
  return Prepared{std::move(img), std::move(txt), &r};
}

Tensor PmfClassifier::forward(const Prepared& p) const {
  return pmf_forward_from_base(p.img, p.txt, model_);
}

nlohmann::json PmfClassifier::config() const {
  return nlohmann::json{{"kind", "pmf"},
                        {"dtype", dtype_name(model_.dtype())},
                        {"img", model_.img.config},
                        {"txt", model_.txt.config},
                        {"fusion", model_.fusion}};
}

Prepared BaselineClassifier::prepare(const MultimodalRecord& r) const {
  if (model_.kind == BaselineKind::late_concat) return Prepared{{}, {}, &r};
  std::optional<std::span<const std::int64_t>> text;
  if (model_.uses_text()) text = std::span<const std::int64_t>(r.tokens);
  BaselineInputs in = baseline_prepare(model_, model_.uses_image() ? &r.image : nullptr, text);
  return Prepared{std::move(in.img), std::move(in.txt), &r};
}

Tensor BaselineClassifier::forward(const Prepared& p) const {
  if (model_.kind != BaselineKind::late_concat) {
    return baseline_forward_prepared(model_, BaselineInputs{p.img, p.txt});
  }
  if (p.record == nullptr) throw Error("late_concat forward needs the raw record");
  return baseline_forward(model_, &p.record->image, std::span<const std::int64_t>(p.record->tokens));
}

nlohmann::json BaselineClassifier::config() const {
  return nlohmann::json{{"kind", baseline_kind_name(model_.kind)},
                        {"dtype", dtype_name(model_.dtype())},
                        {"img", model_.img.config},
                        {"txt", model_.txt.config},
                        {"n_classes", model_.n_classes},
                        {"loss", loss_kind_name(model_.loss)},
                        {"prompt_len", model_.prompt_len}};
}

std::unique_ptr<Classifier> make_classifier(const nlohmann::json& config, std::uint64_t seed) {
  const auto kind = config.at("kind").get<std::string>();
  const DType dt = parse_dtype(config.value("dtype", std::string("f32")));
  const auto ic = config.at("img").get<EncoderConfig>();
  const auto tc = config.at("txt").get<EncoderConfig>();
  Rng root(seed);
  Rng ri = root.fork("img_backbone"), rt = root.fork("txt_backbone");
  EncoderParams img = init_encoder(ic, dt, ri);
  EncoderParams txt = init_encoder(tc, dt, rt);
  if (kind == "pmf") {
    const auto fc = config.at("fusion").get<FusionConfig>();
    return std::make_unique<PmfClassifier>(build_pmf(std::move(img), std::move(txt), fc, seed));
  }
  const auto bk = parse_baseline_kind(kind);
  if (!bk) throw Error("unknown model kind '" + kind + "'");
  const auto loss = parse_loss_kind(config.value("loss", std::string("weighted_ce")));
  return std::make_unique<BaselineClassifier>(build_baseline(*bk, img, txt,
                                                             config.at("n_classes").get<std::size_t>(),
                                                             loss, seed,
                                                             config.value("prompt_len", std::size_t{10})));
}

}  // namespace pmf
