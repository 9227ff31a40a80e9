#include "pmf/fusion.hpp"

#include <algorithm>
#include <cmath>

#include "pmf/ops.hpp"
#include "pmf/tape.hpp"

namespace pmf {

const char* loss_kind_name(LossKind k) {
  return k == LossKind::single_label ? "weighted_ce" : "bce_multilabel";
}

LossKind parse_loss_kind(const std::string& name) {
  if (name == "weighted_ce" || name == "single_label") return LossKind::single_label;
  if (name == "bce_multilabel" || name == "multi_label") return LossKind::multi_label;
  throw Error("unknown loss kind '" + name + "'");
}

FusionConfig FusionConfig::defaults_for(const EncoderConfig& img, const EncoderConfig& txt) {
  FusionConfig c;
  c.lf_img = img.layers >= 2 ? img.layers - 2 : 0;
  c.lf_txt = txt.layers >= 2 ? txt.layers - 2 : 0;
  return c;
}

void FusionConfig::validate(const EncoderConfig& img, const EncoderConfig& txt) const {
  if (lf_img > img.layers || lf_txt > txt.layers) {
    throw Error("fusion config: Lf_img=" + std::to_string(lf_img) + " / Lf_txt=" +
                std::to_string(lf_txt) + " outside [0, L]");
  }
  if (img.layers - lf_img != txt.layers - lf_txt) {
    throw Error("fusion config: towers have different fusion depths (" +
                std::to_string(img.layers - lf_img) + " vs " + std::to_string(txt.layers - lf_txt) +
                ")");
  }
  if (n_classes < 1) throw Error("fusion config: n_classes must be >= 1");
  if (identity_mapping && img.dim != txt.dim) {
    throw Error("fusion config: identity mapping needs equal widths (" + std::to_string(img.dim) +
                " vs " + std::to_string(txt.dim) + ")");
  }
}

void to_json(nlohmann::json& j, const FusionConfig& c) {
  j = nlohmann::json{{"lf_img", c.lf_img},       {"lf_txt", c.lf_txt},
                     {"m_qp", c.m_qp},           {"m_qcp", c.m_qcp},
                     {"m_fcp", c.m_fcp},         {"n_classes", c.n_classes},
                     {"loss", loss_kind_name(c.loss)}, {"identity_mapping", c.identity_mapping}};
}

void from_json(const nlohmann::json& j, FusionConfig& c) {
  j.at("lf_img").get_to(c.lf_img);
  j.at("lf_txt").get_to(c.lf_txt);
  j.at("m_qp").get_to(c.m_qp);
  j.at("m_qcp").get_to(c.m_qcp);
  j.at("m_fcp").get_to(c.m_fcp);
  j.at("n_classes").get_to(c.n_classes);
  c.loss = parse_loss_kind(j.at("loss").get<std::string>());
  c.identity_mapping = j.value("identity_mapping", false);
}

std::size_t bottleneck_dim(std::size_t d_src, std::size_t d_dst) {
  return std::max<std::size_t>(1, std::min(d_src, d_dst) / 2);
}

std::size_t PromptBank::row_count() const {
  std::size_t rows = 0;
  for (const auto& l : layers) {
    for (const auto* mp : {&l.img, &l.txt}) {
      for (const auto* t : {&mp->qp, &mp->qcp, &mp->fcp}) {
        if (t->defined()) rows += t->rows();
      }
    }
  }
  return rows;
}

std::vector<NamedTensor> PromptBank::named_tensors(const std::string& prefix) const {
  std::vector<NamedTensor> out;
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const std::string p = prefix + std::to_string(k) + ".";
    for (auto [tag, mp] : {std::pair{"img", &layers[k].img}, std::pair{"txt", &layers[k].txt}}) {
      if (mp->qp.defined()) out.push_back({p + tag + ".qp", mp->qp});
      if (mp->qcp.defined()) out.push_back({p + tag + ".qcp", mp->qcp});
      if (mp->fcp.defined()) out.push_back({p + tag + ".fcp", mp->fcp});
    }
  }
  return out;
}

namespace {

Tensor gaussian(Rng& rng, std::size_t rows, std::size_t cols, double stddev, DType dt, bool rg) {
  if (rows == 0) return Tensor();
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return Tensor::from_vector(v, {rows, cols}, dt, rg);
}

// U(-1/sqrt(in), 1/sqrt(in)), the usual default for linear layers.
Tensor fan_in_uniform(Rng& rng, std::size_t rows, std::size_t cols, std::size_t fan_in, DType dt) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = (2.0 * rng.uniform() - 1.0) * bound;
  return Tensor::from_vector(v, {rows, cols}, dt, true);
}

}  // namespace

PromptBank init_prompts(const FusionConfig& config, std::size_t d_img, std::size_t d_txt,
                        std::size_t fusion_layers, DType dtype, std::uint64_t seed) {
  constexpr double kStd = 0.02;
  Rng rng(seed);
  PromptBank bank;
  for (std::size_t k = 0; k < fusion_layers; ++k) {
    LayerPrompts lp;
    for (auto [mp, d] : {std::pair{&lp.img, d_img}, std::pair{&lp.txt, d_txt}}) {
      mp->qp = gaussian(rng, config.m_qp, d, kStd, dtype, true);
      mp->qcp = gaussian(rng, config.m_qcp, d, kStd, dtype, true);
      mp->fcp = gaussian(rng, config.m_fcp, d, kStd, dtype, true);
    }
    bank.layers.push_back(std::move(lp));
  }
  return bank;
}

std::vector<NamedTensor> MappingFunction::named(const std::string& p) const {
  if (identity) return {};
  return {{p + "W1", w1}, {p + "b1", b1}, {p + "W2", w2}, {p + "b2", b2}};
}

MappingFunction init_mapping(std::size_t d_src, std::size_t d_dst, DType dtype, Rng& rng) {
  const std::size_t b = bottleneck_dim(d_src, d_dst);
  MappingFunction f;
  f.d_src = d_src;
  f.d_dst = d_dst;
  f.w1 = fan_in_uniform(rng, d_src, b, d_src, dtype);
  f.b1 = fan_in_uniform(rng, 1, b, d_src, dtype);
  f.w2 = fan_in_uniform(rng, b, d_dst, b, dtype);
  f.b2 = fan_in_uniform(rng, 1, d_dst, b, dtype);
  return f;
}

MappingFunction identity_mapping(std::size_t d) {
  MappingFunction f;
  f.d_src = f.d_dst = d;
  f.identity = true;
  return f;
}

LinearHead init_head(std::size_t in, std::size_t classes, DType dtype, Rng& rng) {
  return LinearHead{fan_in_uniform(rng, in, classes, in, dtype),
                    fan_in_uniform(rng, 1, classes, in, dtype)};
}

std::vector<NamedTensor> PmfModel::backbone_tensors() const {
  auto out = img.named_tensors("img.");
  auto t = txt.named_tensors("txt.");
  out.insert(out.end(), t.begin(), t.end());
  return out;
}

std::vector<NamedTensor> PmfModel::trainable_tensors() const {
  auto out = prompts.named_tensors();
  for (std::size_t k = 0; k < img_to_txt.size(); ++k) {
    auto a = img_to_txt[k].named("map." + std::to_string(k) + ".img_to_txt.");
    auto b = txt_to_img[k].named("map." + std::to_string(k) + ".txt_to_img.");
    out.insert(out.end(), a.begin(), a.end());
    out.insert(out.end(), b.begin(), b.end());
  }
  out.push_back({"head_img.W", head_img.w});
  out.push_back({"head_img.b", head_img.b});
  out.push_back({"head_txt.W", head_txt.w});
  out.push_back({"head_txt.b", head_txt.b});
  return out;
}

std::vector<NamedTensor> PmfModel::named_tensors() const {
  auto out = backbone_tensors();
  auto t = trainable_tensors();
  out.insert(out.end(), t.begin(), t.end());
  return out;
}

PmfModel build_pmf(EncoderParams img, EncoderParams txt, const FusionConfig& fusion,
                   std::uint64_t seed) {
  img.config.validate();
  txt.config.validate();
  fusion.validate(img.config, txt.config);
  if (img.dtype != txt.dtype) throw Error("build_pmf: backbones have different dtypes");
  if (img.config.modality != Modality::image || txt.config.modality != Modality::text) {
    throw Error("build_pmf: expected an image and a text backbone");
  }
  img.set_trainable(false);
  txt.set_trainable(false);

  PmfModel m;
  m.fusion = fusion;
  const DType dt = img.dtype;
  const std::size_t di = img.config.dim, dtx = txt.config.dim;
  const std::size_t nf = fusion.fusion_layers(img.config);
  Rng root(seed);
  m.prompts = init_prompts(fusion, di, dtx, nf, dt, root.fork("prompts").seed());
  Rng map_rng = root.fork("mappings");
  if (fusion.m_qp > 0) {
    for (std::size_t k = 0; k < nf; ++k) {
      if (fusion.identity_mapping) {
        m.img_to_txt.push_back(identity_mapping(di));
        m.txt_to_img.push_back(identity_mapping(dtx));
      } else {
        m.img_to_txt.push_back(init_mapping(di, dtx, dt, map_rng));
        m.txt_to_img.push_back(init_mapping(dtx, di, dt, map_rng));
      }
    }
  }
  Rng head_rng = root.fork("heads");
  m.head_img = init_head(di, fusion.n_classes, dt, head_rng);
  m.head_txt = init_head(dtx, fusion.n_classes, dt, head_rng);
  m.img = std::move(img);
  m.txt = std::move(txt);
  return m;
}

namespace {

void check_width(const Tensor& t, std::size_t d, const char* what) {
  if (t.defined() && t.cols() != d) {
    throw Error(std::string(what) + ": prompt width " + std::to_string(t.cols()) +
                " does not match layer dim " + std::to_string(d));
  }
}

std::vector<std::uint8_t> extended_mask(const TokenSequence& z, std::size_t extra) {
  std::vector<std::uint8_t> mask = z.mask;
  mask.insert(mask.end(), extra, 1);
  return mask;
}

std::size_t rows_of(const Tensor& t) { return t.defined() ? t.rows() : 0; }

}  // namespace

Tensor querying_stage(const TokenSequence& z, const Tensor& qcp, const Tensor& qp,
                      const LayerParams& layer, const EncoderConfig& config) {
  check_width(qcp, config.dim, "querying_stage");
  check_width(qp, config.dim, "querying_stage");
  if (!qp.defined()) return Tensor();
  const std::size_t n = z.size(), mq = qp.rows();
  TokenSequence input{ops::concat_rows({z.tokens, qcp, qp}),
                      extended_mask(z, rows_of(qcp) + mq)};
  TokenSequence out = transformer_layer(input, layer, config);
  const std::size_t start = n + rows_of(qcp);
  return ops::slice_rows(out.tokens, start, start + mq);
}

Tensor map_intermediate(const Tensor& queried, const MappingFunction& f) {
  if (!queried.defined()) return Tensor();
  if (queried.cols() != f.d_src) {
    throw Error("map_intermediate: input width " + std::to_string(queried.cols()) +
                " does not match mapping source width " + std::to_string(f.d_src));
  }
  if (f.identity) return queried;
  return ops::linear(ops::relu(ops::linear(queried, f.w1, f.b1)), f.w2, f.b2);
}

TokenSequence fusion_stage(const TokenSequence& z_other, const Tensor& fcp, const Tensor& y_qp,
                           const LayerParams& layer, const EncoderConfig& config) {
  check_width(fcp, config.dim, "fusion_stage");
  check_width(y_qp, config.dim, "fusion_stage");
  const std::size_t n = z_other.size();
  if (!fcp.defined() && !y_qp.defined()) return transformer_layer(z_other, layer, config);
  TokenSequence input{ops::concat_rows({z_other.tokens, fcp, y_qp}),
                      extended_mask(z_other, rows_of(fcp) + rows_of(y_qp))};
  TokenSequence out = transformer_layer(input, layer, config);
  return TokenSequence{ops::slice_rows(out.tokens, 0, n), z_other.mask};
}

std::pair<TokenSequence, TokenSequence> fusion_layer_forward(const TokenSequence& z_img,
                                                             const TokenSequence& z_txt,
                                                             std::size_t k, const PmfModel& model) {
  const std::size_t nf = model.fusion_layers();
  if (k >= nf) {
    throw Error("fusion_layer_forward: fusion layer " + std::to_string(k) + " outside [0," +
                std::to_string(nf) + ")");
  }
  const std::size_t li = model.fusion.lf_img + k, lt = model.fusion.lf_txt + k;
  const auto& img_layer = model.img.layers[li];
  const auto& txt_layer = model.txt.layers[lt];
  const auto& p = model.prompts.layers[k];

  Tensor q_img = querying_stage(z_img, p.img.qcp, p.img.qp, img_layer, model.img.config);
  Tensor q_txt = querying_stage(z_txt, p.txt.qcp, p.txt.qp, txt_layer, model.txt.config);
  Tensor y_to_txt, y_to_img;
  if (!model.img_to_txt.empty()) {
    y_to_txt = map_intermediate(q_img, model.img_to_txt[k]);
    y_to_img = map_intermediate(q_txt, model.txt_to_img[k]);
  }
  TokenSequence next_img = fusion_stage(z_img, p.img.fcp, y_to_img, img_layer, model.img.config);
  TokenSequence next_txt = fusion_stage(z_txt, p.txt.fcp, y_to_txt, txt_layer, model.txt.config);
  return {std::move(next_img), std::move(next_txt)};
}

std::pair<TokenSequence, TokenSequence> pmf_base_features(const Image& image,
                                                          std::span<const std::int64_t> text,
                                                          const PmfModel& model) {
  NoGradScope scope;
  TokenSequence zi = encode_base(embed_image(image, model.img), model.img, model.fusion.lf_img);
  TokenSequence zt = encode_base(embed_text(text, model.txt), model.txt, model.fusion.lf_txt);
  return {std::move(zi), std::move(zt)};
}

Tensor averaged_heads(const Tensor& cls_img, const Tensor& cls_txt, const LinearHead& head_img,
                      const LinearHead& head_txt) {
  return ops::scale(ops::add(ops::linear(cls_img, head_img.w, head_img.b),
                             ops::linear(cls_txt, head_txt.w, head_txt.b)),
                    0.5);
}

Tensor pmf_forward_from_base(const TokenSequence& base_img, const TokenSequence& base_txt,
                             const PmfModel& model) {
  TokenSequence zi = base_img, zt = base_txt;
  for (std::size_t k = 0; k < model.fusion_layers(); ++k) {
    auto [ni, nt] = fusion_layer_forward(zi, zt, k, model);
    zi = std::move(ni);
    zt = std::move(nt);
  }
  return averaged_heads(pooled_cls(zi, model.img), pooled_cls(zt, model.txt),
                        model.head_img, model.head_txt);
}

Tensor pmf_forward(const Image& image, std::span<const std::int64_t> text, const PmfModel& model) {
  auto [zi, zt] = pmf_base_features(image, text, model);
  return pmf_forward_from_base(zi, zt, model);
}

void to_json(nlohmann::json& j, const ParamBreakdown& b) {
  j = nlohmann::json{{"prompts", b.prompts},   {"mappings", b.mappings},
                     {"heads", b.heads},       {"total", b.total},
                     {"mapping_share", b.mapping_share}};
}

ParamBreakdown count_trainable_params(const EncoderConfig& img, const EncoderConfig& txt,
                                      const FusionConfig& fusion) {
  fusion.validate(img, txt);
  const std::size_t nf = fusion.fusion_layers(img);
  const std::size_t di = img.dim, dt = txt.dim, c = fusion.n_classes;
  ParamBreakdown out;
  out.prompts = nf * (fusion.m_qp + fusion.m_qcp + fusion.m_fcp) * (di + dt);
  if (fusion.m_qp > 0 && !fusion.identity_mapping) {
    const std::size_t b = bottleneck_dim(di, dt);
    const std::size_t f = di * b + b + b * dt + dt;
    const std::size_t f_rev = dt * b + b + b * di + di;
    out.mappings = nf * (f + f_rev);
  }
  out.heads = (di + 1) * c + (dt + 1) * c;
  out.total = out.prompts + out.mappings + out.heads;
  out.mapping_share = out.total ? static_cast<double>(out.mappings) / out.total : 0.0;
  return out;
}

}  // namespace pmf
