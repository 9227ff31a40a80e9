#include "pmf/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "pmf/ops.hpp"
#include "pmf/tape.hpp"

namespace pmf {

const char* modality_name(Modality m) { return m == Modality::image ? "image" : "text"; }

void EncoderConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error("encoder config: " + msg); };
  if (layers < 1) fail("layers must be >= 1");
  if (heads < 1) fail("heads must be >= 1");
  if (dim < 1 || dim % heads != 0) fail("dim must be a positive multiple of heads");
  if (mlp_ratio < 1) fail("mlp_ratio must be >= 1");
  if (!(ln_eps > 0.0)) fail("ln_eps must be positive");
  if (modality == Modality::image) {
    if (patch < 1 || channels < 1) fail("patch and channels must be positive");
    if (image_h == 0 || image_w == 0 || image_h % patch != 0 || image_w % patch != 0) {
      fail("image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
           " is not divisible by patch " + std::to_string(patch));
    }
  } else {
    if (vocab < 1) fail("vocab must be positive");
    if (max_len < 1) fail("max_len must be positive");
  }
}

std::size_t EncoderConfig::seq_len() const {
  if (modality == Modality::image) return (image_h / patch) * (image_w / patch) + 1;
  return max_len + 1;
}

EncoderConfig EncoderConfig::image_default() {
  EncoderConfig c;
  c.modality = Modality::image;
  c.dim = 32;
  return c;
}

EncoderConfig EncoderConfig::text_default() {
  EncoderConfig c;
  c.modality = Modality::text;
  c.dim = 24;
  return c;
}

void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = nlohmann::json{{"modality", modality_name(c.modality)},
                     {"layers", c.layers},
                     {"dim", c.dim},
                     {"heads", c.heads},
                     {"mlp_ratio", c.mlp_ratio},
                     {"ln_eps", c.ln_eps}};
  if (c.modality == Modality::image) {
    j["image_h"] = c.image_h;
    j["image_w"] = c.image_w;
    j["channels"] = c.channels;
    j["patch"] = c.patch;
  } else {
    j["vocab"] = c.vocab;
    j["max_len"] = c.max_len;
  }
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
  const std::string m = j.at("modality").get<std::string>();
  if (m == "image") {
    c = EncoderConfig::image_default();
  } else if (m == "text") {
    c = EncoderConfig::text_default();
  } else {
    throw Error("encoder config: unknown modality '" + m + "'");
  }
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("layers", c.layers);
  get("dim", c.dim);
  get("heads", c.heads);
  get("mlp_ratio", c.mlp_ratio);
  get("ln_eps", c.ln_eps);
  get("image_h", c.image_h);
  get("image_w", c.image_w);
  get("channels", c.channels);
  get("patch", c.patch);
  get("vocab", c.vocab);
  get("max_len", c.max_len);
}

std::vector<NamedTensor> LayerParams::named(const std::string& p) const {
  return {{p + "ln1.gain", ln1_gain},  {p + "ln1.bias", ln1_bias},  {p + "attn.Wq", wq},
          {p + "attn.bq", bq},         {p + "attn.Wk", wk},         {p + "attn.bk", bk},
          {p + "attn.Wv", wv},         {p + "attn.bv", bv},         {p + "attn.Wo", wo},
          {p + "attn.bo", bo},         {p + "ln2.gain", ln2_gain},  {p + "ln2.bias", ln2_bias},
          {p + "mlp.W_up", w_up},      {p + "mlp.b_up", b_up},      {p + "mlp.W_down", w_down},
          {p + "mlp.b_down", b_down}};
}

std::vector<NamedTensor> EncoderParams::named_tensors(const std::string& prefix) const {
  std::vector<NamedTensor> out;
  if (config.modality == Modality::image) {
    out.push_back({prefix + "embed.W", embed_w});
    out.push_back({prefix + "embed.b", embed_b});
  } else {
    out.push_back({prefix + "embed.table", embed_w});
  }
  out.push_back({prefix + "pos", pos});
  out.push_back({prefix + "cls", cls});
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto named = layers[i].named(prefix + "layers." + std::to_string(i) + ".");
    out.insert(out.end(), named.begin(), named.end());
  }
  out.push_back({prefix + "final_ln.gain", final_gain});
  out.push_back({prefix + "final_ln.bias", final_bias});
  return out;
}

void EncoderParams::set_trainable(bool flag) {
  for (auto& nt : named_tensors()) nt.tensor.set_requires_grad(flag);
}

bool EncoderParams::trainable() const {
  auto all = named_tensors();
  return std::all_of(all.begin(), all.end(), [](const auto& nt) { return nt.tensor.requires_grad(); });
}

bool EncoderParams::frozen() const {
  auto all = named_tensors();
  return std::none_of(all.begin(), all.end(), [](const auto& nt) { return nt.tensor.requires_grad(); });
}

EncoderParams EncoderParams::clone() const {
  EncoderParams out;
  out.config = config;
  out.dtype = dtype;
  auto c = [](const Tensor& t) { return t.defined() ? t.clone() : Tensor(); };
  out.embed_w = c(embed_w);
  out.embed_b = c(embed_b);
  out.pos = c(pos);
  out.cls = c(cls);
  for (const auto& l : layers) {
    out.layers.push_back(LayerParams{c(l.ln1_gain), c(l.ln1_bias), c(l.wq), c(l.bq), c(l.wk),
                                     c(l.bk), c(l.wv), c(l.bv), c(l.wo), c(l.bo), c(l.ln2_gain),
                                     c(l.ln2_bias), c(l.w_up), c(l.b_up), c(l.w_down),
                                     c(l.b_down)});
  }
  out.final_gain = c(final_gain);
  out.final_bias = c(final_bias);
  return out;
}

namespace {

Tensor normal_tensor(Rng& rng, std::size_t r, std::size_t c, double stddev, DType dt) {
  std::vector<double> v(r * c);
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return Tensor::from_vector(v, {r, c}, dt);
}

Tensor scaled_weight(Rng& rng, std::size_t in, std::size_t out, DType dt) {
  return normal_tensor(rng, in, out, 1.0 / std::sqrt(static_cast<double>(in)), dt);
}

}  // namespace

EncoderParams init_encoder(const EncoderConfig& config, DType dtype, Rng& rng) {
  config.validate();
  EncoderParams p;
  p.config = config;
  p.dtype = dtype;
  const std::size_t d = config.dim, hidden = config.dim * config.mlp_ratio;
  if (config.modality == Modality::image) {
    p.embed_w = scaled_weight(rng, config.patch_dim(), d, dtype);
    p.embed_b = Tensor::zeros({1, d}, dtype);
  } else {
    p.embed_w = normal_tensor(rng, config.vocab, d, 1.0, dtype);
  }
  p.pos = normal_tensor(rng, config.seq_len(), d, 0.5, dtype);
  p.cls = normal_tensor(rng, 1, d, 0.5, dtype);
  for (std::size_t l = 0; l < config.layers; ++l) {
    LayerParams lp;
    lp.ln1_gain = Tensor::full({1, d}, 1.0, dtype);
    lp.ln1_bias = Tensor::zeros({1, d}, dtype);
    lp.wq = scaled_weight(rng, d, d, dtype);
    lp.bq = Tensor::zeros({1, d}, dtype);
    lp.wk = scaled_weight(rng, d, d, dtype);
    lp.bk = Tensor::zeros({1, d}, dtype);
    lp.wv = scaled_weight(rng, d, d, dtype);
    lp.bv = Tensor::zeros({1, d}, dtype);
    lp.wo = scaled_weight(rng, d, d, dtype);
    lp.bo = Tensor::zeros({1, d}, dtype);
    lp.ln2_gain = Tensor::full({1, d}, 1.0, dtype);
    lp.ln2_bias = Tensor::zeros({1, d}, dtype);
    lp.w_up = scaled_weight(rng, d, hidden, dtype);
    lp.b_up = Tensor::zeros({1, hidden}, dtype);
    lp.w_down = scaled_weight(rng, hidden, d, dtype);
    lp.b_down = Tensor::zeros({1, d}, dtype);
    p.layers.push_back(std::move(lp));
  }
  p.final_gain = Tensor::full({1, d}, 1.0, dtype);
  p.final_bias = Tensor::zeros({1, d}, dtype);
  return p;
}

TokenSequence embed_image(const Image& image, const EncoderParams& params) {
  const auto& cfg = params.config;
  if (cfg.modality != Modality::image) throw Error("embed_image: encoder is not an image encoder");
  const std::size_t p = cfg.patch;
  if (image.h % p != 0 || image.w % p != 0) {
    throw Error("embed_image: image " + std::to_string(image.h) + "x" + std::to_string(image.w) +
                " is not divisible by patch " + std::to_string(p));
  }
  if (image.h != cfg.image_h || image.w != cfg.image_w || image.c != cfg.channels) {
    throw Error("embed_image: image shape does not match encoder config");
  }
  if (image.values.size() != image.h * image.w * image.c) {
    throw Error("embed_image: value count does not match image shape");
  }
  const std::size_t gy = image.h / p, gx = image.w / p, n = gy * gx, pd = cfg.patch_dim();
  std::vector<double> patches(n * pd);
  for (std::size_t py = 0; py < gy; ++py) {
    for (std::size_t px = 0; px < gx; ++px) {
      double* row = patches.data() + (py * gx + px) * pd;
      for (std::size_t iy = 0; iy < p; ++iy) {
        for (std::size_t ix = 0; ix < p; ++ix) {
          for (std::size_t ch = 0; ch < image.c; ++ch) {
            const std::size_t y = py * p + iy, x = px * p + ix;
            row[(iy * p + ix) * image.c + ch] = image.values[(y * image.w + x) * image.c + ch];
          }
        }
      }
    }
  }
  Tensor patch_matrix = Tensor::from_vector(patches, {n, pd}, params.dtype);
  Tensor projected = ops::linear(patch_matrix, params.embed_w, params.embed_b);
  Tensor tokens = ops::add(ops::concat_rows({params.cls, projected}), params.pos);
  return TokenSequence{tokens, std::vector<std::uint8_t>(n + 1, 1)};
}

TokenSequence embed_text(std::span<const std::int64_t> ids, const EncoderParams& params) {
  const auto& cfg = params.config;
  if (cfg.modality != Modality::text) throw Error("embed_text: encoder is not a text encoder");
  if (ids.size() > cfg.max_len) {
    throw Error("embed_text: sequence length " + std::to_string(ids.size()) + " exceeds max_len " +
                std::to_string(cfg.max_len));
  }
  for (auto id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab) {
      throw Error("embed_text: token id " + std::to_string(id) + " out of range for vocab " +
                  std::to_string(cfg.vocab));
    }
  }
  const std::size_t pad = cfg.max_len - ids.size();
  std::vector<Tensor> parts{params.cls};
  if (!ids.empty()) parts.push_back(ops::gather_rows(params.embed_w, ids));
  if (pad > 0) parts.push_back(Tensor::zeros({pad, cfg.dim}, params.dtype));
  Tensor tokens = ops::add(ops::concat_rows(parts), params.pos);
  std::vector<std::uint8_t> mask(cfg.max_len + 1, 0);
  std::fill(mask.begin(), mask.begin() + 1 + ids.size(), 1);
  return TokenSequence{tokens, std::move(mask)};
}

TokenSequence transformer_layer(const TokenSequence& seq, const LayerParams& lp,
                                const EncoderConfig& cfg) {
  const Tensor& x = seq.tokens;
  if (x.dim() != 2 || x.cols() != cfg.dim) {
    throw Error("transformer_layer: token width " + (x.dim() == 2 ? std::to_string(x.cols()) : "?") +
                " does not match layer dim " + std::to_string(cfg.dim));
  }
  if (seq.mask.size() != x.rows()) throw Error("transformer_layer: mask length differs from rows");
  const bool has_masked = std::any_of(seq.mask.begin(), seq.mask.end(), [](auto m) { return m == 0; });

  Tensor h = ops::layer_norm(x, lp.ln1_gain, lp.ln1_bias, cfg.ln_eps);
  Tensor q = ops::linear(h, lp.wq, lp.bq);
  Tensor k = ops::linear(h, lp.wk, lp.bk);
  Tensor v = ops::linear(h, lp.wv, lp.bv);
  Tensor attn = ops::linear(ops::attention(q, k, v, seq.mask, cfg.heads), lp.wo, lp.bo);
  if (has_masked) attn = ops::mask_rows(attn, seq.mask);
  Tensor x1 = ops::add(x, attn);

  Tensor h2 = ops::layer_norm(x1, lp.ln2_gain, lp.ln2_bias, cfg.ln_eps);
  Tensor mlp = ops::linear(ops::gelu(ops::linear(h2, lp.w_up, lp.b_up)), lp.w_down, lp.b_down);
  if (has_masked) mlp = ops::mask_rows(mlp, seq.mask);
  return TokenSequence{ops::add(x1, mlp), seq.mask};
}

TokenSequence encode_range(const TokenSequence& seq, const EncoderParams& params, std::size_t from,
                           std::size_t to) {
  if (from > to || to > params.layers.size()) {
    throw Error("encode_range: [" + std::to_string(from) + "," + std::to_string(to) +
                ") outside [0," + std::to_string(params.layers.size()) + "]");
  }
  TokenSequence cur = seq;
  for (std::size_t l = from; l < to; ++l) cur = transformer_layer(cur, params.layers[l], params.config);
  return cur;
}

TokenSequence encode_base(const TokenSequence& seq, const EncoderParams& params, std::size_t lf) {
  if (lf > params.config.layers) {
    throw Error("encode_base: Lf=" + std::to_string(lf) + " outside [0," +
                std::to_string(params.config.layers) + "]");
  }
  if (params.frozen()) {
    NoGradScope scope;
    return encode_range(seq, params, 0, lf);
  }
  return encode_range(seq, params, 0, lf);
}

Tensor pooled_cls(const TokenSequence& seq, const EncoderParams& params) {
  return ops::layer_norm(ops::slice_rows(seq.tokens, 0, 1), params.final_gain, params.final_bias,
                         params.config.ln_eps);
}

void assign_tensors(const std::vector<NamedTensor>& dst, const std::vector<NamedTensor>& src) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& nt : src) by_name[nt.name] = &nt.tensor;
  for (const auto& nt : dst) {
    auto it = by_name.find(nt.name);
    if (it == by_name.end()) throw Error("missing tensor '" + nt.name + "'");
    const Tensor& s = *it->second;
    if (s.dtype() != nt.tensor.dtype() || s.shape() != nt.tensor.shape()) {
      throw Error("tensor '" + nt.name + "' has shape/dtype " + shape_str(s.shape()) + "/" +
                  dtype_name(s.dtype()) + ", expected " + shape_str(nt.tensor.shape()) + "/" +
                  dtype_name(nt.tensor.dtype()));
    }
    Tensor target = nt.tensor;
    target.impl()->values = s.impl()->values;
  }
}

}  // namespace pmf
