// Small models and inputs shared by the unit and acceptance tests.
#pragma once

#include <vector>

#include "pmf/data.hpp"
#include "pmf/fusion.hpp"

namespace fixtures {

struct ToyShape {
  std::size_t d_img = 16, d_txt = 12, layers = 4, lf = 2, m = 2, classes = 2;
  pmf::DType dtype = pmf::DType::f64;
};

inline pmf::EncoderConfig toy_image(const ToyShape& s) {
  pmf::EncoderConfig c = pmf::EncoderConfig::image_default();
  c.layers = s.layers;
  c.dim = s.d_img;
  c.heads = 2;
  c.image_h = c.image_w = 8;
  c.patch = 4;
  return c;
}

inline pmf::EncoderConfig toy_text(const ToyShape& s) {
  pmf::EncoderConfig c = pmf::EncoderConfig::text_default();
  c.layers = s.layers;
  c.dim = s.d_txt;
  c.heads = 2;
  c.vocab = 12;
  c.max_len = 5;
  return c;
}

inline pmf::FusionConfig toy_fusion(const ToyShape& s) {
  pmf::FusionConfig f;
  f.lf_img = f.lf_txt = s.lf;
  f.m_qp = f.m_qcp = f.m_fcp = s.m;
  f.n_classes = s.classes;
  return f;
}

inline pmf::PmfModel toy_pmf(const ToyShape& s, std::uint64_t seed) {
  pmf::Rng root(seed);
  pmf::Rng ri = root.fork("img"), rt = root.fork("txt");
  auto img = pmf::init_encoder(toy_image(s), s.dtype, ri);
  auto txt = pmf::init_encoder(toy_text(s), s.dtype, rt);
  return pmf::build_pmf(std::move(img), std::move(txt), toy_fusion(s), root.fork("fusion").seed());
}

inline pmf::Image toy_picture(pmf::Rng& rng) {
  pmf::Image im{std::vector<float>(64), 8, 8, 1};
  for (auto& v : im.values) v = static_cast<float>(rng.normal());
  return im;
}

/// Three real tokens, so two pad rows stay masked.
inline std::vector<std::int64_t> toy_tokens(pmf::Rng& rng) {
  return {static_cast<std::int64_t>(rng.below(12)), static_cast<std::int64_t>(rng.below(12)),
          static_cast<std::int64_t>(rng.below(12))};
}

inline pmf::TokenSequence random_sequence(pmf::Rng& rng, std::size_t n, std::size_t d,
                                          std::vector<std::uint8_t> mask,
                                          pmf::DType dt = pmf::DType::f64) {
  std::vector<double> v(n * d);
  for (auto& x : v) x = rng.normal();
  return pmf::TokenSequence{pmf::Tensor::from_vector(v, {n, d}, dt), std::move(mask)};
}

inline pmf::Tensor random_matrix(pmf::Rng& rng, std::size_t r, std::size_t c,
                                 pmf::DType dt = pmf::DType::f64, bool rg = false) {
  std::vector<double> v(r * c);
  for (auto& x : v) x = rng.normal();
  return pmf::Tensor::from_vector(v, {r, c}, dt, rg);
}

/// Task whose records fit the toy encoders (8x8 images, vocab 12, <= 5 tokens).
inline pmf::TaskSpec toy_task(pmf::TaskKind kind = pmf::TaskKind::xor2) {
  pmf::TaskSpec t;
  t.kind = kind;
  t.image_h = t.image_w = 8;
  t.patch = 4;
  t.signal_patch = 1;
  t.vocab = 12;
  t.min_len = 2;
  t.max_len = 5;
  return t;
}

}  // namespace fixtures
