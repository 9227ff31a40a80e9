#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "fixtures.hpp"
#include "oracle.hpp"
#include "pmf/fusion.hpp"
#include "pmf/gradcheck.hpp"
#include "pmf/ops.hpp"
#include "pmf/tape.hpp"

using namespace pmf;
using fixtures::ToyShape;

namespace {

void zero_out(const Tensor& t) {
  Tensor h = t;
  for (std::size_t i = 0; i < h.numel(); ++i) h.set(i, 0.0);
}

Tensor cross_entropy_of(const Tensor& logits, std::int64_t label) {
  std::vector<std::int64_t> y{label};
  return ops::cross_entropy(logits, y, {});
}

}  // namespace

TEST_CASE("init_prompts: row count, statistics, determinism") {
  FusionConfig f;
  f.m_qp = f.m_qcp = f.m_fcp = 4;
  auto bank = init_prompts(f, 8, 6, 2, DType::f64, 7);
  CHECK(bank.row_count() == 48);
  for (const auto& nt : bank.named_tensors()) CHECK(nt.tensor.requires_grad());

  FusionConfig big;
  big.m_qp = big.m_qcp = big.m_fcp = 50;
  auto many = init_prompts(big, 100, 100, 4, DType::f64, 11);
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (const auto& nt : many.named_tensors()) {
    for (double v : nt.tensor.to_vector()) {
      sum += v;
      sq += v * v;
      ++n;
    }
  }
  REQUIRE(n >= 100000);
  const double mean = sum / static_cast<double>(n);
  CHECK(std::abs(mean) < 3.0 * 0.02 / std::sqrt(static_cast<double>(n)));
  CHECK(std::sqrt(sq / static_cast<double>(n)) == doctest::Approx(0.02).epsilon(0.01));

  auto again = init_prompts(f, 8, 6, 2, DType::f64, 7);
  auto a = bank.named_tensors(), b = again.named_tensors();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].tensor.equals(b[i].tensor));
}

TEST_CASE("prompts are distinct parameters per layer and modality") {
  auto m = fixtures::toy_pmf(ToyShape{}, 1);
  std::set<const void*> seen;
  for (const auto& nt : m.prompts.named_tensors()) seen.insert(nt.tensor.impl().get());
  CHECK(seen.size() == m.prompts.named_tensors().size());
}

TEST_CASE("querying_stage: shape and slice oracle") {
  ToyShape s;
  auto cfg = fixtures::toy_image(s);
  Rng rng(3);
  auto enc = init_encoder(cfg, DType::f64, rng);
  auto z = fixtures::random_sequence(rng, 6, s.d_img, {1, 1, 1, 1, 0, 1});
  Tensor qcp = fixtures::random_matrix(rng, 2, s.d_img), qp = fixtures::random_matrix(rng, 3, s.d_img);
  Tensor out = querying_stage(z, qcp, qp, enc.layers[0], cfg);
  CHECK(out.shape() == Shape{3, s.d_img});
  auto ref = oracle::querying(oracle::of(z.tokens), z.mask, qcp, qp, enc.layers[0], cfg);
  CHECK(oracle::max_abs_diff(ref, out.to_vector()) < 1e-12);

  SUBCASE("no QCP equals querying on [z || qp]") {
    Tensor a = querying_stage(z, Tensor(), qp, enc.layers[0], cfg);
    std::vector<std::uint8_t> mask = z.mask;
    mask.insert(mask.end(), 3, 1);
    TokenSequence cat{ops::concat_rows({z.tokens, qp}), mask};
    Tensor b = ops::slice_rows(transformer_layer(cat, enc.layers[0], cfg).tokens, 6, 9);
    CHECK(a.equals(b));
  }

  SUBCASE("width mismatch") {
    Tensor wrong = fixtures::random_matrix(rng, 3, s.d_img + 1);
    CHECK_THROWS_AS(querying_stage(z, qcp, wrong, enc.layers[0], cfg), Error);
  }
}

TEST_CASE("map_intermediate: zero weights, bottleneck shape, dense oracle") {
  Rng rng(4);
  auto f = init_mapping(32, 24, DType::f64, rng);
  CHECK(f.bottleneck() == 12);
  CHECK(f.w1.shape() == Shape{32, 12});
  CHECK(f.w2.shape() == Shape{12, 24});
  Tensor x = fixtures::random_matrix(rng, 4, 32);
  Tensor y = map_intermediate(x, f);
  CHECK(y.shape() == Shape{4, 24});
  CHECK(oracle::max_abs_diff(oracle::mapping(oracle::of(x), f), y.to_vector()) < 1e-12);

  for (const auto& nt : f.named("")) zero_out(nt.tensor);
  for (double v : map_intermediate(x, f).to_vector()) CHECK(v == 0.0);

  CHECK_THROWS_AS(map_intermediate(fixtures::random_matrix(rng, 4, 31), f), Error);
  CHECK(bottleneck_dim(1, 1) == 1);
  CHECK(bottleneck_dim(768, 768) == 384);
  CHECK(bottleneck_dim(1024, 1024) == 512);
}

TEST_CASE("fusion_stage: row count, degenerate case, slice oracle") {
  ToyShape s;
  auto cfg = fixtures::toy_text(s);
  Rng rng(5);
  auto enc = init_encoder(cfg, DType::f64, rng);
  auto z = fixtures::random_sequence(rng, 6, s.d_txt, {1, 1, 1, 1, 0, 0});
  Tensor fcp = fixtures::random_matrix(rng, 3, s.d_txt);
  Tensor y = fixtures::random_matrix(rng, 2, s.d_txt);
  auto out = fusion_stage(z, fcp, y, enc.layers[1], cfg);
  CHECK(out.tokens.shape() == z.tokens.shape());
  CHECK(out.mask == z.mask);
  auto ref = oracle::fusion(oracle::of(z.tokens), z.mask, fcp, oracle::of(y), enc.layers[1], cfg);
  CHECK(oracle::max_abs_diff(ref, out.tokens.to_vector()) < 1e-12);

  auto plain = fusion_stage(z, Tensor(), Tensor(), enc.layers[1], cfg);
  CHECK(plain.tokens.equals(transformer_layer(z, enc.layers[1], cfg).tokens));

  CHECK_THROWS_AS(fusion_stage(z, fixtures::random_matrix(rng, 3, s.d_txt + 2), y, enc.layers[1], cfg), Error);
}

TEST_CASE("fusion_layer_forward: shapes preserved") {
  auto m = fixtures::toy_pmf(ToyShape{}, 6);
  Rng rng(6);
  Image im = fixtures::toy_picture(rng);
  auto ids = fixtures::toy_tokens(rng);
  auto [zi, zt] = pmf_base_features(im, ids, m);
  auto [ni, nt] = fusion_layer_forward(zi, zt, 0, m);
  CHECK(ni.tokens.shape() == zi.tokens.shape());
  CHECK(nt.tokens.shape() == zt.tokens.shape());
  CHECK_THROWS_AS(fusion_layer_forward(zi, zt, m.fusion_layers(), m), Error);
}

TEST_CASE("fusion_layer_forward: relabeling the modalities swaps the outputs") {
  auto m = fixtures::toy_pmf(ToyShape{}, 7);
  Rng rng(7);
  auto [zi, zt] = pmf_base_features(fixtures::toy_picture(rng), fixtures::toy_tokens(rng), m);

  PmfModel swapped;
  swapped.img = m.txt;
  swapped.txt = m.img;
  swapped.fusion = m.fusion;
  for (const auto& l : m.prompts.layers) swapped.prompts.layers.push_back(LayerPrompts{l.txt, l.img});
  swapped.img_to_txt = m.txt_to_img;
  swapped.txt_to_img = m.img_to_txt;
  swapped.head_img = m.head_txt;
  swapped.head_txt = m.head_img;

  for (std::size_t k = 0; k < m.fusion_layers(); ++k) {
    auto [a_img, a_txt] = fusion_layer_forward(zi, zt, k, m);
    auto [b_img, b_txt] = fusion_layer_forward(zt, zi, k, swapped);
    CHECK(a_img.tokens.equals(b_txt.tokens));
    CHECK(a_txt.tokens.equals(b_img.tokens));
  }
}

TEST_CASE("fusion_layer_forward: zero mappings isolate the towers") {
  auto m = fixtures::toy_pmf(ToyShape{}, 8);
  for (auto* maps : {&m.img_to_txt, &m.txt_to_img}) {
    for (auto& f : *maps) {
      for (const auto& nt : f.named("")) zero_out(nt.tensor);
    }
  }
  Rng rng(8);
  auto ids = fixtures::toy_tokens(rng);
  auto [zi1, zt1] = pmf_base_features(fixtures::toy_picture(rng), ids, m);
  auto [zi2, zt2] = pmf_base_features(fixtures::toy_picture(rng), fixtures::toy_tokens(rng), m);
  // change only the image input: the text tower's update must not move
  auto [a_img, a_txt] = fusion_layer_forward(zi1, zt1, 0, m);
  auto [b_img, b_txt] = fusion_layer_forward(zi2, zt1, 0, m);
  CHECK(a_txt.tokens.equals(b_txt.tokens));
  CHECK_FALSE(a_img.tokens.equals(b_img.tokens));
  // and the other way round
  auto [c_img, c_txt] = fusion_layer_forward(zi1, zt2, 0, m);
  CHECK(a_img.tokens.equals(c_img.tokens));

  // with zero intermediates each tower's update is the fusion stage on zeros
  const auto& p = m.prompts.layers[0];
  Tensor zeros_img = Tensor::zeros({m.fusion.m_qp, m.img.config.dim}, DType::f64);
  auto ref = fusion_stage(zi1, p.img.fcp, zeros_img, m.img.layers[m.fusion.lf_img], m.img.config);
  CHECK(ref.tokens.equals(a_img.tokens));
}

TEST_CASE("pmf_forward: logits shape, no backbone grads, reach exactly the trainable set") {
  auto m = fixtures::toy_pmf(ToyShape{}, 9);
  Rng rng(9);
  Image im = fixtures::toy_picture(rng);
  auto ids = fixtures::toy_tokens(rng);
  Tape tape;
  Tensor logits;
  {
    RecordingScope rec(tape);
    logits = pmf_forward(im, ids, m);
    backward(cross_entropy_of(logits, 1), tape);
  }
  CHECK(logits.shape() == Shape{1, 2});
  for (const auto& nt : m.backbone_tensors()) {
    CHECK_FALSE(nt.tensor.has_grad());
    CHECK_FALSE(nt.tensor.requires_grad());
  }
  for (const auto& nt : m.trainable_tensors()) {
    INFO(nt.name);
    CHECK(nt.tensor.has_grad());
  }
}

TEST_CASE("averaged dual heads equal the concatenated single head with half-size blocks") {
  Rng rng(10);
  const std::size_t di = 16, dt = 12, c = 3;
  Tensor ci = fixtures::random_matrix(rng, 1, di), ct = fixtures::random_matrix(rng, 1, dt);
  LinearHead hi{fixtures::random_matrix(rng, di, c, DType::f64, true), fixtures::random_matrix(rng, 1, c, DType::f64, true)};
  LinearHead ht{fixtures::random_matrix(rng, dt, c, DType::f64, true), fixtures::random_matrix(rng, 1, c, DType::f64, true)};
  Tape tape;
  Tensor dual;
  {
    RecordingScope rec(tape);
    dual = averaged_heads(ci, ct, hi, ht);
    backward(cross_entropy_of(dual, 2), tape);
  }

  // oracle: W = [W_img / 2 ; W_txt / 2], b = (b_img + b_txt) / 2
  oracle::Mat w{di + dt, c, {}};
  for (double v : hi.w.to_vector()) w.v.push_back(v / 2);
  for (double v : ht.w.to_vector()) w.v.push_back(v / 2);
  auto bi = hi.b.to_vector(), bt = ht.b.to_vector();
  oracle::Mat x{1, di + dt, ci.to_vector()};
  for (double v : ct.to_vector()) x.v.push_back(v);
  auto logits = oracle::matmul(x, w);
  for (std::size_t j = 0; j < c; ++j) logits.v[j] += (bi[j] + bt[j]) / 2;
  CHECK(oracle::max_abs_diff(logits, dual.to_vector()) < 1e-12);

  // oracle CE gradient wrt its logits: softmax - onehot
  double mx = *std::max_element(logits.v.begin(), logits.v.end()), z = 0.0;
  for (double v : logits.v) z += std::exp(v - mx);
  std::vector<double> g(c);
  for (std::size_t j = 0; j < c; ++j) g[j] = std::exp(logits.v[j] - mx) / z - (j == 2 ? 1.0 : 0.0);
  auto gwi = hi.w.grad().to_vector(), gwt = ht.w.grad().to_vector();
  for (std::size_t r = 0; r < di; ++r)
    for (std::size_t j = 0; j < c; ++j) CHECK(gwi[r * c + j] == doctest::Approx(0.5 * x.v[r] * g[j]).epsilon(1e-12));
  for (std::size_t r = 0; r < dt; ++r)
    for (std::size_t j = 0; j < c; ++j) CHECK(gwt[r * c + j] == doctest::Approx(0.5 * x.v[di + r] * g[j]).epsilon(1e-12));
  for (std::size_t j = 0; j < c; ++j) CHECK(hi.b.grad().at(j) == doctest::Approx(0.5 * g[j]).epsilon(1e-12));
}

TEST_CASE("count_trainable_params: toy arithmetic and independent recount") {
  ToyShape s;
  s.d_img = 32;
  s.d_txt = 24;
  s.layers = 4;
  s.lf = 2;
  s.m = 2;
  auto b = count_trainable_params(fixtures::toy_image(s), fixtures::toy_text(s), fixtures::toy_fusion(s));
  CHECK(b.prompts == 2 * (3 * 2 * 32 + 3 * 2 * 24));
  CHECK(b.mappings == 2 * ((32 * 12 + 12 + 12 * 24 + 24) + (24 * 12 + 12 + 12 * 32 + 32)));
  CHECK(b.heads == 33 * 2 + 25 * 2);
  CHECK(b.total == 3636);

  auto m = fixtures::toy_pmf(s, 3);
  std::size_t counted = 0;
  for (const auto& nt : m.trainable_tensors()) counted += nt.tensor.numel();
  CHECK(counted == b.total);
}

TEST_CASE("count_trainable_params: base and large analogues") {
  auto make = [](std::size_t layers, std::size_t d) {
    EncoderConfig i = EncoderConfig::image_default(), t = EncoderConfig::text_default();
    i.layers = t.layers = layers;
    i.dim = t.dim = d;
    i.heads = t.heads = 12;
    FusionConfig f;
    f.lf_img = f.lf_txt = layers - 2;
    f.n_classes = 23;
    return count_trainable_params(i, t, f);
  };
  auto base = make(12, 768);
  CHECK(base.total >= 2250000);
  CHECK(base.total <= 2600000);
  CHECK(base.mapping_share >= 0.95);
  auto large = make(24, 1024);
  CHECK(large.total >= 4100000);
  CHECK(large.total <= 4600000);
}

TEST_CASE("count_trainable_params: disabled mappings and prompt kinds") {
  ToyShape s;
  auto f = fixtures::toy_fusion(s);
  f.m_qp = 0;
  auto b = count_trainable_params(fixtures::toy_image(s), fixtures::toy_text(s), f);
  CHECK(b.mappings == 0);
  Rng rng(1);
  auto img = init_encoder(fixtures::toy_image(s), DType::f64, rng);
  auto txt = init_encoder(fixtures::toy_text(s), DType::f64, rng);
  auto m = build_pmf(img, txt, f, 2);
  CHECK(m.img_to_txt.empty());
  std::size_t counted = 0;
  for (const auto& nt : m.trainable_tensors()) counted += nt.tensor.numel();
  CHECK(counted == b.total);
}

TEST_CASE("fusion config validation") {
  ToyShape s;
  auto i = fixtures::toy_image(s), t = fixtures::toy_text(s);
  FusionConfig f = fixtures::toy_fusion(s);
  f.lf_txt = 1;
  CHECK_THROWS_AS(f.validate(i, t), Error);
  f = fixtures::toy_fusion(s);
  f.lf_img = f.lf_txt = 5;
  CHECK_THROWS_AS(f.validate(i, t), Error);
  f = fixtures::toy_fusion(s);
  f.identity_mapping = true;
  CHECK_THROWS_AS(f.validate(i, t), Error);
  t.dim = i.dim;
  CHECK_NOTHROW(f.validate(i, t));

  auto d = FusionConfig::defaults_for(i, t);
  CHECK(d.lf_img == 2);
  CHECK(d.m_qp == 4);
  nlohmann::json j = d;
  CHECK(j.get<FusionConfig>() == d);
}

TEST_CASE("tape locality: the frozen prefix records nothing, later fusion records less") {
  ToyShape s;
  auto run = [&](std::size_t lf) {
    s.lf = lf;
    auto m = fixtures::toy_pmf(s, 4);
    Rng rng(4);
    Image im = fixtures::toy_picture(rng);
    auto ids = fixtures::toy_tokens(rng);
    Tape tape;
    RecordingScope rec(tape);
    auto [zi, zt] = pmf_base_features(im, ids, m);
    CHECK(tape.stats() == TapeStats{0, 0});
    backward(cross_entropy_of(pmf_forward_from_base(zi, zt, m), 0), tape);
    return tape.stats();
  };
  const auto early = run(0), late = run(s.layers - 2);
  CHECK(late.node_count < early.node_count);
  CHECK(late.saved_bytes < early.saved_bytes);
}

TEST_CASE("identity mapping passes intermediates through") {
  ToyShape s;
  s.d_txt = s.d_img;
  auto f = fixtures::toy_fusion(s);
  f.identity_mapping = true;
  Rng rng(12);
  auto img = init_encoder(fixtures::toy_image(s), DType::f64, rng);
  auto txt = init_encoder(fixtures::toy_text(s), DType::f64, rng);
  auto m = build_pmf(img, txt, f, 3);
  CHECK(m.img_to_txt.front().identity);
  Tensor x = fixtures::random_matrix(rng, 2, s.d_img);
  CHECK(map_intermediate(x, m.img_to_txt.front()).equals(x));
  CHECK(count_trainable_params(img.config, txt.config, f).mappings == 0);
}

TEST_CASE("toy PMF gradients match central differences") {
  auto m = fixtures::toy_pmf(ToyShape{}, 5);
  Rng rng(5);
  Image im = fixtures::toy_picture(rng);
  auto ids = fixtures::toy_tokens(rng);
  auto [zi, zt] = pmf_base_features(im, ids, m);
  auto report = finite_diff_check([&] { return cross_entropy_of(pmf_forward_from_base(zi, zt, m), 1); },
                                  m.trainable_tensors(), 1e-5, 6);
  INFO(report.worst);
  CHECK(report.max_rel_error <= 1e-4);
}
