// Acceptance gate: one PASS/FAIL line per criterion, exit status 1 if any fails.
// Usage: acceptance [criterion numbers...]   (default: all)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "fixtures.hpp"
#include "oracle.hpp"
#include "pmf/cli.hpp"
#include "pmf/gradcheck.hpp"
#include "pmf/ops.hpp"
#include "pmf/profile.hpp"
#include "pmf/train.hpp"

using namespace pmf;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

// ---------------------------------------------------------------------------

Outcome parameter_accounting() {
  auto analogue = [](std::size_t layers, std::size_t d, std::size_t heads) {
    EncoderConfig i = EncoderConfig::image_default(), t = EncoderConfig::text_default();
    i.layers = t.layers = layers;
    i.dim = t.dim = d;
    i.heads = t.heads = heads;
    FusionConfig f;
    f.lf_img = f.lf_txt = layers - 2;
    f.m_qp = f.m_qcp = f.m_fcp = 4;
    f.n_classes = 23;
    return count_trainable_params(i, t, f);
  };
  const auto base = analogue(12, 768, 12), large = analogue(24, 1024, 16);
  const bool ok = base.total >= 2250000 && base.total <= 2600000 && base.mapping_share >= 0.95 &&
                  large.total >= 4100000 && large.total <= 4600000;
  return {ok, fmt::format("base {} (mapping share {:.3f}), large {}", base.total, base.mapping_share, large.total)};
}

Outcome gradient_correctness() {
  const auto model = fixtures::toy_pmf(fixtures::ToyShape{}, 21);
  Rng rng(21);
  std::vector<std::pair<TokenSequence, TokenSequence>> bases;
  for (int i = 0; i < 2; ++i) bases.push_back(pmf_base_features(fixtures::toy_picture(rng), fixtures::toy_tokens(rng), model));
  std::vector<std::int64_t> labels{0, 1};
  auto loss = [&] {
    std::vector<Tensor> rows;
    for (const auto& [zi, zt] : bases) rows.push_back(pmf_forward_from_base(zi, zt, model));
    return ops::cross_entropy(ops::concat_rows(rows), labels, {});
  };
  const auto params = model.trainable_tensors();
  const auto report = finite_diff_check(loss, params, 1e-5, 0);
  return {report.max_rel_error <= 1e-4,
          fmt::format("{} coordinates in {} groups, max rel error {:.2e} at {}", report.coordinates, params.size(),
                      report.max_rel_error, report.worst)};
}

Outcome freezing_and_reach() {
  PmfClassifier model(fixtures::toy_pmf(fixtures::ToyShape{}, 22));
  const auto data = generate_dataset(fixtures::toy_task(), 96, 22);
  std::vector<std::vector<double>> before;
  for (const auto& nt : model.model().backbone_tensors()) before.push_back(nt.tensor.to_vector());

  TrainConfig c;
  c.lr = 0.05;
  c.batch_size = 8;
  c.epochs = 100;
  TrainOptions o;
  o.max_steps = 100;
  const auto r = train_run(model, data, {}, c, o);

  bool unchanged = true, backbone_grad_free = true;
  const auto backbone = model.model().backbone_tensors();
  for (std::size_t i = 0; i < backbone.size(); ++i) {
    unchanged = unchanged && backbone[i].tensor.to_vector() == before[i];
    backbone_grad_free = backbone_grad_free && !backbone[i].tensor.has_grad();
  }

  // one more step, then grads must sit on exactly the prompt, mapping and head tensors
  Tape tape;
  {
    RecordingScope rec(tape);
    std::vector<Tensor> rows;
    std::vector<std::int64_t> labels;
    for (std::size_t i = 0; i < 8; ++i) {
      rows.push_back(model.forward(model.prepare(data[i])));
      labels.push_back(data[i].label);
    }
    backward(ops::cross_entropy(ops::concat_rows(rows), labels, {}), tape);
  }
  std::set<std::string> with_grad, expected;
  for (const auto& nt : model.named_tensors()) {
    if (nt.tensor.has_grad()) with_grad.insert(nt.name);
    if (nt.name.starts_with("prompts.") || nt.name.starts_with("map.") || nt.name.starts_with("head_")) {
      expected.insert(nt.name);
    }
  }
  const bool ok = r.steps == 100 && unchanged && backbone_grad_free && with_grad == expected && !expected.empty();
  return {ok, fmt::format("{} steps, backbone unchanged: {}, grads on {} tensors (expected {})", r.steps,
                          unchanged && backbone_grad_free, with_grad.size(), expected.size())};
}

Outcome memory_direction() {
  Rng root(23);
  Rng ri = root.fork("img"), rt = root.fork("txt");
  const auto img = init_encoder(EncoderConfig::image_default(), DType::f32, ri);
  const auto txt = init_encoder(EncoderConfig::text_default(), DType::f32, rt);
  const FusionConfig base = FusionConfig::defaults_for(img.config, txt.config);
  const auto batch = generate_dataset(TaskSpec{}, 8, 23);
  const std::size_t L = img.config.layers;
  std::vector<std::size_t> lfs;
  for (std::size_t l = 0; l <= L; ++l) lfs.push_back(l);
  const auto lf = profile_sweep(SweepAxis::lf, lfs, img, txt, base, batch, 23);
  const auto m = profile_sweep(SweepAxis::m, {1, 2, 4, 8, 16}, img, txt, base, batch, 23);

  bool monotone = true;
  for (std::size_t i = 1; i < lf.rows.size(); ++i) {
    monotone = monotone && lf.rows[i].tape_saved_bytes <= lf.rows[i - 1].tape_saved_bytes;
  }
  const double s0 = static_cast<double>(lf.rows.front().tape_saved_bytes);
  const double late = static_cast<double>(lf.rows[L - 2].tape_saved_bytes);
  const double lf_factor = s0 / static_cast<double>(lf.rows.back().tape_saved_bytes);
  const double m_factor = static_cast<double>(m.rows.back().tape_saved_bytes) / m.rows.front().tape_saved_bytes;
  const bool ok = monotone && late <= 0.5 * s0 && m_factor < lf_factor;
  return {ok, fmt::format("Lf sweep non-increasing: {}, saved(L-2)/saved(0) = {:.3f}, M factor {:.3f} vs Lf factor {:.1f}",
                          monotone, late / s0, m_factor, lf_factor)};
}

Outcome head_equivalence() {
  double worst_logit = 0.0, worst_grad = 0.0;
  const std::size_t di = 32, dt = 24, c = 5;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(500 + seed);
    const Tensor ci = fixtures::random_matrix(rng, 1, di), ct = fixtures::random_matrix(rng, 1, dt);
    LinearHead hi{fixtures::random_matrix(rng, di, c, DType::f64, true), fixtures::random_matrix(rng, 1, c, DType::f64, true)};
    LinearHead ht{fixtures::random_matrix(rng, dt, c, DType::f64, true), fixtures::random_matrix(rng, 1, c, DType::f64, true)};
    const std::int64_t label = static_cast<std::int64_t>(rng.below(c));
    Tape tape;
    Tensor dual;
    {
      RecordingScope rec(tape);
      dual = averaged_heads(ci, ct, hi, ht);
      std::vector<std::int64_t> y{label};
      backward(ops::cross_entropy(dual, y, {}), tape);
    }
    // concatenated single head: W = [W_img / 2 ; W_txt / 2], b = (b_img + b_txt) / 2
    oracle::Mat x{1, di + dt, ci.to_vector()};
    for (double v : ct.to_vector()) x.v.push_back(v);
    oracle::Mat w{di + dt, c, {}};
    for (double v : hi.w.to_vector()) w.v.push_back(v / 2);
    for (double v : ht.w.to_vector()) w.v.push_back(v / 2);
    auto logits = oracle::matmul(x, w);
    const auto bi = hi.b.to_vector(), bt = ht.b.to_vector();
    for (std::size_t j = 0; j < c; ++j) logits.v[j] += (bi[j] + bt[j]) / 2;
    worst_logit = std::max(worst_logit, oracle::max_abs_diff(logits, dual.to_vector()));

    // oracle gradients of the single head: dW = x^T g, db = g with g = softmax - onehot
    const double mx = *std::max_element(logits.v.begin(), logits.v.end());
    double z = 0.0;
    for (double v : logits.v) z += std::exp(v - mx);
    std::vector<double> g(c);
    for (std::size_t j = 0; j < c; ++j) g[j] = std::exp(logits.v[j] - mx) / z - (static_cast<std::int64_t>(j) == label);
    const auto gwi = hi.w.grad().to_vector(), gwt = ht.w.grad().to_vector();
    const auto gbi = hi.b.grad().to_vector(), gbt = ht.b.grad().to_vector();
    for (std::size_t r = 0; r < di + dt; ++r) {
      for (std::size_t j = 0; j < c; ++j) {
        const double dual_g = r < di ? gwi[r * c + j] : gwt[(r - di) * c + j];
        worst_grad = std::max(worst_grad, std::abs(dual_g - 0.5 * x.v[r] * g[j]));
      }
    }
    for (std::size_t j = 0; j < c; ++j) {
      worst_grad = std::max({worst_grad, std::abs(gbi[j] - 0.5 * g[j]), std::abs(gbt[j] - 0.5 * g[j])});
    }
  }
  return {worst_logit <= 1e-6 && worst_grad <= 1e-6,
          fmt::format("10 seeds, max logit diff {:.1e}, max |grad - oracle/2| {:.1e}", worst_logit, worst_grad)};
}

Outcome fusion_necessity() {
  const TaskSpec task;
  TaskSpec bits = task;
  bits.kind = TaskKind::multilabel2;
  TrainConfig tc;
  tc.lr = 0.01;
  tc.epochs = 3;
  tc.batch_size = 32;
  const char* kinds[] = {"pmf", "prompt_img_only", "prompt_txt_only", "linear"};
  std::map<std::string, double> sum;
  double ceiling = 1.0;
  std::string per_seed;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto train = generate_dataset(task, 5000, 1000 + seed);
    const auto val = generate_dataset(task, 1000, 2000 + seed);
    ceiling = std::min(ceiling, analytic_accuracy(val, task));
    const auto pre_train = generate_dataset(bits, 2000, 3000 + seed);
    const auto pre_val = generate_dataset(bits, 500, 4000 + seed);
    TrainConfig pc = tc;
    pc.seed = 5000 + seed * 10;
    const auto img = pretrain_unimodal(task.image_encoder(), DType::f32, pre_train, pre_val, pc).encoder;
    pc.seed = 6000 + seed * 10;
    const auto txt = pretrain_unimodal(task.text_encoder(), DType::f32, pre_train, pre_val, pc).encoder;

    for (const std::string kind : kinds) {
      std::unique_ptr<Classifier> model;
      if (kind == "pmf") {
        model = std::make_unique<PmfClassifier>(
            build_pmf(img, txt, FusionConfig::defaults_for(img.config, txt.config), 7000 + seed));
      } else {
        model = std::make_unique<BaselineClassifier>(
            build_baseline(*parse_baseline_kind(kind), img, txt, 2, LossKind::single_label, 7000 + seed));
      }
      TrainConfig c = tc;
      c.seed = 8000 + seed;
      TrainOptions o;
      o.restore_best = false;
      const auto r = train_run(*model, train, val, c, o);
      const double acc = r.log.back().val->accuracy;
      sum[kind] += acc;
      per_seed += fmt::format(" {}:{:.3f}", kind, acc);
    }
  }
  std::map<std::string, double> mean;
  for (const auto& [k, v] : sum) mean[k] = v / 3.0;
  const bool ok = mean["pmf"] >= 0.85 && mean["prompt_img_only"] <= 0.60 && mean["prompt_txt_only"] <= 0.60 &&
                  mean["linear"] <= 0.65 && ceiling >= 0.99;
  spdlog::info("per-seed final-epoch val accuracy:{}", per_seed);
  return {ok, fmt::format("mean val acc pmf {:.3f}, img-only {:.3f}, txt-only {:.3f}, linear {:.3f}; analytic {:.3f}",
                          mean["pmf"], mean["prompt_img_only"], mean["prompt_txt_only"], mean["linear"], ceiling)};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Outcome determinism() {
  const fs::path dir = fs::temp_directory_path() / "pmf_acceptance_determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const fs::path cfg = dir / "config.json";
  std::ofstream(cfg) << R"({
    "seed": 17,
    "model": {"kind": "pmf", "img": {"layers": 4, "dim": 16}, "txt": {"layers": 4, "dim": 12}},
    "data": {"task": {"kind": "xor2", "image_h": 16, "image_w": 16, "patch": 8, "signal_patch": 1},
             "n_train": 400, "n_val": 200},
    "train": {"lr": 0.05, "epochs": 3, "batch_size": 16},
    "pretrain": {"n_train": 400, "n_val": 200, "epochs": 2}
  })";
  std::vector<std::string> metrics, ckpts;
  bool exits_ok = true;
  for (const char* run : {"a", "b"}) {
    exits_ok = exits_ok && run_cli({"pmf_cli", "train", "--config", cfg.string(), "--out", (dir / run).string()}) == 0;
    metrics.push_back(slurp(dir / run / "metrics.jsonl"));
    ckpts.push_back(slurp(dir / run / "model.ckpt"));
  }
  const bool ok = exits_ok && !metrics[0].empty() && !ckpts[0].empty() && metrics[0] == metrics[1] && ckpts[0] == ckpts[1];
  auto detail = fmt::format("metrics {} bytes identical: {}, checkpoint {} bytes identical: {}", metrics[0].size(),
                            metrics[0] == metrics[1], ckpts[0].size(), ckpts[0] == ckpts[1]);
  fs::remove_all(dir);
  return {ok, detail};
}

Outcome search_correctness() {
  const EncoderConfig img = EncoderConfig::image_default(), txt = EncoderConfig::text_default();
  const FusionConfig base = FusionConfig::defaults_for(img, txt);
  auto synthetic = [](const Candidate& c) {
    const double a = static_cast<double>(c.lf) - 6.0, b = static_cast<double>(c.m) - 4.0;
    return -(a * a) - b * b;
  };
  SearchSpace space;
  space.lf_values = {0, 1, 2, 3, 4, 5, 6};
  space.m_values = {1, 2, 4, 8, 16};
  space.budget = space.size();

  // exhaustive oracle for a second objective with a different argmax
  auto skewed = [](const Candidate& c) { return std::sin(static_cast<double>(c.lf * 7 + c.m)); };
  Candidate oracle_best;
  double oracle_value = -1e300;
  for (auto l : space.lf_values)
    for (auto m : space.m_values)
      if (skewed({l, m}) > oracle_value) {
        oracle_value = skewed({l, m});
        oracle_best = {l, m};
      }

  space.mode = SearchMode::grid;
  const auto g1 = search(space, img, txt, base, synthetic, 1);
  const auto g2 = search(space, img, txt, base, skewed, 1);
  const bool grid_ok = g1.best == Candidate{6, 4} && g2.best == oracle_best && g1.log.size() == space.size();

  space.mode = SearchMode::evolutionary;
  bool evo_ok = true, audit_ok = true;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto r = search(space, img, txt, base, synthetic, seed);
    evo_ok = evo_ok && r.best == Candidate{6, 4} && r.log.size() <= space.budget;
    for (const auto& e : r.log) {
      audit_ok = audit_ok && space.contains(e.candidate) &&
                 e.trainable_params ==
                     count_trainable_params(img, txt, apply_candidate(base, e.candidate, img, txt)).total;
    }
  }
  const bool repeat = search(space, img, txt, base, synthetic, 3).to_csv() == search(space, img, txt, base, synthetic, 3).to_csv();
  return {grid_ok && evo_ok && audit_ok && repeat,
          fmt::format("grid argmax ok: {}, evolutionary finds (6, 4) on 5 seeds: {}, log audit: {}, repeatable: {}",
                      grid_ok, evo_ok, audit_ok, repeat)};
}

Outcome oracle_equivalence() {
  double worst_q = 0.0, worst_f = 0.0, worst_m = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(900 + seed);
    EncoderConfig cfg = EncoderConfig::image_default();
    cfg.layers = 1;
    cfg.dim = 16;
    cfg.heads = 1 + rng.below(2) * 3;  // 1 or 4
    const auto enc = init_encoder(cfg, DType::f64, rng);
    const std::size_t n = 3 + rng.below(6), m = 1 + rng.below(4);
    std::vector<std::uint8_t> mask(n, 1);
    for (std::size_t i = 1; i < n; ++i) mask[i] = rng.bernoulli(0.8);
    const auto z = fixtures::random_sequence(rng, n, cfg.dim, mask);
    const Tensor qcp = rng.bernoulli() ? fixtures::random_matrix(rng, m, cfg.dim) : Tensor();
    const Tensor qp = fixtures::random_matrix(rng, m, cfg.dim), fcp = fixtures::random_matrix(rng, m, cfg.dim);

    const Tensor q = querying_stage(z, qcp, qp, enc.layers[0], cfg);
    worst_q = std::max(worst_q, oracle::max_abs_diff(oracle::querying(oracle::of(z.tokens), mask, qcp, qp, enc.layers[0], cfg),
                                                     q.to_vector()));

    const std::size_t d_dst = 8 + rng.below(16);
    const auto f = init_mapping(cfg.dim, d_dst, DType::f64, rng);
    const Tensor y = map_intermediate(q, f);
    worst_m = std::max(worst_m, oracle::max_abs_diff(oracle::mapping(oracle::of(q), f), y.to_vector()));

    const Tensor y_in = fixtures::random_matrix(rng, m, cfg.dim);
    const auto fused = fusion_stage(z, fcp, y_in, enc.layers[0], cfg);
    worst_f = std::max(worst_f, oracle::max_abs_diff(oracle::fusion(oracle::of(z.tokens), mask, fcp, oracle::of(y_in),
                                                                     enc.layers[0], cfg),
                                                     fused.tokens.to_vector()));
  }
  return {worst_q <= 1e-6 && worst_f <= 1e-6 && worst_m <= 1e-6,
          fmt::format("20 seeds, max abs diff: querying {:.1e}, fusion {:.1e}, mapping {:.1e}", worst_q, worst_f, worst_m)};
}

struct Criterion {
  int id;
  const char* name;
  double limit_s;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_level(spdlog::level::warn);
  const char* env = std::getenv("PMF_LOG_LEVEL");
  if (env && std::string(env) == "info") {
    spdlog::set_level(spdlog::level::info);
  } else {
    setenv("PMF_LOG_LEVEL", "error", 1);  // CLI runs inside criterion 7
  }

  const std::vector<Criterion> all{
      {1, "parameter accounting", 1.0, parameter_accounting},
      {2, "gradient correctness", 60.0, gradient_correctness},
      {3, "freezing and gradient reach", 60.0, freezing_and_reach},
      {4, "memory-scaling direction", 60.0, memory_direction},
      {5, "classifier equivalence", 10.0, head_equivalence},
      {6, "fusion necessity on xor2", 600.0, fusion_necessity},
      {7, "determinism", 300.0, determinism},
      {8, "search correctness", 10.0, search_correctness},
      {9, "oracle equivalence", 30.0, oracle_equivalence},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  int failures = 0;
  for (const auto& c : all) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs < c.limit_s;
    const bool pass = o.pass && in_time;
    failures += !pass;
    std::cout << fmt::format("{} [{}] {}: {} ({:.2f} s{})", pass ? "PASS" : "FAIL", c.id, c.name, o.detail, secs,
                             in_time ? "" : fmt::format(", over the {:.0f} s limit", c.limit_s))
              << std::endl;
  }
  std::cout << (failures == 0 ? "all acceptance criteria passed" : fmt::format("{} criteria failed", failures))
            << std::endl;
  return failures == 0 ? 0 : 1;
}
