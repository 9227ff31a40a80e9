#include "pmf/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <spdlog/spdlog.h>

#include "pmf/checkpoint.hpp"
#include "pmf/ops.hpp"
#include "pmf/optim.hpp"

namespace pmf {

void TrainConfig::validate() const {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw Error("train config: lr must be finite and >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw Error("train config: momentum must be in [0, 1)");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) {
    throw Error("train config: weight_decay must be finite and >= 0");
  }
  if (batch_size < 1) throw Error("train config: batch_size must be >= 1");
  if (eval_every < 1) throw Error("train config: eval_every must be >= 1");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"lr", c.lr},
                     {"momentum", c.momentum},
                     {"weight_decay", c.weight_decay},
                     {"batch_size", c.batch_size},
                     {"epochs", c.epochs},
                     {"seed", c.seed},
                     {"loss", loss_kind_name(c.loss)},
                     {"eval_every", c.eval_every},
                     {"class_weighting", c.class_weighting}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c = TrainConfig{};
  if (!j.contains("lr")) throw Error("train config: missing required key 'lr'");
  j.at("lr").get_to(c.lr);
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("momentum", c.momentum);
  get("weight_decay", c.weight_decay);
  get("batch_size", c.batch_size);
  get("epochs", c.epochs);
  get("seed", c.seed);
  get("eval_every", c.eval_every);
  get("class_weighting", c.class_weighting);
  if (j.contains("loss")) c.loss = parse_loss_kind(j.at("loss").get<std::string>());
}

Tensor weighted_cross_entropy(const Tensor& logits, std::span<const std::int64_t> labels,
                              std::span<const double> class_weights) {
  return ops::cross_entropy(logits, labels, class_weights);
}

Tensor bce_multilabel(const Tensor& logits, std::span<const std::uint8_t> targets,
                      std::span<const double> class_weights) {
  return ops::bce_with_logits(logits, targets, class_weights);
}

namespace {

double f1(std::size_t tp, std::size_t fp, std::size_t fn) {
  const std::size_t denom = 2 * tp + fp + fn;
  return denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

}  // namespace

Metrics single_label_metrics(std::span<const std::int64_t> predicted,
                             std::span<const std::int64_t> truth, std::size_t n_classes) {
  if (truth.empty()) throw Error("evaluate: empty dataset");
  if (predicted.size() != truth.size()) throw Error("evaluate: prediction count differs from labels");
  std::vector<std::size_t> tp(n_classes, 0), fp(n_classes, 0), fn(n_classes, 0);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto p = static_cast<std::size_t>(predicted[i]), t = static_cast<std::size_t>(truth[i]);
    if (p >= n_classes || t >= n_classes) throw Error("evaluate: class id out of range");
    if (p == t) {
      ++hits;
      ++tp[t];
    } else {
      ++fp[p];
      ++fn[t];
    }
  }
  Metrics m;
  m.accuracy = static_cast<double>(hits) / static_cast<double>(truth.size());
  double macro = 0.0;
  for (std::size_t c = 0; c < n_classes; ++c) macro += f1(tp[c], fp[c], fn[c]);
  m.f1_macro = macro / static_cast<double>(n_classes);
  m.f1_micro = f1(std::accumulate(tp.begin(), tp.end(), std::size_t{0}),
                  std::accumulate(fp.begin(), fp.end(), std::size_t{0}),
                  std::accumulate(fn.begin(), fn.end(), std::size_t{0}));
  return m;
}

Metrics multi_label_metrics(std::span<const std::uint8_t> predicted,
                            std::span<const std::uint8_t> truth, std::size_t n_labels) {
  if (truth.empty() || n_labels == 0) throw Error("evaluate: empty dataset");
  if (predicted.size() != truth.size() || truth.size() % n_labels != 0) {
    throw Error("evaluate: prediction matrix shape differs from labels");
  }
  const std::size_t n = truth.size() / n_labels;
  std::vector<std::size_t> tp(n_labels, 0), fp(n_labels, 0), fn(n_labels, 0);
  std::size_t exact = 0;
  for (std::size_t i = 0; i < n; ++i) {
    bool all = true;
    for (std::size_t c = 0; c < n_labels; ++c) {
      const bool p = predicted[i * n_labels + c] != 0, t = truth[i * n_labels + c] != 0;
      all = all && p == t;
      tp[c] += p && t;
      fp[c] += p && !t;
      fn[c] += !p && t;
    }
    exact += all;
  }
  Metrics m;
  m.accuracy = static_cast<double>(exact) / static_cast<double>(n);
  double macro = 0.0;
  for (std::size_t c = 0; c < n_labels; ++c) macro += f1(tp[c], fp[c], fn[c]);
  m.f1_macro = macro / static_cast<double>(n_labels);
  m.f1_micro = f1(std::accumulate(tp.begin(), tp.end(), std::size_t{0}),
                  std::accumulate(fp.begin(), fp.end(), std::size_t{0}),
                  std::accumulate(fn.begin(), fn.end(), std::size_t{0}));
  return m;
}

Metrics evaluate_prepared(const Classifier& model, const std::vector<Prepared>& data, LossKind loss) {
  if (data.empty()) throw Error("evaluate: empty dataset");
  NoGradScope no_grad;
  const std::size_t c = model.n_classes();
  if (loss == LossKind::single_label) {
    std::vector<std::int64_t> pred, truth;
    for (const auto& p : data) {
      const auto logits = model.forward(p).to_vector();
      pred.push_back(std::max_element(logits.begin(), logits.end()) - logits.begin());
      truth.push_back(p.record->label);
    }
    return single_label_metrics(pred, truth, c);
  }
  std::vector<std::uint8_t> pred, truth;
  for (const auto& p : data) {
    const auto logits = model.forward(p).to_vector();
    if (p.record->labels.size() != c) throw Error("evaluate: record label vector length differs from model");
    for (std::size_t k = 0; k < c; ++k) {
      pred.push_back(logits[k] > 0.0 ? 1 : 0);
      truth.push_back(p.record->labels[k]);
    }
  }
  return multi_label_metrics(pred, truth, c);
}

namespace {

std::vector<Prepared> prepare_all(const Classifier& model, const Dataset& data) {
  std::vector<Prepared> out;
  out.reserve(data.size());
  for (const auto& r : data) out.push_back(model.prepare(r));
  return out;
}

void check_labels(const Dataset& data, std::size_t n_classes, LossKind loss, const char* which) {
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& r = data[i];
    if (loss == LossKind::single_label) {
      if (r.label < 0 || static_cast<std::size_t>(r.label) >= n_classes) {
        throw Error(std::string(which) + " record " + std::to_string(i) + ": label " +
                    std::to_string(r.label) + " out of range for " + std::to_string(n_classes) + " classes");
      }
    } else if (r.labels.size() != n_classes) {
      throw Error(std::string(which) + " record " + std::to_string(i) + ": expected " +
                  std::to_string(n_classes) + " multi-label entries");
    }
  }
}

std::vector<Buffer> snapshot(const std::vector<NamedTensor>& ts) {
  std::vector<Buffer> out;
  for (const auto& nt : ts) out.push_back(nt.tensor.impl()->values);
  return out;
}

void restore(const std::vector<NamedTensor>& ts, const std::vector<Buffer>& values) {
  for (std::size_t i = 0; i < ts.size(); ++i) ts[i].tensor.impl()->values = values[i];
}

}  // namespace

Metrics evaluate(const Classifier& model, const Dataset& data, LossKind loss) {
  return evaluate_prepared(model, prepare_all(model, data), loss);
}

std::string metrics_line(const EpochLog& e) {
  nlohmann::ordered_json j;
  j["epoch"] = e.epoch;
  j["train_loss"] = e.train_loss;
  if (e.val) {
    j["val_acc"] = e.val->accuracy;
    j["val_f1_macro"] = e.val->f1_macro;
    j["val_f1_micro"] = e.val->f1_micro;
  } else {
    j["val_acc"] = nullptr;
    j["val_f1_macro"] = nullptr;
    j["val_f1_micro"] = nullptr;
  }
  j["tape_nodes"] = e.tape.node_count;
  j["tape_saved_bytes"] = e.tape.saved_bytes;
  return j.dump();
}

TrainResult train_run(Classifier& model, const Dataset& train, const Dataset& val,
                      const TrainConfig& config, const TrainOptions& options) {
  config.validate();
  if (train.empty()) throw Error("train_run: empty training set");
  const auto params = model.trainable_tensors();
  if (params.empty()) throw Error("train_run: model has no trainable parameters");
  const std::size_t n_classes = model.n_classes();
  check_labels(train, n_classes, config.loss, "train");
  check_labels(val, n_classes, config.loss, "val");

  std::vector<double> weights;
  if (config.class_weighting) {
    if (config.loss == LossKind::single_label) {
      std::vector<std::int64_t> labels;
      for (const auto& r : train) labels.push_back(r.label);
      weights = compute_class_weights(labels, n_classes);
    } else {
      weights = compute_label_weights(train, n_classes);
    }
  }

  const auto train_p = prepare_all(model, train);
  const auto val_p = prepare_all(model, val);

  std::vector<Tensor> tensors;
  for (const auto& nt : params) tensors.push_back(nt.tensor);
  Sgd opt(tensors, SgdConfig{config.lr, config.momentum, config.weight_decay});

  std::ofstream metrics;
  if (!options.metrics_path.empty()) {
    metrics.open(options.metrics_path, std::ios::binary | std::ios::trunc);
    if (!metrics) throw Error("cannot open metrics log " + options.metrics_path.string());
  }

  TrainResult result;
  std::vector<Buffer> best;
  std::vector<std::size_t> order(train.size());
  const Rng shuffle_root = Rng(config.seed).fork("shuffle");
  bool stop = false;

  for (std::size_t epoch = 1; epoch <= config.epochs && !stop; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng = shuffle_root.fork(epoch);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    EpochLog log;
    log.epoch = epoch;
    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      Tape tape;
      Tensor loss;
      {
        RecordingScope rec(tape);
        std::vector<Tensor> rows;
        std::vector<std::int64_t> labels;
        std::vector<std::uint8_t> targets;
        for (std::size_t i = start; i < end; ++i) {
          const Prepared& p = train_p[order[i]];
          rows.push_back(model.forward(p));
          if (config.loss == LossKind::single_label) {
            labels.push_back(p.record->label);
          } else {
            targets.insert(targets.end(), p.record->labels.begin(), p.record->labels.end());
          }
        }
        const Tensor logits = ops::concat_rows(rows);
        try {
          loss = config.loss == LossKind::single_label ? weighted_cross_entropy(logits, labels, weights)
                                                       : bce_multilabel(logits, targets, weights);
        } catch (const Error& e) {
          throw Error("training diverged at epoch " + std::to_string(epoch) + ", step " +
                      std::to_string(result.steps + 1) + ": " + e.what());
        }
      }
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw Error("training diverged at epoch " + std::to_string(epoch) + ", step " +
                    std::to_string(result.steps + 1) + ": loss is " + std::to_string(value) +
                    " (lower lr?)");
      }
      backward(loss, tape);
      opt.step();
      opt.zero_grad();
      const TapeStats s = tape.stats();
      log.tape.node_count = std::max(log.tape.node_count, s.node_count);
      log.tape.saved_bytes = std::max(log.tape.saved_bytes, s.saved_bytes);
      loss_sum += value * static_cast<double>(end - start);
      seen += end - start;
      ++result.steps;
      if (options.max_steps != 0 && result.steps >= options.max_steps) {
        stop = true;
        break;
      }
    }
    log.train_loss = loss_sum / static_cast<double>(seen);

    const bool last = epoch == config.epochs || stop;
    if (!val_p.empty() && (epoch % config.eval_every == 0 || last)) {
      log.val = evaluate_prepared(model, val_p, config.loss);
      if (log.val->accuracy > result.best_val_accuracy) {
        result.best_val_accuracy = log.val->accuracy;
        result.best_epoch = epoch;
        best = snapshot(params);
      }
    }
    spdlog::info("{} epoch {}: loss {:.5f}{}", model.kind(), epoch, log.train_loss,
                 log.val ? fmt::format(", val acc {:.4f}", log.val->accuracy) : std::string());
    if (metrics.is_open()) {
      metrics << metrics_line(log) << '\n';
      metrics.flush();
    }
    if (options.on_epoch) options.on_epoch(log);
    result.log.push_back(log);
  }

  if (options.restore_best && !best.empty()) restore(params, best);
  if (!options.checkpoint_path.empty()) save_checkpoint(model, options.checkpoint_path);
  return result;
}

namespace {

/// Encoder plus a temporary CLS head, trained end to end.
class UnimodalClassifier final : public Classifier {
 public:
  UnimodalClassifier(EncoderParams enc, LinearHead head) : enc_(std::move(enc)), head_(std::move(head)) {}

  std::string kind() const override { return std::string("pretrain_") + modality_name(enc_.config.modality); }
  DType dtype() const override { return enc_.dtype; }
  std::size_t n_classes() const override { return head_.w.cols(); }
  Prepared prepare(const MultimodalRecord& r) const override { return Prepared{{}, {}, &r}; }
  Tensor forward(const Prepared& p) const override {
    const TokenSequence seq = enc_.config.modality == Modality::image
                                  ? embed_image(p.record->image, enc_)
                                  : embed_text(p.record->tokens, enc_);
    const TokenSequence out = encode_range(seq, enc_, 0, enc_.layers.size());
    return ops::linear(pooled_cls(out, enc_), head_.w, head_.b);
  }
  std::vector<NamedTensor> named_tensors() const override {
    auto out = enc_.named_tensors();
    out.push_back({"head.W", head_.w});
    out.push_back({"head.b", head_.b});
    return out;
  }
  nlohmann::json config() const override { return nlohmann::json{{"kind", kind()}, {"encoder", enc_.config}}; }

  const EncoderParams& encoder() const { return enc_; }

 private:
  EncoderParams enc_;
  LinearHead head_;
};

Dataset relabel(const Dataset& data, Modality m) {
  const auto bits = modality_bits(data, m);
  Dataset out = data;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].label = bits[i];
    out[i].labels.clear();
  }
  return out;
}

}  // namespace

PretrainResult pretrain_unimodal(const EncoderConfig& encoder, DType dtype, const Dataset& train,
                                 const Dataset& val, const TrainConfig& config, double min_accuracy,
                                 std::size_t max_attempts) {
  encoder.validate();
  if (max_attempts < 1) throw Error("pretrain_unimodal: max_attempts must be >= 1");
  const Dataset tr = relabel(train, encoder.modality);
  const Dataset va = relabel(val, encoder.modality);
  TrainConfig cfg = config;
  cfg.loss = LossKind::single_label;

  std::optional<PretrainResult> best;
  for (std::size_t attempt = 0; attempt < max_attempts; ++attempt) {
    const std::uint64_t seed = config.seed + attempt;
    Rng root(seed);
    Rng erng = root.fork("backbone"), hrng = root.fork("head");
    EncoderParams enc = init_encoder(encoder, dtype, erng);
    enc.set_trainable(true);
    UnimodalClassifier model(enc, init_head(encoder.dim, 2, dtype, hrng));
    cfg.seed = seed;
    const TrainResult r = train_run(model, tr, va, cfg);
    const double acc = va.empty() ? evaluate(model, tr, LossKind::single_label).accuracy : r.best_val_accuracy;
    if (!best || acc > best->val_accuracy) {
      best = PretrainResult{model.encoder(), acc, attempt + 1, seed};
    }
    best->attempts = attempt + 1;
    if (acc >= min_accuracy) break;
    spdlog::warn("pretraining the {} encoder with seed {} reached {:.3f} < {:.2f}; {}",
                 modality_name(encoder.modality), seed, acc, min_accuracy,
                 attempt + 1 < max_attempts ? "retrying with the next seed" : "keeping the best attempt");
  }
  best->encoder.set_trainable(false);
  return *best;
}

}  // namespace pmf
