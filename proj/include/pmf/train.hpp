#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "pmf/classifier.hpp"
#include "pmf/data.hpp"
#include "pmf/tape.hpp"

namespace pmf {

struct TrainConfig {
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::size_t batch_size = 32;
  std::size_t epochs = 20;
  std::uint64_t seed = 0;
  LossKind loss = LossKind::single_label;
  std::size_t eval_every = 1;
  bool class_weighting = true;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
/// lr is required; every other field falls back to its default.
void from_json(const nlohmann::json& j, TrainConfig& c);

/// mean_i -w[y_i] log softmax(logits_i)[y_i]; empty weights mean all ones.
Tensor weighted_cross_entropy(const Tensor& logits, std::span<const std::int64_t> labels,
                              std::span<const double> class_weights);
/// Mean over samples and labels of w_c * BCE(sigmoid(x), y).
Tensor bce_multilabel(const Tensor& logits, std::span<const std::uint8_t> targets,
                      std::span<const double> class_weights);

struct Metrics {
  double accuracy = 0.0;
  double f1_macro = 0.0;
  double f1_micro = 0.0;
};

/// Single-label metrics from predicted and true class ids. Classes with no
/// support and no predictions score F1 = 0.
Metrics single_label_metrics(std::span<const std::int64_t> predicted,
                             std::span<const std::int64_t> truth, std::size_t n_classes);
/// Multi-label metrics from row-major (n x labels) 0/1 matrices. Accuracy is
/// the exact-match rate.
Metrics multi_label_metrics(std::span<const std::uint8_t> predicted,
                            std::span<const std::uint8_t> truth, std::size_t n_labels);

Metrics evaluate(const Classifier& model, const Dataset& data, LossKind loss);
Metrics evaluate_prepared(const Classifier& model, const std::vector<Prepared>& data, LossKind loss);

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  std::optional<Metrics> val;
  TapeStats tape;  // largest per-step tape of the epoch
};

/// One JSON object: {epoch, train_loss, val_acc, val_f1_macro, val_f1_micro,
/// tape_nodes, tape_saved_bytes}. Val fields are null on epochs without
/// evaluation.
std::string metrics_line(const EpochLog& e);

struct TrainOptions {
  std::filesystem::path metrics_path;     // empty: no metrics file
  std::filesystem::path checkpoint_path;  // empty: no checkpoint file
  std::size_t max_steps = 0;              // 0: run every epoch to the end
  bool restore_best = true;               // load the best-val state back at the end
  std::function<void(const EpochLog&)> on_epoch;
};

struct TrainResult {
  std::vector<EpochLog> log;
  std::size_t steps = 0;
  std::size_t best_epoch = 0;
  double best_val_accuracy = -1.0;
};

/// Seeded SGD over shuffled mini-batches. Frozen tensors never change; the
/// frozen prefix of every record is computed once up front.
TrainResult train_run(Classifier& model, const Dataset& train, const Dataset& val,
                      const TrainConfig& config, const TrainOptions& options = {});

struct PretrainResult {
  EncoderParams encoder;
  double val_accuracy = 0.0;
  std::size_t attempts = 0;
  std::uint64_t seed = 0;  // init seed of the accepted attempt
};

/// Trains `encoder` end to end with a temporary head to predict its own
/// modality's bit, then freezes it. An attempt below min_accuracy logs a
/// warning and retries from a fresh init with the next seed.
PretrainResult pretrain_unimodal(const EncoderConfig& encoder, DType dtype, const Dataset& train,
                                 const Dataset& val, const TrainConfig& config,
                                 double min_accuracy = 0.9, std::size_t max_attempts = 3);

}  // namespace pmf
