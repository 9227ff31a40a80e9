#pragma once

#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "pmf/baselines.hpp"
#include "pmf/data.hpp"
#include "pmf/fusion.hpp"

namespace pmf {

/// Result of the untracked, frozen part of a forward pass for one record.
/// Stays valid while the frozen tensors are unchanged, so callers may cache
/// it across epochs.
struct Prepared {
  TokenSequence img, txt;
  const MultimodalRecord* record = nullptr;  // for models with no frozen prefix
};

/// Uniform handle over PMF and the baselines for training, evaluation, and
/// checkpointing.
class Classifier {
 public:
  virtual ~Classifier() = default;

  /// "pmf" or a baseline kind name.
  virtual std::string kind() const = 0;
  virtual DType dtype() const = 0;
  virtual std::size_t n_classes() const = 0;
  virtual Prepared prepare(const MultimodalRecord& record) const = 0;
  /// Logits (1 x n_classes); records onto the active tape.
  virtual Tensor forward(const Prepared& prepared) const = 0;
  virtual std::vector<NamedTensor> named_tensors() const = 0;
  /// Architecture description accepted by make_classifier.
  virtual nlohmann::json config() const = 0;

  std::vector<NamedTensor> trainable_tensors() const;
  std::vector<NamedTensor> frozen_tensors() const;
};

class PmfClassifier final : public Classifier {
 public:
  explicit PmfClassifier(PmfModel model) : model_(std::move(model)) {}

  std::string kind() const override { return "pmf"; }
  DType dtype() const override { return model_.dtype(); }
  std::size_t n_classes() const override { return model_.fusion.n_classes; }
  Prepared prepare(const MultimodalRecord& record) const override;
  Tensor forward(const Prepared& prepared) const override;
  std::vector<NamedTensor> named_tensors() const override { return model_.named_tensors(); }
  nlohmann::json config() const override;

  const PmfModel& model() const { return model_; }

 private:
  PmfModel model_;
};

class BaselineClassifier final : public Classifier {
 public:
  explicit BaselineClassifier(BaselineModel model) : model_(std::move(model)) {}

  std::string kind() const override { return baseline_kind_name(model_.kind); }
  DType dtype() const override { return model_.dtype(); }
  std::size_t n_classes() const override { return model_.n_classes; }
  Prepared prepare(const MultimodalRecord& record) const override;
  Tensor forward(const Prepared& prepared) const override;
  std::vector<NamedTensor> named_tensors() const override { return model_.named_tensors(); }
  nlohmann::json config() const override;

  const BaselineModel& model() const { return model_; }

 private:
  BaselineModel model_;
};

/// Builds a freshly initialized classifier from a config() document; the
/// backbones are random unless the caller assigns tensors afterwards.
std::unique_ptr<Classifier> make_classifier(const nlohmann::json& config, std::uint64_t seed);

}  // namespace pmf
