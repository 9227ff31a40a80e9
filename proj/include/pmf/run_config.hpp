#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pmf/data.hpp"
#include "pmf/fusion.hpp"
#include "pmf/profile.hpp"
#include "pmf/train.hpp"

namespace pmf {

/// Rejected configuration: exit code 1 at the command line.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// JSON Schema (draft-07 subset) every run config must satisfy.
const nlohmann::json& run_config_schema();

/// Checks type, enum, minimum, maximum, required, properties,
/// additionalProperties=false and items. Throws ConfigError naming the JSON
/// pointer of the first violation.
void validate_schema(const nlohmann::json& doc, const nlohmann::json& schema);

struct ModelSection {
  std::string kind = "pmf";  // "pmf" or a baseline kind
  DType dtype = DType::f32;
  EncoderConfig img = EncoderConfig::image_default();  // geometry follows the task
  EncoderConfig txt = EncoderConfig::text_default();
  FusionConfig fusion;  // n_classes and loss follow the task
  std::size_t prompt_len = 10;
  std::string img_backbone, txt_backbone;  // empty: pretrain in-process
};

struct DataSection {
  TaskSpec task;
  std::size_t n_train = 5000, n_val = 1000;
  std::string train_path, val_path;  // empty: generate from the seed
};

struct PretrainSection {
  TrainConfig train;
  std::size_t n_train = 2000, n_val = 500;
  double min_accuracy = 0.9;
  std::size_t max_attempts = 3;

  PretrainSection();
};

struct ProfileSection {
  SweepAxis axis = SweepAxis::lf;
  std::vector<std::size_t> values;  // empty: 0..L for lf, {1, 2, 4, 8, 16} for m
  std::size_t batch_size = 8;
};

struct SearchSection {
  SearchSpace space;
  std::string objective = "short_training";  // or "synthetic": -(Lf-6)^2 - (M-4)^2
  std::size_t n_train = 2000, n_val = 500, epochs = 5;
};

struct RunConfig {
  std::uint64_t seed = 0;
  ModelSection model;
  DataSection data;
  std::optional<TrainConfig> train;  // lr has no default
  PretrainSection pretrain;
  std::string eval_checkpoint;  // empty: <out>/model.ckpt
  ProfileSection profile;
  SearchSection search;

  /// Cross-section checks (encoders, fusion, task geometry, search space).
  void validate() const;
  /// Every default materialized; parsing it back yields the same config.
  nlohmann::ordered_json effective() const;
};

/// Schema check, defaults, seed override, then validate(). Any failure is a
/// ConfigError.
RunConfig parse_run_config(const nlohmann::json& doc, std::optional<std::uint64_t> seed_override);

/// Independent sub-seed for one named purpose.
std::uint64_t derive_seed(std::uint64_t root, const std::string& purpose);

}  // namespace pmf
