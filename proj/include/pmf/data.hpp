#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "pmf/encoder.hpp"

namespace pmf {

// xor2: label = a ^ b. joint4: label = 2a + b. multilabel2: labels = (a, b).
enum class TaskKind { xor2, joint4, multilabel2 };

const char* task_kind_name(TaskKind k);
TaskKind parse_task_kind(const std::string& name);

/// Bit a lives in the sign of one image patch's mean; bit b is the presence
/// of a marker token among filler tokens. Every other patch carries a random
/// sign of the same magnitude, so only the designated patch is informative.
struct TaskSpec {
  TaskKind kind = TaskKind::xor2;
  double noise_sigma = 1.0;
  double mu = 1.0;
  std::size_t image_h = 32, image_w = 32, channels = 1, patch = 8;
  std::size_t signal_patch = 5;
  std::size_t vocab = 64;
  std::size_t min_len = 8, max_len = 16;
  std::int64_t marker = 1;
  std::int64_t filler_lo = 2;  // fillers are drawn from [filler_lo, vocab)

  void validate() const;
  std::size_t n_classes() const;
  bool multi_label() const { return kind == TaskKind::multilabel2; }
  /// Encoder geometry that consumes this task's images / token sequences.
  EncoderConfig image_encoder() const;
  EncoderConfig text_encoder() const;

  bool operator==(const TaskSpec&) const = default;
};

void to_json(nlohmann::json& j, const TaskSpec& s);
void from_json(const nlohmann::json& j, TaskSpec& s);

struct MultimodalRecord {
  Image image;
  std::vector<std::int64_t> tokens;
  std::int64_t label = 0;            // single-label tasks
  std::vector<std::uint8_t> labels;  // multi-label tasks; empty otherwise

  bool operator==(const MultimodalRecord&) const = default;
};

using Dataset = std::vector<MultimodalRecord>;

/// Record i depends only on (seed, i).
Dataset generate_dataset(const TaskSpec& spec, std::size_t n, std::uint64_t seed);

/// Closed-form bit readers: sign of the signal patch mean, marker presence.
int decode_image_bit(const Image& image, const TaskSpec& spec);
int decode_text_bit(std::span<const std::int64_t> tokens, const TaskSpec& spec);
/// Task label from the two decoded bits (multi-label tasks return 2a + b).
std::int64_t analytic_label(const MultimodalRecord& r, const TaskSpec& spec);
/// Exact-match rate of the analytic decoder.
double analytic_accuracy(const Dataset& data, const TaskSpec& spec);

/// Per-record own-bit labels for unimodal pretraining. Needs multilabel2 records.
std::vector<std::int64_t> modality_bits(const Dataset& data, Modality m);

void write_dataset(const Dataset& records, const std::filesystem::path& path);
Dataset read_dataset(const std::filesystem::path& path);

/// w_c = N / (K * n_c). A class with no samples is an error.
std::vector<double> compute_class_weights(std::span<const std::int64_t> labels,
                                          std::size_t n_classes);
/// Same rule with n_c = number of records where label c is on.
std::vector<double> compute_label_weights(const Dataset& data, std::size_t n_labels);

}  // namespace pmf
