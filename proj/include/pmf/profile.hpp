#pragma once

#include <compare>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pmf/data.hpp"
#include "pmf/fusion.hpp"
#include "pmf/train.hpp"

namespace pmf {

enum class SweepAxis { lf, m };

const char* sweep_axis_name(SweepAxis a);
SweepAxis parse_sweep_axis(const std::string& name);

struct SweepRow {
  std::size_t value = 0;
  std::size_t trainable_params = 0;
  std::size_t tape_nodes = 0;
  std::size_t tape_saved_bytes = 0;
  std::optional<double> val_metric;
};

struct SweepResult {
  SweepAxis axis = SweepAxis::lf;
  std::vector<SweepRow> rows;  // ascending by value

  std::string to_csv() const;
  nlohmann::ordered_json to_json() const;
};

/// One forward+backward of the whole batch per point, no parameter update.
/// Tape statistics are exact; parameter counts are closed-form. Values are
/// sorted; a duplicate or a point the towers cannot host is an error naming it.
SweepResult profile_sweep(SweepAxis axis, std::vector<std::size_t> values, const EncoderParams& img,
                          const EncoderParams& txt, const FusionConfig& base, const Dataset& batch,
                          std::uint64_t seed);

struct Candidate {
  std::size_t lf = 0;
  std::size_t m = 0;

  auto operator<=>(const Candidate&) const = default;
};

enum class SearchMode { grid, evolutionary };

const char* search_mode_name(SearchMode m);
SearchMode parse_search_mode(const std::string& name);

struct SearchSpace {
  std::vector<std::size_t> lf_values;
  std::vector<std::size_t> m_values;
  std::size_t budget = 0;
  SearchMode mode = SearchMode::evolutionary;
  std::size_t population = 4;  // mu
  std::size_t offspring = 4;   // lambda per generation
  double mutation_rate = 0.5;  // per-gene probability of a neighbor step

  std::size_t size() const { return lf_values.size() * m_values.size(); }
  bool contains(const Candidate& c) const;
  /// Also checks that every candidate is a valid FusionConfig for the towers.
  void validate(const EncoderConfig& img, const EncoderConfig& txt, const FusionConfig& base) const;
};

void to_json(nlohmann::json& j, const SearchSpace& s);
void from_json(const nlohmann::json& j, SearchSpace& s);

struct SearchEval {
  std::size_t index = 0;  // evaluation order, from 0
  Candidate candidate;
  std::size_t trainable_params = 0;
  double objective = 0.0;
};

struct SearchResult {
  Candidate best;
  double best_objective = 0.0;
  std::vector<SearchEval> log;

  std::string to_csv() const;
  nlohmann::ordered_json to_json() const;
};

using Objective = std::function<double(const Candidate&)>;

/// lf is the image tower's fusion start; the text tower starts so that both
/// keep the same number of fusion layers. m sets all three prompt lengths.
FusionConfig apply_candidate(const FusionConfig& base, const Candidate& c, const EncoderConfig& img,
                             const EncoderConfig& txt);

/// Grid mode evaluates the whole space in (lf, m) order and needs
/// budget >= space size. Evolutionary mode is (mu + lambda): mu random
/// distinct founders, then each child copies a uniformly drawn survivor and
/// moves each gene to a neighboring candidate with probability
/// mutation_rate. A child that was already evaluated is replaced by a random
/// unseen candidate, so no config is evaluated twice. Stops at the budget or
/// when the space is exhausted. Ties keep the earliest evaluation.
SearchResult search(const SearchSpace& space, const EncoderConfig& img, const EncoderConfig& txt,
                    const FusionConfig& base, const Objective& objective, std::uint64_t seed);

/// Best validation accuracy of a short PMF training on the given backbones.
Objective short_training_objective(const EncoderParams& img, const EncoderParams& txt,
                                   const FusionConfig& base, const Dataset& train, const Dataset& val,
                                   const TrainConfig& config);

}  // namespace pmf
