#include "pmf/profile.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "pmf/classifier.hpp"
#include "pmf/ops.hpp"

namespace pmf {

const char* sweep_axis_name(SweepAxis a) { return a == SweepAxis::lf ? "lf" : "m"; }

SweepAxis parse_sweep_axis(const std::string& name) {
  if (name == "lf" || name == "Lf") return SweepAxis::lf;
  if (name == "m" || name == "M") return SweepAxis::m;
  throw Error("unknown sweep axis '" + name + "' (expected lf or m)");
}

const char* search_mode_name(SearchMode m) { return m == SearchMode::grid ? "grid" : "evolutionary"; }

SearchMode parse_search_mode(const std::string& name) {
  if (name == "grid") return SearchMode::grid;
  if (name == "evolutionary") return SearchMode::evolutionary;
  throw Error("unknown search mode '" + name + "' (expected grid or evolutionary)");
}

namespace {

FusionConfig with_lf(FusionConfig f, std::size_t lf, const EncoderConfig& img, const EncoderConfig& txt) {
  if (lf > img.layers) {
    throw Error("Lf=" + std::to_string(lf) + " exceeds the image tower depth " + std::to_string(img.layers));
  }
  const std::size_t fusion_depth = img.layers - lf;
  if (fusion_depth > txt.layers) {
    throw Error("Lf=" + std::to_string(lf) + " leaves " + std::to_string(fusion_depth) +
                " fusion layers, more than the text tower's " + std::to_string(txt.layers));
  }
  f.lf_img = lf;
  f.lf_txt = txt.layers - fusion_depth;
  return f;
}

FusionConfig with_m(FusionConfig f, std::size_t m) {
  f.m_qp = f.m_qcp = f.m_fcp = m;
  return f;
}

std::string point_name(SweepAxis axis, std::size_t v) {
  return std::string(axis == SweepAxis::lf ? "Lf=" : "M=") + std::to_string(v);
}

std::string candidate_name(const Candidate& c) {
  return "Lf=" + std::to_string(c.lf) + ", M=" + std::to_string(c.m);
}

TapeStats measure_step(const PmfModel& model, const Dataset& batch) {
  Tape tape;
  Tensor loss;
  {
    RecordingScope rec(tape);
    std::vector<Tensor> rows;
    std::vector<std::int64_t> labels;
    std::vector<std::uint8_t> targets;
    for (const auto& r : batch) {
      rows.push_back(pmf_forward(r.image, r.tokens, model));
      labels.push_back(r.label);
      targets.insert(targets.end(), r.labels.begin(), r.labels.end());
    }
    const Tensor logits = ops::concat_rows(rows);
    loss = model.fusion.loss == LossKind::single_label ? ops::cross_entropy(logits, labels, {})
                                                       : ops::bce_with_logits(logits, targets, {});
  }
  backward(loss, tape);
  return tape.stats();
}

void check_unique(std::vector<std::size_t>& v, const char* what) {
  std::sort(v.begin(), v.end());
  auto dup = std::adjacent_find(v.begin(), v.end());
  if (dup != v.end()) throw Error(std::string(what) + " value " + std::to_string(*dup) + " listed twice");
}

}  // namespace

FusionConfig apply_candidate(const FusionConfig& base, const Candidate& c, const EncoderConfig& img,
                             const EncoderConfig& txt) {
  return with_m(with_lf(base, c.lf, img, txt), c.m);
}

std::string SweepResult::to_csv() const {
  std::string out = fmt::format("{},trainable_params,tape_nodes,tape_saved_bytes,val_metric\n",
                                axis == SweepAxis::lf ? "Lf" : "M");
  for (const auto& r : rows) {
    out += fmt::format("{},{},{},{},{}\n", r.value, r.trainable_params, r.tape_nodes, r.tape_saved_bytes,
                       r.val_metric ? fmt::format("{}", *r.val_metric) : std::string());
  }
  return out;
}

nlohmann::ordered_json SweepResult::to_json() const {
  nlohmann::ordered_json rows_j = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json j;
    j[axis == SweepAxis::lf ? "Lf" : "M"] = r.value;
    j["trainable_params"] = r.trainable_params;
    j["tape_nodes"] = r.tape_nodes;
    j["tape_saved_bytes"] = r.tape_saved_bytes;
    j["val_metric"] = r.val_metric ? nlohmann::ordered_json(*r.val_metric) : nlohmann::ordered_json(nullptr);
    rows_j.push_back(j);
  }
  nlohmann::ordered_json out;
  out["axis"] = sweep_axis_name(axis);
  out["rows"] = rows_j;
  return out;
}

SweepResult profile_sweep(SweepAxis axis, std::vector<std::size_t> values, const EncoderParams& img,
                          const EncoderParams& txt, const FusionConfig& base, const Dataset& batch,
                          std::uint64_t seed) {
  if (values.empty()) throw Error("profile_sweep: no sweep values");
  if (batch.empty()) throw Error("profile_sweep: empty batch");
  check_unique(values, axis == SweepAxis::lf ? "profile_sweep: Lf" : "profile_sweep: M");
  SweepResult result;
  result.axis = axis;
  for (const std::size_t v : values) {
    FusionConfig f;
    try {
      f = axis == SweepAxis::lf ? with_lf(base, v, img.config, txt.config) : with_m(base, v);
      f.validate(img.config, txt.config);
    } catch (const Error& e) {
      throw Error("profile_sweep: invalid point " + point_name(axis, v) + ": " + e.what());
    }
    const PmfModel model = build_pmf(img, txt, f, seed);
    const TapeStats s = measure_step(model, batch);
    SweepRow row;
    row.value = v;
    row.trainable_params = count_trainable_params(img.config, txt.config, f).total;
    row.tape_nodes = s.node_count;
    row.tape_saved_bytes = s.saved_bytes;
    spdlog::debug("profile {}: {} nodes, {} saved bytes", point_name(axis, v), s.node_count, s.saved_bytes);
    result.rows.push_back(row);
  }
  return result;
}

bool SearchSpace::contains(const Candidate& c) const {
  return std::find(lf_values.begin(), lf_values.end(), c.lf) != lf_values.end() &&
         std::find(m_values.begin(), m_values.end(), c.m) != m_values.end();
}

void SearchSpace::validate(const EncoderConfig& img, const EncoderConfig& txt, const FusionConfig& base) const {
  if (lf_values.empty() || m_values.empty()) throw Error("search: empty space");
  auto lf = lf_values, m = m_values;
  check_unique(lf, "search: Lf");
  check_unique(m, "search: M");
  if (budget < 1) throw Error("search: budget must be >= 1");
  if (mode == SearchMode::grid && budget < size()) {
    throw Error("search: grid mode needs budget >= space size (" + std::to_string(budget) + " < " +
                std::to_string(size()) + ")");
  }
  if (mode == SearchMode::evolutionary) {
    if (population < 1 || offspring < 1) throw Error("search: population and offspring must be >= 1");
    if (budget < population) {
      throw Error("search: budget " + std::to_string(budget) + " is smaller than the population " +
                  std::to_string(population));
    }
    if (!(mutation_rate >= 0.0 && mutation_rate <= 1.0)) throw Error("search: mutation_rate must be in [0, 1]");
  }
  for (auto l : lf_values) {
    for (auto mm : m_values) {
      const Candidate c{l, mm};
      try {
        apply_candidate(base, c, img, txt).validate(img, txt);
      } catch (const Error& e) {
        throw Error("search: candidate " + candidate_name(c) + " is invalid: " + e.what());
      }
    }
  }
}

void to_json(nlohmann::json& j, const SearchSpace& s) {
  j = nlohmann::json{{"lf_values", s.lf_values},   {"m_values", s.m_values},
                     {"budget", s.budget},         {"mode", search_mode_name(s.mode)},
                     {"population", s.population}, {"offspring", s.offspring},
                     {"mutation_rate", s.mutation_rate}};
}

void from_json(const nlohmann::json& j, SearchSpace& s) {
  s = SearchSpace{};
  j.at("lf_values").get_to(s.lf_values);
  j.at("m_values").get_to(s.m_values);
  j.at("budget").get_to(s.budget);
  if (j.contains("mode")) s.mode = parse_search_mode(j.at("mode").get<std::string>());
  if (j.contains("population")) j.at("population").get_to(s.population);
  if (j.contains("offspring")) j.at("offspring").get_to(s.offspring);
  if (j.contains("mutation_rate")) j.at("mutation_rate").get_to(s.mutation_rate);
}

std::string SearchResult::to_csv() const {
  std::string out = "index,Lf,M,trainable_params,objective\n";
  for (const auto& e : log) {
    out += fmt::format("{},{},{},{},{}\n", e.index, e.candidate.lf, e.candidate.m, e.trainable_params, e.objective);
  }
  return out;
}

nlohmann::ordered_json SearchResult::to_json() const {
  nlohmann::ordered_json evals = nlohmann::ordered_json::array();
  for (const auto& e : log) {
    nlohmann::ordered_json j;
    j["index"] = e.index;
    j["Lf"] = e.candidate.lf;
    j["M"] = e.candidate.m;
    j["trainable_params"] = e.trainable_params;
    j["objective"] = e.objective;
    evals.push_back(j);
  }
  nlohmann::ordered_json out;
  out["best"]["Lf"] = best.lf;
  out["best"]["M"] = best.m;
  out["best_objective"] = best_objective;
  out["log"] = evals;
  return out;
}

SearchResult search(const SearchSpace& space, const EncoderConfig& img, const EncoderConfig& txt,
                    const FusionConfig& base, const Objective& objective, std::uint64_t seed) {
  space.validate(img, txt, base);
  auto lf_axis = space.lf_values, m_axis = space.m_values;
  std::sort(lf_axis.begin(), lf_axis.end());
  std::sort(m_axis.begin(), m_axis.end());
  std::vector<Candidate> all;
  for (auto l : lf_axis)
    for (auto m : m_axis) all.push_back({l, m});

  SearchResult result;
  std::set<Candidate> seen;
  auto evaluate = [&](const Candidate& c) -> const SearchEval& {
    const double value = objective(c);
    if (!std::isfinite(value)) throw Error("search: objective is not finite at " + candidate_name(c));
    SearchEval e{result.log.size(), c, count_trainable_params(img, txt, apply_candidate(base, c, img, txt)).total,
                 value};
    spdlog::info("search eval {}: {} -> {:.6g}", e.index, candidate_name(c), value);
    seen.insert(c);
    result.log.push_back(e);
    return result.log.back();
  };
  const std::size_t limit = std::min(space.budget, all.size());

  if (space.mode == SearchMode::grid) {
    for (const auto& c : all) evaluate(c);
  } else {
    Rng rng = Rng(seed).fork("search");
    std::vector<std::size_t> order(all.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    auto better = [](const SearchEval& a, const SearchEval& b) {
      return a.objective != b.objective ? a.objective > b.objective : a.index < b.index;
    };
    std::vector<SearchEval> population;
    for (std::size_t i = 0; i < std::min(space.population, limit); ++i) population.push_back(evaluate(all[order[i]]));
    std::sort(population.begin(), population.end(), better);

    auto step = [&](const std::vector<std::size_t>& axis, std::size_t value) {
      const std::size_t i = static_cast<std::size_t>(std::find(axis.begin(), axis.end(), value) - axis.begin());
      if (axis.size() < 2 || !rng.bernoulli(space.mutation_rate)) return value;
      if (i == 0) return axis[1];
      if (i + 1 == axis.size()) return axis[i - 1];
      return axis[rng.bernoulli() ? i + 1 : i - 1];
    };
    while (result.log.size() < limit) {
      std::vector<SearchEval> children;
      for (std::size_t k = 0; k < space.offspring && result.log.size() < limit; ++k) {
        const Candidate& parent = population[rng.below(population.size())].candidate;
        Candidate child{step(lf_axis, parent.lf), step(m_axis, parent.m)};
        if (seen.count(child)) {
          std::vector<Candidate> unseen;
          for (const auto& c : all)
            if (!seen.count(c)) unseen.push_back(c);
          child = unseen[rng.below(unseen.size())];
        }
        children.push_back(evaluate(child));
      }
      population.insert(population.end(), children.begin(), children.end());
      std::sort(population.begin(), population.end(), better);
      if (population.size() > space.population) population.resize(space.population);
    }
  }

  const auto best = std::min_element(result.log.begin(), result.log.end(), [](const SearchEval& a, const SearchEval& b) {
    return a.objective != b.objective ? a.objective > b.objective : a.index < b.index;
  });
  result.best = best->candidate;
  result.best_objective = best->objective;
  return result;
}

Objective short_training_objective(const EncoderParams& img, const EncoderParams& txt, const FusionConfig& base,
                                   const Dataset& train, const Dataset& val, const TrainConfig& config) {
  if (val.empty()) throw Error("search: the short-training objective needs a validation set");
  return [img, txt, base, train, val, config](const Candidate& c) {
    PmfClassifier model(build_pmf(img, txt, apply_candidate(base, c, img.config, txt.config), config.seed));
    TrainOptions options;
    options.restore_best = false;
    return train_run(model, train, val, config, options).best_val_accuracy;
  };
}

}  // namespace pmf
