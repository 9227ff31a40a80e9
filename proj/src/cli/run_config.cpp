#include "pmf/run_config.hpp"

#include <algorithm>
#include <cmath>

namespace pmf {

namespace {

using nlohmann::json;

json uint_t(std::int64_t minimum = 0) { return json{{"type", "integer"}, {"minimum", minimum}}; }
json num_t(double minimum) { return json{{"type", "number"}, {"minimum", minimum}}; }
json bool_t() { return json{{"type", "boolean"}}; }
json str_t() { return json{{"type", "string"}}; }
json enum_t(std::vector<std::string> values) { return json{{"enum", values}}; }
json uint_list_t() { return json{{"type", "array"}, {"items", uint_t()}}; }

json object_t(json properties, std::vector<std::string> required = {}) {
  json o{{"type", "object"}, {"additionalProperties", false}, {"properties", std::move(properties)}};
  if (!required.empty()) o["required"] = required;
  return o;
}

json encoder_schema() {
  return object_t({{"layers", uint_t(1)},
                   {"dim", uint_t(1)},
                   {"heads", uint_t(1)},
                   {"mlp_ratio", uint_t(1)},
                   {"ln_eps", num_t(0.0)}});
}

json train_properties() {
  return {{"lr", num_t(0.0)},         {"momentum", num_t(0.0)},    {"weight_decay", num_t(0.0)},
          {"batch_size", uint_t(1)},  {"epochs", uint_t(0)},       {"eval_every", uint_t(1)},
          {"class_weighting", bool_t()}};
}

json build_schema() {
  json pretrain = train_properties();
  pretrain["n_train"] = uint_t(1);
  pretrain["n_val"] = uint_t(0);
  pretrain["min_accuracy"] = json{{"type", "number"}, {"minimum", 0}, {"maximum", 1}};
  pretrain["max_attempts"] = uint_t(1);

  json schema = object_t(
      {{"seed", uint_t()},
       {"model", object_t({{"kind", enum_t({"pmf", "linear", "late_concat", "prompt_img_only", "prompt_txt_only"})},
                           {"dtype", enum_t({"f32", "f64"})},
                           {"img", encoder_schema()},
                           {"txt", encoder_schema()},
                           {"fusion", object_t({{"lf_img", uint_t()},
                                                {"lf_txt", uint_t()},
                                                {"m_qp", uint_t()},
                                                {"m_qcp", uint_t()},
                                                {"m_fcp", uint_t()},
                                                {"identity_mapping", bool_t()}})},
                           {"prompt_len", uint_t(1)},
                           {"img_backbone", str_t()},
                           {"txt_backbone", str_t()}})},
       {"data", object_t({{"task", object_t({{"kind", enum_t({"xor2", "joint4", "multilabel2"})},
                                             {"noise_sigma", num_t(0.0)},
                                             {"mu", num_t(0.0)},
                                             {"image_h", uint_t(1)},
                                             {"image_w", uint_t(1)},
                                             {"channels", uint_t(1)},
                                             {"patch", uint_t(1)},
                                             {"signal_patch", uint_t()},
                                             {"vocab", uint_t(2)},
                                             {"min_len", uint_t(1)},
                                             {"max_len", uint_t(1)},
                                             {"marker", uint_t()},
                                             {"filler_lo", uint_t()}},
                                            {"kind"})},
                          {"n_train", uint_t(1)},
                          {"n_val", uint_t(1)},
                          {"train_path", str_t()},
                          {"val_path", str_t()}})},
       {"train", object_t(train_properties(), {"lr"})},
       {"pretrain", object_t(pretrain)},
       {"eval", object_t({{"checkpoint", str_t()}})},
       {"profile", object_t({{"axis", enum_t({"lf", "m"})}, {"values", uint_list_t()}, {"batch_size", uint_t(1)}})},
       {"search", object_t({{"mode", enum_t({"grid", "evolutionary"})},
                            {"lf_values", uint_list_t()},
                            {"m_values", uint_list_t()},
                            {"budget", uint_t(1)},
                            {"population", uint_t(1)},
                            {"offspring", uint_t(1)},
                            {"mutation_rate", json{{"type", "number"}, {"minimum", 0}, {"maximum", 1}}},
                            {"objective", enum_t({"short_training", "synthetic"})},
                            {"n_train", uint_t(1)},
                            {"n_val", uint_t(1)},
                            {"epochs", uint_t(1)}})}});
  schema["$schema"] = "http://json-schema.org/draft-07/schema#";
  schema["title"] = "pmf run config";
  return schema;
}

bool has_type(const json& v, const std::string& type) {
  if (type == "object") return v.is_object();
  if (type == "array") return v.is_array();
  if (type == "string") return v.is_string();
  if (type == "boolean") return v.is_boolean();
  if (type == "integer") return v.is_number_integer();
  if (type == "number") return v.is_number();
  if (type == "null") return v.is_null();
  return false;
}

void check(const json& v, const json& s, const std::string& where) {
  const std::string at = where.empty() ? "/" : where;
  if (s.contains("type") && !has_type(v, s["type"].get<std::string>())) {
    throw ConfigError("config " + at + ": expected " + s["type"].get<std::string>() + ", got " + v.type_name());
  }
  if (s.contains("enum")) {
    if (std::find(s["enum"].begin(), s["enum"].end(), v) == s["enum"].end()) {
      throw ConfigError("config " + at + ": " + v.dump() + " is not one of " + s["enum"].dump());
    }
  }
  if (v.is_number()) {
    if (s.contains("minimum") && v.get<double>() < s["minimum"].get<double>()) {
      throw ConfigError("config " + at + ": " + v.dump() + " is below the minimum " + s["minimum"].dump());
    }
    if (s.contains("maximum") && v.get<double>() > s["maximum"].get<double>()) {
      throw ConfigError("config " + at + ": " + v.dump() + " is above the maximum " + s["maximum"].dump());
    }
  }
  if (v.is_object()) {
    for (const auto& key : s.value("required", json::array())) {
      if (!v.contains(key.get<std::string>())) {
        throw ConfigError("config " + at + ": missing required key '" + key.get<std::string>() + "'");
      }
    }
    const json props = s.value("properties", json::object());
    for (const auto& [key, value] : v.items()) {
      if (props.contains(key)) {
        check(value, props[key], where + "/" + key);
      } else if (s.contains("additionalProperties") && s["additionalProperties"] == false) {
        throw ConfigError("config " + at + ": unknown key '" + key + "'");
      }
    }
  }
  if (v.is_array() && s.contains("items")) {
    for (std::size_t i = 0; i < v.size(); ++i) check(v[i], s["items"], where + "/" + std::to_string(i));
  }
}

template <class T>
void get(const json& j, const char* key, T& field) {
  if (j.contains(key)) j.at(key).get_to(field);
}

void read_arch(const json& j, EncoderConfig& c) {
  get(j, "layers", c.layers);
  get(j, "dim", c.dim);
  get(j, "heads", c.heads);
  get(j, "mlp_ratio", c.mlp_ratio);
  get(j, "ln_eps", c.ln_eps);
}

nlohmann::ordered_json arch_json(const EncoderConfig& c) {
  nlohmann::ordered_json j;
  j["layers"] = c.layers;
  j["dim"] = c.dim;
  j["heads"] = c.heads;
  j["mlp_ratio"] = c.mlp_ratio;
  j["ln_eps"] = c.ln_eps;
  return j;
}

void read_train(const json& j, TrainConfig& c) {
  get(j, "lr", c.lr);
  get(j, "momentum", c.momentum);
  get(j, "weight_decay", c.weight_decay);
  get(j, "batch_size", c.batch_size);
  get(j, "epochs", c.epochs);
  get(j, "eval_every", c.eval_every);
  get(j, "class_weighting", c.class_weighting);
}

nlohmann::ordered_json train_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["lr"] = c.lr;
  j["momentum"] = c.momentum;
  j["weight_decay"] = c.weight_decay;
  j["batch_size"] = c.batch_size;
  j["epochs"] = c.epochs;
  j["eval_every"] = c.eval_every;
  j["class_weighting"] = c.class_weighting;
  return j;
}

std::vector<std::size_t> lf_range(const EncoderConfig& img, const EncoderConfig& txt) {
  std::vector<std::size_t> out;
  for (std::size_t lf = 0; lf <= img.layers; ++lf) {
    if (img.layers - lf <= txt.layers) out.push_back(lf);
  }
  return out;
}

const std::vector<std::size_t> kDefaultM{1, 2, 4, 8, 16};

}  // namespace

const nlohmann::json& run_config_schema() {
  static const nlohmann::json schema = build_schema();
  return schema;
}

void validate_schema(const nlohmann::json& doc, const nlohmann::json& schema) { check(doc, schema, ""); }

PretrainSection::PretrainSection() {
  train.lr = 0.01;
  train.epochs = 3;
}

std::uint64_t derive_seed(std::uint64_t root, const std::string& purpose) {
  return Rng(root).fork(purpose).seed();
}

void RunConfig::validate() const {
  data.task.validate();
  model.img.validate();
  model.txt.validate();
  model.fusion.validate(model.img, model.txt);
  if (model.kind != "pmf" && !parse_baseline_kind(model.kind)) {
    throw ConfigError("config /model/kind: unknown kind '" + model.kind + "'");
  }
  if (model.dtype != DType::f32 && model.dtype != DType::f64) throw ConfigError("config /model/dtype: unsupported");
  if (model.img.heads == 0 || model.img.dim % model.img.heads != 0 || model.txt.dim % model.txt.heads != 0) {
    throw ConfigError("config /model: dim must be divisible by heads");
  }
  if (data.task.max_len > model.txt.max_len) throw ConfigError("config: task max_len exceeds the text encoder");
  if (train) train->validate();
  pretrain.train.validate();
  if (profile.batch_size < 1) throw ConfigError("config /profile/batch_size must be >= 1");
  search.space.validate(model.img, model.txt, model.fusion);
}

nlohmann::ordered_json RunConfig::effective() const {
  nlohmann::ordered_json j;
  j["seed"] = seed;

  auto& m = j["model"];
  m["kind"] = model.kind;
  m["dtype"] = dtype_name(model.dtype);
  m["img"] = arch_json(model.img);
  m["txt"] = arch_json(model.txt);
  m["fusion"]["lf_img"] = model.fusion.lf_img;
  m["fusion"]["lf_txt"] = model.fusion.lf_txt;
  m["fusion"]["m_qp"] = model.fusion.m_qp;
  m["fusion"]["m_qcp"] = model.fusion.m_qcp;
  m["fusion"]["m_fcp"] = model.fusion.m_fcp;
  m["fusion"]["identity_mapping"] = model.fusion.identity_mapping;
  m["prompt_len"] = model.prompt_len;
  m["img_backbone"] = model.img_backbone;
  m["txt_backbone"] = model.txt_backbone;

  auto& d = j["data"];
  d["task"] = nlohmann::ordered_json::parse(json(data.task).dump());
  d["n_train"] = data.n_train;
  d["n_val"] = data.n_val;
  d["train_path"] = data.train_path;
  d["val_path"] = data.val_path;

  if (train) j["train"] = train_json(*train);

  auto p = train_json(pretrain.train);
  p["n_train"] = pretrain.n_train;
  p["n_val"] = pretrain.n_val;
  p["min_accuracy"] = pretrain.min_accuracy;
  p["max_attempts"] = pretrain.max_attempts;
  j["pretrain"] = p;

  j["eval"]["checkpoint"] = eval_checkpoint;

  j["profile"]["axis"] = sweep_axis_name(profile.axis);
  j["profile"]["values"] = profile.values;
  j["profile"]["batch_size"] = profile.batch_size;

  auto& s = j["search"];
  s["mode"] = search_mode_name(search.space.mode);
  s["lf_values"] = search.space.lf_values;
  s["m_values"] = search.space.m_values;
  s["budget"] = search.space.budget;
  s["population"] = search.space.population;
  s["offspring"] = search.space.offspring;
  s["mutation_rate"] = search.space.mutation_rate;
  s["objective"] = search.objective;
  s["n_train"] = search.n_train;
  s["n_val"] = search.n_val;
  s["epochs"] = search.epochs;
  return j;
}

RunConfig parse_run_config(const nlohmann::json& doc, std::optional<std::uint64_t> seed_override) {
  validate_schema(doc, run_config_schema());
  RunConfig c;
  try {
    get(doc, "seed", c.seed);
    if (seed_override) c.seed = *seed_override;

    const json data = doc.value("data", json::object());
    if (data.contains("task")) c.data.task = data.at("task").get<TaskSpec>();
    get(data, "n_train", c.data.n_train);
    get(data, "n_val", c.data.n_val);
    get(data, "train_path", c.data.train_path);
    get(data, "val_path", c.data.val_path);
    c.data.task.validate();

    const json model = doc.value("model", json::object());
    get(model, "kind", c.model.kind);
    if (model.contains("dtype")) c.model.dtype = parse_dtype(model.at("dtype").get<std::string>());
    c.model.img = c.data.task.image_encoder();
    c.model.txt = c.data.task.text_encoder();
    if (model.contains("img")) read_arch(model.at("img"), c.model.img);
    if (model.contains("txt")) read_arch(model.at("txt"), c.model.txt);
    c.model.img.validate();
    c.model.txt.validate();
    c.model.fusion = FusionConfig::defaults_for(c.model.img, c.model.txt);
    if (model.contains("fusion")) {
      const json& f = model.at("fusion");
      get(f, "lf_img", c.model.fusion.lf_img);
      get(f, "lf_txt", c.model.fusion.lf_txt);
      get(f, "m_qp", c.model.fusion.m_qp);
      get(f, "m_qcp", c.model.fusion.m_qcp);
      get(f, "m_fcp", c.model.fusion.m_fcp);
      get(f, "identity_mapping", c.model.fusion.identity_mapping);
    }
    c.model.fusion.n_classes = c.data.task.n_classes();
    c.model.fusion.loss = c.data.task.multi_label() ? LossKind::multi_label : LossKind::single_label;
    get(model, "prompt_len", c.model.prompt_len);
    get(model, "img_backbone", c.model.img_backbone);
    get(model, "txt_backbone", c.model.txt_backbone);

    if (doc.contains("train")) {
      TrainConfig t;
      read_train(doc.at("train"), t);
      c.train = t;
    }
    if (doc.contains("pretrain")) {
      const json& p = doc.at("pretrain");
      read_train(p, c.pretrain.train);
      get(p, "n_train", c.pretrain.n_train);
      get(p, "n_val", c.pretrain.n_val);
      get(p, "min_accuracy", c.pretrain.min_accuracy);
      get(p, "max_attempts", c.pretrain.max_attempts);
    }
    // seeds and loss are derived, never configured
    const LossKind loss = c.model.fusion.loss;
    if (c.train) {
      c.train->loss = loss;
      c.train->seed = derive_seed(c.seed, "train");
    }

    if (doc.contains("eval")) get(doc.at("eval"), "checkpoint", c.eval_checkpoint);

    const json profile = doc.value("profile", json::object());
    if (profile.contains("axis")) c.profile.axis = parse_sweep_axis(profile.at("axis").get<std::string>());
    get(profile, "values", c.profile.values);
    get(profile, "batch_size", c.profile.batch_size);
    if (c.profile.values.empty()) {
      c.profile.values = c.profile.axis == SweepAxis::lf ? lf_range(c.model.img, c.model.txt) : kDefaultM;
    }

    const json search = doc.value("search", json::object());
    auto& space = c.search.space;
    space.lf_values = lf_range(c.model.img, c.model.txt);
    space.m_values = kDefaultM;
    if (search.contains("mode")) space.mode = parse_search_mode(search.at("mode").get<std::string>());
    get(search, "lf_values", space.lf_values);
    get(search, "m_values", space.m_values);
    space.budget = space.size();
    get(search, "budget", space.budget);
    get(search, "population", space.population);
    get(search, "offspring", space.offspring);
    get(search, "mutation_rate", space.mutation_rate);
    get(search, "objective", c.search.objective);
    get(search, "n_train", c.search.n_train);
    get(search, "n_val", c.search.n_val);
    get(search, "epochs", c.search.epochs);

    c.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

}  // namespace pmf
