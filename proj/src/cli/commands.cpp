#include "pmf/cli.hpp"

#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "pmf/checkpoint.hpp"
#include "pmf/classifier.hpp"
#include "pmf/profile.hpp"
#include "pmf/run_config.hpp"

namespace pmf {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct CountFlags {
  std::string preset;
  std::optional<std::size_t> layers, dim, heads, layers_txt, dim_txt, lf, m, classes;
};

struct Invocation {
  std::string command;
  std::string config_path;
  std::optional<std::uint64_t> seed;
  fs::path out = "out";
  bool out_given = false;
  CountFlags count;
};

void setup_logging() {
  auto logger = std::make_shared<spdlog::logger>("pmf", std::make_shared<spdlog::sinks::stderr_color_sink_mt>());
  spdlog::set_default_logger(logger);
  const char* env = std::getenv("PMF_LOG_LEVEL");
  const std::string level = env ? env : "info";
  if (level == "error") {
    spdlog::set_level(spdlog::level::err);
  } else if (level == "info") {
    spdlog::set_level(spdlog::level::info);
  } else if (level == "debug") {
    spdlog::set_level(spdlog::level::debug);
  } else {
    throw ConfigError("PMF_LOG_LEVEL must be error, info, or debug (got '" + level + "')");
  }
}

json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

void echo_effective(const fs::path& out, const nlohmann::ordered_json& effective) {
  fs::create_directories(out);
  write_text(out / "config.effective.json", effective.dump(2) + "\n");
}

Dataset make_split(const RunConfig& c, const std::string& path, std::size_t n, const std::string& purpose) {
  if (!path.empty()) return read_dataset(path);
  return generate_dataset(c.data.task, n, derive_seed(c.seed, purpose));
}

std::pair<Dataset, Dataset> task_data(const RunConfig& c) {
  return {make_split(c, c.data.train_path, c.data.n_train, "data.train"),
          make_split(c, c.data.val_path, c.data.n_val, "data.val")};
}

EncoderParams load_backbone(const std::string& path, const EncoderConfig& expected, DType dtype) {
  EncoderParams enc = load_encoder(path);
  if (!(enc.config == expected)) {
    throw Error("backbone " + path + " does not match the configured encoder: file has " +
                json(enc.config).dump() + ", config wants " + json(expected).dump());
  }
  if (enc.dtype != dtype) throw Error("backbone " + path + " has dtype " + dtype_name(enc.dtype));
  return enc;
}

std::pair<EncoderParams, EncoderParams> pretrain_backbones(const RunConfig& c, const fs::path& out) {
  TaskSpec task = c.data.task;
  task.kind = TaskKind::multilabel2;
  const Dataset train = generate_dataset(task, c.pretrain.n_train, derive_seed(c.seed, "pretrain.data.train"));
  const Dataset val = c.pretrain.n_val == 0
                          ? Dataset{}
                          : generate_dataset(task, c.pretrain.n_val, derive_seed(c.seed, "pretrain.data.val"));
  json summary;
  std::vector<EncoderParams> encs;
  for (const auto& [name, cfg] : {std::pair{"img", c.model.img}, std::pair{"txt", c.model.txt}}) {
    TrainConfig tc = c.pretrain.train;
    tc.seed = derive_seed(c.seed, std::string("pretrain.") + name);
    spdlog::info("pretraining the {} backbone", name);
    PretrainResult r =
        pretrain_unimodal(cfg, c.model.dtype, train, val, tc, c.pretrain.min_accuracy, c.pretrain.max_attempts);
    save_encoder(r.encoder, out / (std::string(name) + "_backbone.ckpt"));
    summary[name] = {{"val_accuracy", r.val_accuracy}, {"attempts", r.attempts}, {"seed", r.seed}};
    encs.push_back(std::move(r.encoder));
  }
  write_text(out / "pretrain.json", summary.dump(2) + "\n");
  return {std::move(encs[0]), std::move(encs[1])};
}

/// Loads configured backbone files; pretrains whatever is missing.
std::pair<EncoderParams, EncoderParams> backbones(const RunConfig& c, const fs::path& out) {
  if (c.model.img_backbone.empty() || c.model.txt_backbone.empty()) {
    if (!c.model.img_backbone.empty() || !c.model.txt_backbone.empty()) {
      spdlog::warn("only one backbone path is set; pretraining both towers");
    }
    return pretrain_backbones(c, out);
  }
  return {load_backbone(c.model.img_backbone, c.model.img, c.model.dtype),
          load_backbone(c.model.txt_backbone, c.model.txt, c.model.dtype)};
}

std::unique_ptr<Classifier> build_classifier(const RunConfig& c, EncoderParams img, EncoderParams txt) {
  const std::uint64_t seed = derive_seed(c.seed, "model");
  if (c.model.kind == "pmf") {
    return std::make_unique<PmfClassifier>(build_pmf(std::move(img), std::move(txt), c.model.fusion, seed));
  }
  return std::make_unique<BaselineClassifier>(build_baseline(*parse_baseline_kind(c.model.kind), img, txt,
                                                             c.model.fusion.n_classes, c.model.fusion.loss, seed,
                                                             c.model.prompt_len));
}

json metrics_json(const Metrics& m) {
  return {{"accuracy", m.accuracy}, {"f1_macro", m.f1_macro}, {"f1_micro", m.f1_micro}};
}

void print(const json& j) { std::cout << j.dump(2) << std::endl; }

int cmd_gen_data(const RunConfig& c, const fs::path& out) {
  const Dataset train = generate_dataset(c.data.task, c.data.n_train, derive_seed(c.seed, "data.train"));
  const Dataset val = generate_dataset(c.data.task, c.data.n_val, derive_seed(c.seed, "data.val"));
  write_dataset(train, out / "train.jsonl");
  write_dataset(val, out / "val.jsonl");
  print({{"train", (out / "train.jsonl").string()},
         {"val", (out / "val.jsonl").string()},
         {"analytic_val_accuracy", analytic_accuracy(val, c.data.task)}});
  return 0;
}

int cmd_pretrain(const RunConfig& c, const fs::path& out) {
  pretrain_backbones(c, out);
  std::ifstream in(out / "pretrain.json");
  print(json::parse(in));
  return 0;
}

int cmd_train(const RunConfig& c, const fs::path& out) {
  auto [img, txt] = backbones(c, out);
  auto [train, val] = task_data(c);
  auto model = build_classifier(c, std::move(img), std::move(txt));
  std::size_t trainable = 0;
  for (const auto& nt : model->trainable_tensors()) trainable += nt.tensor.numel();
  TrainOptions options;
  options.metrics_path = out / "metrics.jsonl";
  options.checkpoint_path = out / "model.ckpt";
  const TrainResult r = train_run(*model, train, val, *c.train, options);
  json result{{"kind", model->kind()},
              {"trainable_params", trainable},
              {"steps", r.steps},
              {"best_epoch", r.best_epoch},
              {"best_val_accuracy", r.best_val_accuracy},
              {"final_val", r.log.empty() || !r.log.back().val ? json(nullptr) : metrics_json(*r.log.back().val)}};
  write_text(out / "result.json", result.dump(2) + "\n");
  print(result);
  return 0;
}

int cmd_eval(const RunConfig& c, const fs::path& out) {
  const fs::path ckpt = c.eval_checkpoint.empty() ? out / "model.ckpt" : fs::path(c.eval_checkpoint);
  auto model = load_checkpoint(ckpt);
  const Dataset val = make_split(c, c.data.val_path, c.data.n_val, "data.val");
  const json result{{"checkpoint", ckpt.string()},
                    {"kind", model->kind()},
                    {"records", val.size()},
                    {"metrics", metrics_json(evaluate(*model, val, c.model.fusion.loss))}};
  write_text(out / "eval.json", result.dump(2) + "\n");
  print(result);
  return 0;
}

int cmd_profile(const RunConfig& c, const fs::path& out) {
  EncoderParams img, txt;
  if (!c.model.img_backbone.empty() && !c.model.txt_backbone.empty()) {
    img = load_backbone(c.model.img_backbone, c.model.img, c.model.dtype);
    txt = load_backbone(c.model.txt_backbone, c.model.txt, c.model.dtype);
  } else {
    // tape sizes do not depend on the weights
    Rng root(derive_seed(c.seed, "profile.backbones"));
    Rng ri = root.fork("img"), rt = root.fork("txt");
    img = init_encoder(c.model.img, c.model.dtype, ri);
    txt = init_encoder(c.model.txt, c.model.dtype, rt);
  }
  const Dataset batch = generate_dataset(c.data.task, c.profile.batch_size, derive_seed(c.seed, "profile.batch"));
  const SweepResult r =
      profile_sweep(c.profile.axis, c.profile.values, img, txt, c.model.fusion, batch, derive_seed(c.seed, "model"));
  write_text(out / "profile.csv", r.to_csv());
  write_text(out / "profile.json", r.to_json().dump(2) + "\n");
  std::cout << r.to_csv();
  return 0;
}

int cmd_search(const RunConfig& c, const fs::path& out) {
  Objective objective;
  if (c.search.objective == "synthetic") {
    objective = [](const Candidate& k) {
      const double a = static_cast<double>(k.lf) - 6.0, b = static_cast<double>(k.m) - 4.0;
      return -(a * a) - b * b;
    };
  } else {
    auto [img, txt] = backbones(c, out);
    TrainConfig tc = *c.train;
    tc.epochs = c.search.epochs;
    objective = short_training_objective(
        img, txt, c.model.fusion,
        generate_dataset(c.data.task, c.search.n_train, derive_seed(c.seed, "search.data.train")),
        generate_dataset(c.data.task, c.search.n_val, derive_seed(c.seed, "search.data.val")), tc);
  }
  const SearchResult r =
      search(c.search.space, c.model.img, c.model.txt, c.model.fusion, objective, derive_seed(c.seed, "search"));
  write_text(out / "search.csv", r.to_csv());
  write_text(out / "search.json", r.to_json().dump(2) + "\n");
  print({{"best", {{"Lf", r.best.lf}, {"M", r.best.m}}},
         {"best_objective", r.best_objective},
         {"evaluations", r.log.size()}});
  return 0;
}

int cmd_count_params(const Invocation& inv) {
  RunConfig c;
  if (!inv.config_path.empty()) c = parse_run_config(load_json(inv.config_path), inv.seed);
  EncoderConfig& img = c.model.img;
  EncoderConfig& txt = c.model.txt;
  FusionConfig& f = c.model.fusion;
  const CountFlags& k = inv.count;
  bool reshaped = false;
  if (k.preset == "base" || k.preset == "large") {
    const bool base = k.preset == "base";
    for (EncoderConfig* e : {&img, &txt}) {
      e->layers = base ? 12 : 24;
      e->dim = base ? 768 : 1024;
      e->heads = base ? 12 : 16;
      e->mlp_ratio = 4;
    }
    f.m_qp = f.m_qcp = f.m_fcp = 4;
    f.n_classes = 23;
    reshaped = true;
  } else if (!k.preset.empty()) {
    throw ConfigError("--preset must be base or large");
  }
  auto set = [&](const std::optional<std::size_t>& v, std::size_t& field) {
    if (v) {
      field = *v;
      reshaped = true;
    }
  };
  set(k.layers, img.layers);
  set(k.layers, txt.layers);
  set(k.dim, img.dim);
  set(k.dim, txt.dim);
  set(k.heads, img.heads);
  set(k.heads, txt.heads);
  set(k.layers_txt, txt.layers);
  set(k.dim_txt, txt.dim);
  if (reshaped) {
    const FusionConfig d = FusionConfig::defaults_for(img, txt);
    f.lf_img = d.lf_img;
    f.lf_txt = d.lf_txt;
  }
  if (k.lf) {
    if (*k.lf > img.layers || img.layers - *k.lf > txt.layers) {
      throw ConfigError("--lf " + std::to_string(*k.lf) + " does not fit the towers");
    }
    f.lf_img = *k.lf;
    f.lf_txt = txt.layers - (img.layers - *k.lf);
  }
  if (k.m) f.m_qp = f.m_qcp = f.m_fcp = *k.m;
  if (k.classes) f.n_classes = *k.classes;
  try {
    img.validate();
    txt.validate();
    f.validate(img, txt);
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  const ParamBreakdown b = count_trainable_params(img, txt, f);
  nlohmann::ordered_json out;
  out["prompts"] = b.prompts;
  out["mappings"] = b.mappings;
  out["heads"] = b.heads;
  out["total"] = b.total;
  out["mapping_share"] = b.mapping_share;
  std::cout << out.dump(2) << std::endl;
  if (inv.out_given) {
    nlohmann::ordered_json eff;
    eff["seed"] = c.seed;
    eff["model"] = c.effective()["model"];
    eff["count"] = {{"n_classes", f.n_classes}};
    echo_effective(inv.out, eff);
    write_text(inv.out / "params.json", out.dump(2) + "\n");
  }
  return 0;
}

int dispatch(const Invocation& inv) {
  if (inv.command == "count-params") return cmd_count_params(inv);
  if (inv.config_path.empty()) throw ConfigError(inv.command + ": --config is required");
  const RunConfig c = parse_run_config(load_json(inv.config_path), inv.seed);
  const bool needs_train =
      inv.command == "train" || (inv.command == "search" && c.search.objective == "short_training");
  if (needs_train && !c.train) throw ConfigError("config /: missing required key 'train'");
  echo_effective(inv.out, c.effective());
  if (inv.command == "gen-data") return cmd_gen_data(c, inv.out);
  if (inv.command == "pretrain") return cmd_pretrain(c, inv.out);
  if (inv.command == "train") return cmd_train(c, inv.out);
  if (inv.command == "eval") return cmd_eval(c, inv.out);
  if (inv.command == "profile") return cmd_profile(c, inv.out);
  return cmd_search(c, inv.out);
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Prompt-based multimodal fusion on frozen transformer towers", "pmf_cli"};
  app.fallthrough();
  app.require_subcommand(0, 1);
  Invocation inv;
  bool print_schema = false;
  std::uint64_t seed = 0;
  std::string out;
  app.add_option("--config", inv.config_path, "Run config (JSON)");
  auto* seed_opt = app.add_option("--seed", seed, "Root seed; overrides the config");
  auto* out_opt = app.add_option("--out", out, "Output directory (default: out)");
  app.add_flag("--print-schema", print_schema, "Print the run config JSON Schema and exit");

  app.add_subcommand("gen-data", "Generate train/val JSONL datasets");
  app.add_subcommand("pretrain", "Pretrain both unimodal backbones");
  app.add_subcommand("train", "Train a PMF model or a baseline");
  app.add_subcommand("eval", "Evaluate a checkpoint on the validation split");
  app.add_subcommand("profile", "Tape memory sweep over Lf or M");
  app.add_subcommand("search", "Fusion-structure search over (Lf, M)");
  auto* count = app.add_subcommand("count-params", "Closed-form trainable-parameter count");
  count->add_option("--preset", inv.count.preset, "base or large");
  count->add_option("--layers", inv.count.layers, "Layers in both towers");
  count->add_option("--dim", inv.count.dim, "Width of both towers");
  count->add_option("--heads", inv.count.heads, "Attention heads in both towers");
  count->add_option("--layers-txt", inv.count.layers_txt, "Text tower layers");
  count->add_option("--dim-txt", inv.count.dim_txt, "Text tower width");
  count->add_option("--lf", inv.count.lf, "Fusion start (image tower)");
  count->add_option("--m", inv.count.m, "Length of every prompt kind");
  count->add_option("--classes", inv.count.classes, "Number of classes");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return 1;
  }
  if (print_schema) {
    std::cout << run_config_schema().dump(2) << std::endl;
    return 0;
  }
  const auto subs = app.get_subcommands();
  if (subs.empty()) {
    std::cerr << "a subcommand is required\n\n" << app.help();
    return 1;
  }
  inv.command = subs.front()->get_name();
  if (*seed_opt) inv.seed = seed;
  if (*out_opt) {
    inv.out = out;
    inv.out_given = true;
  }

  try {
    setup_logging();
    return dispatch(inv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

int run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace pmf
