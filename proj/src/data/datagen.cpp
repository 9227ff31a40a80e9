#include <algorithm>
#include <cmath>

#include "pmf/data.hpp"
#include "pmf/rng.hpp"

namespace pmf {

const char* task_kind_name(TaskKind k) {
  switch (k) {
    case TaskKind::xor2: return "xor2";
    case TaskKind::joint4: return "joint4";
    case TaskKind::multilabel2: return "multilabel2";
  }
  return "?";
}

TaskKind parse_task_kind(const std::string& name) {
  for (auto k : {TaskKind::xor2, TaskKind::joint4, TaskKind::multilabel2}) {
    if (name == task_kind_name(k)) return k;
  }
  throw Error("unknown task kind '" + name + "' (expected xor2, joint4, multilabel2)");
}

void TaskSpec::validate() const {
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) {
    throw Error("task spec: noise_sigma must be finite and >= 0");
  }
  if (!(mu > 0.0) || !std::isfinite(mu)) throw Error("task spec: mu must be finite and > 0");
  if (patch == 0 || image_h % patch != 0 || image_w % patch != 0 || channels == 0) {
    throw Error("task spec: image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                " is not tiled by patch " + std::to_string(patch));
  }
  if (signal_patch >= (image_h / patch) * (image_w / patch)) {
    throw Error("task spec: signal_patch " + std::to_string(signal_patch) + " out of range");
  }
  if (min_len < 1 || min_len > max_len) throw Error("task spec: need 1 <= min_len <= max_len");
  if (filler_lo < 0 || static_cast<std::size_t>(filler_lo) >= vocab) {
    throw Error("task spec: filler range [filler_lo, vocab) is empty");
  }
  if (marker < 0 || static_cast<std::size_t>(marker) >= vocab || marker >= filler_lo) {
    throw Error("task spec: marker must be in [0, filler_lo)");
  }
}

std::size_t TaskSpec::n_classes() const {
  switch (kind) {
    case TaskKind::xor2: return 2;
    case TaskKind::joint4: return 4;
    case TaskKind::multilabel2: return 2;
  }
  return 0;
}

EncoderConfig TaskSpec::image_encoder() const {
  EncoderConfig c = EncoderConfig::image_default();
  c.image_h = image_h;
  c.image_w = image_w;
  c.channels = channels;
  c.patch = patch;
  return c;
}

EncoderConfig TaskSpec::text_encoder() const {
  EncoderConfig c = EncoderConfig::text_default();
  c.vocab = vocab;
  c.max_len = max_len;
  return c;
}

void to_json(nlohmann::json& j, const TaskSpec& s) {
  j = nlohmann::json{{"kind", task_kind_name(s.kind)},
                     {"noise_sigma", s.noise_sigma},
                     {"mu", s.mu},
                     {"image_h", s.image_h},
                     {"image_w", s.image_w},
                     {"channels", s.channels},
                     {"patch", s.patch},
                     {"signal_patch", s.signal_patch},
                     {"vocab", s.vocab},
                     {"min_len", s.min_len},
                     {"max_len", s.max_len},
                     {"marker", s.marker},
                     {"filler_lo", s.filler_lo}};
}

void from_json(const nlohmann::json& j, TaskSpec& s) {
  s = TaskSpec{};
  s.kind = parse_task_kind(j.at("kind").get<std::string>());
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("noise_sigma", s.noise_sigma);
  get("mu", s.mu);
  get("image_h", s.image_h);
  get("image_w", s.image_w);
  get("channels", s.channels);
  get("patch", s.patch);
  get("signal_patch", s.signal_patch);
  get("vocab", s.vocab);
  get("min_len", s.min_len);
  get("max_len", s.max_len);
  get("marker", s.marker);
  get("filler_lo", s.filler_lo);
}

namespace {

MultimodalRecord make_record(const TaskSpec& spec, Rng rng) {
  const int a = rng.bernoulli() ? 1 : 0;
  const int b = rng.bernoulli() ? 1 : 0;

  MultimodalRecord r;
  Image& im = r.image;
  im.h = spec.image_h;
  im.w = spec.image_w;
  im.c = spec.channels;
  im.values.resize(im.h * im.w * im.c);
  const std::size_t gx = spec.image_w / spec.patch;
  const std::size_t n_patches = (spec.image_h / spec.patch) * gx;
  std::vector<double> sign(n_patches);
  for (std::size_t p = 0; p < n_patches; ++p) {
    sign[p] = p == spec.signal_patch ? (a ? 1.0 : -1.0) : (rng.bernoulli() ? 1.0 : -1.0);
  }
  for (std::size_t y = 0; y < im.h; ++y) {
    for (std::size_t x = 0; x < im.w; ++x) {
      const double m = spec.mu * sign[(y / spec.patch) * gx + x / spec.patch];
      for (std::size_t ch = 0; ch < im.c; ++ch) {
        im.values[(y * im.w + x) * im.c + ch] = static_cast<float>(m + spec.noise_sigma * rng.normal());
      }
    }
  }

  const std::size_t len = spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
  const auto n_fill = static_cast<std::uint64_t>(spec.vocab) - static_cast<std::uint64_t>(spec.filler_lo);
  r.tokens.resize(len);
  for (auto& t : r.tokens) t = spec.filler_lo + static_cast<std::int64_t>(rng.below(n_fill));
  if (b) r.tokens[rng.below(len)] = spec.marker;

  switch (spec.kind) {
    case TaskKind::xor2: r.label = a ^ b; break;
    case TaskKind::joint4: r.label = 2 * a + b; break;
    case TaskKind::multilabel2:
      r.labels = {static_cast<std::uint8_t>(a), static_cast<std::uint8_t>(b)};
      break;
  }
  return r;
}

}  // namespace

Dataset generate_dataset(const TaskSpec& spec, std::size_t n, std::uint64_t seed) {
  spec.validate();
  if (n < 1) throw Error("generate_dataset: n must be >= 1");
  Rng root = Rng(seed).fork("records");
  Dataset out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(make_record(spec, root.fork(i)));
  return out;
}

int decode_image_bit(const Image& image, const TaskSpec& spec) {
  const std::size_t gx = spec.image_w / spec.patch;
  const std::size_t py = spec.signal_patch / gx, px = spec.signal_patch % gx;
  double total = 0.0;
  for (std::size_t y = py * spec.patch; y < (py + 1) * spec.patch; ++y) {
    for (std::size_t x = px * spec.patch; x < (px + 1) * spec.patch; ++x) {
      for (std::size_t ch = 0; ch < image.c; ++ch) total += image.values[(y * image.w + x) * image.c + ch];
    }
  }
  return total > 0.0 ? 1 : 0;
}

int decode_text_bit(std::span<const std::int64_t> tokens, const TaskSpec& spec) {
  return std::find(tokens.begin(), tokens.end(), spec.marker) != tokens.end() ? 1 : 0;
}

std::int64_t analytic_label(const MultimodalRecord& r, const TaskSpec& spec) {
  const int a = decode_image_bit(r.image, spec), b = decode_text_bit(r.tokens, spec);
  return spec.kind == TaskKind::xor2 ? (a ^ b) : 2 * a + b;
}

double analytic_accuracy(const Dataset& data, const TaskSpec& spec) {
  if (data.empty()) throw Error("analytic_accuracy: empty dataset");
  std::size_t hits = 0;
  for (const auto& r : data) {
    if (spec.multi_label()) {
      hits += r.labels.size() == 2 && decode_image_bit(r.image, spec) == r.labels[0] &&
              decode_text_bit(r.tokens, spec) == r.labels[1];
    } else {
      hits += analytic_label(r, spec) == r.label;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

std::vector<std::int64_t> modality_bits(const Dataset& data, Modality m) {
  std::vector<std::int64_t> out;
  out.reserve(data.size());
  for (const auto& r : data) {
    if (r.labels.size() != 2) throw Error("modality_bits: records must carry the two task bits (multilabel2)");
    out.push_back(r.labels[m == Modality::image ? 0 : 1]);
  }
  return out;
}

std::vector<double> compute_class_weights(std::span<const std::int64_t> labels,
                                          std::size_t n_classes) {
  if (n_classes == 0) throw Error("compute_class_weights: n_classes must be positive");
  std::vector<std::size_t> counts(n_classes, 0);
  for (auto y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= n_classes) {
      throw Error("compute_class_weights: label " + std::to_string(y) + " out of range");
    }
    ++counts[static_cast<std::size_t>(y)];
  }
  std::vector<double> w(n_classes);
  for (std::size_t c = 0; c < n_classes; ++c) {
    if (counts[c] == 0) {
      throw Error("compute_class_weights: class " + std::to_string(c) +
                  " has no samples; disable class weighting for this data");
    }
    w[c] = static_cast<double>(labels.size()) / static_cast<double>(n_classes * counts[c]);
  }
  return w;
}

std::vector<double> compute_label_weights(const Dataset& data, std::size_t n_labels) {
  std::vector<std::size_t> counts(n_labels, 0);
  for (const auto& r : data) {
    if (r.labels.size() != n_labels) throw Error("compute_label_weights: label vector length mismatch");
    for (std::size_t c = 0; c < n_labels; ++c) counts[c] += r.labels[c];
  }
  std::vector<double> w(n_labels);
  for (std::size_t c = 0; c < n_labels; ++c) {
    if (counts[c] == 0) {
      throw Error("compute_label_weights: label " + std::to_string(c) +
                  " is never on; disable class weighting for this data");
    }
    w[c] = static_cast<double>(data.size()) / static_cast<double>(n_labels * counts[c]);
  }
  return w;
}

}  // namespace pmf
