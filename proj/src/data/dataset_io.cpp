#include <cstdio>
#include <fstream>

#include "pmf/data.hpp"

namespace pmf {

namespace {

void append_float(std::string& out, float v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(v));
  out += buf;
}

std::string record_line(const MultimodalRecord& r) {
  std::string s = "{\"image\":[";
  for (std::size_t i = 0; i < r.image.values.size(); ++i) {
    if (i) s += ',';
    append_float(s, r.image.values[i]);
  }
  s += "],\"shape\":[" + std::to_string(r.image.h) + "," + std::to_string(r.image.w) + "," +
       std::to_string(r.image.c) + "],\"tokens\":[";
  for (std::size_t i = 0; i < r.tokens.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(r.tokens[i]);
  }
  s += "],\"label\":";
  if (r.labels.empty()) {
    s += std::to_string(r.label);
  } else {
    s += '[';
    for (std::size_t i = 0; i < r.labels.size(); ++i) {
      if (i) s += ',';
      s += std::to_string(static_cast<int>(r.labels[i]));
    }
    s += ']';
  }
  s += '}';
  return s;
}

MultimodalRecord parse_record(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  if (!j.is_object()) throw Error("expected a JSON object");
  for (const char* key : {"image", "shape", "tokens", "label"}) {
    if (!j.contains(key)) throw Error(std::string("missing field '") + key + "'");
  }
  MultimodalRecord r;
  const auto shape = j.at("shape").get<std::vector<std::size_t>>();
  if (shape.size() != 3) throw Error("shape must have 3 entries [h, w, c]");
  r.image.h = shape[0];
  r.image.w = shape[1];
  r.image.c = shape[2];
  const auto& img = j.at("image");
  if (!img.is_array()) throw Error("image must be an array");
  if (img.size() != shape[0] * shape[1] * shape[2]) {
    throw Error("image has " + std::to_string(img.size()) + " values but shape [" +
                std::to_string(shape[0]) + "," + std::to_string(shape[1]) + "," +
                std::to_string(shape[2]) + "] needs " + std::to_string(shape[0] * shape[1] * shape[2]));
  }
  r.image.values.reserve(img.size());
  for (const auto& v : img) r.image.values.push_back(static_cast<float>(v.get<double>()));
  r.tokens = j.at("tokens").get<std::vector<std::int64_t>>();
  const auto& label = j.at("label");
  if (label.is_array()) {
    for (const auto& v : label) {
      const int b = v.get<int>();
      if (b != 0 && b != 1) throw Error("multi-label entries must be 0 or 1");
      r.labels.push_back(static_cast<std::uint8_t>(b));
    }
  } else {
    r.label = label.get<std::int64_t>();
  }
  return r;
}

}  // namespace

void write_dataset(const Dataset& records, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("write_dataset: cannot open " + path.string());
  for (const auto& r : records) out << record_line(r) << '\n';
  if (!out) throw Error("write_dataset: write failed for " + path.string());
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("read_dataset: cannot open " + path.string());
  Dataset out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(parse_record(line));
    } catch (const std::exception& e) {
      throw Error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace pmf
