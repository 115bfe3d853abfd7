#pragma once

// Parameter checkpoints: one JSON document
//   {"format_version": 1, "model_kind": "...", "metadata": {...},
//    "parameters": {"<name>": {"shape": [...], "data": "<base64 LE float64>"}}}

#include <bit>
#include <boost/archive/iterators/base64_from_binary.hpp>
#include <boost/archive/iterators/binary_from_base64.hpp>
#include <boost/archive/iterators/transform_width.hpp>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>
#include <stdexcept>
#include <string>

#include "autodiff.hpp"

namespace crs {

using json = nlohmann::json;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kCheckpointFormatVersion = 1;

namespace base64 {

inline std::string encode(const std::string& bytes) {
  using namespace boost::archive::iterators;
  using It = base64_from_binary<transform_width<std::string::const_iterator, 6, 8>>;
  std::string out(It(bytes.begin()), It(bytes.end()));
  out.append((3 - bytes.size() % 3) % 3, '=');
  return out;
}

inline std::string decode(std::string text) {
  using namespace boost::archive::iterators;
  using It = transform_width<binary_from_base64<std::string::const_iterator>, 8, 6>;
  std::size_t pad = 0;
  while (!text.empty() && text.back() == '=') {
    text.pop_back();
    ++pad;
  }
  if (pad > 2 || (text.size() + pad) % 4 != 0) throw CheckpointError("base64: malformed input length");
  for (char c : text)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '+' || c == '/'))
      throw CheckpointError("base64: invalid character");
  // binary_from_base64 maps 'A' to zero bits, so padding with 'A' is inert.
  text.append(pad, 'A');
  std::string out(It(text.begin()), It(text.end()));
  out.resize(out.size() - pad);
  return out;
}

}  // namespace base64

inline std::string encode_doubles(std::span<const double> values) {
  std::string bytes(values.size() * 8, '\0');
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto bits = std::bit_cast<std::uint64_t>(values[i]);
    for (int b = 0; b < 8; ++b) bytes[i * 8 + b] = static_cast<char>((bits >> (8 * b)) & 0xFF);
  }
  return base64::encode(bytes);
}

inline std::vector<double> decode_doubles(const std::string& text) {
  const std::string bytes = base64::decode(text);
  if (bytes.size() % 8 != 0) throw CheckpointError("checkpoint: payload is not a whole number of float64 values");
  std::vector<double> out(bytes.size() / 8);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[i * 8 + b])) << (8 * b);
    out[i] = std::bit_cast<double>(bits);
  }
  return out;
}

struct Checkpoint {
  std::string model_kind;
  json metadata = json::object();
  ParameterSet parameters;
};

inline json to_json(const Checkpoint& ck) {
  json params = json::object();
  for (std::size_t i = 0; i < ck.parameters.size(); ++i) {
    const Tensor& t = ck.parameters[i];
    params[ck.parameters.name(i)] = {{"shape", t.shape()}, {"data", encode_doubles(t.values())}};
  }
  return {{"format_version", kCheckpointFormatVersion},
          {"model_kind", ck.model_kind},
          {"metadata", ck.metadata},
          {"parameters", std::move(params)}};
}

/// Parameter order is restored from the "order" metadata key when present,
/// otherwise alphabetical (JSON object order).
inline Checkpoint checkpoint_from_json(const json& doc, std::string_view expected_kind = {}) {
  if (!doc.is_object() || !doc.contains("format_version") || !doc.contains("model_kind") || !doc.contains("parameters"))
    throw CheckpointError("checkpoint: missing format_version/model_kind/parameters");
  if (doc.at("format_version").get<int>() != kCheckpointFormatVersion)
    throw CheckpointError("checkpoint: unsupported format_version " + doc.at("format_version").dump());
  Checkpoint ck;
  ck.model_kind = doc.at("model_kind").get<std::string>();
  if (!expected_kind.empty() && ck.model_kind != expected_kind)
    throw CheckpointError("checkpoint: expected model_kind '" + std::string(expected_kind) + "', found '" + ck.model_kind + "'");
  if (doc.contains("metadata")) ck.metadata = doc.at("metadata");
  const json& params = doc.at("parameters");
  std::vector<std::string> order;
  if (ck.metadata.contains("order")) {
    order = ck.metadata.at("order").get<std::vector<std::string>>();
  } else {
    for (auto it = params.begin(); it != params.end(); ++it) order.push_back(it.key());
  }
  for (const auto& name : order) {
    if (!params.contains(name)) throw CheckpointError("checkpoint: parameter '" + name + "' listed in order but absent");
    const json& p = params.at(name);
    Shape shape = p.at("shape").get<Shape>();
    std::vector<double> data = decode_doubles(p.at("data").get<std::string>());
    if (data.size() != shape_size(shape))
      throw CheckpointError("checkpoint: parameter '" + name + "' payload does not match shape " + shape_str(shape));
    ck.parameters.add(name, Tensor(std::move(shape), std::move(data)));
  }
  return ck;
}

inline Checkpoint make_checkpoint(std::string kind, const ParameterSet& params, json metadata = json::object()) {
  metadata["order"] = params.names();
  return Checkpoint{std::move(kind), std::move(metadata), params};
}

inline void write_json_file(const std::filesystem::path& path, const json& doc, int indent = -1) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << doc.dump(indent) << '\n';
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) { write_json_file(path, to_json(ck)); }

inline Checkpoint load_checkpoint(const std::filesystem::path& path, std::string_view expected_kind = {}) {
  return checkpoint_from_json(read_json_file(path), expected_kind);
}

}  // namespace crs
