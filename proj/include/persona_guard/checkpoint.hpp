#pragma once

#include <cstdint>
#include <cstring>
#include <map>
#include <string>
#include <vector>

#include "persona_guard/classifier.hpp"
#include "persona_guard/corpus.hpp"
#include "persona_guard/io.hpp"
#include "persona_guard/lm.hpp"

// Single-file archive: "PGAR", u32 format version, u32 entry count, then per
// entry u32 name length, name, u64 payload length, payload. Integers and
// tensor data are little-endian. Parameters live in the "params.bin" entry
// as named float32 tensors.

namespace persona_guard {

inline constexpr std::uint32_t kArchiveVersion = 1;

class Archive {
 public:
  void put(const std::string& name, std::string payload) { entries_[name] = std::move(payload); }

  bool has(const std::string& name) const { return entries_.contains(name); }

  const std::string& get(const std::string& name) const {
    const auto it = entries_.find(name);
    require(it != entries_.end(), ErrorCode::parse, "archive has no entry " + name);
    return it->second;
  }

  std::string serialize() const {
    std::string out = "PGAR";
    append(out, kArchiveVersion);
    append(out, static_cast<std::uint32_t>(entries_.size()));
    for (const auto& [name, payload] : entries_) {
      append(out, static_cast<std::uint32_t>(name.size()));
      out += name;
      append(out, static_cast<std::uint64_t>(payload.size()));
      out += payload;
    }
    return out;
  }

  static Archive parse(const std::string& bytes) {
    Archive a;
    std::size_t pos = 0;
    require(bytes.size() >= 12 && bytes.compare(0, 4, "PGAR") == 0, ErrorCode::parse, "not a checkpoint archive");
    pos = 4;
    const auto version = read<std::uint32_t>(bytes, pos);
    require(version == kArchiveVersion, ErrorCode::parse,
            "unsupported archive version " + std::to_string(version));
    const auto count = read<std::uint32_t>(bytes, pos);
    for (std::uint32_t i = 0; i < count; ++i) {
      const auto name_len = read<std::uint32_t>(bytes, pos);
      require(pos + name_len <= bytes.size(), ErrorCode::parse, "truncated archive");
      std::string name = bytes.substr(pos, name_len);
      pos += name_len;
      const auto len = read<std::uint64_t>(bytes, pos);
      require(pos + len <= bytes.size(), ErrorCode::parse, "truncated archive");
      a.entries_[name] = bytes.substr(pos, len);
      pos += len;
    }
    return a;
  }

  template <typename T>
  static void append(std::string& out, T value) {
    char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    out.append(buf, sizeof(T));
  }

  template <typename T>
  static T read(const std::string& bytes, std::size_t& pos) {
    require(pos + sizeof(T) <= bytes.size(), ErrorCode::parse, "truncated archive");
    T value;
    std::memcpy(&value, bytes.data() + pos, sizeof(T));
    pos += sizeof(T);
    return value;
  }

 private:
  std::map<std::string, std::string> entries_;
};

template <std::floating_point Real>
std::string encode_tensors(const ParamLayout& layout, std::span<const Real> values) {
  std::string out;
  Archive::append(out, static_cast<std::uint32_t>(layout.tensors().size()));
  for (const auto& t : layout.tensors()) {
    Archive::append(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    Archive::append(out, static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) Archive::append(out, static_cast<std::int32_t>(d));
    for (std::size_t i = 0; i < t.size; ++i) Archive::append(out, static_cast<float>(values[t.offset + i]));
  }
  return out;
}

/// Decodes tensors in the layout's order, checking names and shapes.
inline std::vector<float> decode_tensors(const ParamLayout& layout, const std::string& bytes) {
  std::size_t pos = 0;
  const auto count = Archive::read<std::uint32_t>(bytes, pos);
  require(count == layout.tensors().size(), ErrorCode::parse, "tensor count mismatch in checkpoint");
  std::vector<float> values(layout.total());
  for (const auto& t : layout.tensors()) {
    const auto name_len = Archive::read<std::uint32_t>(bytes, pos);
    require(pos + name_len <= bytes.size(), ErrorCode::parse, "truncated tensor blob");
    const std::string name = bytes.substr(pos, name_len);
    pos += name_len;
    require(name == t.name, ErrorCode::parse, "expected tensor " + t.name + ", found " + name);
    const auto ndim = Archive::read<std::uint32_t>(bytes, pos);
    require(ndim == t.shape.size(), ErrorCode::parse, "rank mismatch for tensor " + name);
    for (int d : t.shape)
      require(Archive::read<std::int32_t>(bytes, pos) == d, ErrorCode::parse, "shape mismatch for tensor " + name);
    for (std::size_t i = 0; i < t.size; ++i) values[t.offset + i] = Archive::read<float>(bytes, pos);
  }
  return values;
}

template <std::floating_point Real>
void save_chatbot(const fs::path& path, const ChatbotModel<Real>& model, const json& meta = json::object()) {
  Archive a;
  json manifest = {{"version", kArchiveVersion}, {"kind", "chatbot"}, {"meta", meta}};
  a.put("manifest.json", manifest.dump());
  a.put("config.json", to_json(model.config()).dump());
  a.put("vocab.jsonl", vocab_jsonl(model.vocab()));
  a.put("params.bin", encode_tensors(model.layout(), model.params()));
  write_file_atomic(path, a.serialize());
}

template <std::floating_point Real>
struct LoadedChatbot {
  ChatbotModel<Real> model;
  json meta;
};

inline json read_manifest(const Archive& a, std::string_view kind) {
  const auto manifest = json::parse(a.get("manifest.json"));
  require(manifest.contains("version"), ErrorCode::parse, "checkpoint manifest lacks a version");
  require(manifest.at("kind").get<std::string>() == kind, ErrorCode::parse,
          "checkpoint is not a " + std::string(kind));
  return manifest;
}

template <std::floating_point Real>
LoadedChatbot<Real> load_chatbot(const fs::path& path) {
  require(fs::exists(path), ErrorCode::missing_checkpoint, "missing checkpoint: " + path.string());
  const auto a = Archive::parse(read_file(path));
  const auto manifest = read_manifest(a, "chatbot");
  const auto config = lm_config_from_json(json::parse(a.get("config.json")));
  auto vocab = vocab_from_jsonl(a.get("vocab.jsonl"));
  const ChatbotModel<float> probe(config, vocab, 0);
  const auto values = decode_tensors(probe.layout(), a.get("params.bin"));
  return {ChatbotModel<Real>::from_params(config, std::move(vocab), values), manifest.value("meta", json::object())};
}

template <std::floating_point Real>
void save_classifier(const fs::path& path, const PersonaClassifier<Real>& clf, const PersonaCatalog& catalog,
                     const json& meta = json::object()) {
  Archive a;
  json manifest = {{"version", kArchiveVersion}, {"kind", "classifier"}, {"meta", meta}};
  a.put("manifest.json", manifest.dump());
  a.put("config.json", json{{"input_dim", clf.input_dim()},
                            {"hidden_dim", clf.hidden_dim()},
                            {"num_classes", clf.num_classes()}}
                           .dump());
  a.put("catalog.jsonl", catalog_jsonl(catalog));
  a.put("params.bin", encode_tensors(clf.layout(), clf.params()));
  write_file_atomic(path, a.serialize());
}

template <std::floating_point Real>
struct LoadedClassifier {
  PersonaClassifier<Real> model;
  PersonaCatalog catalog;
  json meta;
};

template <std::floating_point Real>
LoadedClassifier<Real> load_classifier(const fs::path& path) {
  require(fs::exists(path), ErrorCode::missing_checkpoint, "missing checkpoint: " + path.string());
  const auto a = Archive::parse(read_file(path));
  const auto manifest = read_manifest(a, "classifier");
  const auto cfg = json::parse(a.get("config.json"));
  const int in = cfg.at("input_dim").get<int>();
  const int hidden = cfg.at("hidden_dim").get<int>();
  const int classes = cfg.at("num_classes").get<int>();
  PersonaClassifier<float> probe(in, hidden, classes, 0);
  const auto values = decode_tensors(probe.layout(), a.get("params.bin"));
  PersonaCatalog catalog;
  {
    std::istringstream ss(a.get("catalog.jsonl"));
    std::string line;
    while (std::getline(ss, line))
      if (!line.empty()) catalog.entries.push_back(json::parse(line).at("text").get<std::string>());
  }
  return {PersonaClassifier<Real>::from_params(in, hidden, classes, values), std::move(catalog),
          manifest.value("meta", json::object())};
}

}  // namespace persona_guard
