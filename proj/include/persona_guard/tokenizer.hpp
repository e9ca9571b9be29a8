#pragma once

#include <algorithm>
#include <cctype>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "persona_guard/corpus.hpp"

namespace persona_guard {

/// Word-level vocabulary. Ids 0..2 are reserved for the special tokens.
class Vocab {
 public:
  static constexpr int kSeparator = 0;
  static constexpr int kPad = 1;
  static constexpr int kUnknown = 2;
  static constexpr std::string_view kSeparatorText = "<|endoftext|>";
  static constexpr std::string_view kPadText = "<pad>";
  static constexpr std::string_view kUnknownText = "<unk>";

  Vocab() {
    add(std::string(kSeparatorText));
    add(std::string(kPadText));
    add(std::string(kUnknownText));
  }

  int size() const { return static_cast<int>(tokens_.size()); }

  int id(std::string_view token) const {
    const auto it = index_.find(std::string(token));
    return it == index_.end() ? kUnknown : it->second;
  }

  const std::string& token(int id) const {
    require(id >= 0 && id < size(), ErrorCode::validation,
            "token id out of range: " + std::to_string(id));
    return tokens_[static_cast<std::size_t>(id)];
  }

  bool contains(std::string_view token) const { return index_.contains(std::string(token)); }

  int add(const std::string& token) {
    const auto [it, inserted] = index_.emplace(token, size());
    if (inserted) tokens_.push_back(token);
    return it->second;
  }

  const std::vector<std::string>& tokens() const { return tokens_; }

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

/// Lowercases and splits on whitespace; each punctuation character is its
/// own token.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) out.push_back(std::move(current));
    current.clear();
  };
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      flush();
    } else if (std::ispunct(c) && c != '\'' && c != '_') {
      flush();
      out.emplace_back(1, static_cast<char>(c));
    } else {
      current.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return out;
}

inline std::string detokenize(const std::vector<std::string>& tokens) {
  std::string out;
  for (const auto& t : tokens) {
    if (!out.empty()) out += ' ';
    out += t;
  }
  return out;
}

struct VocabOptions {
  int max_size = 4096;
  int min_count = 1;
};

/// Builds a frequency-capped vocabulary. Ties in frequency are ordered
/// lexicographically so the result is independent of corpus order.
inline Vocab build_vocab(const AlignedCorpus& corpus, const VocabOptions& options = {}) {
  std::map<std::string, int> counts;
  for (const auto& conv : corpus.conversations)
    for (const auto& turn : conv.turns)
      for (auto& tok : tokenize(turn.text)) ++counts[tok];
  for (const auto& sentence : corpus.catalog.entries)
    for (auto& tok : tokenize(sentence)) ++counts[tok];

  std::vector<std::pair<std::string, int>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocab vocab;
  for (const auto& [tok, count] : ranked) {
    if (vocab.size() >= options.max_size) break;
    if (count < options.min_count) break;
    vocab.add(tok);
  }
  return vocab;
}

inline std::vector<int> encode_text(const Vocab& vocab, std::string_view text) {
  std::vector<int> ids;
  for (const auto& tok : tokenize(text)) ids.push_back(vocab.id(tok));
  return ids;
}

inline std::string decode_ids(const Vocab& vocab, const std::vector<int>& ids) {
  std::vector<std::string> toks;
  for (int id : ids) toks.push_back(vocab.token(id));
  return detokenize(toks);
}

inline std::string vocab_jsonl(const Vocab& vocab) {
  std::vector<json> rows;
  for (int i = 0; i < vocab.size(); ++i) rows.push_back({{"id", i}, {"token", vocab.token(i)}});
  return to_jsonl(rows);
}

inline Vocab vocab_from_jsonl(std::string_view text) {
  Vocab vocab;
  std::istringstream in{std::string(text)};
  std::string line;
  int expected = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = json::parse(line);
    const int id = j.at("id").get<int>();
    require(id == expected, ErrorCode::parse, "vocab ids must be contiguous");
    const int got = vocab.add(j.at("token").get<std::string>());
    require(got == id, ErrorCode::parse, "vocab special tokens out of place");
    ++expected;
  }
  return vocab;
}

}  // namespace persona_guard
