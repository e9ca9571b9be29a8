#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "persona_guard/error.hpp"
#include "persona_guard/io.hpp"
#include "persona_guard/rng.hpp"

namespace persona_guard {

enum class Speaker { A, B };

inline std::string_view to_string(Speaker s) { return s == Speaker::A ? "A" : "B"; }

inline constexpr int kUnlabeled = -1;

struct Utterance {
  Speaker speaker = Speaker::A;
  std::string text;
  int persona_id = kUnlabeled;

  bool labeled() const { return persona_id != kUnlabeled; }
  bool operator==(const Utterance&) const = default;
};

struct Conversation {
  std::string dialog_id;
  std::vector<Utterance> turns;

  bool operator==(const Conversation&) const = default;
};

/// Persona sentences indexed by persona id (ids are the vector positions).
struct PersonaCatalog {
  std::vector<std::string> entries;

  int size() const { return static_cast<int>(entries.size()); }
  bool contains(int id) const { return id >= 0 && id < size(); }
  bool operator==(const PersonaCatalog&) const = default;
};

struct AlignedCorpus {
  std::vector<Conversation> conversations;
  PersonaCatalog catalog;

  bool empty() const { return conversations.empty(); }
  bool operator==(const AlignedCorpus&) const = default;
};

namespace detail {

inline bool blank(std::string_view text) {
  return std::all_of(text.begin(), text.end(),
                     [](unsigned char c) { return std::isspace(c) != 0; });
}

}  // namespace detail

inline void validate(const PersonaCatalog& catalog) {
  require(catalog.size() > 0, ErrorCode::validation, "persona catalog is empty");
  std::set<std::string> seen;
  for (int id = 0; id < catalog.size(); ++id) {
    require(seen.insert(catalog.entries[static_cast<std::size_t>(id)]).second,
            ErrorCode::validation,
            "duplicate persona sentence for persona_id " + std::to_string(id));
  }
}

inline void validate(const Conversation& conv, const PersonaCatalog& catalog) {
  require(conv.turns.size() >= 2, ErrorCode::validation,
          "dialog " + conv.dialog_id + " has fewer than 2 turns");
  for (const auto& turn : conv.turns) {
    require(!detail::blank(turn.text), ErrorCode::validation,
            "dialog " + conv.dialog_id + " has an empty turn");
    require(turn.persona_id >= kUnlabeled, ErrorCode::validation,
            "dialog " + conv.dialog_id + " has persona_id " +
                std::to_string(turn.persona_id) + " below -1");
    require(!turn.labeled() || catalog.contains(turn.persona_id), ErrorCode::validation,
            "dangling persona_id " + std::to_string(turn.persona_id) + " in dialog " +
                conv.dialog_id);
  }
}

inline void validate(const AlignedCorpus& corpus) {
  validate(corpus.catalog);
  for (const auto& conv : corpus.conversations) validate(conv, corpus.catalog);
}

// ---------------------------------------------------------------------------
// JSONL schema

inline json to_json(const Conversation& conv) {
  json turns = json::array();
  for (const auto& t : conv.turns) {
    turns.push_back({{"speaker", to_string(t.speaker)},
                     {"text", t.text},
                     {"persona_id", t.persona_id}});
  }
  return {{"dialog_id", conv.dialog_id}, {"turns", std::move(turns)}};
}

inline Conversation conversation_from_json(const json& j) {
  Conversation conv;
  conv.dialog_id = j.at("dialog_id").get<std::string>();
  for (const auto& t : j.at("turns")) {
    Utterance u;
    const auto speaker = t.at("speaker").get<std::string>();
    if (speaker == "A") {
      u.speaker = Speaker::A;
    } else if (speaker == "B") {
      u.speaker = Speaker::B;
    } else {
      throw std::invalid_argument("speaker must be \"A\" or \"B\"");
    }
    u.text = t.at("text").get<std::string>();
    u.persona_id = t.at("persona_id").get<int>();
    conv.turns.push_back(std::move(u));
  }
  return conv;
}

inline PersonaCatalog read_catalog(const fs::path& path) {
  std::map<int, std::string> rows;
  const auto lines = read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (detail::blank(lines[i])) continue;
    try {
      const auto j = json::parse(lines[i]);
      const int id = j.at("persona_id").get<int>();
      require(rows.emplace(id, j.at("text").get<std::string>()).second, ErrorCode::validation,
              "duplicate persona_id " + std::to_string(id) + " in catalog");
    } catch (const json::exception& e) {
      fail(ErrorCode::parse, path.string() + ":" + std::to_string(i + 1) + ": " + e.what());
    }
  }
  PersonaCatalog catalog;
  int expected = 0;
  for (auto& [id, text] : rows) {
    require(id == expected, ErrorCode::validation,
            "persona ids are not contiguous at " + std::to_string(expected));
    catalog.entries.push_back(std::move(text));
    ++expected;
  }
  validate(catalog);
  return catalog;
}

inline std::string catalog_jsonl(const PersonaCatalog& catalog) {
  std::vector<json> rows;
  for (int id = 0; id < catalog.size(); ++id)
    rows.push_back({{"persona_id", id}, {"text", catalog.entries[static_cast<std::size_t>(id)]}});
  return to_jsonl(rows);
}

inline std::string conversations_jsonl(const std::vector<Conversation>& conversations) {
  std::string out;
  for (const auto& c : conversations) {
    out += to_json(c).dump();
    out += '\n';
  }
  return out;
}

/// Default sidecar catalog location for a conversation file.
inline fs::path default_catalog_path(const fs::path& conversations_path) {
  return conversations_path.parent_path() / "personas.jsonl";
}

/// Loads a conversation JSONL file plus its persona catalog sidecar.
inline AlignedCorpus ingest_jsonl(const fs::path& path,
                                  std::optional<fs::path> catalog_path = std::nullopt) {
  require(fs::exists(path), ErrorCode::io, "no such file: " + path.string());
  AlignedCorpus corpus;
  corpus.catalog = read_catalog(catalog_path.value_or(default_catalog_path(path)));
  const auto lines = read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (detail::blank(lines[i])) continue;
    try {
      corpus.conversations.push_back(conversation_from_json(json::parse(lines[i])));
    } catch (const std::exception& e) {
      fail(ErrorCode::parse, path.string() + ":" + std::to_string(i + 1) + ": " + e.what());
    }
  }
  require(!corpus.empty(), ErrorCode::empty_corpus, "corpus is empty: " + path.string());
  validate(corpus);
  return corpus;
}

inline void emit_jsonl(const AlignedCorpus& corpus, const fs::path& path,
                       std::optional<fs::path> catalog_path = std::nullopt) {
  write_file_atomic(catalog_path.value_or(default_catalog_path(path)),
                    catalog_jsonl(corpus.catalog));
  write_file_atomic(path, conversations_jsonl(corpus.conversations));
}

// ---------------------------------------------------------------------------
// Synthetic corpus

struct SynthSpec {
  int num_personas = 16;
  int dialogs = 2000;
  int min_turns = 4;
  int max_turns = 6;
  double leak_strength = 0.9;
  /// Probability that a turn carries its speaker's persona label.
  double label_rate = 0.5;
  /// Probability that the turn after a cued turn opens by echoing that cue.
  double echo_rate = 0.5;
  std::uint64_t vocab_seed = 0;
};

inline json to_json(const SynthSpec& s) {
  return {{"num_personas", s.num_personas}, {"dialogs", s.dialogs},
          {"min_turns", s.min_turns},       {"max_turns", s.max_turns},
          {"leak_strength", s.leak_strength}, {"label_rate", s.label_rate},
          {"echo_rate", s.echo_rate},       {"vocab_seed", s.vocab_seed}};
}

inline SynthSpec synth_spec_from_json(const json& j) {
  SynthSpec s;
  s.num_personas = j.value("num_personas", s.num_personas);
  s.dialogs = j.value("dialogs", s.dialogs);
  s.min_turns = j.value("min_turns", s.min_turns);
  s.max_turns = j.value("max_turns", s.max_turns);
  s.leak_strength = j.value("leak_strength", s.leak_strength);
  s.label_rate = j.value("label_rate", s.label_rate);
  s.echo_rate = j.value("echo_rate", s.echo_rate);
  s.vocab_seed = j.value("vocab_seed", s.vocab_seed);
  return s;
}

namespace synth {

inline constexpr std::array<std::string_view, 32> kCueWords = {
    "skiing",  "guitar",    "cats",     "pizza",   "hiking",   "jazz",    "painting",
    "chess",   "surfing",   "baking",   "football", "poetry",  "gardening", "yoga",
    "camping", "photography", "dogs",   "sushi",   "running",  "violin",  "knitting",
    "fishing", "tennis",    "anime",    "cycling", "dancing",  "coding",  "horses",
    "opera",   "climbing",  "swimming", "karaoke"};

inline constexpr std::array<std::string_view, 16> kNeutralTopics = {
    "the weather", "movies",   "coffee",    "the news",   "my job",   "school",
    "the city",    "my day",   "breakfast", "the park",   "music",    "the beach",
    "my family",   "weekends", "travel",    "the market"};

inline constexpr std::array<std::string_view, 10> kStatements = {
    "i really love {} .",
    "my favorite thing is {} .",
    "i spend my free time on {} .",
    "lately i have been into {} .",
    "i think about {} a lot .",
    "my friends know me for {} .",
    "nothing beats {} on a sunday .",
    "i could talk about {} all day .",
    "{} makes me happy .",
    "i grew up with {} ."};

inline constexpr std::array<std::string_view, 4> kQuestions = {
    "do you like {} ?", "have you ever tried {} ?", "what do you think about {} ?",
    "how do you feel about {} ?"};

inline constexpr std::array<std::string_view, 6> kOpeners = {"yes ,", "oh ,", "well ,",
                                                             "nice ,", "haha ,", "hmm ,"};

inline constexpr std::array<std::string_view, 3> kAnswerOpeners = {"yes ,", "no ,", "maybe ,"};

inline std::string cue_word(int persona) {
  if (persona < static_cast<int>(kCueWords.size()))
    return std::string(kCueWords[static_cast<std::size_t>(persona)]);
  return "hobby" + std::to_string(persona);
}

inline std::string fill(std::string_view pattern, std::string_view topic) {
  std::string out(pattern);
  const auto pos = out.find("{}");
  out.replace(pos, 2, topic);
  return out;
}

}  // namespace synth

/// Every persona has one cue word that is deterministic in its id.
inline std::string persona_cue(int persona_id) { return synth::cue_word(persona_id); }

inline PersonaCatalog synthetic_catalog(int num_personas) {
  PersonaCatalog catalog;
  for (int p = 0; p < num_personas; ++p)
    catalog.entries.push_back("i love " + synth::cue_word(p) + " .");
  return catalog;
}

/// Generates a persona-annotated dialog corpus. Each speaker holds one
/// persona; a labeled turn mentions its speaker's cue word with the
/// configured leak strength. The partner may open the next turn by echoing
/// that cue; otherwise unlabeled turns never mention any cue.
inline AlignedCorpus synthesize_corpus(const SynthSpec& spec) {
  require(spec.num_personas >= 2, ErrorCode::config, "num_personas must be at least 2");
  require(spec.dialogs >= 1, ErrorCode::config, "dialogs must be positive");
  require(spec.min_turns >= 2 && spec.max_turns >= spec.min_turns, ErrorCode::config,
          "turn range must satisfy 2 <= min_turns <= max_turns");
  require(spec.leak_strength >= 0.0 && spec.leak_strength <= 1.0, ErrorCode::config,
          "leak_strength must be in [0, 1]");
  require(spec.label_rate > 0.0 && spec.label_rate <= 1.0, ErrorCode::config,
          "label_rate must be in (0, 1]");
  require(spec.echo_rate >= 0.0 && spec.echo_rate <= 1.0, ErrorCode::config, "echo_rate must be in [0, 1]");

  Rng rng(spec.vocab_seed);
  AlignedCorpus corpus;
  corpus.catalog = synthetic_catalog(spec.num_personas);

  struct Slot {
    std::size_t dialog;
    std::size_t turn;
  };
  std::vector<Slot> labeled_slots;

  // First pass: structure and labels.
  for (int d = 0; d < spec.dialogs; ++d) {
    Conversation conv;
    conv.dialog_id = "synth-" + std::to_string(d);
    const int persona_a = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.num_personas)));
    const int persona_b = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.num_personas)));
    const int turns = rng.range(spec.min_turns, spec.max_turns);
    for (int t = 0; t < turns; ++t) {
      Utterance u;
      u.speaker = (t % 2 == 0) ? Speaker::A : Speaker::B;
      if (rng.bernoulli(spec.label_rate)) {
        u.persona_id = u.speaker == Speaker::A ? persona_a : persona_b;
        labeled_slots.push_back({static_cast<std::size_t>(d), static_cast<std::size_t>(t)});
      }
      conv.turns.push_back(std::move(u));
    }
    corpus.conversations.push_back(std::move(conv));
  }

  // Exactly round(leak * labeled) labeled turns carry the cue.
  std::vector<std::uint8_t> cued(labeled_slots.size(), 0);
  const auto n_cued = static_cast<std::size_t>(
      std::llround(spec.leak_strength * static_cast<double>(labeled_slots.size())));
  std::vector<std::size_t> order(labeled_slots.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  for (std::size_t i = 0; i < n_cued; ++i) cued[order[i]] = 1;
  std::map<std::pair<std::size_t, std::size_t>, bool> cue_of;
  for (std::size_t i = 0; i < labeled_slots.size(); ++i)
    cue_of[{labeled_slots[i].dialog, labeled_slots[i].turn}] = cued[i] != 0;

  // Second pass: surface text. A question is followed by an answer opener.
  for (std::size_t d = 0; d < corpus.conversations.size(); ++d) {
    auto& conv = corpus.conversations[d];
    bool previous_question = false;
    std::string previous_cue;
    for (std::size_t t = 0; t < conv.turns.size(); ++t) {
      auto& u = conv.turns[t];
      const auto it = cue_of.find({d, t});
      const bool has_cue = it != cue_of.end() && it->second;
      std::string echo;
      if (!previous_cue.empty() && rng.bernoulli(spec.echo_rate)) echo = previous_cue + " ? ";
      previous_cue = has_cue ? synth::cue_word(u.persona_id) : std::string();
      const std::string topic =
          has_cue ? synth::cue_word(u.persona_id)
                  : std::string(synth::kNeutralTopics[rng.below(synth::kNeutralTopics.size())]);
      std::string text;
      if (previous_question) {
        text = std::string(synth::kAnswerOpeners[rng.below(synth::kAnswerOpeners.size())]) + " " +
               synth::fill(synth::kStatements[rng.below(synth::kStatements.size())], topic);
        previous_question = false;
      } else if (rng.bernoulli(0.35)) {
        text = synth::fill(synth::kQuestions[rng.below(synth::kQuestions.size())], topic);
        previous_question = true;
      } else {
        text = std::string(synth::kOpeners[rng.below(synth::kOpeners.size())]) + " " +
               synth::fill(synth::kStatements[rng.below(synth::kStatements.size())], topic);
      }
      u.text = echo + text;
    }
  }
  validate(corpus);
  return corpus;
}

// ---------------------------------------------------------------------------
// Splits

struct SplitSpec {
  std::array<double, 3> ratios{0.8, 0.1, 0.1};
  std::uint64_t seed = 0;
  std::optional<std::set<int>> adversary_only_labels;
};

namespace detail {

/// Largest-remainder apportionment of n items to the given ratios.
inline std::array<std::size_t, 3> apportion(std::size_t n, const std::array<double, 3>& ratios) {
  std::array<std::size_t, 3> sizes{};
  std::array<double, 3> remainder{};
  std::size_t assigned = 0;
  for (std::size_t s = 0; s < 3; ++s) {
    const double exact = ratios[s] * static_cast<double>(n);
    sizes[s] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    remainder[s] = exact - static_cast<double>(sizes[s]);
    assigned += sizes[s];
  }
  while (assigned < n) {
    std::size_t best = 0;
    for (std::size_t s = 1; s < 3; ++s)
      if (remainder[s] > remainder[best] + 1e-12) best = s;
    ++sizes[best];
    remainder[best] = -1.0;
    ++assigned;
  }
  return sizes;
}

inline std::map<int, int> label_counts(const Conversation& conv) {
  std::map<int, int> counts;
  for (const auto& t : conv.turns)
    if (t.labeled()) ++counts[t.persona_id];
  return counts;
}

inline AlignedCorpus subset(const AlignedCorpus& corpus, const std::vector<std::size_t>& idx) {
  AlignedCorpus out;
  out.catalog = corpus.catalog;
  std::vector<std::size_t> sorted = idx;
  std::sort(sorted.begin(), sorted.end());
  for (auto i : sorted) out.conversations.push_back(corpus.conversations[i]);
  return out;
}

/// Random pairwise swaps between splits, kept when they bring per-label
/// counts closer to ratio * global count in squared relative terms. Split
/// sizes never change, and a swap only touches the labels of the two
/// conversations involved.
inline void refine_by_swaps(std::array<std::vector<std::size_t>, 3>& parts, const std::vector<std::map<int, int>>& labels,
                            const std::array<double, 3>& ratios, Rng& rng) {
  std::map<int, double> global;
  std::array<std::map<int, double>, 3> count;
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t i : parts[s])
      for (auto [id, c] : labels[i]) {
        count[s][id] += c;
        global[id] += c;
      }
  if (global.empty()) return;
  const auto term = [&](std::size_t s, int id, double delta) {
    const double target = ratios[s] * global[id];
    if (target <= 0.0) return 0.0;
    const double dev = (count[s][id] + delta - target) / target;
    return dev * dev;
  };
  // Cost change of moving `out` from split sa to sb and `in` back.
  const auto delta = [&](const std::map<int, int>& out, const std::map<int, int>& in, std::size_t sa, std::size_t sb) {
    std::map<int, double> net;
    for (auto [id, c] : out) net[id] += c;
    for (auto [id, c] : in) net[id] -= c;
    double d = 0.0;
    for (auto [id, c] : net) {
      if (c == 0.0) continue;
      d += term(sa, id, -c) - term(sa, id, 0.0) + term(sb, id, c) - term(sb, id, 0.0);
    }
    return d;
  };
  // Swaps must win by a margin so near-ties decide the same way under any
  // floating-point contraction.
  constexpr double kSwapGain = 1e-9;
  std::size_t n = 0;
  for (const auto& p : parts) n += p.size();
  for (std::size_t trial = 0; trial < 30 * n; ++trial) {
    const auto sa = rng.below(3), sb = rng.below(3);
    if (sa == sb || parts[sa].empty() || parts[sb].empty()) continue;
    auto& ia = parts[sa][rng.below(parts[sa].size())];
    auto& ib = parts[sb][rng.below(parts[sb].size())];
    if (labels[ia] == labels[ib] || delta(labels[ia], labels[ib], sa, sb) > -kSwapGain) continue;
    for (auto [id, c] : labels[ia]) {
      count[sa][id] -= c;
      count[sb][id] += c;
    }
    for (auto [id, c] : labels[ib]) {
      count[sb][id] -= c;
      count[sa][id] += c;
    }
    std::swap(ia, ib);
  }
}

}  // namespace detail

/// Conversation-level train/val/test partition. Iterative stratification:
/// the label with the fewest unplaced turns is handled first, and each of its
/// conversations goes to the split that still wants the most of that label.
inline std::tuple<AlignedCorpus, AlignedCorpus, AlignedCorpus> split(const AlignedCorpus& corpus,
                                                                      const SplitSpec& spec) {
  require(!corpus.empty(), ErrorCode::empty_corpus, "cannot split an empty corpus");
  double total = 0.0;
  for (double r : spec.ratios) {
    require(r >= 0.0, ErrorCode::config, "split ratios must be nonnegative");
    total += r;
  }
  require(std::abs(total - 1.0) < 1e-9, ErrorCode::config, "split ratios must sum to 1");

  const std::size_t n = corpus.conversations.size();
  const auto capacity = detail::apportion(n, spec.ratios);

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(spec.seed);
  rng.shuffle(order);
  std::vector<std::map<int, int>> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = detail::label_counts(corpus.conversations[i]);

  std::map<int, double> unplaced;
  for (const auto& l : labels)
    for (auto [id, c] : l) unplaced[id] += c;
  std::array<std::map<int, double>, 3> wanted;
  for (std::size_t s = 0; s < 3; ++s)
    for (auto [id, c] : unplaced) wanted[s][id] = spec.ratios[s] * c;

  std::array<std::vector<std::size_t>, 3> parts;
  std::vector<bool> placed(n, false);
  const auto room = [&](std::size_t s) {
    return static_cast<double>(capacity[s] - parts[s].size()) / static_cast<double>(std::max<std::size_t>(capacity[s], 1));
  };
  const auto place = [&](std::size_t i, std::size_t s) {
    parts[s].push_back(i);
    placed[i] = true;
    for (auto [id, c] : labels[i]) {
      wanted[s][id] -= c;
      unplaced[id] -= c;
    }
  };
  const auto pick = [&](std::optional<int> label) {
    int best = -1;
    for (std::size_t s = 0; s < 3; ++s) {
      if (parts[s].size() >= capacity[s]) continue;
      if (best < 0) {
        best = static_cast<int>(s);
        continue;
      }
      const auto b = static_cast<std::size_t>(best);
      const double ws = label ? wanted[s][*label] : 0.0, wb = label ? wanted[b][*label] : 0.0;
      if (ws > wb + 1e-9 || (std::abs(ws - wb) <= 1e-9 && room(s) > room(b) + 1e-12)) best = static_cast<int>(s);
    }
    return static_cast<std::size_t>(best);
  };

  while (true) {
    std::optional<int> rarest;
    for (auto [id, c] : unplaced)
      if (c > 0 && (!rarest || c < unplaced[*rarest])) rarest = id;
    if (!rarest) break;
    const int label = *rarest;
    for (std::size_t i : order)
      if (!placed[i] && labels[i].contains(label)) place(i, pick(label));
  }
  for (std::size_t i : order)
    if (!placed[i]) place(i, pick(std::nullopt));
  detail::refine_by_swaps(parts, labels, spec.ratios, rng);
  return {detail::subset(corpus, parts[0]), detail::subset(corpus, parts[1]),
          detail::subset(corpus, parts[2])};
}

struct ImbalancedCounts {
  std::size_t defender = 0;
  std::size_t adversary = 0;
  std::size_t test = 0;
};

struct ImbalancedSplit {
  AlignedCorpus defender;
  AlignedCorpus adversary;
  AlignedCorpus test;
};

/// Defender / adversary / test split in which the defender never sees a
/// conversation carrying any adversary-only label.
inline ImbalancedSplit imbalanced_split(const AlignedCorpus& corpus,
                                        const std::set<int>& adversary_only_labels,
                                        const ImbalancedCounts& counts, std::uint64_t seed = 0) {
  for (int id : adversary_only_labels)
    require(corpus.catalog.contains(id), ErrorCode::config,
            "adversary-only label " + std::to_string(id) + " is not in the catalog");
  const std::size_t n = corpus.conversations.size();
  require(counts.defender + counts.adversary + counts.test <= n, ErrorCode::split,
          "requested " + std::to_string(counts.defender + counts.adversary + counts.test) +
              " conversations but corpus has " + std::to_string(n));

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);

  std::vector<std::size_t> test(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(counts.test));
  std::vector<std::size_t> restricted;
  std::vector<std::size_t> eligible;
  for (std::size_t k = counts.test; k < n; ++k) {
    const auto i = order[k];
    bool has_private = false;
    for (const auto& t : corpus.conversations[i].turns)
      if (t.labeled() && adversary_only_labels.contains(t.persona_id)) has_private = true;
    (has_private ? restricted : eligible).push_back(i);
  }
  require(eligible.size() >= counts.defender, ErrorCode::split,
          "defender split short by " + std::to_string(counts.defender - eligible.size()) +
              " conversations");
  std::vector<std::size_t> defender(eligible.begin(),
                                    eligible.begin() + static_cast<std::ptrdiff_t>(counts.defender));
  std::vector<std::size_t> adversary = restricted;
  for (std::size_t k = counts.defender; k < eligible.size(); ++k) adversary.push_back(eligible[k]);
  if (adversary.size() < counts.adversary) {
    fail(ErrorCode::split, "adversary split short by " +
                               std::to_string(counts.adversary - adversary.size()) +
                               " conversations");
  }
  // Keep conversations with private labels first, then top up from the rest.
  adversary.resize(counts.adversary);
  return {detail::subset(corpus, defender), detail::subset(corpus, adversary),
          detail::subset(corpus, test)};
}

// ---------------------------------------------------------------------------
// Statistics

struct CorpusStats {
  std::size_t dialogs = 0;
  std::size_t utterances = 0;
  std::size_t unique_personas = 0;
  /// Distinct (dialog, persona) pairs.
  std::size_t total_personas = 0;
  std::size_t labeled_turns = 0;
  double avg_turns_per_dialog = 0.0;
  double avg_labeled_turns_per_dialog = 0.0;
  double avg_words_per_turn = 0.0;
};

inline CorpusStats stats(const AlignedCorpus& corpus) {
  CorpusStats s;
  std::set<int> unique;
  std::size_t words = 0;
  for (const auto& conv : corpus.conversations) {
    ++s.dialogs;
    std::set<int> in_dialog;
    for (const auto& t : conv.turns) {
      ++s.utterances;
      std::istringstream ss(t.text);
      std::string w;
      while (ss >> w) ++words;
      if (t.labeled()) {
        ++s.labeled_turns;
        unique.insert(t.persona_id);
        in_dialog.insert(t.persona_id);
      }
    }
    s.total_personas += in_dialog.size();
  }
  s.unique_personas = unique.size();
  if (s.dialogs > 0) {
    s.avg_turns_per_dialog = static_cast<double>(s.utterances) / static_cast<double>(s.dialogs);
    s.avg_labeled_turns_per_dialog =
        static_cast<double>(s.labeled_turns) / static_cast<double>(s.dialogs);
  }
  if (s.utterances > 0)
    s.avg_words_per_turn = static_cast<double>(words) / static_cast<double>(s.utterances);
  return s;
}

inline json to_json(const CorpusStats& s) {
  return {{"dialogs", s.dialogs},
          {"utterances", s.utterances},
          {"unique_personas", s.unique_personas},
          {"total_personas", s.total_personas},
          {"labeled_turns", s.labeled_turns},
          {"avg_turns_per_dialog", s.avg_turns_per_dialog},
          {"avg_labeled_turns_per_dialog", s.avg_labeled_turns_per_dialog},
          {"avg_words_per_turn", s.avg_words_per_turn}};
}

}  // namespace persona_guard
