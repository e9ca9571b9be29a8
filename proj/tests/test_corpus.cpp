#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "persona_guard.hpp"
#include "support/fixtures.hpp"

namespace pg = persona_guard;
using pg::ErrorCode;

namespace {

pg::SynthSpec small_spec(double leak, int dialogs = 200) {
  pg::SynthSpec s;
  s.dialogs = dialogs;
  s.leak_strength = leak;
  s.vocab_seed = 11;
  return s;
}

bool contains_word(const std::string& text, const std::string& word) {
  for (const auto& t : pg::tokenize(text))
    if (t == word) return true;
  return false;
}

std::set<int> labels_of(const pg::AlignedCorpus& c) {
  std::set<int> out;
  for (const auto& conv : c.conversations)
    for (const auto& t : conv.turns)
      if (t.labeled()) out.insert(t.persona_id);
  return out;
}

}  // namespace

TEST(Ingest, HandFixtureHasOneLabeledTurn) {
  pg::testing::TempDir dir;
  pg::write_file_atomic(dir.path / "personas.jsonl", pg::catalog_jsonl({{"a .", "b .", "c .", "d ."}}));
  pg::write_file_atomic(dir.path / "convs.jsonl",
                        R"({"dialog_id":"d0","turns":[{"speaker":"A","text":"hi there","persona_id":-1},)"
                        R"({"speaker":"B","text":"i love d","persona_id":3}]})"
                        "\n");
  const auto c = pg::ingest_jsonl(dir.path / "convs.jsonl");
  ASSERT_EQ(c.conversations.size(), 1u);
  ASSERT_EQ(c.conversations[0].turns.size(), 2u);
  EXPECT_EQ(c.conversations[0].turns[0].persona_id, -1);
  EXPECT_EQ(c.conversations[0].turns[1].persona_id, 3);
  EXPECT_EQ(pg::stats(c).labeled_turns, 1u);
  EXPECT_EQ(c.catalog.size(), 4);
}

TEST(Ingest, EmptyFileIsEmptyCorpusError) {
  pg::testing::TempDir dir;
  pg::write_file_atomic(dir.path / "personas.jsonl", pg::catalog_jsonl({{"a ."}}));
  pg::write_file_atomic(dir.path / "convs.jsonl", "");
  EXPECT_EQ(pg::testing::error_code([&] { pg::ingest_jsonl(dir.path / "convs.jsonl"); }), ErrorCode::empty_corpus);
}

TEST(Ingest, MalformedLineNamesTheLine) {
  pg::testing::TempDir dir;
  pg::write_file_atomic(dir.path / "personas.jsonl", pg::catalog_jsonl({{"a ."}}));
  pg::write_file_atomic(dir.path / "convs.jsonl",
                        R"({"dialog_id":"d0","turns":[{"speaker":"A","text":"x","persona_id":0}]})"
                        "\n{not json\n");
  try {
    pg::ingest_jsonl(dir.path / "convs.jsonl");
    FAIL() << "expected a parse error";
  } catch (const pg::Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::parse);
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos) << e.what();
  }
}

TEST(Ingest, DanglingPersonaIdIsValidationError) {
  pg::testing::TempDir dir;
  pg::write_file_atomic(dir.path / "personas.jsonl", pg::catalog_jsonl({{"a .", "b ."}}));
  pg::write_file_atomic(dir.path / "convs.jsonl",
                        R"({"dialog_id":"d0","turns":[{"speaker":"A","text":"x","persona_id":7},)"
                        R"({"speaker":"B","text":"y","persona_id":-1}]})"
                        "\n");
  try {
    pg::ingest_jsonl(dir.path / "convs.jsonl");
    FAIL() << "expected a validation error";
  } catch (const pg::Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::validation);
    EXPECT_NE(std::string(e.what()).find('7'), std::string::npos) << e.what();
  }
}

TEST(Ingest, EmitIngestRoundTrip) {
  pg::testing::TempDir dir;
  const auto corpus = pg::synthesize_corpus(small_spec(0.9, 30));
  pg::emit_jsonl(corpus, dir.path / "c.jsonl");
  EXPECT_EQ(pg::ingest_jsonl(dir.path / "c.jsonl"), corpus);
}

// Table 1 totals: a corpus built to those totals must report the published
// averages after a JSONL round trip.
TEST(Stats, TableOneTotalsGiveTableOneAverages) {
  const std::size_t dialogs = 10907, utterances = 162064, labeled = 32147, personas = 4332;
  const std::size_t words = 1897769;  // 11.71 words per turn
  pg::AlignedCorpus c;
  for (std::size_t p = 0; p < personas; ++p) c.catalog.entries.push_back("persona " + std::to_string(p) + " .");
  std::size_t utt_left = utterances, lab_left = labeled, words_left = words, next_persona = 0, utt_seen = 0;
  for (std::size_t d = 0; d < dialogs; ++d) {
    const std::size_t dialogs_left = dialogs - d;
    const std::size_t turns = utt_left / dialogs_left + (utt_left % dialogs_left != 0 ? 1 : 0);
    const std::size_t labs = lab_left / dialogs_left + (lab_left % dialogs_left != 0 ? 1 : 0);
    pg::Conversation conv{"d" + std::to_string(d), {}};
    for (std::size_t t = 0; t < turns; ++t) {
      const std::size_t remaining = utterances - utt_seen;
      const std::size_t n_words = words_left / remaining + (words_left % remaining != 0 ? 1 : 0);
      std::string text = "w";
      for (std::size_t w = 1; w < n_words; ++w) text += " w";
      const int label = t < labs ? static_cast<int>(next_persona++ % personas) : pg::kUnlabeled;
      conv.turns.push_back({t % 2 == 0 ? pg::Speaker::A : pg::Speaker::B, text, label});
      words_left -= n_words;
      ++utt_seen;
    }
    utt_left -= turns;
    lab_left -= labs;
    c.conversations.push_back(std::move(conv));
  }
  pg::testing::TempDir dir;
  pg::emit_jsonl(c, dir.path / "table1.jsonl");
  const auto s = pg::stats(pg::ingest_jsonl(dir.path / "table1.jsonl"));
  EXPECT_EQ(s.dialogs, dialogs);
  EXPECT_EQ(s.utterances, utterances);
  EXPECT_EQ(s.unique_personas, personas);
  EXPECT_EQ(s.labeled_turns, labeled);
  EXPECT_NEAR(s.avg_turns_per_dialog, 14.86, 0.005);
  EXPECT_NEAR(s.avg_labeled_turns_per_dialog, 2.95, 0.005);
  EXPECT_NEAR(s.avg_words_per_turn, 11.71, 0.005);
}

TEST(Stats, EmptyCorpusIsAllZero) {
  const auto s = pg::stats(pg::AlignedCorpus{});
  EXPECT_EQ(s.dialogs, 0u);
  EXPECT_EQ(s.utterances, 0u);
  EXPECT_EQ(s.labeled_turns, 0u);
  EXPECT_EQ(s.avg_turns_per_dialog, 0.0);
  EXPECT_EQ(s.avg_words_per_turn, 0.0);
}

TEST(Stats, HandCountedAverages) {
  pg::AlignedCorpus c;
  c.catalog.entries = {"a .", "b ."};
  c.conversations.push_back({"d", {{pg::Speaker::A, "x y", 0},
                                   {pg::Speaker::B, "x", -1},
                                   {pg::Speaker::A, "x y z", 1},
                                   {pg::Speaker::B, "x y", -1}}});
  const auto s = pg::stats(c);
  EXPECT_EQ(s.avg_turns_per_dialog, 4.0);
  EXPECT_EQ(s.avg_labeled_turns_per_dialog, 2.0);
  EXPECT_EQ(s.avg_words_per_turn, 2.0);
}

TEST(Synth, FullLeakPutsCueInEveryLabeledTurn) {
  const auto c = pg::synthesize_corpus(small_spec(1.0));
  std::size_t labeled = 0;
  for (const auto& conv : c.conversations)
    for (const auto& t : conv.turns)
      if (t.labeled()) {
        ++labeled;
        EXPECT_TRUE(contains_word(t.text, pg::persona_cue(t.persona_id))) << t.text;
      }
  EXPECT_GT(labeled, 0u);
}

TEST(Synth, ZeroLeakHasNoCueWords) {
  const auto c = pg::synthesize_corpus(small_spec(0.0));
  for (const auto& conv : c.conversations)
    for (const auto& t : conv.turns)
      for (int p = 0; p < 16; ++p) EXPECT_FALSE(contains_word(t.text, pg::persona_cue(p))) << t.text;
}

TEST(Synth, HalfLeakCueFractionWithinBinomialBand) {
  auto spec = small_spec(0.5, 2000);
  const auto c = pg::synthesize_corpus(spec);
  std::size_t labeled = 0, cued = 0;
  for (const auto& conv : c.conversations)
    for (const auto& t : conv.turns)
      if (t.labeled()) {
        ++labeled;
        cued += contains_word(t.text, pg::persona_cue(t.persona_id)) ? 1 : 0;
      }
  ASSERT_GE(labeled, 2000u);
  const double frac = static_cast<double>(cued) / static_cast<double>(labeled);
  EXPECT_GE(frac, 0.47);
  EXPECT_LE(frac, 0.53);
}

TEST(Synth, SameSeedIsByteIdentical) {
  const auto a = pg::synthesize_corpus(small_spec(0.9));
  const auto b = pg::synthesize_corpus(small_spec(0.9));
  EXPECT_EQ(pg::conversations_jsonl(a.conversations), pg::conversations_jsonl(b.conversations));
  auto other = small_spec(0.9);
  other.vocab_seed = 12;
  EXPECT_NE(pg::conversations_jsonl(pg::synthesize_corpus(other).conversations),
            pg::conversations_jsonl(a.conversations));
}

TEST(Synth, FewerThanTwoPersonasIsConfigError) {
  auto spec = small_spec(0.9);
  spec.num_personas = 1;
  EXPECT_EQ(pg::testing::error_code([&] { pg::synthesize_corpus(spec); }), ErrorCode::config);
}

TEST(Synth, LabelsRoughlyUniform) {
  const auto c = pg::synthesize_corpus(small_spec(0.9, 2000));
  std::map<int, int> counts;
  int total = 0;
  for (const auto& conv : c.conversations)
    for (const auto& t : conv.turns)
      if (t.labeled()) {
        ++counts[t.persona_id];
        ++total;
      }
  ASSERT_EQ(counts.size(), 16u);
  for (const auto& [id, n] : counts) EXPECT_NEAR(n, total / 16.0, 0.25 * total / 16.0) << "persona " << id;
}

TEST(Split, TenDialogsGiveEightOneOne) {
  const auto corpus = pg::synthesize_corpus(small_spec(0.9, 10));
  pg::SplitSpec spec;
  const auto [a, b, c] = pg::split(corpus, spec);
  EXPECT_EQ(a.conversations.size(), 8u);
  EXPECT_EQ(b.conversations.size(), 1u);
  EXPECT_EQ(c.conversations.size(), 1u);
}

TEST(Split, PartitionAndDeterminism) {
  const auto corpus = pg::synthesize_corpus(small_spec(0.9, 500));
  pg::SplitSpec spec;
  spec.seed = 5;
  const auto [a, b, c] = pg::split(corpus, spec);
  const auto [a2, b2, c2] = pg::split(corpus, spec);
  EXPECT_EQ(a, a2);
  EXPECT_EQ(b, b2);
  EXPECT_EQ(c, c2);
  std::multiset<std::string> ids;
  for (const auto* part : {&a, &b, &c})
    for (const auto& conv : part->conversations) ids.insert(conv.dialog_id);
  std::multiset<std::string> all;
  for (const auto& conv : corpus.conversations) all.insert(conv.dialog_id);
  EXPECT_EQ(ids, all);
  EXPECT_EQ(std::set<std::string>(ids.begin(), ids.end()).size(), ids.size());
}

TEST(Split, PerLabelProportionsWithinTwentyPercent) {
  const auto corpus = pg::synthesize_corpus(small_spec(0.9, 2000));
  pg::SplitSpec spec;
  spec.seed = 3;
  const auto parts = pg::split(corpus, spec);
  std::map<int, double> global;
  double global_total = 0;
  for (const auto& conv : corpus.conversations)
    for (const auto& t : conv.turns)
      if (t.labeled()) {
        ++global[t.persona_id];
        ++global_total;
      }
  const auto check = [&](const pg::AlignedCorpus& part, const char* name) {
    std::map<int, double> counts;
    double total = 0;
    for (const auto& conv : part.conversations)
      for (const auto& t : conv.turns)
        if (t.labeled()) {
          ++counts[t.persona_id];
          ++total;
        }
    for (const auto& [id, n] : global) {
      if (counts[id] < 10) continue;
      const double expected = n / global_total;
      EXPECT_LE(std::abs(counts[id] / total - expected) / expected, 0.20) << name << " label " << id;
    }
  };
  check(std::get<0>(parts), "train");
  check(std::get<1>(parts), "validation");
  check(std::get<2>(parts), "test");
}

TEST(Split, RatioSumMustBeOne) {
  const auto corpus = pg::synthesize_corpus(small_spec(0.9, 10));
  pg::SplitSpec spec;
  spec.ratios = {0.5, 0.2, 0.2};
  EXPECT_EQ(pg::testing::error_code([&] { pg::split(corpus, spec); }), ErrorCode::config);
}

namespace {

/// Paper-scale fixture: 10,907 dialogs, one labeled persona per dialog drawn
/// from a repeating pattern.
pg::AlignedCorpus pattern_corpus(int classes, const std::vector<int>& pattern) {
  pg::AlignedCorpus c;
  for (int p = 0; p < classes; ++p) c.catalog.entries.push_back("persona " + std::to_string(p) + " .");
  for (int d = 0; d < 10907; ++d) {
    const int label = pattern[static_cast<std::size_t>(d) % pattern.size()];
    c.conversations.push_back({"d" + std::to_string(d),
                               {{pg::Speaker::A, "hello", label}, {pg::Speaker::B, "hi", pg::kUnlabeled}}});
  }
  return c;
}

}  // namespace

TEST(ImbalancedSplit, PaperConfiguration) {
  std::vector<int> pattern;
  for (int p = 0; p < 4332; ++p) pattern.push_back(p);
  const auto corpus = pattern_corpus(4332, pattern);
  std::set<int> held;
  for (int p = 0; p < 500; ++p) held.insert(p);
  const auto s = pg::imbalanced_split(corpus, held, {8031, 2376, 500}, 1);
  EXPECT_EQ(s.defender.conversations.size(), 8031u);
  EXPECT_EQ(s.adversary.conversations.size(), 2376u);
  EXPECT_EQ(s.test.conversations.size(), 500u);
  const auto def = labels_of(s.defender);
  EXPECT_GE(*def.begin(), 500);
  EXPECT_LE(*def.rbegin(), 4331);
  const auto adv = labels_of(s.adversary);
  EXPECT_LT(*adv.begin(), 500);
  EXPECT_GE(*adv.rbegin(), 500);
}

TEST(ImbalancedSplit, EightClusterConfiguration) {
  const auto corpus = pattern_corpus(8, {0, 1, 2, 3, 4, 5, 6, 7, 3, 4, 5, 6, 7});
  const auto s = pg::imbalanced_split(corpus, {0, 1, 2}, {6654, 3753, 500}, 2);
  EXPECT_EQ(s.defender.conversations.size(), 6654u);
  EXPECT_EQ(s.adversary.conversations.size(), 3753u);
  EXPECT_EQ(s.test.conversations.size(), 500u);
  EXPECT_EQ(labels_of(s.defender), (std::set<int>{3, 4, 5, 6, 7}));
  EXPECT_EQ(labels_of(s.adversary), (std::set<int>{0, 1, 2, 3, 4, 5, 6, 7}));
}

TEST(ImbalancedSplit, NoHeldLabelsKeepsEveryLabel) {
  const auto corpus = pg::synthesize_corpus(small_spec(0.9, 400));
  const auto s = pg::imbalanced_split(corpus, {}, {300, 50, 50}, 3);
  EXPECT_EQ(labels_of(s.defender), labels_of(corpus));
}

TEST(ImbalancedSplit, DefenderNeverSeesHeldLabels) {
  const auto corpus = pg::synthesize_corpus(small_spec(0.9, 2000));
  const std::set<int> held{0, 1, 2, 3};
  const auto s = pg::imbalanced_split(corpus, held, {1000, 700, 300}, 4);
  for (int id : labels_of(s.defender)) EXPECT_FALSE(held.contains(id));
}

TEST(ImbalancedSplit, InfeasibleCountsReportShortfall) {
  const auto corpus = pg::synthesize_corpus(small_spec(0.9, 100));
  try {
    pg::imbalanced_split(corpus, {0, 1, 2, 3, 4, 5, 6, 7}, {90, 5, 5}, 0);
    FAIL() << "expected a split error";
  } catch (const pg::Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::split);
    EXPECT_NE(std::string(e.what()).find("short by"), std::string::npos);
  }
}
