#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "posgen/corpus.hpp"

using namespace posgen;
using namespace posgen::corpus;

namespace {

FeatureSpace tiny_space() {
  FeatureSpace s;
  s.user_slots = {{"a", 3}, {"b", 2}};
  s.item_vocab_size = 4;
  s.topic_vocab_size = 4;
  s.word_vocab = make_word_vocab(4, min_word_vocab(4));
  return s;
}

GeneratorConfig small_gen() {
  GeneratorConfig g;
  g.num_users = 50;
  g.aux_samples = 2000;
  g.talk_samples = 500;
  g.scripts = 100;
  return g;
}

}  // namespace

TEST(Encode, HandComputedPrefixSums) {
  EXPECT_EQ(encode_sample(tiny_space(), {2, 1}, 3, EntityKind::item), (std::vector<int>{2, 4, 8}));
}

TEST(Encode, ZeroUserHitsSlotOffsets) {
  const auto s = tiny_space();
  EXPECT_EQ(encode_sample(s, {0, 0}, 0, EntityKind::item), (std::vector<int>{0, 3, 5}));
}

TEST(Encode, UserBlockPrecedesEntityBlock) {
  const auto s = desk_feature_space();
  const auto v = encode_sample(s, {1, 1, 1, 1, 1, 1}, 7, EntityKind::topic);
  ASSERT_EQ(v.size(), static_cast<std::size_t>(s.num_slots() + 1));
  for (int i = 0; i < s.num_slots(); ++i) EXPECT_LT(v[static_cast<std::size_t>(i)], s.user_width());
  EXPECT_EQ(v.back(), s.user_width() + 7);
}

TEST(Encode, OutOfRangeNamesTheSlot) {
  try {
    encode_sample(tiny_space(), {1, 2}, 0, EntityKind::item);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("b"), std::string::npos);
  }
  EXPECT_THROW(encode_sample(tiny_space(), {0, 0}, 4, EntityKind::topic), ValidationError);
}

TEST(Encode, InjectiveOverExhaustiveSmallSpace) {
  const auto s = tiny_space();
  std::set<std::vector<int>> seen;
  int count = 0;
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 2; ++b)
      for (int e = 0; e < 4; ++e) {
        const auto v = encode_sample(s, {a, b}, e, EntityKind::item);
        EXPECT_LT(v.back(), s.user_width() + s.item_vocab_size);
        seen.insert(v);
        ++count;
      }
  EXPECT_EQ(static_cast<int>(seen.size()), count);
}

TEST(FeatureSpaceTest, ReservedTokensFirstAndJsonRoundTrip) {
  const auto s = desk_feature_space();
  for (std::size_t i = 0; i < kReservedWords.size(); ++i) EXPECT_EQ(s.word_vocab[i], kReservedWords[i]);
  EXPECT_EQ(FeatureSpace::from_json(s.to_json()), s);
  EXPECT_EQ(s.word_vocab_size(), 300);
}

TEST(Generator, Deterministic) {
  const auto s = desk_feature_space();
  const auto a = generate_synthetic_corpus(s, small_gen(), 5);
  const auto b = generate_synthetic_corpus(s, small_gen(), 5);
  EXPECT_EQ(format_aux(s, a.aux), format_aux(s, b.aux));
  EXPECT_EQ(format_talk(s, a.talk), format_talk(s, b.talk));
  EXPECT_EQ(format_scripts(s, a.scripts), format_scripts(s, b.scripts));
  const auto c = generate_synthetic_corpus(s, small_gen(), 6);
  EXPECT_NE(format_talk(s, a.talk), format_talk(s, c.talk));
}

TEST(Generator, TalkLabelsReplayThePlantedModel) {
  const auto s = desk_feature_space();
  const auto cfg = small_gen();
  const auto c = generate_synthetic_corpus(s, cfg, 11);
  const auto m = make_planted_model(s, cfg, 11);
  const auto users = make_users(s, cfg, 11);
  Rng rng = stream_rng(11, Stream::talk);
  for (const auto& t : c.talk) {
    const auto& u = users[rng.index(users.size())];
    const int topic = static_cast<int>(rng.index(static_cast<std::size_t>(s.topic_vocab_size)));
    const int label = rng.bernoulli(sigmoid(m.talk_logit(u, topic))) ? 1 : 0;
    ASSERT_EQ(t.user, u);
    ASSERT_EQ(t.topic, topic);
    ASSERT_EQ(t.label, label);
  }
}

TEST(Generator, AuxTalkRatioIsExact) {
  auto cfg = small_gen();
  cfg.talk_samples = 80;
  cfg.aux_talk_ratio = 25;
  const auto c = generate_synthetic_corpus(desk_feature_space(), cfg, 1);
  EXPECT_EQ(c.aux.size(), 2000u);
  EXPECT_EQ(c.talk.size(), 80u);
}

TEST(Generator, SchemaInvariants) {
  const auto s = desk_feature_space();
  const auto cfg = small_gen();
  const auto c = generate_synthetic_corpus(s, cfg, 2);
  for (const auto& a : c.aux) {
    if (a.behavior == Behavior::conversion) EXPECT_LT(a.item, cfg.insurance_items);
  }
  const auto m = make_planted_model(s, cfg, 2);
  for (const auto& sc : c.scripts) {
    EXPECT_NO_THROW(validate_script(s, sc, cfg.max_topic_len, 100));
    for (std::size_t i = 1; i < sc.topics.size(); ++i) {
      EXPECT_GE(m.order_priority(sc.user, sc.topics[i - 1]), m.order_priority(sc.user, sc.topics[i]));
    }
  }
}

TEST(Generator, ConfigErrors) {
  auto cfg = small_gen();
  cfg.talk_samples = 0;
  EXPECT_THROW(generate_synthetic_corpus(desk_feature_space(), cfg, 1), ConfigError);
  cfg = small_gen();
  cfg.max_topic_len = 6;
  EXPECT_THROW(generate_synthetic_corpus(desk_feature_space(5, 120, 300), cfg, 1), ConfigError);
}

TEST(Generator, LabelRateMatchesPlantedProbabilityPerBucket) {
  const auto s = desk_feature_space();
  auto cfg = small_gen();
  cfg.talk_samples = 10000;
  const auto c = generate_synthetic_corpus(s, cfg, 3);
  const auto m = make_planted_model(s, cfg, 3);
  double obs[5] = {}, expect[5] = {}, var[5] = {};
  for (const auto& t : c.talk) {
    const double p = sigmoid(m.talk_logit(t.user, t.topic));
    const int b = std::min(4, static_cast<int>(p * 5));
    obs[b] += t.label;
    expect[b] += p;
    var[b] += p * (1 - p);
  }
  for (int b = 0; b < 5; ++b) {
    if (var[b] == 0) continue;
    EXPECT_LE(std::abs(obs[b] - expect[b]), 3 * std::sqrt(var[b])) << "bucket " << b;
  }
}

TEST(Split, EightTwoOnTenSamples) {
  std::vector<int> v(10);
  std::iota(v.begin(), v.end(), 0);
  const auto [tr, te] = split_train_test(v, 0.8, 1);
  EXPECT_EQ(tr.size(), 8u);
  EXPECT_EQ(te.size(), 2u);
  std::set<int> all(tr.begin(), tr.end());
  all.insert(te.begin(), te.end());
  EXPECT_EQ(all.size(), 10u);
}

TEST(Split, EmptyAndInvalidFraction) {
  const auto [tr, te] = split_train_test(std::vector<int>{}, 0.5, 1);
  EXPECT_TRUE(tr.empty());
  EXPECT_TRUE(te.empty());
  EXPECT_THROW(train_mask(3, 1.0, 1), ConfigError);
  EXPECT_THROW(train_mask(3, 0.0, 1), ConfigError);
}

TEST(Split, SeedDeterminesPartition) {
  EXPECT_EQ(train_mask(50, 0.8, 4), train_mask(50, 0.8, 4));
  int differ = 0;
  const auto base = train_mask(50, 0.8, 0);
  for (std::uint64_t s = 1; s <= 100; ++s) differ += train_mask(50, 0.8, s) != base;
  EXPECT_EQ(differ, 100);
}

TEST(Files, RoundTripThroughDisk) {
  const auto s = desk_feature_space();
  const auto c = generate_synthetic_corpus(s, small_gen(), 9);
  const auto dir = std::filesystem::temp_directory_path() / "posgen_corpus_test";
  std::filesystem::remove_all(dir);
  write_corpus(dir, c);
  const auto r = read_corpus(dir, 5, 100);
  EXPECT_EQ(r.space, s);
  EXPECT_EQ(format_aux(s, r.aux), format_aux(s, c.aux));
  EXPECT_EQ(format_talk(s, r.talk), format_talk(s, c.talk));
  EXPECT_EQ(format_scripts(s, r.scripts), format_scripts(s, c.scripts));
  std::filesystem::remove_all(dir);
}

TEST(Files, RepeatedTopicRejectedAtLoad) {
  const auto s = desk_feature_space();
  auto c = generate_synthetic_corpus(s, small_gen(), 9);
  ScriptSample bad{c.scripts[0].user, {1, 1}, {{kEos}, {kEos}}};
  c.scripts = {bad};
  const auto dir = std::filesystem::temp_directory_path() / "posgen_corpus_bad";
  std::filesystem::remove_all(dir);
  write_corpus(dir, c);
  EXPECT_THROW(read_corpus(dir, 5, 100), ValidationError);
  std::filesystem::remove_all(dir);
}
