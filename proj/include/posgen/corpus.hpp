#pragma once

// Data schema, multi-hot sample encoding, the planted synthetic corpus
// generator and train/test splitting.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "posgen/core/checkpoint.hpp"
#include "posgen/core/error.hpp"
#include "posgen/core/rng.hpp"

namespace posgen::corpus {

using json = nlohmann::json;

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kUnk = 3;
inline const std::array<std::string, 4> kReservedWords = {"<pad>", "<bos>", "<eos>", "<unk>"};

struct Slot {
  std::string name;
  int cardinality = 1;
};

/// Sizes of every categorical block. Multi-hot layout for one sample is
/// [slot_0 | slot_1 | ... | entity], each slot block `cardinality` wide.
struct FeatureSpace {
  std::vector<Slot> user_slots;
  int item_vocab_size = 1;
  int topic_vocab_size = 1;
  std::vector<std::string> word_vocab;

  int num_slots() const { return static_cast<int>(user_slots.size()); }

  /// Prefix sums of the slot cardinalities.
  std::vector<int> slot_offsets() const {
    std::vector<int> off;
    int at = 0;
    for (const auto& s : user_slots) {
      off.push_back(at);
      at += s.cardinality;
    }
    return off;
  }

  int user_width() const {
    int w = 0;
    for (const auto& s : user_slots) w += s.cardinality;
    return w;
  }

  /// Rows of an embedding table shared by user, item and topic features:
  /// [user slots | items | topics].
  int shared_width() const { return user_width() + item_vocab_size + topic_vocab_size; }
  int item_row(int item) const { return user_width() + item; }
  int topic_row(int topic) const { return user_width() + item_vocab_size + topic; }

  int word_vocab_size() const { return static_cast<int>(word_vocab.size()); }

  void validate() const {
    if (user_slots.empty()) throw ValidationError("feature space needs at least one user slot");
    for (const auto& s : user_slots) {
      if (s.cardinality < 1) throw ValidationError("slot '" + s.name + "' has cardinality < 1");
    }
    if (item_vocab_size < 1) throw ValidationError("item_vocab_size must be >= 1");
    if (topic_vocab_size < 1) throw ValidationError("topic_vocab_size must be >= 1");
    if (word_vocab.size() < kReservedWords.size()) throw ValidationError("word vocab lacks reserved tokens");
    for (std::size_t i = 0; i < kReservedWords.size(); ++i) {
      if (word_vocab[i] != kReservedWords[i]) {
        throw ValidationError("word " + std::to_string(i) + " must be " + kReservedWords[i]);
      }
    }
  }

  json to_json() const {
    json slots = json::array();
    for (const auto& s : user_slots) slots.push_back({{"name", s.name}, {"cardinality", s.cardinality}});
    return {{"user_slots", slots},
            {"item_vocab_size", item_vocab_size},
            {"topic_vocab_size", topic_vocab_size},
            {"word_vocab", word_vocab}};
  }

  static FeatureSpace from_json(const json& j) {
    FeatureSpace fs;
    for (const auto& s : j.at("user_slots")) {
      fs.user_slots.push_back({s.at("name").get<std::string>(), s.at("cardinality").get<int>()});
    }
    fs.item_vocab_size = j.at("item_vocab_size").get<int>();
    fs.topic_vocab_size = j.at("topic_vocab_size").get<int>();
    fs.word_vocab = j.at("word_vocab").get<std::vector<std::string>>();
    fs.validate();
    return fs;
  }

  std::string hash() const { return hex64(fnv1a64(to_json().dump())); }

  std::string word_vocab_hash() const { return hex64(fnv1a64(json(word_vocab).dump())); }

  bool operator==(const FeatureSpace& o) const { return to_json() == o.to_json(); }
};

using UserFeatures = std::vector<int>;

enum class Behavior { click, conversion, visit };
enum class EntityKind { item, topic };

inline const char* to_string(Behavior b) {
  switch (b) {
    case Behavior::click: return "click";
    case Behavior::conversion: return "conversion";
    case Behavior::visit: return "visit";
  }
  return "?";
}

inline Behavior behavior_from_string(const std::string& s) {
  if (s == "click") return Behavior::click;
  if (s == "conversion") return Behavior::conversion;
  if (s == "visit") return Behavior::visit;
  throw ValidationError("unknown behavior type '" + s + "'");
}

struct AuxSample {
  UserFeatures user;
  Behavior behavior = Behavior::click;
  int item = 0;
  int label = 0;
  bool operator==(const AuxSample&) const = default;
};

struct TalkSample {
  UserFeatures user;
  int topic = 0;
  int label = 0;
  bool operator==(const TalkSample&) const = default;
};

struct ScriptSample {
  UserFeatures user;
  std::vector<int> topics;
  std::vector<std::vector<int>> sentences;
  bool operator==(const ScriptSample&) const = default;
};

struct Corpus {
  FeatureSpace space;
  std::vector<AuxSample> aux;
  std::vector<TalkSample> talk;
  std::vector<ScriptSample> scripts;
};

inline void validate_user(const FeatureSpace& space, const UserFeatures& user) {
  if (static_cast<int>(user.size()) != space.num_slots()) {
    throw ValidationError("user has " + std::to_string(user.size()) + " features, space has " +
                          std::to_string(space.num_slots()) + " slots");
  }
  for (int s = 0; s < space.num_slots(); ++s) {
    const auto& slot = space.user_slots[static_cast<std::size_t>(s)];
    if (user[static_cast<std::size_t>(s)] < 0 || user[static_cast<std::size_t>(s)] >= slot.cardinality) {
      throw ValidationError("slot '" + slot.name + "' value " + std::to_string(user[static_cast<std::size_t>(s)]) +
                            " outside [0, " + std::to_string(slot.cardinality) + ")");
    }
  }
}

/// Active positions of the multi-hot vector [user | entity]. The entity
/// block starts at user_width() and is item_vocab_size or topic_vocab_size
/// wide depending on `kind`.
inline std::vector<int> encode_sample(const FeatureSpace& space, const UserFeatures& user, int entity,
                                      EntityKind kind) {
  validate_user(space, user);
  const int vocab = kind == EntityKind::item ? space.item_vocab_size : space.topic_vocab_size;
  if (entity < 0 || entity >= vocab) {
    throw ValidationError(std::string(kind == EntityKind::item ? "item" : "topic") + " id " +
                          std::to_string(entity) + " outside [0, " + std::to_string(vocab) + ")");
  }
  std::vector<int> active;
  active.reserve(user.size() + 1);
  const auto offsets = space.slot_offsets();
  for (std::size_t s = 0; s < user.size(); ++s) active.push_back(offsets[s] + user[s]);
  active.push_back(space.user_width() + entity);
  return active;
}

/// Rows of the shared embedding table holding the user's features.
inline std::vector<int> user_rows(const FeatureSpace& space, const UserFeatures& user) {
  validate_user(space, user);
  std::vector<int> rows;
  const auto offsets = space.slot_offsets();
  for (std::size_t s = 0; s < user.size(); ++s) rows.push_back(offsets[s] + user[s]);
  return rows;
}

inline void validate_script(const FeatureSpace& space, const ScriptSample& s, int max_topic_len, int max_doc_len) {
  validate_user(space, s.user);
  if (s.topics.empty() || static_cast<int>(s.topics.size()) > max_topic_len) {
    throw ValidationError("script topic count " + std::to_string(s.topics.size()) + " outside [1, " +
                          std::to_string(max_topic_len) + "]");
  }
  if (s.topics.size() != s.sentences.size()) throw ValidationError("script needs one sentence per topic");
  std::unordered_set<int> seen;
  for (int t : s.topics) {
    if (t < 0 || t >= space.topic_vocab_size) throw ValidationError("script topic id out of range");
    if (!seen.insert(t).second) throw ValidationError("script repeats topic " + std::to_string(t));
  }
  for (const auto& sent : s.sentences) {
    if (sent.empty() || sent.back() != kEos) throw ValidationError("script sentence must end with <eos>");
    if (static_cast<int>(sent.size()) > max_doc_len) throw ValidationError("script sentence exceeds max_doc_len");
    for (int w : sent) {
      if (w < 0 || w >= space.word_vocab_size()) throw ValidationError("word id out of range");
    }
  }
}

// ---------------------------------------------------------------------------
// Synthetic corpus

struct GeneratorConfig {
  int num_users = 600;
  int aux_samples = 50000;
  int talk_samples = 2000;
  int scripts = 1000;
  /// When > 0, overrides aux_samples with aux_talk_ratio * talk_samples.
  int aux_talk_ratio = 0;
  /// Items [0, insurance_items) are insurance products; the rest are
  /// videos and articles.
  int insurance_items = 40;
  int latent_rank = 4;
  double aux_signal = 3.0;
  double talk_signal = 3.0;
  double topic_bias_std = 0.5;
  /// Mixture over click / conversion / visit.
  std::array<double, 3> behavior_mix = {0.5, 0.2, 0.3};
  std::array<double, 3> behavior_bias = {-0.5, -1.0, 0.0};
  int max_topic_len = 5;
  /// Probability of replacing a clause word with a random filler word.
  double word_noise = 0.05;

  int effective_aux_samples() const { return aux_talk_ratio > 0 ? aux_talk_ratio * talk_samples : aux_samples; }

  void validate(const FeatureSpace& space) const {
    if (num_users <= 0 || talk_samples <= 0 || scripts <= 0 || effective_aux_samples() <= 0) {
      throw ConfigError("generator sample counts must be positive");
    }
    if (space.topic_vocab_size < max_topic_len) throw ConfigError("topic_vocab_size < max_topic_len");
    if (max_topic_len < 1) throw ConfigError("max_topic_len must be >= 1");
    if (insurance_items < 1 || insurance_items > space.item_vocab_size) {
      throw ConfigError("insurance_items must lie in [1, item_vocab_size]");
    }
    if (latent_rank < 1) throw ConfigError("latent_rank must be >= 1");
    double mix = 0;
    for (double m : behavior_mix) {
      if (m < 0) throw ConfigError("behavior_mix entries must be non-negative");
      mix += m;
    }
    if (std::abs(mix - 1.0) > 1e-9) throw ConfigError("behavior_mix must sum to 1");
    if (word_noise < 0 || word_noise >= 1) throw ConfigError("word_noise must lie in [0, 1)");
  }
};

/// Word layout of the sentence templates inside the word vocab.
struct TemplateGrammar {
  static constexpr int kClauseLen = 6;
  static constexpr int kAlternatives = 2;
  static constexpr int kGreetings = 6;
  static constexpr int kClosings = 6;
  static constexpr int kConnectors = 4;

  int first_greeting = 4;
  int first_closing = first_greeting + kGreetings;
  int first_connector = first_closing + kClosings;
  int first_topic_word = first_connector + kConnectors;
  int first_filler = 0;
  int num_fillers = 0;

  static int words_per_topic() { return kClauseLen * kAlternatives; }

  /// Word id of alternative `alt` at clause position `pos` for `topic`.
  int topic_word(int topic, int pos, int alt) const {
    return first_topic_word + topic * words_per_topic() + pos * kAlternatives + alt;
  }

  /// Topic owning word `w`, or -1.
  int topic_of_word(int w) const {
    if (w < first_topic_word || w >= first_filler) return -1;
    return (w - first_topic_word) / words_per_topic();
  }
};

inline int min_word_vocab(int topics) {
  return 4 + TemplateGrammar::kGreetings + TemplateGrammar::kClosings + TemplateGrammar::kConnectors +
         topics * TemplateGrammar::words_per_topic() + 1;
}

inline const std::vector<std::string>& topic_names() {
  static const std::vector<std::string> names = {
      "health",  "accident", "travel",  "pension", "critical", "medical", "family",   "child",
      "auto",    "home",     "pet",     "dental",  "life",     "savings", "claims",   "premium",
      "renewal", "coverage", "wellness", "cancer",  "elderly",  "student", "business", "disability"};
  return names;
}

inline TemplateGrammar make_grammar(int topics, int word_vocab_size) {
  TemplateGrammar g;
  g.first_filler = g.first_topic_word + topics * TemplateGrammar::words_per_topic();
  g.num_fillers = word_vocab_size - g.first_filler;
  return g;
}

/// Word list for the template grammar: reserved tokens, greetings, closings,
/// connectors, per-topic clause words, then fillers up to `size`.
inline std::vector<std::string> make_word_vocab(int topics, int size) {
  if (size < min_word_vocab(topics)) {
    throw ConfigError("word vocab of " + std::to_string(size) + " too small for " + std::to_string(topics) +
                      " topics (need " + std::to_string(min_word_vocab(topics)) + ")");
  }
  std::vector<std::string> v(kReservedWords.begin(), kReservedWords.end());
  for (const char* w : {"hello", "hi", "dear", "greetings", "welcome", "hey"}) v.emplace_back(w);
  for (const char* w : {"thanks", "regards", "cheers", "goodbye", "bye", "enjoy"}) v.emplace_back(w);
  for (const char* w : {"also", "besides", "moreover", "plus"}) v.emplace_back(w);
  const auto& names = topic_names();
  for (int t = 0; t < topics; ++t) {
    const std::string base =
        t < static_cast<int>(names.size()) ? names[static_cast<std::size_t>(t)] : "topic" + std::to_string(t);
    for (int p = 0; p < TemplateGrammar::kClauseLen; ++p)
      for (int a = 0; a < TemplateGrammar::kAlternatives; ++a)
        v.push_back(base + "_" + std::to_string(p) + (a == 0 ? "a" : "b"));
  }
  for (int i = static_cast<int>(v.size()); i < size; ++i) v.push_back("w" + std::to_string(i));
  return v;
}

/// FeatureSpace of the desk-scale synthetic corpus.
inline FeatureSpace desk_feature_space(int topics = 20, int items = 120, int words = 300) {
  FeatureSpace fs;
  fs.user_slots = {{"age_band", 8}, {"gender", 2}, {"region", 10}, {"income", 6}, {"occupation", 12}, {"channel", 5}};
  fs.item_vocab_size = items;
  fs.topic_vocab_size = topics;
  fs.word_vocab = make_word_vocab(topics, words);
  return fs;
}

/// Ground-truth generative model. All logits are functions of a user's
/// latent vector u = sum over slots of that slot value's factor.
struct PlantedModel {
  int rank = 0;
  std::vector<std::vector<std::vector<double>>> slot_factors;  // [slot][value][rank]
  std::vector<std::vector<double>> item_factors;               // [item][rank]
  std::vector<std::vector<double>> topic_factors;              // [topic][rank]
  std::vector<double> topic_bias;                              // [topic]
  std::vector<std::vector<double>> order_factors;              // [topic][rank]
  double aux_signal = 0;
  double talk_signal = 0;
  std::array<double, 3> behavior_bias{};

  std::vector<double> user_latent(const UserFeatures& user) const {
    std::vector<double> u(static_cast<std::size_t>(rank), 0.0);
    for (std::size_t s = 0; s < user.size(); ++s)
      for (int r = 0; r < rank; ++r) u[static_cast<std::size_t>(r)] += slot_factors[s][static_cast<std::size_t>(user[s])][static_cast<std::size_t>(r)];
    return u;
  }

  static double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
  }

  double aux_logit(const UserFeatures& user, Behavior b, int item) const {
    return aux_signal * dot(user_latent(user), item_factors[static_cast<std::size_t>(item)]) /
               std::sqrt(static_cast<double>(rank)) +
           behavior_bias[static_cast<std::size_t>(b)];
  }

  double talk_logit(const UserFeatures& user, int topic) const {
    return talk_signal * dot(user_latent(user), topic_factors[static_cast<std::size_t>(topic)]) /
               std::sqrt(static_cast<double>(rank)) +
           topic_bias[static_cast<std::size_t>(topic)];
  }

  /// Higher priority topics come earlier in the user's scripts.
  double order_priority(const UserFeatures& user, int topic) const {
    return dot(user_latent(user), order_factors[static_cast<std::size_t>(topic)]);
  }
};

inline double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

/// Independent random streams of the generator, one per phase, so changing
/// one phase's count never shifts another phase's draws.
enum class Stream : std::uint64_t { model = 1, users = 2, aux = 3, talk = 4, scripts = 5 };

inline Rng stream_rng(std::uint64_t seed, Stream s) {
  return Rng(Rng::mix(seed) ^ Rng::mix(static_cast<std::uint64_t>(s) * 0x632be59bd9b4e019ULL));
}

/// Planted model draws, in order: slot factors (slot, value, dim), item
/// factors (item, dim), topic factors (topic, dim), topic biases, order
/// factors (topic, dim). Factors are N(0, 1/num_slots) for slots so the
/// user latent has unit variance per dimension, N(0, 1) otherwise.
inline PlantedModel make_planted_model(const FeatureSpace& space, const GeneratorConfig& cfg, std::uint64_t seed) {
  Rng rng = stream_rng(seed, Stream::model);
  PlantedModel m;
  m.rank = cfg.latent_rank;
  m.aux_signal = cfg.aux_signal;
  m.talk_signal = cfg.talk_signal;
  m.behavior_bias = cfg.behavior_bias;
  const double slot_std = 1.0 / std::sqrt(static_cast<double>(space.num_slots()));
  const auto r = static_cast<std::size_t>(cfg.latent_rank);
  for (const auto& slot : space.user_slots) {
    std::vector<std::vector<double>> values;
    for (int v = 0; v < slot.cardinality; ++v) {
      std::vector<double> f(r);
      for (auto& x : f) x = rng.normal(0.0, slot_std);
      values.push_back(std::move(f));
    }
    m.slot_factors.push_back(std::move(values));
  }
  auto block = [&](int n) {
    std::vector<std::vector<double>> b;
    for (int i = 0; i < n; ++i) {
      std::vector<double> f(r);
      for (auto& x : f) x = rng.normal();
      b.push_back(std::move(f));
    }
    return b;
  };
  m.item_factors = block(space.item_vocab_size);
  m.topic_factors = block(space.topic_vocab_size);
  for (int t = 0; t < space.topic_vocab_size; ++t) m.topic_bias.push_back(rng.normal(0.0, cfg.topic_bias_std));
  m.order_factors = block(space.topic_vocab_size);
  return m;
}

/// The user population: one uniform draw per slot, user by user.
inline std::vector<UserFeatures> make_users(const FeatureSpace& space, const GeneratorConfig& cfg, std::uint64_t seed) {
  Rng rng = stream_rng(seed, Stream::users);
  std::vector<UserFeatures> users;
  users.reserve(static_cast<std::size_t>(cfg.num_users));
  for (int i = 0; i < cfg.num_users; ++i) {
    UserFeatures u;
    for (const auto& slot : space.user_slots) u.push_back(static_cast<int>(rng.index(static_cast<std::size_t>(slot.cardinality))));
    users.push_back(std::move(u));
  }
  return users;
}

/// Renders the template sentence for `topic` at script position `pos` of
/// `count`: [greeting x2 if first] [connector keyed by previous topic if not
/// first] clause x6 [closing x2 if last] <eos>.
inline std::vector<int> render_sentence(const TemplateGrammar& g, int topic, int prev_topic, int pos, int count,
                                        double noise, Rng& rng) {
  std::vector<int> s;
  if (pos == 0) {
    s.push_back(g.first_greeting + static_cast<int>(rng.index(TemplateGrammar::kGreetings)));
    s.push_back(g.first_greeting + static_cast<int>(rng.index(TemplateGrammar::kGreetings)));
  } else {
    s.push_back(g.first_connector + prev_topic % TemplateGrammar::kConnectors);
  }
  for (int p = 0; p < TemplateGrammar::kClauseLen; ++p) {
    const int alt = static_cast<int>(rng.index(TemplateGrammar::kAlternatives));
    const bool noisy = g.num_fillers > 0 && rng.bernoulli(noise);
    const int filler = g.first_filler + static_cast<int>(rng.index(static_cast<std::size_t>(std::max(g.num_fillers, 1))));
    s.push_back(noisy ? filler : g.topic_word(topic, p, alt));
  }
  if (pos == count - 1) {
    s.push_back(g.first_closing + static_cast<int>(rng.index(TemplateGrammar::kClosings)));
    s.push_back(g.first_closing + static_cast<int>(rng.index(TemplateGrammar::kClosings)));
  }
  s.push_back(kEos);
  return s;
}

/// Script sampling per script: user index, length K in [1, max_topic_len],
/// one Gumbel draw per topic (topic selection by perturbed talk logit, top
/// K), then sentences in planted order. Order is by descending planted
/// priority with ties to the lower topic id.
inline ScriptSample sample_script(const FeatureSpace& space, const GeneratorConfig& cfg, const PlantedModel& m,
                                  const TemplateGrammar& g, const UserFeatures& user, Rng& rng) {
  ScriptSample s;
  s.user = user;
  const int k = 1 + static_cast<int>(rng.index(static_cast<std::size_t>(cfg.max_topic_len)));
  std::vector<std::pair<double, int>> keyed;
  for (int t = 0; t < space.topic_vocab_size; ++t) {
    double u = rng.uniform();
    while (u <= 0.0) u = rng.uniform();
    keyed.emplace_back(m.talk_logit(user, t) - std::log(-std::log(u)), t);
  }
  std::sort(keyed.begin(), keyed.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  std::vector<int> chosen;
  for (int i = 0; i < k; ++i) chosen.push_back(keyed[static_cast<std::size_t>(i)].second);
  std::sort(chosen.begin(), chosen.end(), [&](int a, int b) {
    const double pa = m.order_priority(user, a), pb = m.order_priority(user, b);
    return pa != pb ? pa > pb : a < b;
  });
  s.topics = chosen;
  for (int i = 0; i < k; ++i) {
    const int prev = i == 0 ? -1 : chosen[static_cast<std::size_t>(i - 1)];
    s.sentences.push_back(render_sentence(g, chosen[static_cast<std::size_t>(i)], prev, i, k, cfg.word_noise, rng));
  }
  return s;
}

/// Generates the three sample sets. Per aux sample, in order: user index,
/// behavior (one uniform against the cumulative mix), item index (drawn from
/// the insurance items for conversions), label (one Bernoulli draw). Per talk
/// sample: user index, topic index, label. Labels are Bernoulli draws of the
/// planted probability, so talk negatives are explicit rejected topics.
inline Corpus generate_synthetic_corpus(const FeatureSpace& space, const GeneratorConfig& cfg, std::uint64_t seed) {
  space.validate();
  cfg.validate(space);
  if (space.word_vocab_size() < min_word_vocab(space.topic_vocab_size)) {
    throw ConfigError("word vocab too small for the template grammar");
  }
  const PlantedModel m = make_planted_model(space, cfg, seed);
  const auto users = make_users(space, cfg, seed);
  const TemplateGrammar g = make_grammar(space.topic_vocab_size, space.word_vocab_size());
  const auto pick_user = [&](Rng& rng) -> const UserFeatures& {
    return users[rng.index(users.size())];
  };

  Corpus c;
  c.space = space;
  {
    Rng rng = stream_rng(seed, Stream::aux);
    const int n = cfg.effective_aux_samples();
    c.aux.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      AuxSample a;
      a.user = pick_user(rng);
      const double b = rng.uniform();
      a.behavior = b < cfg.behavior_mix[0]                          ? Behavior::click
                   : b < cfg.behavior_mix[0] + cfg.behavior_mix[1] ? Behavior::conversion
                                                                     : Behavior::visit;
      a.item = a.behavior == Behavior::conversion
                   ? static_cast<int>(rng.index(static_cast<std::size_t>(cfg.insurance_items)))
                   : static_cast<int>(rng.index(static_cast<std::size_t>(space.item_vocab_size)));
      a.label = rng.bernoulli(sigmoid(m.aux_logit(a.user, a.behavior, a.item))) ? 1 : 0;
      c.aux.push_back(std::move(a));
    }
  }
  {
    Rng rng = stream_rng(seed, Stream::talk);
    c.talk.reserve(static_cast<std::size_t>(cfg.talk_samples));
    for (int i = 0; i < cfg.talk_samples; ++i) {
      TalkSample t;
      t.user = pick_user(rng);
      t.topic = static_cast<int>(rng.index(static_cast<std::size_t>(space.topic_vocab_size)));
      t.label = rng.bernoulli(sigmoid(m.talk_logit(t.user, t.topic))) ? 1 : 0;
      c.talk.push_back(std::move(t));
    }
  }
  {
    Rng rng = stream_rng(seed, Stream::scripts);
    for (int i = 0; i < cfg.scripts; ++i) {
      const UserFeatures& u = pick_user(rng);
      c.scripts.push_back(sample_script(space, cfg, m, g, u, rng));
    }
  }
  return c;
}

// ---------------------------------------------------------------------------
// Splitting

/// Assigns round(fraction * n) samples to train. Sample i is ranked by a
/// hash of (i, seed) and the lowest-ranked ones go to train, so the
/// assignment depends only on (i, seed) and the quota.
inline std::vector<bool> train_mask(std::size_t n, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("split fraction must lie in (0, 1)");
  std::vector<std::pair<std::uint64_t, std::size_t>> keys;
  keys.reserve(n);
  for (std::size_t i = 0; i < n; ++i) keys.emplace_back(Rng::mix(Rng::mix(seed) ^ (i * 0x9e3779b97f4a7c15ULL + 1)), i);
  std::sort(keys.begin(), keys.end());
  const auto quota = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  std::vector<bool> mask(n, false);
  for (std::size_t r = 0; r < quota; ++r) mask[keys[r].second] = true;
  return mask;
}

template <class S>
std::pair<std::vector<S>, std::vector<S>> split_train_test(const std::vector<S>& samples, double fraction,
                                                           std::uint64_t seed) {
  const auto mask = train_mask(samples.size(), fraction, seed);
  std::pair<std::vector<S>, std::vector<S>> out;
  for (std::size_t i = 0; i < samples.size(); ++i) (mask[i] ? out.first : out.second).push_back(samples[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Files. Each file starts with a header line
//   #posgen-corpus <TAB> v1 <TAB> <kind> <TAB> <FeatureSpace JSON>
// followed by one tab-separated record per line:
//   aux:    user(comma ids) behavior item label
//   talk:   user topic label
//   script: user topics(space ids) sentences('|' separated, space ids)

inline constexpr const char* kCorpusTag = "#posgen-corpus";

namespace io_detail {

inline std::string join_ints(const std::vector<int>& v, char sep) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += sep;
    s += std::to_string(v[i]);
  }
  return s;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline int parse_int(const std::string& s) {
  std::size_t used = 0;
  int v = 0;
  try {
    v = std::stoi(s, &used);
  } catch (const std::exception&) {
    throw ValidationError("bad integer '" + s + "'");
  }
  if (used != s.size()) throw ValidationError("bad integer '" + s + "'");
  return v;
}

inline std::vector<int> parse_ints(const std::string& s, char sep) {
  std::vector<int> v;
  if (s.empty()) return v;
  for (const auto& part : split(s, sep)) v.push_back(parse_int(part));
  return v;
}

inline std::string header(const FeatureSpace& space, const std::string& kind) {
  return std::string(kCorpusTag) + "\tv1\t" + kind + "\t" + space.to_json().dump() + "\n";
}

inline FeatureSpace read_header(std::istream& in, const std::string& kind) {
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("corpus file is empty");
  const auto f = split(line, '\t');
  if (f.size() != 4 || f[0] != kCorpusTag) throw ValidationError("missing corpus header");
  if (f[1] != "v1") throw ValidationError("unsupported corpus version " + f[1]);
  if (f[2] != kind) throw ValidationError("expected " + kind + " records, file holds " + f[2]);
  return FeatureSpace::from_json(json::parse(f[3]));
}

}  // namespace io_detail

inline std::string format_aux(const FeatureSpace& space, const std::vector<AuxSample>& v) {
  std::string s = io_detail::header(space, "aux");
  for (const auto& a : v) {
    s += io_detail::join_ints(a.user, ',') + '\t' + to_string(a.behavior) + '\t' + std::to_string(a.item) + '\t' +
         std::to_string(a.label) + '\n';
  }
  return s;
}

inline std::string format_talk(const FeatureSpace& space, const std::vector<TalkSample>& v) {
  std::string s = io_detail::header(space, "talk");
  for (const auto& t : v) {
    s += io_detail::join_ints(t.user, ',') + '\t' + std::to_string(t.topic) + '\t' + std::to_string(t.label) + '\n';
  }
  return s;
}

inline std::string format_scripts(const FeatureSpace& space, const std::vector<ScriptSample>& v) {
  std::string s = io_detail::header(space, "script");
  for (const auto& sc : v) {
    s += io_detail::join_ints(sc.user, ',') + '\t' + io_detail::join_ints(sc.topics, ' ') + '\t';
    for (std::size_t i = 0; i < sc.sentences.size(); ++i) {
      if (i) s += '|';
      s += io_detail::join_ints(sc.sentences[i], ' ');
    }
    s += '\n';
  }
  return s;
}

inline void write_corpus(const std::filesystem::path& dir, const Corpus& c) {
  write_file_atomic(dir / "aux.tsv", format_aux(c.space, c.aux));
  write_file_atomic(dir / "talk.tsv", format_talk(c.space, c.talk));
  write_file_atomic(dir / "scripts.tsv", format_scripts(c.space, c.scripts));
}

/// Reads the three files back, validating every record against the header's
/// FeatureSpace. `max_topic_len` / `max_doc_len` bound script records.
inline Corpus read_corpus(const std::filesystem::path& dir, int max_topic_len, int max_doc_len) {
  using namespace io_detail;
  Corpus c;
  auto open = [&](const char* name) {
    std::ifstream in(dir / name);
    if (!in) throw DependencyError("missing corpus file " + (dir / name).string());
    return in;
  };
  auto context = [](const char* file, int line, const std::exception& e) {
    return ValidationError(std::string(file) + ":" + std::to_string(line) + ": " + e.what());
  };
  {
    auto in = open("aux.tsv");
    c.space = read_header(in, "aux");
    std::string line;
    int ln = 1;
    while (std::getline(in, line)) {
      ++ln;
      try {
        const auto f = split(line, '\t');
        if (f.size() != 4) throw ValidationError("expected 4 fields");
        AuxSample a{parse_ints(f[0], ','), behavior_from_string(f[1]), parse_int(f[2]), parse_int(f[3])};
        encode_sample(c.space, a.user, a.item, EntityKind::item);
        if (a.label != 0 && a.label != 1) throw ValidationError("label must be 0 or 1");
        c.aux.push_back(std::move(a));
      } catch (const std::exception& e) {
        throw context("aux.tsv", ln, e);
      }
    }
  }
  {
    auto in = open("talk.tsv");
    if (!(read_header(in, "talk") == c.space)) throw ValidationError("talk.tsv feature space differs from aux.tsv");
    std::string line;
    int ln = 1;
    while (std::getline(in, line)) {
      ++ln;
      try {
        const auto f = split(line, '\t');
        if (f.size() != 3) throw ValidationError("expected 3 fields");
        TalkSample t{parse_ints(f[0], ','), parse_int(f[1]), parse_int(f[2])};
        encode_sample(c.space, t.user, t.topic, EntityKind::topic);
        if (t.label != 0 && t.label != 1) throw ValidationError("label must be 0 or 1");
        c.talk.push_back(std::move(t));
      } catch (const std::exception& e) {
        throw context("talk.tsv", ln, e);
      }
    }
  }
  {
    auto in = open("scripts.tsv");
    if (!(read_header(in, "script") == c.space)) throw ValidationError("scripts.tsv feature space differs");
    std::string line;
    int ln = 1;
    while (std::getline(in, line)) {
      ++ln;
      try {
        const auto f = split(line, '\t');
        if (f.size() != 3) throw ValidationError("expected 3 fields");
        ScriptSample s;
        s.user = parse_ints(f[0], ',');
        s.topics = parse_ints(f[1], ' ');
        for (const auto& sent : split(f[2], '|')) s.sentences.push_back(parse_ints(sent, ' '));
        validate_script(c.space, s, max_topic_len, max_doc_len);
        c.scripts.push_back(std::move(s));
      } catch (const std::exception& e) {
        throw context("scripts.tsv", ln, e);
      }
    }
  }
  return c;
}

}  // namespace posgen::corpus
