#pragma once

// End-to-end orchestration: configuration, stages, run manifest and report.
//
// Output directory layout
//   manifest.json
//   data/{aux,talk,scripts}.tsv                       gen-data
//   checkpoints/satl.ckpt, reports/satl_train.tsv     train-satl
//   checkpoints/{cmu,sg}.ckpt,
//   reports/{cmu_train,sg_trace}.tsv                  train-csg
//   reports/{ranking,planning,sentence}.tsv           evaluate
//   reports/generated.tsv                             generate
//   report/{summary.md,ranking.tsv,planning.tsv,kl_trace.tsv}  report

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "posgen/cmu.hpp"
#include "posgen/core/checkpoint.hpp"
#include "posgen/core/config_json.hpp"
#include "posgen/corpus.hpp"
#include "posgen/eval.hpp"
#include "posgen/satl.hpp"
#include "posgen/sg.hpp"

namespace posgen::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::json;
using Real = double;

struct CorpusSection {
  int topic_vocab_size = 20;
  int item_vocab_size = 120;
  int word_vocab_size = 300;
  double train_fraction = 0.8;
  /// Share of the talk training split held out for SATL validation.
  double validation_fraction = 0.1;
  corpus::GeneratorConfig generator{};

  corpus::FeatureSpace space() const {
    return corpus::desk_feature_space(topic_vocab_size, item_vocab_size, word_vocab_size);
  }
};

struct EvalSection {
  int n = 10;
  /// SATL recommendations handed to the planner at generation time.
  int candidates = 10;
  int generate_users = 50;
};

struct PipelineConfig {
  std::uint64_t seed = 7;
  std::string out = "run";
  CorpusSection corpus;
  satl::SatlConfig satl;
  cmu::CmuConfig cmu;
  sg::SgConfig sg;
  EvalSection eval;

  json corpus_json() const {
    const auto& g = corpus.generator;
    return {{"topic_vocab_size", corpus.topic_vocab_size},
            {"item_vocab_size", corpus.item_vocab_size},
            {"word_vocab_size", corpus.word_vocab_size},
            {"train_fraction", corpus.train_fraction},
            {"validation_fraction", corpus.validation_fraction},
            {"generator",
             {{"num_users", g.num_users},
              {"aux_samples", g.aux_samples},
              {"talk_samples", g.talk_samples},
              {"scripts", g.scripts},
              {"aux_talk_ratio", g.aux_talk_ratio},
              {"insurance_items", g.insurance_items},
              {"latent_rank", g.latent_rank},
              {"aux_signal", g.aux_signal},
              {"talk_signal", g.talk_signal},
              {"topic_bias_std", g.topic_bias_std},
              {"behavior_mix", g.behavior_mix},
              {"behavior_bias", g.behavior_bias},
              {"max_topic_len", g.max_topic_len},
              {"word_noise", g.word_noise}}}};
  }

  json to_json() const {
    return {{"seed", seed},
            {"out", out},
            {"corpus", corpus_json()},
            {"satl", satl.to_json()},
            {"cmu", cmu.to_json()},
            {"sg", sg.to_json()},
            {"eval", {{"n", eval.n}, {"candidates", eval.candidates}, {"generate_users", eval.generate_users}}}};
  }

  static PipelineConfig from_json(const json& j) {
    PipelineConfig c;
    StrictObject o(j, "config");
    o.get("seed", c.seed).get("out", c.out);
    if (o.has("corpus")) {
      StrictObject co(o.child("corpus"), "corpus");
      co.get("topic_vocab_size", c.corpus.topic_vocab_size)
          .get("item_vocab_size", c.corpus.item_vocab_size)
          .get("word_vocab_size", c.corpus.word_vocab_size)
          .get("train_fraction", c.corpus.train_fraction)
          .get("validation_fraction", c.corpus.validation_fraction);
      if (co.has("generator")) {
        auto& g = c.corpus.generator;
        StrictObject go(co.child("generator"), "corpus.generator");
        go.get("num_users", g.num_users)
            .get("aux_samples", g.aux_samples)
            .get("talk_samples", g.talk_samples)
            .get("scripts", g.scripts)
            .get("aux_talk_ratio", g.aux_talk_ratio)
            .get("insurance_items", g.insurance_items)
            .get("latent_rank", g.latent_rank)
            .get("aux_signal", g.aux_signal)
            .get("talk_signal", g.talk_signal)
            .get("topic_bias_std", g.topic_bias_std)
            .get("behavior_mix", g.behavior_mix)
            .get("behavior_bias", g.behavior_bias)
            .get("max_topic_len", g.max_topic_len)
            .get("word_noise", g.word_noise);
        go.finish();
      }
      co.finish();
    }
    if (o.has("satl")) c.satl = satl::SatlConfig::from_json(o.child("satl"));
    if (o.has("cmu")) c.cmu = cmu::CmuConfig::from_json(o.child("cmu"));
    if (o.has("sg")) c.sg = sg::SgConfig::from_json(o.child("sg"));
    if (o.has("eval")) {
      StrictObject eo(o.child("eval"), "eval");
      eo.get("n", c.eval.n).get("candidates", c.eval.candidates).get("generate_users", c.eval.generate_users);
      eo.finish();
    }
    o.finish();
    c.validate();
    return c;
  }

  /// Section checks plus cross-references between modules.
  void validate() const {
    const auto sp = corpus.space();
    try {
      sp.validate();
    } catch (const Error& e) {
      throw ConfigError(std::string("corpus: ") + e.what());
    }
    corpus.generator.validate(sp);
    if (!(corpus.train_fraction > 0 && corpus.train_fraction < 1)) throw ConfigError("corpus.train_fraction must lie in (0, 1)");
    if (!(corpus.validation_fraction > 0 && corpus.validation_fraction < 1)) {
      throw ConfigError("corpus.validation_fraction must lie in (0, 1)");
    }
    satl.validate();
    cmu.validate();
    sg.validate();
    if (cmu.user_emb_size != satl.emb_size || cmu.item_emb_size != satl.emb_size) {
      throw ConfigError("cmu.user_emb_size and cmu.item_emb_size must equal satl.emb_size");
    }
    if (sg.topic_emb_size != satl.emb_size) throw ConfigError("sg.topic_emb_size must equal satl.emb_size");
    if (cmu.max_topic_len != corpus.generator.max_topic_len) {
      throw ConfigError("cmu.max_topic_len must equal corpus.generator.max_topic_len");
    }
    if (eval.n < 1 || eval.n > corpus.topic_vocab_size) throw ConfigError("eval.n must lie in [1, topic_vocab_size]");
    if (eval.candidates < 1 || eval.candidates > corpus.topic_vocab_size) {
      throw ConfigError("eval.candidates must lie in [1, topic_vocab_size]");
    }
    if (eval.generate_users < 1) throw ConfigError("eval.generate_users must be >= 1");
  }

  /// Hash of everything that shapes results; the output directory is excluded.
  std::string hash() const {
    json j = to_json();
    j.erase("out");
    return hex64(fnv1a64(j.dump()));
  }
};

/// Parses `value` as JSON when possible, otherwise takes it as a string.
inline json parse_override_value(const std::string& value) {
  try {
    return json::parse(value);
  } catch (const json::exception&) {
    return value;
  }
}

/// Applies `key=value` with a dotted key path.
inline void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  json* node = &j;
  std::size_t at = 0;
  while (true) {
    const auto dot = key.find('.', at);
    const std::string part = key.substr(at, dot == std::string::npos ? std::string::npos : dot - at);
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
    if (!node->is_object()) throw ConfigError("override key '" + key + "' descends into a non-object");
    if (dot == std::string::npos) {
      (*node)[part] = parse_override_value(assignment.substr(eq + 1));
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = json::object();
    at = dot + 1;
  }
}

inline json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline PipelineConfig load_config(const std::optional<fs::path>& path, const std::vector<std::string>& overrides) {
  json j = path ? read_json_file(*path) : json::object();
  for (const auto& o : overrides) apply_override(j, o);
  return PipelineConfig::from_json(j);
}

// ---------------------------------------------------------------------------
// Manifest

inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names = {"gen-data", "train-satl", "train-csg", "evaluate", "generate"};
  return names;
}

/// Config sections a stage's outputs depend on.
inline std::string stage_config_hash(const PipelineConfig& c, const std::string& stage) {
  json j = {{"seed", c.seed}, {"corpus", c.corpus_json()}};
  if (stage == "gen-data") return hex64(fnv1a64(j.dump()));
  j["satl"] = c.satl.to_json();
  if (stage == "train-satl") return hex64(fnv1a64(j.dump()));
  j["cmu"] = c.cmu.to_json();
  j["sg"] = c.sg.to_json();
  if (stage == "train-csg") return hex64(fnv1a64(j.dump()));
  j["eval"] = {{"n", c.eval.n}, {"candidates", c.eval.candidates}, {"generate_users", c.eval.generate_users}};
  return hex64(fnv1a64(j.dump()));
}

inline std::uint64_t stage_seed(std::uint64_t seed, const std::string& name) { return Rng::mix(seed ^ fnv1a64(name)); }

struct RunManifest {
  fs::path dir;
  json doc = json::object();

  static fs::path path_in(const fs::path& dir) { return dir / "manifest.json"; }

  static RunManifest open(const fs::path& dir) {
    RunManifest m;
    m.dir = dir;
    if (fs::exists(path_in(dir))) {
      std::ifstream in(path_in(dir));
      try {
        m.doc = json::parse(in);
      } catch (const json::exception& e) {
        throw DependencyError("manifest unreadable: " + std::string(e.what()));
      }
    }
    if (!m.doc.contains("stages")) m.doc["stages"] = json::object();
    return m;
  }

  void save() const { write_file_atomic(path_in(dir), doc.dump(2) + "\n"); }

  bool has_stage(const std::string& s) const { return doc.at("stages").contains(s); }

  const json& stage(const std::string& s) const {
    if (!has_stage(s)) throw DependencyError("stage '" + s + "' has not run in " + dir.string());
    return doc.at("stages").at(s);
  }

  /// Manifest content without timestamps.
  json comparable() const {
    json j = doc;
    j.erase("timestamps");
    return j;
  }
};

inline std::string file_hash(const fs::path& p) { return hex64(fnv1a64(read_file(p))); }

inline std::string now_iso() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

namespace detail {

/// Resolves an artifact recorded by `stage`, checking presence, hash and
/// the configuration it was produced under.
inline fs::path require_artifact(const RunManifest& m, const PipelineConfig& cfg, const std::string& stage,
                                 const std::string& rel) {
  if (!m.has_stage(stage)) {
    throw DependencyError("missing " + rel + ": stage '" + stage + "' has not run");
  }
  const json& st = m.stage(stage);
  if (st.at("config_hash").get<std::string>() != stage_config_hash(cfg, stage)) {
    throw ConfigError("artifacts of stage '" + stage + "' were produced under a different configuration");
  }
  if (!st.at("artifacts").contains(rel)) throw DependencyError("missing " + rel + " in the manifest");
  const fs::path p = m.dir / rel;
  if (!fs::exists(p)) throw DependencyError("missing " + rel + " on disk");
  if (file_hash(p) != st.at("artifacts").at(rel).get<std::string>()) {
    throw DependencyError(rel + " does not match the hash recorded in the manifest");
  }
  return p;
}

struct StageWriter {
  RunManifest& m;
  std::string stage;
  json artifacts = json::object();
  json checkpoints = json::object();

  void text(const std::string& rel, const std::string& body) {
    write_file_atomic(m.dir / rel, body);
    artifacts[rel] = hex64(fnv1a64(body));
  }

  template <class T>
  void checkpoint(const std::string& name, const std::string& rel, const Checkpoint<T>& ck) {
    const std::string bytes = serialize_checkpoint(ck);
    write_file_atomic(m.dir / rel, bytes);
    artifacts[rel] = hex64(fnv1a64(bytes));
    checkpoints[name] = {{"path", rel}, {"id", checkpoint_id_of(bytes)}};
  }

  void commit(const PipelineConfig& cfg, const std::string& started, json extra = json::object()) {
    json entry = {{"config_hash", stage_config_hash(cfg, stage)}, {"artifacts", artifacts}};
    if (!checkpoints.empty()) entry["checkpoints"] = checkpoints;
    for (auto& [k, v] : extra.items()) entry[k] = v;
    m.doc["stages"][stage] = entry;
    m.doc["config_hash"] = cfg.hash();
    m.doc["seeds"]["global"] = cfg.seed;
    m.doc["seeds"][stage] = stage_seed(cfg.seed, stage);
    m.doc["timestamps"][stage] = {{"started", started}, {"finished", now_iso()}};
    m.save();
  }
};

struct Data {
  corpus::Corpus corpus;
  std::vector<corpus::TalkSample> talk_train, talk_val, talk_test;
  std::vector<corpus::ScriptSample> scripts_train, scripts_test;
};

inline Data load_data(const RunManifest& m, const PipelineConfig& cfg) {
  for (const char* f : {"data/aux.tsv", "data/talk.tsv", "data/scripts.tsv"}) require_artifact(m, cfg, "gen-data", f);
  Data d;
  d.corpus = corpus::read_corpus(m.dir / "data", cfg.corpus.generator.max_topic_len, cfg.sg.max_doc_len);
  if (!(d.corpus.space == cfg.corpus.space())) throw ConfigError("corpus feature space differs from the configuration");
  const std::uint64_t split = stage_seed(cfg.seed, "split");
  auto [talk_train, talk_test] = corpus::split_train_test(d.corpus.talk, cfg.corpus.train_fraction, split);
  auto [fit, val] = corpus::split_train_test(talk_train, 1.0 - cfg.corpus.validation_fraction, split + 1);
  d.talk_train = std::move(fit);
  d.talk_val = std::move(val);
  d.talk_test = std::move(talk_test);
  auto [st, ss] = corpus::split_train_test(d.corpus.scripts, cfg.corpus.train_fraction, split + 2);
  d.scripts_train = std::move(st);
  d.scripts_test = std::move(ss);
  return d;
}

inline satl::SatlModel<Real> load_satl(const RunManifest& m, const PipelineConfig& cfg, std::string* id = nullptr) {
  const auto p = require_artifact(m, cfg, "train-satl", "checkpoints/satl.ckpt");
  const auto space = cfg.corpus.space();
  return satl::from_checkpoint(load_checkpoint<Real>(p, id), &space);
}

inline std::vector<cmu::PlanExample> plan_examples(const satl::SatlModel<Real>& model,
                                                   const std::vector<corpus::ScriptSample>& scripts) {
  std::vector<cmu::PlanExample> out;
  for (const auto& s : scripts) out.push_back({satl::user_embedding(model, s.user).vector, s.topics});
  return out;
}

inline std::string join_ints(const std::vector<int>& v, const char* sep) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? sep : "") + std::to_string(v[i]);
  return s;
}

inline std::string render_words(const std::vector<int>& s, const std::vector<std::string>& vocab) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    out += i ? " " : "";
    out += s[i] >= 0 && s[i] < static_cast<int>(vocab.size()) ? vocab[static_cast<std::size_t>(s[i])] : "?";
  }
  return out;
}

inline std::string sg_trace_tsv(const eval::MetricReport& r) {
  std::map<long, std::array<double, 4>> rows;
  const char* names[] = {"loss", "kl", "beta", "recon"};
  for (int k = 0; k < 4; ++k)
    for (const auto& [step, v] : r.series(names[k])) rows[step][static_cast<std::size_t>(k)] = v;
  std::string s = "step\tloss\tkl\tbeta\trecon\n";
  for (const auto& [step, v] : rows) {
    s += std::to_string(step);
    for (double x : v) s += "\t" + eval::format_double(x);
    s += "\n";
  }
  return s;
}

// ---- stages ---------------------------------------------------------------

inline void gen_data(RunManifest& m, const PipelineConfig& cfg, const std::string& started) {
  const auto c = corpus::generate_synthetic_corpus(cfg.corpus.space(), cfg.corpus.generator,
                                                   stage_seed(cfg.seed, "gen-data"));
  StageWriter w{m, "gen-data"};
  w.text("data/aux.tsv", corpus::format_aux(c.space, c.aux));
  w.text("data/talk.tsv", corpus::format_talk(c.space, c.talk));
  w.text("data/scripts.tsv", corpus::format_scripts(c.space, c.scripts));
  w.commit(cfg, started,
           {{"counts", {{"aux", c.aux.size()}, {"talk", c.talk.size()}, {"scripts", c.scripts.size()}}}});
}

inline void train_satl_stage(RunManifest& m, const PipelineConfig& cfg, const std::string& started) {
  const auto d = load_data(m, cfg);
  const std::uint64_t seed = stage_seed(cfg.seed, "train-satl");
  satl::SatlModel<Real> model(d.corpus.space, cfg.satl, seed);
  satl::Validation val{{}, d.talk_val};
  auto [trained, report] = satl::train_satl(std::move(model), d.corpus.aux, d.talk_train, cfg.satl, seed + 1, &val);
  StageWriter w{m, "train-satl"};
  w.checkpoint("satl", "checkpoints/satl.ckpt", satl::to_checkpoint(trained));
  w.text("reports/satl_train.tsv", report.format_scalars() + report.format_trace());
  w.commit(cfg, started);
}

inline void train_csg_stage(RunManifest& m, const PipelineConfig& cfg, const std::string& started) {
  const auto d = load_data(m, cfg);
  std::string satl_id;
  const auto sat = load_satl(m, cfg, &satl_id);
  const auto topics = satl::topic_embeddings(sat);
  const std::uint64_t seed = stage_seed(cfg.seed, "train-csg");

  cmu::CmuModel<Real> planner(cfg.corpus.topic_vocab_size, cfg.cmu, seed);
  planner.topic_embedding.value = topics;
  auto [plan, plan_report] = cmu::train_cmu(std::move(planner), plan_examples(sat, d.scripts_train), cfg.cmu, seed + 1);

  sg::SgModel<Real> gen(cfg.corpus.topic_vocab_size, d.corpus.space.word_vocab_size(), cfg.sg, seed + 2);
  gen.topic_embedding.value = topics;
  auto [sentences, sg_report] = sg::train_sg(std::move(gen), d.scripts_train, cfg.sg, seed + 3);

  StageWriter w{m, "train-csg"};
  w.checkpoint("cmu", "checkpoints/cmu.ckpt", cmu::to_checkpoint(plan, satl_id));
  w.checkpoint("sg", "checkpoints/sg.ckpt",
               sg::to_checkpoint(sentences, d.corpus.space.word_vocab_hash(), satl_id));
  w.text("reports/cmu_train.tsv", plan_report.format_scalars() + plan_report.format_trace());
  w.text("reports/sg_trace.tsv", sg_trace_tsv(sg_report));
  w.commit(cfg, started, {{"satl_checkpoint", satl_id}});
}

struct CsgModels {
  satl::SatlModel<Real> satl;
  cmu::CmuModel<Real> cmu;
  sg::SgModel<Real> sg;
};

inline CsgModels load_all(const RunManifest& m, const PipelineConfig& cfg, const corpus::FeatureSpace& space) {
  std::string satl_id;
  CsgModels out{load_satl(m, cfg, &satl_id), {}, {}};
  const auto cmu_ck = load_checkpoint<Real>(require_artifact(m, cfg, "train-csg", "checkpoints/cmu.ckpt"));
  const auto sg_ck = load_checkpoint<Real>(require_artifact(m, cfg, "train-csg", "checkpoints/sg.ckpt"));
  if (cmu_ck.meta.at("satl_checkpoint").get<std::string>() != satl_id ||
      sg_ck.meta.at("satl_checkpoint").get<std::string>() != satl_id) {
    throw DependencyError("planner/generator checkpoints were built on a different SATL checkpoint");
  }
  if (sg_ck.meta.at("word_vocab_hash").get<std::string>() != space.word_vocab_hash()) {
    throw DependencyError("sg checkpoint word vocabulary differs from the corpus");
  }
  out.cmu = cmu::from_checkpoint(cmu_ck);
  out.sg = sg::from_checkpoint(sg_ck);
  return out;
}

struct PlanScores {
  std::map<int, std::array<double, 3>> by_len;  // length -> (count, sim sum, cov sum)
  void add(std::size_t len, double sim, double cov) {
    for (int key : {static_cast<int>(len), 0}) {
      auto& a = by_len[key];
      a[0] += 1;
      a[1] += sim;
      a[2] += cov;
    }
  }
};

inline void evaluate_stage(RunManifest& m, const PipelineConfig& cfg, const std::string& started) {
  const auto d = load_data(m, cfg);
  const auto models = load_all(m, cfg, d.corpus.space);
  const int n = cfg.eval.n;
  const std::string nn = std::to_string(n);
  StageWriter w{m, "evaluate"};

  // Ranking: SATL vs LR on the talk test split.
  const auto sat = satl::evaluate_satl(models.satl, d.talk_test, n);
  const auto lr = satl::lr_baseline(d.corpus.space, d.talk_train, d.talk_test, n);
  std::string rank = "model\tauc\tndcg@" + nn + "\trecall@" + nn + "\n";
  auto row = [&](const std::string& name, const eval::MetricReport& r) {
    rank += name + "\t" + eval::format_double(r.get("auc")) + "\t" + eval::format_double(r.get("ndcg@" + nn)) + "\t" +
            eval::format_double(r.get("recall@" + nn)) + "\n";
  };
  row("SATL", sat);
  row("LR", lr);
  rank += "RelImp\t" + eval::format_double(eval::relative_improvement(sat.get("auc"), lr.get("auc"))) + "\t" +
          eval::format_double(eval::relative_improvement(sat.get("ndcg@" + nn), lr.get("ndcg@" + nn))) + "\t" +
          eval::format_double(eval::relative_improvement(sat.get("recall@" + nn), lr.get("recall@" + nn))) + "\n";
  w.text("reports/ranking.tsv", rank);

  // Planning: CMU vs a planner that never sees the user, ordering the gold
  // topic set of each test script.
  cmu::CmuConfig blind_cfg = cfg.cmu;
  blind_cfg.use_user = false;
  cmu::CmuModel<Real> blind(cfg.corpus.topic_vocab_size, blind_cfg, stage_seed(cfg.seed, "train-csg"));
  blind.topic_embedding.value = satl::topic_embeddings(models.satl);
  blind = cmu::train_cmu(std::move(blind), plan_examples(models.satl, d.scripts_train), blind_cfg,
                         stage_seed(cfg.seed, "train-csg") + 1)
              .first;
  PlanScores with_user, without_user;
  for (const auto& s : d.scripts_test) {
    const auto u = satl::user_embedding(models.satl, s.user).vector;
    const auto a = cmu::beam_search_plan(models.cmu, u, s.topics, cfg.cmu).topics;
    const auto b = cmu::beam_search_plan(blind, u, s.topics, blind_cfg).topics;
    with_user.add(s.topics.size(), eval::sequence_similarity(a, s.topics), eval::coverage(a, s.topics));
    without_user.add(s.topics.size(), eval::sequence_similarity(b, s.topics), eval::coverage(b, s.topics));
  }
  std::string plan = "planner\tlength\tcount\tsimilarity\tcoverage\n";
  for (const auto& [name, ps] : {std::pair{"CMU", &with_user}, std::pair{"no-user", &without_user}}) {
    for (const auto& [len, a] : ps->by_len) {
      plan += std::string(name) + "\t" + (len == 0 ? "all" : std::to_string(len)) + "\t" +
              std::to_string(static_cast<int>(a[0])) + "\t" + eval::format_double(a[1] / a[0]) + "\t" +
              eval::format_double(a[2] / a[0]) + "\n";
    }
  }
  w.text("reports/planning.tsv", plan);

  // Sentences: generate from gold topics, compare position by position.
  std::vector<std::vector<int>> train_sentences;
  for (const auto& s : d.scripts_train) train_sentences.insert(train_sentences.end(), s.sentences.begin(), s.sentences.end());
  const auto idf = eval::idf_weights(train_sentences, d.corpus.space.word_vocab_size());
  const Eigen::MatrixXd emb = models.sg.word_embedding.value;
  Rng eps(stage_seed(cfg.seed, "evaluate"));
  double b1 = 0, b4 = 0, sim = 0, cov = 0;
  int count = 0;
  for (const auto& s : d.scripts_test) {
    const auto gen = sg::generate_script(models.sg, s.topics, eps);
    for (std::size_t i = 0; i < gen.size(); ++i) {
      b1 += eval::bleu(gen[i], s.sentences[i], 1);
      b4 += eval::bleu(gen[i], s.sentences[i], 4);
      sim += eval::sentence_similarity(gen[i], s.sentences[i], emb, idf, 8);
      cov += eval::coverage(gen[i], s.sentences[i]);
      ++count;
    }
  }
  std::string sent = "metric\tvalue\n";
  if (count > 0) {
    sent += "bleu1\t" + eval::format_double(b1 / count) + "\n";
    sent += "bleu4\t" + eval::format_double(b4 / count) + "\n";
    sent += "similarity\t" + eval::format_double(sim / count) + "\n";
    sent += "coverage\t" + eval::format_double(cov / count) + "\n";
  }
  sent += "sentences\t" + std::to_string(count) + "\n";
  sent += "coherence\tnot computed\nrelevance\tnot computed\n";
  w.text("reports/sentence.tsv", sent);
  w.commit(cfg, started);
}

inline void generate_stage(RunManifest& m, const PipelineConfig& cfg, const std::string& started) {
  const auto d = load_data(m, cfg);
  const auto models = load_all(m, cfg, d.corpus.space);
  Rng eps(stage_seed(cfg.seed, "generate"));
  std::set<corpus::UserFeatures> seen;
  std::string out = "user\ttopics\tscript\n";
  for (const auto& s : d.scripts_test) {
    if (static_cast<int>(seen.size()) >= cfg.eval.generate_users) break;
    if (!seen.insert(s.user).second) continue;
    std::vector<int> cands;
    for (const auto& r : satl::recommend_topics(models.satl, s.user, cfg.eval.candidates)) cands.push_back(r.topic);
    const auto u = satl::user_embedding(models.satl, s.user).vector;
    const auto plan = cmu::beam_search_plan(models.cmu, u, cands, cfg.cmu).topics;
    const auto script = sg::generate_script(models.sg, plan, eps);
    std::string text;
    for (std::size_t i = 0; i < script.size(); ++i) text += (i ? " | " : "") + render_words(script[i], d.corpus.space.word_vocab);
    out += join_ints(s.user, ",") + "\t" + join_ints(plan, " ") + "\t" + text + "\n";
  }
  StageWriter w{m, "generate"};
  w.text("reports/generated.tsv", out);
  w.commit(cfg, started);
}

}  // namespace detail

/// Runs one stage, records its artifacts in the manifest and saves it.
inline RunManifest& run_stage(const std::string& stage, const PipelineConfig& cfg, RunManifest& manifest) {
  const std::string started = now_iso();
  if (stage == "gen-data") {
    detail::gen_data(manifest, cfg, started);
  } else if (stage == "train-satl") {
    detail::train_satl_stage(manifest, cfg, started);
  } else if (stage == "train-csg") {
    detail::train_csg_stage(manifest, cfg, started);
  } else if (stage == "evaluate") {
    detail::evaluate_stage(manifest, cfg, started);
  } else if (stage == "generate") {
    detail::generate_stage(manifest, cfg, started);
  } else {
    throw ConfigError("unknown stage '" + stage + "'");
  }
  return manifest;
}

// ---------------------------------------------------------------------------
// Report

namespace detail {

inline std::optional<std::string> read_recorded(const RunManifest& m, const std::string& stage, const std::string& rel) {
  if (!m.has_stage(stage)) return std::nullopt;
  const auto& a = m.stage(stage).at("artifacts");
  if (!a.contains(rel)) return std::nullopt;
  const fs::path p = m.dir / rel;
  if (!fs::exists(p)) return std::nullopt;
  const std::string body = read_file(p);
  if (hex64(fnv1a64(body)) != a.at(rel).get<std::string>()) return std::nullopt;
  return body;
}

inline std::vector<std::vector<std::string>> parse_tsv(const std::string& body) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(body);
  std::string line;
  while (std::getline(in, line)) rows.push_back(corpus::io_detail::split(line, '\t'));
  return rows;
}

inline std::string markdown_table(const std::vector<std::vector<std::string>>& rows) {
  if (rows.empty()) return "";
  std::string s;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    s += "|";
    for (const auto& c : rows[r]) s += " " + c + " |";
    s += "\n";
    if (r == 0) {
      s += "|";
      for (std::size_t i = 0; i < rows[0].size(); ++i) s += "---|";
      s += "\n";
    }
  }
  return s;
}

}  // namespace detail

struct ReportFiles {
  std::string summary;
  std::optional<std::string> ranking, planning, kl_trace;
};

/// Builds the human-readable summary and plot-ready files from whatever the
/// manifest records; sections without their inputs are marked absent.
inline ReportFiles build_report(const RunManifest& m) {
  ReportFiles r;
  std::string& s = r.summary;
  s = "# Run report\n\n";
  if (m.doc.contains("config_hash")) s += "Config hash: `" + m.doc.at("config_hash").get<std::string>() + "`\n\n";

  s += "## Topic recommendation\n\n";
  if (auto body = detail::read_recorded(m, "evaluate", "reports/ranking.tsv")) {
    r.ranking = *body;
    s += detail::markdown_table(detail::parse_tsv(*body)) + "\n";
  } else {
    s += "absent\n\n";
  }

  s += "## Topic planning (similarity / coverage by sequence length)\n\n";
  if (auto body = detail::read_recorded(m, "evaluate", "reports/planning.tsv")) {
    r.planning = *body;
    s += detail::markdown_table(detail::parse_tsv(*body)) + "\n";
  } else {
    s += "absent\n\n";
  }

  s += "## Sentence generation\n\n";
  if (auto body = detail::read_recorded(m, "evaluate", "reports/sentence.tsv")) {
    s += detail::markdown_table(detail::parse_tsv(*body)) + "\n";
  } else {
    s += "absent\n\n";
  }

  s += "## Generator training trace (loss, KL, beta vs step)\n\n";
  if (auto body = detail::read_recorded(m, "train-csg", "reports/sg_trace.tsv")) {
    r.kl_trace = *body;
    const auto rows = detail::parse_tsv(*body);
    s += "Series in `kl_trace.tsv`, " + std::to_string(rows.size() - 1) + " steps.\n\n";
  } else {
    s += "absent\n\n";
  }

  s += "## Generated scripts\n\n";
  if (auto body = detail::read_recorded(m, "generate", "reports/generated.tsv")) {
    const auto rows = detail::parse_tsv(*body);
    s += std::to_string(rows.size() - 1) + " users in `reports/generated.tsv`.\n";
  } else {
    s += "absent\n";
  }
  return r;
}

/// Writes report/{summary.md, ranking.tsv, planning.tsv, kl_trace.tsv}.
inline ReportFiles emit_report(const RunManifest& m) {
  auto r = build_report(m);
  const fs::path dir = m.dir / "report";
  write_file_atomic(dir / "summary.md", r.summary);
  auto put = [&](const char* name, const std::optional<std::string>& body) {
    if (body) {
      write_file_atomic(dir / name, *body);
    } else if (fs::exists(dir / name)) {
      fs::remove(dir / name);
    }
  };
  put("ranking.tsv", r.ranking);
  put("planning.tsv", r.planning);
  put("kl_trace.tsv", r.kl_trace);
  return r;
}

}  // namespace posgen::pipeline
