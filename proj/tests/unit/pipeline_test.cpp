#include <gtest/gtest.h>

#include <cstdlib>
#include <sys/wait.h>

#include "posgen/pipeline.hpp"

using namespace posgen;
using namespace posgen::pipeline;

namespace {

std::vector<std::string> tiny_overrides() {
  return {"corpus.topic_vocab_size=6",
          "corpus.item_vocab_size=20",
          "corpus.word_vocab_size=100",
          "corpus.generator.num_users=40",
          "corpus.generator.aux_samples=800",
          "corpus.generator.talk_samples=300",
          "corpus.generator.scripts=40",
          "corpus.generator.insurance_items=5",
          "corpus.generator.max_topic_len=3",
          "satl.emb_size=8",
          "satl.private_dnn_layer=1",
          "satl.expert_dnn_layer=1",
          "satl.expert_num=2",
          "satl.phase1_epochs=1",
          "satl.phase2_epochs=2",
          "satl.check_period=5",
          "cmu.user_emb_size=8",
          "cmu.item_emb_size=8",
          "cmu.hidden_size=4",
          "cmu.head_width=4",
          "cmu.max_topic_len=3",
          "cmu.epochs=2",
          "sg.topic_emb_size=8",
          "sg.emb_size=6",
          "sg.hidden_size=4",
          "sg.num_layers=1",
          "sg.latent_size=3",
          "sg.latent_net_width=4",
          "sg.max_doc_len=40",
          "sg.epochs=2",
          "sg.cycle=3",
          "sg.sp0=2",
          "eval.n=3",
          "eval.candidates=4",
          "eval.generate_users=3"};
}

fs::path fresh_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("posgen_pipeline_" + name);
  fs::remove_all(d);
  return d;
}

PipelineConfig tiny(const fs::path& out, std::vector<std::string> extra = {}) {
  auto ov = tiny_overrides();
  ov.push_back("out=" + out.string());
  ov.insert(ov.end(), extra.begin(), extra.end());
  return load_config(std::nullopt, ov);
}

RunManifest run_all(const PipelineConfig& cfg) {
  auto m = RunManifest::open(cfg.out);
  for (const auto& s : stage_names()) run_stage(s, cfg, m);
  return m;
}

int cli(const std::string& args) {
  const int rc = std::system((std::string(POSGEN_CLI) + " " + args + " 2>/dev/null").c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST(Config, DefaultsAreTheDocumentedValues) {
  const PipelineConfig c;
  EXPECT_EQ(c.satl.emb_size, 128);
  EXPECT_EQ(c.satl.expert_num, 16);
  EXPECT_EQ(c.satl.check_period, 50);
  EXPECT_EQ(c.cmu.max_topic_len, 5);
  EXPECT_EQ(c.cmu.stop_prob, 0.04);
  EXPECT_EQ(c.sg.cycle, 4000);
  EXPECT_EQ(c.sg.sp0, 1000);
  EXPECT_EQ(c.sg.k, 0.003);
  EXPECT_EQ(c.sg.latent_size, 300);
  EXPECT_EQ(c.eval.n, 10);
  EXPECT_EQ(c.corpus.generator.aux_samples, 50000);
  EXPECT_EQ(c.corpus.generator.talk_samples, 2000);
  EXPECT_EQ(c.corpus.generator.scripts, 1000);
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(PipelineConfig::from_json(c.to_json()).hash(), c.hash());
}

TEST(Config, OverridesParseValuesAndPaths) {
  json j = json::object();
  apply_override(j, "satl.alpha=0.25");
  apply_override(j, "sg.schedule=constant");
  apply_override(j, "cmu.use_user=false");
  EXPECT_EQ(j["satl"]["alpha"], 0.25);
  EXPECT_EQ(j["sg"]["schedule"], "constant");
  EXPECT_EQ(j["cmu"]["use_user"], false);
  EXPECT_THROW(apply_override(j, "novalue"), ConfigError);
  EXPECT_THROW(apply_override(j, "a..b=1"), ConfigError);
  const auto c = load_config(std::nullopt, {"satl.alpha=0.25", "seed=3"});
  EXPECT_EQ(c.satl.alpha, 0.25);
  EXPECT_EQ(c.seed, 3u);
}

TEST(Config, UnknownKeysAndBadCrossReferencesRejected) {
  EXPECT_THROW(load_config(std::nullopt, {"satl.alhpa=0.3"}), ConfigError);
  EXPECT_THROW(load_config(std::nullopt, {"bogus=1"}), ConfigError);
  EXPECT_THROW(load_config(std::nullopt, {"cmu.user_emb_size=64"}), ConfigError);
  EXPECT_THROW(load_config(std::nullopt, {"eval.n=21"}), ConfigError);
  EXPECT_THROW(load_config(std::nullopt, {"satl.alpha=\"x\""}), ConfigError);
  EXPECT_THROW(load_config(fs::path("/nonexistent/config.json"), {}), ConfigError);
}

TEST(Config, HashIgnoresOutputDirectory) {
  EXPECT_EQ(tiny("/tmp/a").hash(), tiny("/tmp/b").hash());
  EXPECT_NE(tiny("/tmp/a").hash(), tiny("/tmp/a", {"seed=9"}).hash());
}

TEST(Errors, ExitCodes) {
  EXPECT_EQ(ConfigError("x").exit_code(), 2);
  EXPECT_EQ(DependencyError("x").exit_code(), 3);
  EXPECT_EQ(DivergenceError("x", 1).exit_code(), 4);
}

TEST(Stages, MissingDependencyNamesTheCheckpoint) {
  const auto dir = fresh_dir("missing");
  const auto cfg = tiny(dir);
  auto m = RunManifest::open(dir);
  EXPECT_THROW(run_stage("train-satl", cfg, m), DependencyError);
  run_stage("gen-data", cfg, m);
  try {
    run_stage("train-csg", cfg, m);
    FAIL();
  } catch (const DependencyError& e) {
    EXPECT_NE(std::string(e.what()).find("satl.ckpt"), std::string::npos) << e.what();
  }
  EXPECT_THROW(run_stage("nope", cfg, m), ConfigError);
  fs::remove_all(dir);
}

TEST(Stages, EndToEndIdempotentAndHashChecked) {
  const auto dir = fresh_dir("e2e");
  const auto cfg = tiny(dir);
  auto m = run_all(cfg);

  int checkpoints = 0, reports = 0;
  for (const auto& [name, st] : m.doc.at("stages").items()) {
    if (st.contains("checkpoints")) checkpoints += static_cast<int>(st.at("checkpoints").size());
    for (const auto& [rel, h] : st.at("artifacts").items()) {
      reports += rel.rfind("reports/", 0) == 0;
      EXPECT_EQ(file_hash(dir / rel), h.get<std::string>()) << rel;
    }
  }
  EXPECT_EQ(checkpoints, 3);
  EXPECT_GE(reports, 3);

  const auto before = read_file(dir / "reports/ranking.tsv") + read_file(dir / "reports/planning.tsv") +
                      read_file(dir / "reports/sentence.tsv");
  run_stage("evaluate", cfg, m);
  const auto after = read_file(dir / "reports/ranking.tsv") + read_file(dir / "reports/planning.tsv") +
                     read_file(dir / "reports/sentence.tsv");
  EXPECT_EQ(before, after);
  EXPECT_NE(read_file(dir / "reports/ranking.tsv").find("ndcg@3"), std::string::npos);

  // Report: RelImp row and beta series.
  const auto rep = emit_report(m);
  ASSERT_TRUE(rep.ranking && rep.planning && rep.kl_trace);
  const auto rows = pipeline::detail::parse_tsv(*rep.ranking);
  ASSERT_EQ(rows.size(), 4u);
  for (std::size_t c = 1; c < rows[0].size(); ++c) {
    const double sat = std::stod(rows[1][c]), lr = std::stod(rows[2][c]);
    EXPECT_EQ(rows[3][0], "RelImp");
    EXPECT_EQ(std::stod(rows[3][c]), eval::relative_improvement(sat, lr));
  }
  const auto trace = pipeline::detail::parse_tsv(*rep.kl_trace);
  ASSERT_GT(trace.size(), 1u);
  for (std::size_t i = 1; i < trace.size(); ++i) {
    EXPECT_EQ(std::stod(trace[i][3]), sg::beta_schedule(std::stol(trace[i][0]), cfg.sg)) << i;
  }
  EXPECT_TRUE(fs::exists(dir / "report/summary.md"));

  // Loading under a changed configuration is refused.
  EXPECT_THROW(run_stage("train-csg", tiny(dir, {"satl.alpha=0.3"}), m), ConfigError);
  // A tampered artifact is refused.
  write_file_atomic(dir / "checkpoints/sg.ckpt", "garbage");
  EXPECT_THROW(run_stage("generate", cfg, m), DependencyError);
  fs::remove_all(dir);
}

TEST(Stages, TwoRunsGiveIdenticalManifests) {
  const auto a = fresh_dir("det_a"), b = fresh_dir("det_b");
  const auto ma = run_all(tiny(a));
  const auto mb = run_all(tiny(b));
  EXPECT_EQ(ma.comparable(), mb.comparable());
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Report, EmptyManifestMarksEverythingAbsent) {
  const auto dir = fresh_dir("empty");
  const auto r = emit_report(RunManifest::open(dir));
  EXPECT_FALSE(r.ranking || r.planning || r.kl_trace);
  std::size_t absent = 0, at = 0;
  while ((at = r.summary.find("absent", at)) != std::string::npos) ++absent, ++at;
  EXPECT_EQ(absent, 5u);
  fs::remove_all(dir);
}

TEST(Cli, ExitCodes) {
  const auto dir = fresh_dir("cli");
  std::string base = "--out " + dir.string();
  for (const auto& o : tiny_overrides()) base += " --stage-override " + o;
  EXPECT_EQ(cli("train-csg " + base), 3);
  EXPECT_EQ(cli("gen-data " + base + " --stage-override satl.bogus=1"), 2);
  EXPECT_EQ(cli("no-such-command"), 2);
  EXPECT_EQ(cli("gen-data " + base), 0);
  EXPECT_TRUE(fs::exists(dir / "data/talk.tsv"));
  EXPECT_EQ(cli("report " + base), 0);
  EXPECT_TRUE(fs::exists(dir / "report/summary.md"));
  fs::remove_all(dir);
}

TEST(Config, DeskFileMatchesDefaults) {
  const auto cfg = pipeline::load_config(std::filesystem::path(POSGEN_SOURCE_DIR) / "configs/desk.json", {});
  EXPECT_EQ(cfg.hash(), pipeline::PipelineConfig{}.hash());
}
