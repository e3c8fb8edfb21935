#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "posgen/pipeline.hpp"

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Options& o) {
  cmd->add_option("--config", o.config, "pipeline config (JSON)");
  cmd->add_option("--seed", o.seed, "global seed");
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_option("--stage-override", o.overrides, "key=value with a dotted key, repeatable");
}

posgen::pipeline::PipelineConfig resolve(const Options& o) {
  std::vector<std::string> ov = o.overrides;
  if (o.seed) ov.push_back("seed=" + std::to_string(*o.seed));
  if (!o.out.empty()) ov.push_back("out=\"" + o.out + "\"");
  return posgen::pipeline::load_config(o.config.empty() ? std::nullopt : std::optional<std::filesystem::path>(o.config),
                                       ov);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Personalized opening-script generation pipeline"};
  app.require_subcommand(1);
  Options opts;
  std::vector<std::pair<std::string, CLI::App*>> cmds;
  for (const auto& name : posgen::pipeline::stage_names()) {
    cmds.emplace_back(name, app.add_subcommand(name, "run the " + name + " stage"));
  }
  cmds.emplace_back("report", app.add_subcommand("report", "write the summary and plot-ready files"));
  cmds.emplace_back("all", app.add_subcommand("all", "run every stage, then the report"));
  for (auto& [name, cmd] : cmds) add_common(cmd, opts);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const auto cfg = resolve(opts);
    auto manifest = posgen::pipeline::RunManifest::open(cfg.out);
    for (auto& [name, cmd] : cmds) {
      if (!cmd->parsed()) continue;
      std::vector<std::string> stages;
      if (name == "all") {
        stages = posgen::pipeline::stage_names();
      } else if (name != "report") {
        stages = {name};
      }
      for (const auto& s : stages) {
        std::cerr << "[posgen] " << s << "\n";
        posgen::pipeline::run_stage(s, cfg, manifest);
      }
      if (name == "report" || name == "all") {
        posgen::pipeline::emit_report(manifest);
        std::cerr << "[posgen] report written to " << (manifest.dir / "report").string() << "\n";
      }
    }
  } catch (const posgen::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
