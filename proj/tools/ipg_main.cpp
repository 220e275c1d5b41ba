#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include "ipg/harness.hpp"

namespace {

// Remaining tokens after the known flags are `--config.key value` pairs
// mirroring the run-config keys.
void apply_extras(ipg::RunConfig& cfg, const std::vector<std::string>& extras) {
  for (size_t i = 0; i < extras.size(); i += 2) {
    const std::string& flag = extras[i];
    if (flag.rfind("--", 0) != 0)
      throw std::runtime_error("expected --key value override, got '" + flag + "'");
    if (i + 1 >= extras.size())
      throw std::runtime_error("override '" + flag + "' is missing a value");
    ipg::apply_override(cfg, flag.substr(2), extras[i + 1]);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"integrated policy gradient toolkit"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  bool force = false;
  double gamma = -1.0;
  bool gamma_given = false;

  std::vector<std::pair<std::string, CLI::App*>> subs;
  for (ipg::Stage stage : ipg::kStageOrder) {
    CLI::App* sub = app.add_subcommand(ipg::stage_name(stage), "run this pipeline stage");
    sub->allow_extras();
    subs.emplace_back(ipg::stage_name(stage), sub);
  }
  CLI::App* pipeline = app.add_subcommand("pipeline", "run every stage in order");
  pipeline->allow_extras();
  subs.emplace_back("pipeline", pipeline);

  for (auto& [name, sub] : subs) {
    sub->add_option("-c,--config", config_path, "run-config file (defaults when omitted)");
    sub->add_option("-o,--out", out_dir, "output directory (overrides out_dir)");
    sub->add_flag("-f,--force", force, "re-run even when the manifest says up to date");
    if (name == "steer")
      sub->add_option("-g,--gamma", gamma, "steering strength for this invocation")
          ->trigger_on_parse()
          ->each([&](const std::string&) { gamma_given = true; });
  }

  CLI11_PARSE(app, argc, argv);

  try {
    ipg::RunConfig cfg;
    if (!config_path.empty()) cfg = ipg::load_run_config(config_path);
    if (const char* env = std::getenv("IPG_OUT_DIR"); env != nullptr && *env != '\0')
      cfg.out_dir = env;

    CLI::App* active = nullptr;
    std::string active_name;
    for (auto& [name, sub] : subs)
      if (sub->parsed()) {
        active = sub;
        active_name = name;
      }
    apply_extras(cfg, active->remaining());
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    if (gamma_given) cfg.steer_gamma = gamma;

    if (active_name == "pipeline") {
      const int executed = ipg::run_pipeline(cfg, force);
      std::cout << "pipeline: " << executed << " stage(s) executed, "
                << (ipg::kStageCount - executed) << " up to date, outputs in " << cfg.out_dir
                << "\n";
    } else {
      const ipg::Stage stage = ipg::stage_from_name(active_name);
      if (ipg::run_stage(cfg, stage, force))
        std::cout << active_name << ": done, outputs in " << cfg.out_dir << "\n";
      else
        std::cout << active_name << ": up to date\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "ipg: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
