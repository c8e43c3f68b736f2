#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "fairmeta/cli.hpp"

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

// "--key value" and "--key=value" pairs left over after CLI11 parsing.
std::vector<std::pair<std::string, std::string>> parse_overrides(const std::vector<std::string>& extras) {
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const auto& a = extras[i];
    if (a.rfind("--", 0) != 0 || a.size() == 2)
      throw fairmeta::cli::ConfigError("unexpected argument '" + a + "'");
    const auto eq = a.find('=');
    if (eq != std::string::npos) {
      out.emplace_back(a.substr(2, eq - 2), a.substr(eq + 1));
    } else {
      if (i + 1 >= extras.size()) throw fairmeta::cli::ConfigError("missing value for '" + a + "'");
      out.emplace_back(a.substr(2), extras[++i]);
    }
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fairness-aware few-shot meta-learning experiments"};
  app.require_subcommand(1, 1);
  std::string config_path;
  const std::vector<std::pair<std::string, std::string>> commands{
      {"gen-data", "Generate and export the synthetic task set"},
      {"train", "Train every repetition; writes run_<r>.csv, checkpoint_<r>.json, summary.csv"},
      {"eval", "Evaluate checkpoints on test tasks for each K; writes eval.csv"},
      {"discover", "Parity-ratio discrimination report and optional DAG analysis"},
      {"report", "Recompute summary.csv from the run CSVs"}};
  std::vector<CLI::App*> subs;
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "JSON run configuration");
    sub->allow_extras();
    sub->footer("Any configuration key can be overridden with --<dotted.key> <value>.");
    subs.push_back(sub);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kExitUsage;
  }

  try {
    CLI::App* chosen = nullptr;
    for (auto* s : subs)
      if (s->parsed()) chosen = s;
    const auto mode = fairmeta::cli::parse_mode(chosen->get_name());
    const auto rc = fairmeta::cli::load_run_config(config_path, parse_overrides(chosen->remaining()));
    for (const auto& p : fairmeta::cli::run(mode, rc)) std::cout << p.string() << '\n';
    return 0;
  } catch (const fairmeta::cli::ConfigError& e) {
    std::cerr << "fairmeta: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "fairmeta: " << e.what() << '\n';
    return kExitRuntime;
  }
}
