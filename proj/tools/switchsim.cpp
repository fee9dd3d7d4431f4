// switchsim command-line entry point.
//
// Exit codes: 0 ok, 1 verification failure (or other runtime failure),
// 2 configuration error, 3 I/O error.

#include <cstdlib>
#include <iostream>
#include <map>
#include <string>
#include <thread>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "switchsim/pipeline.hpp"

namespace sp = switchsim::pipeline;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitVerify = 1;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;

std::string kebab(std::string s) {
  for (auto& c : s)
    if (c == '_') c = '-';
  return s;
}

/// One --kebab-case flag per RunConfig field; values are parsed as JSON when
/// possible and taken as strings otherwise.
struct ConfigFlags {
  std::string config_path;
  std::map<std::string, std::string> values;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "run config JSON");
    const nlohmann::json defaults = sp::RunConfig{}.to_json();
    for (const auto& [key, def] : defaults.items())
      app->add_option("--" + kebab(key), values[key], "default " + def.dump());
  }

  sp::RunConfig resolve() const {
    sp::RunConfig c = config_path.empty() ? sp::RunConfig{} : sp::load_run_config(config_path);
    if (const char* env = std::getenv("SWITCHSIM_SEED")) {
      try {
        c.seed = std::stoull(env);
      } catch (const std::exception&) {
        throw switchsim::ConfigError(std::string("SWITCHSIM_SEED is not an unsigned integer: ") + env);
      }
    }
    nlohmann::json over = nlohmann::json::object();
    for (const auto& [key, text] : values) {
      if (text.empty()) continue;
      nlohmann::json v = nlohmann::json::parse(text, nullptr, false);
      if (v.is_discarded()) v = text;
      over[key] = v;
    }
    return sp::RunConfig::from_json(over, c);
  }
};

void log_line(const std::string& s) { std::cerr << "[switchsim] " << s << std::endl; }

int run(int argc, char** argv) {
  CLI::App app{"switchsim: switching successor measures and hierarchical FB agents on discrete mazes"};
  app.require_subcommand(1);

  auto* verify = app.add_subcommand("verify", "differential check of the switching identities on random MDPs");
  int n_mdps = 100;
  std::uint64_t verify_seed = 0;
  std::string fault, verify_report;
  verify->add_option("--n-mdps", n_mdps, "number of random MDPs");
  verify->add_option("--seed", verify_seed, "instance seed");
  verify->add_option("--inject-fault", fault, "corrupt one identity (switching_measure, switching_advantage, hitting_discount, lower_bound, a_fb)");
  verify->add_option("--report", verify_report, "write the JSON report here");

  auto* solve = app.add_subcommand("solve", "exact reward, value and switching-advantage heatmaps per task");
  std::string solve_maze = "configs/medium_maze.json", solve_out = "runs/solve";
  solve->add_option("--maze", solve_maze, "maze config JSON");
  solve->add_option("--out", solve_out, "output directory");

  struct Sub {
    CLI::App* app;
    ConfigFlags flags;
  };
  std::map<std::string, Sub> subs;
  const std::map<std::string, std::string> descr{{"gen-data", "generate (or reuse) the offline dataset"},
                                                 {"train", "gen-data, then train the representation and policies"},
                                                 {"eval", "evaluate stored checkpoints"},
                                                 {"pipeline", "all stages followed by evaluation"},
                                                 {"export", "learned value and advantage heatmaps"}};
  bool no_hierarchy = false, parallel_eval = false;
  std::string stage;
  for (const auto& [name, text] : descr) {
    Sub s{app.add_subcommand(name, text), {}};
    subs.emplace(name, std::move(s));
  }
  for (auto& [name, s] : subs) {
    s.flags.attach(s.app);
    if (name == "train" || name == "eval" || name == "pipeline")
      s.app->add_flag("--no-hierarchy", no_hierarchy, "skip the high-level policy");
    if (name == "eval" || name == "pipeline")
      s.app->add_flag("--parallel-eval", parallel_eval, "fan evaluation episodes out over threads");
    if (name == "pipeline" || name == "train")
      s.app->add_option("--stage", stage, "stop after this stage: data, rep, high or low");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (verify->parsed()) {
      const auto rep = sp::run_verify(n_mdps, verify_seed, fault);
      for (const auto& w : rep.warnings) log_line("warning: " + w);
      for (const auto& c : rep.checks)
        if (!c.passed) log_line("FAILED identity " + c.name + ": max deviation " + switchsim::format_double(c.max_deviation));
      const std::string text = rep.to_json().dump(2);
      std::cout << text << "\n";
      if (!verify_report.empty()) sp::write_text(verify_report, text + "\n");
      return rep.passed() ? kExitOk : kExitVerify;
    }
    if (solve->parsed()) {
      const auto out = sp::solve(switchsim::maze::load_maze_config(solve_maze), solve_out);
      for (const auto& f : out.files) std::cout << f << "\n";
      return kExitOk;
    }
    for (auto& [name, s] : subs) {
      if (!s.app->parsed()) continue;
      const sp::RunConfig cfg = s.flags.resolve();
      sp::PipelineOptions opt;
      opt.hierarchical = !no_hierarchy;
      opt.eval_threads = parallel_eval ? static_cast<int>(std::max(1u, std::thread::hardware_concurrency())) : 1;
      if (name == "gen-data") {
        opt.stop_after = "data";
      } else if (name == "train") {
        opt.stop_after = stage.empty() ? "low" : stage;
      } else if (name == "pipeline") {
        opt.stop_after = stage;
      }
      if (name == "eval") {
        std::cout << sp::run_eval(cfg, opt, log_line).dump(2) << "\n";
      } else if (name == "export") {
        for (const auto& f : sp::run_export(cfg, log_line)) std::cout << f << "\n";
      } else {
        std::cout << sp::run_pipeline(cfg, opt, log_line).dump(2) << "\n";
      }
      return kExitOk;
    }
  } catch (const switchsim::ConfigError& e) {
    log_line(std::string("config error: ") + e.what());
    return kExitConfig;
  } catch (const switchsim::IoError& e) {
    log_line(std::string("I/O error: ") + e.what());
    return kExitIo;
  } catch (const std::filesystem::filesystem_error& e) {
    log_line(std::string("I/O error: ") + e.what());
    return kExitIo;
  } catch (const std::exception& e) {
    log_line(std::string("error: ") + e.what());
    return kExitVerify;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) { return run(argc, argv); }
