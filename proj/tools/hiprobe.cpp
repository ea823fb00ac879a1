// Command-line entry point: data generation, pretraining, Head Impact
// analysis, layer-targeted fine-tuning and evaluation as resumable stages.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "hiprobe/pipeline/run_config.hpp"
#include "hiprobe/pipeline/stages.hpp"

namespace {

constexpr int kExitStageFailure = 1;
constexpr int kExitConfigError = 2;

struct Flags {
  std::optional<std::string> config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::size_t> k;
  std::optional<double> tau;
  std::optional<std::string> stage;
};

hiprobe::RunConfig resolve(const Flags& f) {
  hiprobe::RunConfig c = f.config ? hiprobe::load_run_config(*f.config) : hiprobe::RunConfig{};
  if (f.seed) c.seed = *f.seed;
  if (f.out) c.out = *f.out;
  if (f.k) c.k = *f.k;
  if (f.tau) c.tau = *f.tau;
  c.validate();
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Head Impact probing of a toy multimodal decoder"};
  app.require_subcommand(1, 1);
  app.fallthrough();

  Flags flags;
  app.add_option("--config", flags.config, "JSON run configuration");
  app.add_option("--seed", flags.seed, "run seed (overrides the config)");
  app.add_option("--out", flags.out, "output directory (overrides the config)");
  app.add_option("--k", flags.k, "number of layers per targeted setup");
  app.add_option("--tau", flags.tau, "mask coverage threshold for visual tokens");
  app.add_option("--stage", flags.stage, "run-all: stop after this stage");

  std::string command;
  for (const auto& name : hiprobe::stage_names()) {
    app.add_subcommand(name, "run the " + name + " stage")->callback([&command, name] { command = name; });
  }
  app.add_subcommand("run-all", "run every stage in order, reusing cached ones")->callback([&command] {
    command = "run-all";
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfigError;
  }

  try {
    const hiprobe::RunConfig config = resolve(flags);
    if (command == "run-all") {
      const std::string last = flags.stage.value_or("eval");
      hiprobe::stage_spec(last);
      hiprobe::run_all(config, last);
    } else {
      if (flags.stage) throw hiprobe::ConfigError("--stage is only valid with run-all");
      hiprobe::run_single(config, command);
    }
  } catch (const hiprobe::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitStageFailure;
  }
  return 0;
}
