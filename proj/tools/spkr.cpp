// tools/spkr.cpp

// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

// Command-line driver.  Every subcommand runs one experiment stage against
// the work directory given by --out; "run" executes all of them in order.
//
//   spkr run --config configs/desk.json --out work
//   spkr score --config configs/desk.json --out work
//
// Exit status: 0 on success, 2 on a configuration error, 1 otherwise.

#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "spkr/spkr.hpp"

int main(int argc, char **argv) {
  CLI::App app{"Speaker recognition toolkit: GMM-UBM, i-vector and PLDA systems with duration-aware fusion"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path, out_dir = "work";
  std::optional<std::uint64_t> seed;
  app.add_option("--config", config_path, "experiment configuration (JSON)");
  app.add_option("--seed", seed, "override the configuration seed");
  app.add_option("--out", out_dir, "work directory for artefacts")->capture_default_str();

  std::string stage;
  for (const auto &s : spkr::Stages())
    app.add_subcommand(s.name, std::string("run the ") + s.name + " stage")->callback([&stage, &s] { stage = s.name; });
  app.add_subcommand("run", "run every stage in order")->callback([&stage] { stage = "run"; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    spkr::ExperimentConfig cfg =
        config_path.empty() ? spkr::ExperimentConfig{} : spkr::LoadExperimentConfig(config_path);
    if (seed) cfg.seed = *seed;
    if (stage == "run")
      spkr::RunExperiment(cfg, out_dir);
    else
      spkr::RunStage(stage, cfg, out_dir);
  } catch (const spkr::ConfigError &e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
