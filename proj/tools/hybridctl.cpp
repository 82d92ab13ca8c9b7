// hybridctl: drive the edge/cloud routing pipeline from one config file.
//
//   hybridctl --config run.json generate
//   hybridctl --config run.json train
//   hybridctl --config run.json calibrate
//   hybridctl --config run.json evaluate
//   hybridctl --config run.json cost
//   hybridctl --config run.json serve
//
// Exit codes: 0 ok, 1 usage, 2 data/schema, 3 runtime/teacher.

#include <chrono>
#include <csignal>
#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "hybrid/pipeline.hpp"

namespace {

volatile std::sig_atomic_t g_stop = 0;

void on_signal(int) { g_stop = 1; }

int serve(const hybrid::RunConfig& config) {
  auto bundle = hybrid::make_service(config);
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  const int port = bundle.service->start();
  std::cout << "serving on " << config.serve.host << ":" << port << std::endl;
  while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
  bundle.service->stop();
  std::cout << bundle.service->status().dump() << std::endl;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Edge/cloud routing pipeline: DMD generation, switcher training, calibration, "
               "evaluation, cost modeling and the routing service."};
  app.require_subcommand(1, 1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "Run configuration (JSON)")->required();
  app.add_option("--seed", seed, "Override the global seed");
  app.add_option("--out", out, "Override the output directory");
  app.add_option("--set", overrides, "Override a config key: dotted.key=value (repeatable)");

  const char* commands[][2] = {
      {"generate", "Run both teachers and write DMD files per split"},
      {"train", "Train the switcher on the DMD train split"},
      {"calibrate", "Sweep deferral buckets on the train split and write the policy"},
      {"evaluate", "Compare small-only, large-only, uncertainty and switcher routing on test"},
      {"cost", "Tabulate the time/energy cost model"},
      {"serve", "Run the HTTP routing service"},
  };
  for (const auto& c : commands) app.add_subcommand(c[0], c[1]);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  try {
    if (seed) overrides.push_back("seed=" + std::to_string(*seed));
    if (out) overrides.push_back("out=" + nlohmann::json(*out).dump());
    const hybrid::RunConfig config = hybrid::load_run_config(config_path, overrides);

    if (command == "generate") {
      hybrid::cmd_generate(config, std::cout);
    } else if (command == "train") {
      hybrid::cmd_train(config, std::cout);
    } else if (command == "calibrate") {
      hybrid::cmd_calibrate(config, std::cout);
    } else if (command == "evaluate") {
      hybrid::cmd_evaluate(config, std::cout);
    } else if (command == "cost") {
      hybrid::cmd_cost(config, std::cout);
    } else {
      return serve(config);
    }
    return 0;
  } catch (const hybrid::BatchError& e) {
    std::cerr << "hybridctl " << command << ": " << e.what() << '\n';
    return hybrid::exit_code_for(e.code());
  } catch (const hybrid::Error& e) {
    std::cerr << "hybridctl " << command << ": " << hybrid::error_code_name(e.code()) << ": "
              << e.what() << '\n';
    return hybrid::exit_code_for(e.code());
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "hybridctl " << command << ": " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "hybridctl " << command << ": " << e.what() << '\n';
    return 3;
  }
}
