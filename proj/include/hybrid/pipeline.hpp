#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hybrid/calibrate.hpp"
#include "hybrid/costsim.hpp"
#include "hybrid/dmd.hpp"
#include "hybrid/ingest.hpp"
#include "hybrid/router.hpp"
#include "hybrid/switcher.hpp"

namespace hybrid {

// One JSON file drives every command. Top-level keys:
//   seed, out, workers, manifest, teachers, switcher, calibration, budget,
//   cost, serve
// Relative paths resolve against the config file's directory.
struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path out_dir = "out";
  std::filesystem::path base_dir = ".";
  std::size_t workers = 1;

  std::optional<std::filesystem::path> manifest_path;  // else synthetic
  SyntheticManifestConfig synthetic_manifest;
  std::size_t feature_dim = 1536;

  nlohmann::json small_teacher = nlohmann::json::object();
  nlohmann::json large_teacher = nlohmann::json::object();

  MlpArchitecture architecture;
  TrainConfig train;
  bool train_seed_explicit = false;

  std::size_t bucket_count = 10;
  BudgetConfig budget;

  std::string cost_preset = "paper-table1";
  std::optional<std::filesystem::path> cost_path;

  ServiceConfig serve;

  nlohmann::json source;  // effective config after overrides; hashed into provenance
};

// `overrides` are `dotted.key=value` strings; the value is parsed as JSON
// when it can be, else taken as a string.
nlohmann::json apply_overrides(nlohmann::json config, const std::vector<std::string>& overrides);
RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
RunConfig load_run_config(const std::filesystem::path& path,
                          const std::vector<std::string>& overrides = {});

// Seeds used by each stage, all derived from RunConfig::seed.
struct StageSeeds {
  std::uint64_t global = 0;
  std::uint64_t manifest = 0;
  std::uint64_t small_teacher = 0;
  std::uint64_t large_teacher = 0;
  std::uint64_t train = 0;
};
StageSeeds stage_seeds(const RunConfig& config);

// 16 hex digits of FNV-1a over the canonical dump of config.source.
std::string config_hash(const RunConfig& config);

// Output layout under out_dir.
struct ArtifactPaths {
  std::filesystem::path root;

  std::filesystem::path manifest() const { return root / "manifest.csv"; }
  std::filesystem::path dmd(Split s) const;
  std::filesystem::path predictions(Split s) const;
  std::filesystem::path dmd_summary() const { return root / "dmd_summary.csv"; }
  std::filesystem::path model() const { return root / "switcher.bin"; }
  std::filesystem::path train_report() const { return root / "train_report.csv"; }
  std::filesystem::path policy() const { return root / "policy.json"; }
  std::filesystem::path calibration_curve() const { return root / "calibration_curve.csv"; }
  std::filesystem::path uncertainty_curve() const { return root / "uncertainty_curve.csv"; }
  std::filesystem::path evaluation() const { return root / "evaluation.csv"; }
  std::filesystem::path cost_curve() const { return root / "cost_curve.csv"; }
  std::filesystem::path provenance(const std::string& command) const {
    return root / (command + ".provenance.json");
  }
};

DatasetManifest resolve_manifest(const RunConfig& config);
CostPreset resolve_cost_preset(const RunConfig& config);

struct GenerateResult {
  std::array<std::size_t, 3> counts{};
};
GenerateResult cmd_generate(const RunConfig& config, std::ostream& log);

TrainResult cmd_train(const RunConfig& config, std::ostream& log);

struct CalibrateResult {
  DeferralCurve curve;
  DeferralPolicy policy;
};
CalibrateResult cmd_calibrate(const RunConfig& config, std::ostream& log);

struct EvaluationRow {
  std::string approach;  // small-only, large-only, uncertainty, switcher
  double f1 = 0.0;
  std::size_t deferred = 0;
  double deferred_fraction = 0.0;
  CostReport cost;
  double reference_f1 = 0.0;  // published figure for the real models
};
std::vector<EvaluationRow> cmd_evaluate(const RunConfig& config, std::ostream& log);
std::string evaluation_to_csv(const std::vector<EvaluationRow>& rows);

std::vector<CostReport> cmd_cost(const RunConfig& config, std::ostream& log);

// Everything the service needs, loaded from a finished pipeline run.
struct ServiceBundle {
  std::shared_ptr<Router> router;
  std::unique_ptr<RouterService> service;
};
ServiceBundle make_service(const RunConfig& config);

// 0 ok, 2 data/schema, 3 runtime/teacher.
int exit_code_for(ErrorCode code);

}  // namespace hybrid
