#include "hybrid/pipeline.hpp"

#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>

namespace hybrid {

using json = nlohmann::json;

namespace {

const char* kTopLevelKeys[] = {"seed",   "out",       "workers",     "manifest", "teachers",
                               "switcher", "calibration", "budget", "cost",     "serve"};

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  return path.is_relative() ? base / path : path;
}

json parse_override_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::exception&) {
    return text;
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorCode::kIo, "write failed for " + path.string());
}

void write_provenance(const RunConfig& config, const std::string& command, json extra = {}) {
  const StageSeeds s = stage_seeds(config);
  nlohmann::ordered_json p;
  p["command"] = command;
  p["config_hash"] = config_hash(config);
  p["seeds"] = {{"global", s.global},
                {"manifest", s.manifest},
                {"small_teacher", s.small_teacher},
                {"large_teacher", s.large_teacher},
                {"train", s.train}};
  p["config"] = config.source;
  if (!extra.is_null()) p["details"] = extra;
  write_text(ArtifactPaths{config.out_dir}.provenance(command), p.dump(2) + "\n");
}

std::shared_ptr<const Teacher> build_teacher(const RunConfig& config, TeacherRole role) {
  const StageSeeds s = stage_seeds(config);
  const bool small = role == TeacherRole::kSmall;
  const json& spec = small ? config.small_teacher : config.large_teacher;
  if (spec.empty()) {
    throw Error(ErrorCode::kInvalidArgument,
                std::string("config has no ") + (small ? "small" : "large") + " teacher");
  }
  return make_teacher(spec, role, config.feature_dim, small ? s.small_teacher : s.large_teacher,
                      config.base_dir);
}

// DMD features joined with the sidecar predictions of the same split.
std::vector<ScoringInput> load_scoring_inputs(const RunConfig& config, Split split) {
  const ArtifactPaths paths{config.out_dir};
  auto dmd = read_dmd(paths.dmd(split), config.feature_dim);
  auto preds = read_predictions(paths.predictions(split));
  if (dmd.size() != preds.size()) {
    throw Error(ErrorCode::kSchema, paths.predictions(split).string() + " has " +
                                        std::to_string(preds.size()) + " rows but the DMD file has " +
                                        std::to_string(dmd.size()));
  }
  std::vector<ScoringInput> inputs;
  inputs.reserve(dmd.size());
  for (std::size_t i = 0; i < dmd.size(); ++i) {
    const auto& p = preds[i];
    if (agreement_label(p.small_prediction, p.large_prediction) != dmd[i].label) {
      throw Error(ErrorCode::kSchema, "agreement label of " + p.record_id +
                                          " disagrees with its recorded predictions");
    }
    inputs.push_back(ScoringInput{p.record_id, std::move(dmd[i].last_hidden_layer),
                                  p.small_prediction, p.large_prediction, p.true_label,
                                  p.small_probability});
  }
  return inputs;
}

std::string percent(double f) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", 100.0 * f);
  return buf;
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

json apply_overrides(json config, const std::vector<std::string>& overrides) {
  for (const auto& item : overrides) {
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw Error(ErrorCode::kInvalidArgument, "override '" + item + "' is not key=value");
    }
    std::string pointer;
    std::istringstream parts(item.substr(0, eq));
    std::string part;
    while (std::getline(parts, part, '.')) pointer += "/" + part;
    config[json::json_pointer(pointer)] = parse_override_value(item.substr(eq + 1));
  }
  return config;
}

RunConfig run_config_from_json(const json& j, const std::filesystem::path& base_dir) {
  if (!j.is_object()) throw Error(ErrorCode::kSchema, "config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    for (const char* k : kTopLevelKeys) known = known || key == k;
    if (!known) throw Error(ErrorCode::kSchema, "unknown config key '" + key + "'");
  }

  RunConfig c;
  c.source = j;
  c.base_dir = base_dir.empty() ? std::filesystem::path(".") : base_dir;
  try {
    c.seed = j.value("seed", std::uint64_t{0});
    c.out_dir = resolve(c.base_dir, j.value("out", std::string("out")));
    c.workers = j.value("workers", std::size_t{1});

    const json m = j.value("manifest", json::object());
    c.feature_dim = m.value("feature_dim", c.feature_dim);
    if (m.contains("path")) {
      c.manifest_path = resolve(c.base_dir, m["path"].get<std::string>());
    } else {
      const json syn = m.value("synthetic", json::object());
      auto& s = c.synthetic_manifest;
      s.train = syn.value("train", s.train);
      s.validation = syn.value("validation", s.validation);
      s.test = syn.value("test", s.test);
      s.positive_rate = syn.value("positive_rate", s.positive_rate);
      s.name = syn.value("name", s.name);
    }

    const json t = j.value("teachers", json::object());
    c.small_teacher = t.value("small", json::object());
    c.large_teacher = t.value("large", json::object());

    const json sw = j.value("switcher", json::object());
    c.architecture.input_dim = c.feature_dim;
    c.architecture.hidden_dims =
        sw.value("hidden_dims", c.architecture.hidden_dims);
    auto& tc = c.train;
    tc.learning_rate = sw.value("learning_rate", tc.learning_rate);
    tc.dropout_rate = sw.value("dropout", tc.dropout_rate);
    tc.max_epochs = sw.value("max_epochs", tc.max_epochs);
    tc.batch_size = sw.value("batch_size", tc.batch_size);
    tc.early_stop_patience = sw.value("patience", tc.early_stop_patience);
    const std::string opt = sw.value("optimizer", std::string("adam"));
    if (opt == "adam") {
      tc.optimizer = OptimizerKind::kAdam;
    } else if (opt == "sgd") {
      tc.optimizer = OptimizerKind::kSgd;
    } else {
      throw Error(ErrorCode::kInvalidArgument, "unknown optimizer '" + opt + "'");
    }
    if (sw.contains("seed")) {
      tc.seed.value = sw["seed"].get<std::uint64_t>();
      c.train_seed_explicit = true;
    }

    c.bucket_count = j.value("calibration", json::object()).value("bucket_count", c.bucket_count);
    if (c.bucket_count == 0) throw Error(ErrorCode::kInvalidArgument, "bucket_count must be positive");
    if (j.contains("budget")) c.budget = budget_from_json(j["budget"]);

    const json cost = j.value("cost", json::object());
    if (cost.contains("path")) c.cost_path = resolve(c.base_dir, cost["path"].get<std::string>());
    c.cost_preset = cost.value("preset", c.cost_preset);

    const json sv = j.value("serve", json::object());
    c.serve.host = sv.value("host", c.serve.host);
    c.serve.port = sv.value("port", c.serve.port);
    c.serve.threads = sv.value("threads", c.serve.threads);
    if (sv.contains("trace_log")) {
      c.serve.trace_log = resolve(c.out_dir, sv["trace_log"].get<std::string>());
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kSchema, std::string("config: ") + e.what());
  }
  c.architecture.validate();
  c.train.seed.value = stage_seeds(c).train;
  c.train.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path,
                          const std::vector<std::string>& overrides) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kSchema, path.string() + ": " + e.what());
  }
  return run_config_from_json(apply_overrides(std::move(j), overrides), path.parent_path());
}

StageSeeds stage_seeds(const RunConfig& config) {
  const std::uint64_t root = config.seed;
  StageSeeds s;
  s.global = config.seed;
  s.manifest = derive_seed(root, "manifest");
  s.small_teacher = derive_seed(root, "teacher.small");
  s.large_teacher = derive_seed(root, "teacher.large");
  s.train = config.train_seed_explicit ? config.train.seed.value : derive_seed(root, "train");
  return s;
}

std::string config_hash(const RunConfig& config) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(hash_string(config.source.dump())));
  return buf;
}

std::filesystem::path ArtifactPaths::dmd(Split s) const {
  return root / ("dmd_" + std::string(split_name(s)) + ".json");
}

std::filesystem::path ArtifactPaths::predictions(Split s) const {
  return root / ("predictions_" + std::string(split_name(s)) + ".csv");
}

DatasetManifest resolve_manifest(const RunConfig& config) {
  if (config.manifest_path) {
    IngestConfig ic;
    ic.feature_dim = config.feature_dim;
    return load_manifest(*config.manifest_path, ic);
  }
  SyntheticManifestConfig s = config.synthetic_manifest;
  s.feature_dim = config.feature_dim;
  s.seed = stage_seeds(config).manifest;
  return make_synthetic_manifest(s);
}

CostPreset resolve_cost_preset(const RunConfig& config) {
  if (config.cost_path) return load_cost_preset(*config.cost_path);
  if (config.cost_preset == "paper-table1") return paper_table1_preset();
  const auto file = std::filesystem::path(HYBRID_PRESET_DIR) / (config.cost_preset + ".cost");
  if (!std::filesystem::exists(file)) {
    throw Error(ErrorCode::kIo, "unknown cost preset '" + config.cost_preset + "'");
  }
  return load_cost_preset(file);
}

// ---------------------------------------------------------------------------

GenerateResult cmd_generate(const RunConfig& config, std::ostream& log) {
  const DatasetManifest manifest = resolve_manifest(config);
  auto small = build_teacher(config, TeacherRole::kSmall);
  auto large = build_teacher(config, TeacherRole::kLarge);

  const ArtifactPaths paths{config.out_dir};
  std::filesystem::create_directories(paths.root);
  write_manifest(manifest, paths.manifest());

  GenerateResult result;
  std::ostringstream summary;
  summary << "split,count,agree_rate,mean_norm\n";
  for (Split split : {Split::kTrain, Split::kValidation, Split::kTest}) {
    DmdDataset ds = generate_dmd(manifest, split, *small, *large, config.workers);
    write_dmd(ds, paths.dmd(split));
    write_predictions(ds.predictions, paths.predictions(split));
    const DmdSummary s = dmd_summary(ds.records);
    result.counts[static_cast<std::size_t>(split)] = s.count;
    summary << split_name(split) << ',' << s.count << ','
            << (s.agree_rate ? format_number(*s.agree_rate) : "") << ','
            << (s.mean_norm ? format_number(*s.mean_norm) : "") << '\n';
    log << split_name(split) << ": " << s.count << " records";
    if (s.agree_rate) log << ", agreement " << percent(*s.agree_rate) << "%";
    log << '\n';
  }
  write_text(paths.dmd_summary(), summary.str());
  write_provenance(config, "generate",
                   json{{"manifest", manifest.name()},
                        {"small_teacher", small->describe()},
                        {"large_teacher", large->describe()}});
  return result;
}

TrainResult cmd_train(const RunConfig& config, std::ostream& log) {
  const ArtifactPaths paths{config.out_dir};
  const auto train_data = read_dmd(paths.dmd(Split::kTrain), config.feature_dim);
  const auto val_data = read_dmd(paths.dmd(Split::kValidation), config.feature_dim);
  TrainResult result = train(train_data, val_data, config.architecture, config.train);

  std::filesystem::create_directories(paths.root);
  save_model(result.model, paths.model());
  std::ostringstream report;
  report << "epoch,train_loss,val_loss,val_f1,val_accuracy,best\n";
  for (const auto& e : result.report.epochs) {
    report << e.epoch << ',' << format_number(e.train_loss) << ',' << format_number(e.val_loss)
           << ',' << format_number(e.val_f1) << ',' << format_number(e.val_accuracy) << ','
           << (e.epoch == result.report.best_epoch ? 1 : 0) << '\n';
  }
  write_text(paths.train_report(), report.str());

  const auto& best = result.report.epochs.at(result.report.best_epoch - 1);
  log << "trained " << result.report.epochs_run << " epoch(s)"
      << (result.report.stopped_early ? " (early stop)" : "") << "; best epoch "
      << result.report.best_epoch << ": val F1 " << fixed(best.val_f1, 4) << ", val loss "
      << fixed(best.val_loss, 4) << '\n';
  write_provenance(config, "train",
                   json{{"epochs_run", result.report.epochs_run},
                        {"best_epoch", result.report.best_epoch},
                        {"stopped_early", result.report.stopped_early}});
  return result;
}

CalibrateResult cmd_calibrate(const RunConfig& config, std::ostream& log) {
  const ArtifactPaths paths{config.out_dir};
  const SwitcherModel model = load_model(paths.model());
  if (model.architecture.input_dim != config.feature_dim) {
    throw Error(ErrorCode::kDimensionMismatch, "model input_dim does not match feature_dim");
  }
  const auto items = score_items(model, load_scoring_inputs(config, Split::kTrain));

  CalibrateResult result;
  result.curve = build_curve(items, config.bucket_count);
  result.policy = select_policy(result.curve, items);
  write_policy(result.policy, paths.policy());
  write_curve_csv(result.curve, paths.calibration_curve());
  write_curve_csv(build_uncertainty_curve(items, config.bucket_count), paths.uncertainty_curve());

  log << "calibrated on " << items.size() << " items: defer "
      << percent(result.policy.deferred_fraction) << "% (alignment cutoff "
      << format_number(result.policy.probability_cutoff) << "), train F1 "
      << fixed(result.policy.provenance.value("peak_f1", 0.0), 4) << '\n';
  write_provenance(config, "calibrate",
                   json{{"items", items.size()}, {"policy", policy_to_json(result.policy)}});
  return result;
}

std::vector<EvaluationRow> cmd_evaluate(const RunConfig& config, std::ostream& log) {
  const ArtifactPaths paths{config.out_dir};
  const SwitcherModel model = load_model(paths.model());
  const DeferralPolicy policy = read_policy(paths.policy());
  const auto items = score_items(model, load_scoring_inputs(config, Split::kTest));
  if (items.empty()) throw Error(ErrorCode::kEmptyInput, "test split is empty");
  const std::size_t n = items.size();

  CostParams cost = resolve_cost_preset(config).params;
  cost.item_count = n;

  // Routed exactly as the service would, including the budget, in manifest order.
  BudgetState budget(config.budget);
  ConfusionCounts small_counts, large_counts, routed_counts;
  std::size_t deferred = 0;
  for (const auto& item : items) {
    small_counts.add(item.small_pred, item.true_label);
    large_counts.add(item.large_pred, item.true_label);
    const bool wants = policy.should_defer(item.alignment_prob, item.record_id);
    const bool granted = budget.admit(wants).granted;
    deferred += granted ? 1 : 0;
    routed_counts.add(granted ? item.large_pred : item.small_pred, item.true_label);
  }
  const double routed_fraction = static_cast<double>(deferred) / static_cast<double>(n);
  // Same number of deferrals, chosen by small-model uncertainty instead.
  const ConfusionCounts unc_counts = uncertainty_counts_at_fraction(items, routed_fraction);

  auto row = [&](std::string name, const ConfusionCounts& counts, std::size_t k, double reference) {
    EvaluationRow r;
    r.approach = std::move(name);
    r.f1 = f1_score(counts);
    r.deferred = k;
    r.deferred_fraction = static_cast<double>(k) / static_cast<double>(n);
    if (r.approach == "large-only") {
      // No edge model in the loop at all.
      CostParams alone = cost;
      alone.small_time_per_item = alone.small_energy_per_item = 0.0;
      r.cost = estimate_cost(alone, 1.0);
    } else {
      r.cost = estimate_cost(cost, r.deferred_fraction);
    }
    r.reference_f1 = reference;
    return r;
  };
  std::vector<EvaluationRow> rows{
      row("small-only", small_counts, 0, 0.582),
      row("large-only", large_counts, n, 0.875),
      row("uncertainty", unc_counts, deferred, 0.761),
      row("switcher", routed_counts, deferred, 0.921),
  };
  write_text(paths.evaluation(), evaluation_to_csv(rows));

  log << "approach      F1 (%)  deferred (%)  time (s)  energy (kJ)  reference F1 (%)\n";
  for (const auto& r : rows) {
    char line[160];
    std::snprintf(line, sizeof line, "%-12s  %6s  %12s  %8s  %11s  %16s\n", r.approach.c_str(),
                  percent(r.f1).c_str(), percent(r.deferred_fraction).c_str(),
                  fixed(r.cost.total_time, 2).c_str(), fixed(r.cost.total_energy, 2).c_str(),
                  percent(r.reference_f1).c_str());
    log << line;
  }
  log << "reference F1 values come from the real edge/cloud models and are not expected to\n"
         "be reproduced by simulated teachers; compare the ordering of the rows instead.\n";
  write_provenance(config, "evaluate", json{{"items", n}, {"deferred", deferred}});
  return rows;
}

std::string evaluation_to_csv(const std::vector<EvaluationRow>& rows) {
  std::ostringstream out;
  out << "approach,f1,deferred_count,deferred_fraction,time_s,energy_kj,energy_kwh,reference_f1\n";
  for (const auto& r : rows) {
    out << r.approach << ',' << format_number(r.f1) << ',' << r.deferred << ','
        << format_number(r.deferred_fraction) << ',' << format_number(r.cost.total_time) << ','
        << format_number(r.cost.total_energy) << ',' << format_number(r.cost.energy_kwh) << ','
        << format_number(r.reference_f1) << '\n';
  }
  return out.str();
}

std::vector<CostReport> cmd_cost(const RunConfig& config, std::ostream& log) {
  const CostPreset preset = resolve_cost_preset(config);
  const auto curve = cost_curve(preset.params, config.bucket_count);
  const ArtifactPaths paths{config.out_dir};
  std::filesystem::create_directories(paths.root);
  write_text(paths.cost_curve(), cost_curve_to_csv(curve));

  log << "preset " << preset.name << " (" << preset.params.item_count << " items)\n";
  log << "deferred (%)  time (s)  energy (kJ)  energy (kWh)  energy saved (%)\n";
  for (const auto& r : curve) {
    char line[128];
    std::snprintf(line, sizeof line, "%12s  %8s  %11s  %12s  %16s\n",
                  percent(r.deferred_fraction).c_str(), fixed(r.total_time, 2).c_str(),
                  fixed(r.total_energy, 2).c_str(), fixed(r.energy_kwh, 4).c_str(),
                  percent(r.reduction_vs_large_only).c_str());
    log << line;
  }
  if (!preset.reference.empty()) {
    log << "measured reference rows vs. the additive model:\n";
    for (const auto& [name, ref] : preset.reference) {
      const CostReport m = estimate_cost(preset.params, ref.fraction);
      log << "  " << name << " @" << percent(ref.fraction) << "%: time " << fixed(ref.time_s, 2)
          << " s (model " << fixed(m.total_time, 2) << "), energy " << fixed(ref.energy_kj, 2)
          << " kJ (model " << fixed(m.total_energy, 2) << ")\n";
    }
  }
  write_provenance(config, "cost", json{{"preset", preset.name}});
  return curve;
}

ServiceBundle make_service(const RunConfig& config) {
  const ArtifactPaths paths{config.out_dir};
  auto model = std::make_shared<const SwitcherModel>(load_model(paths.model()));
  if (model->architecture.input_dim != config.feature_dim) {
    throw Error(ErrorCode::kDimensionMismatch, "model input_dim does not match feature_dim");
  }
  const DeferralPolicy policy = read_policy(paths.policy());
  auto manifest = std::make_shared<const DatasetManifest>(resolve_manifest(config));
  ServiceBundle bundle;
  bundle.router = std::make_shared<Router>(build_teacher(config, TeacherRole::kSmall),
                                           build_teacher(config, TeacherRole::kLarge),
                                           std::move(model), policy, config.budget);
  bundle.service = std::make_unique<RouterService>(bundle.router, config.serve, manifest);
  return bundle;
}

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kReplayMiss:
    case ErrorCode::kRemoteTimeout:
    case ErrorCode::kRemoteUnavailable:
    case ErrorCode::kRemoteStatus:
    case ErrorCode::kRemoteMalformed:
    case ErrorCode::kNonFiniteLoss:
    case ErrorCode::kBudgetRejected:
    case ErrorCode::kBatch:
      return 3;
    default:
      return 2;
  }
}

}  // namespace hybrid
