// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Each check carries its own runtime budget.

#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <thread>

#include <httplib.h>

#include "fixtures.hpp"
#include "hybrid/pipeline.hpp"
#include "oracles.hpp"

namespace hybrid {
namespace {

using nlohmann::json;

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Scratch {
 public:
  explicit Scratch(const std::string& tag)
      : path_(std::filesystem::temp_directory_path() /
              ("hybrid-acceptance-" + std::to_string(::getpid()) + "-" + tag)) {
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~Scratch() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  std::filesystem::path operator/(const std::string& leaf) const { return path_ / leaf; }

 private:
  std::filesystem::path path_;
};

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

// Switcher that reads the small teacher's correctness straight off its
// hidden vector: logit = gain · (h · direction).
SwitcherModel projection_switcher(const std::vector<double>& direction, double gain) {
  const std::size_t dim = direction.size();
  SwitcherModel m = zero_model(MlpArchitecture{dim, {1}});
  for (std::size_t j = 0; j < dim; ++j) m.layers[0].weights[j] = gain * direction[j];
  m.layers[0].biases = {1e4};
  m.layers[1].weights = {1.0};
  m.layers[1].biases = {-1e4};
  return m;
}

// ---------------------------------------------------------------------------

Outcome dmd_format() {
  const std::filesystem::path golden = std::filesystem::path(HYBRID_TEST_DATA) / "golden_dmd.json";
  Scratch dir("dmd");
  const auto records = read_dmd(golden);
  write_dmd(records, dir / "copy.json");
  const std::string a = slurp(golden), b = slurp(dir / "copy.json");
  const auto doc = nlohmann::ordered_json::parse(a);
  bool keys = true;
  for (const auto& item : doc) {
    std::vector<std::string> k;
    for (auto it = item.begin(); it != item.end(); ++it) k.push_back(it.key());
    keys = keys && k == std::vector<std::string>{"image_path", "last_hidden_layer", "label"};
  }
  return {a == b && keys && read_dmd(dir / "copy.json") == records,
          std::to_string(records.size()) + " records, " + std::to_string(a.size()) + " bytes, " +
              (a == b ? "byte-identical" : "bytes differ")};
}

Outcome gradient_check() {
  Rng rng(20240611);
  double worst = 0;
  std::size_t partials = 0;
  const int trials = 40;
  for (int t = 0; t < trials; ++t) {
    MlpArchitecture arch;
    arch.input_dim = 1 + rng.below(8);
    arch.hidden_dims.assign(1 + rng.below(2), 0);
    for (auto& h : arch.hidden_dims) h = 1 + rng.below(8);
    const SwitcherModel m = oracle::random_model(arch, rng);
    const std::size_t n = 1 + rng.below(8);
    std::vector<std::vector<double>> xs(n, std::vector<double>(arch.input_dim));
    std::vector<int> ys;
    Batch batch;
    for (auto& x : xs) {
      for (auto& v : x) v = rng.normal();
      ys.push_back(static_cast<int>(rng.below(2)));
      batch.features.emplace_back(x);
    }
    batch.labels = ys;
    const auto analytic = backward(m, batch);
    const auto numeric = oracle::finite_differences(m, xs, ys, 1e-5);
    worst = std::max(worst, oracle::max_relative_error(analytic.gradients, numeric));
    partials += arch.parameter_count();
  }
  return {worst < 1e-4, std::to_string(trials) + " architectures, " + std::to_string(partials) +
                            " partials, max relative error " + fmt("%.2e", worst)};
}

Outcome learnability() {
  // Perfect large teacher: agreement is exactly small-model correctness.
  const auto t = fixtures::synthetic_teachers(32, 0.6, 1.0, 0.5, 11);
  const auto m = fixtures::manifest(1000, 200, 0, 32, 11);
  const auto tr = generate_dmd(m, Split::kTrain, *t.small, *t.large).records;
  const auto va = generate_dmd(m, Split::kValidation, *t.small, *t.large).records;
  const TrainConfig cfg;  // defaults throughout
  MlpArchitecture arch;
  arch.input_dim = 32;
  const auto r = train(tr, va, arch, cfg);
  const double f1 = r.report.epochs.at(r.report.best_epoch - 1).val_f1;
  std::size_t first = 0;
  for (const auto& e : r.report.epochs) {
    if (e.val_f1 >= 0.95) {
      first = e.epoch;
      break;
    }
  }
  return {f1 >= 0.95 && r.report.epochs_run <= 100,
          "best val F1 " + fmt("%.4f", f1) + " at epoch " + std::to_string(r.report.best_epoch) +
              ", first >= 0.95 at epoch " + std::to_string(first) + ", " +
              std::to_string(r.report.epochs_run) + " epochs run"};
}

Outcome calibration_oracle() {
  Rng rng(7);
  int mismatches = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto items = fixtures::random_items(rng, 1 + rng.below(200), trial % 2 == 0);
    const auto curve = build_curve(items, 10);
    const auto want = oracle::curve(items, 10);
    bool ok = curve.points.size() == want.size();
    for (std::size_t k = 0; ok && k < want.size(); ++k) {
      ok = curve.points[k].combined_f1 == want[k].f1 && curve.points[k].deferred_count == want[k].deferred;
    }
    const auto policy = select_policy(curve, items);
    const std::size_t best = oracle::best_point(want);
    ok = ok && policy.deferred_fraction == curve.points[best].fraction;
    std::set<std::string> routed;
    for (const auto& it : items) {
      if (policy.should_defer(it.alignment_prob, it.record_id)) routed.insert(it.record_id);
    }
    ok = ok && routed == want[best].deferred_ids;
    mismatches += ok ? 0 : 1;
  }
  return {mismatches == 0, "100 instances, " + std::to_string(mismatches) + " mismatches"};
}

Outcome cascade_beats_both() {
  const std::size_t dim = 32;
  const auto t = fixtures::synthetic_teachers(dim, 0.6, 0.88, 1.0, 5);
  const auto m = fixtures::manifest(1000, 0, 500, dim, 5);
  const auto train_ds = generate_dmd(m, Split::kTrain, *t.small, *t.large);
  const auto test_records = m.split_records(Split::kTest);
  const auto switcher = std::make_shared<const SwitcherModel>(projection_switcher(t.small->direction(), 4.0));

  // Calibrate on train.
  const auto train_items = score_items(*switcher, fixtures::scoring_inputs(train_ds));
  const auto policy = select_policy(build_curve(train_items, 10), train_items);

  // Route the test split through the real router.
  Router router(t.small, t.large, switcher, policy, BudgetConfig{});
  const auto routed = router.route_batch(test_records);
  const double routed_f1 = f1_score(*routed.summary.confusion);

  const auto test_ds = generate_dmd(m, Split::kTest, *t.small, *t.large);
  const auto test_items = score_items(*switcher, fixtures::scoring_inputs(test_ds));
  const double small_f1 = combined_f1_at_fraction(test_items, 0.0);
  const double large_f1 = combined_f1_at_fraction(test_items, 1.0);
  const double unc_f1 = uncertainty_f1_at_fraction(test_items, routed.summary.deferred_fraction);
  const bool pass = routed_f1 > small_f1 && routed_f1 > large_f1 && routed_f1 > unc_f1;
  return {pass, "F1 small " + fmt("%.3f", small_f1) + ", large " + fmt("%.3f", large_f1) + ", uncertainty " +
                    fmt("%.3f", unc_f1) + ", switcher " + fmt("%.3f", routed_f1) + " at " +
                    fmt("%.1f%%", 100 * routed.summary.deferred_fraction) + " deferred (policy " +
                    fmt("%.1f", policy.deferred_fraction) + ")"};
}

Outcome cost_table() {
  const auto preset = paper_table1_preset();
  const auto est = estimate_cost(preset.params, 0.6);
  const auto& ours = preset.reference.at("switcher");
  const auto& large = preset.reference.at("large_only");
  const double time_err = std::abs(est.total_time - ours.time_s) / ours.time_s;
  const double energy_err = std::abs(est.total_energy - ours.energy_kj) / ours.energy_kj;
  const double kwh = kj_to_kwh(preset.params.large_energy_per_item * preset.params.item_count);
  const bool kwh_ok = std::round(kwh * 1e3) == std::round(0.0530 * 1e3);
  // Reduction of the measured switcher row against measured large-only.
  const double reduction = 100 * relative_reduction(ours.energy_kj, large.energy_kj);
  const bool pass = time_err < 0.03 && energy_err < 0.02 && kwh_ok && std::abs(reduction - 39.5) <= 0.3;
  return {pass, "time " + fmt("%.2f s (%.1f%%)", est.total_time, 100 * time_err) + ", energy " +
                    fmt("%.2f kJ (%.1f%%)", est.total_energy, 100 * energy_err) + ", large-only " +
                    fmt("%.4f kWh", kwh) + ", measured reduction " + fmt("%.2f%%", reduction) +
                    " (additive model: " + fmt("%.2f%%", 100 * est.reduction_vs_large_only) + ")"};
}

Outcome endpoints() {
  Rng rng(3);
  int bad = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto items = fixtures::random_items(rng, 1 + rng.below(100), i % 2 == 0);
    ConfusionCounts s, l;
    for (const auto& it : items) {
      s.add(it.small_pred, it.true_label);
      l.add(it.large_pred, it.true_label);
    }
    bad += combined_f1_at_fraction(items, 0.0) != f1_score(s);
    bad += combined_f1_at_fraction(items, 1.0) != f1_score(l);
  }
  return {bad == 0, "1000 instances, " + std::to_string(bad) + " inexact endpoints"};
}

Outcome routing_consistency() {
  Rng rng(9);
  int bad = 0;
  const int trials = 50;
  for (int trial = 0; trial < trials; ++trial) {
    const auto model = std::make_shared<const SwitcherModel>(
        init_model(MlpArchitecture{3, {4}}, RngSeed{rng.next_u64()}));
    ReplayFixture small, large;
    std::vector<DatasetRecord> records;
    std::vector<ScoringInput> inputs;
    const std::size_t n = 10 + rng.below(190);
    for (std::size_t i = 0; i < n; ++i) {
      const std::string id = "r" + std::to_string(rng.below(1000)) + "-" + std::to_string(i);
      // Coarse features so equal alignment scores are common.
      std::vector<double> x{static_cast<double>(rng.below(3)), static_cast<double>(rng.below(2)), 0.5};
      const int truth = static_cast<int>(rng.below(2));
      const int sp = rng.uniform() < 0.6 ? truth : 1 - truth;
      const int lp = rng.uniform() < 0.9 ? truth : 1 - truth;
      small[id] = TeacherOutput{sp, sp ? 0.8 : 0.2, x};
      large[id] = TeacherOutput{lp, lp ? 0.9 : 0.1, std::nullopt};
      records.push_back(DatasetRecord{id, id, truth, Split::kTrain});
      inputs.push_back(ScoringInput{id, x, sp, lp, truth, sp ? 0.8 : 0.2});
    }
    const auto items = score_items(*model, inputs);
    const auto policy = select_policy(build_curve(items, 10), items);
    Router router(std::make_shared<ReplayTeacher>(TeacherRole::kSmall, small, 3),
                  std::make_shared<ReplayTeacher>(TeacherRole::kLarge, large, 3), model, policy, BudgetConfig{});
    const auto out = router.route_batch(records);
    const auto order = deferral_order(items);
    const std::size_t k = deferred_count(policy.deferred_fraction, n);
    std::set<std::string> want, got;
    for (std::size_t i = 0; i < k; ++i) want.insert(items[order[i]].record_id);
    for (const auto& t : out.traces) {
      if (t.deferred) got.insert(t.record_id);
    }
    bad += (got != want || out.summary.deferred != k) ? 1 : 0;
  }
  return {bad == 0, std::to_string(trials) + " calibrated policies, " + std::to_string(bad) + " mismatched deferral sets"};
}

Outcome determinism() {
  Scratch dir("determinism");
  const json cfg{
      {"seed", 20240611},
      {"out", "run"},
      {"manifest", {{"synthetic", {{"train", 742}, {"validation", 212}, {"test", 106}}}, {"feature_dim", 64}}},
      {"teachers",
       {{"small", {{"kind", "synthetic"}, {"accuracy", 0.6}, {"noise_scale", 1.0}}},
        {"large", {{"kind", "synthetic"}, {"accuracy", 0.88}}}}},
      {"switcher", {{"hidden_dims", {32, 16}}, {"learning_rate", 0.001}}},
      {"budget", {{"max_deferral_fraction", 0.7}, {"window_size", 100}}}};
  std::ofstream(dir / "run.json") << cfg.dump(2);
  std::ostringstream log;
  for (const char* out : {"a", "b"}) {
    const auto c = load_run_config(dir / "run.json", {std::string("out=") + out});
    cmd_generate(c, log);
    cmd_train(c, log);
    cmd_calibrate(c, log);
    cmd_evaluate(c, log);
  }
  const std::vector<std::string> files{"manifest.csv",          "dmd_train.json",        "dmd_validation.json",
                                       "dmd_test.json",         "predictions_train.csv", "predictions_test.csv",
                                       "dmd_summary.csv",       "switcher.bin",          "train_report.csv",
                                       "policy.json",           "calibration_curve.csv", "uncertainty_curve.csv",
                                       "evaluation.csv"};
  std::size_t same = 0, bytes = 0;
  std::string differing;
  for (const auto& f : files) {
    const std::string a = slurp(dir / "a" / f), b = slurp(dir / "b" / f);
    if (!a.empty() && a == b) {
      ++same;
      bytes += a.size();
    } else {
      differing += " " + f;
    }
  }
  return {same == files.size(), std::to_string(same) + "/" + std::to_string(files.size()) +
                                    " artifacts byte-identical (" + std::to_string(bytes / 1024) + " KiB)" +
                                    (differing.empty() ? "" : "; differ:" + differing)};
}

Outcome service_robustness() {
  Scratch dir("service");
  const std::size_t dim = 16;
  const auto t = fixtures::synthetic_teachers(dim, 0.6, 0.88, 1.0, 21);
  const auto manifest = std::make_shared<const DatasetManifest>(fixtures::manifest(0, 0, 400, dim, 21));
  std::map<std::string, int> labels;
  for (const auto& r : manifest->records()) labels[r.record_id] = r.label;

  // Stand-in cloud model behind HTTP, reached through the remote client.
  TeacherServer cloud(t.large, labels);
  const int cloud_port = cloud.start();
  RemoteTeacherParams rp;
  rp.endpoint_url = "http://127.0.0.1:" + std::to_string(cloud_port);
  rp.timeout_ms = 2000;
  rp.max_retries = 1;
  auto remote = std::make_shared<RemoteTeacher>(TeacherRole::kLarge, rp, dim);

  DeferralPolicy policy;
  policy.probability_cutoff = 0.5;
  BudgetConfig budget;
  budget.mode = BudgetMode::kFraction;
  budget.max_deferral_fraction = 0.3;
  budget.window_size = 50;
  auto router = std::make_shared<Router>(
      t.small, remote, std::make_shared<const SwitcherModel>(projection_switcher(t.small->direction(), 4.0)),
      policy, budget);
  ServiceConfig sc;
  sc.port = 0;
  sc.threads = 8;
  sc.trace_log = dir / "traces.ndjson";
  RouterService service(router, sc, manifest);
  const int port = service.start();

  // 1000 requests, every 20th malformed, in three concurrent waves; the
  // cloud model is down for the middle wave.
  struct Reply {
    bool malformed;
    int status;
    json body;
  };
  std::vector<Reply> replies(1000);
  const auto& records = manifest->records();
  auto wave = [&](std::size_t begin, std::size_t end) {
    std::vector<std::thread> threads;
    for (int w = 0; w < 16; ++w) {
      threads.emplace_back([&, w] {
        httplib::Client client("127.0.0.1", port);
        for (std::size_t i = begin + static_cast<std::size_t>(w); i < end; i += 16) {
          const bool bad = i % 20 == 7;
          const std::string body =
              bad ? (i % 40 == 7 ? std::string("{\"record_id\": ") : std::string("{\"payload_ref\":\"x\"}"))
                  : json{{"record_id", records[i % records.size()].record_id}}.dump();
          auto res = client.Post("/classify", body, "application/json");
          replies[i] = {bad, res ? res->status : -1, res && res->status == 200 ? json::parse(res->body) : json()};
        }
      });
    }
    for (auto& th : threads) th.join();
  };
  wave(0, 350);
  cloud.set_outage(true);
  wave(350, 700);
  cloud.set_outage(false);
  wave(700, 1000);
  auto health = httplib::Client("127.0.0.1", port).Get("/health");
  const bool alive = health && health->status == 200;
  const json status = service.status();
  service.stop();
  cloud.stop();

  std::size_t bad_status = 0, ok = 0;
  std::map<int, int> unexpected;
  for (const auto& r : replies) {
    if (r.malformed ? r.status != 400 : r.status != 200) {
      ++bad_status;
      ++unexpected[r.status];
    }
    ok += r.status == 200;
  }
  std::string odd;
  for (const auto& [code, n] : unexpected) odd += " " + std::to_string(code) + "x" + std::to_string(n);

  // Every response must be reproducible from its trace.
  const auto traces = read_trace_log(dir / "traces.ndjson");
  std::map<std::uint64_t, const RouteTrace*> by_seq;
  for (const auto& tr : traces) by_seq[tr.sequence] = &tr;
  std::size_t unreconstructible = 0, fallbacks = 0;
  for (const auto& r : replies) {
    if (r.status != 200) continue;
    auto it = by_seq.find(r.body["sequence"].get<std::uint64_t>());
    if (it == by_seq.end()) {
      ++unreconstructible;
      continue;
    }
    const RouteTrace& tr = *it->second;
    const int from_trace = tr.deferred ? tr.large_prediction.value_or(-1) : tr.small_prediction;
    if (from_trace != r.body["prediction"].get<int>() || tr.deferred != r.body["deferred"].get<bool>() ||
        tr.alignment_prob != r.body["alignment_prob"].get<double>()) {
      ++unreconstructible;
    }
  }
  for (const auto& tr : traces) fallbacks += tr.large_failed;

  // Budget: grants in every window of 50 consecutive admissions ≤ 15.
  std::vector<bool> granted(by_seq.size(), false);
  bool contiguous = true;
  std::size_t idx = 0;
  for (const auto& [seq, tr] : by_seq) {
    contiguous = contiguous && seq == idx;
    granted[idx++] = tr->wants_defer && !tr->budget_exhausted;
  }
  std::size_t worst_window = 0;
  for (std::size_t s = 0; s + budget.window_size <= granted.size(); ++s) {
    worst_window = std::max<std::size_t>(
        worst_window, static_cast<std::size_t>(std::count(granted.begin() + static_cast<std::ptrdiff_t>(s),
                                                          granted.begin() + static_cast<std::ptrdiff_t>(s + budget.window_size), true)));
  }

  const bool pass = alive && bad_status == 0 && traces.size() == ok && unreconstructible == 0 &&
                    fallbacks > 0 && contiguous && worst_window <= budget.limit() &&
                    status["malformed"].get<std::size_t>() == 50;
  return {pass, std::to_string(ok) + " classified, " + std::to_string(status["malformed"].get<std::size_t>()) +
                    " malformed rejected, " + std::to_string(bad_status) + " unexpected statuses" + (odd.empty() ? "" : " (" + odd.substr(1) + ")") + ", " +
                    std::to_string(fallbacks) + " outage fallbacks, max " + std::to_string(worst_window) + "/" +
                    std::to_string(budget.limit()) + " grants per window, " + std::to_string(unreconstructible) +
                    " responses not reconstructible"};
}

struct Criterion {
  int id;
  const char* name;
  double budget_s;
  std::function<Outcome()> run;
};

}  // namespace
}  // namespace hybrid

int main() {
  using namespace hybrid;
  const std::vector<Criterion> criteria{
      {1, "DMD format fidelity", 1, dmd_format},
      {2, "gradient correctness", 30, gradient_check},
      {3, "switcher learnability", 60, learnability},
      {4, "calibration oracle equivalence", 30, calibration_oracle},
      {5, "cascade beats both", 60, cascade_beats_both},
      {6, "cost model vs table arithmetic", 1, cost_table},
      {7, "endpoint exactness", 10, endpoints},
      {8, "routing/calibration consistency", 10, routing_consistency},
      {9, "pipeline determinism", 180, determinism},
      {10, "service robustness", 120, service_robustness},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = s < c.budget_s;
    const bool pass = o.pass && in_time;
    failures += pass ? 0 : 1;
    std::printf("%s  [%2d] %-32s %7.2f s (limit %g s)  %s%s\n", pass ? "PASS" : "FAIL", c.id, c.name, s,
                c.budget_s, o.detail.c_str(), in_time ? "" : "  [over time limit]");
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
