#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hybrid/calibrate.hpp"
#include "hybrid/core.hpp"
#include "hybrid/ingest.hpp"
#include "hybrid/switcher.hpp"
#include "hybrid/teachers.hpp"

namespace hybrid {

enum class BudgetMode { kUnlimited, kFraction, kAbsolute };
enum class ExhaustionBehavior { kFallbackToSmall, kReject };

// Sliding-window deferral budget: within any window_size consecutive
// requests at most limit() are granted a deferral.
struct BudgetConfig {
  BudgetMode mode = BudgetMode::kUnlimited;
  double max_deferral_fraction = 1.0;  // kFraction
  std::size_t max_deferrals = 0;       // kAbsolute
  std::size_t window_size = 100;
  ExhaustionBehavior exhaustion_behavior = ExhaustionBehavior::kFallbackToSmall;

  std::size_t limit() const;
  void validate() const;
};

BudgetConfig budget_from_json(const nlohmann::json& j);
nlohmann::json budget_to_json(const BudgetConfig& config);

class BudgetState {
 public:
  struct Admission {
    std::uint64_t sequence = 0;  // position of this request in the budget's order
    bool granted = false;        // a deferral was requested and allowed
    bool exhausted = false;      // a deferral was requested and refused
    std::size_t remaining = 0;   // deferrals the next request could still take
  };

  struct Snapshot {
    std::uint64_t requests = 0;
    std::size_t in_window = 0;
    std::size_t limit = 0;
    std::size_t window_size = 0;
    bool unlimited = true;
  };

  explicit BudgetState(BudgetConfig config);

  // Atomic check-and-update: takes the next sequence slot and, when
  // wants_defer, grants a deferral iff the window still has room.
  Admission admit(bool wants_defer);
  Snapshot snapshot() const;
  const BudgetConfig& config() const { return config_; }

 private:
  BudgetConfig config_;
  mutable std::mutex mutex_;
  std::deque<bool> recent_;  // last window_size-1 grant decisions
  std::size_t recent_granted_ = 0;
  std::uint64_t next_sequence_ = 0;
};

struct LatencyBreakdown {
  double small_s = 0.0;
  double switcher_s = 0.0;
  double large_s = 0.0;

  double total() const { return small_s + switcher_s + large_s; }
};

struct RouteTrace {
  std::uint64_t sequence = 0;
  std::string record_id;
  int small_prediction = 0;
  double small_probability = 0.5;
  double alignment_prob = 0.5;
  bool wants_defer = false;  // policy said defer
  bool deferred = false;     // large teacher's answer is final
  std::optional<int> large_prediction;
  int final_prediction = 0;
  bool budget_exhausted = false;
  bool large_failed = false;
  std::string note;
  std::optional<LatencyBreakdown> latency;
  std::size_t budget_remaining = 0;
};

nlohmann::json trace_to_json(const RouteTrace& trace);
RouteTrace trace_from_json(const nlohmann::json& j);

struct RouteResult {
  int final_prediction = 0;
  RouteTrace trace;
};

struct RouteSummary {
  std::size_t count = 0;
  std::size_t deferred = 0;
  std::size_t fallbacks = 0;
  double deferred_fraction = 0.0;
  std::optional<ConfusionCounts> confusion;
};

struct BatchRouteResult {
  std::vector<int> finals;
  std::vector<RouteTrace> traces;
  RouteSummary summary;
};

class Router {
 public:
  Router(std::shared_ptr<const Teacher> small_teacher, std::shared_ptr<const Teacher> large_teacher,
         std::shared_ptr<const SwitcherModel> switcher, DeferralPolicy policy, BudgetConfig budget);

  // Thread-safe. The small teacher always runs; the large teacher runs only
  // when the policy and the budget both allow a deferral.
  RouteResult route_one(const DatasetRecord& record);

  // Sequential route_one over `records` in order. When labels_known, the
  // summary carries confusion counts against record.label.
  BatchRouteResult route_batch(const std::vector<DatasetRecord>& records, bool labels_known = true);

  const DeferralPolicy& policy() const { return policy_; }
  const BudgetState& budget() const { return budget_; }
  const Teacher& small_teacher() const { return *small_; }
  const Teacher& large_teacher() const { return *large_; }

 private:
  std::shared_ptr<const Teacher> small_;
  std::shared_ptr<const Teacher> large_;
  std::shared_ptr<const SwitcherModel> switcher_;
  DeferralPolicy policy_;
  BudgetState budget_;
};

// Newline-delimited JSON traces; safe for concurrent appends.
class TraceLog {
 public:
  explicit TraceLog(const std::filesystem::path& path);
  void append(const RouteTrace& trace);

 private:
  std::mutex mutex_;
  std::ofstream out_;
};

std::vector<RouteTrace> read_trace_log(const std::filesystem::path& path);

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 picks an ephemeral port
  std::size_t threads = 8;
  std::filesystem::path trace_log;  // empty: no log
};

// HTTP routing service:
//   POST /classify {record_id, payload_ref} -> {prediction, deferred, alignment_prob, sequence}
//   GET  /status  -> counters and budget state
//   GET  /health  -> liveness
class RouterService {
 public:
  // `manifest` (optional) supplies ground-truth labels and payloads for known
  // record ids. Teachers that simulate from labels need it.
  RouterService(std::shared_ptr<Router> router, ServiceConfig config,
                std::shared_ptr<const DatasetManifest> manifest = nullptr);
  ~RouterService();

  RouterService(const RouterService&) = delete;
  RouterService& operator=(const RouterService&) = delete;

  // Binds and serves on a background thread; returns the bound port.
  int start();
  // Binds and serves on the calling thread until stop().
  void run();
  void stop();

  nlohmann::json status() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace hybrid
