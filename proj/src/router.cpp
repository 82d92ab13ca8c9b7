#include "hybrid/router.hpp"

#include <chrono>
#include <cmath>
#include <thread>

#include <httplib.h>

namespace hybrid {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Budget

std::size_t BudgetConfig::limit() const {
  switch (mode) {
    case BudgetMode::kUnlimited: return window_size;
    case BudgetMode::kAbsolute: return max_deferrals;
    case BudgetMode::kFraction: {
      const double x = max_deferral_fraction * static_cast<double>(window_size);
      return static_cast<std::size_t>(std::floor(x + 1e-9));
    }
  }
  return window_size;
}

void BudgetConfig::validate() const {
  if (window_size == 0) throw Error(ErrorCode::kInvalidArgument, "budget window_size must be positive");
  if (mode == BudgetMode::kFraction &&
      !(max_deferral_fraction >= 0.0 && max_deferral_fraction <= 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "max_deferral_fraction must lie in [0,1]");
  }
}

BudgetConfig budget_from_json(const json& j) {
  BudgetConfig config;
  if (j.is_null()) return config;
  try {
    if (j.contains("max_deferral_fraction")) {
      config.mode = BudgetMode::kFraction;
      config.max_deferral_fraction = j["max_deferral_fraction"].get<double>();
    }
    if (j.contains("max_deferrals")) {
      config.mode = BudgetMode::kAbsolute;
      config.max_deferrals = j["max_deferrals"].get<std::size_t>();
    }
    config.window_size = j.value("window_size", config.window_size);
    const auto behavior = j.value("exhaustion_behavior", std::string("fallback-to-small"));
    if (behavior == "fallback-to-small") {
      config.exhaustion_behavior = ExhaustionBehavior::kFallbackToSmall;
    } else if (behavior == "reject") {
      config.exhaustion_behavior = ExhaustionBehavior::kReject;
    } else {
      throw Error(ErrorCode::kInvalidArgument, "unknown exhaustion_behavior '" + behavior + "'");
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kInvalidArgument, std::string("invalid budget config: ") + e.what());
  }
  config.validate();
  return config;
}

json budget_to_json(const BudgetConfig& config) {
  json j{{"window_size", config.window_size},
         {"exhaustion_behavior", config.exhaustion_behavior == ExhaustionBehavior::kReject
                                     ? "reject"
                                     : "fallback-to-small"}};
  if (config.mode == BudgetMode::kFraction) j["max_deferral_fraction"] = config.max_deferral_fraction;
  if (config.mode == BudgetMode::kAbsolute) j["max_deferrals"] = config.max_deferrals;
  return j;
}

BudgetState::BudgetState(BudgetConfig config) : config_(config) { config_.validate(); }

BudgetState::Admission BudgetState::admit(bool wants_defer) {
  std::lock_guard lock(mutex_);
  Admission a;
  a.sequence = next_sequence_++;
  if (config_.mode == BudgetMode::kUnlimited) {
    a.granted = wants_defer;
    a.remaining = config_.window_size;
    return a;
  }
  const std::size_t limit = config_.limit();
  // Granting now keeps every window of window_size requests ending here
  // within the limit, because recent_ holds the previous window_size-1.
  if (wants_defer) {
    a.granted = recent_granted_ + 1 <= limit;
    a.exhausted = !a.granted;
  }
  recent_.push_back(a.granted);
  recent_granted_ += a.granted ? 1 : 0;
  while (recent_.size() > config_.window_size - 1) {
    recent_granted_ -= recent_.front() ? 1 : 0;
    recent_.pop_front();
  }
  a.remaining = limit > recent_granted_ ? limit - recent_granted_ : 0;
  return a;
}

BudgetState::Snapshot BudgetState::snapshot() const {
  std::lock_guard lock(mutex_);
  Snapshot s;
  s.requests = next_sequence_;
  s.in_window = recent_granted_;
  s.limit = config_.limit();
  s.window_size = config_.window_size;
  s.unlimited = config_.mode == BudgetMode::kUnlimited;
  return s;
}

// ---------------------------------------------------------------------------
// Traces

json trace_to_json(const RouteTrace& t) {
  json j{{"sequence", t.sequence},
         {"record_id", t.record_id},
         {"small_prediction", t.small_prediction},
         {"small_probability", t.small_probability},
         {"alignment_prob", t.alignment_prob},
         {"wants_defer", t.wants_defer},
         {"deferred", t.deferred},
         {"large_prediction", t.large_prediction ? json(*t.large_prediction) : json(nullptr)},
         {"final_prediction", t.final_prediction},
         {"budget_exhausted", t.budget_exhausted},
         {"large_failed", t.large_failed},
         {"note", t.note},
         {"budget_remaining", t.budget_remaining}};
  if (t.latency) {
    j["latency"] = json{{"small_s", t.latency->small_s},
                        {"switcher_s", t.latency->switcher_s},
                        {"large_s", t.latency->large_s}};
  } else {
    j["latency"] = nullptr;
  }
  return j;
}

RouteTrace trace_from_json(const json& j) {
  try {
    RouteTrace t;
    t.sequence = j.at("sequence").get<std::uint64_t>();
    t.record_id = j.at("record_id").get<std::string>();
    t.small_prediction = j.at("small_prediction").get<int>();
    t.small_probability = j.value("small_probability", 0.5);
    t.alignment_prob = j.at("alignment_prob").get<double>();
    t.wants_defer = j.value("wants_defer", false);
    t.deferred = j.at("deferred").get<bool>();
    if (j.contains("large_prediction") && !j["large_prediction"].is_null()) {
      t.large_prediction = j["large_prediction"].get<int>();
    }
    t.final_prediction = j.at("final_prediction").get<int>();
    t.budget_exhausted = j.value("budget_exhausted", false);
    t.large_failed = j.value("large_failed", false);
    t.note = j.value("note", std::string{});
    t.budget_remaining = j.value("budget_remaining", std::size_t{0});
    if (j.contains("latency") && !j["latency"].is_null()) {
      const auto& l = j["latency"];
      t.latency = LatencyBreakdown{l.at("small_s").get<double>(), l.at("switcher_s").get<double>(),
                                   l.at("large_s").get<double>()};
    }
    return t;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kSchema, std::string("invalid trace record: ") + e.what());
  }
}

TraceLog::TraceLog(const std::filesystem::path& path)
    : out_(path, std::ios::binary | std::ios::app) {
  if (!out_) throw Error(ErrorCode::kIo, "cannot open trace log " + path.string());
}

void TraceLog::append(const RouteTrace& trace) {
  const std::string line = trace_to_json(trace).dump();
  std::lock_guard lock(mutex_);
  out_ << line << '\n';
  out_.flush();
}

std::vector<RouteTrace> read_trace_log(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open trace log " + path.string());
  std::vector<RouteTrace> traces;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      traces.push_back(trace_from_json(json::parse(line)));
    } catch (const json::parse_error& e) {
      throw Error(ErrorCode::kSchema, "malformed trace line: " + std::string(e.what()));
    }
  }
  return traces;
}

// ---------------------------------------------------------------------------
// Router

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

}  // namespace

Router::Router(std::shared_ptr<const Teacher> small_teacher,
               std::shared_ptr<const Teacher> large_teacher,
               std::shared_ptr<const SwitcherModel> switcher, DeferralPolicy policy,
               BudgetConfig budget)
    : small_(std::move(small_teacher)),
      large_(std::move(large_teacher)),
      switcher_(std::move(switcher)),
      policy_(std::move(policy)),
      budget_(budget) {
  if (!small_ || !large_ || !switcher_) {
    throw Error(ErrorCode::kInvalidArgument, "router needs both teachers and a switcher");
  }
  if (small_->role() != TeacherRole::kSmall) {
    throw Error(ErrorCode::kInvalidArgument, "router's first teacher must have the small role");
  }
  if (small_->feature_dim() != switcher_->architecture.input_dim) {
    throw Error(ErrorCode::kDimensionMismatch,
                "switcher input_dim " + std::to_string(switcher_->architecture.input_dim) +
                    " != small teacher feature_dim " + std::to_string(small_->feature_dim()));
  }
}

RouteResult Router::route_one(const DatasetRecord& record) {
  RouteTrace trace;
  trace.record_id = record.record_id;
  LatencyBreakdown latency;

  auto t0 = Clock::now();
  const TeacherOutput small = teacher_predict(*small_, record);
  latency.small_s = seconds_since(t0);

  t0 = Clock::now();
  trace.alignment_prob = predict_alignment(*switcher_, *small.hidden);
  latency.switcher_s = seconds_since(t0);

  trace.small_prediction = small.prediction;
  trace.small_probability = small.probability;
  trace.wants_defer = policy_.should_defer(trace.alignment_prob, record.record_id);

  const auto admission = budget_.admit(trace.wants_defer);
  trace.sequence = admission.sequence;
  trace.budget_remaining = admission.remaining;
  trace.budget_exhausted = admission.exhausted;
  trace.final_prediction = small.prediction;

  const bool reject = budget_.config().exhaustion_behavior == ExhaustionBehavior::kReject;
  if (admission.exhausted) {
    if (reject) {
      throw Error(ErrorCode::kBudgetRejected,
                  "deferral budget exhausted for record " + record.record_id);
    }
    trace.note = "budget exhausted; small prediction kept";
  }

  if (admission.granted) {
    t0 = Clock::now();
    try {
      const TeacherOutput large = teacher_predict(*large_, record);
      trace.deferred = true;
      trace.large_prediction = large.prediction;
      trace.final_prediction = large.prediction;
    } catch (const Error& e) {
      if (reject) throw;
      trace.large_failed = true;
      trace.note = std::string("large teacher failed (") + error_code_name(e.code()) +
                   "); small prediction kept";
    }
    latency.large_s = seconds_since(t0);
  }

  trace.latency = latency;
  return {trace.final_prediction, std::move(trace)};
}

BatchRouteResult Router::route_batch(const std::vector<DatasetRecord>& records, bool labels_known) {
  BatchRouteResult result;
  result.finals.reserve(records.size());
  result.traces.reserve(records.size());
  std::vector<RecordFailure> failures;
  ConfusionCounts counts;
  for (const auto& record : records) {
    try {
      auto routed = route_one(record);
      if (labels_known) counts.add(routed.final_prediction, record.label);
      result.summary.deferred += routed.trace.deferred ? 1 : 0;
      result.summary.fallbacks += routed.trace.large_failed || routed.trace.budget_exhausted ? 1 : 0;
      result.finals.push_back(routed.final_prediction);
      result.traces.push_back(std::move(routed.trace));
    } catch (const Error& e) {
      failures.push_back({record.record_id, e.code(), e.what()});
    }
  }
  if (!failures.empty()) throw BatchError(std::move(failures));
  result.summary.count = records.size();
  result.summary.deferred_fraction =
      records.empty() ? 0.0
                      : static_cast<double>(result.summary.deferred) / static_cast<double>(records.size());
  if (labels_known) result.summary.confusion = counts;
  return result;
}

// ---------------------------------------------------------------------------
// Service

struct RouterService::Impl {
  std::shared_ptr<Router> router;
  ServiceConfig config;
  std::shared_ptr<const DatasetManifest> manifest;
  std::unique_ptr<TraceLog> trace_log;
  bool require_known_records = false;

  httplib::Server server;
  std::thread thread;

  std::atomic<std::uint64_t> requests{0};
  std::atomic<std::uint64_t> classified{0};
  std::atomic<std::uint64_t> malformed{0};
  std::atomic<std::uint64_t> errors{0};
  std::atomic<std::uint64_t> deferred{0};
  std::atomic<std::uint64_t> fallbacks{0};

  void install_routes();
  int bind();
  json status_json() const;
};

namespace {

void send_error(httplib::Response& res, int status, ErrorCode code, const std::string& message) {
  res.status = status;
  res.set_content(json{{"error", message}, {"code", error_code_name(code)}}.dump(),
                  "application/json");
}

int http_status_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kBudgetRejected: return 429;
    case ErrorCode::kReplayMiss: return 404;
    case ErrorCode::kRemoteTimeout: return 504;
    case ErrorCode::kRemoteUnavailable:
    case ErrorCode::kRemoteStatus:
    case ErrorCode::kRemoteMalformed: return 502;
    default: return 500;
  }
}

}  // namespace

void RouterService::Impl::install_routes() {
  server.Get("/health", [](const httplib::Request&, httplib::Response& res) {
    res.set_content(R"({"status":"ok"})", "application/json");
  });

  server.Get("/status", [this](const httplib::Request&, httplib::Response& res) {
    res.set_content(status_json().dump(), "application/json");
  });

  server.Post("/classify", [this](const httplib::Request& req, httplib::Response& res) {
    requests.fetch_add(1);
    DatasetRecord record;
    try {
      const json body = json::parse(req.body);
      if (!body.is_object() || !body.contains("record_id") || !body["record_id"].is_string() ||
          body["record_id"].get<std::string>().empty()) {
        throw Error(ErrorCode::kSchema, "body must carry a non-empty string 'record_id'");
      }
      if (body.contains("payload_ref") && !body["payload_ref"].is_string()) {
        throw Error(ErrorCode::kSchema, "'payload_ref' must be a string");
      }
      record.record_id = body["record_id"].get<std::string>();
      record.payload_ref = body.value("payload_ref", std::string{});
    } catch (const json::exception& e) {
      malformed.fetch_add(1);
      send_error(res, 400, ErrorCode::kSchema, std::string("malformed request: ") + e.what());
      return;
    } catch (const Error& e) {
      malformed.fetch_add(1);
      send_error(res, 400, e.code(), std::string("malformed request: ") + e.what());
      return;
    }

    const DatasetRecord* known = manifest ? manifest->find(record.record_id) : nullptr;
    if (known) {
      const std::string payload = record.payload_ref;
      record = *known;
      if (!payload.empty()) record.payload_ref = payload;
    } else if (require_known_records) {
      errors.fetch_add(1);
      send_error(res, 404, ErrorCode::kInvalidArgument, "unknown record_id " + record.record_id);
      return;
    }

    try {
      auto routed = router->route_one(record);
      classified.fetch_add(1);
      if (routed.trace.deferred) deferred.fetch_add(1);
      if (routed.trace.large_failed || routed.trace.budget_exhausted) fallbacks.fetch_add(1);
      if (trace_log) trace_log->append(routed.trace);
      res.set_content(json{{"prediction", routed.final_prediction},
                           {"deferred", routed.trace.deferred},
                           {"alignment_prob", routed.trace.alignment_prob},
                           {"sequence", routed.trace.sequence}}
                          .dump(),
                      "application/json");
    } catch (const Error& e) {
      errors.fetch_add(1);
      send_error(res, http_status_for(e.code()), e.code(), e.what());
    }
  });
}

int RouterService::Impl::bind() {
  const std::size_t threads = std::max<std::size_t>(1, config.threads);
  server.new_task_queue = [threads] { return new httplib::ThreadPool(threads); };
  int port = config.port;
  if (port == 0) {
    port = server.bind_to_any_port(config.host);
  } else if (!server.bind_to_port(config.host, port)) {
    port = -1;
  }
  if (port < 0) {
    throw Error(ErrorCode::kIo, "cannot bind " + config.host + ":" + std::to_string(config.port));
  }
  return port;
}

RouterService::RouterService(std::shared_ptr<Router> router, ServiceConfig config,
                             std::shared_ptr<const DatasetManifest> manifest)
    : impl_(std::make_unique<Impl>()) {
  impl_->router = std::move(router);
  impl_->config = std::move(config);
  impl_->manifest = std::move(manifest);
  if (!impl_->router) throw Error(ErrorCode::kInvalidArgument, "service needs a router");
  const bool synthetic = impl_->router->small_teacher().kind() == TeacherKind::kSynthetic ||
                         impl_->router->large_teacher().kind() == TeacherKind::kSynthetic;
  if (synthetic && !impl_->manifest) {
    throw Error(ErrorCode::kInvalidArgument,
                "synthetic teachers need a manifest to resolve ground-truth labels");
  }
  impl_->require_known_records = synthetic;
  if (!impl_->config.trace_log.empty()) {
    impl_->trace_log = std::make_unique<TraceLog>(impl_->config.trace_log);
  }
  impl_->install_routes();
}

RouterService::~RouterService() { stop(); }

int RouterService::start() {
  const int port = impl_->bind();
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return port;
}

void RouterService::run() {
  impl_->bind();
  impl_->server.listen_after_bind();
}

void RouterService::stop() {
  if (!impl_) return;
  if (impl_->server.is_running()) impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

json RouterService::status() const { return impl_->status_json(); }

json RouterService::Impl::status_json() const {
  const auto budget = router->budget().snapshot();
  const auto n_classified = classified.load();
  const auto n_deferred = deferred.load();
  json budget_json{{"unlimited", budget.unlimited},
                   {"window_size", budget.window_size},
                   {"limit", budget.limit},
                   {"granted_in_window", budget.in_window},
                   {"requests_admitted", budget.requests}};
  return json{{"requests", requests.load()},
              {"classified", n_classified},
              {"malformed", malformed.load()},
              {"errors", errors.load()},
              {"deferred", n_deferred},
              {"fallbacks", fallbacks.load()},
              {"deferral_rate", n_classified == 0 ? 0.0
                                                  : static_cast<double>(n_deferred) /
                                                        static_cast<double>(n_classified)},
              {"budget", budget_json}};
}

}  // namespace hybrid
