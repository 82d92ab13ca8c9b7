#include "hybrid/teachers.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <thread>

#include <httplib.h>

namespace hybrid {

using nlohmann::json;

std::string_view role_name(TeacherRole role) {
  return role == TeacherRole::kSmall ? "small" : "large";
}

std::string_view kind_name(TeacherKind kind) {
  switch (kind) {
    case TeacherKind::kSynthetic: return "synthetic";
    case TeacherKind::kReplay: return "replay";
    case TeacherKind::kRemote: return "remote";
  }
  return "synthetic";
}

void Teacher::validate_output(const DatasetRecord& record, const TeacherOutput& out) const {
  if (out.prediction != 0 && out.prediction != 1) {
    throw Error(ErrorCode::kSchema, "teacher prediction for " + record.record_id + " is not binary");
  }
  if (!(out.probability >= 0.0 && out.probability <= 1.0)) {
    throw Error(ErrorCode::kSchema, "teacher probability for " + record.record_id +
                                        " outside [0,1]");
  }
  if (out.prediction != prediction_from_probability(out.probability)) {
    throw Error(ErrorCode::kSchema, "teacher prediction for " + record.record_id +
                                        " disagrees with its probability");
  }
  if (role_ == TeacherRole::kSmall) {
    if (!out.hidden) {
      throw Error(ErrorCode::kDimensionMismatch,
                  "small teacher returned no hidden vector for " + record.record_id);
    }
    if (out.hidden->size() != feature_dim_) {
      throw Error(ErrorCode::kDimensionMismatch,
                  "hidden vector for " + record.record_id + " has length " +
                      std::to_string(out.hidden->size()) + ", expected " +
                      std::to_string(feature_dim_));
    }
  }
}

// ---------------------------------------------------------------------------
// Synthetic teacher

SyntheticTeacher::SyntheticTeacher(TeacherRole role, SyntheticTeacherParams params)
    : Teacher(role, params.feature_dim), params_(params) {
  auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!in_unit(params_.accuracy_positive) || !in_unit(params_.accuracy_negative)) {
    throw Error(ErrorCode::kInvalidArgument, "synthetic teacher accuracy must lie in [0,1]");
  }
  if (params_.feature_dim == 0) {
    throw Error(ErrorCode::kInvalidArgument, "synthetic teacher feature_dim must be positive");
  }
  if (!(params_.noise_scale > 0.0)) {
    throw Error(ErrorCode::kInvalidArgument, "synthetic teacher noise_scale must be positive");
  }
  if (!(params_.error_confidence_shrink >= 0.0 && params_.error_confidence_shrink < 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "error_confidence_shrink must lie in [0,1)");
  }
  Rng rng(derive_seed(params_.seed.value, "direction"));
  const double scale = 1.0 / std::sqrt(static_cast<double>(params_.feature_dim));
  direction_.resize(params_.feature_dim);
  for (auto& d : direction_) d = (rng.next_u64() >> 63) ? scale : -scale;
}

TeacherOutput SyntheticTeacher::predict(const DatasetRecord& record) const {
  if (record.label != 0 && record.label != 1) {
    throw Error(ErrorCode::kNonBinaryLabel,
                "synthetic teacher needs a binary ground-truth label for " + record.record_id);
  }
  Rng rng(derive_seed(params_.seed.value, record.record_id));
  const double acc = record.label == 1 ? params_.accuracy_positive : params_.accuracy_negative;
  const bool correct = rng.uniform() < acc;

  TeacherOutput out;
  out.prediction = correct ? record.label : 1 - record.label;
  // Confidence in (0, 1]; wrong answers are shrunk toward 0.5.
  double confidence = 1.0 - rng.uniform();
  if (!correct) confidence *= 1.0 - params_.error_confidence_shrink;
  out.probability = out.prediction == 1 ? 0.5 + 0.5 * confidence : 0.5 - 0.5 * confidence;

  if (role() == TeacherRole::kSmall) {
    const bool positive = params_.feature_model == FeatureModel::kClassConditioned
                              ? record.label == 1
                              : correct;
    const double amplitude =
        (positive ? 1.0 : -1.0) * std::sqrt(static_cast<double>(params_.feature_dim));
    std::vector<double> hidden(params_.feature_dim);
    for (std::size_t j = 0; j < hidden.size(); ++j) {
      hidden[j] = amplitude * direction_[j] + params_.noise_scale * rng.normal();
    }
    out.hidden = std::move(hidden);
  }
  return out;
}

json SyntheticTeacher::describe() const {
  return json{
      {"kind", "synthetic"},
      {"role", role_name(role())},
      {"accuracy_positive", params_.accuracy_positive},
      {"accuracy_negative", params_.accuracy_negative},
      {"feature_dim", params_.feature_dim},
      {"feature_model", params_.feature_model == FeatureModel::kClassConditioned
                            ? "class-conditioned-gaussian"
                            : "correctness-conditioned-gaussian"},
      {"noise_scale", params_.noise_scale},
      {"error_confidence_shrink", params_.error_confidence_shrink},
      {"seed", params_.seed.value},
  };
}

// ---------------------------------------------------------------------------
// Replay teacher and fixtures

namespace {

TeacherOutput output_from_json(const json& j, const std::string& context) {
  if (!j.is_object()) throw Error(ErrorCode::kSchema, context + ": expected an object");
  auto pred = j.find("prediction");
  auto prob = j.find("probability");
  if (pred == j.end() || !pred->is_number_integer()) {
    throw Error(ErrorCode::kSchema, context + ": missing integer 'prediction'");
  }
  if (prob == j.end() || !prob->is_number()) {
    throw Error(ErrorCode::kSchema, context + ": missing numeric 'probability'");
  }
  TeacherOutput out;
  out.prediction = pred->get<int>();
  out.probability = prob->get<double>();
  if (out.prediction != 0 && out.prediction != 1) {
    throw Error(ErrorCode::kSchema, context + ": 'prediction' must be 0 or 1");
  }
  if (!(out.probability >= 0.0 && out.probability <= 1.0)) {
    throw Error(ErrorCode::kSchema, context + ": 'probability' must lie in [0,1]");
  }
  if (auto hidden = j.find("hidden"); hidden != j.end() && !hidden->is_null()) {
    if (!hidden->is_array()) throw Error(ErrorCode::kSchema, context + ": 'hidden' must be an array");
    std::vector<double> values;
    values.reserve(hidden->size());
    for (const auto& v : *hidden) {
      if (!v.is_number()) throw Error(ErrorCode::kSchema, context + ": non-numeric hidden value");
      values.push_back(v.get<double>());
    }
    out.hidden = std::move(values);
  }
  return out;
}

json output_to_json(const TeacherOutput& out) {
  json j{{"prediction", out.prediction}, {"probability", out.probability}};
  if (out.hidden) j["hidden"] = *out.hidden;
  return j;
}

}  // namespace

void write_fixture(const ReplayFixture& fixture, const std::filesystem::path& path) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& [id, out] : fixture) {
    nlohmann::ordered_json item;
    item["record_id"] = id;
    item["prediction"] = out.prediction;
    item["probability"] = out.probability;
    if (out.hidden) item["hidden"] = *out.hidden;
    arr.push_back(std::move(item));
  }
  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw Error(ErrorCode::kIo, "cannot write fixture " + path.string());
  file << arr.dump() << '\n';
  if (!file) throw Error(ErrorCode::kIo, "failed writing fixture " + path.string());
}

ReplayFixture read_fixture(const std::filesystem::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw Error(ErrorCode::kIo, "cannot open fixture " + path.string());
  json doc;
  try {
    doc = json::parse(file);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::kSchema, "fixture " + path.string() + " is not valid JSON: " + e.what());
  }
  if (!doc.is_array()) throw Error(ErrorCode::kSchema, "fixture " + path.string() + " must be an array");
  ReplayFixture fixture;
  std::size_t index = 0;
  for (const auto& item : doc) {
    const std::string context = path.string() + "[" + std::to_string(index++) + "]";
    if (!item.is_object() || !item.contains("record_id") || !item["record_id"].is_string()) {
      throw Error(ErrorCode::kSchema, context + ": missing string 'record_id'");
    }
    auto id = item["record_id"].get<std::string>();
    auto out = output_from_json(item, context);
    if (!fixture.emplace(id, std::move(out)).second) {
      throw Error(ErrorCode::kDuplicateId, context + ": duplicate record_id " + id);
    }
  }
  return fixture;
}

ReplayTeacher::ReplayTeacher(TeacherRole role, ReplayFixture fixture, std::size_t feature_dim,
                             std::string source)
    : Teacher(role, feature_dim), fixture_(std::move(fixture)), source_(std::move(source)) {}

TeacherOutput ReplayTeacher::predict(const DatasetRecord& record) const {
  auto it = fixture_.find(record.record_id);
  if (it == fixture_.end()) {
    throw Error(ErrorCode::kReplayMiss, "replay fixture has no entry for record " + record.record_id);
  }
  return it->second;
}

json ReplayTeacher::describe() const {
  return json{{"kind", "replay"},
              {"role", role_name(role())},
              {"fixture", source_},
              {"entries", fixture_.size()}};
}

// ---------------------------------------------------------------------------
// Remote teacher

struct RemoteTeacher::Endpoint {
  std::string base;  // scheme://host:port
  std::string path_prefix;
};

RemoteTeacher::RemoteTeacher(TeacherRole role, RemoteTeacherParams params, std::size_t feature_dim)
    : Teacher(role, feature_dim),
      params_(std::move(params)),
      endpoint_(std::make_unique<Endpoint>()),
      in_flight_(std::clamp(params_.max_in_flight, 1, 1024)) {
  if (params_.timeout_ms <= 0) {
    throw Error(ErrorCode::kInvalidArgument, "remote teacher timeout_ms must be positive");
  }
  if (params_.max_retries < 0) {
    throw Error(ErrorCode::kInvalidArgument, "remote teacher max_retries must be non-negative");
  }
  std::string url = params_.endpoint_url;
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) {
    throw Error(ErrorCode::kInvalidArgument, "remote endpoint must include a scheme: " + url);
  }
  const auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) {
    endpoint_->base = url;
  } else {
    endpoint_->base = url.substr(0, path_start);
    endpoint_->path_prefix = url.substr(path_start);
    while (!endpoint_->path_prefix.empty() && endpoint_->path_prefix.back() == '/') {
      endpoint_->path_prefix.pop_back();
    }
  }
}

RemoteTeacher::~RemoteTeacher() = default;

TeacherOutput RemoteTeacher::predict(const DatasetRecord& record) const {
  const json body{{"record_id", record.record_id},
                  {"payload_ref", record.payload_ref},
                  {"want_hidden", role() == TeacherRole::kSmall}};
  const std::string payload = body.dump();
  const std::string path = endpoint_->path_prefix + "/predict";

  in_flight_.acquire();
  struct Release {
    std::counting_semaphore<1024>& sem;
    ~Release() { sem.release(); }
  } release{in_flight_};

  auto log = [&](int attempt, int status, std::string outcome) {
    std::lock_guard lock(log_mutex_);
    log_.push_back({record.record_id, attempt, status, std::move(outcome)});
  };

  ErrorCode last_code = ErrorCode::kRemoteUnavailable;
  std::string last_message;
  for (int attempt = 0; attempt <= params_.max_retries; ++attempt) {
    httplib::Client client(endpoint_->base);
    const auto timeout = std::chrono::milliseconds(params_.timeout_ms);
    client.set_connection_timeout(timeout);
    client.set_read_timeout(timeout);
    client.set_write_timeout(timeout);

    auto res = client.Post(path, payload, "application/json");
    if (!res) {
      const auto err = res.error();
      if (err == httplib::Error::Read || err == httplib::Error::Write ||
          err == httplib::Error::ConnectionTimeout) {
        last_code = ErrorCode::kRemoteTimeout;
        last_message = "remote teacher timed out for " + record.record_id;
        log(attempt, 0, "timeout");
      } else {
        last_code = ErrorCode::kRemoteUnavailable;
        last_message = "remote teacher unreachable for " + record.record_id + " (" +
                       httplib::to_string(err) + ")";
        log(attempt, 0, "unavailable");
      }
      continue;
    }
    if (res->status < 200 || res->status >= 300) {
      last_code = ErrorCode::kRemoteStatus;
      last_message = "remote teacher returned HTTP " + std::to_string(res->status) + " for " +
                     record.record_id;
      log(attempt, res->status, "status");
      if (res->status >= 500) continue;
      break;  // 4xx will not change on retry
    }
    TeacherOutput out;
    try {
      out = output_from_json(json::parse(res->body), "remote response for " + record.record_id);
      validate_output(record, out);
    } catch (const json::exception& e) {
      log(attempt, res->status, "malformed");
      throw Error(ErrorCode::kRemoteMalformed,
                  "malformed remote response for " + record.record_id + ": " + e.what());
    } catch (const Error& e) {
      log(attempt, res->status, "malformed");
      throw Error(ErrorCode::kRemoteMalformed, e.what());
    }
    log(attempt, res->status, "ok");
    return out;
  }
  throw Error(last_code, last_message);
}

json RemoteTeacher::describe() const {
  return json{{"kind", "remote"},
              {"role", role_name(role())},
              {"endpoint_url", params_.endpoint_url},
              {"timeout_ms", params_.timeout_ms},
              {"max_retries", params_.max_retries},
              {"max_in_flight", params_.max_in_flight}};
}

std::vector<RemoteAttempt> RemoteTeacher::request_log() const {
  std::lock_guard lock(log_mutex_);
  return log_;
}

// ---------------------------------------------------------------------------
// Teacher server

struct TeacherServer::Impl {
  std::shared_ptr<const Teacher> teacher;
  std::map<std::string, int> labels;
  httplib::Server server;
  std::thread thread;
  std::atomic<bool> outage{false};
  std::atomic<long> delay_ms{0};
  std::atomic<std::size_t> served{0};
};

TeacherServer::TeacherServer(std::shared_ptr<const Teacher> teacher, std::map<std::string, int> labels)
    : impl_(std::make_unique<Impl>()) {
  impl_->teacher = std::move(teacher);
  impl_->labels = std::move(labels);
  Impl* impl = impl_.get();
  impl->server.Post("/predict", [impl](const httplib::Request& req, httplib::Response& res) {
    impl->served.fetch_add(1);
    if (long d = impl->delay_ms.load(); d > 0) {
      std::this_thread::sleep_for(std::chrono::milliseconds(d));
    }
    if (impl->outage.load()) {
      res.status = 503;
      res.set_content(R"({"error":"unavailable"})", "application/json");
      return;
    }
    DatasetRecord record;
    bool want_hidden = false;
    try {
      const json body = json::parse(req.body);
      record.record_id = body.at("record_id").get<std::string>();
      record.payload_ref = body.value("payload_ref", std::string{});
      want_hidden = body.value("want_hidden", false);
    } catch (const json::exception& e) {
      res.status = 400;
      res.set_content(json{{"error", e.what()}}.dump(), "application/json");
      return;
    }
    if (auto it = impl->labels.find(record.record_id); it != impl->labels.end()) {
      record.label = it->second;
    }
    try {
      TeacherOutput out = impl->teacher->predict(record);
      if (!want_hidden) out.hidden.reset();
      res.set_content(output_to_json(out).dump(), "application/json");
    } catch (const Error& e) {
      res.status = e.code() == ErrorCode::kReplayMiss ? 404 : 500;
      res.set_content(json{{"error", e.what()}}.dump(), "application/json");
    }
  });
}

TeacherServer::~TeacherServer() { stop(); }

int TeacherServer::start(const std::string& host, int port) {
  int bound = port;
  if (port == 0) {
    bound = impl_->server.bind_to_any_port(host);
  } else if (!impl_->server.bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound < 0) throw Error(ErrorCode::kIo, "teacher server cannot bind " + host);
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return bound;
}

void TeacherServer::stop() {
  if (impl_ && impl_->thread.joinable()) {
    impl_->server.stop();
    impl_->thread.join();
  }
}

void TeacherServer::set_outage(bool outage) { impl_->outage.store(outage); }

void TeacherServer::set_delay(std::chrono::milliseconds delay) {
  impl_->delay_ms.store(static_cast<long>(delay.count()));
}

std::size_t TeacherServer::requests_served() const { return impl_->served.load(); }

// ---------------------------------------------------------------------------

namespace {

FeatureModel parse_feature_model(const std::string& name) {
  if (name == "class-conditioned-gaussian" || name == "class-conditioned") {
    return FeatureModel::kClassConditioned;
  }
  if (name == "correctness-conditioned-gaussian" || name == "correctness-conditioned") {
    return FeatureModel::kCorrectnessConditioned;
  }
  throw Error(ErrorCode::kInvalidArgument, "unknown feature_model '" + name + "'");
}

}  // namespace

std::shared_ptr<const Teacher> make_teacher(const json& spec, TeacherRole role,
                                            std::size_t feature_dim, std::uint64_t default_seed,
                                            const std::filesystem::path& base_dir) {
  try {
    const std::string kind = spec.at("kind").get<std::string>();
    if (kind == "synthetic") {
      SyntheticTeacherParams p;
      if (spec.contains("accuracy")) {
        p.accuracy_positive = p.accuracy_negative = spec["accuracy"].get<double>();
      }
      p.accuracy_positive = spec.value("accuracy_positive", p.accuracy_positive);
      p.accuracy_negative = spec.value("accuracy_negative", p.accuracy_negative);
      p.feature_dim = spec.value("feature_dim", feature_dim);
      if (role == TeacherRole::kSmall && p.feature_dim != feature_dim) {
        throw Error(ErrorCode::kDimensionMismatch,
                    "small teacher feature_dim " + std::to_string(p.feature_dim) +
                        " does not match manifest feature_dim " + std::to_string(feature_dim));
      }
      p.feature_model = parse_feature_model(
          spec.value("feature_model", std::string("correctness-conditioned-gaussian")));
      p.noise_scale = spec.value("noise_scale", p.noise_scale);
      p.error_confidence_shrink = spec.value("error_confidence_shrink", p.error_confidence_shrink);
      p.seed.value = spec.value("seed", default_seed);
      return std::make_shared<SyntheticTeacher>(role, p);
    }
    if (kind == "replay") {
      std::filesystem::path fixture = spec.at("fixture").get<std::string>();
      if (fixture.is_relative() && !base_dir.empty()) fixture = base_dir / fixture;
      return std::make_shared<ReplayTeacher>(role, read_fixture(fixture), feature_dim,
                                             fixture.string());
    }
    if (kind == "remote") {
      RemoteTeacherParams p;
      p.endpoint_url = spec.at("endpoint_url").get<std::string>();
      p.timeout_ms = spec.value("timeout_ms", p.timeout_ms);
      p.max_retries = spec.value("max_retries", p.max_retries);
      p.max_in_flight = spec.value("max_in_flight", p.max_in_flight);
      return std::make_shared<RemoteTeacher>(role, p, feature_dim);
    }
    throw Error(ErrorCode::kInvalidArgument, "unknown teacher kind '" + kind + "'");
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kInvalidArgument,
                std::string("invalid ") + std::string(role_name(role)) + " teacher spec: " + e.what());
  }
}

TeacherOutput teacher_predict(const Teacher& teacher, const DatasetRecord& record) {
  TeacherOutput out = teacher.predict(record);
  teacher.validate_output(record, out);
  return out;
}

namespace {

std::string describe_failures(const std::vector<RecordFailure>& failures) {
  std::string msg = std::to_string(failures.size()) + " record(s) failed:";
  std::size_t shown = 0;
  for (const auto& f : failures) {
    if (shown++ == 5) {
      msg += " ...";
      break;
    }
    msg += " [" + f.record_id + ": " + f.message + "]";
  }
  return msg;
}

}  // namespace

BatchError::BatchError(std::vector<RecordFailure> failures)
    : Error(failures.empty() ? ErrorCode::kBatch : failures.front().code,
            describe_failures(failures)),
      failures_(std::move(failures)) {}

std::vector<TeacherOutput> teacher_predict_batch(const Teacher& teacher,
                                                 const std::vector<DatasetRecord>& records,
                                                 std::size_t workers) {
  std::vector<TeacherOutput> outputs(records.size());
  std::vector<std::optional<RecordFailure>> failures(records.size());

  auto run = [&](std::size_t i) {
    try {
      outputs[i] = teacher_predict(teacher, records[i]);
    } catch (const Error& e) {
      failures[i] = RecordFailure{records[i].record_id, e.code(), e.what()};
    } catch (const std::exception& e) {
      failures[i] = RecordFailure{records[i].record_id, ErrorCode::kBatch, e.what()};
    }
  };

  workers = std::max<std::size_t>(1, std::min(workers, records.size()));
  if (workers == 1) {
    for (std::size_t i = 0; i < records.size(); ++i) run(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next.fetch_add(1); i < records.size(); i = next.fetch_add(1)) run(i);
      });
    }
  }

  std::vector<RecordFailure> collected;
  for (auto& f : failures) {
    if (f) collected.push_back(std::move(*f));
  }
  if (!collected.empty()) throw BatchError(std::move(collected));
  return outputs;
}

}  // namespace hybrid
