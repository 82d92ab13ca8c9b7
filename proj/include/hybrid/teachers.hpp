#pragma once

#include <chrono>
#include <cstddef>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <semaphore>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hybrid/core.hpp"

namespace hybrid {

enum class TeacherRole { kSmall, kLarge };
enum class TeacherKind { kSynthetic, kReplay, kRemote };

std::string_view role_name(TeacherRole role);
std::string_view kind_name(TeacherKind kind);

// Teachers are immutable after construction; predict() may be called from any
// number of threads.
class Teacher {
 public:
  virtual ~Teacher() = default;

  virtual TeacherOutput predict(const DatasetRecord& record) const = 0;
  virtual TeacherKind kind() const = 0;
  // Provenance: kind-specific parameters and seeds.
  virtual nlohmann::json describe() const = 0;

  TeacherRole role() const { return role_; }
  // Hidden-vector length produced by small-role teachers.
  std::size_t feature_dim() const { return feature_dim_; }

  // Enforces the TeacherOutput invariants for this role.
  void validate_output(const DatasetRecord& record, const TeacherOutput& out) const;

 protected:
  Teacher(TeacherRole role, std::size_t feature_dim) : role_(role), feature_dim_(feature_dim) {}

 private:
  TeacherRole role_;
  std::size_t feature_dim_;
};

// ---------------------------------------------------------------------------

enum class FeatureModel {
  kClassConditioned,        // features encode the ground-truth label
  kCorrectnessConditioned,  // features encode whether this teacher is right
};

struct SyntheticTeacherParams {
  double accuracy_positive = 0.8;
  double accuracy_negative = 0.8;
  std::size_t feature_dim = 1536;
  FeatureModel feature_model = FeatureModel::kCorrectnessConditioned;
  double noise_scale = 0.5;
  // In [0,1): how much less confident wrong predictions are. 0 = same
  // confidence distribution as right ones.
  double error_confidence_shrink = 0.5;
  RngSeed seed;
};

// Stand-in teacher whose per-record randomness comes from hash(seed, record_id),
// so outputs do not depend on call order.
class SyntheticTeacher final : public Teacher {
 public:
  SyntheticTeacher(TeacherRole role, SyntheticTeacherParams params);

  TeacherOutput predict(const DatasetRecord& record) const override;
  TeacherKind kind() const override { return TeacherKind::kSynthetic; }
  nlohmann::json describe() const override;

  const SyntheticTeacherParams& params() const { return params_; }
  // Unit-norm signal direction the hidden vectors are built around.
  const std::vector<double>& direction() const { return direction_; }

 private:
  SyntheticTeacherParams params_;
  std::vector<double> direction_;
};

// ---------------------------------------------------------------------------

using ReplayFixture = std::map<std::string, TeacherOutput>;

// Fixture file: JSON array of {record_id, prediction, probability, hidden?}.
void write_fixture(const ReplayFixture& fixture, const std::filesystem::path& path);
ReplayFixture read_fixture(const std::filesystem::path& path);

class ReplayTeacher final : public Teacher {
 public:
  ReplayTeacher(TeacherRole role, ReplayFixture fixture, std::size_t feature_dim,
                std::string source = {});

  TeacherOutput predict(const DatasetRecord& record) const override;
  TeacherKind kind() const override { return TeacherKind::kReplay; }
  nlohmann::json describe() const override;

  const ReplayFixture& fixture() const { return fixture_; }

 private:
  ReplayFixture fixture_;
  std::string source_;
};

// ---------------------------------------------------------------------------

struct RemoteTeacherParams {
  std::string endpoint_url;  // e.g. http://127.0.0.1:9000
  int timeout_ms = 5000;
  int max_retries = 2;
  int max_in_flight = 16;
};

struct RemoteAttempt {
  std::string record_id;
  int attempt = 0;  // 0 = first try
  int status = 0;   // HTTP status, 0 when no response
  std::string outcome;
};

// Client for the remote teacher wire protocol:
//   POST {endpoint}/predict {record_id, payload_ref, want_hidden}
//   -> {prediction, probability, hidden?}
class RemoteTeacher final : public Teacher {
 public:
  RemoteTeacher(TeacherRole role, RemoteTeacherParams params, std::size_t feature_dim);
  ~RemoteTeacher() override;

  TeacherOutput predict(const DatasetRecord& record) const override;
  TeacherKind kind() const override { return TeacherKind::kRemote; }
  nlohmann::json describe() const override;

  // Every request attempt, including retries.
  std::vector<RemoteAttempt> request_log() const;

 private:
  struct Endpoint;

  RemoteTeacherParams params_;
  std::unique_ptr<Endpoint> endpoint_;
  mutable std::counting_semaphore<1024> in_flight_;
  mutable std::mutex log_mutex_;
  mutable std::vector<RemoteAttempt> log_;
};

// Serves any Teacher over the remote wire protocol. Used to host a stand-in
// cloud model and by the tests. Ground-truth labels (needed by synthetic
// teachers) are looked up in `labels` by record_id; unknown ids get label 0.
class TeacherServer {
 public:
  explicit TeacherServer(std::shared_ptr<const Teacher> teacher,
                         std::map<std::string, int> labels = {});
  ~TeacherServer();

  TeacherServer(const TeacherServer&) = delete;
  TeacherServer& operator=(const TeacherServer&) = delete;

  // Binds to host on an ephemeral port (port == 0) or the given port and
  // starts serving on a background thread. Returns the bound port.
  int start(const std::string& host = "127.0.0.1", int port = 0);
  void stop();

  // While set, every /predict answers 503.
  void set_outage(bool outage);
  // Artificial per-request latency.
  void set_delay(std::chrono::milliseconds delay);

  std::size_t requests_served() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// ---------------------------------------------------------------------------

// Teacher spec (JSON): {"kind": "synthetic"|"replay"|"remote", ...kind params}.
// `feature_dim` is the manifest's declared dimension; `default_seed` is used
// when a synthetic spec does not carry its own seed.
std::shared_ptr<const Teacher> make_teacher(const nlohmann::json& spec, TeacherRole role,
                                            std::size_t feature_dim, std::uint64_t default_seed,
                                            const std::filesystem::path& base_dir = {});

TeacherOutput teacher_predict(const Teacher& teacher, const DatasetRecord& record);

struct RecordFailure {
  std::string record_id;
  ErrorCode code;
  std::string message;
};

// Aggregated per-record failures. code() is the first failure's code.
class BatchError : public Error {
 public:
  explicit BatchError(std::vector<RecordFailure> failures);

  const std::vector<RecordFailure>& failures() const { return failures_; }

 private:
  std::vector<RecordFailure> failures_;
};

// Element-wise equal to mapping teacher_predict over `records`. Failures are
// collected and rethrown as one BatchError naming every failed record_id.
std::vector<TeacherOutput> teacher_predict_batch(const Teacher& teacher,
                                                 const std::vector<DatasetRecord>& records,
                                                 std::size_t workers = 1);

}  // namespace hybrid
