#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace hybrid {

// Error categories. The CLI maps these onto process exit codes.
enum class ErrorCode {
  kInvalidArgument,
  kIo,
  kSchema,
  kDuplicateId,
  kUnknownSplit,
  kNonBinaryLabel,
  kMalformedLine,
  kOutOfRange,
  kDimensionMismatch,
  kEmptyInput,
  kReplayMiss,
  kRemoteTimeout,
  kRemoteUnavailable,
  kRemoteStatus,
  kRemoteMalformed,
  kNonFiniteLoss,
  kBudgetRejected,
  kBatch,
};

const char* error_code_name(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

enum class Split { kTrain, kValidation, kTest };

std::string_view split_name(Split split);
Split parse_split(std::string_view text);

struct DatasetRecord {
  std::string record_id;
  std::string payload_ref;
  int label = 0;  // 0 = no-fall, 1 = fall
  Split split = Split::kTrain;

  bool operator==(const DatasetRecord&) const = default;
};

struct TeacherOutput {
  int prediction = 0;
  double probability = 0.0;  // probability of class 1
  std::optional<std::vector<double>> hidden;

  bool operator==(const TeacherOutput&) const = default;
};

// Probability ties at exactly 0.5 classify as 1.
inline int prediction_from_probability(double probability) {
  return probability >= 0.5 ? 1 : 0;
}

struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t tn = 0;
  std::uint64_t fn = 0;

  std::uint64_t total() const { return tp + fp + tn + fn; }
  void add(int predicted, int actual);

  bool operator==(const ConfusionCounts&) const = default;
};

// F1 of the positive class; 0 when 2tp+fp+fn == 0.
double f1_score(const ConfusionCounts& counts);

// Throws kEmptyInput on zero total.
double accuracy(const ConfusionCounts& counts);

ConfusionCounts confusion_from_pairs(std::span<const std::pair<int, int>> pairs);

// Shortest decimal text that parses back to exactly `value`.
std::string format_number(double value);

// ---------------------------------------------------------------------------
// Deterministic randomness.
//
// SplitMix64 seeds and hashes; xoshiro256** produces streams. Both are fully
// specified integer algorithms, so streams are identical on every platform.

struct RngSeed {
  std::uint64_t value = 0;
};

std::uint64_t splitmix64(std::uint64_t& state);
std::uint64_t mix64(std::uint64_t x);

// FNV-1a over the bytes of `text`.
std::uint64_t hash_string(std::string_view text);

// Seed for an independent per-record stream.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view key);
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt);

class Rng {
 public:
  explicit Rng(std::uint64_t seed);
  explicit Rng(RngSeed seed) : Rng(seed.value) {}

  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 bits of resolution.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, bound).
  std::uint64_t below(std::uint64_t bound);
  // Standard normal via Box-Muller (no cached second variate).
  double normal();

  template <typename T>
  void shuffle(std::vector<T>& values) {
    for (std::size_t i = values.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(values[i - 1], values[j]);
    }
  }

 private:
  std::uint64_t s_[4];
};

}  // namespace hybrid
