#include "hybrid/core.hpp"

#include <charconv>
#include <cmath>
#include <numbers>

namespace hybrid {

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid-argument";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kSchema: return "schema-violation";
    case ErrorCode::kDuplicateId: return "duplicate-id";
    case ErrorCode::kUnknownSplit: return "unknown-split";
    case ErrorCode::kNonBinaryLabel: return "non-binary-label";
    case ErrorCode::kMalformedLine: return "malformed-line";
    case ErrorCode::kOutOfRange: return "out-of-range";
    case ErrorCode::kDimensionMismatch: return "dimension-mismatch";
    case ErrorCode::kEmptyInput: return "empty-input";
    case ErrorCode::kReplayMiss: return "replay-miss";
    case ErrorCode::kRemoteTimeout: return "remote-timeout";
    case ErrorCode::kRemoteUnavailable: return "remote-unavailable";
    case ErrorCode::kRemoteStatus: return "remote-status";
    case ErrorCode::kRemoteMalformed: return "remote-malformed";
    case ErrorCode::kNonFiniteLoss: return "non-finite-loss";
    case ErrorCode::kBudgetRejected: return "budget-rejected";
    case ErrorCode::kBatch: return "batch";
  }
  return "unknown";
}

std::string_view split_name(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kValidation: return "validation";
    case Split::kTest: return "test";
  }
  return "train";
}

Split parse_split(std::string_view text) {
  if (text == "train") return Split::kTrain;
  if (text == "validation") return Split::kValidation;
  if (text == "test") return Split::kTest;
  throw Error(ErrorCode::kUnknownSplit, "unknown split '" + std::string(text) + "'");
}

void ConfusionCounts::add(int predicted, int actual) {
  if (predicted == 1) {
    if (actual == 1) ++tp; else ++fp;
  } else {
    if (actual == 1) ++fn; else ++tn;
  }
}

double f1_score(const ConfusionCounts& counts) {
  const std::uint64_t denom = 2 * counts.tp + counts.fp + counts.fn;
  if (denom == 0) return 0.0;
  return static_cast<double>(2 * counts.tp) / static_cast<double>(denom);
}

double accuracy(const ConfusionCounts& counts) {
  const std::uint64_t total = counts.total();
  if (total == 0) throw Error(ErrorCode::kEmptyInput, "accuracy of empty confusion counts");
  return static_cast<double>(counts.tp + counts.tn) / static_cast<double>(total);
}

ConfusionCounts confusion_from_pairs(std::span<const std::pair<int, int>> pairs) {
  ConfusionCounts counts;
  for (const auto& [predicted, actual] : pairs) counts.add(predicted, actual);
  return counts;
}

std::string format_number(double value) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  (void)ec;
  return std::string(buf, end);
}

std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  return mix64(state);
}

std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t hash_string(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view key) {
  return mix64(mix64(seed) ^ hash_string(key));
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) {
  return mix64(mix64(seed) ^ mix64(salt + 0x632be59bd9b4e019ULL));
}

namespace {
inline std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
}  // namespace

Rng::Rng(std::uint64_t seed) {
  std::uint64_t state = seed;
  for (auto& word : s_) word = splitmix64(state);
}

std::uint64_t Rng::next_u64() {
  const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
  const std::uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t Rng::below(std::uint64_t bound) {
  if (bound == 0) return 0;
  // Rejection sampling keeps the draw unbiased.
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % bound);
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % bound;
}

double Rng::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace hybrid
