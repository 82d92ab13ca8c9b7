#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "hybrid/core.hpp"
#include "hybrid/switcher.hpp"

namespace hybrid {

struct ScoredItem {
  std::string record_id;
  double alignment_prob = 0.5;
  int small_pred = 0;
  int large_pred = 0;
  int true_label = 0;
  // Small model's class-1 probability; used only by the uncertainty baseline.
  double small_probability = 0.5;
};

struct ScoringInput {
  std::string record_id;
  std::vector<double> features;
  int small_pred = 0;
  int large_pred = 0;
  int true_label = 0;
  double small_probability = 0.5;
};

std::vector<ScoredItem> score_items(const SwitcherModel& model,
                                    const std::vector<ScoringInput>& inputs);

// ceil(fraction * n). Products within 1e-9 (relative) of an integer count as
// that integer, so fractions such as 3/10 defer exactly 3 of 10 items.
std::size_t deferred_count(double fraction, std::size_t n);

// Indices sorted by ascending alignment_prob, ties by record_id. The first k
// entries are the items deferred at any fraction that defers k.
std::vector<std::size_t> deferral_order(const std::vector<ScoredItem>& items);

ConfusionCounts combined_counts_at_fraction(const std::vector<ScoredItem>& items, double fraction);
double combined_f1_at_fraction(const std::vector<ScoredItem>& items, double fraction);

struct CurvePoint {
  double fraction = 0.0;
  double combined_f1 = 0.0;
  std::size_t deferred_count = 0;
};

struct DeferralCurve {
  std::vector<CurvePoint> points;
  std::size_t bucket_count = 10;
};

// Points at k / bucket_count for k = 1..bucket_count.
DeferralCurve build_curve(const std::vector<ScoredItem>& items, std::size_t bucket_count = 10);

// Inference-time rule: defer iff alignment_prob < cutoff, or alignment_prob
// == cutoff and (no boundary id is set, or record_id <= boundary id). The
// boundary id reproduces calibration's record_id tie-break exactly.
struct DeferralPolicy {
  double deferred_fraction = 0.0;
  double probability_cutoff = 0.0;
  std::optional<std::string> boundary_record_id;
  nlohmann::json provenance = nlohmann::json::object();

  bool should_defer(double alignment_prob, std::string_view record_id) const;
};

// Peak of the curve (ties to the smallest fraction); cutoff is the
// lower-interpolated fraction-quantile of the items' alignment probabilities.
DeferralPolicy select_policy(const DeferralCurve& curve, const std::vector<ScoredItem>& train_items);

// Policy for an explicit deferral fraction over `items`.
DeferralPolicy policy_for_fraction(double fraction, const std::vector<ScoredItem>& items);

// Policy file: {"deferred_fraction", "probability_cutoff", "tie_rule",
// "boundary_record_id"?, "provenance"}.
nlohmann::json policy_to_json(const DeferralPolicy& policy);
DeferralPolicy policy_from_json(const nlohmann::json& j);
void write_policy(const DeferralPolicy& policy, const std::filesystem::path& path);
DeferralPolicy read_policy(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Uncertainty baseline

struct UncertaintyItem {
  std::string record_id;
  double small_probability = 0.5;
};

// 1 - max(p, 1-p): 0.5 at p = 0.5, 0 at p in {0, 1}.
inline double uncertainty_score(double p) { return 1.0 - (p > 1.0 - p ? p : 1.0 - p); }

// The ceil(fraction*n) most uncertain record ids, most uncertain first; ties
// by record_id.
std::vector<std::string> uncertainty_rank(const std::vector<UncertaintyItem>& items, double fraction);

ConfusionCounts uncertainty_counts_at_fraction(const std::vector<ScoredItem>& items, double fraction);
double uncertainty_f1_at_fraction(const std::vector<ScoredItem>& items, double fraction);
DeferralCurve build_uncertainty_curve(const std::vector<ScoredItem>& items,
                                      std::size_t bucket_count = 10);

// Curve report: `fraction,combined_f1,deferred_count`.
std::string curve_to_csv(const DeferralCurve& curve);
void write_curve_csv(const DeferralCurve& curve, const std::filesystem::path& path);

}  // namespace hybrid
