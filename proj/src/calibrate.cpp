#include "hybrid/calibrate.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace hybrid {

using nlohmann::json;

std::vector<ScoredItem> score_items(const SwitcherModel& model,
                                    const std::vector<ScoringInput>& inputs) {
  std::vector<ScoredItem> items;
  items.reserve(inputs.size());
  for (const auto& in : inputs) {
    ScoredItem item;
    item.record_id = in.record_id;
    item.alignment_prob = predict_alignment(model, in.features);
    item.small_pred = in.small_pred;
    item.large_pred = in.large_pred;
    item.true_label = in.true_label;
    item.small_probability = in.small_probability;
    items.push_back(std::move(item));
  }
  return items;
}

std::size_t deferred_count(double fraction, std::size_t n) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "deferral fraction must lie in [0,1]");
  }
  const double x = fraction * static_cast<double>(n);
  const double nearest = std::round(x);
  double k = std::abs(x - nearest) <= 1e-9 * std::max(1.0, x) ? nearest : std::ceil(x);
  return std::min(n, static_cast<std::size_t>(k));
}

std::vector<std::size_t> deferral_order(const std::vector<ScoredItem>& items) {
  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (items[a].alignment_prob != items[b].alignment_prob) {
      return items[a].alignment_prob < items[b].alignment_prob;
    }
    return items[a].record_id < items[b].record_id;
  });
  return order;
}

ConfusionCounts combined_counts_at_fraction(const std::vector<ScoredItem>& items, double fraction) {
  if (items.empty()) throw Error(ErrorCode::kEmptyInput, "no scored items");
  const std::size_t k = deferred_count(fraction, items.size());
  const auto order = deferral_order(items);
  ConfusionCounts counts;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    const auto& item = items[order[rank]];
    counts.add(rank < k ? item.large_pred : item.small_pred, item.true_label);
  }
  return counts;
}

double combined_f1_at_fraction(const std::vector<ScoredItem>& items, double fraction) {
  return f1_score(combined_counts_at_fraction(items, fraction));
}

namespace {

void remove_count(ConfusionCounts& c, int predicted, int actual) {
  if (predicted == 1) {
    if (actual == 1) --c.tp; else --c.fp;
  } else {
    if (actual == 1) --c.fn; else --c.tn;
  }
}

// Sweeps k/bucket_count fractions along a fixed deferral order, moving items
// from their small prediction to their large prediction.
DeferralCurve sweep(const std::vector<ScoredItem>& items, const std::vector<std::size_t>& order,
                    std::size_t bucket_count) {
  if (items.empty()) throw Error(ErrorCode::kEmptyInput, "no scored items");
  if (bucket_count == 0) throw Error(ErrorCode::kInvalidArgument, "bucket_count must be positive");
  const std::size_t n = items.size();
  ConfusionCounts counts;
  for (const auto& item : items) counts.add(item.small_pred, item.true_label);

  DeferralCurve curve;
  curve.bucket_count = bucket_count;
  std::size_t moved = 0;
  for (std::size_t k = 1; k <= bucket_count; ++k) {
    const double fraction = static_cast<double>(k) / static_cast<double>(bucket_count);
    const std::size_t target = deferred_count(fraction, n);
    for (; moved < target; ++moved) {
      const auto& item = items[order[moved]];
      remove_count(counts, item.small_pred, item.true_label);
      counts.add(item.large_pred, item.true_label);
    }
    curve.points.push_back({fraction, f1_score(counts), target});
  }
  return curve;
}

std::vector<std::size_t> uncertainty_order(const std::vector<UncertaintyItem>& items) {
  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double ua = uncertainty_score(items[a].small_probability);
    const double ub = uncertainty_score(items[b].small_probability);
    if (ua != ub) return ua > ub;
    return items[a].record_id < items[b].record_id;
  });
  return order;
}

std::vector<UncertaintyItem> to_uncertainty_items(const std::vector<ScoredItem>& items) {
  std::vector<UncertaintyItem> out;
  out.reserve(items.size());
  for (const auto& item : items) out.push_back({item.record_id, item.small_probability});
  return out;
}

}  // namespace

DeferralCurve build_curve(const std::vector<ScoredItem>& items, std::size_t bucket_count) {
  return sweep(items, deferral_order(items), bucket_count);
}

bool DeferralPolicy::should_defer(double alignment_prob, std::string_view record_id) const {
  if (alignment_prob < probability_cutoff) return true;
  if (alignment_prob > probability_cutoff) return false;
  return !boundary_record_id || record_id <= *boundary_record_id;
}

DeferralPolicy policy_for_fraction(double fraction, const std::vector<ScoredItem>& items) {
  if (items.empty()) throw Error(ErrorCode::kEmptyInput, "no scored items");
  DeferralPolicy policy;
  policy.deferred_fraction = fraction;
  const std::size_t k = deferred_count(fraction, items.size());
  if (k == 0) {
    // Probabilities are strictly positive, so nothing defers.
    policy.probability_cutoff = 0.0;
    policy.boundary_record_id = std::string{};
  } else {
    const auto order = deferral_order(items);
    const auto& boundary = items[order[k - 1]];
    policy.probability_cutoff = boundary.alignment_prob;
    policy.boundary_record_id = boundary.record_id;
  }
  policy.provenance = json{{"calibration_items", items.size()}, {"deferred_count", k}};
  return policy;
}

DeferralPolicy select_policy(const DeferralCurve& curve, const std::vector<ScoredItem>& train_items) {
  if (curve.points.empty()) throw Error(ErrorCode::kInvalidArgument, "empty deferral curve");
  const CurvePoint* best = &curve.points.front();
  for (const auto& point : curve.points) {
    if (point.combined_f1 > best->combined_f1) best = &point;
  }
  DeferralPolicy policy = policy_for_fraction(best->fraction, train_items);
  policy.provenance["bucket_count"] = curve.bucket_count;
  policy.provenance["peak_f1"] = best->combined_f1;
  return policy;
}

json policy_to_json(const DeferralPolicy& policy) {
  json j{{"deferred_fraction", policy.deferred_fraction},
         {"probability_cutoff", policy.probability_cutoff},
         {"tie_rule", "defer iff alignment_prob < cutoff, or == cutoff and record_id <= "
                      "boundary_record_id (all ties defer when absent)"}};
  if (policy.boundary_record_id) j["boundary_record_id"] = *policy.boundary_record_id;
  j["provenance"] = policy.provenance;
  return j;
}

DeferralPolicy policy_from_json(const json& j) {
  try {
    DeferralPolicy policy;
    policy.deferred_fraction = j.at("deferred_fraction").get<double>();
    policy.probability_cutoff = j.at("probability_cutoff").get<double>();
    if (j.contains("boundary_record_id") && !j["boundary_record_id"].is_null()) {
      policy.boundary_record_id = j["boundary_record_id"].get<std::string>();
    }
    if (j.contains("provenance")) policy.provenance = j["provenance"];
    if (!(policy.deferred_fraction >= 0.0 && policy.deferred_fraction <= 1.0) ||
        !(policy.probability_cutoff >= 0.0 && policy.probability_cutoff <= 1.0)) {
      throw Error(ErrorCode::kSchema, "policy fraction and cutoff must lie in [0,1]");
    }
    return policy;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kSchema, std::string("invalid policy: ") + e.what());
  }
}

void write_policy(const DeferralPolicy& policy, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write policy " + path.string());
  out << policy_to_json(policy).dump(2) << '\n';
}

DeferralPolicy read_policy(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open policy " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::kSchema, "policy " + path.string() + " is not valid JSON: " + e.what());
  }
  return policy_from_json(j);
}

std::vector<std::string> uncertainty_rank(const std::vector<UncertaintyItem>& items, double fraction) {
  const std::size_t k = deferred_count(fraction, items.size());
  const auto order = uncertainty_order(items);
  std::vector<std::string> ids;
  ids.reserve(k);
  for (std::size_t i = 0; i < k; ++i) ids.push_back(items[order[i]].record_id);
  return ids;
}

ConfusionCounts uncertainty_counts_at_fraction(const std::vector<ScoredItem>& items, double fraction) {
  if (items.empty()) throw Error(ErrorCode::kEmptyInput, "no scored items");
  const std::size_t k = deferred_count(fraction, items.size());
  const auto order = uncertainty_order(to_uncertainty_items(items));
  ConfusionCounts counts;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    const auto& item = items[order[rank]];
    counts.add(rank < k ? item.large_pred : item.small_pred, item.true_label);
  }
  return counts;
}

double uncertainty_f1_at_fraction(const std::vector<ScoredItem>& items, double fraction) {
  return f1_score(uncertainty_counts_at_fraction(items, fraction));
}

DeferralCurve build_uncertainty_curve(const std::vector<ScoredItem>& items, std::size_t bucket_count) {
  return sweep(items, uncertainty_order(to_uncertainty_items(items)), bucket_count);
}

std::string curve_to_csv(const DeferralCurve& curve) {
  std::ostringstream out;
  out << "fraction,combined_f1,deferred_count\n";
  for (const auto& p : curve.points) {
    out << format_number(p.fraction) << ',' << format_number(p.combined_f1) << ','
        << p.deferred_count << '\n';
  }
  return out.str();
}

void write_curve_csv(const DeferralCurve& curve, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write curve report " + path.string());
  out << curve_to_csv(curve);
}

}  // namespace hybrid
