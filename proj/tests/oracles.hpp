#pragma once
// Independent reference implementations used to check the library. They
// share only data types with the code under test.

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "hybrid/calibrate.hpp"
#include "hybrid/switcher.hpp"

namespace hybrid::oracle {

// Naive forward pass written out loop by loop.
inline double logit(const SwitcherModel& m, const std::vector<double>& x,
                    const DropoutMasks* masks = nullptr) {
  std::vector<double> a = x;
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    const DenseLayer& L = m.layers[l];
    std::vector<double> z(L.outputs);
    for (std::size_t r = 0; r < L.outputs; ++r) {
      double s = L.biases[r];
      for (std::size_t c = 0; c < L.inputs; ++c) s += L.weights[r * L.inputs + c] * a[c];
      z[r] = s;
    }
    if (l + 1 < m.layers.size()) {
      for (std::size_t r = 0; r < z.size(); ++r) {
        z[r] = z[r] > 0 ? z[r] : 0.0;
        if (masks) z[r] *= (*masks)[l][r];
      }
    }
    a = std::move(z);
  }
  return a[0];
}

inline double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

// Mean BCE on logits: y·softplus(−z) + (1−y)·softplus(z).
inline double loss(const SwitcherModel& m, const std::vector<std::vector<double>>& xs,
                   const std::vector<int>& ys, const std::vector<DropoutMasks>* masks = nullptr) {
  double total = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double z = logit(m, xs[i], masks ? &(*masks)[i] : nullptr);
    total += ys[i] == 1 ? softplus(-z) : softplus(z);
  }
  return total / static_cast<double>(xs.size());
}

// Central differences over every parameter, in Gradients layout.
inline Gradients finite_differences(SwitcherModel m, const std::vector<std::vector<double>>& xs,
                                    const std::vector<int>& ys, double eps,
                                    const std::vector<DropoutMasks>* masks = nullptr) {
  Gradients g;
  for (auto& L : m.layers) {
    std::vector<double> gw(L.weights.size()), gb(L.biases.size());
    for (std::size_t i = 0; i < L.weights.size(); ++i) {
      const double keep = L.weights[i];
      L.weights[i] = keep + eps;
      const double up = loss(m, xs, ys, masks);
      L.weights[i] = keep - eps;
      const double down = loss(m, xs, ys, masks);
      L.weights[i] = keep;
      gw[i] = (up - down) / (2 * eps);
    }
    for (std::size_t i = 0; i < L.biases.size(); ++i) {
      const double keep = L.biases[i];
      L.biases[i] = keep + eps;
      const double up = loss(m, xs, ys, masks);
      L.biases[i] = keep - eps;
      const double down = loss(m, xs, ys, masks);
      L.biases[i] = keep;
      gb[i] = (up - down) / (2 * eps);
    }
    g.weights.push_back(std::move(gw));
    g.biases.push_back(std::move(gb));
  }
  return g;
}

// Random parameters, biases included. Zero biases would put pre-activations
// exactly on the ReLU kink whenever every upstream unit is off, where the
// derivative does not exist and finite differences report half-slopes.
inline SwitcherModel random_model(const MlpArchitecture& arch, Rng& rng) {
  SwitcherModel m = init_model(arch, RngSeed{rng.next_u64()});
  for (auto& L : m.layers) {
    for (auto& b : L.biases) b = rng.uniform(-0.5, 0.5);
  }
  return m;
}

// |a − n| / max(|a|, |n|, floor). The floor keeps partials that are zero up
// to rounding (dead ReLUs) from producing meaningless ratios.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

inline double max_relative_error(const Gradients& a, const Gradients& n) {
  double worst = 0;
  for (std::size_t l = 0; l < a.weights.size(); ++l) {
    for (std::size_t i = 0; i < a.weights[l].size(); ++i) {
      worst = std::max(worst, relative_error(a.weights[l][i], n.weights[l][i]));
    }
    for (std::size_t i = 0; i < a.biases[l].size(); ++i) {
      worst = std::max(worst, relative_error(a.biases[l][i], n.biases[l][i]));
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Calibration by brute force.

inline double f1(std::uint64_t tp, std::uint64_t fp, std::uint64_t fn) {
  const auto d = 2 * tp + fp + fn;
  return d == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(d);
}

// Exact ceil(j·n / B) in integers.
inline std::size_t bucket_count_deferred(std::size_t j, std::size_t n, std::size_t buckets) {
  return (j * n + buckets - 1) / buckets;
}

// Ids ordered the way the deferral rule ranks them: least aligned first,
// ties broken by id.
inline std::vector<std::string> ranked_ids(const std::vector<ScoredItem>& items) {
  std::vector<std::pair<double, std::string>> keyed;
  for (const auto& it : items) keyed.emplace_back(it.alignment_prob, it.record_id);
  std::sort(keyed.begin(), keyed.end());
  std::vector<std::string> ids;
  for (auto& k : keyed) ids.push_back(k.second);
  return ids;
}

// F1 of the routed system when exactly the items in `deferred` go to the
// large model.
inline double routed_f1(const std::vector<ScoredItem>& items, const std::set<std::string>& deferred) {
  std::uint64_t tp = 0, fp = 0, fn = 0;
  for (const auto& it : items) {
    const int pred = deferred.count(it.record_id) ? it.large_pred : it.small_pred;
    tp += pred == 1 && it.true_label == 1;
    fp += pred == 1 && it.true_label == 0;
    fn += pred == 0 && it.true_label == 1;
  }
  return f1(tp, fp, fn);
}

struct OraclePoint {
  std::size_t deferred = 0;
  double f1 = 0.0;
  std::set<std::string> deferred_ids;
};

// Every bucket point with its deferred set materialized.
inline std::vector<OraclePoint> curve(const std::vector<ScoredItem>& items, std::size_t buckets) {
  const auto ids = ranked_ids(items);
  std::vector<OraclePoint> points;
  for (std::size_t j = 1; j <= buckets; ++j) {
    OraclePoint p;
    p.deferred = bucket_count_deferred(j, items.size(), buckets);
    p.deferred_ids.insert(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(p.deferred));
    p.f1 = routed_f1(items, p.deferred_ids);
    points.push_back(std::move(p));
  }
  return points;
}

// Index of the best point: highest F1, earliest (smallest fraction) on ties.
inline std::size_t best_point(const std::vector<OraclePoint>& points) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < points.size(); ++i) {
    if (points[i].f1 > points[best].f1) best = i;
  }
  return best;
}

// Uncertainty baseline: defer the k items whose small-model probability is
// closest to 0.5, ties by id.
inline std::set<std::string> uncertainty_set(const std::vector<ScoredItem>& items, std::size_t k) {
  std::vector<std::pair<double, std::string>> keyed;
  for (const auto& it : items) {
    keyed.emplace_back(-(1.0 - std::max(it.small_probability, 1.0 - it.small_probability)),
                       it.record_id);
  }
  std::sort(keyed.begin(), keyed.end());
  std::set<std::string> out;
  for (std::size_t i = 0; i < k; ++i) out.insert(keyed[i].second);
  return out;
}

}  // namespace hybrid::oracle
