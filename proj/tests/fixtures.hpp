#pragma once
// Shared builders for synthetic DMD data and scored items.

#include <memory>
#include <string>
#include <vector>

#include "hybrid/calibrate.hpp"
#include "hybrid/dmd.hpp"
#include "hybrid/ingest.hpp"
#include "hybrid/teachers.hpp"

namespace hybrid::fixtures {

struct TeacherPair {
  std::shared_ptr<SyntheticTeacher> small;
  std::shared_ptr<SyntheticTeacher> large;
};

inline TeacherPair synthetic_teachers(std::size_t dim, double small_acc, double large_acc,
                                      double noise, std::uint64_t seed,
                                      FeatureModel model = FeatureModel::kCorrectnessConditioned) {
  SyntheticTeacherParams s;
  s.accuracy_positive = s.accuracy_negative = small_acc;
  s.feature_dim = dim;
  s.feature_model = model;
  s.noise_scale = noise;
  s.seed.value = derive_seed(seed, "small");
  SyntheticTeacherParams l = s;
  l.accuracy_positive = l.accuracy_negative = large_acc;
  l.seed.value = derive_seed(seed, "large");
  return {std::make_shared<SyntheticTeacher>(TeacherRole::kSmall, s),
          std::make_shared<SyntheticTeacher>(TeacherRole::kLarge, l)};
}

inline DatasetManifest manifest(std::size_t train, std::size_t validation, std::size_t test,
                                std::size_t dim, std::uint64_t seed) {
  SyntheticManifestConfig cfg;
  cfg.train = train;
  cfg.validation = validation;
  cfg.test = test;
  cfg.feature_dim = dim;
  cfg.seed = seed;
  return make_synthetic_manifest(cfg);
}

// Scoring inputs for one split: features plus both teachers' predictions.
inline std::vector<ScoringInput> scoring_inputs(const DmdDataset& ds) {
  std::vector<ScoringInput> out;
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    const auto& p = ds.predictions[i];
    out.push_back(ScoringInput{p.record_id, ds.records[i].last_hidden_layer, p.small_prediction,
                               p.large_prediction, p.true_label, p.small_probability});
  }
  return out;
}

// Random items for calibration properties. Probabilities come from a small
// set of values when `ties` so that equal alignment scores are common.
inline std::vector<ScoredItem> random_items(Rng& rng, std::size_t n, bool ties) {
  std::vector<ScoredItem> items(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& it = items[i];
    it.record_id = "id-" + std::to_string(rng.below(1000000)) + "-" + std::to_string(i);
    it.alignment_prob = ties ? static_cast<double>(rng.below(5)) / 4.0 : rng.uniform();
    it.true_label = rng.uniform() < 0.5 ? 1 : 0;
    it.small_pred = rng.uniform() < 0.6 ? it.true_label : 1 - it.true_label;
    it.large_pred = rng.uniform() < 0.85 ? it.true_label : 1 - it.true_label;
    it.small_probability = ties ? static_cast<double>(rng.below(9)) / 8.0 : rng.uniform();
  }
  return items;
}

}  // namespace hybrid::fixtures
