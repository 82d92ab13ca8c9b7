#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hybrid/core.hpp"
#include "hybrid/ingest.hpp"
#include "hybrid/teachers.hpp"

namespace hybrid {

// One Dual-Model Distillation training example: the small model's hidden
// features and whether the two teachers agreed (1) or not (0).
struct DmdRecord {
  std::string image_path;
  std::vector<double> last_hidden_layer;
  int label = 0;

  bool operator==(const DmdRecord&) const = default;
};

// Per-item teacher outputs kept beside a DMD file; calibration and
// evaluation need the individual predictions, not just their agreement.
struct ItemPredictions {
  std::string record_id;
  int true_label = 0;
  int small_prediction = 0;
  double small_probability = 0.5;
  int large_prediction = 0;

  bool operator==(const ItemPredictions&) const = default;
};

struct DmdDataset {
  std::vector<DmdRecord> records;
  std::vector<ItemPredictions> predictions;  // parallel to records
  Split split = Split::kTrain;
  nlohmann::json provenance;  // teacher specs and seeds

  std::size_t feature_dim() const {
    return records.empty() ? 0 : records.front().last_hidden_layer.size();
  }
};

inline int agreement_label(int small_pred, int large_pred) {
  return small_pred == large_pred ? 1 : 0;
}

// Runs both teachers over every record of `split` (manifest order).
DmdDataset generate_dmd(const DatasetManifest& manifest, Split split, const Teacher& small_teacher,
                        const Teacher& large_teacher, std::size_t workers = 1);

// DMD file: a JSON array whose elements are exactly
//   {"image_path": string, "last_hidden_layer": [number...], "label": 0|1}
// with keys in that order and 4-space indentation. Floats are written in
// shortest round-trip form, so write(read(file)) reproduces a file written
// by write_dmd byte for byte.
std::string dump_dmd(const std::vector<DmdRecord>& records);
void write_dmd(const DmdDataset& dataset, const std::filesystem::path& path);
void write_dmd(const std::vector<DmdRecord>& records, const std::filesystem::path& path);

std::vector<DmdRecord> parse_dmd(const std::string& text, const std::string& source = "<memory>");
// `expected_dim`, when set, is enforced on every record.
std::vector<DmdRecord> read_dmd(const std::filesystem::path& path,
                                std::optional<std::size_t> expected_dim = std::nullopt);

// `record_id,true_label,small_prediction,small_probability,large_prediction`
std::string predictions_to_csv(const std::vector<ItemPredictions>& rows);
void write_predictions(const std::vector<ItemPredictions>& rows, const std::filesystem::path& path);
std::vector<ItemPredictions> read_predictions(const std::filesystem::path& path);

struct DmdSummary {
  std::size_t count = 0;
  std::optional<double> agree_rate;  // absent for an empty dataset
  std::optional<double> mean_norm;
};

DmdSummary dmd_summary(const std::vector<DmdRecord>& records);

}  // namespace hybrid
