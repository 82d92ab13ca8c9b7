#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "hybrid/core.hpp"

namespace hybrid {

// One object line of a YOLO label file: `class cx cy w h`, geometry normalized.
struct YoloLabelLine {
  int class_index = 0;
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;

  bool operator==(const YoloLabelLine&) const = default;
};

YoloLabelLine parse_yolo_label(std::string_view line);
std::string format_yolo_label(const YoloLabelLine& label);
std::vector<YoloLabelLine> read_yolo_label_file(const std::filesystem::path& path);

inline int derive_binary_label(const YoloLabelLine& label, int positive_class) {
  return label.class_index == positive_class ? 1 : 0;
}

struct IngestConfig {
  std::size_t feature_dim = 1536;
  std::string name;
};

class DatasetManifest {
 public:
  DatasetManifest(std::string name, std::size_t feature_dim, std::vector<DatasetRecord> records);

  const std::string& name() const { return name_; }
  std::size_t feature_dim() const { return feature_dim_; }
  const std::vector<DatasetRecord>& records() const { return records_; }

  // Counts indexed by Split (train, validation, test).
  const std::array<std::size_t, 3>& split_counts() const { return split_counts_; }
  std::size_t split_count(Split split) const { return split_counts_[static_cast<int>(split)]; }

  // Records of one split, in manifest order.
  std::vector<DatasetRecord> split_records(Split split) const;
  const DatasetRecord* find(std::string_view record_id) const;

  bool operator==(const DatasetManifest&) const = default;

 private:
  std::string name_;
  std::size_t feature_dim_;
  std::vector<DatasetRecord> records_;
  std::array<std::size_t, 3> split_counts_{};
};

// Manifest file: header `record_id,payload_ref,label,split`, one record per line.
DatasetManifest load_manifest(const std::filesystem::path& path, const IngestConfig& config);
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

struct SyntheticManifestConfig {
  std::size_t train = 742;
  std::size_t validation = 212;
  std::size_t test = 106;
  double positive_rate = 0.5;
  std::uint64_t seed = 0;
  std::size_t feature_dim = 1536;
  std::string name = "synthetic";
};

// Records `item-00000`... with `images/item-00000.jpg` payloads and seeded labels.
DatasetManifest make_synthetic_manifest(const SyntheticManifestConfig& config);

}  // namespace hybrid
