#include "hybrid/ingest.hpp"

#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <unordered_set>

namespace hybrid {
namespace {

std::vector<std::string_view> split_whitespace(std::string_view line) {
  std::vector<std::string_view> tokens;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    const std::size_t start = i;
    while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i > start) tokens.push_back(line.substr(start, i - start));
  }
  return tokens;
}

bool parse_double(std::string_view token, double& out) {
  const char* end = token.data() + token.size();
  auto [ptr, ec] = std::from_chars(token.data(), end, out);
  return ec == std::errc() && ptr == end && std::isfinite(out);
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  for (;;) {
    const std::size_t pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      fields.push_back(trim(line.substr(start)));
      break;
    }
    fields.push_back(trim(line.substr(start, pos - start)));
    start = pos + 1;
  }
  return fields;
}

}  // namespace

YoloLabelLine parse_yolo_label(std::string_view line) {
  const auto tokens = split_whitespace(line);
  if (tokens.size() != 5) {
    throw Error(ErrorCode::kMalformedLine,
                "malformed YOLO label line (expected 5 tokens): '" + std::string(line) + "'");
  }
  double values[5];
  for (int i = 0; i < 5; ++i) {
    if (!parse_double(tokens[i], values[i])) {
      throw Error(ErrorCode::kMalformedLine,
                  "malformed YOLO label line (non-numeric token): '" + std::string(line) + "'");
    }
  }
  if (values[0] < 0.0) {
    throw Error(ErrorCode::kMalformedLine,
                "negative class index in YOLO label line: '" + std::string(line) + "'");
  }
  YoloLabelLine label;
  label.class_index = static_cast<int>(values[0]);
  label.cx = values[1];
  label.cy = values[2];
  label.w = values[3];
  label.h = values[4];
  for (int i = 1; i < 5; ++i) {
    if (values[i] < 0.0 || values[i] > 1.0) {
      throw Error(ErrorCode::kOutOfRange,
                  "YOLO geometry outside [0,1]: '" + std::string(line) + "'");
    }
  }
  return label;
}

std::string format_yolo_label(const YoloLabelLine& label) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%d %.17g %.17g %.17g %.17g", label.class_index, label.cx,
                label.cy, label.w, label.h);
  return buf;
}

std::vector<YoloLabelLine> read_yolo_label_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open label file " + path.string());
  std::vector<YoloLabelLine> labels;
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    labels.push_back(parse_yolo_label(line));
  }
  return labels;
}

DatasetManifest::DatasetManifest(std::string name, std::size_t feature_dim,
                                 std::vector<DatasetRecord> records)
    : name_(std::move(name)), feature_dim_(feature_dim), records_(std::move(records)) {
  if (feature_dim_ == 0) throw Error(ErrorCode::kInvalidArgument, "feature_dim must be positive");
  std::unordered_set<std::string_view> seen;
  for (const auto& record : records_) {
    if (record.label != 0 && record.label != 1) {
      throw Error(ErrorCode::kNonBinaryLabel, "non-binary label for record " + record.record_id);
    }
    if (!seen.insert(record.record_id).second) {
      throw Error(ErrorCode::kDuplicateId, "duplicate record_id " + record.record_id);
    }
    ++split_counts_[static_cast<int>(record.split)];
  }
}

std::vector<DatasetRecord> DatasetManifest::split_records(Split split) const {
  std::vector<DatasetRecord> out;
  out.reserve(split_count(split));
  for (const auto& record : records_) {
    if (record.split == split) out.push_back(record);
  }
  return out;
}

const DatasetRecord* DatasetManifest::find(std::string_view record_id) const {
  for (const auto& record : records_) {
    if (record.record_id == record_id) return &record;
  }
  return nullptr;
}

DatasetManifest load_manifest(const std::filesystem::path& path, const IngestConfig& config) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open manifest " + path.string());

  std::string line;
  if (!std::getline(in, line)) {
    throw Error(ErrorCode::kSchema, "manifest " + path.string() + " has no header line");
  }
  const auto header = split_commas(line);
  if (header.size() != 4 || header[0] != "record_id" || header[1] != "payload_ref" ||
      header[2] != "label" || header[3] != "split") {
    throw Error(ErrorCode::kSchema,
                "manifest header must be 'record_id,payload_ref,label,split', got '" + line + "'");
  }

  std::vector<DatasetRecord> records;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto fields = split_commas(line);
    const std::string where = path.string() + ":" + std::to_string(line_no);
    if (fields.size() != 4 || fields[0].empty()) {
      throw Error(ErrorCode::kSchema, where + ": expected 4 fields, got '" + line + "'");
    }
    DatasetRecord record;
    record.record_id = std::string(fields[0]);
    record.payload_ref = std::string(fields[1]);
    if (fields[2] == "0") {
      record.label = 0;
    } else if (fields[2] == "1") {
      record.label = 1;
    } else {
      throw Error(ErrorCode::kNonBinaryLabel,
                  where + ": non-binary label '" + std::string(fields[2]) + "'");
    }
    try {
      record.split = parse_split(fields[3]);
    } catch (const Error& e) {
      throw Error(e.code(), where + ": " + e.what());
    }
    records.push_back(std::move(record));
  }

  std::string name = config.name.empty() ? path.stem().string() : config.name;
  return DatasetManifest(std::move(name), config.feature_dim, std::move(records));
}

void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write manifest " + path.string());
  out << "record_id,payload_ref,label,split\n";
  for (const auto& r : manifest.records()) {
    out << r.record_id << ',' << r.payload_ref << ',' << r.label << ',' << split_name(r.split)
        << '\n';
  }
  if (!out) throw Error(ErrorCode::kIo, "failed writing manifest " + path.string());
}

DatasetManifest make_synthetic_manifest(const SyntheticManifestConfig& config) {
  Rng rng(derive_seed(config.seed, "manifest"));
  std::vector<DatasetRecord> records;
  const std::size_t total = config.train + config.validation + config.test;
  records.reserve(total);
  for (std::size_t i = 0; i < total; ++i) {
    char id[32];
    std::snprintf(id, sizeof(id), "item-%05zu", i);
    DatasetRecord record;
    record.record_id = id;
    record.payload_ref = std::string("images/") + id + ".jpg";
    record.label = rng.uniform() < config.positive_rate ? 1 : 0;
    if (i < config.train) {
      record.split = Split::kTrain;
    } else if (i < config.train + config.validation) {
      record.split = Split::kValidation;
    } else {
      record.split = Split::kTest;
    }
    records.push_back(std::move(record));
  }
  return DatasetManifest(config.name, config.feature_dim, std::move(records));
}

}  // namespace hybrid
