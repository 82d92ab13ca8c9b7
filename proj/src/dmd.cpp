#include "hybrid/dmd.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace hybrid {

using nlohmann::json;

DmdDataset generate_dmd(const DatasetManifest& manifest, Split split, const Teacher& small_teacher,
                        const Teacher& large_teacher, std::size_t workers) {
  if (small_teacher.role() != TeacherRole::kSmall) {
    throw Error(ErrorCode::kInvalidArgument, "generate_dmd: first teacher must have the small role");
  }
  if (small_teacher.feature_dim() != manifest.feature_dim()) {
    throw Error(ErrorCode::kDimensionMismatch,
                "small teacher feature_dim " + std::to_string(small_teacher.feature_dim()) +
                    " != manifest feature_dim " + std::to_string(manifest.feature_dim()));
  }
  const auto records = manifest.split_records(split);
  auto small = teacher_predict_batch(small_teacher, records, workers);
  auto large = teacher_predict_batch(large_teacher, records, workers);

  DmdDataset dataset;
  dataset.split = split;
  dataset.records.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (!small[i].hidden || small[i].hidden->size() != manifest.feature_dim()) {
      throw Error(ErrorCode::kDimensionMismatch,
                  "small teacher hidden vector has wrong length for " + records[i].record_id);
    }
    DmdRecord rec;
    rec.image_path = records[i].payload_ref;
    rec.last_hidden_layer = std::move(*small[i].hidden);
    rec.label = agreement_label(small[i].prediction, large[i].prediction);
    dataset.records.push_back(std::move(rec));
    dataset.predictions.push_back(ItemPredictions{records[i].record_id, records[i].label,
                                                  small[i].prediction, small[i].probability,
                                                  large[i].prediction});
  }
  dataset.provenance = json{{"manifest", manifest.name()},
                            {"split", split_name(split)},
                            {"feature_dim", manifest.feature_dim()},
                            {"small_teacher", small_teacher.describe()},
                            {"large_teacher", large_teacher.describe()}};
  return dataset;
}

namespace {

// Shortest round-trip digits laid out the way most JSON writers print floats:
// fixed notation for decimal exponents -4..15 (with a trailing ".0" when
// integral), scientific otherwise. The digits come from to_chars, so the
// bytes depend only on the value. nlohmann's Grisu2 is not always shortest
// (1e23 comes out as 9.999999999999999e+22).
void append_number(std::string& out, double v) {
  if (!std::isfinite(v)) throw Error(ErrorCode::kSchema, "DMD features must be finite");
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::scientific);
  const std::string sci(buf, res.ptr);
  const auto epos = sci.find('e');
  const int exp10 = std::stoi(sci.substr(epos + 1));
  std::string mant = sci.substr(0, epos);
  const bool negative = mant[0] == '-';
  if (negative) mant.erase(0, 1);
  std::string digits;
  for (char c : mant) {
    if (c != '.') digits += c;
  }
  if (negative) out += '-';
  if (v == 0.0) {
    out += "0.0";
    return;
  }
  if (exp10 < -4 || exp10 >= 16) {
    out += digits[0];
    if (digits.size() > 1) {
      out += '.';
      out.append(digits, 1, std::string::npos);
    }
    out += 'e';
    out += exp10 < 0 ? '-' : '+';
    const int a = exp10 < 0 ? -exp10 : exp10;
    if (a < 10) out += '0';
    out += std::to_string(a);
    return;
  }
  if (exp10 < 0) {
    out += "0.";
    out.append(static_cast<std::size_t>(-exp10 - 1), '0');
    out += digits;
    return;
  }
  const auto int_len = static_cast<std::size_t>(exp10 + 1);
  if (digits.size() <= int_len) {
    out += digits;
    out.append(int_len - digits.size(), '0');
    out += ".0";
  } else {
    out.append(digits, 0, int_len);
    out += '.';
    out.append(digits, int_len, std::string::npos);
  }
}

}  // namespace

std::string dump_dmd(const std::vector<DmdRecord>& records) {
  if (records.empty()) return "[]\n";
  std::string out = "[\n";
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    out += "    {\n        \"image_path\": ";
    out += json(r.image_path).dump();
    out += ",\n        \"last_hidden_layer\": ";
    if (r.last_hidden_layer.empty()) {
      out += "[]";
    } else {
      out += "[\n";
      for (std::size_t k = 0; k < r.last_hidden_layer.size(); ++k) {
        out += "            ";
        append_number(out, r.last_hidden_layer[k]);
        out += k + 1 < r.last_hidden_layer.size() ? ",\n" : "\n";
      }
      out += "        ]";
    }
    out += ",\n        \"label\": ";
    out += std::to_string(r.label);
    out += i + 1 < records.size() ? "\n    },\n" : "\n    }\n";
  }
  out += "]\n";
  return out;
}

void write_dmd(const std::vector<DmdRecord>& records, const std::filesystem::path& path) {
  for (const auto& r : records) {
    if (r.label != 0 && r.label != 1) {
      throw Error(ErrorCode::kSchema, "DMD record " + r.image_path + " has non-binary label");
    }
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write DMD file " + path.string());
  out << dump_dmd(records);
  if (!out) throw Error(ErrorCode::kIo, "failed writing DMD file " + path.string());
}

void write_dmd(const DmdDataset& dataset, const std::filesystem::path& path) {
  write_dmd(dataset.records, path);
}

std::vector<DmdRecord> parse_dmd(const std::string& text, const std::string& source) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::kSchema, source + " is not valid JSON: " + e.what());
  }
  if (!doc.is_array()) throw Error(ErrorCode::kSchema, source + ": top level must be an array");

  std::vector<DmdRecord> records;
  records.reserve(doc.size());
  std::size_t index = 0;
  for (const auto& item : doc) {
    const std::string where = source + "[" + std::to_string(index++) + "]";
    if (!item.is_object()) throw Error(ErrorCode::kSchema, where + ": expected an object");
    if (item.size() != 3) {
      throw Error(ErrorCode::kSchema,
                  where + ": expected exactly image_path, last_hidden_layer, label");
    }
    auto path = item.find("image_path");
    auto hidden = item.find("last_hidden_layer");
    auto label = item.find("label");
    if (path == item.end() || !path->is_string()) {
      throw Error(ErrorCode::kSchema, where + ": missing string 'image_path'");
    }
    if (hidden == item.end() || !hidden->is_array()) {
      throw Error(ErrorCode::kSchema, where + ": missing array 'last_hidden_layer'");
    }
    if (label == item.end() || !label->is_number_integer()) {
      throw Error(ErrorCode::kSchema, where + ": missing integer 'label'");
    }
    DmdRecord rec;
    rec.image_path = path->get<std::string>();
    const auto label_value = label->get<long long>();
    if (label_value != 0 && label_value != 1) {
      throw Error(ErrorCode::kSchema,
                  where + ": label must be 0 or 1, got " + std::to_string(label_value));
    }
    rec.label = static_cast<int>(label_value);
    rec.last_hidden_layer.reserve(hidden->size());
    for (const auto& v : *hidden) {
      if (!v.is_number()) throw Error(ErrorCode::kSchema, where + ": non-numeric feature value");
      rec.last_hidden_layer.push_back(v.get<double>());
    }
    records.push_back(std::move(rec));
  }
  return records;
}

std::vector<DmdRecord> read_dmd(const std::filesystem::path& path,
                                std::optional<std::size_t> expected_dim) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open DMD file " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  auto records = parse_dmd(buffer.str(), path.string());
  if (expected_dim) {
    for (const auto& r : records) {
      if (r.last_hidden_layer.size() != *expected_dim) {
        throw Error(ErrorCode::kDimensionMismatch,
                    path.string() + ": record " + r.image_path + " has " +
                        std::to_string(r.last_hidden_layer.size()) + " features, expected " +
                        std::to_string(*expected_dim));
      }
    }
  }
  return records;
}

std::string predictions_to_csv(const std::vector<ItemPredictions>& rows) {
  std::ostringstream out;
  out << "record_id,true_label,small_prediction,small_probability,large_prediction\n";
  for (const auto& r : rows) {
    out << r.record_id << ',' << r.true_label << ',' << r.small_prediction << ','
        << format_number(r.small_probability) << ',' << r.large_prediction << '\n';
  }
  return out.str();
}

void write_predictions(const std::vector<ItemPredictions>& rows, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << predictions_to_csv(rows);
  if (!out) throw Error(ErrorCode::kIo, "write failed for " + path.string());
}

namespace {

int parse_binary_field(const std::string& text, const std::string& where) {
  if (text == "0") return 0;
  if (text == "1") return 1;
  throw Error(ErrorCode::kSchema, where + ": expected 0 or 1, got '" + text + "'");
}

}  // namespace

std::vector<ItemPredictions> read_predictions(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) ||
      line != "record_id,true_label,small_prediction,small_probability,large_prediction") {
    throw Error(ErrorCode::kSchema, path.string() + ": unexpected header");
  }
  std::vector<ItemPredictions> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    std::vector<std::string> f;
    std::istringstream fields(line);
    std::string field;
    while (std::getline(fields, field, ',')) f.push_back(field);
    if (f.size() != 5) throw Error(ErrorCode::kSchema, where + ": expected 5 fields");
    ItemPredictions r;
    r.record_id = f[0];
    r.true_label = parse_binary_field(f[1], where);
    r.small_prediction = parse_binary_field(f[2], where);
    const char* end = f[3].data() + f[3].size();
    auto [ptr, ec] = std::from_chars(f[3].data(), end, r.small_probability);
    if (ec != std::errc() || ptr != end) {
      throw Error(ErrorCode::kSchema, where + ": bad probability '" + f[3] + "'");
    }
    r.large_prediction = parse_binary_field(f[4], where);
    rows.push_back(std::move(r));
  }
  return rows;
}

DmdSummary dmd_summary(const std::vector<DmdRecord>& records) {
  DmdSummary summary;
  summary.count = records.size();
  if (records.empty()) return summary;
  std::size_t agree = 0;
  double norm_sum = 0.0;
  for (const auto& r : records) {
    agree += r.label == 1 ? 1 : 0;
    double sq = 0.0;
    for (double v : r.last_hidden_layer) sq += v * v;
    norm_sum += std::sqrt(sq);
  }
  const double n = static_cast<double>(records.size());
  summary.agree_rate = static_cast<double>(agree) / n;
  summary.mean_norm = norm_sum / n;
  return summary;
}

}  // namespace hybrid
