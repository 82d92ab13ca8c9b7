#include "hybrid/costsim.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace hybrid {

void CostParams::validate() const {
  if (!(small_time_per_item >= 0.0) || !(large_time_per_item >= 0.0) ||
      !(small_energy_per_item >= 0.0) || !(large_energy_per_item >= 0.0)) {
    throw Error(ErrorCode::kInvalidArgument, "cost parameters must be non-negative");
  }
}

double relative_reduction(double value, double baseline) {
  return baseline == 0.0 ? 0.0 : 1.0 - value / baseline;
}

CostReport estimate_cost(const CostParams& params, double fraction) {
  params.validate();
  if (!(fraction >= 0.0 && fraction <= 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "deferral fraction must lie in [0,1]");
  }
  const double n = static_cast<double>(params.item_count);
  CostReport r;
  r.deferred_fraction = fraction;
  r.total_time = n * params.small_time_per_item + fraction * (n * params.large_time_per_item);
  r.total_energy = n * params.small_energy_per_item + fraction * (n * params.large_energy_per_item);
  r.energy_kwh = kj_to_kwh(r.total_energy);
  r.reduction_vs_large_only = relative_reduction(r.total_energy, n * params.large_energy_per_item);
  r.time_reduction_vs_large_only = relative_reduction(r.total_time, n * params.large_time_per_item);
  return r;
}

std::vector<CostReport> cost_curve(const CostParams& params, std::size_t bucket_count) {
  if (bucket_count == 0) throw Error(ErrorCode::kInvalidArgument, "bucket_count must be positive");
  std::vector<CostReport> reports;
  for (std::size_t k = 0; k <= bucket_count; ++k) {
    reports.push_back(
        estimate_cost(params, static_cast<double>(k) / static_cast<double>(bucket_count)));
  }
  return reports;
}

CostReport measure_from_traces(const std::vector<RouteTrace>& traces,
                               const std::optional<CostParams>& energy_params) {
  CostReport r;
  if (traces.empty()) return r;
  std::size_t deferred = 0;
  for (const auto& t : traces) {
    if (!t.latency) {
      throw Error(ErrorCode::kSchema, "trace for " + t.record_id + " carries no latency");
    }
    r.total_time += t.latency->total();
    deferred += t.deferred ? 1 : 0;
  }
  const double n = static_cast<double>(traces.size());
  r.deferred_fraction = static_cast<double>(deferred) / n;
  if (energy_params) {
    energy_params->validate();
    r.total_energy = n * energy_params->small_energy_per_item +
                     static_cast<double>(deferred) * energy_params->large_energy_per_item;
    r.reduction_vs_large_only =
        relative_reduction(r.total_energy, n * energy_params->large_energy_per_item);
    r.time_reduction_vs_large_only =
        relative_reduction(r.total_time, n * energy_params->large_time_per_item);
  }
  r.energy_kwh = kj_to_kwh(r.total_energy);
  return r;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double parse_value(const std::string& text, const std::string& where) {
  double v = 0.0;
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end || !std::isfinite(v)) {
    throw Error(ErrorCode::kSchema, where + ": not a number: '" + text + "'");
  }
  return v;
}

}  // namespace

CostPreset parse_cost_preset(const std::string& text, const std::string& name) {
  CostPreset preset;
  preset.name = name;
  std::map<std::string, double> values;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = name + ":" + std::to_string(line_no);
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error(ErrorCode::kSchema, where + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.rfind("reference.", 0) == 0) {
      std::vector<double> parts;
      std::istringstream fields(value);
      std::string field;
      while (std::getline(fields, field, ',')) parts.push_back(parse_value(trim(field), where));
      if (parts.size() != 3) {
        throw Error(ErrorCode::kSchema, where + ": reference rows need fraction, time_s, energy_kj");
      }
      preset.reference[key.substr(10)] = MeasuredRow{parts[0], parts[1], parts[2]};
    } else {
      values[key] = parse_value(value, where);
    }
  }

  auto take = [&](const std::string& key) -> std::optional<double> {
    auto it = values.find(key);
    if (it == values.end()) return std::nullopt;
    return it->second;
  };
  const auto count = take("item_count");
  if (!count || *count < 1 || std::floor(*count) != *count) {
    throw Error(ErrorCode::kSchema, name + ": item_count must be a positive integer");
  }
  preset.params.item_count = static_cast<std::size_t>(*count);
  auto per_item = [&](const std::string& stem, const std::string& total_key) {
    if (auto v = take(stem + "_per_item")) return *v;
    if (auto v = take(total_key)) return *v / *count;
    throw Error(ErrorCode::kSchema, name + ": missing " + stem + "_per_item or " + total_key);
  };
  preset.params.small_time_per_item = per_item("small_time", "small_time_total_s");
  preset.params.large_time_per_item = per_item("large_time", "large_time_total_s");
  preset.params.small_energy_per_item = per_item("small_energy", "small_energy_total_kj");
  preset.params.large_energy_per_item = per_item("large_energy", "large_energy_total_kj");
  preset.params.validate();
  return preset;
}

CostPreset load_cost_preset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open cost preset " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_cost_preset(buffer.str(), path.stem().string());
}

CostPreset paper_table1_preset() {
  static const char* kText = R"(
item_count = 106
small_time_total_s = 18.25
small_energy_total_kj = 2.32
large_time_total_s = 663.1
large_energy_total_kj = 190.73
reference.small_only = 0, 18.25, 2.32
reference.large_only = 1, 663.1, 190.73
reference.uncertainty = 0.6, 386.91, 113.04
reference.switcher = 0.6, 405.16, 115.36
)";
  return parse_cost_preset(kText, "paper-table1");
}

std::string cost_curve_to_csv(const std::vector<CostReport>& reports) {
  std::ostringstream out;
  out << "fraction,total_time_s,total_energy_kj,energy_kwh,reduction\n";
  for (const auto& r : reports) {
    out << format_number(r.deferred_fraction) << ',' << format_number(r.total_time) << ','
        << format_number(r.total_energy) << ',' << format_number(r.energy_kwh) << ','
        << format_number(r.reduction_vs_large_only) << '\n';
  }
  return out.str();
}

}  // namespace hybrid
