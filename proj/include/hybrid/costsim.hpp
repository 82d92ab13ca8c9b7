#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hybrid/router.hpp"

namespace hybrid {

// Per-item costs of the two models. Time in seconds, energy in kilojoules.
struct CostParams {
  double small_time_per_item = 0.0;
  double large_time_per_item = 0.0;
  double small_energy_per_item = 0.0;
  double large_energy_per_item = 0.0;
  std::size_t item_count = 0;

  void validate() const;
};

struct CostReport {
  double deferred_fraction = 0.0;
  double total_time = 0.0;    // s
  double total_energy = 0.0;  // kJ
  double energy_kwh = 0.0;    // total_energy / 3600
  double reduction_vs_large_only = 0.0;       // energy
  double time_reduction_vs_large_only = 0.0;
};

inline double kj_to_kwh(double kj) { return kj / 3600.0; }

// 1 - value / baseline; 0 when the baseline is 0.
double relative_reduction(double value, double baseline);

// The small model runs on every item; the large model on the deferred share:
//   total = n * (small + fraction * large)
CostReport estimate_cost(const CostParams& params, double fraction);

// Reports at k / bucket_count for k = 0..bucket_count.
std::vector<CostReport> cost_curve(const CostParams& params, std::size_t bucket_count = 10);

// Empirical totals from routing traces. Time sums every latency component;
// energy is charged per item from `energy_params` when given, and the
// reductions are then relative to its large-only totals.
CostReport measure_from_traces(const std::vector<RouteTrace>& traces,
                               const std::optional<CostParams>& energy_params = std::nullopt);

// A measured operating point kept beside a preset for comparison.
struct MeasuredRow {
  double fraction = 0.0;
  double time_s = 0.0;
  double energy_kj = 0.0;
};

struct CostPreset {
  std::string name;
  CostParams params;
  std::map<std::string, MeasuredRow> reference;
};

// Preset file: `key = value` lines, `#` comments. Costs are given either
// per item (`small_time_per_item`) or as totals over item_count
// (`small_time_total_s`, `small_energy_total_kj`, ...). Reference rows are
// `reference.<name> = fraction, time_s, energy_kj`.
CostPreset parse_cost_preset(const std::string& text, const std::string& name);
CostPreset load_cost_preset(const std::filesystem::path& path);

// Built-in copy of presets/paper-table1.cost.
CostPreset paper_table1_preset();

// `fraction,total_time_s,total_energy_kj,energy_kwh,reduction`
std::string cost_curve_to_csv(const std::vector<CostReport>& reports);

}  // namespace hybrid
