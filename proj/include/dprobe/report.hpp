#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dprobe/metrics.hpp"
#include "dprobe/mdsviz.hpp"

namespace dprobe {

inline constexpr const char* kCodeVersion = "dprobe 1.0.0";

// Provenance carried by every emitted artifact.
struct ReportStamp {
  std::string config_hash;
  std::string version = kCodeVersion;

  std::string csv_comment() const { return "# " + version + " config " + config_hash + "\n"; }
  nlohmann::json to_json() const { return {{"config_hash", config_hash}, {"version", version}}; }
};

struct GlobalCurve {
  std::string model;
  std::uint64_t seed = 0;
  std::vector<double> scores;  // S(0..L)
};

struct ReportInputs {
  std::vector<GlobalCurve> curves;
  std::vector<ExpectedLayerRow> expected_rows;
  std::optional<AgreementAnalysis> agreement;
  std::vector<DerivationTrace> traces;
  bool svg = true;
};

// Writes (each file only when its input is non-empty):
//   global_uuas.csv          model,seed,layer,uuas
//   expected_layers.{csv,json,svg}
//   agreement.{csv,json,svg}
//   traces.json, trace_<sentence id>.svg
// Returns the paths written. Files are written atomically.
std::vector<std::string> emit_reports(const ReportInputs& in, const ReportStamp& stamp,
                                      const std::string& outdir);

// Grouped bar chart: one group per row.group, one bar per category, error
// bars = seed standard deviation.
std::string expected_layer_svg(const std::vector<ExpectedLayerRow>& rows, const std::string& title);

// One scatter panel per layer with predicted edges (gold edges solid, others dashed).
std::string trace_svg(const DerivationTrace& trace);

// temp file + rename
void write_file_atomic(const std::string& path, const std::string& contents);

}  // namespace dprobe
