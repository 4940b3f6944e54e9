#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "cirm/harness.hpp"

namespace cirm::runner {

struct RunConfig {
  harness::ExperimentPlan plan;
  std::string output_dir = "results";

  bool operator==(const RunConfig&) const = default;
};

/// Strict JSON parsing. Unknown keys, type mismatches and out-of-range values
/// throw methods::ConfigError with a path such as "methods[0].lr"; syntax
/// errors use "line L, column C". A manifest is accepted in place of a config.
RunConfig parse_config(const std::string& text);
/// Relative IDX paths are taken relative to the config file.
RunConfig load_config(const std::filesystem::path& path);
/// Fully resolved config, every field explicit.
std::string serialize_config(const RunConfig& cfg, int indent = 2);

/// Git blob id: sha1("blob <size>\0" + content), lowercase hex.
std::string git_blob_hash(const std::string& content);
std::string git_blob_hash_file(const std::filesystem::path& path);

/// Resolved config plus content hashes of every input that was read.
std::string manifest_json(const RunConfig& cfg, const std::string& config_text, bool fallback);

inline constexpr const char* kCsvHeader = "experiment,method,seed,env_index,phase,metric,value,wall_time_ms";

/// Append-only results.csv; every call to append ends with a flush, so the
/// file is valid CSV between calls.
class ResultsWriter {
 public:
  explicit ResultsWriter(const std::filesystem::path& path);
  void append(const std::vector<harness::MetricsRecord>& records);

 private:
  std::ofstream out_;
};

std::string csv_row(const harness::MetricsRecord& r);
std::vector<harness::MetricsRecord> parse_results_csv(const std::string& text);
std::vector<harness::MetricsRecord> read_results_csv(const std::filesystem::path& path);

void write_summary_csv(const std::filesystem::path& path, const std::vector<harness::SummaryRow>& rows);

enum class GroupBy { Method, Experiment };
GroupBy group_by_from_string(const std::string& s);

/// Methods as columns. Grouped by method: one row per (phase, metric) of the
/// last environment, as in the two-environment table. Grouped by experiment:
/// one row per experiment with the final test metric.
struct Report {
  std::vector<std::string> columns;
  std::vector<std::string> row_labels;
  std::vector<std::vector<std::string>> cells;

  std::string to_text() const;
  std::string to_csv() const;
};

Report make_report(const std::vector<harness::MetricsRecord>& records, GroupBy group_by);

/// glibc only: raises the mmap and trim thresholds so freed tape buffers are reused.
void tune_allocator();

}  // namespace cirm::runner
