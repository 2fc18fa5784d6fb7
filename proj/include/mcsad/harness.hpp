#pragma once

// Leave-one-domain-out experiment runner.
//
// Config files are flat `key = value` text; '#' starts a comment. Every key
// can also be set through the environment as MCSAD_<KEY> with the key
// upper-cased and dots replaced by underscores (e.g. MCSAD_ROUNDS=10,
// MCSAD_CSA_ETA=0.5). Precedence: defaults < file < environment < CLI flags.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mcsad/data.hpp"
#include "mcsad/federation.hpp"

namespace mcsad {

inline constexpr const char* kEnvPrefix = "MCSAD_";

inline const std::vector<std::string>& experiment_modes() {
  static const std::vector<std::string> modes{"mcsad", "fedavg", "ablation-grid", "augmenter-grid", "split-grid"};
  return modes;
}

struct ExperimentConfig {
  std::string preset = "default";
  std::string data_root;        // when set, ingest root/<domain> folders instead
  int samples_per_domain = 0;   // 0 keeps the preset's value
  int image_size = 0;           // 0 keeps the preset's value
  std::uint64_t data_seed = 0;  // 0 keeps the preset's value
  RoundConfig round;
  std::vector<int> targets;  // empty: every domain in turn
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::string mode = "mcsad";
  std::string out_dir = "runs";
  bool deterministic = false;  // forces sequential clients and cells, drops timings
  int jobs = 1;  // cells run concurrently when > 1 and not deterministic

  /// Desk-scale defaults for the four-domain synthetic preset.
  static ExperimentConfig defaults();

  void validate() const;
  bool operator==(const ExperimentConfig&) const = default;
};

/// Assigns one key. Throws ContractError on an unknown key or a bad value.
void set_config_key(ExperimentConfig& cfg, const std::string& key, const std::string& value);

ExperimentConfig parse_config(const std::string& text, ExperimentConfig base = ExperimentConfig::defaults());
ExperimentConfig load_config(const std::filesystem::path& path, ExperimentConfig base = ExperimentConfig::defaults());

/// Every key, one per line, in a fixed order.
std::string serialize_config(const ExperimentConfig& cfg);

/// Applies MCSAD_<KEY> variables found in `env` (name → value).
void apply_env_overrides(ExperimentConfig& cfg, const std::map<std::string, std::string>& env);
std::map<std::string, std::string> current_environment();

/// Named switch combination within a mode.
struct CellSpec {
  std::string label;
  RoundConfig round;
};

/// Cells of a mode, derived from a base round config.
std::vector<CellSpec> mode_cells(const std::string& mode, const RoundConfig& base);

struct CellResult {
  std::string mode;
  std::string cell;
  int target = 0;
  std::string target_name;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  double source_val_acc = 0.0;
  bool ok = false;
  std::string error;
  double seconds = 0.0;
};

std::vector<DomainDataset> load_domains(const ExperimentConfig& cfg);

struct CellRun {
  CellResult result;
  std::optional<FederationResult> federation;
};

/// One federation on every domain but `target`, scored on all of `target`.
CellRun run_cell(std::span<const DomainDataset> domains, const CellSpec& cell, const std::string& mode, int target,
                 std::uint64_t seed);

struct ExperimentReport {
  std::vector<CellResult> cells;
  std::vector<std::string> domain_names;
  bool all_ok() const;
};

/// Runs every (cell, target, seed) and writes cells.csv, summary.csv,
/// summary.txt, config.txt and <cell>/target-<name>/seed-<s>/{metrics.csv,
/// global.ckpt} under cfg.out_dir. Progress goes to `log`.
ExperimentReport run_experiment(const ExperimentConfig& cfg, std::ostream& log);

struct SummaryRow {
  std::string cell;
  std::vector<double> domain_mean;  // per domain column, NaN when absent
  std::vector<double> domain_std;
  double avg_mean = 0.0;  // mean of the per-domain means
  double avg_std = 0.0;   // std over seeds of the per-seed domain average
  int seeds = 0;
};

/// Sample standard deviation; 0 for fewer than two values.
double sample_std(std::span<const double> v);

std::vector<SummaryRow> summarize(std::span<const CellResult> cells, std::span<const std::string> domain_names);

/// Fraction → percent with one decimal: 0.8634 → "86.3".
std::string format_percent(double fraction);

void emit_summary(std::span<const SummaryRow> rows, std::span<const std::string> domain_names, std::ostream& text,
                  std::ostream& csv);

void write_cells_csv(std::ostream& out, std::span<const CellResult> cells, bool with_timing);

}  // namespace mcsad
