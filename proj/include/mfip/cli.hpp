#pragma once

#include "mfip/model.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace mfip {

const char* library_version();

// Registered experiment names, in listing order.
const std::vector<std::string>& experiment_names();
// One-line description per experiment.
std::string experiment_summary(const std::string& name);

// Parameter keys an experiment accepts, with their default values as
// canonical strings. Keys listed with an empty default are optional.
const std::map<std::string, std::string>& experiment_defaults(const std::string& name);

// Flat key=value configuration. Values are canonical strings (numbers
// printed with 17 significant digits); typed getters parse on demand and fall
// back to the experiment's defaults. Matrices are rows separated by ';' with
// comma-separated entries; a repeated matrix key appends rows.
struct ExperimentConfig {
  std::string experiment;
  std::uint64_t seed = 42;
  std::filesystem::path output_dir = "out";
  std::map<std::string, std::string> values;

  bool has(const std::string& key) const;
  std::string get_string(const std::string& key) const;
  double get_double(const std::string& key) const;
  std::size_t get_size(const std::string& key) const;
  std::vector<double> get_list(const std::string& key) const;
  Mat get_matrix(const std::string& key) const;
  Vec get_vector(const std::string& key) const;
  // Every tol_* value in effect.
  std::map<std::string, double> tolerances() const;

  // Sorted key=value lines with defaults filled; output_dir is not semantic
  // and is left out.
  std::string canonical() const;
  std::uint64_t hash() const;
};

std::uint64_t fnv1a64(const std::string& text);

// Parses key=value text; '#' starts a comment. Throws ParseError with the
// line number on malformed lines or unknown keys, InvalidArgument on values
// that do not validate.
ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig parse_config_file(const std::filesystem::path& path);
// Applies --key=value flags over cfg (flags win).
void apply_flags(ExperimentConfig& cfg, const std::vector<std::string>& flags);
// Cross-field validation: experiment registered, Q/l/n consistent, d = 1.
void validate_config(const ExperimentConfig& cfg);

struct AssertionResult {
  std::string name;
  bool passed = false;
  double value = 0.0;
  double threshold = 0.0;
  std::string detail;
};

struct RunRecord {
  ExperimentConfig config;
  std::string config_text;
  std::uint64_t config_hash = 0;
  std::string version;
  double wall_time_s = 0.0;
  std::vector<AssertionResult> assertions;
  std::map<std::string, double> tolerances;
  std::vector<std::string> artifacts;

  bool passed() const;
  // run.json contents; wall time is left out when include_wall_time is false.
  std::string to_json(bool include_wall_time = true) const;
};

// Runs the named suite, writes its CSVs and run.json into output_dir.
RunRecord run_experiment(const ExperimentConfig& cfg);

// Closed-form values for the Gaussian test family, as JSON text.
const std::vector<std::string>& oracle_names();
std::string run_oracle(const std::string& name, const ExperimentConfig& cfg);

}  // namespace mfip
