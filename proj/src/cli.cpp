#include "mfip/cli.hpp"

#include "mfip/errors.hpp"

#include <json.hpp>

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#ifndef MFIP_VERSION
#define MFIP_VERSION "0.0.0"
#endif

namespace mfip {

namespace {

enum class Kind { kNumber, kSize, kList, kMatrix, kString };

// Every key any experiment understands. Per-experiment relevance is checked
// in validate_config.
const std::map<std::string, Kind>& key_kinds() {
  static const std::map<std::string, Kind> kinds{
      {"dt", Kind::kNumber},        {"m", Kind::kSize},           {"d", Kind::kSize},
      {"grid", Kind::kList},        {"T", Kind::kNumber},         {"n", Kind::kList},
      {"tau", Kind::kList},         {"Q", Kind::kMatrix},         {"A", Kind::kMatrix},
      {"l", Kind::kList},           {"mu0_mean", Kind::kList},    {"mu0_var", Kind::kNumber},
      {"init_mean", Kind::kNumber}, {"init_var", Kind::kNumber},  {"matrix", Kind::kString},
      {"record", Kind::kNumber},    {"times", Kind::kList},       {"h", Kind::kNumber},
      {"eps", Kind::kList},         {"perturbations", Kind::kSize}, {"sweeps", Kind::kSize},
      {"cavi_tol", Kind::kNumber},  {"levels", Kind::kSize},      {"specs", Kind::kSize},
      {"n_max", Kind::kSize},       {"kappa_min", Kind::kNumber}, {"T_max", Kind::kNumber},
      {"kappa", Kind::kNumber},     {"G", Kind::kNumber},         {"t_uniform", Kind::kNumber},
      {"ensemble", Kind::kSize},
  };
  return kinds;
}

bool is_tolerance(const std::string& key) { return key.rfind("tol_", 0) == 0 && key.size() > 4; }

Kind kind_of(const std::string& key) {
  if (is_tolerance(key)) return Kind::kNumber;
  const auto it = key_kinds().find(key);
  if (it == key_kinds().end()) throw InvalidArgument("unknown key '" + key + "'");
  return it->second;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(trim(cur));
  if (!s.empty() && s.back() == sep) out.push_back("");
  return out;
}

double parse_number(const std::string& s) {
  double v = 0.0;
  const char* b = s.data();
  const char* e = b + s.size();
  const auto r = std::from_chars(b, e, v);
  if (s.empty() || r.ec != std::errc() || r.ptr != e || !std::isfinite(v))
    throw InvalidArgument("not a finite number: '" + s + "'");
  return v;
}

// Shortest text that reads back to the same double.
std::string format_number(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string canonical_list(const std::string& s) {
  std::string out;
  for (const auto& item : split(s, ',')) {
    if (!out.empty()) out += ',';
    out += format_number(parse_number(item));
  }
  if (out.empty()) throw InvalidArgument("empty list");
  return out;
}

std::string canonical_size(const std::string& s) {
  const double v = parse_number(s);
  if (v < 0 || v != std::floor(v) || v > 1e15) throw InvalidArgument("not a count: '" + s + "'");
  return std::to_string(static_cast<std::uint64_t>(v));
}

std::string canonical_matrix(const std::string& s) {
  std::string out;
  std::size_t width = 0;
  for (const auto& row : split(s, ';')) {
    const std::string r = canonical_list(row);
    const std::size_t w = static_cast<std::size_t>(std::count(r.begin(), r.end(), ',')) + 1;
    if (width && w != width) throw InvalidArgument("matrix rows differ in length");
    width = w;
    if (!out.empty()) out += ';';
    out += r;
  }
  return out;
}

std::string canonical_value(const std::string& key, const std::string& raw) {
  switch (kind_of(key)) {
    case Kind::kNumber:
      return format_number(parse_number(raw));
    case Kind::kSize:
      return canonical_size(raw);
    case Kind::kList:
      return canonical_list(raw);
    case Kind::kMatrix:
      return canonical_matrix(raw);
    case Kind::kString:
      if (raw.empty()) throw InvalidArgument("empty value for '" + key + "'");
      return raw;
  }
  return raw;
}

std::uint64_t parse_seed(const std::string& s) {
  std::uint64_t v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size())
    throw InvalidArgument("seed must be an unsigned 64-bit integer");
  return v;
}

// Sets one key; matrix keys given twice append rows when `append` is set.
void set_key(ExperimentConfig& cfg, const std::string& key, const std::string& raw, bool append) {
  if (key == "experiment") {
    cfg.experiment = raw;
  } else if (key == "seed") {
    cfg.seed = parse_seed(raw);
  } else if (key == "output_dir") {
    if (raw.empty()) throw InvalidArgument("empty output_dir");
    cfg.output_dir = raw;
  } else {
    std::string value = canonical_value(key, raw);
    auto it = cfg.values.find(key);
    if (append && it != cfg.values.end()) {
      if (kind_of(key) != Kind::kMatrix) throw InvalidArgument("duplicate key '" + key + "'");
      value = canonical_matrix(it->second + ";" + value);
    }
    cfg.values[key] = value;
  }
}

const std::string& lookup(const ExperimentConfig& cfg, const std::string& key) {
  if (auto it = cfg.values.find(key); it != cfg.values.end()) return it->second;
  const auto& defaults = experiment_defaults(cfg.experiment);
  if (auto it = defaults.find(key); it != defaults.end() && !it->second.empty()) return it->second;
  throw InvalidArgument("missing value for '" + key + "' in experiment '" + cfg.experiment + "'");
}

}  // namespace

const char* library_version() { return MFIP_VERSION; }

bool ExperimentConfig::has(const std::string& key) const {
  if (values.count(key)) return true;
  const auto& defaults = experiment_defaults(experiment);
  const auto it = defaults.find(key);
  return it != defaults.end() && !it->second.empty();
}

std::string ExperimentConfig::get_string(const std::string& key) const { return lookup(*this, key); }

double ExperimentConfig::get_double(const std::string& key) const { return parse_number(lookup(*this, key)); }

std::size_t ExperimentConfig::get_size(const std::string& key) const {
  const auto list = get_list(key);
  if (list.size() != 1 || list[0] < 0 || list[0] != std::floor(list[0]))
    throw InvalidArgument("'" + key + "' must be a single count");
  return static_cast<std::size_t>(list[0]);
}

std::vector<double> ExperimentConfig::get_list(const std::string& key) const {
  std::vector<double> out;
  for (const auto& item : split(lookup(*this, key), ',')) out.push_back(parse_number(item));
  return out;
}

Mat ExperimentConfig::get_matrix(const std::string& key) const {
  const auto rows = split(lookup(*this, key), ';');
  Mat M;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto items = split(rows[r], ',');
    if (r == 0) M.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(items.size()));
    for (std::size_t c = 0; c < items.size(); ++c)
      M(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = parse_number(items[c]);
  }
  return M;
}

Vec ExperimentConfig::get_vector(const std::string& key) const {
  const auto v = get_list(key);
  return Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
}

std::map<std::string, double> ExperimentConfig::tolerances() const {
  std::map<std::string, double> out;
  for (const auto& [k, v] : experiment_defaults(experiment))
    if (is_tolerance(k) && !v.empty()) out[k] = parse_number(v);
  for (const auto& [k, v] : values)
    if (is_tolerance(k)) out[k] = parse_number(v);
  return out;
}

std::string ExperimentConfig::canonical() const {
  std::map<std::string, std::string> all;
  for (const auto& [k, v] : experiment_defaults(experiment))
    if (!v.empty()) all[k] = v;
  for (const auto& [k, v] : values) all[k] = v;
  all["experiment"] = experiment;
  all["seed"] = std::to_string(seed);
  std::string out;
  for (const auto& [k, v] : all) out += k + "=" + v + "\n";
  return out;
}

std::uint64_t ExperimentConfig::hash() const { return fnv1a64(canonical()); }

std::uint64_t fnv1a64(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

ExperimentConfig parse_config_text(const std::string& text) {
  ExperimentConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("expected key=value", lineno);
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ParseError("empty key", lineno);
    try {
      set_key(cfg, key, value, true);
    } catch (const InvalidArgument& e) {
      throw ParseError(e.what(), lineno);
    }
  }
  return cfg;
}

ExperimentConfig parse_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot read config file " + path.string(), 0);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

void apply_flags(ExperimentConfig& cfg, const std::vector<std::string>& flags) {
  for (const auto& f : flags) {
    if (f.rfind("--", 0) != 0) throw ParseError("flags look like --key=value, got '" + f + "'", 0);
    const auto eq = f.find('=');
    if (eq == std::string::npos) throw ParseError("flag without value: '" + f + "'", 0);
    try {
      // A flag replaces the file value outright, matrices included.
      set_key(cfg, f.substr(2, eq - 2), f.substr(eq + 1), false);
    } catch (const InvalidArgument& e) {
      throw ParseError(std::string(e.what()) + " (flag " + f + ")", 0);
    }
  }
}

void validate_config(const ExperimentConfig& cfg) {
  const auto& names = experiment_names();
  if (std::find(names.begin(), names.end(), cfg.experiment) == names.end()) {
    std::string list;
    for (const auto& n : names) list += (list.empty() ? "" : ", ") + n;
    throw InvalidArgument("unknown experiment '" + cfg.experiment + "'; registered: " + list);
  }
  const auto& defaults = experiment_defaults(cfg.experiment);
  for (const auto& [k, v] : cfg.values) {
    if (!defaults.count(k)) throw InvalidArgument("key '" + k + "' does not apply to " + cfg.experiment);
  }
  if (cfg.has("d") && cfg.get_size("d") != 1) throw Unsupported("only scalar coordinates (d = 1) are supported");
  if (cfg.has("dt") && !(cfg.get_double("dt") > 0)) throw InvalidArgument("dt must be positive");
  if (cfg.has("m") && cfg.get_size("m") < 2) throw InvalidArgument("m must be at least 2");
  if (cfg.has("T") && !(cfg.get_double("T") >= 0)) throw InvalidArgument("T must be >= 0");
  if (cfg.has("grid")) {
    const auto g = cfg.get_list("grid");
    if (g.size() != 3 || !(g[1] > g[0]) || g[2] < 16 || g[2] != std::floor(g[2]))
      throw InvalidArgument("grid is lo,hi,npoints with lo < hi and npoints >= 16");
  }
  if (cfg.has("tau"))
    for (double t : cfg.get_list("tau"))
      if (!(t > 0)) throw InvalidArgument("tau values must be positive");
  if (cfg.has("Q")) {
    const Mat Q = cfg.get_matrix("Q");
    if (Q.rows() != Q.cols()) throw InvalidArgument("Q must be square");
    if (!is_symmetric(Q, 1e-12)) throw InvalidArgument("Q must be symmetric");
    const auto dim = static_cast<std::size_t>(Q.rows());
    for (const char* key : {"l", "mu0_mean"})
      if (cfg.has(key) && cfg.get_list(key).size() != dim)
        throw InvalidArgument(std::string(key) + " length does not match Q");
    if (cfg.values.count("n") && cfg.get_size("n") != dim) throw InvalidArgument("n conflicts with the size of Q");
  }
  if (cfg.has("A")) {
    const Mat A = cfg.get_matrix("A");
    if (A.rows() != A.cols()) throw InvalidArgument("A must be square");
  }
  if (cfg.has("matrix")) {
    const auto f = cfg.get_string("matrix");
    if (f != "ring" && f != "mean_field" && f != "complete" && f != "star")
      throw InvalidArgument("matrix must be one of ring, mean_field, complete, star");
  }
}

bool RunRecord::passed() const {
  return std::all_of(assertions.begin(), assertions.end(), [](const AssertionResult& a) { return a.passed; });
}

std::string RunRecord::to_json(bool include_wall_time) const {
  nlohmann::ordered_json j;
  j["experiment"] = config.experiment;
  j["seed"] = config.seed;
  nlohmann::ordered_json echo = nlohmann::ordered_json::object();
  std::istringstream in(config_text);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    echo[line.substr(0, eq)] = line.substr(eq + 1);
  }
  j["config"] = echo;
  char hex[19];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(config_hash));
  j["config_hash"] = hex;
  j["version"] = version;
  if (include_wall_time) j["wall_time_s"] = wall_time_s;
  j["passed"] = passed();
  j["tolerances"] = tolerances;
  nlohmann::ordered_json list = nlohmann::ordered_json::array();
  for (const auto& a : assertions) {
    nlohmann::ordered_json e;
    e["name"] = a.name;
    e["passed"] = a.passed;
    e["value"] = a.value;
    e["threshold"] = a.threshold;
    if (!a.detail.empty()) e["detail"] = a.detail;
    list.push_back(e);
  }
  j["assertions"] = list;
  j["artifacts"] = artifacts;
  return j.dump(2) + "\n";
}

}  // namespace mfip
