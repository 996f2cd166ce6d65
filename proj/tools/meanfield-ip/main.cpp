#include "mfip/cli.hpp"
#include "mfip/errors.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

namespace {

// Exit codes: 0 all assertions passed, 1 some failed, 2 bad usage or input.
constexpr int kFailed = 1;
constexpr int kUsage = 2;

int run(const std::string& path, const std::vector<std::string>& flags, const std::string& outdir) {
  auto cfg = mfip::parse_config_file(path);
  mfip::apply_flags(cfg, flags);
  if (!outdir.empty()) cfg.output_dir = outdir;
  const auto rec = mfip::run_experiment(cfg);
  for (const auto& a : rec.assertions)
    std::printf("%s %s value=%.6g threshold=%.6g\n", a.passed ? "PASS" : "FAIL", a.name.c_str(), a.value,
                a.threshold);
  std::printf("wrote %s (config hash %016llx, %.1f s)\n", (cfg.output_dir / "run.json").c_str(),
              static_cast<unsigned long long>(rec.config_hash), rec.wall_time_s);
  if (rec.passed()) return 0;
  std::fprintf(stderr, "failed assertions:");
  for (const auto& a : rec.assertions)
    if (!a.passed) std::fprintf(stderr, " %s", a.name.c_str());
  std::fprintf(stderr, "\n");
  return kFailed;
}

void list() {
  for (const auto& name : mfip::experiment_names()) {
    std::printf("%-20s %s\n", name.c_str(), mfip::experiment_summary(name).c_str());
    for (const auto& [k, v] : mfip::experiment_defaults(name))
      std::printf("    %s = %s\n", k.c_str(), v.empty() ? "(optional)" : v.c_str());
  }
  std::printf("oracles:");
  for (const auto& o : mfip::oracle_names()) std::printf(" %s", o.c_str());
  std::printf("\n");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Independent-projection diffusions: experiments and closed-form oracles"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(mfip::library_version()));

  std::string config_path, outdir, oracle;
  auto* run_cmd = app.add_subcommand("run", "run an experiment from a key=value config; --key=value overrides");
  run_cmd->add_option("config", config_path, "config file")->required();
  run_cmd->add_option("-o,--output-dir", outdir, "directory for CSVs and run.json");
  run_cmd->allow_extras();

  app.add_subcommand("list", "list experiments with their defaults");

  auto* oracle_cmd = app.add_subcommand("oracle", "print a closed-form oracle as JSON; --key=value sets inputs");
  oracle_cmd->add_option("name", oracle, "oracle name")->required();
  oracle_cmd->allow_extras();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }

  try {
    if (*run_cmd) return run(config_path, run_cmd->remaining(), outdir);
    if (*oracle_cmd) {
      mfip::ExperimentConfig cfg;
      cfg.experiment = "oracle";
      mfip::apply_flags(cfg, oracle_cmd->remaining());
      std::cout << mfip::run_oracle(oracle, cfg);
      return 0;
    }
    list();
    return 0;
  } catch (const mfip::ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const mfip::InvalidArgument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const mfip::Unsupported& e) {
    std::cerr << "unsupported: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
}
