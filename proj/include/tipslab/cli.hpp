#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace tipslab::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;

/// Environment variable overriding the default `runs/` root.
inline constexpr const char* kRunRootEnv = "TIPSLAB_RUN_ROOT";

/// Runs one subcommand (synth, train, distill, eval, params, report).
/// args excludes the program name.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int dispatch(int argc, char** argv);

std::filesystem::path run_root();

std::string usage();

/// `report` table over run directories holding config.yaml and eval/report.json.
std::string render_report(const std::vector<std::filesystem::path>& run_dirs);

}  // namespace tipslab::cli
