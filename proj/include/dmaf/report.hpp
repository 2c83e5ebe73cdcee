#pragma once

// Plot artifacts derived purely from a run log or a combination table CSV.

#include <filesystem>
#include <string>
#include <vector>

namespace dmaf::report {

struct CsvTable {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name) const;  // -1 when absent
};

CsvTable read_csv(const std::filesystem::path& path);

enum class InputKind { kRunLog, kCombinations };

// Detects the input kind from its header and writes CSV trajectories plus SVG
// charts into out_dir. Returns the written file names, sorted.
std::vector<std::string> plot(const std::filesystem::path& input, const std::filesystem::path& out_dir);

}  // namespace dmaf::report
