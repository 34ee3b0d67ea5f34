#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "dmac/env.hpp"
#include "dmac/nn.hpp"
#include "dmac/team.hpp"

namespace dmac::eval {

using nn::Matrix;

// Symmetric n x n matrix of mean delivered messages per channel per episode.
// The diagonal is unused and kept at zero.
struct FrequencyMatrix {
  Matrix values;

  int size() const { return static_cast<int>(values.rows()); }
  static FrequencyMatrix from_channels(int agents, const std::vector<double>& per_channel);
  std::vector<double> upper() const;
  bool operator==(const FrequencyMatrix& other) const;
};

struct FrequencySummary {
  double high = 0.0;
  double low = 0.0;
  double average = 0.0;
  double sd = 0.0;  // population standard deviation

  bool operator==(const FrequencySummary&) const = default;
};

FrequencySummary frequency_summary(const FrequencyMatrix& matrix);
FrequencySummary summarize(const std::vector<double>& values);

struct EvalReport {
  std::string condition;
  int episodes = 0;
  int wins = 0;
  double win_rate = 0.0;
  double mean_return = 0.0;
  double mean_masks = 0.0;  // per episode
  long long delivered = 0;  // total delivered messages
  FrequencyMatrix frequency;
  FrequencySummary summary;

  bool operator==(const EvalReport& other) const;
};

struct EvalOptions {
  int episodes = 500;
  std::uint64_t seed = 0;
  int workers = 0;  // 0: hardware concurrency
};

// Greedy rollouts of the frozen team with an optional interferer. Episode k
// uses a seed derived from (seed, k), so results do not depend on the worker
// count.
EvalReport evaluate(const env::Environment& environment, const team::TeamPolicy& policy,
                    const team::Interferer* interferer, const std::string& condition, const EvalOptions& options);

// Text heatmap: a version line, n, then n rows of n values with "null" on
// the diagonal. Values are written as hexadecimal floats.
void export_heatmap(const FrequencyMatrix& matrix, const std::filesystem::path& path);
void write_heatmap(const FrequencyMatrix& matrix, std::ostream& out);
FrequencyMatrix read_heatmap(std::istream& in);
FrequencyMatrix import_heatmap(const std::filesystem::path& path);

// JSON document for one report; the matrix is referenced by file name.
std::string report_json(const EvalReport& report, const std::string& heatmap_file);
EvalReport parse_report_json(const std::string& text, FrequencyMatrix frequency);

}  // namespace dmac::eval
