#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "offrl/train.hpp"

namespace offrl {

// Mean evaluation returns, each already averaged over runs.
struct ScoreTriple {
  double score_agent = 0.0;
  double score_baseline_dqn = 0.0;
  double score_random = 0.0;
};

// (agent - min) / (max - min) with min and max taken over the DQN and random
// scores. Throws InvalidArgument when the two baselines tie or any score is
// not finite.
double normalized_score(const ScoreTriple& t);
double improvement_pct(double normalized);
bool is_degenerate(const ScoreTriple& t);

// Middle element, or the mean of the two middle elements. Throws on empty.
double median(std::vector<double> values);

struct EnvironmentScore {
  std::string environment;
  std::string agent;
  ScoreTriple scores;
  std::size_t runs = 0;
};

struct EnvironmentResult {
  EnvironmentScore input;
  std::optional<double> normalized;  // empty when the baselines tie
  bool beats_dqn = false;
};

struct AggregateReport {
  std::vector<EnvironmentResult> environments;
  double median_normalized = 0.0;
  std::size_t beats_dqn_count = 0;
  std::size_t included = 0;
  std::size_t excluded = 0;
  std::vector<std::string> warnings;
};

// Degenerate environments are dropped before the median and reported in
// `warnings`. Throws InvalidArgument on empty input or when every
// environment is degenerate.
AggregateReport aggregate(const std::vector<EnvironmentScore>& scores);

// Learning curve of one run, tagged for the curves CSV.
struct CurveLog {
  std::string run_id;
  std::string agent;
  std::uint64_t seed = 0;
  std::vector<EvalRecord> records;
};

// Numbers use 6 significant digits; non-finite values print as nan/inf.
std::string format_number(double v);

void write_aggregate_csv(const AggregateReport& report, std::ostream& out);
void write_curves_csv(const std::vector<CurveLog>& curves, std::ostream& out);
void write_medians_csv(const std::vector<AggregateReport>& per_agent, std::ostream& out);

// aggregate.csv, curves.csv and medians.csv under `dir` (created if needed).
// Throws Error on I/O failure.
void emit_report(const std::vector<AggregateReport>& per_agent, const std::vector<CurveLog>& curves,
                 const std::filesystem::path& dir);

}  // namespace offrl
