#include "offrl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>

#include "offrl/errors.hpp"

namespace offrl {

bool is_degenerate(const ScoreTriple& t) { return t.score_baseline_dqn == t.score_random; }

double normalized_score(const ScoreTriple& t) {
  if (!std::isfinite(t.score_agent) || !std::isfinite(t.score_baseline_dqn) || !std::isfinite(t.score_random))
    throw InvalidArgument("scores must be finite");
  if (is_degenerate(t)) throw InvalidArgument("DQN and random baselines tie; normalized score undefined");
  const double lo = std::min(t.score_baseline_dqn, t.score_random);
  const double hi = std::max(t.score_baseline_dqn, t.score_random);
  return (t.score_agent - lo) / (hi - lo);
}

double improvement_pct(double normalized) { return 100.0 * (normalized - 1.0); }

double median(std::vector<double> values) {
  if (values.empty()) throw InvalidArgument("median of an empty set");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

AggregateReport aggregate(const std::vector<EnvironmentScore>& scores) {
  if (scores.empty()) throw InvalidArgument("nothing to aggregate");
  AggregateReport report;
  std::vector<double> kept;
  for (const EnvironmentScore& s : scores) {
    EnvironmentResult r;
    r.input = s;
    r.beats_dqn = s.scores.score_agent > s.scores.score_baseline_dqn;
    if (r.beats_dqn) ++report.beats_dqn_count;
    if (is_degenerate(s.scores)) {
      ++report.excluded;
      report.warnings.push_back("environment '" + s.environment + "' excluded: DQN and random baselines tie");
    } else {
      r.normalized = normalized_score(s.scores);
      kept.push_back(*r.normalized);
      ++report.included;
    }
    report.environments.push_back(std::move(r));
  }
  if (kept.empty()) throw InvalidArgument("every environment has tied baselines");
  report.median_normalized = median(std::move(kept));
  return report;
}

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

void write_aggregate_csv(const AggregateReport& report, std::ostream& out) {
  out << "environment,agent,score_random,score_dqn,score_agent,normalized,improvement_pct,beats_dqn\n";
  for (const EnvironmentResult& r : report.environments) {
    const ScoreTriple& s = r.input.scores;
    out << r.input.environment << ',' << r.input.agent << ',' << format_number(s.score_random) << ','
        << format_number(s.score_baseline_dqn) << ',' << format_number(s.score_agent) << ',';
    if (r.normalized)
      out << format_number(*r.normalized) << ',' << format_number(improvement_pct(*r.normalized));
    else
      out << ',';
    out << ',' << (r.beats_dqn ? 1 : 0) << '\n';
  }
}

void write_curves_csv(const std::vector<CurveLog>& curves, std::ostream& out) {
  out << "run_id,agent,seed,iteration,gradient_updates,eval_mean_return,eval_std_return,mean_abs_td_error,diverged\n";
  for (const CurveLog& c : curves)
    for (const EvalRecord& e : c.records)
      out << c.run_id << ',' << c.agent << ',' << c.seed << ',' << e.iteration << ',' << e.gradient_updates << ','
          << format_number(e.mean_return) << ',' << format_number(e.std_return) << ','
          << format_number(e.mean_abs_td_error) << ',' << (e.diverged ? 1 : 0) << '\n';
}

void write_medians_csv(const std::vector<AggregateReport>& per_agent, std::ostream& out) {
  out << "agent,median_normalized,median_improvement_pct,beats_dqn,environments,excluded\n";
  for (const AggregateReport& r : per_agent) {
    const std::string agent = r.environments.empty() ? "" : r.environments.front().input.agent;
    out << agent << ',' << format_number(r.median_normalized) << ','
        << format_number(improvement_pct(r.median_normalized)) << ',' << r.beats_dqn_count << ','
        << r.environments.size() << ',' << r.excluded << '\n';
  }
}

namespace {

template <typename Fn>
void write_file(const std::filesystem::path& path, Fn fn) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  fn(out);
  out.flush();
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

}  // namespace

void emit_report(const std::vector<AggregateReport>& per_agent, const std::vector<CurveLog>& curves,
                 const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error("cannot create '" + dir.string() + "': " + ec.message());
  write_file(dir / "aggregate.csv", [&](std::ostream& out) {
    AggregateReport merged;
    for (const AggregateReport& r : per_agent)
      merged.environments.insert(merged.environments.end(), r.environments.begin(), r.environments.end());
    write_aggregate_csv(merged, out);
  });
  write_file(dir / "curves.csv", [&](std::ostream& out) { write_curves_csv(curves, out); });
  write_file(dir / "medians.csv", [&](std::ostream& out) { write_medians_csv(per_agent, out); });
}

}  // namespace offrl
