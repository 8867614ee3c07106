#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "fedmae/config.hpp"

namespace fedmae {

// Plan file (key = value):
//   kind = ablation-depth
//   seeds = 0,1,2,3,4
//   out = runs/ablation
//   workers = 2
//   grid.depth = 1,2,3
//   grid.p_pre = 0,depth
//   <any pipeline key> = <value>      base configuration shared by every job
struct ExperimentPlan {
  std::string kind;
  std::map<std::string, std::vector<std::string>> grid;
  std::vector<std::uint64_t> seeds;
  std::filesystem::path out;
  std::size_t workers = 1;
  KeyValueConfig base;

  struct Job {
    std::string id;
    std::map<std::string, std::string> point;
    std::uint64_t seed = 0;
  };

  static const std::vector<std::string>& kinds();
  static ExperimentPlan parse(const KeyValueConfig& cfg);
  static ExperimentPlan load(const std::filesystem::path& path);
  // Grid and seeds nonempty, known kind and keys, every job's configuration
  // valid. Throws ValidationError before any work is done.
  void validate() const;
  // Cartesian product of the grid (keys in name order) times the seeds.
  std::vector<Job> jobs() const;
  KeyValueConfig job_config(const Job& job) const;
};

// Columns of a job's result rows: grid keys, seed, then metrics.
struct JobResult {
  std::vector<std::string> metric_names;
  std::vector<std::vector<double>> rows;  // one vector of metrics per row
  std::vector<std::map<std::string, std::string>> row_keys;  // extra key columns per row
};

// Runs one job in isolation. Artifacts go under plan.out/jobs/<id>.*.
JobResult run_job(const ExperimentPlan& plan, const ExperimentPlan::Job& job);

struct PlanOutcome {
  std::size_t total = 0;
  std::size_t skipped = 0;  // completed on an earlier run
  std::size_t ran = 0;
  std::size_t failed = 0;
  int exit_code() const { return failed ? 2 : 0; }
};

// Executes every job not already completed (jobs/<id>.csv present), then
// merges jobs into results.csv (plus accuracy.csv for downstream kinds) and
// calls summarize. Failures are written to jobs/<id>.err.
PlanOutcome run_plan(const ExperimentPlan& plan);

struct SummaryStats {
  std::size_t count = 0;
  double median = 0.0;
  double q1 = 0.0;
  double q3 = 0.0;
};
// Linear-interpolation quantiles of the sorted values; count 0 for no values.
SummaryStats summary_stats(std::vector<double> values);

struct SummaryGroup {
  std::vector<std::string> key;  // values of the group columns
  std::string metric;
  SummaryStats stats;
};

struct Summary {
  std::vector<std::string> group_columns;
  std::vector<SummaryGroup> groups;  // sorted by key, then metric name
  std::vector<std::string> missing_jobs;
};

// Reads manifest.txt and results.csv in dir and writes summary.csv and
// summary.txt. Jobs listed in the manifest without rows are reported as
// missing.
Summary summarize(const std::filesystem::path& dir);

}  // namespace fedmae
