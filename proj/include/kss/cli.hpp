#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kss/design.hpp"
#include "kss/simulation.hpp"
#include "kss/sketch.hpp"

namespace kss {

using Json = nlohmann::ordered_json;

constexpr const char* kSchemaVersion = "1.0";

// ---- ingestion ------------------------------------------------------------

// Header `worker_id,firm_id,period,outcome[,covariate_*]`; extra columns must start with `covariate_`.
Panel ingest_csv(std::istream& in, const std::string& source = "<stream>");
Panel ingest_csv_file(const std::string& path);

// ---- configuration ----------------------------------------------------------

enum class LeaveOutLevel { Observation, Match, Worker };
enum class Pruning { None, LeaveOneOut, LeaveTwoOut };

struct RunConfig {
  std::string command = "estimate";  // prune, estimate, infer, simulate, jla-bench
  std::string input;
  std::string output = "kss_report.json";
  std::string observations_csv;      // empty: not written
  ModelKind model = ModelKind::Levels;
  bool covariates = true;
  bool demean_periods = false;       // subtract period means from outcomes first
  std::vector<EstimandKind> estimands = {EstimandKind::VarFirm, EstimandKind::CovPersonFirm,
                                         EstimandKind::VarPerson};
  LeaveOutLevel leave_out = LeaveOutLevel::Observation;
  Pruning pruning = Pruning::LeaveOneOut;
  bool prune = true;
  std::optional<SketchConfig> jla;
  double alpha = 0.05;
  int q = -1;                        // -1: select from eigenvalue shares
  double q_threshold = 0.1;
  int q_max = 3;
  int threads = 0;                   // 0: available cores
  std::optional<std::uint64_t> seed;
  int split_cap = kDefaultSubsampleCap;
  // simulate
  SbmConfig sbm;
  long reps = 1000;
  std::string het = "estimated";     // estimated or homoscedastic
  double het_variance = 0.05;
  std::vector<double> block_means = {0.0, 0.2};
  double within_sd = 0.1;
  ErrorSpec errors;
  long cv_draws = 200000;
  // jla-bench
  std::vector<int> bench_p = {32, 128, 512};
};

std::string to_string(LeaveOutLevel v);
std::string to_string(Pruning v);
LeaveOutLevel parse_leave_out(const std::string& s);
Pruning parse_pruning(const std::string& s);
ModelKind parse_model(const std::string& s);
EstimandKind parse_estimand(const std::string& s);

// Applies keys of a JSON object on top of cfg; unknown keys are rejected.
void apply_config(RunConfig& cfg, const Json& j);
RunConfig load_config_file(const std::string& path, RunConfig base = {});
// Parses `p=<int>` / `seed=<int>` tokens.
SketchConfig parse_jla_tokens(const std::vector<std::string>& tokens);
void validate(const RunConfig& cfg);
Json config_to_json(const RunConfig& cfg);

// ---- pipeline ---------------------------------------------------------------

struct PruneResult {
  Panel panel;
  std::vector<PruneStage> stages;
};

PruneResult prune_panel(const Panel& panel, Pruning level);

// Runs the configured command and returns the report (also written to cfg.output when non-empty).
Json run(const RunConfig& cfg);

// Exit code for a caught exception: 2 validation, 3 numerical, 1 otherwise.
int exit_code_for(const std::exception& e);

}  // namespace kss
