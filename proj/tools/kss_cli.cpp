#include <iostream>

#include <CLI11.hpp>

#include "kss/cli.hpp"
#include "kss/error.hpp"

namespace {

struct Flags {
  std::string config, input, output, obs_csv, model, leave_out, pruning, het, error_law, q;
  std::vector<std::string> estimands, jla;
  bool no_prune = false, no_covariates = false, demean_periods = false;
  double alpha = 0.05, threshold = 0.1, p_b = 0.5, df = 5.0;
  int q_max = 3, threads = 0, split_cap = 100, J = 40, N = 400, blocks = 2;
  long reps = 1000, cv_draws = 200000;
  std::uint64_t seed = 0;
  std::vector<int> bench_p;
};

void add_common(CLI::App* c, Flags& f) {
  c->add_option("--config", f.config, "JSON configuration file; flags override its values");
  c->add_option("--output,-o", f.output, "Report path (JSON)");
  c->add_option("--seed", f.seed, "Random seed");
  c->add_option("--threads", f.threads, "Worker threads (0: available cores; KSS_THREADS overrides)");
  c->add_option("--pruning", f.pruning, "none, loo or l2o")->check(CLI::IsMember({"none", "loo", "l2o"}));
  c->add_option("--alpha", f.alpha, "Significance level");
}

void add_data(CLI::App* c, Flags& f) {
  c->add_option("input", f.input, "Input CSV (worker_id,firm_id,period,outcome[,covariate_*])");
  c->add_option("--model", f.model, "levels or fd")->check(CLI::IsMember({"levels", "fd"}));
  c->add_option("--estimand", f.estimands,
                "var_firm, cov_person_firm, var_person, coefficient_of_determination (repeatable)");
  c->add_option("--leave-out", f.leave_out, "observation, match or worker")
      ->check(CLI::IsMember({"observation", "match", "worker"}));
  c->add_flag("--no-prune", f.no_prune, "Skip connected-set pruning");
  c->add_flag("--no-covariates", f.no_covariates, "Ignore covariate_* columns");
  c->add_flag("--demean-periods", f.demean_periods, "Subtract period means from outcomes first");
  c->add_option("--obs-csv", f.obs_csv, "Per-observation CSV (P_ii, M_ii, sigma2_i, B_ii)");
  c->add_option("--jla", f.jla, "Sketched leverages: p=<int> seed=<int>")->expected(1, 2);
  c->add_option("--split-cap", f.split_cap, "Cap on split-sample path searches per mover");
}

void add_inference(CLI::App* c, Flags& f) {
  c->add_option("--q", f.q, "Weakly identified directions: auto or an integer");
  c->add_option("--threshold", f.threshold, "Eigenvalue share threshold for selecting q");
  c->add_option("--q-max", f.q_max, "Largest q considered");
  c->add_option("--cv-draws", f.cv_draws, "Draws for simulated critical values");
}

bool given(const CLI::App* c, const std::string& name) {
  try {
    return c->count(name) > 0;
  } catch (const CLI::OptionNotFound&) {
    return false;
  }
}

kss::RunConfig build_config(const CLI::App* c, const Flags& f) {
  kss::RunConfig cfg;
  if (!f.config.empty()) cfg = kss::load_config_file(f.config);
  cfg.command = c->get_name();
  kss::Json j = kss::Json::object();
  if (given(c, "input")) j["input"] = f.input;
  if (given(c, "--output")) j["output"] = f.output;
  if (given(c, "--obs-csv")) j["observations_csv"] = f.obs_csv;
  if (given(c, "--model")) j["model"] = f.model;
  if (given(c, "--estimand")) j["estimands"] = f.estimands;
  if (given(c, "--leave-out")) j["leave_out_level"] = f.leave_out;
  if (given(c, "--pruning")) j["pruning"] = f.pruning;
  if (f.no_prune) j["prune"] = false;
  if (f.no_covariates) j["covariates"] = false;
  if (f.demean_periods) j["demean_periods"] = true;
  if (given(c, "--threads")) j["threads"] = f.threads;
  if (given(c, "--seed")) j["seed"] = f.seed;
  if (given(c, "--split-cap")) j["split_cap"] = f.split_cap;
  kss::Json inf = kss::Json::object();
  if (given(c, "--alpha")) inf["alpha"] = f.alpha;
  if (given(c, "--q")) inf["q"] = f.q == "auto" ? kss::Json("auto") : kss::Json(std::stoi(f.q));
  if (given(c, "--threshold")) inf["threshold"] = f.threshold;
  if (given(c, "--q-max")) inf["q_max"] = f.q_max;
  if (given(c, "--cv-draws")) inf["cv_draws"] = f.cv_draws;
  if (!inf.empty()) j["inference"] = inf;
  kss::Json sim = kss::Json::object();
  if (given(c, "--J")) sim["J"] = f.J;
  if (given(c, "--N")) sim["N"] = f.N;
  if (given(c, "--p-b")) sim["p_b"] = f.p_b;
  if (given(c, "--blocks")) sim["blocks"] = f.blocks;
  if (given(c, "--reps")) sim["reps"] = f.reps;
  if (given(c, "--het")) sim["het"] = f.het;
  if (given(c, "--error-law")) sim["error_law"] = f.error_law;
  if (given(c, "--df")) sim["df"] = f.df;
  if (!sim.empty()) j["simulate"] = sim;
  if (given(c, "--p")) j["jla_bench"] = {{"p", f.bench_p}};
  kss::apply_config(cfg, j);
  if (given(c, "--jla")) cfg.jla = kss::parse_jla_tokens(f.jla);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Leave-out estimation of variance components"};
  app.require_subcommand(1);
  Flags f;

  auto* prune = app.add_subcommand("prune", "Report connected-set pruning counts");
  add_common(prune, f);
  add_data(prune, f);

  auto* estimate = app.add_subcommand("estimate", "Prune, then PI, HO and leave-out estimates");
  add_common(estimate, f);
  add_data(estimate, f);

  auto* infer = app.add_subcommand("infer", "Estimates plus standard errors and confidence intervals");
  add_common(infer, f);
  add_data(infer, f);
  add_inference(infer, f);

  auto* simulate = app.add_subcommand("simulate", "Monte Carlo on a stochastic block model network");
  add_common(simulate, f);
  add_inference(simulate, f);
  simulate->add_option("--J", f.J, "Firms");
  simulate->add_option("--N", f.N, "Movers");
  simulate->add_option("--p-b", f.p_b, "Between-block move probability");
  simulate->add_option("--blocks", f.blocks, "Number of blocks");
  simulate->add_option("--reps", f.reps, "Replications");
  simulate->add_option("--het", f.het, "estimated or homoscedastic")
      ->check(CLI::IsMember({"estimated", "homoscedastic"}));
  simulate->add_option("--error-law", f.error_law, "normal or t")->check(CLI::IsMember({"normal", "t"}));
  simulate->add_option("--df", f.df, "Degrees of freedom for the scaled t law");

  auto* bench = app.add_subcommand("jla-bench", "Compare sketched and exact leverages");
  add_common(bench, f);
  add_data(bench, f);
  bench->add_option("--p", f.bench_p, "Sketch sizes");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    const CLI::App* cmd = app.get_subcommands().front();
    const kss::RunConfig cfg = build_config(cmd, f);
    const kss::Json report = kss::run(cfg);
    std::cout << "wrote " << (cfg.command == "simulate" ? "simulation outputs" : cfg.output) << "\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kss::exit_code_for(e);
  }
}
