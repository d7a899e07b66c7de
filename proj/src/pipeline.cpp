#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <sstream>
#include <thread>

#include "kss/cli.hpp"
#include "kss/error.hpp"
#include "kss/estimators.hpp"
#include "kss/inference.hpp"
#include "kss/stats.hpp"

namespace kss {

// ---- enumerations -----------------------------------------------------------

std::string to_string(LeaveOutLevel v) {
  switch (v) {
    case LeaveOutLevel::Observation: return "observation";
    case LeaveOutLevel::Match: return "match";
    case LeaveOutLevel::Worker: return "worker";
  }
  return "observation";
}

std::string to_string(Pruning v) {
  switch (v) {
    case Pruning::None: return "none";
    case Pruning::LeaveOneOut: return "loo";
    case Pruning::LeaveTwoOut: return "l2o";
  }
  return "none";
}

LeaveOutLevel parse_leave_out(const std::string& s) {
  if (s == "observation") return LeaveOutLevel::Observation;
  if (s == "match") return LeaveOutLevel::Match;
  if (s == "worker") return LeaveOutLevel::Worker;
  fail_validation("InvalidConfig", "leave_out_level must be observation, match or worker");
}

Pruning parse_pruning(const std::string& s) {
  if (s == "none") return Pruning::None;
  if (s == "loo") return Pruning::LeaveOneOut;
  if (s == "l2o") return Pruning::LeaveTwoOut;
  fail_validation("InvalidConfig", "pruning must be none, loo or l2o");
}

ModelKind parse_model(const std::string& s) {
  if (s == "levels") return ModelKind::Levels;
  if (s == "fd") return ModelKind::FirstDifference;
  fail_validation("InvalidConfig", "model must be levels or fd");
}

EstimandKind parse_estimand(const std::string& s) {
  for (EstimandKind k : {EstimandKind::VarFirm, EstimandKind::CovPersonFirm, EstimandKind::VarPerson,
                         EstimandKind::CoefficientOfDetermination}) {
    if (estimand_name(k) == s) return k;
  }
  fail_validation("InvalidConfig", "unknown estimand '" + s + "'");
}

namespace {

std::string model_name(ModelKind m) { return m == ModelKind::FirstDifference ? "fd" : "levels"; }

bool person_based(EstimandKind k) { return k == EstimandKind::CovPersonFirm || k == EstimandKind::VarPerson; }

template <class F>
void with_object(const Json& j, const std::string& key, F f) {
  if (!j.contains(key)) return;
  if (!j[key].is_object()) fail_validation("InvalidConfig", "'" + key + "' must be an object");
  f(j[key]);
}

void reject_unknown(const Json& j, const std::vector<std::string>& keys, const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(keys.begin(), keys.end(), it.key()) == keys.end()) {
      fail_validation("InvalidConfig", "unknown key '" + it.key() + "' in " + where);
    }
  }
}

}  // namespace

void apply_config(RunConfig& cfg, const Json& j) {
  if (!j.is_object()) fail_validation("InvalidConfig", "config must be a JSON object");
  reject_unknown(j,
                 {"input", "output", "observations_csv", "model", "covariates", "demean_periods", "estimands",
                  "leave_out_level", "pruning", "prune", "jla", "inference", "threads", "seed", "split_cap",
                  "simulate", "jla_bench"},
                 "config");
  try {
    if (j.contains("input")) cfg.input = j["input"].get<std::string>();
    if (j.contains("output")) cfg.output = j["output"].get<std::string>();
    if (j.contains("observations_csv")) cfg.observations_csv = j["observations_csv"].get<std::string>();
    if (j.contains("model")) {
      cfg.model = parse_model(j["model"].get<std::string>());
      if (cfg.model == ModelKind::FirstDifference && !j.contains("estimands")) cfg.estimands = {EstimandKind::VarFirm};
    }
    if (j.contains("covariates")) cfg.covariates = j["covariates"].get<bool>();
    if (j.contains("demean_periods")) cfg.demean_periods = j["demean_periods"].get<bool>();
    if (j.contains("estimands")) {
      cfg.estimands.clear();
      for (const auto& e : j["estimands"]) cfg.estimands.push_back(parse_estimand(e.get<std::string>()));
    }
    if (j.contains("leave_out_level")) cfg.leave_out = parse_leave_out(j["leave_out_level"].get<std::string>());
    if (j.contains("pruning")) cfg.pruning = parse_pruning(j["pruning"].get<std::string>());
    if (j.contains("prune")) cfg.prune = j["prune"].get<bool>();
    if (j.contains("jla")) {
      if (j["jla"].is_null()) {
        cfg.jla.reset();
      } else {
        reject_unknown(j["jla"], {"p", "seed"}, "jla");
        SketchConfig s;
        s.p = j["jla"].value("p", s.p);
        s.seed = j["jla"].value("seed", s.seed);
        cfg.jla = s;
      }
    }
    with_object(j, "inference", [&](const Json& o) {
      reject_unknown(o, {"alpha", "q", "threshold", "q_max", "cv_draws"}, "inference");
      cfg.alpha = o.value("alpha", cfg.alpha);
      if (o.contains("q")) cfg.q = o["q"].is_string() ? (o["q"] == "auto" ? -1 : -2) : o["q"].get<int>();
      if (cfg.q == -2) fail_validation("InvalidConfig", "inference.q must be 'auto' or an integer");
      cfg.q_threshold = o.value("threshold", cfg.q_threshold);
      cfg.q_max = o.value("q_max", cfg.q_max);
      cfg.cv_draws = o.value("cv_draws", cfg.cv_draws);
    });
    if (j.contains("threads")) cfg.threads = j["threads"].get<int>();
    if (j.contains("seed")) cfg.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("split_cap")) cfg.split_cap = j["split_cap"].get<int>();
    with_object(j, "simulate", [&](const Json& o) {
      reject_unknown(o,
                     {"J", "N", "p_b", "blocks", "reps", "het", "het_variance", "block_means", "within_sd",
                      "error_law", "df"},
                     "simulate");
      cfg.sbm.J = o.value("J", cfg.sbm.J);
      cfg.sbm.N = o.value("N", cfg.sbm.N);
      cfg.sbm.p_b = o.value("p_b", cfg.sbm.p_b);
      cfg.sbm.blocks = o.value("blocks", cfg.sbm.blocks);
      cfg.reps = o.value("reps", cfg.reps);
      cfg.het = o.value("het", cfg.het);
      cfg.het_variance = o.value("het_variance", cfg.het_variance);
      if (o.contains("block_means")) cfg.block_means = o["block_means"].get<std::vector<double>>();
      cfg.within_sd = o.value("within_sd", cfg.within_sd);
      if (o.contains("error_law")) {
        const auto law = o["error_law"].get<std::string>();
        if (law == "normal") {
          cfg.errors.law = ErrorLaw::Normal;
        } else if (law == "t") {
          cfg.errors.law = ErrorLaw::ScaledT;
        } else {
          fail_validation("InvalidConfig", "error_law must be normal or t");
        }
      }
      cfg.errors.df = o.value("df", cfg.errors.df);
    });
    with_object(j, "jla_bench", [&](const Json& o) {
      reject_unknown(o, {"p"}, "jla_bench");
      if (o.contains("p")) cfg.bench_p = o["p"].get<std::vector<int>>();
    });
  } catch (const nlohmann::json::exception& e) {
    fail_validation("InvalidConfig", e.what());
  }
}

RunConfig load_config_file(const std::string& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) fail_validation("IoError", "cannot open config " + path);
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail_validation("InvalidConfig", path + ": " + e.what());
  }
  apply_config(base, j);
  return base;
}

SketchConfig parse_jla_tokens(const std::vector<std::string>& tokens) {
  SketchConfig s;
  for (const auto& t : tokens) {
    const auto eq = t.find('=');
    if (eq == std::string::npos) fail_validation("InvalidConfig", "--jla expects key=value, got '" + t + "'");
    const std::string key = t.substr(0, eq), val = t.substr(eq + 1);
    try {
      std::size_t used = 0;
      if (key == "p") {
        s.p = std::stoi(val, &used);
      } else if (key == "seed") {
        s.seed = std::stoull(val, &used);
      } else {
        fail_validation("InvalidConfig", "--jla accepts p and seed, got '" + key + "'");
      }
      if (used != val.size()) throw std::invalid_argument(val);
    } catch (const std::logic_error&) {
      fail_validation("InvalidConfig", "--jla: bad value '" + val + "' for " + key);
    }
  }
  return s;
}

void validate(const RunConfig& cfg) {
  const std::vector<std::string> cmds = {"prune", "estimate", "infer", "simulate", "jla-bench"};
  if (std::find(cmds.begin(), cmds.end(), cfg.command) == cmds.end()) {
    fail_validation("InvalidConfig", "unknown command '" + cfg.command + "'");
  }
  if (!(cfg.alpha > 0.0 && cfg.alpha < 1.0)) fail_validation("InvalidAlpha", "alpha must lie in (0,1)");
  if (cfg.q < -1) fail_validation("InvalidConfig", "q must be auto or nonnegative");
  if (cfg.q_max < 0 || cfg.q_max > 10) fail_validation("InvalidConfig", "q_max must lie in [0, 10]");
  if (cfg.q > cfg.q_max) fail_validation("InvalidConfig", "q exceeds q_max");
  if (!(cfg.q_threshold > 0.0 && cfg.q_threshold < 1.0)) fail_validation("InvalidConfig", "threshold must lie in (0,1)");
  if (cfg.jla && cfg.jla->p < 1) fail_validation("InvalidConfig", "jla p must be positive");
  if (cfg.threads < 0) fail_validation("InvalidConfig", "threads must be nonnegative");
  if (cfg.split_cap < 1) fail_validation("InvalidConfig", "split_cap must be positive");
  if (cfg.command != "simulate") {
    if (cfg.input.empty()) fail_validation("InvalidConfig", "an input CSV is required");
    if (cfg.estimands.empty() && cfg.command != "prune") fail_validation("InvalidConfig", "no estimands requested");
    if (cfg.model == ModelKind::FirstDifference) {
      for (auto e : cfg.estimands) {
        if (person_based(e)) fail_validation("InvalidConfig", estimand_name(e) + " needs the levels model");
      }
    }
  } else {
    if (!cfg.seed) fail_validation("MissingSeed", "simulate requires --seed");
    validate(cfg.sbm);
    if (cfg.reps < 100) fail_validation("InvalidConfig", "simulate needs at least 100 replications");
    if (cfg.het != "estimated" && cfg.het != "homoscedastic") {
      fail_validation("InvalidConfig", "het must be estimated or homoscedastic");
    }
  }
  if (cfg.command == "infer" && cfg.model != ModelKind::FirstDifference) {
    fail_validation("InvalidConfig", "infer runs on the first-difference model (--model fd)");
  }
  if (cfg.command == "jla-bench" && cfg.bench_p.empty()) fail_validation("InvalidConfig", "jla-bench needs p values");
}

Json config_to_json(const RunConfig& cfg) {
  Json j;
  j["command"] = cfg.command;
  j["input"] = cfg.input;
  j["model"] = model_name(cfg.model);
  j["covariates"] = cfg.covariates;
  j["demean_periods"] = cfg.demean_periods;
  Json est = Json::array();
  for (auto e : cfg.estimands) est.push_back(estimand_name(e));
  j["estimands"] = est;
  j["leave_out_level"] = to_string(cfg.leave_out);
  j["pruning"] = cfg.prune ? to_string(cfg.pruning) : "none";
  j["jla"] = cfg.jla ? Json{{"p", cfg.jla->p}, {"seed", cfg.jla->seed}} : Json();
  j["inference"] = {{"alpha", cfg.alpha},
                    {"q", cfg.q < 0 ? Json("auto") : Json(cfg.q)},
                    {"threshold", cfg.q_threshold},
                    {"q_max", cfg.q_max},
                    {"cv_draws", cfg.cv_draws}};
  j["seed"] = cfg.seed ? Json(*cfg.seed) : Json();
  return j;
}

int exit_code_for(const std::exception& e) {
  if (const auto* k = dynamic_cast<const Error*>(&e)) return k->kind() == ErrorKind::Validation ? 2 : 3;
  return 1;
}

// ---- pruning ----------------------------------------------------------------

namespace {

PruneStage count_stage(const std::string& name, const Panel& p) {
  PruneStage s;
  s.stage = name;
  s.firms = p.num_firms();
  s.workers = p.num_workers();
  s.person_years = p.n();
  for (int g = 0; g < p.num_workers(); ++g) {
    const auto& idx = p.group_index[g];
    for (std::size_t t = 1; t < idx.size(); ++t) {
      if (p.firm[idx[t]] != p.firm[idx[0]]) {
        ++s.movers;
        break;
      }
    }
  }
  return s;
}

}  // namespace

PruneResult prune_panel(const Panel& panel, Pruning level) {
  PruneResult r;
  r.stages.push_back(count_stage("input", panel));
  std::vector<int> keep;
  for (int i = 0; i < panel.n(); ++i) {
    if (panel.group_index[panel.worker[i]].size() >= 2) keep.push_back(i);
  }
  if (keep.empty()) fail_validation("EmptyPanel", "no worker has two or more observations");
  Panel p = panel.subset(keep);
  r.stages.push_back(count_stage("drop_singletons", p));
  MobilityGraph g = largest_connected_component(build_mobility_graph(p));
  p = restrict_panel(p, g);
  r.stages.push_back(count_stage("connected_set", p));
  if (level != Pruning::None) {
    g = leave_one_out_connected(build_mobility_graph(p));
    p = restrict_panel(p, g);
    r.stages.push_back(count_stage("leave_one_out", p));
  }
  if (level == Pruning::LeaveTwoOut) {
    g = leave_two_out_connected(build_mobility_graph(p));
    p = restrict_panel(p, g);
    r.stages.push_back(count_stage("leave_two_out", p));
  }
  if (p.n() == 0) fail_validation("EmptyPanel", "pruning removed every observation");
  r.panel = std::move(p);
  return r;
}

// ---- report helpers ---------------------------------------------------------

namespace {

template <class F>
auto stage(const std::string& name, F f) -> decltype(f()) {
  try {
    return f();
  } catch (const Error& e) {
    std::string msg = e.what();
    const std::string prefix = e.code() + ": ";
    if (msg.rfind(prefix, 0) == 0) msg = msg.substr(prefix.size());
    throw Error(e.kind(), e.code(), "[" + name + "] " + msg);
  }
}

Json stages_json(const std::vector<PruneStage>& stages) {
  Json a = Json::array();
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const auto& st = stages[s];
    Json o = {{"stage", st.stage},
              {"firms", st.firms},
              {"workers", st.workers},
              {"movers", st.movers},
              {"person_years", st.person_years}};
    if (s > 0) {
      const auto& prev = stages[s - 1];
      o["dropped"] = {{"firms", prev.firms - st.firms},
                      {"workers", prev.workers - st.workers},
                      {"movers", prev.movers - st.movers},
                      {"person_years", prev.person_years - st.person_years}};
    }
    a.push_back(o);
  }
  return a;
}

Json estimate_json(const VarianceComponentEstimate& e) {
  return {{"theta", e.theta}, {"plugin", e.plugin}, {"correction", e.correction}, {"negative_sigma2", e.negative_sigma2}};
}

Json vec_json(const Vec& v) { return Json(std::vector<double>(v.data(), v.data() + v.size())); }

std::string timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

int resolve_threads(int requested) {
  if (const char* env = std::getenv("KSS_THREADS")) {
    const int v = std::atoi(env);
    if (v > 0) return v;
  }
  if (requested > 0) return requested;
  return std::max(1u, std::thread::hardware_concurrency());
}

void demean_by_period(Panel& p) {
  std::map<int, std::pair<double, long>> acc;
  for (const auto& o : p.rows) {
    acc[o.period].first += o.outcome;
    acc[o.period].second += 1;
  }
  for (auto& o : p.rows) o.outcome -= acc[o.period].first / static_cast<double>(acc[o.period].second);
}

// Shared state of the estimate and infer commands.
struct Prepared {
  Panel panel;
  std::vector<PruneStage> stages;
  DesignMatrix design;
  Vec y;
  std::unique_ptr<GramSolver> solver;
  std::vector<QuadraticForm> forms;
  FitResult fit;
};

Prepared prepare(const RunConfig& cfg, Json& report) {
  Prepared s;
  Panel raw = stage("ingest", [&] { return ingest_csv_file(cfg.input); });
  if (cfg.demean_periods) demean_by_period(raw);
  if (cfg.prune) {
    PruneResult pr = stage("prune", [&] { return prune_panel(raw, cfg.pruning); });
    s.panel = std::move(pr.panel);
    s.stages = std::move(pr.stages);
  } else {
    s.panel = std::move(raw);
    s.stages.push_back(count_stage("input", s.panel));
  }
  report["pruning"] = stages_json(s.stages);
  stage("design", [&] {
    ModelSpec spec;
    spec.kind = cfg.model;
    spec.include_covariates = cfg.covariates;
    s.design = build_design(s.panel, spec);
    s.y = design_outcome(s.panel, s.design);
    for (auto e : cfg.estimands) {
      EstimandSpec es;
      es.kind = e;
      s.forms.push_back(build_quadratic_form(s.design, es));
    }
  });
  stage("solve", [&] {
    s.solver = std::make_unique<GramSolver>(s.design);
    s.fit = fit(s.design, *s.solver, s.y);
  });
  return s;
}

std::vector<const QuadraticForm*> form_ptrs(const std::vector<QuadraticForm>& forms) {
  std::vector<const QuadraticForm*> out;
  for (const auto& f : forms) out.push_back(&f);
  return out;
}

double total_variance(const Vec& y) {
  const double m = y.mean();
  return (y.array() - m).square().sum() / static_cast<double>(y.size());
}

// Rows above which exact leverages are skipped when a sketch is configured.
constexpr int kExactWithSketchMaxRows = 50000;
// Dense n x n inference kernels are limited to this many rows.
constexpr int kInferenceMaxRows = 20000;

struct EstimateOutputs {
  std::optional<LeverageSet> exact;
  std::optional<LeverageSet> sketched;
  std::map<std::string, double> jla_bound;
};

EstimateOutputs run_estimates(const RunConfig& cfg, const Prepared& s, Json& report) {
  EstimateOutputs out;
  const auto forms = form_ptrs(s.forms);
  const bool want_exact = !cfg.jla || s.design.n() <= kExactWithSketchMaxRows;
  Json est = Json::object();
  if (want_exact) {
    out.exact = stage("leverage", [&] {
      LeverageSet lev = exact_leverages(s.design, *s.solver, forms);
      check_leverage(lev);
      return lev;
    });
    const AkmDecomposition dec = stage("estimate", [&] {
      return decompose_akm(s.y, s.fit, *out.exact, forms, s.design.k(), total_variance(s.y));
    });
    for (const auto& c : dec.components) {
      est[c.name] = {{"PI", estimate_json(c.pi)}, {"HO", estimate_json(c.ho)}, {"KSS", estimate_json(c.kss)}};
    }
  }
  if (cfg.jla) {
    out.sketched = stage("jla", [&] { return sketched_leverages(s.design, *s.solver, forms, *cfg.jla); });
    const Vec s2 = stage("jla", [&] { return jla_sigma2(s.y, s.fit, *out.sketched); });
    for (const auto& f : s.forms) {
      const auto e = stage("jla", [&] { return theta_leave_out_jla(s.y, s.fit, *out.sketched, f); });
      const double bound = jla_bias_bound(*out.sketched, f.name, s2);
      out.jla_bound[f.name] = bound;
      Json j = estimate_json(e);
      j["p"] = cfg.jla->p;
      j["seed"] = cfg.jla->seed;
      j["bias_bound"] = bound;
      j["exact_fallback_rows"] = std::count(out.sketched->exact_fallback.begin(), out.sketched->exact_fallback.end(), 1);
      est[f.name]["KSS_JLA"] = j;
    }
  }
  if (cfg.leave_out != LeaveOutLevel::Observation && cfg.model == ModelKind::Levels) {
    stage("cluster", [&] {
      if (cfg.leave_out == LeaveOutLevel::Match) {
        std::map<std::pair<int, int>, int> ids;
        std::vector<int> cl(s.design.n());
        for (int i = 0; i < s.design.n(); ++i) {
          cl[i] = ids.emplace(std::make_pair(s.panel.worker[i], s.panel.firm[i]), static_cast<int>(ids.size())).first->second;
        }
        for (const auto& f : s.forms) {
          est[f.name]["KSS_cluster"] = estimate_json(theta_cluster(s.y, s.design, *s.solver, f, cl));
          est[f.name]["KSS_cluster"]["level"] = "match";
        }
      } else {
        Vec yw = s.y;
        const DesignMatrix dw = within_worker(s.design, yw);
        const GramSolver sw(dw);
        for (std::size_t e = 0; e < cfg.estimands.size(); ++e) {
          if (person_based(cfg.estimands[e])) continue;
          EstimandSpec es;
          es.kind = cfg.estimands[e];
          const QuadraticForm f = build_quadratic_form(dw, es);
          est[f.name]["KSS_cluster"] = estimate_json(theta_cluster(yw, dw, sw, f, dw.row_worker));
          est[f.name]["KSS_cluster"]["level"] = "worker";
        }
      }
    });
  }
  report["estimates"] = est;
  const LeverageSet& lev = out.exact ? *out.exact : *out.sketched;
  report["diagnostics"] = {{"n", s.design.n()},
                           {"k", s.design.k()},
                           {"max_P_ii", lev.max_P()},
                           {"leverage_mode", lev.mode == LeverageMode::Exact ? "exact" : "sketched"},
                           {"solver", {{"method", s.solver->stats().method},
                                       {"solves", s.solver->stats().solves},
                                       {"iterations", s.solver->stats().iterations},
                                       {"max_rel_residual", s.solver->stats().max_rel_residual}}}};
  if (!cfg.observations_csv.empty()) {
    stage("report", [&] {
      std::ofstream csv(cfg.observations_csv);
      if (!csv) fail_validation("IoError", "cannot write " + cfg.observations_csv);
      csv.precision(17);
      csv << "row,worker_id,period,P_ii,M_ii,sigma2_i";
      for (const auto& f : s.forms) csv << ",B_ii_" << f.name;
      csv << "\n";
      const Vec s2 = lev.mode == LeverageMode::Exact ? sigma2_leave_out(s.y, s.fit, lev) : jla_sigma2(s.y, s.fit, lev);
      for (int i = 0; i < s.design.n(); ++i) {
        csv << i << ',' << s.panel.worker_ids[s.design.row_worker[i]] << ',' << s.design.row_period[i] << ','
            << lev.P(i) << ',' << lev.M(i) << ',' << s2(i);
        for (const auto& f : s.forms) csv << ',' << lev.B_of(f.name)(i);
        csv << "\n";
      }
    });
    report["observations_csv"] = cfg.observations_csv;
  }
  return out;
}

Json interval_json(const ConfidenceInterval& ci) {
  return {{"q", ci.q},
          {"lower", ci.lower},
          {"upper", ci.upper},
          {"method", ci.method},
          {"kappa", std::isfinite(ci.kappa) ? Json(ci.kappa) : Json("inf")},
          {"critical_value", ci.critical_value},
          {"jla_widening", ci.jla_widening}};
}

void run_inference(const RunConfig& cfg, const Prepared& s, const EstimateOutputs& eo, Json& report) {
  if (s.design.n() > kInferenceMaxRows) {
    fail_validation("TooLarge", "inference kernels are dense; n exceeds " + std::to_string(kInferenceMaxRows));
  }
  const std::uint64_t seed = cfg.seed.value_or(0);
  const MobilityGraph g = build_mobility_graph(s.panel);
  const SplitSamplePlan plan = stage("split_plan", [&] { return build_split_plan(s.design, g, seed, cfg.split_cap); });
  Json inf = Json::object();
  for (const auto& f : s.forms) {
    stage("infer", [&] {
      const InferenceModel model(s.design, *s.solver, f, plan, std::min(cfg.q_max, s.design.k()));
      const EigenInfo& eig = model.eig();
      const double theta = model.theta(s.y);
      const int q_sel = cfg.q >= 0 ? std::min(cfg.q, eig.q_max()) : select_q(eig, cfg.q_threshold);
      Json j;
      j["theta"] = theta;
      j["se_q0"] = std::sqrt(model.vhat(s.y).value);
      j["q_selected"] = q_sel;
      j["eigen_shares"] = vec_json(eig.shares);
      j["eigenvalues"] = vec_json(eig.lambdas);
      j["sum_sq_eigenvalues"] = eig.trace_sq;
      j["lindeberg"] = {{"max_w1_sq", eig.lindeberg1}, {"max_w12_sq", eig.lindeberg2}};
      j["Q_share"] = plan.q_share();
      j["B_share"] = model.structure().problem_share();
      j["conservative"] = model.structure().any_missing();
      const bool widen_jla = cfg.jla && eo.jla_bound.count(f.name) && jla_widening_needed(s.design.n(), cfg.jla->p);
      Json cis = Json::array();
      std::vector<ConfidenceInterval> by_q(eig.q_max() + 1);
      for (int q = std::max(0, q_sel - 1); q <= std::min(eig.q_max(), q_sel + 1); ++q) {
        const WeakIdVariance w = model.sigma_q(s.y, q);
        double kappa = 0.0;
        if (q > 0) {
          try {
            kappa = curvature(eig.lambdas.head(q), w.Sigma);
          } catch (const Error&) {
            kappa = std::numeric_limits<double>::infinity();
          }
        }
        const double z = q == 0 ? normal_quantile(1.0 - cfg.alpha / 2.0)
                                : critical_value(cfg.alpha, q, kappa, cfg.cv_draws, seed + 20240607);
        ConfidenceInterval ci = confidence_interval(theta, eig.lambdas, w, z, cfg.alpha);
        if (widen_jla) widen(ci, eo.jla_bound.at(f.name));
        Json cj = interval_json(ci);
        cj["projected"] = w.projected;
        cj["floored"] = w.floored;
        cis.push_back(cj);
        by_q[q] = ci;
      }
      j["intervals"] = cis;
      // Report the union of the q and q+1 intervals when the next share is near the threshold.
      if (q_sel + 1 <= eig.q_max() && q_sel < eig.shares.size()) {
        const double next = eig.shares(q_sel);
        if (std::abs(next - cfg.q_threshold) <= 0.5 * cfg.q_threshold) {
          j["union_interval"] = {{"q", {q_sel, q_sel + 1}},
                                 {"lower", std::min(by_q[q_sel].lower, by_q[q_sel + 1].lower)},
                                 {"upper", std::max(by_q[q_sel].upper, by_q[q_sel + 1].upper)}};
        }
      }
      inf[f.name] = j;
    });
  }
  report["inference"] = inf;
}

// Output path without a trailing .json, used as the stem of the simulate files.
std::string output_base(const std::string& output) {
  if (output.empty()) return "kss_simulation";
  if (output.size() > 5 && output.compare(output.size() - 5, 5, ".json") == 0) return output.substr(0, output.size() - 5);
  return output;
}

Json run_simulate(const RunConfig& cfg, Json& report) {
  SbmConfig sc = cfg.sbm;
  sc.seed = *cfg.seed;
  const SbmDraw draw = stage("simulate", [&] { return gen_sbm(sc); });
  const PruneResult pr = stage("prune", [&] { return prune_panel(draw.panel, cfg.pruning); });
  report["pruning"] = stages_json(pr.stages);
  ModelSpec spec;
  spec.kind = ModelKind::FirstDifference;
  const DesignMatrix d = build_design(pr.panel, spec);
  const GramSolver solver(d);
  const QuadraticForm form = build_quadratic_form(d, EstimandSpec{});
  const LeverageSet lev = exact_leverages(d, solver, {&form});
  check_leverage(lev);
  // Firm codes of the pruned panel are a subset of the draw's; map effects by firm id.
  const Vec psi_all = block_firm_effects(draw, cfg.block_means, cfg.within_sd, *cfg.seed);
  Vec psi(pr.panel.num_firms());
  for (int j = 0; j < pr.panel.num_firms(); ++j) psi(j) = psi_all(std::stoi(pr.panel.firm_ids[j]));
  McScenario m;
  m.name = "sbm";
  m.design = &d;
  m.solver = &solver;
  m.form = &form;
  m.beta = fd_coefficients(d, psi);
  const HeteroModel het =
      cfg.het == "estimated" ? HeteroModel::estimated() : HeteroModel::homoscedastic(cfg.het_variance);
  m.variances = fd_variances(d, lev, form.name, het);
  m.errors = cfg.errors;
  m.alpha = cfg.alpha;
  m.seed = *cfg.seed;
  m.cv_draws = cfg.cv_draws;
  const MobilityGraph g = build_mobility_graph(pr.panel);
  const SplitSamplePlan plan = build_split_plan(d, g, *cfg.seed, cfg.split_cap);
  m.plan = &plan;
  const McReport r = stage("monte_carlo", [&] { return monte_carlo(m, cfg.reps); });
  const std::string base = output_base(cfg.output);
  const std::string csv = base + ".reps.csv";
  const std::string summary = base + ".mc.json";
  write_mc_csv(r, csv);
  write_mc_json(r, summary);
  Json cov = Json::object();
  for (std::size_t i = 0; i < r.qs.size(); ++i) cov["q" + std::to_string(r.qs[i])] = r.coverage[i];
  return {{"sbm", {{"J", sc.J}, {"N", sc.N}, {"p_b", sc.p_b}, {"blocks", sc.blocks}, {"attempts", draw.attempts},
                   {"between_moves", draw.between_moves}}},
          {"reps", r.reps},
          {"theta", r.theta},
          {"bias", {{"PI", r.pi.bias}, {"HO", r.ho.bias}, {"KSS", r.kss.bias}}},
          {"bias_se", r.kss.bias_se},
          {"se_ratio", r.se_ratio},
          {"variance_ratio", r.variance_ratio},
          {"coverage", cov},
          {"eigen_shares", r.shares},
          {"shape", {{"skewness", r.skewness}, {"ks_p", r.ks_p}}},
          {"replications_csv", csv},
          {"summary_json", summary}};
}

Json run_jla_bench(const RunConfig& cfg, const Prepared& s) {
  using clock = std::chrono::steady_clock;
  const auto forms = form_ptrs(s.forms);
  const auto t0 = clock::now();
  const LeverageSet exact = exact_leverages(s.design, *s.solver, forms);
  const double t_exact = std::chrono::duration<double>(clock::now() - t0).count();
  check_leverage(exact);
  const Vec s2 = sigma2_leave_out(s.y, s.fit, exact);
  Json rows = Json::array();
  for (int p : cfg.bench_p) {
    SketchConfig sk;
    sk.p = p;
    sk.seed = cfg.seed.value_or(0);
    const auto t1 = clock::now();
    const LeverageSet sl = sketched_leverages(s.design, *s.solver, forms, sk);
    const double t_sketch = std::chrono::duration<double>(clock::now() - t1).count();
    Json per = Json::object();
    for (const auto& f : s.forms) {
      const auto ex = theta_leave_out(s.y, s.fit, exact, f);
      const auto jl = theta_leave_out_jla(s.y, s.fit, sl, f);
      per[f.name] = {{"theta_exact", ex.theta},
                     {"theta_jla", jl.theta},
                     {"max_abs_B_error", (sl.B_of(f.name) - exact.B_of(f.name)).cwiseAbs().maxCoeff()},
                     {"bias_bound", jla_bias_bound(exact, f.name, s2)}};
    }
    rows.push_back({{"p", p},
                    {"seconds", t_sketch},
                    {"solves", sketch_solve_count(forms, p)},
                    {"max_abs_P_error", (sl.P - exact.P).cwiseAbs().maxCoeff()},
                    {"forms", per}});
  }
  return {{"exact_seconds", t_exact}, {"runs", rows}};
}

}  // namespace

Json run(const RunConfig& cfg) {
  validate(cfg);
  Json report;
  report["schema_version"] = kSchemaVersion;
  report["generated_at"] = timestamp();
  report["config"] = config_to_json(cfg);
  report["threads"] = resolve_threads(cfg.threads);
  if (cfg.command == "simulate") {
    report["simulation"] = run_simulate(cfg, report);
  } else if (cfg.command == "prune") {
    Panel raw = stage("ingest", [&] { return ingest_csv_file(cfg.input); });
    const PruneResult pr = stage("prune", [&] { return prune_panel(raw, cfg.pruning); });
    report["pruning"] = stages_json(pr.stages);
  } else {
    Prepared s = prepare(cfg, report);
    if (cfg.command == "jla-bench") {
      report["jla_bench"] = stage("jla-bench", [&] { return run_jla_bench(cfg, s); });
    } else {
      const EstimateOutputs eo = run_estimates(cfg, s, report);
      if (cfg.command == "infer") run_inference(cfg, s, eo, report);
    }
  }
  if (!cfg.output.empty() && cfg.command != "simulate") {
    std::ofstream out(cfg.output);
    if (!out) fail_validation("IoError", "cannot write " + cfg.output);
    out << report.dump(2) << "\n";
  } else if (cfg.command == "simulate") {
    const std::string path = output_base(cfg.output) + ".json";
    std::ofstream out(path);
    if (!out) fail_validation("IoError", "cannot write " + path);
    out << report.dump(2) << "\n";
  }
  return report;
}

}  // namespace kss
