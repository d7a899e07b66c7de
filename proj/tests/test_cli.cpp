#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <fstream>
#include <random>
#include <sstream>

#include "kss/cli.hpp"
#include "kss/error.hpp"
#include "kss/estimators.hpp"
#include "kss/solver.hpp"

using namespace kss;
namespace fs = std::filesystem;

namespace {

std::string error_code(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return "";
}

Panel ingest_text(const std::string& s) {
  std::istringstream in(s);
  return ingest_csv(in);
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("kss_cli_test_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

// Six firms on a doubled hexagon plus three chords, with stayers in every firm.
std::string write_fixture(const std::string& path) {
  std::mt19937_64 rng(42);
  std::normal_distribution<double> noise(0.0, 0.3);
  const double psi[6] = {0.0, 0.4, -0.2, 0.3, 0.1, -0.5};
  std::ofstream out(path);
  out << "worker_id,firm_id,period,outcome\n";
  int w = 0;
  auto mover = [&](int a, int b) {
    const double alpha = noise(rng);
    out << "w" << w << ",f" << a << ",1," << alpha + psi[a] + noise(rng) << "\n";
    out << "w" << w << ",f" << b << ",2," << alpha + psi[b] + noise(rng) << "\n";
    ++w;
  };
  for (int rep = 0; rep < 2; ++rep) {
    for (int j = 0; j < 6; ++j) mover(j, (j + 1) % 6);
  }
  for (int j = 0; j < 3; ++j) mover(j, j + 3);
  for (int j = 0; j < 6; ++j) {
    for (int s = 0; s < 3; ++s) mover(j, j);
  }
  return path;
}

RunConfig base_config(const std::string& input, const std::string& output) {
  RunConfig c;
  c.input = input;
  c.output = output;
  c.seed = 7;
  return c;
}

}  // namespace

TEST_CASE("ingest: rows, ids and periods") {
  const Panel p = ingest_text("worker_id,firm_id,period,outcome\na,x,1,1.5\na,y,2,2.0\nb,x,1,0.5\nb,x,2,0.0\n");
  CHECK(p.n() == 4);
  CHECK(p.num_firms() == 2);
  CHECK(p.num_workers() == 2);
}

TEST_CASE("ingest: byte-order mark and covariates") {
  const Panel p = ingest_text("\xEF\xBB\xBFworker_id,firm_id,period,outcome,covariate_age\na,x,1,1,30\na,y,2,2,31\n");
  CHECK(p.n() == 2);
  CHECK(p.covariate_names.size() == 1);
}

TEST_CASE("ingest: malformed inputs are rejected with their codes") {
  const std::string h = "worker_id,firm_id,period,outcome\n";
  CHECK(error_code([&] { ingest_text(h + "a,x,1,1\na,y,1,2\n"); }) == "DuplicateObservation");
  CHECK(error_code([&] { ingest_text(h); }) == "EmptyPanel");
  CHECK(error_code([&] { ingest_text("worker_id,firm_id,outcome\na,x,1\n"); }) == "MissingColumn");
  CHECK(error_code([&] { ingest_text(h + "a,x,1,abc\n"); }) == "ParseError");
  CHECK(error_code([&] { ingest_text("worker_id,firm_id,period,outcome,extra\na,x,1,1,2\n"); }) != "");
  CHECK(error_code([] { ingest_csv_file("/nonexistent/kss.csv"); }) == "IoError");
}

TEST_CASE("configuration parsing and validation") {
  RunConfig c;
  apply_config(c, Json::parse(R"({"model":"fd","estimands":["var_firm"],"pruning":"l2o",
                                  "inference":{"alpha":0.1,"q":"auto"},"jla":{"p":50,"seed":3}})"));
  CHECK(c.model == ModelKind::FirstDifference);
  CHECK(c.estimands.size() == 1);
  CHECK(c.pruning == Pruning::LeaveTwoOut);
  CHECK(c.alpha == doctest::Approx(0.1));
  CHECK(c.q == -1);
  REQUIRE(c.jla);
  CHECK(c.jla->p == 50);
  CHECK(error_code([&] { apply_config(c, Json::parse(R"({"bogus":1})")); }) == "InvalidConfig");
  CHECK(error_code([&] { apply_config(c, Json::parse(R"({"inference":{"alhpa":0.1}})")); }) == "InvalidConfig");

  const SketchConfig s = parse_jla_tokens({"p=20", "seed=9"});
  CHECK(s.p == 20);
  CHECK(s.seed == 9);
  CHECK(error_code([] { parse_jla_tokens({"q=1"}); }) == "InvalidConfig");

  RunConfig v;
  v.input = "x.csv";
  v.command = "infer";
  CHECK(error_code([&] { validate(v); }) == "InvalidConfig");
  v.model = ModelKind::FirstDifference;
  CHECK(error_code([&] { validate(v); }) == "InvalidConfig");  // person-based estimands need levels
  v.estimands = {EstimandKind::VarFirm};
  CHECK_NOTHROW(validate(v));
  v.alpha = 1.5;
  CHECK(error_code([&] { validate(v); }) == "InvalidAlpha");
  RunConfig sim;
  sim.command = "simulate";
  CHECK(error_code([&] { validate(sim); }) == "MissingSeed");
  sim.seed = 1;
  CHECK_NOTHROW(validate(sim));
}

TEST_CASE("config round trip through JSON") {
  RunConfig c;
  c.model = ModelKind::FirstDifference;
  c.estimands = {EstimandKind::VarFirm};
  c.seed = 4;
  const Json j = config_to_json(c);
  CHECK(j["model"] == "fd");
  CHECK(j["seed"] == 4);
  CHECK(j["jla"].is_null());
}

TEST_CASE("estimate: report structure and agreement with direct library calls") {
  TempDir t;
  const std::string csv = write_fixture(t.file("panel.csv"));
  RunConfig c = base_config(csv, t.file("report.json"));
  c.model = ModelKind::FirstDifference;
  c.estimands = {EstimandKind::VarFirm};
  c.observations_csv = t.file("obs.csv");
  const Json r = run(c);
  CHECK(r["schema_version"] == kSchemaVersion);
  CHECK(fs::exists(c.output));
  CHECK(fs::exists(c.observations_csv));
  REQUIRE(r["estimates"].contains("var_firm"));
  const double kss = r["estimates"]["var_firm"]["KSS"]["theta"].get<double>();

  const PruneResult pr = prune_panel(ingest_csv_file(csv), Pruning::LeaveOneOut);
  ModelSpec spec;
  spec.kind = ModelKind::FirstDifference;
  const DesignMatrix d = build_design(pr.panel, spec);
  const Vec y = design_outcome(pr.panel, d);
  const QuadraticForm A = build_quadratic_form(d, EstimandSpec{});
  GramSolver s(d);
  const LeverageSet lev = exact_leverages(d, s, {&A});
  CHECK(kss == doctest::Approx(theta_leave_out(y, fit(d, s, y), lev, A).theta).epsilon(1e-10));

  std::ifstream in(c.output);
  const Json disk = Json::parse(in);
  CHECK(disk["estimates"]["var_firm"]["PI"]["theta"] == r["estimates"]["var_firm"]["PI"]["theta"]);
}

TEST_CASE("estimate: levels model reports all three components") {
  TempDir t;
  const std::string csv = write_fixture(t.file("panel.csv"));
  RunConfig c = base_config(csv, t.file("report.json"));
  c.pruning = Pruning::LeaveTwoOut;
  const Json r = run(c);
  for (const char* k : {"var_firm", "cov_person_firm", "var_person"}) {
    REQUIRE(r["estimates"].contains(k));
    for (const char* m : {"PI", "HO", "KSS"}) CHECK(r["estimates"][k][m]["theta"].is_number());
  }
  CHECK(r["pruning"].size() >= 2);
}

TEST_CASE("infer: intervals contain the estimate at q = 0") {
  TempDir t;
  const std::string csv = write_fixture(t.file("panel.csv"));
  RunConfig c = base_config(csv, t.file("report.json"));
  c.command = "infer";
  c.model = ModelKind::FirstDifference;
  c.estimands = {EstimandKind::VarFirm};
  c.pruning = Pruning::LeaveTwoOut;
  c.cv_draws = 20000;
  const Json r = run(c);
  const Json& inf = r["inference"]["var_firm"];
  CHECK(inf["Q_share"].get<double>() == doctest::Approx(0.0));
  CHECK_FALSE(inf["conservative"].get<bool>());
  bool saw_q0 = false;
  for (const auto& ci : inf["intervals"]) {
    CHECK(ci["lower"].get<double>() <= ci["upper"].get<double>());
    if (ci["q"] == 0) {
      saw_q0 = true;
      const double th = inf["theta"].get<double>();
      CHECK(ci["lower"].get<double>() <= th);
      CHECK(th <= ci["upper"].get<double>());
    }
  }
  CHECK(saw_q0 == (inf["q_selected"].get<int>() <= 1));
}

TEST_CASE("sketched leverages are reported with a bias bound") {
  TempDir t;
  const std::string csv = write_fixture(t.file("panel.csv"));
  RunConfig c = base_config(csv, t.file("report.json"));
  c.model = ModelKind::FirstDifference;
  c.estimands = {EstimandKind::VarFirm};
  c.jla = SketchConfig{};
  c.jla->p = 200;
  c.jla->seed = 3;
  const Json r = run(c);
  const Json& j = r["estimates"]["var_firm"]["KSS_JLA"];
  CHECK(j["p"] == 200);
  CHECK(j["bias_bound"].get<double>() >= 0.0);
  CHECK(j["theta"].is_number());
}

TEST_CASE("simulate writes its replication outputs") {
  TempDir t;
  RunConfig c;
  c.command = "simulate";
  c.seed = 5;
  c.output = t.file("sim.json");
  c.sbm.J = 8;
  c.sbm.N = 120;
  c.reps = 100;
  c.cv_draws = 5000;
  const Json r = run(c);
  CHECK(r["simulation"]["reps"] == 100);
  CHECK(fs::exists(r["simulation"]["replications_csv"].get<std::string>()));
  CHECK(fs::exists(r["simulation"]["summary_json"].get<std::string>()));
}

TEST_CASE("exit codes of the command-line tool") {
  TempDir t;
  const std::string csv = write_fixture(t.file("panel.csv"));
  const std::string cli = KSS_CLI_PATH;
  auto rc = [&](const std::string& args) {
    const int s = std::system((cli + " " + args + " > /dev/null 2>&1").c_str());
    return WIFEXITED(s) ? WEXITSTATUS(s) : -1;
  };
  CHECK(rc("") == 2);
  CHECK(rc("estimate " + csv + " --model fd --estimand var_firm -o " + t.file("r.json")) == 0);
  CHECK(fs::exists(t.file("r.json")));
  CHECK(rc("estimate /nonexistent.csv") == 2);
  CHECK(rc("infer " + csv) == 2);
  CHECK(rc("simulate --reps 100") == 2);
  CHECK(rc("estimate " + csv + " --model bogus") == 2);
}
