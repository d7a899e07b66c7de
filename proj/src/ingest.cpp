#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <utility>

#include "kss/cli.hpp"
#include "kss/error.hpp"

namespace kss {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

// Splits one CSV record; double quotes protect commas and "" is a literal quote.
std::vector<std::string> split_csv(const std::string& line, long lineno) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (quoted) fail_validation("ParseError", "line " + std::to_string(lineno) + ": unterminated quote");
  out.push_back(trim(cur));
  return out;
}

double parse_double(const std::string& s, long lineno, const std::string& col) {
  double v = 0.0;
  const char* b = s.data();
  const char* e = b + s.size();
  auto r = std::from_chars(b, e, v);
  if (s.empty() || r.ec != std::errc() || r.ptr != e || !std::isfinite(v)) {
    fail_validation("ParseError", "line " + std::to_string(lineno) + ": bad " + col + " '" + s + "'");
  }
  return v;
}

int parse_int(const std::string& s, long lineno, const std::string& col) {
  int v = 0;
  const char* b = s.data();
  const char* e = b + s.size();
  auto r = std::from_chars(b, e, v);
  if (s.empty() || r.ec != std::errc() || r.ptr != e) {
    fail_validation("ParseError", "line " + std::to_string(lineno) + ": bad " + col + " '" + s + "'");
  }
  return v;
}

}  // namespace

Panel ingest_csv(std::istream& in, const std::string& source) {
  std::string line;
  long lineno = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++lineno;
    if (!trim(line).empty()) {
      header = split_csv(line, lineno);
      break;
    }
  }
  if (header.empty()) fail_validation("EmptyPanel", source + " has no header");
  if (!header.empty() && header[0].rfind("\xEF\xBB\xBF", 0) == 0) header[0] = header[0].substr(3);
  const std::vector<std::string> required = {"worker_id", "firm_id", "period", "outcome"};
  std::map<std::string, int> pos;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (pos.count(header[c])) fail_validation("ParseError", "line " + std::to_string(lineno) + ": duplicate column " + header[c]);
    pos[header[c]] = static_cast<int>(c);
  }
  for (const auto& r : required) {
    if (!pos.count(r)) fail_validation("MissingColumn", source + " lacks column '" + r + "'");
  }
  Panel p;
  std::vector<int> cov_cols;
  for (std::size_t c = 0; c < header.size(); ++c) {
    const auto& h = header[c];
    if (h == "worker_id" || h == "firm_id" || h == "period" || h == "outcome") continue;
    if (h.rfind("covariate_", 0) != 0) {
      fail_validation("ParseError", "line " + std::to_string(lineno) + ": unexpected column '" + h + "'");
    }
    cov_cols.push_back(static_cast<int>(c));
    p.covariate_names.push_back(h.substr(10));
  }
  std::map<std::pair<std::string, int>, long> seen;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto f = split_csv(line, lineno);
    if (f.size() != header.size()) {
      fail_validation("ParseError", "line " + std::to_string(lineno) + ": expected " + std::to_string(header.size()) +
                                        " fields, found " + std::to_string(f.size()));
    }
    Observation o;
    o.worker_id = f[pos["worker_id"]];
    o.firm_id = f[pos["firm_id"]];
    if (o.worker_id.empty() || o.firm_id.empty()) {
      fail_validation("ParseError", "line " + std::to_string(lineno) + ": empty id");
    }
    o.period = parse_int(f[pos["period"]], lineno, "period");
    o.outcome = parse_double(f[pos["outcome"]], lineno, "outcome");
    for (int c : cov_cols) o.covariates.push_back(parse_double(f[c], lineno, header[c]));
    auto [it, fresh] = seen.emplace(std::make_pair(o.worker_id, o.period), lineno);
    if (!fresh) {
      fail_validation("DuplicateObservation", "line " + std::to_string(lineno) + ": worker " + o.worker_id +
                                                  " period " + std::to_string(o.period) + " already on line " +
                                                  std::to_string(it->second));
    }
    p.rows.push_back(std::move(o));
  }
  if (p.rows.empty()) fail_validation("EmptyPanel", source + " has no observations");
  p.index();
  return p;
}

Panel ingest_csv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail_validation("IoError", "cannot open " + path);
  return ingest_csv(in, path);
}

}  // namespace kss
