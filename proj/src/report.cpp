#include "bruno/report.hpp"

#include <cstdio>
#include <fstream>

#include "bruno/errors.hpp"

namespace bruno {

namespace {
std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write csv file: " + path);
  return out;
}
}  // namespace

void write_loss_csv(const std::string& path, const std::vector<double>& trace) {
  auto out = open_out(path);
  out << "iteration,loss\n";
  for (std::size_t i = 0; i < trace.size(); ++i) out << i << "," << num(trace[i]) << "\n";
}

void write_score_csv(const std::string& path, const ScoreTrace& trace) {
  auto out = open_out(path);
  out << "index,log_score,flag\n";
  for (std::size_t i = 0; i < trace.log_scores.size(); ++i)
    out << i << "," << num(trace.log_scores[i]) << "," << int(trace.flags[i]) << "\n";
}

void write_latent_csv(const std::string& path, const LatentReport& report) {
  auto out = open_out(path);
  out << "dim,nu,v,rho,correlation\n";
  for (const auto& r : report.rows)
    out << r.dim << "," << num(r.nu) << "," << num(r.v) << "," << num(r.rho) << ","
        << num(r.correlation) << "\n";
  out << "\nepsilon,dims_above\n";
  for (const auto& [eps, count] : report.exceedance) out << num(eps) << "," << count << "\n";
}

}  // namespace bruno
