#include "bruno/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "bruno/errors.hpp"

namespace bruno {

namespace {
std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
}  // namespace

void KvConfig::set_double(const std::string& k, double v) { values[k] = fmt_double(v); }
void KvConfig::set_int(const std::string& k, long long v) { values[k] = std::to_string(v); }

const std::string& KvConfig::get(const std::string& k) const {
  auto it = values.find(k);
  if (it == values.end()) throw DomainError("config key missing: " + k);
  return it->second;
}

double KvConfig::get_double(const std::string& k) const {
  const std::string& s = get(k);
  std::size_t pos = 0;
  const double v = std::stod(s, &pos);
  if (pos != s.size()) throw DomainError("config key " + k + ": bad number '" + s + "'");
  return v;
}

long long KvConfig::get_int(const std::string& k) const {
  const std::string& s = get(k);
  std::size_t pos = 0;
  const long long v = std::stoll(s, &pos);
  if (pos != s.size()) throw DomainError("config key " + k + ": bad integer '" + s + "'");
  return v;
}

bool KvConfig::get_bool(const std::string& k) const {
  const std::string& s = get(k);
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw DomainError("config key " + k + ": bad boolean '" + s + "'");
}

std::string KvConfig::serialize() const {
  std::string out;
  for (const auto& [k, v] : values) {
    out += k;
    out += '=';
    out += v;
    out += '\n';
  }
  return out;
}

KvConfig KvConfig::parse(const std::string& text) {
  KvConfig cfg;
  std::istringstream in(text);
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    // strip leading whitespace
    std::size_t b = line.find_first_not_of(" \t");
    if (b == std::string::npos) continue;
    if (line[b] == '#') continue;
    const std::size_t eq = line.find('=', b);
    if (eq == std::string::npos)
      throw DomainError("config line " + std::to_string(lineno) + ": expected key=value");
    std::string key = line.substr(b, eq - b);
    while (!key.empty() && (key.back() == ' ' || key.back() == '\t')) key.pop_back();
    std::string val = line.substr(eq + 1);
    std::size_t vb = val.find_first_not_of(" \t");
    val = vb == std::string::npos ? "" : val.substr(vb);
    while (!val.empty() && (val.back() == ' ' || val.back() == '\t')) val.pop_back();
    if (key.empty()) throw DomainError("config line " + std::to_string(lineno) + ": empty key");
    cfg.values[key] = val;
  }
  return cfg;
}

KvConfig KvConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

void KvConfig::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw Error("cannot write config file: " + path);
  out << serialize();
}

void validate(const TrainConfig& c) {
  if (c.seq_len < 2) throw ConstraintViolation("train config: seq_len must be >= 2");
  if (!(c.learning_rate > 0)) throw ConstraintViolation("train config: learning_rate must be > 0");
  if (c.batch_size < 1) throw ConstraintViolation("train config: batch_size must be >= 1");
  if (c.threads < 1) throw ConstraintViolation("train config: threads must be >= 1");
}

KvConfig to_kv(const ModelConfig& m) {
  KvConfig kv;
  kv.set_int("dim", m.dim);
  kv.set_int("depth", m.depth);
  kv.set_int("hidden", m.hidden);
  kv.set("mode", to_string(m.mode));
  kv.set_bool("weightnorm", m.weightnorm);
  kv.set_double("alpha", m.pre.alpha);
  kv.set_int("num_levels", m.pre.num_levels);
  kv.set_bool("dequantize", m.pre.dequantize);
  kv.set_bool("logit", m.pre.logit);
  kv.set_double("init_nu", m.init_nu);
  kv.set_double("init_v", m.init_v);
  kv.set_double("init_rho", m.init_rho);
  return kv;
}

KvConfig to_kv(const TrainConfig& t) {
  KvConfig kv;
  kv.set_int("batch_size", t.batch_size);
  kv.set_int("seq_len", t.seq_len);
  kv.set_double("learning_rate", t.learning_rate);
  kv.set_double("process_lr_factor", t.process_lr_factor);
  kv.set_double("rmsprop_decay", t.rmsprop_decay);
  kv.set_double("rmsprop_eps", t.rmsprop_eps);
  kv.set_int("iterations", t.iterations);
  kv.set_int("seed", (long long)t.seed);
  kv.set_int("threads", t.threads);
  kv.set_bool("lr_decay", t.lr_decay);
  kv.set_bool("train_nu", t.train_nu);
  return kv;
}

namespace {
ProcessMode mode_from_string(const std::string& s) {
  if (s == "studentt") return ProcessMode::StudentT;
  if (s == "gaussian") return ProcessMode::Gaussian;
  throw DomainError("unknown process mode: " + s);
}
}  // namespace

void apply_kv(ModelConfig& m, const KvConfig& kv) {
  if (kv.has("dim")) m.dim = int(kv.get_int("dim"));
  if (kv.has("depth")) m.depth = int(kv.get_int("depth"));
  if (kv.has("hidden")) m.hidden = int(kv.get_int("hidden"));
  if (kv.has("mode")) m.mode = mode_from_string(kv.get("mode"));
  if (kv.has("weightnorm")) m.weightnorm = kv.get_bool("weightnorm");
  if (kv.has("alpha")) m.pre.alpha = kv.get_double("alpha");
  if (kv.has("num_levels")) m.pre.num_levels = int(kv.get_int("num_levels"));
  if (kv.has("dequantize")) m.pre.dequantize = kv.get_bool("dequantize");
  if (kv.has("logit")) m.pre.logit = kv.get_bool("logit");
  if (kv.has("init_nu")) m.init_nu = kv.get_double("init_nu");
  if (kv.has("init_v")) m.init_v = kv.get_double("init_v");
  if (kv.has("init_rho")) m.init_rho = kv.get_double("init_rho");
}

void apply_kv(TrainConfig& t, const KvConfig& kv) {
  if (kv.has("batch_size")) t.batch_size = kv.get_int("batch_size");
  if (kv.has("seq_len")) t.seq_len = kv.get_int("seq_len");
  if (kv.has("learning_rate")) t.learning_rate = kv.get_double("learning_rate");
  if (kv.has("process_lr_factor")) t.process_lr_factor = kv.get_double("process_lr_factor");
  if (kv.has("rmsprop_decay")) t.rmsprop_decay = kv.get_double("rmsprop_decay");
  if (kv.has("rmsprop_eps")) t.rmsprop_eps = kv.get_double("rmsprop_eps");
  if (kv.has("iterations")) t.iterations = kv.get_int("iterations");
  if (kv.has("seed")) t.seed = std::uint64_t(kv.get_int("seed"));
  if (kv.has("threads")) t.threads = int(kv.get_int("threads"));
  if (kv.has("lr_decay")) t.lr_decay = kv.get_bool("lr_decay");
  if (kv.has("train_nu")) t.train_nu = kv.get_bool("train_nu");
}

ModelConfig model_config_from_kv(const KvConfig& kv) {
  ModelConfig m;
  m.dim = int(kv.get_int("dim"));  // required; everything else may default
  apply_kv(m, kv);
  return m;
}

TrainConfig train_config_from_kv(const KvConfig& kv) {
  TrainConfig t;
  apply_kv(t, kv);
  return t;
}

}  // namespace bruno
