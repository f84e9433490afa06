#pragma once

// Flat key=value configuration: trivially parseable, diff-friendly, and
// exactly round-trippable (doubles are printed with max_digits10).

#include <cstdint>
#include <map>
#include <string>

#include "bruno/flow.hpp"
#include "bruno/process.hpp"

namespace bruno {

struct KvConfig {
  std::map<std::string, std::string> values;

  bool has(const std::string& k) const { return values.count(k) != 0; }
  void set(const std::string& k, const std::string& v) { values[k] = v; }
  void set_double(const std::string& k, double v);
  void set_int(const std::string& k, long long v);
  void set_bool(const std::string& k, bool v) { values[k] = v ? "true" : "false"; }

  const std::string& get(const std::string& k) const;
  double get_double(const std::string& k) const;
  long long get_int(const std::string& k) const;
  bool get_bool(const std::string& k) const;

  std::string serialize() const;       // "key=value\n" lines, sorted by key
  static KvConfig parse(const std::string& text);
  static KvConfig load(const std::string& path);
  void save(const std::string& path) const;

  bool operator==(const KvConfig&) const = default;
};

struct ModelConfig {
  int dim = 0;
  int depth = 6;
  int hidden = 128;  // desk-scale default; 1024 reproduces the full setup
  ProcessMode mode = ProcessMode::StudentT;
  bool weightnorm = true;
  PreprocessConfig pre;
  double init_nu = 1000.0;
  double init_v = 1.0;
  double init_rho = 0.1;

  bool operator==(const ModelConfig&) const = default;
};

struct TrainConfig {
  long batch_size = 32;
  long seq_len = 20;
  double learning_rate = 1e-3;
  double process_lr_factor = 0.1;  // process params update 10x slower
  double rmsprop_decay = 0.9;
  double rmsprop_eps = 1e-8;
  long iterations = 0;
  std::uint64_t seed = 0;
  int threads = 1;
  bool lr_decay = true;  // halve every ceil(iterations/3) steps
  bool train_nu = true;

  bool operator==(const TrainConfig&) const = default;
};

void validate(const TrainConfig& c);

KvConfig to_kv(const ModelConfig& m);
KvConfig to_kv(const TrainConfig& t);
ModelConfig model_config_from_kv(const KvConfig& kv);
TrainConfig train_config_from_kv(const KvConfig& kv);

// Apply only the keys present (for partial config files with CLI overrides).
void apply_kv(ModelConfig& m, const KvConfig& kv);
void apply_kv(TrainConfig& t, const KvConfig& kv);

}  // namespace bruno
