// Command-line surface: train / sample / fewshot / finetune / anomaly /
// analyze / selftest. Exit codes: 0 success, 1 runtime error, 2 usage error.

#include <CLI11.hpp>
#include <cstdio>
#include <iostream>
#include <string>

#include "bruno/checkpoint.hpp"
#include "bruno/idx.hpp"
#include "bruno/image.hpp"
#include "bruno/model.hpp"
#include "bruno/report.hpp"
#include "bruno/selftest.hpp"
#include "bruno/tasks.hpp"

namespace {

using Scalar = float;  // training and inference run at 32-bit
using Model = bruno::BrunoModel<Scalar>;
using Mat = bruno::MatX<Scalar>;

struct DataOpts {
  std::string images, labels;
  bool rotate = false;
  bool synth = false;
  double synth_rho = 0.3;
  int synth_dims = 8;
  int synth_classes = 5;
  int synth_per_class = 64;
  double synth_spacing = 2.0;
  std::uint64_t synth_seed = 1;
  bool standardize = false;
};

void add_data_opts(CLI::App* cmd, DataOpts& d) {
  auto* images = cmd->add_option("--images", d.images, "IDX image file");
  cmd->add_option("--labels", d.labels, "IDX label file")->needs(images);
  cmd->add_flag("--rotate", d.rotate, "augment with 90-degree rotations");
  auto* synth = cmd->add_flag("--synth", d.synth, "use a synthetic exchangeable dataset");
  cmd->add_option("--synth-rho", d.synth_rho, "within-class covariance")->needs(synth);
  cmd->add_option("--synth-dims", d.synth_dims)->needs(synth);
  cmd->add_option("--synth-classes", d.synth_classes)->needs(synth);
  cmd->add_option("--synth-per-class", d.synth_per_class)->needs(synth);
  cmd->add_option("--synth-spacing", d.synth_spacing, "class mean grid spacing")->needs(synth);
  cmd->add_option("--synth-seed", d.synth_seed)->needs(synth);
  cmd->add_flag("--standardize", d.standardize, "standardize each dimension");
  images->excludes(synth);
}

bruno::Dataset load_data(const DataOpts& d) {
  bruno::Dataset ds;
  if (d.synth) {
    ds = bruno::synth_exchangeable(d.synth_rho, d.synth_dims, d.synth_classes,
                                   d.synth_per_class, d.synth_seed, d.synth_spacing);
  } else if (!d.images.empty()) {
    if (d.labels.empty()) throw CLI::ValidationError("--images requires --labels");
    ds = bruno::load_idx(d.images, d.labels, d.rotate);
  } else {
    throw CLI::ValidationError("no data source: pass --images/--labels or --synth");
  }
  if (d.standardize) bruno::standardize(ds);
  return ds;
}

Mat preprocess_all(const bruno::Dataset& ds, const bruno::PreprocessConfig& pre,
                   std::uint64_t seed) {
  Mat out(ds.dim(), ds.size());
  bruno::Rng rng(seed);
  for (long i = 0; i < ds.size(); ++i) {
    if (pre.dequantize)
      out.col(i) = bruno::dequantize(ds.items.col(i), pre, rng).cast<Scalar>();
    else
      out.col(i) = ds.items.col(i).cast<Scalar>();
  }
  return out;
}

int cmd_train(const std::string& config_path, const bruno::KvConfig& overrides,
              const DataOpts& data_opts, const std::string& out_path,
              const std::string& loss_csv, bool wn_init) {
  bruno::ModelConfig mc;
  bruno::TrainConfig tc;
  if (!config_path.empty()) {
    const auto kv = bruno::KvConfig::load(config_path);
    bruno::apply_kv(mc, kv);
    bruno::apply_kv(tc, kv);
  }
  bruno::apply_kv(mc, overrides);
  bruno::apply_kv(tc, overrides);

  const bruno::Dataset ds = load_data(data_opts);
  if (mc.dim == 0) mc.dim = int(ds.dim());
  Model model = bruno::make_model<Scalar>(mc, tc.seed);

  if (wn_init) {
    // data-dependent weightnorm initialization on one preprocessed batch
    const long count = std::min<long>(ds.size(), std::max<long>(64, tc.batch_size));
    Mat batch(ds.dim(), count);
    bruno::Rng noise(tc.seed ^ 0x77u);
    for (long i = 0; i < count; ++i) {
      const long pick = long(noise.below(std::uint64_t(ds.size())));
      if (mc.pre.dequantize)
        batch.col(i) = bruno::dequantize(ds.items.col(pick), mc.pre, noise).cast<Scalar>();
      else
        batch.col(i) = ds.items.col(pick).cast<Scalar>();
    }
    bruno::weightnorm_init(model.flow, batch);
  }

  std::vector<double> trace;
  try {
    trace = bruno::train(model, ds, tc).loss_trace;
  } catch (const bruno::Diverged& e) {
    if (!loss_csv.empty()) bruno::write_loss_csv(loss_csv, e.trace);
    throw;
  }
  if (!loss_csv.empty()) bruno::write_loss_csv(loss_csv, trace);

  bruno::Checkpoint<Scalar> ckpt;
  ckpt.model = model;
  ckpt.rng_state = bruno::Rng(tc.seed).state();
  ckpt.iteration = std::uint64_t(tc.iterations);
  bruno::save_checkpoint(ckpt, out_path);
  if (!trace.empty())
    std::printf("trained %ld iterations, final loss %.6f nats/dim\n", tc.iterations,
                trace.back());
  std::printf("checkpoint written to %s\n", out_path.c_str());
  return 0;
}

int cmd_sample(const std::string& ckpt_path, const DataOpts& data_opts, int cond_class,
               long cond_count, long rows, long cols, std::uint64_t seed,
               const std::string& out_path, int channels) {
  Model model = bruno::load_checkpoint<Scalar>(ckpt_path).model;
  bruno::Rng rng(seed);

  Mat cond(model.dim(), 0);
  if (!data_opts.images.empty() || data_opts.synth) {
    const bruno::Dataset ds = load_data(data_opts);
    std::vector<int> pick;
    for (long i = 0; i < ds.size() && long(pick.size()) < cond_count; ++i)
      if (cond_class < 0 || ds.labels[std::size_t(i)] == cond_class) pick.push_back(int(i));
    cond.resize(model.dim(), long(pick.size()));
    bruno::Rng noise(seed ^ 0x5eedu);
    for (std::size_t j = 0; j < pick.size(); ++j) {
      if (model.config.pre.dequantize)
        cond.col(long(j)) =
            bruno::dequantize(ds.items.col(pick[j]), model.config.pre, noise).cast<Scalar>();
      else
        cond.col(long(j)) = ds.items.col(pick[j]).cast<Scalar>();
    }
  }

  Eigen::MatrixXd grid;
  if (cond.cols() == 0) {
    const Mat samples = bruno::sample_conditional(model, cond, rows * cols, rng);
    grid = samples.cast<double>();
  } else {
    // top row the inputs (first cell blank), then `rows` rows where column
    // j holds samples conditioned on the first j inputs (column 0 = prior)
    const long n = cond.cols();
    cols = n + 1;
    grid.resize(model.dim(), (rows + 1) * cols);
    grid.setZero();
    for (long j = 0; j < n; ++j) grid.col(j + 1) = cond.col(j).cast<double>();
    for (long j = 0; j <= n; ++j) {
      const Mat samples = bruno::sample_conditional(model, Mat(cond.leftCols(j)), rows, rng);
      for (long r = 0; r < rows; ++r)
        grid.col((r + 1) * cols + j) = samples.col(r).cast<double>();
    }
    rows = rows + 1;
  }
  bruno::emit_grid(grid, rows, cols, out_path, channels);
  std::printf("sample grid written to %s\n", out_path.c_str());
  return 0;
}

Model model_for_eval(const std::string& ckpt_path, const bruno::KvConfig& overrides,
                     const bruno::Dataset& ds, std::uint64_t seed) {
  if (!ckpt_path.empty()) return bruno::load_checkpoint<Scalar>(ckpt_path).model;
  bruno::ModelConfig mc;
  bruno::apply_kv(mc, overrides);
  if (mc.dim == 0) mc.dim = int(ds.dim());
  return bruno::make_model<Scalar>(mc, seed);
}

int cmd_fewshot(const std::string& ckpt_path, const bruno::KvConfig& overrides,
                const DataOpts& data_opts, long n, long k, long episodes,
                std::uint64_t seed) {
  const bruno::Dataset ds = load_data(data_opts);
  const Model model = model_for_eval(ckpt_path, overrides, ds, seed);
  const auto res = bruno::few_shot_eval(model, ds, n, k, episodes, seed);
  std::printf("accuracy %.4f +/- %.4f (95%% CI), %ld/%ld episodes, %ld-shot %ld-way\n",
              res.accuracy, bruno::binomial_ci(res.accuracy, res.episodes), res.correct,
              res.episodes, n, k);
  return 0;
}

int cmd_finetune(const std::string& ckpt_path, const bruno::KvConfig& overrides,
                 const DataOpts& data_opts, long n, long k, const std::string& out_path,
                 const std::string& loss_csv) {
  bruno::TrainConfig tc;
  tc.batch_size = 8;
  tc.learning_rate = 1e-4;
  bruno::apply_kv(tc, overrides);
  const bruno::Dataset ds = load_data(data_opts);
  Model model = bruno::load_checkpoint<Scalar>(ckpt_path).model;
  const auto result = bruno::discriminative_finetune(model, ds, n, k, tc);
  if (!loss_csv.empty()) bruno::write_loss_csv(loss_csv, result.loss_trace);
  bruno::Checkpoint<Scalar> ckpt;
  ckpt.model = model;
  ckpt.rng_state = bruno::Rng(tc.seed).state();
  ckpt.iteration = std::uint64_t(tc.iterations);
  bruno::save_checkpoint(ckpt, out_path);
  if (!result.loss_trace.empty())
    std::printf("fine-tuned %ld iterations, final episode loss %.6f\n", tc.iterations,
                result.loss_trace.back());
  std::printf("checkpoint written to %s\n", out_path.c_str());
  return 0;
}

int cmd_anomaly(const std::string& ckpt_path, const DataOpts& data_opts,
                const std::string& out_path, double threshold, bool has_threshold,
                std::uint64_t seed) {
  const bruno::Dataset ds = load_data(data_opts);
  const Model model = bruno::load_checkpoint<Scalar>(ckpt_path).model;
  const Mat stream = preprocess_all(ds, model.config.pre, seed);
  const auto trace = bruno::anomaly_score(
      model, stream, has_threshold ? std::optional<double>(threshold) : std::nullopt);
  bruno::write_score_csv(out_path, trace);
  std::printf("score trace (%zu items) written to %s\n", trace.log_scores.size(),
              out_path.c_str());
  return 0;
}

int cmd_analyze(const std::string& ckpt_path, const std::string& out_path) {
  const Model model = bruno::load_checkpoint<Scalar>(ckpt_path).model;
  const auto report = bruno::latent_analysis(model);
  bruno::write_latent_csv(out_path, report);
  std::printf("latent parameter table (%zu dimensions) written to %s\n", report.rows.size(),
              out_path.c_str());
  return 0;
}

int cmd_selftest() {
  int fails = 0;
  for (const auto& r : bruno::run_selftest()) {
    std::printf("[%s] %s: %s\n", r.pass ? "PASS" : "FAIL", r.name.c_str(), r.detail.c_str());
    if (!r.pass) ++fails;
  }
  return fails == 0 ? 0 : 1;
}

// model/train keys accepted directly as CLI flags (underscores -> dashes)
void add_override_opts(CLI::App* cmd, bruno::KvConfig& kv) {
  static const char* keys[] = {
      "dim",         "depth",       "hidden",            "mode",
      "weightnorm",  "alpha",       "num_levels",        "dequantize",
      "logit",       "init_nu",     "init_v",            "init_rho",
      "batch_size",  "seq_len",     "learning_rate",     "process_lr_factor",
      "rmsprop_decay", "rmsprop_eps", "iterations",      "seed",
      "threads",     "lr_decay",    "train_nu"};
  for (const char* key : keys) {
    std::string flag = "--";
    for (const char* p = key; *p; ++p) flag += *p == '_' ? '-' : *p;
    cmd->add_option_function<std::string>(
        flag, [&kv, key](const std::string& v) { kv.set(key, v); });
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"BRUNO: recurrent exchangeable sequence model"};
  app.require_subcommand(1);

  auto* train = app.add_subcommand("train", "train a model, write checkpoint + loss CSV");
  std::string train_config, train_out = "model.ckpt", train_loss_csv;
  bruno::KvConfig train_overrides;
  DataOpts train_data;
  bool train_wn_init = false;
  train->add_option("--config", train_config, "key=value config file");
  train->add_option("--out", train_out, "output checkpoint path");
  train->add_option("--loss-csv", train_loss_csv, "loss trace CSV path");
  train->add_flag("--wn-init", train_wn_init, "data-dependent weightnorm initialization");
  add_override_opts(train, train_overrides);
  add_data_opts(train, train_data);

  auto* sample = app.add_subcommand("sample", "draw (conditional) samples into a PGM/PPM grid");
  std::string sample_ckpt, sample_out = "samples.pgm";
  DataOpts sample_data;
  int sample_class = -1, sample_channels = 1;
  long sample_cond = 0, sample_rows = 4, sample_cols = 4;
  std::uint64_t sample_seed = 0;
  sample->add_option("--ckpt", sample_ckpt)->required();
  sample->add_option("--out", sample_out);
  sample->add_option("--class", sample_class, "conditioning class label");
  sample->add_option("--cond-count", sample_cond, "number of conditioning items");
  sample->add_option("--rows", sample_rows);
  sample->add_option("--cols", sample_cols);
  sample->add_option("--channels", sample_channels)->check(CLI::IsMember({1, 3}));
  sample->add_option("--seed", sample_seed);
  add_data_opts(sample, sample_data);

  auto* fewshot = app.add_subcommand("fewshot", "n-shot k-way episodic accuracy");
  std::string fewshot_ckpt;
  bruno::KvConfig fewshot_overrides;
  DataOpts fewshot_data;
  long fs_n = 1, fs_k = 5, fs_episodes = 1000;
  fewshot->add_option("--ckpt", fewshot_ckpt);
  fewshot->add_option("--n", fs_n, "shots per class");
  fewshot->add_option("--k", fs_k, "way count");
  fewshot->add_option("--episodes", fs_episodes);
  add_override_opts(fewshot, fewshot_overrides);
  add_data_opts(fewshot, fewshot_data);

  auto* finetune = app.add_subcommand("finetune", "discriminative episode fine-tuning");
  std::string ft_ckpt, ft_out = "finetuned.ckpt", ft_loss_csv;
  bruno::KvConfig ft_overrides;
  DataOpts ft_data;
  long ft_n = 1, ft_k = 5;
  finetune->add_option("--ckpt", ft_ckpt)->required();
  finetune->add_option("--out", ft_out);
  finetune->add_option("--loss-csv", ft_loss_csv);
  finetune->add_option("--n", ft_n);
  finetune->add_option("--k", ft_k);
  add_override_opts(finetune, ft_overrides);
  add_data_opts(finetune, ft_data);

  auto* anomaly = app.add_subcommand("anomaly", "score a stream, write ScoreTrace CSV");
  std::string an_ckpt, an_out = "scores.csv";
  DataOpts an_data;
  double an_threshold = 0;
  std::uint64_t an_seed = 0;
  anomaly->add_option("--ckpt", an_ckpt)->required();
  anomaly->add_option("--out", an_out);
  auto* thr = anomaly->add_option("--threshold", an_threshold, "flag scores below this");
  anomaly->add_option("--seed", an_seed);
  add_data_opts(anomaly, an_data);

  auto* analyze = app.add_subcommand("analyze", "per-dimension latent parameter CSV");
  std::string az_ckpt, az_out = "latent.csv";
  analyze->add_option("--ckpt", az_ckpt)->required();
  analyze->add_option("--out", az_out);

  app.add_subcommand("selftest", "oracle-equivalence and gradient-check suites");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (app.got_subcommand("train"))
      return cmd_train(train_config, train_overrides, train_data, train_out,
                       train_loss_csv, train_wn_init);
    if (app.got_subcommand("sample"))
      return cmd_sample(sample_ckpt, sample_data, sample_class, sample_cond, sample_rows,
                        sample_cols, sample_seed, sample_out, sample_channels);
    if (app.got_subcommand("fewshot")) {
      const std::uint64_t fs_seed =
          fewshot_overrides.has("seed")
              ? std::uint64_t(fewshot_overrides.get_int("seed"))
              : 0;
      return cmd_fewshot(fewshot_ckpt, fewshot_overrides, fewshot_data, fs_n, fs_k,
                         fs_episodes, fs_seed);
    }
    if (app.got_subcommand("finetune"))
      return cmd_finetune(ft_ckpt, ft_overrides, ft_data, ft_n, ft_k, ft_out, ft_loss_csv);
    if (app.got_subcommand("anomaly"))
      return cmd_anomaly(an_ckpt, an_data, an_out, an_threshold, thr->count() > 0, an_seed);
    if (app.got_subcommand("analyze")) return cmd_analyze(az_ckpt, az_out);
    if (app.got_subcommand("selftest")) return cmd_selftest();
  } catch (const CLI::ValidationError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
