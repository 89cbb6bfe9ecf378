// Command-line entry points: dataset generation, metric precomputation,
// training, direct matching, evaluation and report emission.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "pnp/dataset.hpp"
#include "pnp/encoder.hpp"
#include "pnp/matcher.hpp"
#include "pnp/parallel.hpp"
#include "pnp/reports.hpp"

namespace fs = std::filesystem;
using namespace pnp;

namespace {

void require_writable(const std::string& path, bool overwrite) {
  if (fs::exists(path) && !overwrite) {
    throw std::runtime_error(path + " exists; pass --overwrite to replace it");
  }
}

FilterBankConfig config_for(const DatasetManifest& manifest) {
  FilterBankConfig cfg;
  cfg.sample_rate = manifest.sample_rate;
  return cfg;
}

std::vector<Split> parse_splits(const std::string& csv) {
  std::vector<Split> splits;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) splits.push_back(split_from_name(item));
  }
  if (splits.empty()) throw std::runtime_error("no splits selected");
  return splits;
}

std::string format_theta(const NormalizedTheta& theta) {
  std::ostringstream s;
  for (int i = 0; i < theta.dim(); ++i) {
    if (i) s << ",";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", theta.values[i]);
    s << buf;
  }
  return s.str();
}

int cmd_dataset(int n, std::uint64_t seed, const std::string& out_dir, bool pitch_known,
                double duration, double sample_rate, int mode_limit, bool overwrite) {
  DatasetOptions opts;
  opts.n = n;
  opts.seed = seed;
  opts.pitch_known = pitch_known;
  opts.duration = duration;
  opts.sample_rate = sample_rate;
  opts.mode_limit = mode_limit;
  opts.overwrite = overwrite;
  FilterBankConfig cfg;
  cfg.sample_rate = sample_rate;
  FeatureExtractor extractor(cfg);
  const DatasetManifest manifest = generate_dataset(out_dir, opts, extractor);
  std::cout << "dataset: " << manifest.n << " samples in " << out_dir << " ("
            << manifest.redraws << " redraws, pitch "
            << (pitch_known ? "known" : "unknown") << ")\n";
  return 0;
}

int cmd_metrics(const std::string& dataset_dir, std::string cache_path,
                std::string eigs_path, double fd_step, const std::string& splits_csv,
                bool overwrite) {
  const DatasetManifest manifest = load_manifest(dataset_dir);
  if (cache_path.empty()) cache_path = (fs::path(dataset_dir) / "metrics.pnpm").string();
  if (eigs_path.empty()) {
    eigs_path = (fs::path(dataset_dir) / "eigenvalues.csv").string();
  }
  require_writable(cache_path, overwrite);
  require_writable(eigs_path, overwrite);
  FeatureExtractor extractor(config_for(manifest));
  const MetricJobReport report = compute_metric_cache(
      manifest, extractor, fd_step, parse_splits(splits_csv), cache_path, eigs_path);
  std::cout << "metrics: " << report.n_ok << " records -> " << cache_path << "\n";
  for (const auto& [id, what] : report.failures) {
    std::cerr << "metrics: sample " << id << " failed: " << what << "\n";
  }
  return report.failures.empty() ? 0 : 1;
}

int cmd_train(const std::string& dataset_dir, const std::string& loss_name,
              std::string cache_path, TrainConfig config, const std::string& out_path,
              std::string log_path, bool overwrite) {
  const DatasetManifest manifest = load_manifest(dataset_dir);
  require_writable(out_path, overwrite);
  if (log_path.empty()) log_path = out_path + ".log.csv";
  require_writable(log_path, overwrite);

  if (loss_name == "p_loss") config.loss = TrainLoss::kPLoss;
  else if (loss_name == "pnp") config.loss = TrainLoss::kPnp;
  else if (loss_name == "spectral_fd") config.loss = TrainLoss::kSpectralFd;
  else throw std::runtime_error("unknown loss: " + loss_name);

  const TrainingSet data = load_training_set(manifest, dataset_dir);

  TrainResult result;
  MetricCache cache;
  if (config.loss == TrainLoss::kPnp) {
    if (cache_path.empty()) {
      cache_path = (fs::path(dataset_dir) / "metrics.pnpm").string();
    }
    cache = MetricCache::load(cache_path);
    result = train(data, config, &cache);
  } else if (config.loss == TrainLoss::kPLoss) {
    result = train(data, config, nullptr);
  } else {
    std::cerr << "train: spectral_fd evaluates a finite-difference Jacobian of the "
                 "synthesizer per sample per step; expect several orders of magnitude "
                 "more wall-clock than p_loss/pnp\n";
    FeatureExtractor extractor(config_for(manifest));
    SpectralFdContext ctx;
    ctx.phi_g = make_phi_g(manifest, extractor);
    ctx.includes_pitch = !manifest.pitch_known;
    ctx.fixed_pitch.resize(manifest.samples.size());
    for (std::size_t i = 0; i < manifest.samples.size(); ++i) {
      ctx.fixed_pitch[i] = manifest.samples[i].theta.values[0];
    }
    std::vector<std::size_t> needed;
    needed.insert(needed.end(), data.train_idx.begin(), data.train_idx.end());
    needed.insert(needed.end(), data.val_idx.begin(), data.val_idx.end());
    ctx.target_phi.resize(extractor.jtfs_size(), Eigen::Index(manifest.samples.size()));
    ctx.target_phi.setZero();
    const FeatureFn phi = ctx.phi_g;
    parallel_for(needed.size(), [&](std::size_t k) {
      const std::size_t i = needed[k];
      ctx.target_phi.col(Eigen::Index(i)) =
          phi(manifest.target_theta(manifest.samples[i]));
    });
    result = train_spectral_fd(data, config, ctx);
  }

  double mean_seconds = 0.0;
  for (const EpochLog& e : result.log) mean_seconds += e.seconds;
  if (!result.log.empty()) mean_seconds /= double(result.log.size());

  Checkpoint ckpt;
  ckpt.weights = result.best_weights;
  ckpt.includes_pitch = !manifest.pitch_known;
  ckpt.feature_map_id = manifest.feature_map_id;
  ckpt.loss_label = loss_name;
  ckpt.lambda0 = result.lambda0;
  ckpt.mean_epoch_seconds = mean_seconds;
  ckpt.seed = config.seed;
  save_checkpoint(ckpt, out_path);
  write_train_log_csv(result.log, log_path);
  std::cout << "train: loss=" << loss_name << " best_val=" << result.best_val
            << " (epoch " << result.best_epoch << ") -> " << out_path << "\n";
  return 0;
}

int cmd_match(const std::string& target_path, bool pitch_known, double omega1_hz,
              const std::string& init_csv, std::uint64_t init_seed, int max_iter,
              double fd_step, int mode_limit, const std::string& out_path,
              bool overwrite) {
  const AudioBuffer target = read_wav(target_path);
  FilterBankConfig cfg;
  cfg.sample_rate = target.sample_rate;
  FeatureExtractor extractor(cfg);

  NormalizedTheta init;
  init.includes_pitch = !pitch_known;
  const int j_dim = pitch_known ? 4 : 5;
  init.values = Eigen::VectorXd::Zero(j_dim);
  if (pitch_known) {
    ShapeParams probe;
    probe.omega1_hz = omega1_hz;
    init.fixed_pitch = normalize(probe, true).values[0];
  }
  if (!init_csv.empty()) {
    std::stringstream ss(init_csv);
    std::string item;
    int k = 0;
    while (std::getline(ss, item, ',') && k < j_dim) {
      init.values[k++] = std::stod(item);
    }
    if (k != j_dim) throw std::runtime_error("--init needs " + std::to_string(j_dim) +
                                             " comma-separated values");
  } else {
    Rng rng(init_seed);
    for (int k = 0; k < j_dim; ++k) init.values[k] = rng.uniform(-0.5, 0.5);
  }

  LmOptions opts;
  opts.max_iterations = max_iter;
  opts.fd_step = fd_step;
  SynthOptions synth;
  synth.sample_rate = target.sample_rate;
  synth.mode_limit = mode_limit;

  const MatchResult result = match(target, init, extractor, synth, opts);

  std::ostringstream out;
  out << "converged=" << (result.converged ? 1 : 0) << "\n";
  out << "message=" << result.message << "\n";
  out << "iterations=" << result.iterations << "\n";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", result.residual_norm);
  out << "residual_norm=" << buf << "\n";
  out << "theta_hat=" << format_theta(result.theta_hat) << "\n";
  const ShapeParams shape = denormalize(result.theta_hat);
  out << "omega1_hz=" << shape.omega1_hz << "\n";
  out << "tau1_s=" << shape.tau1_s << "\n";
  out << "p=" << shape.p << "\n";
  out << "D=" << shape.dispersion << "\n";
  out << "alpha=" << shape.alpha << "\n";
  out << "lambda_trace=";
  for (std::size_t i = 0; i < result.lambda_trace.size(); ++i) {
    if (i) out << ",";
    out << result.lambda_trace[i];
  }
  out << "\nloss_trace=";
  for (std::size_t i = 0; i < result.loss_trace.size(); ++i) {
    if (i) out << ",";
    out << result.loss_trace[i];
  }
  out << "\n";
  if (out_path.empty()) {
    std::cout << out.str();
  } else {
    require_writable(out_path, overwrite);
    std::ofstream f(out_path, std::ios::binary);
    f << out.str();
    std::cout << "match: " << (result.converged ? "converged" : "stopped") << " after "
              << result.iterations << " iterations -> " << out_path << "\n";
  }
  return result.converged ? 0 : 2;
}

int cmd_eval(const std::string& dataset_dir, const std::vector<std::string>& ckpt_paths,
             const std::string& predictions_in, const std::string& loss_label_override,
             const std::string& out_path, const std::string& predictions_out,
             bool append, bool overwrite) {
  const DatasetManifest manifest = load_manifest(dataset_dir);
  FeatureExtractor extractor(config_for(manifest));
  if (!append) require_writable(out_path, overwrite);

  std::vector<EvalMetrics> per_run;
  std::string loss_label = loss_label_override;
  std::string phi_label = "---";
  double mean_epoch_seconds = 0.0;

  if (!predictions_in.empty()) {
    const auto rows = read_predictions_csv(predictions_in);
    per_run.push_back(evaluate_predictions(manifest, rows, extractor));
    if (loss_label.empty()) loss_label = "predictions";
  } else {
    if (ckpt_paths.empty()) {
      throw std::runtime_error("eval: pass --checkpoint (repeatable) or --predictions");
    }
    for (const std::string& path : ckpt_paths) {
      const Checkpoint ckpt = load_checkpoint(path);
      const auto rows = predict_test_set(manifest, dataset_dir, ckpt);
      if (!predictions_out.empty()) {
        const std::string pred_path =
            predictions_out + fs::path(path).stem().string() + ".predictions.csv";
        require_writable(pred_path, overwrite);
        write_predictions_csv(rows, pred_path);
      }
      per_run.push_back(evaluate_predictions(manifest, rows, extractor));
      mean_epoch_seconds += ckpt.mean_epoch_seconds;
      if (loss_label.empty()) loss_label = ckpt.loss_label;
      if (ckpt.loss_label == "pnp" || ckpt.loss_label == "spectral_fd") {
        phi_label = "jtfs";
      }
    }
    mean_epoch_seconds /= double(ckpt_paths.size());
  }

  const EvalRow row =
      aggregate_eval(loss_label, phi_label, manifest.pitch_known ? "known" : "unknown",
                     per_run, mean_epoch_seconds);
  write_eval_csv({row}, out_path, append);
  std::cout << "eval: " << loss_label << " jtfs=" << row.jtfs_mean
            << " mss=" << row.mss_mean << " over " << per_run.size() << " run(s) -> "
            << out_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Drum sound-matching toolkit: modal synthesis, scattering features, "
               "Riemannian metrics, encoder training and damped Gauss-Newton matching"};
  app.require_subcommand(1);
  app.set_config("--config");

  try {
    // dataset
    auto* dataset = app.add_subcommand("dataset", "Generate a synthetic drum dataset");
    int n = 1000;
    std::uint64_t seed = 0;
    std::string out_dir;
    bool pitch_known = false;
    double duration = 0.0;
    double sample_rate = kDefaultSampleRate;
    int mode_limit = kDefaultModeLimit;
    bool overwrite = false;
    dataset->add_option("--n", n, "number of samples");
    dataset->add_option("--seed", seed, "RNG seed");
    dataset->add_option("--out", out_dir, "output directory")->required();
    dataset->add_flag("--pitch-known", pitch_known,
                      "hold pitch fixed downstream (J=4 targets)");
    dataset->add_option("--duration", duration, "render duration in seconds (default 2^16 samples)");
    dataset->add_option("--sample-rate", sample_rate, "sample rate in Hz");
    dataset->add_option("--mode-limit", mode_limit, "modes per axis");
    dataset->add_flag("--overwrite", overwrite, "replace an existing dataset");

    // metrics
    auto* metrics = app.add_subcommand("metrics", "Precompute Riemannian metric cache");
    std::string m_dataset, m_cache, m_eigs, m_splits = "train,val,test";
    double fd_step = kDefaultFdStep;
    bool m_overwrite = false;
    metrics->add_option("--dataset", m_dataset, "dataset directory")->required();
    metrics->add_option("--cache", m_cache, "output cache path (default <dataset>/metrics.pnpm)");
    metrics->add_option("--eigs-csv", m_eigs, "eigenvalue CSV path (default <dataset>/eigenvalues.csv)");
    metrics->add_option("--fd-step", fd_step,
                        "finite-difference step in normalized coordinates");
    metrics->add_option("--splits", m_splits, "comma list of splits to cover");
    metrics->add_flag("--overwrite", m_overwrite, "replace existing outputs");

    // train
    auto* train_cmd = app.add_subcommand("train", "Train the encoder");
    std::string t_dataset, t_loss = "p_loss", t_cache, t_out, t_log;
    TrainConfig t_config;
    bool t_overwrite = false;
    int t_batch = -1;
    train_cmd->add_option("--dataset", t_dataset, "dataset directory")->required();
    train_cmd->add_option("--loss", t_loss, "p_loss | pnp | spectral_fd");
    train_cmd->add_option("--cache", t_cache, "metric cache (pnp)");
    train_cmd->add_option("--epochs", t_config.epochs, "training epochs");
    train_cmd->add_option("--batch", t_batch, "batch size (default 256; 64 for spectral_fd)");
    train_cmd->add_option("--lr", t_config.learning_rate, "learning rate");
    train_cmd->add_option("--lambda0", t_config.lambda0,
                          "initial damping (default: largest cached eigenvalue)");
    train_cmd->add_option("--lambda-decay", t_config.lambda_decay,
                          "decay factor on improving validation (1 freezes)");
    train_cmd->add_option("--epoch-fraction", t_config.epoch_fraction,
                          "training-set share per epoch");
    train_cmd->add_option("--seed", t_config.seed, "RNG seed");
    train_cmd->add_option("--hidden", t_config.hidden, "hidden layer sizes");
    train_cmd->add_option("--fd-step", t_config.fd_step, "spectral_fd Jacobian step");
    train_cmd->add_option("--out", t_out, "checkpoint path")->required();
    train_cmd->add_option("--log", t_log, "training log CSV (default <out>.log.csv)");
    train_cmd->add_flag("--overwrite", t_overwrite, "replace existing outputs");

    // match
    auto* match_cmd = app.add_subcommand("match", "Match a target WAV by damped Gauss-Newton");
    std::string target_path, init_csv, match_out;
    bool match_pitch_known = false;
    double omega1 = 200.0;
    std::uint64_t init_seed = 0;
    int max_iter = 200;
    double match_fd = kDefaultFdStep;
    int match_modes = kDefaultModeLimit;
    bool match_overwrite = false;
    match_cmd->add_option("--target", target_path, "target WAV file")->required();
    match_cmd->add_flag("--pitch-known", match_pitch_known, "fix the pitch coordinate");
    match_cmd->add_option("--omega1", omega1, "known fundamental frequency in Hz");
    match_cmd->add_option("--init", init_csv, "comma-separated initial theta");
    match_cmd->add_option("--init-seed", init_seed, "random init seed");
    match_cmd->add_option("--max-iter", max_iter, "iteration cap");
    match_cmd->add_option("--fd-step", match_fd, "Jacobian step");
    match_cmd->add_option("--mode-limit", match_modes, "modes per axis");
    match_cmd->add_option("--out", match_out, "result file (default stdout)");
    match_cmd->add_flag("--overwrite", match_overwrite, "replace an existing result");

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate checkpoints or predictions");
    std::string e_dataset, e_pred_in, e_loss_label, e_out, e_pred_out;
    std::vector<std::string> e_ckpts;
    bool e_append = false, e_overwrite = false;
    eval_cmd->add_option("--dataset", e_dataset, "dataset directory")->required();
    eval_cmd->add_option("--checkpoint", e_ckpts, "checkpoint path (repeat for seeds)");
    eval_cmd->add_option("--predictions", e_pred_in, "predictions CSV instead of checkpoints");
    eval_cmd->add_option("--loss-label", e_loss_label, "row label override");
    eval_cmd->add_option("--out", e_out, "output table CSV")->required();
    eval_cmd->add_option("--predictions-out", e_pred_out,
                         "prefix for per-run prediction CSVs");
    eval_cmd->add_flag("--append", e_append, "append a row to an existing table");
    eval_cmd->add_flag("--overwrite", e_overwrite, "replace existing outputs");

    // report-eigs
    auto* eigs_cmd = app.add_subcommand("report-eigs", "Eigenvalue distribution CSV");
    std::string re_cache, re_out;
    bool re_overwrite = false;
    eigs_cmd->add_option("--cache", re_cache, "metric cache")->required();
    eigs_cmd->add_option("--out", re_out, "output CSV")->required();
    eigs_cmd->add_flag("--overwrite", re_overwrite, "replace an existing report");

    // report-tau
    auto* tau_cmd = app.add_subcommand("report-tau", "Tau-error histogram CSV");
    std::string rt_pred, rt_cache, rt_out;
    std::uint64_t rt_seed = 0;
    bool rt_overwrite = false;
    tau_cmd->add_option("--predictions", rt_pred, "predictions CSV")->required();
    tau_cmd->add_option("--cache", rt_cache, "metric cache")->required();
    tau_cmd->add_option("--out", rt_out, "output CSV")->required();
    tau_cmd->add_option("--seed", rt_seed, "tie-break seed");
    tau_cmd->add_flag("--overwrite", rt_overwrite, "replace an existing report");

    app.parse(argc, argv);

    if (dataset->parsed()) {
      return cmd_dataset(n, seed, out_dir, pitch_known, duration, sample_rate,
                         mode_limit, overwrite);
    }
    if (metrics->parsed()) {
      return cmd_metrics(m_dataset, m_cache, m_eigs, fd_step, m_splits, m_overwrite);
    }
    if (train_cmd->parsed()) {
      if (t_batch > 0) {
        t_config.batch_size = t_batch;
      } else if (t_loss == "spectral_fd") {
        t_config.batch_size = 64;
      }
      return cmd_train(t_dataset, t_loss, t_cache, t_config, t_out, t_log, t_overwrite);
    }
    if (match_cmd->parsed()) {
      return cmd_match(target_path, match_pitch_known, omega1, init_csv, init_seed,
                       max_iter, match_fd, match_modes, match_out, match_overwrite);
    }
    if (eval_cmd->parsed()) {
      return cmd_eval(e_dataset, e_ckpts, e_pred_in, e_loss_label, e_out, e_pred_out,
                      e_append, e_overwrite);
    }
    if (eigs_cmd->parsed()) {
      require_writable(re_out, re_overwrite);
      write_eig_report(re_cache, re_out);
      std::cout << "report-eigs -> " << re_out << "\n";
      return 0;
    }
    if (tau_cmd->parsed()) {
      require_writable(rt_out, rt_overwrite);
      write_tau_histogram(rt_pred, rt_cache, rt_out, rt_seed);
      std::cout << "report-tau -> " << rt_out << "\n";
      return 0;
    }
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
