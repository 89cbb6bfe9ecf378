#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "pnp/metric.hpp"
#include "pnp/rng.hpp"

namespace pnp {

/// MLP with a 1D batch normalization before the tanh output head, so
/// predictions lie in (-1, 1)^J.
struct EncoderWeights {
  std::vector<Eigen::MatrixXd> w;  // per layer, rows = out, cols = in
  std::vector<Eigen::VectorXd> b;
  Eigen::VectorXd bn_gamma, bn_beta;
  Eigen::VectorXd bn_running_mean, bn_running_var;
  std::vector<int> layer_sizes;  // input, hidden..., output

  int input_dim() const { return layer_sizes.front(); }
  int output_dim() const { return layer_sizes.back(); }
};

struct EncoderGrads {
  std::vector<Eigen::MatrixXd> w;
  std::vector<Eigen::VectorXd> b;
  Eigen::VectorXd bn_gamma, bn_beta;
};

enum class TrainLoss { kPLoss, kPnp, kSpectralFd };

std::string train_loss_name(TrainLoss loss);

struct TrainConfig {
  TrainLoss loss = TrainLoss::kPLoss;
  int batch_size = 256;  // 64 is the convention for spectral_fd
  int epochs = 70;
  double learning_rate = 1e-3;
  double lambda0 = -1.0;       // < 0: use the largest cached eigenvalue
  double lambda_decay = 5.0;   // 1 freezes lambda
  double epoch_fraction = 0.2; // share of the training split seen per epoch
  std::uint64_t seed = 0;
  std::vector<int> hidden = {256, 64};
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;
  double fd_step = kDefaultFdStep;  // spectral_fd only
};

/// Delayed gratification: divide lambda by `decay` whenever the epoch
/// validation loss improves on the best seen so far; the first observed
/// loss only sets the baseline.
struct LambdaSchedule {
  double lambda = 0.0;
  double decay = 5.0;
  double best_val = 0.0;
  bool has_baseline = false;
};

void update_lambda(LambdaSchedule& schedule, double epoch_val_loss);

/// Scaled uniform fan-in init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
EncoderWeights init_weights(const std::vector<int>& layer_sizes, Rng& rng);

/// Intermediates of one batch forward pass, as needed by backward.
struct ForwardCache {
  std::vector<Eigen::MatrixXd> a;  // layer inputs, a[0] = x
  std::vector<Eigen::MatrixXd> z;  // pre-activations
  Eigen::VectorXd mu, var, inv_std;
  Eigen::MatrixXd xhat;
  Eigen::MatrixXd out;
  bool batch_stats = false;
};

/// Batch forward pass; columns are samples. In training mode batch statistics
/// normalize the head (falling back to running statistics for batches of one);
/// in inference mode running statistics are used. `cache` captures the
/// intermediates needed by backward; update_running_stats folds the batch
/// statistics into the running ones.
Eigen::MatrixXd forward_batch(const EncoderWeights& weights, const Eigen::MatrixXd& x,
                              bool training, double bn_eps, ForwardCache* cache);
void update_running_stats(EncoderWeights& weights, const ForwardCache& cache,
                          double momentum);

/// Single-sample inference (running statistics); bit-exact on repeated calls.
Eigen::VectorXd forward(const EncoderWeights& weights, const Eigen::VectorXd& x);

NormalizedTheta predict_theta(const EncoderWeights& weights, const Eigen::VectorXd& x,
                              bool includes_pitch, double fixed_pitch = 0.0);

/// Per-sample upstream gradient at the tanh output, dL/d theta_hat (J x B).
using OutputGradFn =
    std::function<Eigen::MatrixXd(const Eigen::MatrixXd& theta_hat)>;

/// Mean loss over the batch plus exact gradients of it. For kPnp the upstream
/// factor is (M_n + lambda I)(theta_hat - theta) / B per sample; for kPLoss it
/// is (theta_hat - theta) / B. Missing metric records raise std::out_of_range
/// naming the sample.
struct BatchGradResult {
  double loss = 0.0;
  EncoderGrads grads;
};
BatchGradResult backward(const EncoderWeights& weights, const Eigen::MatrixXd& x,
                         const Eigen::MatrixXd& targets,
                         const std::vector<std::uint64_t>& sample_ids,
                         TrainLoss loss_kind, const MetricCache* metrics,
                         double lambda, double bn_eps);

/// Generic backward used by the spectral route: the upstream gradient is
/// produced by a callback from the batch predictions.
BatchGradResult backward_with_output_grad(const EncoderWeights& weights,
                                          const Eigen::MatrixXd& x,
                                          const OutputGradFn& output_grad,
                                          const std::function<double(
                                              const Eigen::MatrixXd&)>& loss_fn,
                                          double bn_eps);

/// Loss of a batch in training mode without touching running statistics;
/// the finite-difference oracle for gradient checks.
double batch_loss(const EncoderWeights& weights, const Eigen::MatrixXd& x,
                  const Eigen::MatrixXd& targets,
                  const std::vector<std::uint64_t>& sample_ids, TrainLoss loss_kind,
                  const MetricCache* metrics, double lambda, double bn_eps);

struct AdamState {
  std::vector<Eigen::MatrixXd> mw, vw;
  std::vector<Eigen::VectorXd> mb, vb;
  Eigen::VectorXd m_gamma, v_gamma, m_beta, v_beta;
  long step = 0;
};

AdamState make_adam_state(const EncoderWeights& weights);
void adam_step(EncoderWeights& weights, AdamState& state, const EncoderGrads& grads,
               double lr, double beta1 = 0.9, double beta2 = 0.999,
               double eps = 1e-8);

/// In-memory training data; columns of `inputs` and `targets` are samples.
struct TrainingSet {
  Eigen::MatrixXd inputs;   // d x N
  Eigen::MatrixXd targets;  // J x N
  std::vector<std::uint64_t> sample_ids;
  std::vector<int> train_idx, val_idx;
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lambda = 0.0;  // value used during the epoch
  double seconds = 0.0;
  int steps = 0;
};

struct TrainResult {
  EncoderWeights best_weights;
  std::vector<EpochLog> log;
  double best_val = 0.0;
  int best_epoch = -1;
  double lambda0 = 0.0;
};

/// P-loss / PNP training with the adaptive lambda schedule. Validation uses
/// the training loss kind with lambda frozen at its epoch value. Returns the
/// best-validation weights. Deterministic given config.seed.
TrainResult train(const TrainingSet& data, const TrainConfig& config,
                  const MetricCache* metrics);

/// Spectral-loss baseline: the chain rule through a finite-difference
/// Jacobian of phi o g at each prediction, per sample, per step. Slow by
/// construction; meant for small batches and cost comparisons.
struct SpectralFdContext {
  FeatureFn phi_g;             // log-compressed features of g(theta)
  Eigen::MatrixXd target_phi;  // P x N, aligned with TrainingSet columns
  bool includes_pitch = true;
  std::vector<double> fixed_pitch;  // per sample, used when J = 4
};

TrainResult train_spectral_fd(const TrainingSet& data, const TrainConfig& config,
                              const SpectralFdContext& ctx);

/// Median wall-clock of one optimizer step (forward + backward + update)
/// on a fixed batch, cache preloaded.
double measure_step_seconds(const TrainingSet& data, const TrainConfig& config,
                            const MetricCache* metrics, int batch_size, int reps);
double measure_spectral_fd_step_seconds(const TrainingSet& data,
                                        const TrainConfig& config,
                                        const SpectralFdContext& ctx, int batch_size,
                                        int reps);

/// Checkpoint: magic "PNPW", version, metadata, layer sizes, f64 weights.
struct Checkpoint {
  EncoderWeights weights;
  bool includes_pitch = true;
  std::string feature_map_id;
  std::string loss_label;
  double lambda0 = 0.0;
  double mean_epoch_seconds = 0.0;
  std::uint64_t seed = 0;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

/// Training log CSV: epoch, train loss, val loss, lambda, wall-clock.
void write_train_log_csv(const std::vector<EpochLog>& log, const std::string& path);

}  // namespace pnp
