#include "pnp/encoder.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace pnp {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}
void put_f64(std::string& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(out, bits);
}

struct Reader {
  const unsigned char* p;
  std::size_t size, pos = 0;
  explicit Reader(const std::string& s)
      : p(reinterpret_cast<const unsigned char*>(s.data())), size(s.size()) {}
  void need(std::size_t n, const char* what) {
    if (pos + n > size) {
      throw std::runtime_error(std::string("checkpoint: truncated while reading ") + what);
    }
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(p[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[pos + i]) << (8 * i);
    pos += 8;
    return v;
  }
  double f64(const char* what) {
    const std::uint64_t bits = u64(what);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string str(const char* what) {
    const std::uint32_t n = u32(what);
    need(n, what);
    std::string s(reinterpret_cast<const char*>(p + pos), n);
    pos += n;
    return s;
  }
};

}  // namespace

std::string train_loss_name(TrainLoss loss) {
  switch (loss) {
    case TrainLoss::kPLoss: return "p_loss";
    case TrainLoss::kPnp: return "pnp";
    case TrainLoss::kSpectralFd: return "spectral_fd";
  }
  return "unknown";
}

void update_lambda(LambdaSchedule& schedule, double epoch_val_loss) {
  if (!schedule.has_baseline) {
    schedule.best_val = epoch_val_loss;
    schedule.has_baseline = true;
    return;
  }
  if (epoch_val_loss < schedule.best_val) {
    schedule.best_val = epoch_val_loss;
    schedule.lambda /= schedule.decay;
  }
}

EncoderWeights init_weights(const std::vector<int>& layer_sizes, Rng& rng) {
  if (layer_sizes.size() < 2) {
    throw std::invalid_argument("init_weights: need at least input and output sizes");
  }
  EncoderWeights weights;
  weights.layer_sizes = layer_sizes;
  const std::size_t n_layers = layer_sizes.size() - 1;
  weights.w.resize(n_layers);
  weights.b.resize(n_layers);
  for (std::size_t l = 0; l < n_layers; ++l) {
    const int in = layer_sizes[l];
    const int out = layer_sizes[l + 1];
    const double s = 1.0 / std::sqrt(double(in));
    weights.w[l].resize(out, in);
    for (int r = 0; r < out; ++r) {
      for (int c = 0; c < in; ++c) weights.w[l](r, c) = rng.uniform(-s, s);
    }
    weights.b[l].resize(out);
    for (int r = 0; r < out; ++r) weights.b[l][r] = rng.uniform(-s, s);
  }
  const int j_dim = layer_sizes.back();
  weights.bn_gamma = Eigen::VectorXd::Ones(j_dim);
  weights.bn_beta = Eigen::VectorXd::Zero(j_dim);
  weights.bn_running_mean = Eigen::VectorXd::Zero(j_dim);
  weights.bn_running_var = Eigen::VectorXd::Ones(j_dim);
  return weights;
}

Eigen::MatrixXd forward_batch(const EncoderWeights& weights, const Eigen::MatrixXd& x,
                              bool training, double bn_eps, ForwardCache* cache) {
  if (x.rows() != weights.input_dim()) {
    throw std::invalid_argument("forward: feature length " + std::to_string(x.rows()) +
                                " does not match input layer " +
                                std::to_string(weights.input_dim()));
  }
  const std::size_t n_layers = weights.w.size();
  ForwardCache local;
  ForwardCache& c = cache ? *cache : local;
  c.a.assign(1, x);
  c.z.clear();
  Eigen::MatrixXd cur = x;
  for (std::size_t l = 0; l < n_layers; ++l) {
    Eigen::MatrixXd z = (weights.w[l] * cur).colwise() + weights.b[l];
    c.z.push_back(z);
    if (l + 1 < n_layers) {
      cur = z.cwiseMax(0.0);
      c.a.push_back(cur);
    } else {
      cur = std::move(z);
    }
  }

  const Eigen::Index batch = x.cols();
  // Batch statistics need at least two samples; smaller batches fall back
  // to the running statistics.
  c.batch_stats = training && batch > 1;
  if (c.batch_stats) {
    c.mu = cur.rowwise().mean();
    c.var = (cur.colwise() - c.mu).array().square().rowwise().mean();
  } else {
    c.mu = weights.bn_running_mean;
    c.var = weights.bn_running_var;
  }
  c.inv_std = (c.var.array() + bn_eps).rsqrt();
  c.xhat = ((cur.colwise() - c.mu).array().colwise() * c.inv_std.array()).matrix();
  const Eigen::MatrixXd y =
      ((c.xhat.array().colwise() * weights.bn_gamma.array()).colwise() +
       weights.bn_beta.array())
          .matrix();
  c.out = y.array().tanh().matrix();
  return c.out;
}

void update_running_stats(EncoderWeights& weights, const ForwardCache& cache,
                          double momentum) {
  if (!cache.batch_stats) return;
  const double b = double(cache.out.cols());
  const double unbias = b > 1.0 ? b / (b - 1.0) : 1.0;
  weights.bn_running_mean =
      (1.0 - momentum) * weights.bn_running_mean + momentum * cache.mu;
  weights.bn_running_var =
      (1.0 - momentum) * weights.bn_running_var + momentum * unbias * cache.var;
}

Eigen::VectorXd forward(const EncoderWeights& weights, const Eigen::VectorXd& x) {
  return forward_batch(weights, x, false, 1e-5, nullptr).col(0);
}

NormalizedTheta predict_theta(const EncoderWeights& weights, const Eigen::VectorXd& x,
                              bool includes_pitch, double fixed_pitch) {
  NormalizedTheta theta;
  theta.values = forward(weights, x);
  theta.includes_pitch = includes_pitch;
  theta.fixed_pitch = fixed_pitch;
  return theta;
}

namespace {

EncoderGrads backprop_core(const EncoderWeights& weights, const ForwardCache& cache,
                           const Eigen::MatrixXd& d_out) {
  const std::size_t n_layers = weights.w.size();
  const Eigen::Index batch = cache.out.cols();

  EncoderGrads grads;
  grads.w.resize(n_layers);
  grads.b.resize(n_layers);

  // Through tanh.
  const Eigen::MatrixXd dy =
      (d_out.array() * (1.0 - cache.out.array().square())).matrix();
  // Through the affine batch-norm parameters.
  grads.bn_beta = dy.rowwise().sum();
  grads.bn_gamma = (dy.array() * cache.xhat.array()).rowwise().sum();
  const Eigen::MatrixXd dxhat =
      (dy.array().colwise() * weights.bn_gamma.array()).matrix();

  Eigen::MatrixXd dz;
  if (cache.batch_stats) {
    const double b = double(batch);
    const Eigen::VectorXd sum_dxhat = dxhat.rowwise().sum();
    const Eigen::VectorXd sum_dxhat_xhat =
        (dxhat.array() * cache.xhat.array()).rowwise().sum();
    dz = (((dxhat * b).colwise() - sum_dxhat).array() -
          (cache.xhat.array().colwise() * sum_dxhat_xhat.array()))
             .matrix();
    dz = (dz.array().colwise() * (cache.inv_std.array() / b)).matrix();
  } else {
    dz = (dxhat.array().colwise() * cache.inv_std.array()).matrix();
  }

  for (std::size_t l = n_layers; l-- > 0;) {
    grads.w[l] = dz * cache.a[l].transpose();
    grads.b[l] = dz.rowwise().sum();
    if (l > 0) {
      const Eigen::MatrixXd da = weights.w[l].transpose() * dz;
      dz = ((cache.z[l - 1].array() > 0.0).cast<double>() * da.array()).matrix();
    }
  }
  return grads;
}

struct Upstream {
  double loss = 0.0;
  Eigen::MatrixXd d_out;
};

Upstream loss_upstream(const Eigen::MatrixXd& out, const Eigen::MatrixXd& targets,
                       const std::vector<std::uint64_t>& sample_ids,
                       TrainLoss loss_kind, const MetricCache* metrics,
                       double lambda) {
  if (targets.rows() != out.rows() || targets.cols() != out.cols()) {
    throw std::invalid_argument("backward: target shape mismatch");
  }
  const Eigen::Index batch = out.cols();
  Upstream up;
  up.d_out.resize(out.rows(), batch);
  const double inv_b = 1.0 / double(batch);
  for (Eigen::Index n = 0; n < batch; ++n) {
    const Eigen::VectorXd d = out.col(n) - targets.col(n);
    if (loss_kind == TrainLoss::kPLoss) {
      up.loss += 0.5 * d.squaredNorm() * inv_b;
      up.d_out.col(n) = d * inv_b;
    } else if (loss_kind == TrainLoss::kPnp) {
      if (!metrics) throw std::invalid_argument("backward: pnp needs a metric cache");
      if (sample_ids.size() != std::size_t(batch)) {
        throw std::invalid_argument("backward: sample ids missing for pnp batch");
      }
      const MetricRecord& rec = metrics->at(sample_ids[std::size_t(n)]);
      if (rec.m.rows() != out.rows()) {
        throw std::invalid_argument("backward: metric dimension mismatch for sample " +
                                    std::to_string(sample_ids[std::size_t(n)]));
      }
      const Eigen::VectorXd factor = rec.m * d + lambda * d;
      up.loss += 0.5 * (d.dot(rec.m * d) + lambda * d.squaredNorm()) * inv_b;
      up.d_out.col(n) = factor * inv_b;
    } else {
      throw std::invalid_argument("backward: spectral_fd uses backward_with_output_grad");
    }
  }
  return up;
}

}  // namespace

BatchGradResult backward(const EncoderWeights& weights, const Eigen::MatrixXd& x,
                         const Eigen::MatrixXd& targets,
                         const std::vector<std::uint64_t>& sample_ids,
                         TrainLoss loss_kind, const MetricCache* metrics,
                         double lambda, double bn_eps) {
  ForwardCache cache;
  const Eigen::MatrixXd out = forward_batch(weights, x, true, bn_eps, &cache);
  const Upstream up = loss_upstream(out, targets, sample_ids, loss_kind, metrics, lambda);
  BatchGradResult result;
  result.loss = up.loss;
  result.grads = backprop_core(weights, cache, up.d_out);
  return result;
}

BatchGradResult backward_with_output_grad(
    const EncoderWeights& weights, const Eigen::MatrixXd& x,
    const OutputGradFn& output_grad,
    const std::function<double(const Eigen::MatrixXd&)>& loss_fn, double bn_eps) {
  ForwardCache cache;
  const Eigen::MatrixXd out = forward_batch(weights, x, true, bn_eps, &cache);
  BatchGradResult result;
  result.loss = loss_fn(out);
  result.grads = backprop_core(weights, cache, output_grad(out));
  return result;
}

double batch_loss(const EncoderWeights& weights, const Eigen::MatrixXd& x,
                  const Eigen::MatrixXd& targets,
                  const std::vector<std::uint64_t>& sample_ids, TrainLoss loss_kind,
                  const MetricCache* metrics, double lambda, double bn_eps) {
  ForwardCache cache;
  const Eigen::MatrixXd out = forward_batch(weights, x, true, bn_eps, &cache);
  return loss_upstream(out, targets, sample_ids, loss_kind, metrics, lambda).loss;
}

AdamState make_adam_state(const EncoderWeights& weights) {
  AdamState s;
  s.mw.reserve(weights.w.size());
  for (const auto& w : weights.w) {
    s.mw.push_back(Eigen::MatrixXd::Zero(w.rows(), w.cols()));
    s.vw.push_back(Eigen::MatrixXd::Zero(w.rows(), w.cols()));
  }
  for (const auto& b : weights.b) {
    s.mb.push_back(Eigen::VectorXd::Zero(b.size()));
    s.vb.push_back(Eigen::VectorXd::Zero(b.size()));
  }
  const Eigen::Index j_dim = weights.bn_gamma.size();
  s.m_gamma = Eigen::VectorXd::Zero(j_dim);
  s.v_gamma = Eigen::VectorXd::Zero(j_dim);
  s.m_beta = Eigen::VectorXd::Zero(j_dim);
  s.v_beta = Eigen::VectorXd::Zero(j_dim);
  return s;
}

namespace {

template <typename T>
void adam_update(T& param, T& m, T& v, const T& g, double lr, double beta1,
                 double beta2, double eps, double bc1, double bc2) {
  m = beta1 * m + (1.0 - beta1) * g;
  v = (beta2 * v.array() + (1.0 - beta2) * g.array().square()).matrix();
  param.array() -=
      lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + eps);
}

}  // namespace

void adam_step(EncoderWeights& weights, AdamState& state, const EncoderGrads& grads,
               double lr, double beta1, double beta2, double eps) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(beta1, double(state.step));
  const double bc2 = 1.0 - std::pow(beta2, double(state.step));
  for (std::size_t l = 0; l < weights.w.size(); ++l) {
    adam_update(weights.w[l], state.mw[l], state.vw[l], grads.w[l], lr, beta1, beta2,
                eps, bc1, bc2);
    adam_update(weights.b[l], state.mb[l], state.vb[l], grads.b[l], lr, beta1, beta2,
                eps, bc1, bc2);
  }
  adam_update(weights.bn_gamma, state.m_gamma, state.v_gamma, grads.bn_gamma, lr, beta1,
              beta2, eps, bc1, bc2);
  adam_update(weights.bn_beta, state.m_beta, state.v_beta, grads.bn_beta, lr, beta1,
              beta2, eps, bc1, bc2);
}

namespace {

std::vector<int> epoch_subset(std::vector<int> idx, double fraction, Rng& rng) {
  rng.shuffle(idx);
  const auto keep = std::max<std::size_t>(
      1, std::size_t(std::llround(fraction * double(idx.size()))));
  idx.resize(std::min(idx.size(), keep));
  return idx;
}

Eigen::MatrixXd gather_cols(const Eigen::MatrixXd& m, const std::vector<int>& idx,
                            std::size_t first, std::size_t count) {
  Eigen::MatrixXd out(m.rows(), Eigen::Index(count));
  for (std::size_t i = 0; i < count; ++i) {
    out.col(Eigen::Index(i)) = m.col(idx[first + i]);
  }
  return out;
}

}  // namespace

TrainResult train(const TrainingSet& data, const TrainConfig& config,
                  const MetricCache* metrics) {
  if (config.loss == TrainLoss::kSpectralFd) {
    throw std::invalid_argument("train: use train_spectral_fd for the spectral baseline");
  }
  if (config.loss == TrainLoss::kPnp && !metrics) {
    throw std::invalid_argument("train: pnp loss requires a metric cache");
  }
  if (data.train_idx.empty() || data.val_idx.empty()) {
    throw std::invalid_argument("train: empty train or validation split");
  }

  Rng rng(config.seed);
  std::vector<int> sizes;
  sizes.push_back(int(data.inputs.rows()));
  sizes.insert(sizes.end(), config.hidden.begin(), config.hidden.end());
  sizes.push_back(int(data.targets.rows()));
  EncoderWeights weights = init_weights(sizes, rng);
  AdamState adam = make_adam_state(weights);

  LambdaSchedule schedule;
  schedule.decay = config.lambda_decay;
  schedule.lambda = 0.0;
  if (config.loss == TrainLoss::kPnp) {
    schedule.lambda = config.lambda0 >= 0.0 ? config.lambda0 : metrics->max_eigenvalue();
  }

  TrainResult result;
  result.lambda0 = schedule.lambda;
  result.best_val = std::numeric_limits<double>::infinity();

  const Eigen::MatrixXd val_x = gather_cols(data.inputs, data.val_idx, 0,
                                            data.val_idx.size());
  const Eigen::MatrixXd val_t = gather_cols(data.targets, data.val_idx, 0,
                                            data.val_idx.size());
  std::vector<std::uint64_t> val_ids(data.val_idx.size());
  for (std::size_t i = 0; i < data.val_idx.size(); ++i) {
    val_ids[i] = data.sample_ids[std::size_t(data.val_idx[i])];
  }

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto t0 = Clock::now();
    const double lambda_used = schedule.lambda;
    const std::vector<int> subset =
        epoch_subset(data.train_idx, config.epoch_fraction, rng);

    double loss_sum = 0.0;
    std::size_t n_seen = 0;
    int steps = 0;
    for (std::size_t start = 0; start < subset.size();
         start += std::size_t(config.batch_size)) {
      const std::size_t count =
          std::min(std::size_t(config.batch_size), subset.size() - start);
      const Eigen::MatrixXd x = gather_cols(data.inputs, subset, start, count);
      const Eigen::MatrixXd t = gather_cols(data.targets, subset, start, count);
      std::vector<std::uint64_t> ids(count);
      for (std::size_t i = 0; i < count; ++i) {
        ids[i] = data.sample_ids[std::size_t(subset[start + i])];
      }

      ForwardCache cache;
      const Eigen::MatrixXd out = forward_batch(weights, x, true, config.bn_eps, &cache);
      update_running_stats(weights, cache, config.bn_momentum);
      const Upstream up =
          loss_upstream(out, t, ids, config.loss, metrics, lambda_used);
      const EncoderGrads grads = backprop_core(weights, cache, up.d_out);
      adam_step(weights, adam, grads, config.learning_rate);

      loss_sum += up.loss * double(count);
      n_seen += count;
      ++steps;
    }

    const Eigen::MatrixXd val_out =
        forward_batch(weights, val_x, false, config.bn_eps, nullptr);
    const double val_loss =
        loss_upstream(val_out, val_t, val_ids, config.loss, metrics, lambda_used).loss;

    EpochLog log;
    log.epoch = epoch;
    log.train_loss = n_seen > 0 ? loss_sum / double(n_seen) : 0.0;
    log.val_loss = val_loss;
    log.lambda = lambda_used;
    log.seconds = seconds_since(t0);
    log.steps = steps;
    result.log.push_back(log);

    if (val_loss < result.best_val) {
      result.best_val = val_loss;
      result.best_epoch = epoch;
      result.best_weights = weights;
    }
    update_lambda(schedule, val_loss);
  }
  if (result.best_epoch < 0) result.best_weights = weights;
  return result;
}

namespace {

struct SpectralBatch {
  double loss = 0.0;
  Eigen::MatrixXd d_out;
};

SpectralBatch spectral_upstream(const Eigen::MatrixXd& out,
                                const std::vector<std::uint64_t>& cols,
                                const SpectralFdContext& ctx, double fd_step) {
  SpectralBatch res;
  const Eigen::Index batch = out.cols();
  res.d_out.resize(out.rows(), batch);
  const double inv_b = 1.0 / double(batch);
  for (Eigen::Index n = 0; n < batch; ++n) {
    NormalizedTheta theta;
    theta.values = out.col(n);
    theta.includes_pitch = ctx.includes_pitch;
    theta.fixed_pitch =
        ctx.fixed_pitch.empty() ? 0.0 : ctx.fixed_pitch[std::size_t(cols[std::size_t(n)])];
    const Eigen::VectorXd phi = ctx.phi_g(theta);
    const Eigen::VectorXd r =
        phi - ctx.target_phi.col(Eigen::Index(cols[std::size_t(n)]));
    const JacobianMatrix jac = jacobian_fd(theta, ctx.phi_g, fd_step);
    res.loss += 0.5 * r.squaredNorm() * inv_b;
    res.d_out.col(n) = jac.entries.transpose() * r * inv_b;
  }
  return res;
}

}  // namespace

TrainResult train_spectral_fd(const TrainingSet& data, const TrainConfig& config,
                              const SpectralFdContext& ctx) {
  if (data.train_idx.empty() || data.val_idx.empty()) {
    throw std::invalid_argument("train_spectral_fd: empty train or validation split");
  }
  Rng rng(config.seed);
  std::vector<int> sizes;
  sizes.push_back(int(data.inputs.rows()));
  sizes.insert(sizes.end(), config.hidden.begin(), config.hidden.end());
  sizes.push_back(int(data.targets.rows()));
  EncoderWeights weights = init_weights(sizes, rng);
  AdamState adam = make_adam_state(weights);

  TrainResult result;
  result.best_val = std::numeric_limits<double>::infinity();

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto t0 = Clock::now();
    const std::vector<int> subset =
        epoch_subset(data.train_idx, config.epoch_fraction, rng);

    double loss_sum = 0.0;
    std::size_t n_seen = 0;
    int steps = 0;
    for (std::size_t start = 0; start < subset.size();
         start += std::size_t(config.batch_size)) {
      const std::size_t count =
          std::min(std::size_t(config.batch_size), subset.size() - start);
      const Eigen::MatrixXd x = gather_cols(data.inputs, subset, start, count);
      std::vector<std::uint64_t> cols(count);
      for (std::size_t i = 0; i < count; ++i) {
        cols[i] = std::uint64_t(subset[start + i]);
      }

      ForwardCache cache;
      const Eigen::MatrixXd out = forward_batch(weights, x, true, config.bn_eps, &cache);
      update_running_stats(weights, cache, config.bn_momentum);
      const SpectralBatch up = spectral_upstream(out, cols, ctx, config.fd_step);
      const EncoderGrads grads = backprop_core(weights, cache, up.d_out);
      adam_step(weights, adam, grads, config.learning_rate);

      loss_sum += up.loss * double(count);
      n_seen += count;
      ++steps;
    }

    // Validation spectral loss at the current weights.
    double val_loss = 0.0;
    {
      const Eigen::MatrixXd val_x =
          gather_cols(data.inputs, data.val_idx, 0, data.val_idx.size());
      const Eigen::MatrixXd val_out =
          forward_batch(weights, val_x, false, config.bn_eps, nullptr);
      for (std::size_t i = 0; i < data.val_idx.size(); ++i) {
        NormalizedTheta theta;
        theta.values = val_out.col(Eigen::Index(i));
        theta.includes_pitch = ctx.includes_pitch;
        theta.fixed_pitch = ctx.fixed_pitch.empty()
                                ? 0.0
                                : ctx.fixed_pitch[std::size_t(data.val_idx[i])];
        const Eigen::VectorXd phi = ctx.phi_g(theta);
        const Eigen::VectorXd r = phi - ctx.target_phi.col(data.val_idx[i]);
        val_loss += 0.5 * r.squaredNorm();
      }
      val_loss /= double(data.val_idx.size());
    }

    EpochLog log;
    log.epoch = epoch;
    log.train_loss = n_seen > 0 ? loss_sum / double(n_seen) : 0.0;
    log.val_loss = val_loss;
    log.lambda = 0.0;
    log.seconds = seconds_since(t0);
    log.steps = steps;
    result.log.push_back(log);

    if (val_loss < result.best_val) {
      result.best_val = val_loss;
      result.best_epoch = epoch;
      result.best_weights = weights;
    }
  }
  if (result.best_epoch < 0) result.best_weights = weights;
  return result;
}

namespace {

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t mid = v.size() / 2;
  return v.size() % 2 ? v[mid] : 0.5 * (v[mid - 1] + v[mid]);
}

}  // namespace

double measure_step_seconds(const TrainingSet& data, const TrainConfig& config,
                            const MetricCache* metrics, int batch_size, int reps) {
  Rng rng(config.seed);
  std::vector<int> sizes;
  sizes.push_back(int(data.inputs.rows()));
  sizes.insert(sizes.end(), config.hidden.begin(), config.hidden.end());
  sizes.push_back(int(data.targets.rows()));
  EncoderWeights weights = init_weights(sizes, rng);
  AdamState adam = make_adam_state(weights);

  std::vector<int> idx(data.train_idx.begin(), data.train_idx.end());
  while (int(idx.size()) < batch_size) idx.insert(idx.end(), idx.begin(), idx.end());
  idx.resize(std::size_t(batch_size));
  const Eigen::MatrixXd x = gather_cols(data.inputs, idx, 0, idx.size());
  const Eigen::MatrixXd t = gather_cols(data.targets, idx, 0, idx.size());
  std::vector<std::uint64_t> ids(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    ids[i] = data.sample_ids[std::size_t(idx[i])];
  }
  const double lambda = config.loss == TrainLoss::kPnp && metrics
                            ? (config.lambda0 >= 0.0 ? config.lambda0
                                                     : metrics->max_eigenvalue())
                            : 0.0;

  auto one_step = [&]() {
    ForwardCache cache;
    const Eigen::MatrixXd out = forward_batch(weights, x, true, config.bn_eps, &cache);
    update_running_stats(weights, cache, config.bn_momentum);
    const Upstream up = loss_upstream(out, t, ids, config.loss, metrics, lambda);
    const EncoderGrads grads = backprop_core(weights, cache, up.d_out);
    adam_step(weights, adam, grads, config.learning_rate);
  };

  for (int i = 0; i < 3; ++i) one_step();  // warmup
  std::vector<double> times;
  times.reserve(std::size_t(reps));
  for (int i = 0; i < reps; ++i) {
    const auto t0 = Clock::now();
    one_step();
    times.push_back(seconds_since(t0));
  }
  return median(times);
}

double measure_spectral_fd_step_seconds(const TrainingSet& data,
                                        const TrainConfig& config,
                                        const SpectralFdContext& ctx, int batch_size,
                                        int reps) {
  Rng rng(config.seed);
  std::vector<int> sizes;
  sizes.push_back(int(data.inputs.rows()));
  sizes.insert(sizes.end(), config.hidden.begin(), config.hidden.end());
  sizes.push_back(int(data.targets.rows()));
  EncoderWeights weights = init_weights(sizes, rng);
  AdamState adam = make_adam_state(weights);

  std::vector<int> idx(data.train_idx.begin(), data.train_idx.end());
  while (int(idx.size()) < batch_size) idx.insert(idx.end(), idx.begin(), idx.end());
  idx.resize(std::size_t(batch_size));
  const Eigen::MatrixXd x = gather_cols(data.inputs, idx, 0, idx.size());
  std::vector<std::uint64_t> cols(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) cols[i] = std::uint64_t(idx[i]);

  auto one_step = [&]() {
    ForwardCache cache;
    const Eigen::MatrixXd out = forward_batch(weights, x, true, config.bn_eps, &cache);
    update_running_stats(weights, cache, config.bn_momentum);
    const SpectralBatch up = spectral_upstream(out, cols, ctx, config.fd_step);
    const EncoderGrads grads = backprop_core(weights, cache, up.d_out);
    adam_step(weights, adam, grads, config.learning_rate);
  };

  std::vector<double> times;
  times.reserve(std::size_t(reps));
  for (int i = 0; i < reps; ++i) {
    const auto t0 = Clock::now();
    one_step();
    times.push_back(seconds_since(t0));
  }
  return median(times);
}

namespace {
constexpr char kCkptMagic[4] = {'P', 'N', 'P', 'W'};
constexpr std::uint32_t kCkptVersion = 1;
}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::string out;
  out.append(kCkptMagic, 4);
  put_u32(out, kCkptVersion);
  out.push_back(ckpt.includes_pitch ? char(1) : char(0));
  put_u64(out, ckpt.seed);
  put_f64(out, ckpt.lambda0);
  put_f64(out, ckpt.mean_epoch_seconds);
  put_u32(out, std::uint32_t(ckpt.loss_label.size()));
  out += ckpt.loss_label;
  put_u32(out, std::uint32_t(ckpt.feature_map_id.size()));
  out += ckpt.feature_map_id;
  const EncoderWeights& w = ckpt.weights;
  put_u32(out, std::uint32_t(w.layer_sizes.size()));
  for (const int s : w.layer_sizes) put_u32(out, std::uint32_t(s));
  for (std::size_t l = 0; l < w.w.size(); ++l) {
    for (Eigen::Index r = 0; r < w.w[l].rows(); ++r) {
      for (Eigen::Index c = 0; c < w.w[l].cols(); ++c) put_f64(out, w.w[l](r, c));
    }
    for (Eigen::Index r = 0; r < w.b[l].size(); ++r) put_f64(out, w.b[l][r]);
  }
  for (Eigen::Index i = 0; i < w.bn_gamma.size(); ++i) put_f64(out, w.bn_gamma[i]);
  for (Eigen::Index i = 0; i < w.bn_beta.size(); ++i) put_f64(out, w.bn_beta[i]);
  for (Eigen::Index i = 0; i < w.bn_running_mean.size(); ++i) {
    put_f64(out, w.bn_running_mean[i]);
  }
  for (Eigen::Index i = 0; i < w.bn_running_var.size(); ++i) {
    put_f64(out, w.bn_running_var[i]);
  }

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
  f.write(out.data(), std::streamsize(out.size()));
  if (!f) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
  const std::string bytes((std::istreambuf_iterator<char>(f)),
                          std::istreambuf_iterator<char>());
  Reader r(bytes);
  r.need(4, "magic");
  if (std::memcmp(r.p, kCkptMagic, 4) != 0) {
    throw std::runtime_error("load_checkpoint: magic mismatch in " + path);
  }
  r.pos += 4;
  if (r.u32("version") != kCkptVersion) {
    throw std::runtime_error("load_checkpoint: unsupported version");
  }
  Checkpoint ckpt;
  r.need(1, "pitch flag");
  ckpt.includes_pitch = r.p[r.pos++] != 0;
  ckpt.seed = r.u64("seed");
  ckpt.lambda0 = r.f64("lambda0");
  ckpt.mean_epoch_seconds = r.f64("epoch seconds");
  ckpt.loss_label = r.str("loss label");
  ckpt.feature_map_id = r.str("feature_map_id");
  const std::uint32_t n_sizes = r.u32("layer count");
  EncoderWeights& w = ckpt.weights;
  w.layer_sizes.resize(n_sizes);
  for (auto& s : w.layer_sizes) s = int(r.u32("layer size"));
  if (n_sizes < 2) throw std::runtime_error("load_checkpoint: bad layer sizes");
  const std::size_t n_layers = n_sizes - 1;
  w.w.resize(n_layers);
  w.b.resize(n_layers);
  for (std::size_t l = 0; l < n_layers; ++l) {
    w.w[l].resize(w.layer_sizes[l + 1], w.layer_sizes[l]);
    for (Eigen::Index row = 0; row < w.w[l].rows(); ++row) {
      for (Eigen::Index c = 0; c < w.w[l].cols(); ++c) w.w[l](row, c) = r.f64("weight");
    }
    w.b[l].resize(w.layer_sizes[l + 1]);
    for (Eigen::Index row = 0; row < w.b[l].size(); ++row) w.b[l][row] = r.f64("bias");
  }
  const int j_dim = w.layer_sizes.back();
  w.bn_gamma.resize(j_dim);
  w.bn_beta.resize(j_dim);
  w.bn_running_mean.resize(j_dim);
  w.bn_running_var.resize(j_dim);
  for (int i = 0; i < j_dim; ++i) w.bn_gamma[i] = r.f64("bn gamma");
  for (int i = 0; i < j_dim; ++i) w.bn_beta[i] = r.f64("bn beta");
  for (int i = 0; i < j_dim; ++i) w.bn_running_mean[i] = r.f64("bn mean");
  for (int i = 0; i < j_dim; ++i) w.bn_running_var[i] = r.f64("bn var");
  return ckpt;
}

void write_train_log_csv(const std::vector<EpochLog>& log, const std::string& path) {
  std::ostringstream out;
  out << "epoch,train_loss,val_loss,lambda,seconds,steps\n";
  char num[64];
  for (const EpochLog& e : log) {
    out << e.epoch;
    std::snprintf(num, sizeof(num), "%.17g", e.train_loss);
    out << "," << num;
    std::snprintf(num, sizeof(num), "%.17g", e.val_loss);
    out << "," << num;
    std::snprintf(num, sizeof(num), "%.17g", e.lambda);
    out << "," << num;
    std::snprintf(num, sizeof(num), "%.6f", e.seconds);
    out << "," << num << "," << e.steps << "\n";
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_train_log_csv: cannot open " + path);
  f << out.str();
}

}  // namespace pnp
