#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "pnp/encoder.hpp"
#include "pnp/features.hpp"
#include "pnp/rng.hpp"

using namespace pnp;
namespace fs = std::filesystem;

namespace {

std::string temp_path(const char* name) {
  const fs::path dir = fs::temp_directory_path() / "pnp_tests";
  fs::create_directories(dir);
  return (dir / name).string();
}

Eigen::MatrixXd random_matrix(Rng& rng, int rows, int cols, double scale = 1.0) {
  Eigen::MatrixXd m(rows, cols);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) m(r, c) = scale * rng.gaussian();
  }
  return m;
}

MetricRecord psd_record(Rng& rng, std::uint64_t id, int n) {
  const Eigen::MatrixXd a = random_matrix(rng, n, n);
  MetricRecord rec;
  rec.sample_id = id;
  rec.m = a * a.transpose();
  eig_sym(rec.m, rec.eigenvalues, rec.eigenvectors);
  for (Eigen::Index i = 0; i < rec.eigenvalues.size(); ++i) {
    rec.eigenvalues[i] = std::max(0.0, rec.eigenvalues[i]);
  }
  rec.theta.values = Eigen::VectorXd::Zero(n);
  rec.theta.includes_pitch = n == 5;
  rec.feature_map_id = "test";
  rec.fd_step = 1e-3;
  return rec;
}

// Synthetic learnable data: targets are a fixed smooth map of the inputs.
TrainingSet synthetic_set(Rng& rng, int n_samples, int input_dim, int j_dim) {
  TrainingSet set;
  set.inputs = random_matrix(rng, input_dim, n_samples);
  const Eigen::MatrixXd w = random_matrix(rng, j_dim, input_dim, 0.3);
  set.targets = (w * set.inputs).array().tanh() * 0.8;
  set.sample_ids.resize(std::size_t(n_samples));
  for (int i = 0; i < n_samples; ++i) {
    set.sample_ids[std::size_t(i)] = std::uint64_t(i);
    if (i < int(0.8 * n_samples)) {
      set.train_idx.push_back(i);
    } else {
      set.val_idx.push_back(i);
    }
  }
  return set;
}

}  // namespace

TEST_CASE("forward with zero weights is constant zero") {
  Rng rng(1);
  EncoderWeights w = init_weights({6, 4, 3}, rng);
  for (auto& layer : w.w) layer.setZero();
  for (auto& bias : w.b) bias.setZero();
  for (int trial = 0; trial < 5; ++trial) {
    const Eigen::VectorXd out = forward(w, random_matrix(rng, 6, 1).col(0));
    for (int j = 0; j < 3; ++j) CHECK(out[j] == 0.0);
  }
}

TEST_CASE("outputs stay inside the open unit cube") {
  Rng rng(2);
  const EncoderWeights w = init_weights({10, 16, 4}, rng);
  const Eigen::MatrixXd x = random_matrix(rng, 10, 1000, 3.0);
  const Eigen::MatrixXd out = forward_batch(w, x, false, 1e-5, nullptr);
  CHECK(out.maxCoeff() < 1.0);
  CHECK(out.minCoeff() > -1.0);
}

TEST_CASE("inference is bit-exactly repeatable") {
  Rng rng(3);
  const EncoderWeights w = init_weights({8, 12, 5}, rng);
  const Eigen::VectorXd x = random_matrix(rng, 8, 1).col(0);
  const Eigen::VectorXd a = forward(w, x);
  const Eigen::VectorXd b = forward(w, x);
  CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("shape mismatch is rejected") {
  Rng rng(4);
  const EncoderWeights w = init_weights({8, 12, 5}, rng);
  CHECK_THROWS_AS(forward(w, Eigen::VectorXd::Zero(7)), std::invalid_argument);
}

TEST_CASE("backprop matches finite differences on sampled weights") {
  Rng rng(5);
  const int input = 7, j_dim = 3, batch = 6;
  EncoderWeights w = init_weights({input, 5, 4, j_dim}, rng);
  const Eigen::MatrixXd x = random_matrix(rng, input, batch);
  const Eigen::MatrixXd targets = random_matrix(rng, j_dim, batch, 0.3);
  std::vector<std::uint64_t> ids(batch);
  std::vector<MetricRecord> records;
  for (int i = 0; i < batch; ++i) {
    ids[std::size_t(i)] = std::uint64_t(i);
    records.push_back(psd_record(rng, std::uint64_t(i), j_dim));
  }
  const MetricCache cache(records);
  const double lambda = 0.7;
  const double bn_eps = 1e-5;

  for (const TrainLoss kind : {TrainLoss::kPLoss, TrainLoss::kPnp}) {
    const MetricCache* metrics = kind == TrainLoss::kPnp ? &cache : nullptr;
    const BatchGradResult res =
        backward(w, x, targets, ids, kind, metrics, lambda, bn_eps);

    // Sample scalar weights across every parameter group.
    auto fd_check = [&](double* param, double analytic) {
      const double h = 1e-6;
      const double saved = *param;
      *param = saved + h;
      const double up = batch_loss(w, x, targets, ids, kind, metrics, lambda, bn_eps);
      *param = saved - h;
      const double dn = batch_loss(w, x, targets, ids, kind, metrics, lambda, bn_eps);
      *param = saved;
      const double fd = (up - dn) / (2.0 * h);
      const double scale = std::max({std::abs(fd), std::abs(analytic), 1e-8});
      CHECK(std::abs(fd - analytic) / scale < 1e-4);
    };

    int checked = 0;
    for (std::size_t l = 0; l < w.w.size() && checked < 40; ++l) {
      for (int k = 0; k < 14 && checked < 40; ++k) {
        const int r = int(rng.below(std::uint64_t(w.w[l].rows())));
        const int c = int(rng.below(std::uint64_t(w.w[l].cols())));
        fd_check(&w.w[l](r, c), res.grads.w[l](r, c));
        ++checked;
      }
    }
    for (int j = 0; j < j_dim; ++j) {
      fd_check(&w.bn_gamma[j], res.grads.bn_gamma[j]);
      fd_check(&w.bn_beta[j], res.grads.bn_beta[j]);
      fd_check(&w.b[1][j % w.b[1].size()], res.grads.b[1][j % w.b[1].size()]);
    }
  }
}

TEST_CASE("identity metrics reproduce the parameter-loss gradients") {
  Rng rng(6);
  const int input = 6, j_dim = 4, batch = 5;
  EncoderWeights w = init_weights({input, 8, j_dim}, rng);
  const Eigen::MatrixXd x = random_matrix(rng, input, batch);
  const Eigen::MatrixXd targets = random_matrix(rng, j_dim, batch, 0.2);
  std::vector<std::uint64_t> ids(batch);
  std::vector<MetricRecord> records;
  for (int i = 0; i < batch; ++i) {
    ids[std::size_t(i)] = std::uint64_t(i);
    MetricRecord rec;
    rec.sample_id = std::uint64_t(i);
    rec.m = Eigen::MatrixXd::Identity(j_dim, j_dim);
    rec.eigenvalues = Eigen::VectorXd::Ones(j_dim);
    rec.eigenvectors = Eigen::MatrixXd::Identity(j_dim, j_dim);
    records.push_back(rec);
  }
  const MetricCache cache(records);

  const BatchGradResult p = backward(w, x, targets, ids, TrainLoss::kPLoss, nullptr,
                                     0.0, 1e-5);
  const BatchGradResult q =
      backward(w, x, targets, ids, TrainLoss::kPnp, &cache, 0.0, 1e-5);
  CHECK(std::abs(p.loss - q.loss) < 1e-14);
  for (std::size_t l = 0; l < w.w.size(); ++l) {
    CHECK((p.grads.w[l] - q.grads.w[l]).cwiseAbs().maxCoeff() < 1e-13);
  }
  CHECK((p.grads.bn_gamma - q.grads.bn_gamma).cwiseAbs().maxCoeff() < 1e-13);
}

TEST_CASE("zero-error batches produce zero gradients") {
  Rng rng(7);
  const int input = 6, j_dim = 3, batch = 4;
  EncoderWeights w = init_weights({input, 8, j_dim}, rng);
  const Eigen::MatrixXd x = random_matrix(rng, input, batch);
  // Targets equal to the training-mode forward outputs.
  ForwardCache cache;
  const Eigen::MatrixXd targets = forward_batch(w, x, true, 1e-5, &cache);
  std::vector<std::uint64_t> ids(batch, 0);
  const BatchGradResult res =
      backward(w, x, targets, ids, TrainLoss::kPLoss, nullptr, 0.0, 1e-5);
  CHECK(res.loss == 0.0);
  for (const auto& g : res.grads.w) CHECK(g.cwiseAbs().maxCoeff() == 0.0);
  for (const auto& g : res.grads.b) CHECK(g.cwiseAbs().maxCoeff() == 0.0);
  CHECK(res.grads.bn_gamma.cwiseAbs().maxCoeff() == 0.0);
  CHECK(res.grads.bn_beta.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("missing metric records raise a structured error") {
  Rng rng(8);
  EncoderWeights w = init_weights({4, 6, 3}, rng);
  const Eigen::MatrixXd x = random_matrix(rng, 4, 2);
  const Eigen::MatrixXd targets = random_matrix(rng, 3, 2, 0.2);
  const MetricCache cache(std::vector<MetricRecord>{});
  std::vector<std::uint64_t> ids = {11, 12};
  CHECK_THROWS_WITH_AS(
      backward(w, x, targets, ids, TrainLoss::kPnp, &cache, 0.0, 1e-5),
      doctest::Contains("11"), std::out_of_range);
}

TEST_CASE("lambda schedule follows delayed gratification") {
  SUBCASE("documented trace") {
    LambdaSchedule s;
    s.lambda = 125.0;
    s.decay = 5.0;
    std::vector<double> trace;
    for (const double val : {10.0, 9.0, 9.5, 8.0}) {
      update_lambda(s, val);
      trace.push_back(s.lambda);
    }
    CHECK(trace[0] == doctest::Approx(125.0));
    CHECK(trace[1] == doctest::Approx(25.0));
    CHECK(trace[2] == doctest::Approx(25.0));
    CHECK(trace[3] == doctest::Approx(5.0));
  }
  SUBCASE("nonimproving sequences freeze lambda") {
    LambdaSchedule s;
    s.lambda = 7.0;
    for (const double val : {3.0, 3.0, 4.0, 3.5}) update_lambda(s, val);
    CHECK(s.lambda == doctest::Approx(7.0));
  }
  SUBCASE("twenty improving epochs divide by five twenty times") {
    LambdaSchedule s;
    s.lambda = 1.0;
    double val = 100.0;
    update_lambda(s, val);  // baseline
    for (int e = 0; e < 20; ++e) {
      val *= 0.9;
      update_lambda(s, val);
    }
    CHECK(s.lambda == doctest::Approx(std::pow(5.0, -20.0)).epsilon(1e-12));
  }
  SUBCASE("the reported decade-scale trace is rule-consistent") {
    // An initial value matched to the largest observed eigenvalue, around
    // 1e20, reaches the 3e14 scale after 8 improving epochs out of 20.
    LambdaSchedule s;
    s.lambda = 1e20;
    update_lambda(s, 1.0);
    double val = 1.0;
    for (int e = 0; e < 8; ++e) {
      val *= 0.5;
      update_lambda(s, val);
    }
    CHECK(s.lambda > 2e14);
    CHECK(s.lambda < 4e14);
  }
}

TEST_CASE("training reduces the loss on a learnable toy set") {
  Rng rng(9);
  const TrainingSet set = synthetic_set(rng, 50, 12, 3);
  TrainConfig config;
  config.loss = TrainLoss::kPLoss;
  config.epochs = 30;
  config.batch_size = 16;
  config.epoch_fraction = 1.0;
  config.hidden = {16};
  config.seed = 17;
  const TrainResult result = train(set, config, nullptr);
  REQUIRE(result.log.size() == 30);
  CHECK(result.log.back().train_loss <= 0.5 * result.log.front().train_loss);
  CHECK(result.best_epoch >= 1);
}

TEST_CASE("training replays bit-identically under a fixed seed") {
  Rng rng(10);
  const TrainingSet set = synthetic_set(rng, 30, 8, 3);
  TrainConfig config;
  config.loss = TrainLoss::kPLoss;
  config.epochs = 8;
  config.batch_size = 8;
  config.seed = 23;
  config.hidden = {8};
  const TrainResult a = train(set, config, nullptr);
  const TrainResult b = train(set, config, nullptr);
  REQUIRE(a.log.size() == b.log.size());
  for (std::size_t e = 0; e < a.log.size(); ++e) {
    CHECK(a.log[e].train_loss == b.log[e].train_loss);
    CHECK(a.log[e].val_loss == b.log[e].val_loss);
    CHECK(a.log[e].lambda == b.log[e].lambda);
  }
  for (std::size_t l = 0; l < a.best_weights.w.size(); ++l) {
    CHECK((a.best_weights.w[l] - b.best_weights.w[l]).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("heavily damped pnp training behaves like p_loss training") {
  Rng rng(11);
  const TrainingSet set = synthetic_set(rng, 40, 10, 4);
  std::vector<MetricRecord> records;
  for (int i = 0; i < 40; ++i) records.push_back(psd_record(rng, std::uint64_t(i), 4));
  const MetricCache cache(records);
  const double lambda0 = 1e6 * cache.max_eigenvalue();

  TrainConfig base;
  base.epochs = 20;
  base.batch_size = 8;
  base.seed = 5;
  base.hidden = {12};
  base.epoch_fraction = 1.0;

  TrainConfig p_cfg = base;
  p_cfg.loss = TrainLoss::kPLoss;
  const TrainResult p_run = train(set, p_cfg, nullptr);

  TrainConfig pnp_cfg = base;
  pnp_cfg.loss = TrainLoss::kPnp;
  pnp_cfg.lambda0 = lambda0;
  pnp_cfg.lambda_decay = 1.0;  // freeze, isolating the large-lambda limit
  const TrainResult pnp_run = train(set, pnp_cfg, &cache);

  REQUIRE(p_run.log.size() == pnp_run.log.size());
  for (std::size_t e = 0; e < p_run.log.size(); ++e) {
    const double normalized = pnp_run.log[e].train_loss / lambda0;
    CHECK(std::abs(normalized - p_run.log[e].train_loss) <=
          0.01 * std::max(p_run.log[e].train_loss, 1e-12));
  }
}

TEST_CASE("checkpoints round trip through disk") {
  Rng rng(12);
  Checkpoint ckpt;
  ckpt.weights = init_weights({9, 7, 4}, rng);
  ckpt.includes_pitch = false;
  ckpt.feature_map_id = "cqt240[test]";
  ckpt.loss_label = "pnp";
  ckpt.lambda0 = 3.5e8;
  ckpt.mean_epoch_seconds = 1.25;
  ckpt.seed = 99;
  const std::string path = temp_path("weights.pnpw");
  save_checkpoint(ckpt, path);
  const Checkpoint back = load_checkpoint(path);
  CHECK(back.includes_pitch == ckpt.includes_pitch);
  CHECK(back.feature_map_id == ckpt.feature_map_id);
  CHECK(back.loss_label == ckpt.loss_label);
  CHECK(back.lambda0 == ckpt.lambda0);
  CHECK(back.seed == ckpt.seed);
  REQUIRE(back.weights.layer_sizes == ckpt.weights.layer_sizes);
  for (std::size_t l = 0; l < ckpt.weights.w.size(); ++l) {
    CHECK((back.weights.w[l] - ckpt.weights.w[l]).cwiseAbs().maxCoeff() == 0.0);
    CHECK((back.weights.b[l] - ckpt.weights.b[l]).cwiseAbs().maxCoeff() == 0.0);
  }
  const Eigen::VectorXd x = random_matrix(rng, 9, 1).col(0);
  CHECK((forward(back.weights, x) - forward(ckpt.weights, x)).cwiseAbs().maxCoeff() ==
        0.0);
}

TEST_CASE("spectral-fd gradients match finite differences through the synthesizer") {
  // Small real pipeline end to end; batch of one exercises the running-stat
  // fallback so the prediction depends on the input.
  FilterBankConfig cfg;
  cfg.octaves = 5;
  cfg.q1 = 4;
  cfg.freq_stride = 4;
  auto fe = std::make_shared<FeatureExtractor>(cfg);
  SynthOptions synth;
  synth.mode_limit = 6;
  SpectralFdContext ctx;
  ctx.includes_pitch = true;
  ctx.phi_g = [fe, synth](const NormalizedTheta& theta) {
    return fe->jtfs_log(synthesize(theta, 0.25, synth)).values.eval();
  };

  Rng rng(13);
  const int input = 6;
  EncoderWeights w = init_weights({input, 5, 5}, rng);
  const Eigen::MatrixXd x = random_matrix(rng, input, 1);

  // Target features from a nearby point.
  NormalizedTheta near;
  near.includes_pitch = true;
  near.values = forward_batch(w, x, true, 1e-5, nullptr).col(0) * 0.9;
  const Eigen::VectorXd target_phi = ctx.phi_g(near);
  ctx.target_phi = target_phi;
  ctx.fixed_pitch = {0.0};

  const double bn_eps = 1e-5;
  auto loss_of = [&](const EncoderWeights& weights) {
    const Eigen::MatrixXd out = forward_batch(weights, x, true, bn_eps, nullptr);
    NormalizedTheta theta;
    theta.includes_pitch = true;
    theta.values = out.col(0);
    return 0.5 * (ctx.phi_g(theta) - target_phi).squaredNorm();
  };

  // Analytic gradients via the chain rule with the FD Jacobian.
  const OutputGradFn out_grad = [&](const Eigen::MatrixXd& out) {
    NormalizedTheta theta;
    theta.includes_pitch = true;
    theta.values = out.col(0);
    const Eigen::VectorXd r = ctx.phi_g(theta) - target_phi;
    const JacobianMatrix jac = jacobian_fd(theta, ctx.phi_g, 1e-4);
    Eigen::MatrixXd g(out.rows(), 1);
    g.col(0) = jac.entries.transpose() * r;
    return g;
  };
  const BatchGradResult res = backward_with_output_grad(
      w, x, out_grad, [&](const Eigen::MatrixXd&) { return loss_of(w); }, bn_eps);

  Rng pick(14);
  int checked = 0;
  for (std::size_t l = 0; l < w.w.size() && checked < 10; ++l) {
    for (int k = 0; k < 5 && checked < 10; ++k) {
      const int r = int(pick.below(std::uint64_t(w.w[l].rows())));
      const int c = int(pick.below(std::uint64_t(w.w[l].cols())));
      const double h = 1e-5;
      const double saved = w.w[l](r, c);
      w.w[l](r, c) = saved + h;
      const double up = loss_of(w);
      w.w[l](r, c) = saved - h;
      const double dn = loss_of(w);
      w.w[l](r, c) = saved;
      const double fd = (up - dn) / (2.0 * h);
      const double analytic = res.grads.w[l](r, c);
      const double scale = std::max({std::abs(fd), std::abs(analytic), 1e-10});
      CHECK(std::abs(fd - analytic) / scale < 1e-3);
      ++checked;
    }
  }
}

TEST_CASE("spectral-fd at the target point has near-zero gradient") {
  FilterBankConfig cfg;
  cfg.octaves = 5;
  cfg.q1 = 4;
  cfg.freq_stride = 4;
  auto fe = std::make_shared<FeatureExtractor>(cfg);
  SynthOptions synth;
  synth.mode_limit = 6;

  Rng rng(15);
  const int input = 4;
  EncoderWeights w = init_weights({input, 4, 5}, rng);
  const Eigen::MatrixXd x = random_matrix(rng, input, 1);

  SpectralFdContext ctx;
  ctx.includes_pitch = true;
  ctx.phi_g = [fe, synth](const NormalizedTheta& theta) {
    return fe->jtfs_log(synthesize(theta, 0.25, synth)).values.eval();
  };
  // Target is exactly the model's own prediction: residual is zero.
  NormalizedTheta at;
  at.includes_pitch = true;
  at.values = forward_batch(w, x, true, 1e-5, nullptr).col(0);
  ctx.target_phi = ctx.phi_g(at);
  ctx.fixed_pitch = {0.0};

  const OutputGradFn out_grad = [&](const Eigen::MatrixXd& out) {
    NormalizedTheta theta;
    theta.includes_pitch = true;
    theta.values = out.col(0);
    const Eigen::VectorXd r = ctx.phi_g(theta) - ctx.target_phi.col(0);
    const JacobianMatrix jac = jacobian_fd(theta, ctx.phi_g, 1e-4);
    Eigen::MatrixXd g(out.rows(), 1);
    g.col(0) = jac.entries.transpose() * r;
    return g;
  };
  const BatchGradResult res = backward_with_output_grad(
      w, x, out_grad, [](const Eigen::MatrixXd&) { return 0.0; }, 1e-5);
  for (const auto& g : res.grads.w) {
    CHECK(g.cwiseAbs().maxCoeff() == 0.0);  // exact zero residual
  }
}
