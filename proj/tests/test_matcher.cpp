#include <doctest.h>

#include <cmath>

#include "pnp/features.hpp"
#include "pnp/matcher.hpp"
#include "pnp/rng.hpp"

using namespace pnp;

namespace {

NormalizedTheta theta_of(std::initializer_list<double> vals, bool pitch = true) {
  NormalizedTheta t;
  t.includes_pitch = pitch;
  t.values.resize(Eigen::Index(vals.size()));
  Eigen::Index i = 0;
  for (const double v : vals) t.values[i++] = v;
  return t;
}

}  // namespace

TEST_CASE("damped normal equations solve small systems") {
  Eigen::VectorXd g(3);
  g << 1.0, -2.0, 0.5;
  SUBCASE("zero matrix with unit damping returns the right-hand side") {
    const Eigen::VectorXd s =
        solve_damped_normal_equations(Eigen::MatrixXd::Zero(3, 3), 1.0, g);
    CHECK((s - g).cwiseAbs().maxCoeff() < 1e-14);
  }
  SUBCASE("identity with unit damping halves it") {
    const Eigen::VectorXd s =
        solve_damped_normal_equations(Eigen::MatrixXd::Identity(3, 3), 1.0, g);
    CHECK((s - 0.5 * g).cwiseAbs().maxCoeff() < 1e-14);
  }
  SUBCASE("random SPD systems solve to tight residuals") {
    Rng rng(2);
    for (int trial = 0; trial < 50; ++trial) {
      Eigen::MatrixXd a(5, 5);
      for (int r = 0; r < 5; ++r) {
        for (int c = 0; c < 5; ++c) a(r, c) = rng.gaussian();
      }
      const Eigen::MatrixXd m = a * a.transpose();
      Eigen::VectorXd rhs(5);
      for (int r = 0; r < 5; ++r) rhs[r] = rng.gaussian();
      const double lambda = rng.uniform(1e-6, 1.0);
      const Eigen::VectorXd s = solve_damped_normal_equations(m, lambda, rhs);
      const Eigen::MatrixXd damped =
          m + lambda * Eigen::MatrixXd::Identity(5, 5);
      CHECK((damped * s - rhs).norm() < 1e-10 * rhs.norm());
    }
  }
  SUBCASE("negative lambda is rejected") {
    CHECK_THROWS_AS(
        solve_damped_normal_equations(Eigen::MatrixXd::Identity(2, 2), -1.0,
                                      Eigen::VectorXd::Zero(2)),
        std::domain_error);
  }
}

TEST_CASE("large damping turns the step into a scaled gradient") {
  Rng rng(3);
  Eigen::MatrixXd a(6, 4);
  for (int r = 0; r < 6; ++r) {
    for (int c = 0; c < 4; ++c) a(r, c) = rng.gaussian();
  }
  const Eigen::MatrixXd m = a.transpose() * a;
  Eigen::VectorXd evals;
  Eigen::MatrixXd evecs;
  eig_sym(m, evals, evecs);
  Eigen::VectorXd g(4);
  for (int c = 0; c < 4; ++c) g[c] = rng.gaussian();

  const double lambda = 1e6 * evals[0];
  const Eigen::VectorXd step = solve_damped_normal_equations(m, lambda, g);
  const double cosine = step.dot(g) / (step.norm() * g.norm());
  CHECK(std::acos(std::min(1.0, cosine)) < 1e-3);
}

TEST_CASE("linear residuals converge in one accepted step") {
  Rng rng(4);
  Eigen::MatrixXd a(6, 3);
  for (int r = 0; r < 6; ++r) {
    for (int c = 0; c < 3; ++c) a(r, c) = rng.gaussian();
  }
  const Eigen::VectorXd target = Eigen::Vector3d(0.3, -0.2, 0.5);
  const ResidualFn residual = [&](const NormalizedTheta& t) {
    return (a * (t.values - target)).eval();
  };
  const MatchResult res = lm_minimize(residual, theta_of({0.0, 0.0, 0.0}), {});
  CHECK(res.converged);
  CHECK(res.iterations <= 3);
  CHECK((res.theta_hat.values - target).cwiseAbs().maxCoeff() < 1e-8);
  // Accepted losses decrease strictly.
  for (std::size_t i = 1; i < res.loss_trace.size(); ++i) {
    CHECK(res.loss_trace[i] < res.loss_trace[i - 1]);
  }
}

TEST_CASE("an exact fixed point converges without stepping") {
  const ResidualFn residual = [](const NormalizedTheta&) {
    return Eigen::VectorXd::Zero(4).eval();
  };
  const MatchResult res = lm_minimize(residual, theta_of({0.1, -0.2, 0.3}), {});
  CHECK(res.converged);
  CHECK(res.iterations <= 1);
  CHECK(res.residual_norm < 1e-8);
}

TEST_CASE("rejected steps multiply the damping by five") {
  // Rosenbrock-style valley: the Gauss-Newton step from the classic start
  // overshoots, forcing rejections.
  const ResidualFn residual = [](const NormalizedTheta& t) {
    Eigen::VectorXd r(2);
    r[0] = 1.0 - t.values[0];
    r[1] = 10.0 * (t.values[1] - t.values[0] * t.values[0]);
    return r;
  };
  LmOptions opts;
  opts.fd_step = 1e-6;
  opts.fd_step_min = 1e-6;
  const MatchResult res =
      lm_minimize(residual, theta_of({-1.0, 1.0}, false), opts);
  CHECK(res.converged);
  CHECK((res.theta_hat.values - Eigen::Vector2d(1.0, 1.0)).cwiseAbs().maxCoeff() <
        1e-5);
  // Lambda trace only moves by factor-five jumps, and at least one rejection
  // occurred along the way.
  bool saw_increase = false;
  for (std::size_t i = 1; i < res.lambda_trace.size(); ++i) {
    const double ratio = res.lambda_trace[i] / res.lambda_trace[i - 1];
    const bool up = std::abs(ratio - 5.0) < 1e-9;
    const bool down = std::abs(ratio - 0.2) < 1e-9;
    CHECK((up || down));
    saw_increase = saw_increase || up;
  }
  CHECK(saw_increase);
  for (const double l : res.lambda_trace) CHECK(l > 0.0);
}

TEST_CASE("iterates stay inside the box under clamping") {
  // Minimum outside the box: the matcher must settle on the boundary.
  const ResidualFn residual = [](const NormalizedTheta& t) {
    Eigen::VectorXd r(2);
    r[0] = t.values[0] - 2.0;  // optimum at 2, outside [-1, 1]
    r[1] = t.values[1] - 0.5;
    return r;
  };
  const MatchResult res = lm_minimize(residual, theta_of({0.0, 0.0}, false), {});
  CHECK(res.theta_hat.values[0] <= 1.0);
  CHECK(res.theta_hat.values[0] >= 1.0 - 1e-6);
  CHECK(res.theta_hat.values[1] == doctest::Approx(0.5).epsilon(1e-6));
}

TEST_CASE("failures return diagnostics instead of throwing") {
  const ResidualFn residual = [](const NormalizedTheta&) -> Eigen::VectorXd {
    throw std::runtime_error("synth exploded");
  };
  const MatchResult res = lm_minimize(residual, theta_of({0.0}, false), {});
  CHECK(!res.converged);
  CHECK(res.message.find("synth exploded") != std::string::npos);
}

TEST_CASE("self-match on the real pipeline recovers a perturbed start") {
  FilterBankConfig cfg;
  cfg.octaves = 6;
  cfg.q1 = 6;
  cfg.freq_stride = 4;
  FeatureExtractor fe(cfg);
  SynthOptions synth;
  synth.mode_limit = 8;

  Rng rng(6);
  NormalizedTheta truth;
  truth.includes_pitch = true;
  truth.values.resize(5);
  truth.values << 0.2, -0.3, 0.4, 0.5, 0.6;

  NormalizedTheta init;
  init.includes_pitch = false;
  init.fixed_pitch = truth.values[0];
  init.values.resize(4);
  for (int j = 0; j < 4; ++j) {
    init.values[j] = truth.values[j + 1] + rng.uniform(-0.03, 0.03);
  }

  const AudioBuffer target = synthesize(truth, 0.75, synth);
  LmOptions opts;
  opts.max_iterations = 40;
  const MatchResult res = match(target, init, fe, synth, opts);
  for (int j = 0; j < 4; ++j) {
    CHECK(std::abs(res.theta_hat.values[j] - truth.values[j + 1]) < 1e-3);
  }
  // The exact fixed point terminates immediately.
  NormalizedTheta exact = init;
  exact.values = truth.values.tail(4);
  const MatchResult fixed = match(target, exact, fe, synth, opts);
  CHECK(fixed.converged);
  CHECK(fixed.iterations <= 1);
  CHECK(fixed.residual_norm < 1e-8);
}
