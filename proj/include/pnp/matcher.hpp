#pragma once

#include <Eigen/Core>
#include <functional>
#include <string>
#include <vector>

#include "pnp/audio.hpp"
#include "pnp/features.hpp"
#include "pnp/ftm.hpp"
#include "pnp/metric.hpp"

namespace pnp {

/// Residual vector r(theta) whose squared half-norm is minimized.
using ResidualFn = std::function<Eigen::VectorXd(const NormalizedTheta&)>;

struct LmOptions {
  double tau = 1e-3;             // lambda0 = tau * max diag(J^T J)
  int max_iterations = 200;
  double grad_tol = 1e-8;        // stop on ||J^T r||_2 below this
  double step_tol = 1e-10;       // stop on accepted-step norm below this
  double lambda_factor = 5.0;    // accept: /5, reject: *5
  double lambda_max = 1e12;      // rejection bound before a refinement phase
  double fd_step = kDefaultFdStep;
  double fd_step_min = 1e-5;     // finest refinement phase
  int max_backtracks = 4;        // step halvings when a clamp activates
  unsigned jacobian_workers = 1; // concurrent finite-difference probes
};

struct MatchResult {
  NormalizedTheta theta_hat;
  double residual_norm = 0.0;  // ||r|| at theta_hat
  int iterations = 0;
  std::vector<double> lambda_trace;  // every lambda value used, in order
  bool converged = false;
  std::vector<double> loss_trace;  // spectral loss at accepted iterates
  std::string message;
};

/// Solves (M + lambda I) s = g with a symmetric positive-definite
/// factorization; relative residual below 1e-10 or a numerical error with a
/// condition estimate is thrown.
Eigen::VectorXd solve_damped_normal_equations(const Eigen::MatrixXd& m, double lambda,
                                              const Eigen::VectorXd& g);

/// Damped Gauss-Newton descent on 1/2 ||r(theta)||^2 in the normalized box.
/// The Jacobian is refreshed by finite differences every accepted iteration;
/// steps are accepted only when the residual strictly decreases (lambda /= 5)
/// and rejected otherwise (lambda *= 5). Iterates are clamped to [-1,1]^J
/// with step-halving backtracking when a clamp activates. Unrecoverable
/// failures return a diagnostic result, never throw.
MatchResult lm_minimize(const ResidualFn& residual, const NormalizedTheta& init,
                        const LmOptions& opts = {});

/// Direct sound matching: minimizes || Phi(g(theta)) - Phi(target) || on
/// log-compressed scattering features of the target buffer.
MatchResult match(const AudioBuffer& target, const NormalizedTheta& theta_init,
                  const FeatureExtractor& extractor, const SynthOptions& synth = {},
                  const LmOptions& opts = {});

}  // namespace pnp
