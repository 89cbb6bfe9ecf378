#include "pnp/matcher.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "pnp/metric.hpp"

namespace pnp {

Eigen::VectorXd solve_damped_normal_equations(const Eigen::MatrixXd& m, double lambda,
                                              const Eigen::VectorXd& g) {
  if (m.rows() != m.cols() || m.rows() != g.size()) {
    throw std::invalid_argument("solve_damped_normal_equations: shape mismatch");
  }
  if (!(lambda >= 0.0)) {
    throw std::domain_error("solve_damped_normal_equations: lambda must be >= 0");
  }
  const Eigen::MatrixXd a =
      m + lambda * Eigen::MatrixXd::Identity(m.rows(), m.cols());
  const Eigen::LDLT<Eigen::MatrixXd> ldlt(a);
  Eigen::VectorXd s;
  bool ok = ldlt.info() == Eigen::Success;
  if (ok) {
    s = ldlt.solve(g);
    const double rel = (a * s - g).norm() / std::max(g.norm(), 1e-300);
    ok = s.allFinite() && (g.norm() == 0.0 || rel < 1e-10);
  }
  if (!ok) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(a);
    std::ostringstream msg;
    msg << "solve_damped_normal_equations: system not SPD within tolerance";
    if (eig.info() == Eigen::Success) {
      const double lo = eig.eigenvalues().minCoeff();
      const double hi = eig.eigenvalues().maxCoeff();
      msg << " (eigenvalue range [" << lo << ", " << hi << "], cond ~ "
          << (lo != 0.0 ? hi / lo : std::numeric_limits<double>::infinity()) << ")";
    }
    throw std::runtime_error(msg.str());
  }
  return s;
}

namespace {

NormalizedTheta clamp_theta(NormalizedTheta theta) {
  for (int i = 0; i < theta.dim(); ++i) {
    theta.values[i] = std::clamp(theta.values[i], -1.0, 1.0);
  }
  return theta;
}

}  // namespace

MatchResult lm_minimize(const ResidualFn& residual, const NormalizedTheta& init,
                        const LmOptions& opts) {
  MatchResult result;
  result.theta_hat = clamp_theta(init);

  Eigen::VectorXd r;
  try {
    r = residual(result.theta_hat);
  } catch (const std::exception& e) {
    result.message = std::string("initial residual evaluation failed: ") + e.what();
    return result;
  }
  double loss = 0.5 * r.squaredNorm();
  result.residual_norm = r.norm();
  result.loss_trace.push_back(loss);
  if (result.residual_norm == 0.0) {
    result.converged = true;
    result.message = "exact fixed point";
    return result;
  }

  double lambda = -1.0;  // seeded from the first J^T J diagonal below
  double fd_step = opts.fd_step;
  for (int iter = 1; iter <= opts.max_iterations; ++iter) {
    JacobianMatrix jac;
    try {
      jac = jacobian_fd(result.theta_hat, residual, fd_step, "",
                        opts.jacobian_workers);
    } catch (const std::exception& e) {
      result.message = std::string("jacobian evaluation failed: ") + e.what();
      return result;
    }
    const Eigen::MatrixXd m = gram(jac);
    const Eigen::VectorXd g = jac.entries.transpose() * r;
    if (g.norm() < opts.grad_tol) {
      result.converged = true;
      result.message = "gradient norm below tolerance";
      result.iterations = iter - 1;
      return result;
    }
    if (lambda < 0.0) {
      lambda = opts.tau * std::max(m.diagonal().maxCoeff(), 1e-12);
      result.lambda_trace.push_back(lambda);
    }

    bool accepted = false;
    while (!accepted) {
      Eigen::VectorXd step;
      try {
        step = -solve_damped_normal_equations(m, lambda, g);
      } catch (const std::exception& e) {
        result.message = std::string("normal equations failed: ") + e.what();
        result.iterations = iter;
        return result;
      }

      // Try the clamped step, halving it while a clamp is active and the
      // residual does not improve.
      double trial_loss = 0.0;
      NormalizedTheta trial;
      Eigen::VectorXd r_trial;
      bool improved = false;
      Eigen::VectorXd s = step;
      for (int bt = 0; bt <= opts.max_backtracks; ++bt) {
        trial = result.theta_hat;
        trial.values += s;
        const bool clamped = [&] {
          for (int i = 0; i < trial.dim(); ++i) {
            if (trial.values[i] < -1.0 || trial.values[i] > 1.0) return true;
          }
          return false;
        }();
        trial = clamp_theta(trial);
        try {
          r_trial = residual(trial);
        } catch (const std::exception&) {
          break;  // treat as a failed probe; reject and raise damping
        }
        trial_loss = 0.5 * r_trial.squaredNorm();
        if (trial_loss < loss) {
          improved = true;
          break;
        }
        if (!clamped) break;  // plain rejection, let damping handle it
        s *= 0.5;
      }

      if (improved) {
        const double moved = (trial.values - result.theta_hat.values).norm();
        result.theta_hat = trial;
        r = r_trial;
        loss = trial_loss;
        result.residual_norm = r.norm();
        result.loss_trace.push_back(loss);
        lambda /= opts.lambda_factor;
        result.lambda_trace.push_back(lambda);
        accepted = true;
        if (moved < opts.step_tol) {
          result.converged = true;
          result.message = "step norm below tolerance";
          result.iterations = iter;
          return result;
        }
      } else {
        lambda *= opts.lambda_factor;
        result.lambda_trace.push_back(lambda);
        if (lambda > opts.lambda_max) {
          // The quadratic model at this step scale stopped predicting the
          // surface; refine the finite-difference step and retry before
          // giving up.
          if (fd_step > opts.fd_step_min * (1.0 + 1e-12)) {
            fd_step = std::max(opts.fd_step_min, fd_step / 10.0);
            lambda = -1.0;
            break;
          }
          result.message = "damping exceeded lambda_max without improvement";
          result.iterations = iter;
          return result;
        }
      }
    }
    result.iterations = iter;
  }
  result.message = "max iterations reached";
  return result;
}

MatchResult match(const AudioBuffer& target, const NormalizedTheta& theta_init,
                  const FeatureExtractor& extractor, const SynthOptions& synth,
                  const LmOptions& opts) {
  const FeatureVector target_phi = extractor.jtfs_log(target);
  const double duration = target.duration();
  ResidualFn residual = [&extractor, &synth, target_phi,
                         duration](const NormalizedTheta& theta) {
    const AudioBuffer rendered = synthesize(theta, duration, synth);
    return (extractor.jtfs_log(rendered).values - target_phi.values).eval();
  };
  return lm_minimize(residual, theta_init, opts);
}

}  // namespace pnp
