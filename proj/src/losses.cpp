#include "pnp/losses.hpp"

#include <stdexcept>
#include <string>

namespace pnp {

namespace {

void check_dims(const Eigen::VectorXd& a, const Eigen::VectorXd& b, const char* who) {
  if (a.size() != b.size()) {
    throw std::invalid_argument(std::string(who) + ": dimension mismatch, " +
                                std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()));
  }
}

void check_lambda(double lambda, const char* who) {
  if (!(lambda >= 0.0)) {
    throw std::domain_error(std::string(who) + ": lambda must be nonnegative");
  }
}

}  // namespace

LossValue p_loss(const Eigen::VectorXd& theta_hat, const Eigen::VectorXd& theta) {
  check_dims(theta_hat, theta, "p_loss");
  return {0.5 * (theta_hat - theta).squaredNorm(), LossKind::kPLoss, 0.0};
}

LossValue spectral_loss(const FeatureVector& phi_a, const FeatureVector& phi_b) {
  if (phi_a.feature_map_id != phi_b.feature_map_id) {
    throw std::invalid_argument("spectral_loss: feature map mismatch: " +
                                phi_a.feature_map_id + " vs " + phi_b.feature_map_id);
  }
  check_dims(phi_a.values, phi_b.values, "spectral_loss");
  return {0.5 * (phi_a.values - phi_b.values).squaredNorm(), LossKind::kSpectral, 0.0};
}

LossValue pnp_loss(const Eigen::VectorXd& theta_hat, const Eigen::VectorXd& theta,
                   const MetricRecord& metric, double lambda) {
  check_dims(theta_hat, theta, "pnp_loss");
  check_lambda(lambda, "pnp_loss");
  if (metric.m.rows() != theta.size()) {
    throw std::invalid_argument("pnp_loss: metric dimension mismatch");
  }
  const Eigen::VectorXd d = theta_hat - theta;
  const double quad = d.dot(metric.m * d) + lambda * d.squaredNorm();
  return {0.5 * quad, LossKind::kPnp, lambda};
}

LossValue pnp_loss_eig(const Eigen::VectorXd& theta_hat, const Eigen::VectorXd& theta,
                       const MetricRecord& metric, double lambda) {
  check_dims(theta_hat, theta, "pnp_loss_eig");
  check_lambda(lambda, "pnp_loss_eig");
  if (metric.eigenvectors.rows() != theta.size()) {
    throw std::invalid_argument("pnp_loss_eig: eigendecomposition missing or mismatched");
  }
  const Eigen::VectorXd d = theta_hat - theta;
  double quad = lambda * d.squaredNorm();
  for (Eigen::Index j = 0; j < metric.eigenvalues.size(); ++j) {
    const double proj = metric.eigenvectors.col(j).dot(d);
    quad += metric.eigenvalues[j] * proj * proj;
  }
  return {0.5 * quad, LossKind::kPnp, lambda};
}

Eigen::VectorXd pnp_grad_factor(const Eigen::VectorXd& theta_hat,
                                const Eigen::VectorXd& theta,
                                const MetricRecord& metric, double lambda) {
  check_dims(theta_hat, theta, "pnp_grad_factor");
  check_lambda(lambda, "pnp_grad_factor");
  if (metric.m.rows() != theta.size()) {
    throw std::invalid_argument("pnp_grad_factor: metric dimension mismatch");
  }
  const Eigen::VectorXd d = theta_hat - theta;
  return metric.m * d + lambda * d;
}

}  // namespace pnp
