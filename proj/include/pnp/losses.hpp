#pragma once

#include <Eigen/Core>

#include "pnp/features.hpp"
#include "pnp/metric.hpp"

namespace pnp {

enum class LossKind { kPLoss, kSpectral, kPnp };

struct LossValue {
  double value = 0.0;
  LossKind kind = LossKind::kPLoss;
  double lambda = 0.0;  // damping, PNP only
};

/// 1/2 ||theta_hat - theta||^2.
LossValue p_loss(const Eigen::VectorXd& theta_hat, const Eigen::VectorXd& theta);

/// 1/2 ||phi_a - phi_b||^2 over matching feature maps.
LossValue spectral_loss(const FeatureVector& phi_a, const FeatureVector& phi_b);

/// 1/2 <dtheta | M + lambda I | dtheta>.
LossValue pnp_loss(const Eigen::VectorXd& theta_hat, const Eigen::VectorXd& theta,
                   const MetricRecord& metric, double lambda);

/// Eigen form: 1/2 (sum_j sigma2_j <dtheta, v_j>^2 + lambda ||dtheta||^2).
LossValue pnp_loss_eig(const Eigen::VectorXd& theta_hat, const Eigen::VectorXd& theta,
                       const MetricRecord& metric, double lambda);

/// Gradient of pnp_loss with respect to theta_hat: (M + lambda I)(theta_hat - theta).
Eigen::VectorXd pnp_grad_factor(const Eigen::VectorXd& theta_hat,
                                const Eigen::VectorXd& theta,
                                const MetricRecord& metric, double lambda);

}  // namespace pnp
