#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "pnp/ftm.hpp"

namespace pnp {

/// The differentiable composition Phi o g evaluated at a normalized point.
using FeatureFn = std::function<Eigen::VectorXd(const NormalizedTheta&)>;

struct JacobianMatrix {
  Eigen::MatrixXd entries;  // P x J
  NormalizedTheta theta;
  Eigen::VectorXd fd_step;          // per-component step actually used
  std::vector<std::uint8_t> one_sided;  // boundary flag per component
  std::string feature_map_id;
};

/// M(theta) = J^T J with its eigendecomposition and provenance.
struct MetricRecord {
  std::uint64_t sample_id = 0;
  Eigen::MatrixXd m;             // J x J symmetric PSD
  Eigen::VectorXd eigenvalues;   // descending, clamped at 0
  Eigen::MatrixXd eigenvectors;  // orthonormal columns, matching order
  NormalizedTheta theta;
  std::string feature_map_id;
  double fd_step = 0.0;
};

constexpr double kDefaultFdStep = 1e-3;

/// Central finite differences of phi_g in normalized coordinates,
/// column j = (phi(theta + h e_j) - phi(theta - h e_j)) / (2h).
/// Components within h of the [-1,1] boundary fall back to a one-sided
/// difference and are flagged. Synthesis failures at a probe point are
/// rethrown with the probe identified. With workers > 1 the probe points
/// are evaluated concurrently (phi_g must be thread-safe).
JacobianMatrix jacobian_fd(const NormalizedTheta& theta, const FeatureFn& phi_g,
                           double h = kDefaultFdStep,
                           const std::string& feature_map_id = "",
                           unsigned workers = 1);

/// Per-component step override.
JacobianMatrix jacobian_fd(const NormalizedTheta& theta, const FeatureFn& phi_g,
                           const Eigen::VectorXd& h,
                           const std::string& feature_map_id = "",
                           unsigned workers = 1);

/// Gram matrix J^T J.
Eigen::MatrixXd gram(const JacobianMatrix& jac);

/// Symmetric eigendecomposition with descending eigenvalues, orthonormal
/// eigenvectors, and a deterministic sign convention (largest-magnitude
/// component positive). Throws std::invalid_argument when m is not
/// symmetric within tolerance.
void eig_sym(const Eigen::MatrixXd& m, Eigen::VectorXd& eigenvalues,
             Eigen::MatrixXd& eigenvectors);

/// M + lambda I. Throws std::domain_error for lambda < 0.
Eigen::MatrixXd damp(const Eigen::MatrixXd& m, double lambda);

/// Builds the cacheable record: Gram matrix, clamped eigendecomposition.
MetricRecord make_metric_record(std::uint64_t sample_id, const JacobianMatrix& jac);

/// Binary cache, little-endian: magic "PNPM", version u32, J u32, N u64,
/// feature_map_id (u32 length + bytes), then per record: sample id u64,
/// theta (J f64), M upper triangle (J(J+1)/2 f64), eigenvalues (J f64),
/// eigenvectors (J^2 f64, column-major), fd_step f64.
void cache_write(const std::vector<MetricRecord>& records, const std::string& path);
std::vector<MetricRecord> cache_read(const std::string& path);

/// In-memory index over a loaded cache for O(1) lookup by sample id.
class MetricCache {
 public:
  MetricCache() = default;
  explicit MetricCache(std::vector<MetricRecord> records);
  static MetricCache load(const std::string& path);

  const MetricRecord* find(std::uint64_t sample_id) const;
  /// Throws std::out_of_range naming the sample when absent.
  const MetricRecord& at(std::uint64_t sample_id) const;
  const std::vector<MetricRecord>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }
  /// Largest eigenvalue across all records (0 when empty).
  double max_eigenvalue() const;

 private:
  std::vector<MetricRecord> records_;
  std::unordered_map<std::uint64_t, std::size_t> index_;
};

/// CSV of per-sample eigenvalue spectra: sample_id, sigma2_1..sigma2_J.
void write_eigenvalue_csv(const std::vector<MetricRecord>& records,
                          const std::string& path);

}  // namespace pnp
