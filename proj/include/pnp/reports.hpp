#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <string>
#include <vector>

#include "pnp/dataset.hpp"
#include "pnp/encoder.hpp"
#include "pnp/features.hpp"
#include "pnp/metric.hpp"

namespace pnp {

struct PredictionRow {
  std::uint64_t sample_id = 0;
  Eigen::VectorXd theta_true;
  Eigen::VectorXd theta_pred;
};

void write_predictions_csv(const std::vector<PredictionRow>& rows,
                           const std::string& path);
std::vector<PredictionRow> read_predictions_csv(const std::string& path);

/// Test-set predictions of a trained encoder (inference mode).
std::vector<PredictionRow> predict_test_set(const DatasetManifest& manifest,
                                            const std::string& dir,
                                            const Checkpoint& ckpt);

struct EvalMetrics {
  double jtfs_mean = 0.0;  // mean L2 distance of log-compressed scattering
  double mss_mean = 0.0;   // mean L2 distance of the multi-scale spectrogram
  int n = 0;
};

/// Distances between the render of each prediction and the render of the
/// true parameters, averaged over the given rows. Order-invariant.
EvalMetrics evaluate_predictions(const DatasetManifest& manifest,
                                 const std::vector<PredictionRow>& rows,
                                 const FeatureExtractor& extractor,
                                 unsigned workers = 0);

struct EvalRow {
  std::string loss_label;
  std::string phi_label;
  std::string pitch_label;
  double jtfs_mean = 0.0, jtfs_std = 0.0;
  double mss_mean = 0.0, mss_std = 0.0;
  double epoch_seconds = 0.0;
  int runs = 0;
};

/// Aggregates per-run metrics into one table row; the spread is the standard
/// deviation across runs (0 for a single run).
EvalRow aggregate_eval(const std::string& loss_label, const std::string& phi_label,
                       const std::string& pitch_label,
                       const std::vector<EvalMetrics>& per_run,
                       double mean_epoch_seconds);

/// Table-style CSV: loss, phi, pitch, jtfs distance, MSS, epoch wall-clock.
void write_eval_csv(const std::vector<EvalRow>& rows, const std::string& path,
                    bool append = false);

/// Per-sample sorted eigenvalue spectra plus an identity-matrix reference
/// row, for the eigenvalue-distribution plot.
void write_eig_report(const std::string& cache_path, const std::string& out_path);

/// Histograms of log10 squared tau error, split into the top-20% and
/// bottom-20% samples by the tau diagonal entry of M. Ties are broken by a
/// seeded permutation; errors clamp at log10(1e-12). Requires >= 10 samples.
void write_tau_histogram(const std::string& predictions_path,
                         const std::string& cache_path, const std::string& out_path,
                         std::uint64_t seed = 0);

}  // namespace pnp
