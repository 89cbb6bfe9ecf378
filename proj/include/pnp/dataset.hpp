#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pnp/encoder.hpp"
#include "pnp/features.hpp"
#include "pnp/ftm.hpp"
#include "pnp/metric.hpp"

namespace pnp {

enum class Split : int { kTrain = 0, kVal = 1, kTest = 2 };

std::string split_name(Split s);
Split split_from_name(const std::string& name);

struct SampleEntry {
  std::uint64_t id = 0;
  Split split = Split::kTrain;
  NormalizedTheta theta;  // full 5-component vector
  ShapeParams shape;
  std::string audio_path;    // relative to the dataset directory
  std::string feature_path;  // encoder-input features, relative
};

/// Uniformly sampled dataset with a disjoint, exhaustive 8:1:1 split.
struct DatasetManifest {
  int n = 0;
  std::uint64_t seed = 0;
  bool pitch_known = false;  // known pitch: downstream J = 4
  double sample_rate = kDefaultSampleRate;
  double duration = 0.0;
  int mode_limit = kDefaultModeLimit;
  std::string feature_map_id;
  int redraws = 0;
  std::vector<SampleEntry> samples;

  int target_dim() const { return pitch_known ? 4 : 5; }
  std::vector<std::size_t> split_indices(Split s) const;
  /// The regression target for a sample under this manifest's pitch mode.
  NormalizedTheta target_theta(const SampleEntry& e) const;
};

/// Floor-based 8:1:1 assignment over a seeded shuffle: floor(0.8 N) train,
/// floor(0.1 N) validation, remainder test.
std::vector<Split> assign_splits(int n, Rng& rng);

struct DatasetOptions {
  int n = 1000;
  std::uint64_t seed = 0;
  bool pitch_known = false;
  double sample_rate = kDefaultSampleRate;
  double duration = 0.0;  // <= 0: 2^16 samples
  int mode_limit = kDefaultModeLimit;
  bool overwrite = false;
  unsigned workers = 0;  // 0: PNP_WORKERS or hardware
  int max_redraws_per_sample = 64;
};

/// Draws theta uniformly in the normalized cube, renders audio, extracts
/// encoder-input features, writes WAVs plus manifest. Deterministic under a
/// fixed seed. Infeasible draws are redrawn and counted.
DatasetManifest generate_dataset(const std::string& out_dir, const DatasetOptions& opts,
                                 const FeatureExtractor& extractor);

void write_manifest(const DatasetManifest& manifest, const std::string& dir);
DatasetManifest load_manifest(const std::string& dir);

/// log-compressed scattering features of g(theta) at the manifest's render
/// settings; the Phi o g used for metrics, matching and evaluation.
FeatureFn make_phi_g(const DatasetManifest& manifest, const FeatureExtractor& extractor);

struct MetricJobReport {
  int n_ok = 0;
  std::vector<std::pair<std::uint64_t, std::string>> failures;
};

/// Computes MetricRecords (in sample-id order) for the selected splits,
/// writes the binary cache and the per-sample eigenvalue CSV. Per-sample
/// failures are recorded and the run continues.
MetricJobReport compute_metric_cache(const DatasetManifest& manifest,
                                     const FeatureExtractor& extractor, double fd_step,
                                     const std::vector<Split>& splits,
                                     const std::string& cache_path,
                                     const std::string& eigs_csv_path,
                                     unsigned workers = 0);

/// Loads stored encoder-input features and targets into training memory.
TrainingSet load_training_set(const DatasetManifest& manifest, const std::string& dir);

}  // namespace pnp
