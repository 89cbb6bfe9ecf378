#pragma once

#include <Eigen/Core>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "pnp/audio.hpp"

namespace pnp {

/// Wavelet filterbank and averaging configuration shared by the feature maps.
struct FilterBankConfig {
  int q1 = 12;      // first-order filters per octave
  int q2 = 1;       // second-order temporal filters per octave
  int q_fr = 1;     // frequential filters per octave
  int octaves = 10; // first-order span; top center at 0.85 * Nyquist
  double T = 3.0;   // temporal averaging window, seconds
  double F = 2.0;   // frequential averaging span, octaves
  double epsilon = 1e-3;
  double sample_rate = kDefaultSampleRate;

  // Reduced path set and output grid.
  int hop = 64;          // first-order hop in samples
  int rate_octaves = 6;  // temporal modulation rates span below the frame rate
  int fr_scales = 5;     // frequential modulation scales
  int freq_stride = 6;   // output subsampling along the bin axis

  std::vector<int> mss_windows = {2048, 1024, 512, 256, 128, 64};
  double mss_log_floor = 1e-7;

  int n_bins() const { return q1 * octaves; }
};

/// Constant-Q magnitude time-frequency grid. Bin frequencies ascend
/// geometrically with ratio 2^(1/q1).
struct Scalogram {
  Eigen::MatrixXd magnitudes;  // n_bins x n_frames
  std::vector<double> bin_frequencies_hz;
  int hop = 64;
  double sample_rate = kDefaultSampleRate;
};

enum class PathKind : int {
  kOrder1 = 1,    // scalogram, time and frequency averaged
  kTimeOnly = 2,  // temporal wavelet x frequential lowpass
  kFreqOnly = 3,  // temporal lowpass x frequential wavelet
  kJoint = 4,     // temporal wavelet x frequential wavelet
  kCqtMean = 5,   // time-pooled log-CQT, mean over frames
  kCqtMax = 6,    // time-pooled log-CQT, max over frames
  kMssMag = 7,
  kMssLog = 8,
};

struct PathDescriptor {
  PathKind kind = PathKind::kOrder1;
  int order = 1;
  double freq_hz = 0.0;    // center frequency of the output bin
  double rate_hz = 0.0;    // temporal modulation rate (0 = lowpass)
  double scale_cpo = 0.0;  // frequential modulation, cycles per octave (0 = lowpass)
  int orientation = 0;     // +1 up, -1 down, 0 none
  int time_frame = 0;

  bool operator==(const PathDescriptor&) const = default;
};

struct FeatureVector {
  std::string feature_map_id;
  Eigen::VectorXd values;
  // One descriptor per value; may be empty for bulk maps (MSS).
  std::vector<PathDescriptor> descriptors;

  Eigen::Index size() const { return values.size(); }
};

/// Elementwise log1p(v / epsilon). Throws std::domain_error on negative input.
FeatureVector log_compress(const FeatureVector& v, double epsilon);

/// Immutable once constructed; all transform calls are const and safe to run
/// concurrently. Filter banks are built lazily per padded input length and
/// cached behind a mutex.
class FeatureExtractor {
 public:
  explicit FeatureExtractor(FilterBankConfig cfg = {});
  ~FeatureExtractor();

  const FilterBankConfig& config() const { return cfg_; }

  Scalogram scalogram(const AudioBuffer& audio) const;

  /// Reduced joint time-frequency scattering, pre-log. Flattening order:
  /// order-1 paths, then time-only, freq-only and joint second-order paths,
  /// each spanning the subsampled frequency grid.
  FeatureVector jtfs(const AudioBuffer& audio) const;

  /// log1p(jtfs / epsilon): the perceptual map used by losses and metrics.
  FeatureVector jtfs_log(const AudioBuffer& audio) const;

  /// Multi-scale spectrogram: per window size, magnitude frames followed by
  /// log-magnitude frames, concatenated over window sizes.
  FeatureVector mss(const AudioBuffer& audio) const;

  /// Encoder input: per-bin mean and max over frames of the log-compressed
  /// constant-Q scalogram, concatenated (2 * n_bins values).
  FeatureVector encoder_input(const AudioBuffer& audio) const;

  std::string jtfs_id() const;
  std::string mss_id() const;
  std::string cqt_id() const;

  int jtfs_size() const;  // P for default single-time-frame output

 private:
  struct Bank;
  const Bank& bank_for(std::size_t length) const;

  FilterBankConfig cfg_;
  mutable std::mutex mutex_;
  mutable std::map<std::size_t, std::shared_ptr<const Bank>> banks_;
};

/// Flat binary record: magic "PNPF", version, feature_map_id, P, f64 values.
void write_feature_file(const FeatureVector& v, const std::string& path);
FeatureVector read_feature_file(const std::string& path);

/// CSV with descriptor columns when descriptors are present, else index,value.
void write_feature_csv(const FeatureVector& v, const std::string& path);

}  // namespace pnp
