#pragma once

#include <Eigen/Core>
#include <string>
#include <vector>

#include "pnp/audio.hpp"

namespace pnp {

/// Physical shape parameters of the damped stiff rectangular membrane.
/// omega1 is the fundamental frequency in Hz, tau1 the decay duration of the
/// fundamental mode in seconds, p the inhomogeneous damping ratio, dispersion
/// the frequential dispersion D, alpha the side-length aspect ratio.
struct ShapeParams {
  double omega1_hz = 200.0;
  double tau1_s = 1.0;
  double p = 1e-3;
  double dispersion = 1e-3;
  double alpha = 0.5;
};

/// Declared sonically-plausible ranges. omega1, p, D and alpha are sampled
/// and normalized on a log scale, tau1 on a linear scale.
namespace ranges {
constexpr double kOmegaLo = 40.0, kOmegaHi = 1000.0;  // Hz
constexpr double kTauLo = 0.4, kTauHi = 3.0;          // s
constexpr double kPLo = 1e-5, kPHi = 0.2;
constexpr double kDLo = 1e-5, kDHi = 0.3;
constexpr double kAlphaLo = 1e-5, kAlphaHi = 1.0;
}  // namespace ranges

/// Point in the [-1,1]^J search space. J=5 when the pitch coordinate is part
/// of the vector; J=4 when the pitch is known and held fixed (its normalized
/// coordinate is carried in fixed_pitch).
struct NormalizedTheta {
  Eigen::VectorXd values;
  bool includes_pitch = true;
  double fixed_pitch = 0.0;

  int dim() const { return int(values.size()); }
  /// Index of tau1 inside `values`.
  int tau_index() const { return includes_pitch ? 1 : 0; }
};

/// Names of the normalized coordinates, in vector order.
std::vector<std::string> theta_names(bool includes_pitch);

/// PDE coefficients of the damped stiff membrane with side lengths l and
/// l*alpha. Invariants: d1 >= 0 and d3 <= 0 so every mode decays.
struct PdeCoeffs {
  double stiffness = 0.0;   // S, fourth-order spatial coefficient
  double wave_speed = 0.0;  // c
  double d1 = 0.0;          // frequency-independent damping
  double d3 = 0.0;          // frequency-dependent damping (non-positive)
  double alpha = 1.0;
  double side_length = 1.0;  // l, fixed to 1 by convention
};

struct Mode {
  int m1 = 0;
  int m2 = 0;
  double omega = 0.0;  // rad/s
  double sigma = 0.0;  // 1/s, negative for retained modes
  double gain = 0.0;
};

struct ModeTable {
  std::vector<Mode> modes;
  int mode_limit = 0;
  int dropped_above_nyquist = 0;
  int dropped_nonpositive = 0;
};

constexpr int kDefaultModeLimit = 32;
constexpr double kExcitationAmplitude = 0.03;
constexpr double kExcitationPosition = 0.4;  // of (l, l*alpha)

struct SynthOptions {
  double sample_rate = kDefaultSampleRate;
  int mode_limit = kDefaultModeLimit;
  double excitation_amp = kExcitationAmplitude;
  bool normalize_audio = false;
};

/// Affine map of (log w1, tau1, log p, log D, log alpha) onto [-1,1].
/// Throws std::out_of_range naming the offending component.
NormalizedTheta normalize(const ShapeParams& shape, bool include_pitch);

/// Exact inverse of normalize. Throws std::out_of_range when a component
/// lies outside [-1,1].
ShapeParams denormalize(const NormalizedTheta& theta);

/// Maps shape parameters to PDE coefficients (l = 1) such that mode (1,1)
/// has angular frequency 2*pi*omega1 and decay rate -1/tau1, p interpolates
/// frequency-independent vs frequency-dependent damping, and D is the
/// stiffness share of omega_{1,1}^2.
///
/// This realizes the intent of the perceptual reparameterization the model
/// is built around; the closed forms are:
///   d1 = 2 (1-p) / tau1
///   d3 = -2 p / (tau1 * Gamma_11)
///   S^4 = D (2 pi omega1)^2 / Gamma_11^2
///   c^2 solved so that omega_{1,1} = 2 pi omega1 exactly.
PdeCoeffs shape_to_pde(const ShapeParams& shape);

/// Analytical inverse of shape_to_pde.
ShapeParams pde_to_shape(const PdeCoeffs& pde);

/// Spatial eigenvalue pi^2 m1^2 / l^2 + pi^2 m2^2 / (l alpha)^2.
double spatial_eigenvalue(int m1, int m2, double l, double alpha);

/// Evaluates omega_m^2, sigma_m and the excitation gain for all mode pairs
/// up to mode_limit per axis. Modes with omega^2 <= 0, sigma >= 0 or
/// omega/(2 pi) >= sample_rate/2 are excluded and counted.
ModeTable modal_expansion(const PdeCoeffs& pde, double sample_rate,
                          int mode_limit = kDefaultModeLimit,
                          double excitation_amp = kExcitationAmplitude);

/// Renders the modal sum  x(t) = sum_m gain_m exp(sigma_m t) sin(omega_m t).
AudioBuffer synthesize(const NormalizedTheta& theta, double duration,
                       const SynthOptions& opts = {});

AudioBuffer synthesize_modes(const ModeTable& table, double duration,
                             double sample_rate, bool normalize_audio = false);

/// Default render duration: 2^16 samples at 22050 Hz (~2.97 s).
inline double default_duration(double sample_rate = kDefaultSampleRate) {
  return 65536.0 / sample_rate;
}

}  // namespace pnp
