#include "pnp/ftm.hpp"

#include <cmath>
#include <complex>
#include <sstream>
#include <stdexcept>

namespace pnp {

namespace {

struct AxisMap {
  const char* name;
  double lo, hi;  // endpoints in map coordinates (already logged if log_scale)
  bool log_scale;
};

// Normalized coordinate order: pitch, tau, p, D, alpha.
const AxisMap kAxes[5] = {
    {"log_omega1", std::log(ranges::kOmegaLo), std::log(ranges::kOmegaHi), true},
    {"tau1", ranges::kTauLo, ranges::kTauHi, false},
    {"log_p", std::log(ranges::kPLo), std::log(ranges::kPHi), true},
    {"log_D", std::log(ranges::kDLo), std::log(ranges::kDHi), true},
    {"log_alpha", std::log(ranges::kAlphaLo), std::log(ranges::kAlphaHi), true},
};

double to_unit(double physical, const AxisMap& axis) {
  const double x = axis.log_scale ? std::log(physical) : physical;
  return 2.0 * (x - axis.lo) / (axis.hi - axis.lo) - 1.0;
}

double from_unit(double v, const AxisMap& axis) {
  const double x = axis.lo + 0.5 * (v + 1.0) * (axis.hi - axis.lo);
  return axis.log_scale ? std::exp(x) : x;
}

void check_range(double value, double lo, double hi, const char* name) {
  // Tolerate a hair of roundoff from denormalize round trips.
  const double slack = 1e-9 * (std::abs(lo) + std::abs(hi));
  if (!(value >= lo - slack && value <= hi + slack)) {
    std::ostringstream msg;
    msg << "shape parameter " << name << "=" << value << " outside ["
        << lo << ", " << hi << "]";
    throw std::out_of_range(msg.str());
  }
}

void check_shape(const ShapeParams& s) {
  check_range(s.omega1_hz, ranges::kOmegaLo, ranges::kOmegaHi, "omega1");
  check_range(s.tau1_s, ranges::kTauLo, ranges::kTauHi, "tau1");
  check_range(s.p, ranges::kPLo, ranges::kPHi, "p");
  check_range(s.dispersion, ranges::kDLo, ranges::kDHi, "D");
  check_range(s.alpha, ranges::kAlphaLo, ranges::kAlphaHi, "alpha");
}

void check_unit(double v, const char* name) {
  if (!(v >= -1.0 - 1e-12 && v <= 1.0 + 1e-12)) {
    std::ostringstream msg;
    msg << "normalized component " << name << "=" << v << " outside [-1, 1]";
    throw std::out_of_range(msg.str());
  }
}

}  // namespace

std::vector<std::string> theta_names(bool includes_pitch) {
  std::vector<std::string> names;
  for (int i = includes_pitch ? 0 : 1; i < 5; ++i) names.push_back(kAxes[i].name);
  return names;
}

NormalizedTheta normalize(const ShapeParams& shape, bool include_pitch) {
  check_shape(shape);
  const double phys[5] = {shape.omega1_hz, shape.tau1_s, shape.p,
                          shape.dispersion, shape.alpha};
  NormalizedTheta theta;
  theta.includes_pitch = include_pitch;
  theta.fixed_pitch = to_unit(phys[0], kAxes[0]);
  const int j0 = include_pitch ? 0 : 1;
  theta.values.resize(5 - j0);
  for (int i = j0; i < 5; ++i) theta.values[i - j0] = to_unit(phys[i], kAxes[i]);
  return theta;
}

ShapeParams denormalize(const NormalizedTheta& theta) {
  const int expect = theta.includes_pitch ? 5 : 4;
  if (theta.dim() != expect) {
    throw std::invalid_argument("denormalize: expected " + std::to_string(expect) +
                                " components, got " + std::to_string(theta.dim()));
  }
  double unit[5];
  unit[0] = theta.includes_pitch ? theta.values[0] : theta.fixed_pitch;
  const int j0 = theta.includes_pitch ? 0 : 1;
  for (int i = 1; i < 5; ++i) unit[i] = theta.values[i - j0];
  for (int i = 0; i < 5; ++i) check_unit(unit[i], kAxes[i].name);

  ShapeParams s;
  s.omega1_hz = from_unit(unit[0], kAxes[0]);
  s.tau1_s = from_unit(unit[1], kAxes[1]);
  s.p = from_unit(unit[2], kAxes[2]);
  s.dispersion = from_unit(unit[3], kAxes[3]);
  s.alpha = from_unit(unit[4], kAxes[4]);
  return s;
}

double spatial_eigenvalue(int m1, int m2, double l, double alpha) {
  const double pi2 = M_PI * M_PI;
  return pi2 * double(m1) * double(m1) / (l * l) +
         pi2 * double(m2) * double(m2) / ((l * alpha) * (l * alpha));
}

PdeCoeffs shape_to_pde(const ShapeParams& shape) {
  check_shape(shape);
  const double l = 1.0;
  const double gamma11 = spatial_eigenvalue(1, 1, l, shape.alpha);
  const double w11 = 2.0 * M_PI * shape.omega1_hz;  // target angular frequency

  PdeCoeffs pde;
  pde.alpha = shape.alpha;
  pde.side_length = l;
  pde.d1 = 2.0 * (1.0 - shape.p) / shape.tau1_s;
  pde.d3 = -2.0 * shape.p / (shape.tau1_s * gamma11);

  const double s4 = shape.dispersion * w11 * w11 / (gamma11 * gamma11);
  pde.stiffness = std::pow(s4, 0.25);

  // Solve c^2 from the modal frequency formula at m = (1,1).
  const double c2 = (w11 * w11 - (s4 - pde.d3 * pde.d3 / 4.0) * gamma11 * gamma11 +
                     pde.d1 * pde.d1 / 4.0) /
                        gamma11 -
                    pde.d1 * pde.d3 / 2.0;
  if (!(c2 >= 0.0)) {
    std::ostringstream msg;
    msg << "shape_to_pde: infeasible parameters, derived c^2 = " << c2;
    throw std::domain_error(msg.str());
  }
  pde.wave_speed = std::sqrt(c2);
  return pde;
}

ShapeParams pde_to_shape(const PdeCoeffs& pde) {
  const double l = pde.side_length;
  const double gamma11 = spatial_eigenvalue(1, 1, l, pde.alpha);
  const double s4 = std::pow(pde.stiffness, 4);
  const double c2 = pde.wave_speed * pde.wave_speed;

  ShapeParams s;
  s.alpha = pde.alpha;
  // d1 = 2(1-p)/tau, d3*Gamma11 = -2p/tau  =>  1/tau = (d1 - d3*Gamma11)/2.
  const double inv_tau = (pde.d1 - pde.d3 * gamma11) / 2.0;
  if (!(inv_tau > 0.0)) {
    throw std::domain_error("pde_to_shape: non-decaying fundamental mode");
  }
  s.tau1_s = 1.0 / inv_tau;
  s.p = -pde.d3 * gamma11 / (pde.d1 - pde.d3 * gamma11);

  const double w11_sq = (s4 - pde.d3 * pde.d3 / 4.0) * gamma11 * gamma11 +
                        (c2 + pde.d1 * pde.d3 / 2.0) * gamma11 -
                        pde.d1 * pde.d1 / 4.0;
  if (!(w11_sq > 0.0)) {
    throw std::domain_error("pde_to_shape: fundamental mode does not oscillate");
  }
  const double w11 = std::sqrt(w11_sq);
  s.omega1_hz = w11 / (2.0 * M_PI);
  s.dispersion = s4 * gamma11 * gamma11 / (w11 * w11);
  return s;
}

ModeTable modal_expansion(const PdeCoeffs& pde, double sample_rate,
                          int mode_limit, double excitation_amp) {
  if (mode_limit < 1) throw std::invalid_argument("modal_expansion: mode_limit < 1");
  if (!(pde.d1 >= 0.0) || !(pde.d3 <= 0.0)) {
    throw std::invalid_argument("modal_expansion: requires d1 >= 0 and d3 <= 0");
  }
  const double s4 = std::pow(pde.stiffness, 4);
  const double c2 = pde.wave_speed * pde.wave_speed;
  const double nyquist_rad = 2.0 * M_PI * sample_rate / 2.0;

  // Each modal resonator responds to the impulse as sin(omega t) / omega;
  // the 1/omega weight is normalized to the fundamental so that mode (1,1)
  // keeps the plain 0.03 sin^2 excitation gain.
  const double gamma11 = spatial_eigenvalue(1, 1, pde.side_length, pde.alpha);
  const double w11_sq = (s4 - pde.d3 * pde.d3 / 4.0) * gamma11 * gamma11 +
                        (c2 + pde.d1 * pde.d3 / 2.0) * gamma11 -
                        pde.d1 * pde.d1 / 4.0;
  const double omega_ref = w11_sq > 0.0 ? std::sqrt(w11_sq) : 1.0;

  ModeTable table;
  table.mode_limit = mode_limit;
  table.modes.reserve(std::size_t(mode_limit) * std::size_t(mode_limit));
  for (int m1 = 1; m1 <= mode_limit; ++m1) {
    for (int m2 = 1; m2 <= mode_limit; ++m2) {
      const double gamma = spatial_eigenvalue(m1, m2, pde.side_length, pde.alpha);
      const double w_sq = (s4 - pde.d3 * pde.d3 / 4.0) * gamma * gamma +
                          (c2 + pde.d1 * pde.d3 / 2.0) * gamma -
                          pde.d1 * pde.d1 / 4.0;
      const double sigma = pde.d3 / 2.0 * gamma - pde.d1 / 2.0;
      if (!(w_sq > 0.0) || !(sigma < 0.0)) {
        ++table.dropped_nonpositive;
        continue;
      }
      const double omega = std::sqrt(w_sq);
      if (omega >= nyquist_rad) {
        ++table.dropped_above_nyquist;
        continue;
      }
      Mode mode;
      mode.m1 = m1;
      mode.m2 = m2;
      mode.omega = omega;
      mode.sigma = sigma;
      // Excitation projection times co-located observation: the sine factors
      // enter squared. Grouped so the gain is bitwise symmetric under
      // m1 <-> m2.
      const double s1 = std::sin(M_PI * m1 * kExcitationPosition);
      const double s2 = std::sin(M_PI * m2 * kExcitationPosition);
      mode.gain = excitation_amp * ((s1 * s1) * (s2 * s2)) * (omega_ref / omega);
      // C1 raised-cosine fade over the top tenth of the band keeps the
      // rendered signal differentiable in theta as modes approach the cut.
      const double taper_start = 0.9 * nyquist_rad;
      if (omega > taper_start) {
        const double x = (omega - taper_start) / (nyquist_rad - taper_start);
        mode.gain *= 0.5 * (1.0 + std::cos(M_PI * x));
      }
      table.modes.push_back(mode);
    }
  }
  return table;
}

AudioBuffer synthesize_modes(const ModeTable& table, double duration,
                             double sample_rate, bool normalize_audio) {
  if (!(duration > 0.0)) throw std::invalid_argument("synthesize: duration <= 0");
  const auto n = std::size_t(std::llround(duration * sample_rate));
  AudioBuffer audio;
  audio.sample_rate = sample_rate;
  audio.samples.assign(n, 0.0);

  for (const Mode& mode : table.modes) {
    if (mode.gain == 0.0) continue;
    // One complex pole per mode: z_{k+1} = z_k * rho renders
    // exp(sigma t) sin(omega t) without per-sample transcendentals.
    const std::complex<double> rho =
        std::exp(std::complex<double>(mode.sigma / sample_rate,
                                      mode.omega / sample_rate));
    // Truncate once the envelope is below double noise.
    std::size_t n_mode = n;
    if (mode.sigma < 0.0) {
      const double t_cut = std::log(1e-14) / mode.sigma;
      n_mode = std::min(n, std::size_t(std::ceil(t_cut * sample_rate)) + 1);
    }
    std::complex<double> z(1.0, 0.0);
    double* out = audio.samples.data();
    for (std::size_t k = 0; k < n_mode; ++k) {
      out[k] += mode.gain * z.imag();
      z *= rho;
    }
  }

  if (normalize_audio) {
    const double peak = audio.peak();
    if (peak > 1.0) {
      for (double& s : audio.samples) s /= peak;
    }
  }
  return audio;
}

AudioBuffer synthesize(const NormalizedTheta& theta, double duration,
                       const SynthOptions& opts) {
  const ShapeParams shape = denormalize(theta);
  const PdeCoeffs pde = shape_to_pde(shape);
  const ModeTable table =
      modal_expansion(pde, opts.sample_rate, opts.mode_limit, opts.excitation_amp);
  return synthesize_modes(table, duration, opts.sample_rate, opts.normalize_audio);
}

}  // namespace pnp
