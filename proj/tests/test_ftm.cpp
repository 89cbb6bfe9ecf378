#include <doctest.h>

#include <cmath>
#include <map>
#include <set>

#include "oracles.hpp"
#include "pnp/ftm.hpp"
#include "pnp/rng.hpp"

using namespace pnp;

namespace {

ShapeParams random_shape(Rng& rng) {
  NormalizedTheta theta;
  theta.includes_pitch = true;
  theta.values.resize(5);
  for (int j = 0; j < 5; ++j) theta.values[j] = rng.uniform(-1.0, 1.0);
  return denormalize(theta);
}

}  // namespace

TEST_CASE("normalize maps the range endpoints to the cube corners") {
  ShapeParams lo{40.0, 0.4, 1e-5, 1e-5, 1e-5};
  ShapeParams hi{1000.0, 3.0, 0.2, 0.3, 1.0};
  const NormalizedTheta tlo = normalize(lo, true);
  const NormalizedTheta thi = normalize(hi, true);
  REQUIRE(tlo.dim() == 5);
  for (int j = 0; j < 5; ++j) {
    CHECK(tlo.values[j] == doctest::Approx(-1.0).epsilon(1e-14));
    CHECK(thi.values[j] == doctest::Approx(1.0).epsilon(1e-14));
  }
}

TEST_CASE("geometric midpoint of the pitch range maps to zero") {
  ShapeParams s{200.0, 1.0, 1e-3, 1e-3, 0.1};
  const NormalizedTheta theta = normalize(s, true);
  CHECK(std::abs(theta.values[0]) < 1e-12);
}

TEST_CASE("denormalize at the cube center hits the documented midpoints") {
  NormalizedTheta theta;
  theta.includes_pitch = true;
  theta.values = Eigen::VectorXd::Zero(5);
  const ShapeParams s = denormalize(theta);
  CHECK(s.omega1_hz == doctest::Approx(200.0).epsilon(1e-12));
  CHECK(s.tau1_s == doctest::Approx(1.7).epsilon(1e-12));
  CHECK(s.p == doctest::Approx(std::sqrt(1e-5 * 0.2)).epsilon(1e-12));
  CHECK(s.dispersion == doctest::Approx(std::sqrt(1e-5 * 0.3)).epsilon(1e-12));
  CHECK(s.alpha == doctest::Approx(std::sqrt(1e-5 * 1.0)).epsilon(1e-12));
}

TEST_CASE("cube corners denormalize to the range endpoints") {
  NormalizedTheta theta;
  theta.includes_pitch = true;
  theta.values = Eigen::VectorXd::Constant(5, -1.0);
  const ShapeParams s = denormalize(theta);
  CHECK(s.omega1_hz == doctest::Approx(40.0).epsilon(1e-12));
  CHECK(s.tau1_s == doctest::Approx(0.4).epsilon(1e-12));
  CHECK(s.p == doctest::Approx(1e-5).epsilon(1e-12));
  CHECK(s.dispersion == doctest::Approx(1e-5).epsilon(1e-12));
  CHECK(s.alpha == doctest::Approx(1e-5).epsilon(1e-12));
}

TEST_CASE("normalize/denormalize round trip is the identity") {
  Rng rng(101);
  for (int trial = 0; trial < 100; ++trial) {
    const bool with_pitch = trial % 2 == 0;
    NormalizedTheta theta;
    theta.includes_pitch = with_pitch;
    theta.fixed_pitch = with_pitch ? 0.0 : rng.uniform(-1.0, 1.0);
    theta.values.resize(with_pitch ? 5 : 4);
    for (int j = 0; j < theta.dim(); ++j) theta.values[j] = rng.uniform(-1.0, 1.0);
    const NormalizedTheta back = normalize(denormalize(theta), with_pitch);
    for (int j = 0; j < theta.dim(); ++j) {
      CHECK(back.values[j] == doctest::Approx(theta.values[j]).epsilon(1e-12));
    }
    if (!with_pitch) {
      CHECK(back.fixed_pitch == doctest::Approx(theta.fixed_pitch).epsilon(1e-12));
    }
  }
}

TEST_CASE("out-of-range parameters are rejected by name") {
  ShapeParams s{200.0, 1.0, 1e-3, 1e-3, 0.1};
  s.omega1_hz = 20.0;
  CHECK_THROWS_WITH_AS(normalize(s, true),
                       doctest::Contains("omega1"), std::out_of_range);
  s.omega1_hz = 200.0;
  s.tau1_s = 5.0;
  CHECK_THROWS_WITH_AS(normalize(s, true), doctest::Contains("tau1"),
                       std::out_of_range);
  NormalizedTheta theta;
  theta.includes_pitch = true;
  theta.values = Eigen::VectorXd::Zero(5);
  theta.values[2] = 1.5;
  CHECK_THROWS_AS(denormalize(theta), std::out_of_range);
}

TEST_CASE("homogeneous damping limit: d1=2, d3=0, sigma=-1") {
  // At tau1 = 1 the p -> 0 limit gives d1 = 2(1-p)/tau = 2 and d3 = 0.
  ShapeParams s{200.0, 1.0, 0.0, 1e-3, 0.5};  // p = 0: the analytic limit
  const PdeCoeffs pde = [&] {
    // shape_to_pde validates ranges; evaluate the mapping formulas directly
    // at the limit through a nearby in-range p and the exact p = 0 algebra.
    PdeCoeffs out;
    out.alpha = s.alpha;
    out.side_length = 1.0;
    out.d1 = 2.0 * (1.0 - s.p) / s.tau1_s;
    out.d3 = -2.0 * s.p / (s.tau1_s * spatial_eigenvalue(1, 1, 1.0, s.alpha));
    const double g11 = spatial_eigenvalue(1, 1, 1.0, s.alpha);
    const double w11 = 2.0 * M_PI * s.omega1_hz;
    const double s4 = s.dispersion * w11 * w11 / (g11 * g11);
    out.stiffness = std::pow(s4, 0.25);
    out.wave_speed = std::sqrt(
        (w11 * w11 - (s4 - out.d3 * out.d3 / 4.0) * g11 * g11 + out.d1 * out.d1 / 4.0) /
            g11 -
        out.d1 * out.d3 / 2.0);
    return out;
  }();
  CHECK(pde.d1 == doctest::Approx(2.0));
  CHECK(pde.d3 == 0.0);
  const ModeTable table = modal_expansion(pde, 22050.0, 8);
  REQUIRE(!table.modes.empty());
  for (const Mode& m : table.modes) {
    CHECK(m.sigma == doctest::Approx(-1.0).epsilon(1e-12));
  }

  // In-range p stays within a whisker of the limit.
  ShapeParams near{200.0, 1.0, 1e-5, 1e-3, 0.5};
  const PdeCoeffs pde2 = shape_to_pde(near);
  CHECK(pde2.d1 == doctest::Approx(2.0).epsilon(1e-4));
  CHECK(std::abs(pde2.d3) < 1e-5);
}

TEST_CASE("mode (1,1) anchors the fundamental frequency and decay exactly") {
  Rng rng(55);
  for (int trial = 0; trial < 50; ++trial) {
    const ShapeParams s = random_shape(rng);
    const PdeCoeffs pde = shape_to_pde(s);
    const ModeTable table = modal_expansion(pde, 22050.0, 2);
    REQUIRE(!table.modes.empty());
    const Mode& m11 = table.modes.front();
    REQUIRE(m11.m1 == 1);
    REQUIRE(m11.m2 == 1);
    CHECK(std::abs(m11.omega / (2.0 * M_PI) - s.omega1_hz) < 1e-6);
    CHECK(m11.sigma == doctest::Approx(-1.0 / s.tau1_s).epsilon(1e-12));
  }
}

TEST_CASE("square membrane spatial eigenvalue") {
  CHECK(spatial_eigenvalue(1, 1, 1.0, 1.0) ==
        doctest::Approx(2.0 * M_PI * M_PI).epsilon(1e-15));
}

TEST_CASE("reparameterization is bijective on the declared ranges") {
  Rng rng(77);
  for (int trial = 0; trial < 1000; ++trial) {
    const ShapeParams s = random_shape(rng);
    const ShapeParams back = pde_to_shape(shape_to_pde(s));
    CHECK(back.omega1_hz == doctest::Approx(s.omega1_hz).epsilon(1e-9));
    CHECK(back.tau1_s == doctest::Approx(s.tau1_s).epsilon(1e-9));
    CHECK(back.p == doctest::Approx(s.p).epsilon(1e-9));
    CHECK(back.dispersion == doctest::Approx(s.dispersion).epsilon(1e-9));
    CHECK(back.alpha == doctest::Approx(s.alpha).epsilon(1e-9));
  }
}

TEST_CASE("alpha=1 mode table is exactly symmetric under axis swap") {
  ShapeParams s{150.0, 1.2, 1e-3, 1e-2, 1.0};
  const ModeTable table = modal_expansion(shape_to_pde(s), 22050.0, 16);
  std::map<std::pair<int, int>, const Mode*> by_index;
  for (const Mode& m : table.modes) by_index[{m.m1, m.m2}] = &m;
  int checked = 0;
  for (const Mode& m : table.modes) {
    if (m.m1 >= m.m2) continue;
    const auto it = by_index.find({m.m2, m.m1});
    REQUIRE(it != by_index.end());
    CHECK(m.omega == it->second->omega);  // bitwise
    CHECK(m.sigma == it->second->sigma);
    CHECK(m.gain == it->second->gain);
    ++checked;
  }
  CHECK(checked > 0);
}

TEST_CASE("modes above Nyquist are dropped and counted") {
  ShapeParams s{1000.0, 1.0, 1e-3, 0.3, 1.0};
  const ModeTable full = modal_expansion(shape_to_pde(s), 22050.0, 32);
  CHECK(full.dropped_above_nyquist > 0);
  CHECK(int(full.modes.size()) + full.dropped_above_nyquist +
            full.dropped_nonpositive ==
        32 * 32);
  for (const Mode& m : full.modes) {
    CHECK(m.omega / (2.0 * M_PI) < 11025.0);
    CHECK(m.sigma < 0.0);
  }
}

TEST_CASE("zero excitation renders silence") {
  NormalizedTheta theta;
  theta.includes_pitch = true;
  theta.values = Eigen::VectorXd::Zero(5);
  SynthOptions opts;
  opts.excitation_amp = 0.0;
  const AudioBuffer audio = synthesize(theta, 0.5, opts);
  for (const double v : audio.samples) CHECK(v == 0.0);
}

TEST_CASE("synthesis is deterministic and bounded by the gain sum") {
  Rng rng(99);
  NormalizedTheta theta;
  theta.includes_pitch = true;
  theta.values.resize(5);
  for (int j = 0; j < 5; ++j) theta.values[j] = rng.uniform(-1.0, 1.0);
  const AudioBuffer a = synthesize(theta, 1.0);
  const AudioBuffer b = synthesize(theta, 1.0);
  REQUIRE(a.samples.size() == b.samples.size());
  for (std::size_t i = 0; i < a.samples.size(); ++i) CHECK(a.samples[i] == b.samples[i]);

  const ModeTable table =
      modal_expansion(shape_to_pde(denormalize(theta)), 22050.0, 32);
  double gain_sum = 0.0;
  for (const Mode& m : table.modes) gain_sum += std::abs(m.gain);
  CHECK(a.peak() <= gain_sum + 1e-12);
  CHECK(a.all_finite());
}

TEST_CASE("rendered fundamental sits within one semitone bin of omega1") {
  Rng rng(123);
  for (int trial = 0; trial < 10; ++trial) {
    NormalizedTheta theta;
    theta.includes_pitch = true;
    theta.values.resize(5);
    for (int j = 0; j < 5; ++j) theta.values[j] = rng.uniform(-1.0, 1.0);
    const ShapeParams s = denormalize(theta);
    const AudioBuffer audio = synthesize(theta, default_duration());
    const double peak = oracles::peak_frequency_hz(audio);
    CHECK(std::abs(std::log2(peak / s.omega1_hz)) <= 1.0 / 12.0);
  }
}

TEST_CASE("fundamental band decays at 1/tau for small p") {
  Rng rng(321);
  int measured = 0;
  for (int trial = 0; trial < 8; ++trial) {
    NormalizedTheta theta;
    theta.includes_pitch = true;
    theta.values.resize(5);
    for (int j = 0; j < 5; ++j) theta.values[j] = rng.uniform(-1.0, 1.0);
    ShapeParams s = denormalize(theta);
    s.p = 1e-3;
    const NormalizedTheta fixed = normalize(s, true);
    const AudioBuffer audio = synthesize(fixed, default_duration());
    const double t_hi = std::min(2.0 * s.tau1_s, audio.duration() - 0.6);
    // Skip geometries whose near-unison neighbors make the single-line
    // decay unidentifiable from the output.
    const ModeTable table = modal_expansion(shape_to_pde(s), 22050.0, 32);
    if (!oracles::fundamental_decay_measurable(table, s.omega1_hz, t_hi - 0.05,
                                               4.0 * 22050.0 / 8192.0)) {
      continue;
    }
    ++measured;
    const double sigma = oracles::fitted_decay_rate(audio, s.omega1_hz, 0.05, t_hi);
    CHECK(sigma == doctest::Approx(-1.0 / s.tau1_s).epsilon(0.10));
  }
  CHECK(measured >= 2);
}

TEST_CASE("peak normalization flag caps the output at one") {
  NormalizedTheta theta;
  theta.includes_pitch = true;
  theta.values = Eigen::VectorXd::Zero(5);
  SynthOptions opts;
  opts.excitation_amp = 400.0;  // force clipping-level amplitude
  opts.normalize_audio = true;
  const AudioBuffer audio = synthesize(theta, 0.25, opts);
  CHECK(audio.peak() <= 1.0 + 1e-12);
  CHECK(audio.peak() > 0.5);
}
