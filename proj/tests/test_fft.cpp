#include <doctest.h>

#include <cmath>
#include <complex>
#include <vector>

#include "pnp/fft.hpp"
#include "pnp/rng.hpp"

using namespace pnp;

namespace {

// Quadratic-time reference DFT.
std::vector<cplx> naive_dft(const std::vector<cplx>& x, bool invert) {
  const std::size_t n = x.size();
  std::vector<cplx> out(n, cplx(0.0, 0.0));
  const double sign = invert ? 1.0 : -1.0;
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t t = 0; t < n; ++t) {
      const double ang = sign * 2.0 * M_PI * double(k * t % n) / double(n);
      out[k] += x[t] * cplx(std::cos(ang), std::sin(ang));
    }
    if (invert) out[k] /= double(n);
  }
  return out;
}

}  // namespace

TEST_CASE("fft matches the reference DFT on random inputs") {
  Rng rng(11);
  for (const std::size_t n : {std::size_t(8), std::size_t(64), std::size_t(512)}) {
    std::vector<cplx> x(n);
    for (auto& v : x) v = cplx(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0));
    auto fast = x;
    FftPlan plan(n);
    plan.forward(fast);
    const auto ref = naive_dft(x, false);
    double err = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      err = std::max(err, std::abs(fast[i] - ref[i]));
      scale = std::max(scale, std::abs(ref[i]));
    }
    CHECK(err < 1e-10 * std::max(scale, 1.0));
  }
}

TEST_CASE("inverse fft restores the input") {
  Rng rng(12);
  const std::size_t n = 256;
  std::vector<cplx> x(n);
  for (auto& v : x) v = cplx(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0));
  auto y = x;
  FftPlan plan(n);
  plan.forward(y);
  plan.inverse(y);
  for (std::size_t i = 0; i < n; ++i) {
    CHECK(std::abs(y[i] - x[i]) < 1e-12);
  }
}

TEST_CASE("fft of a unit impulse is flat") {
  std::vector<double> x(128, 0.0);
  x[0] = 1.0;
  const auto spec = fft_real(x, 128);
  for (const auto& v : spec) {
    CHECK(std::abs(v - cplx(1.0, 0.0)) < 1e-12);
  }
}

TEST_CASE("fft rejects non-power-of-two sizes") {
  CHECK_THROWS_AS(FftPlan(48), std::invalid_argument);
  CHECK(next_power_of_two(48) == 64);
  CHECK(is_power_of_two(64));
  CHECK(!is_power_of_two(0));
}
