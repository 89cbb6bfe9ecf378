#include "pnp/fft.hpp"

#include <cmath>
#include <stdexcept>

namespace pnp {

bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

std::size_t next_power_of_two(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

FftPlan::FftPlan(std::size_t n) : n_(n) {
  if (!is_power_of_two(n)) {
    throw std::invalid_argument("FftPlan: size must be a power of two, got " +
                                std::to_string(n));
  }
  bitrev_.resize(n);
  std::size_t log2n = 0;
  while ((std::size_t(1) << log2n) < n) ++log2n;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t r = 0;
    for (std::size_t b = 0; b < log2n; ++b) {
      if (i & (std::size_t(1) << b)) r |= std::size_t(1) << (log2n - 1 - b);
    }
    bitrev_[i] = r;
  }
  twiddle_.resize(n / 2);
  for (std::size_t k = 0; k < n / 2; ++k) {
    const double ang = -2.0 * M_PI * double(k) / double(n);
    twiddle_[k] = cplx(std::cos(ang), std::sin(ang));
  }
}

void FftPlan::transform(cplx* a, bool invert) const {
  const std::size_t n = n_;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = bitrev_[i];
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const std::size_t half = len >> 1;
    const std::size_t step = n / len;
    for (std::size_t i = 0; i < n; i += len) {
      for (std::size_t k = 0; k < half; ++k) {
        cplx w = twiddle_[k * step];
        if (invert) w = std::conj(w);
        const cplx u = a[i + k];
        const cplx v = a[i + k + half] * w;
        a[i + k] = u + v;
        a[i + k + half] = u - v;
      }
    }
  }
  if (invert) {
    const double s = 1.0 / double(n);
    for (std::size_t i = 0; i < n; ++i) a[i] *= s;
  }
}

void FftPlan::forward(cplx* data) const { transform(data, false); }
void FftPlan::inverse(cplx* data) const { transform(data, true); }

void FftPlan::forward(std::vector<cplx>& data) const {
  if (data.size() != n_) throw std::invalid_argument("FftPlan: length mismatch");
  transform(data.data(), false);
}

void FftPlan::inverse(std::vector<cplx>& data) const {
  if (data.size() != n_) throw std::invalid_argument("FftPlan: length mismatch");
  transform(data.data(), true);
}

std::vector<cplx> fft_real(const std::vector<double>& x, std::size_t n) {
  if (n < x.size() || !is_power_of_two(n)) {
    throw std::invalid_argument("fft_real: n must be a power of two >= signal length");
  }
  std::vector<cplx> buf(n, cplx(0.0, 0.0));
  for (std::size_t i = 0; i < x.size(); ++i) buf[i] = cplx(x[i], 0.0);
  FftPlan(n).forward(buf);
  return buf;
}

}  // namespace pnp
