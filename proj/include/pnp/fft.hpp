#pragma once

#include <complex>
#include <cstddef>
#include <vector>

namespace pnp {

using cplx = std::complex<double>;

/// Radix-2 FFT plan for a fixed power-of-two size. Twiddle factors and the
/// bit-reversal permutation are precomputed once; transforms are const and
/// safe to share across threads.
class FftPlan {
 public:
  explicit FftPlan(std::size_t n);

  std::size_t size() const { return n_; }

  // In-place, unscaled.
  void forward(cplx* data) const;
  // In-place, scaled by 1/n.
  void inverse(cplx* data) const;

  void forward(std::vector<cplx>& data) const;
  void inverse(std::vector<cplx>& data) const;

 private:
  void transform(cplx* data, bool invert) const;

  std::size_t n_;
  std::vector<std::size_t> bitrev_;
  std::vector<cplx> twiddle_;  // exp(-2*pi*i*k/n), k < n/2
};

bool is_power_of_two(std::size_t n);
std::size_t next_power_of_two(std::size_t n);

/// FFT of a real signal, zero-padded to `n` (power of two, >= x.size()).
std::vector<cplx> fft_real(const std::vector<double>& x, std::size_t n);

}  // namespace pnp
