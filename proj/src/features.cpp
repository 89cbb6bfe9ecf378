#include "pnp/features.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "pnp/fft.hpp"

namespace pnp {

namespace {

// Adjacent Gaussians with center ratio 2^(1/q) cross at amplitude sqrt(1/2).
double morlet_sigma(double xi, double q) {
  const double step = std::pow(2.0, 1.0 / q);
  return xi * (step - 1.0) / ((step + 1.0) * std::sqrt(std::log(2.0)));
}

// Reflect-101 index fold into [0, n).
int reflect_index(long i, int n) {
  if (n == 1) return 0;
  const long period = 2L * (n - 1);
  long r = i % period;
  if (r < 0) r += period;
  if (r >= n) r = period - r;
  return int(r);
}

double gauss(double x, double sigma) { return std::exp(-x * x / (2.0 * sigma * sigma)); }

std::string fmt_g(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(out, bits);
}

struct ByteReader {
  const unsigned char* p;
  std::size_t size, pos = 0;
  explicit ByteReader(const std::string& s)
      : p(reinterpret_cast<const unsigned char*>(s.data())), size(s.size()) {}
  void need(std::size_t n, const char* what) {
    if (pos + n > size) {
      throw std::runtime_error(std::string("truncated record while reading ") + what);
    }
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(p[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[pos + i]) << (8 * i);
    pos += 8;
    return v;
  }
  double f64(const char* what) {
    const std::uint64_t bits = u64(what);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(p + pos), n);
    pos += n;
    return s;
  }
};

std::string read_file_bytes(const std::string& path, const char* what) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error(std::string(what) + ": cannot open " + path);
  return std::string((std::istreambuf_iterator<char>(f)),
                     std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::string& path, const std::string& bytes,
                      const char* what) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error(std::string(what) + ": cannot open " + path);
  f.write(bytes.data(), std::streamsize(bytes.size()));
  if (!f) throw std::runtime_error(std::string(what) + ": write failed " + path);
}

}  // namespace

// ---------------------------------------------------------------------------
// Filter bank

struct FeatureExtractor::Bank {
  std::size_t input_len = 0;
  std::size_t padded_len = 0;
  int n_frames = 0;
  double frame_rate = 0.0;

  struct Band {
    double xi_hz = 0.0;
    std::size_t i0 = 0;              // first support bin on the padded grid
    std::vector<double> response;    // Gaussian values over the support
    std::size_t dec = 1;             // alias-free decimation (power of two)
    std::size_t pool = 1;            // hop / dec
  };
  std::vector<Band> bands;  // ascending frequency

  std::size_t pad_t = 0;                  // padded frame-axis length
  std::vector<double> psi_t_center_hz;    // temporal modulation rates
  std::vector<std::vector<double>> psi_t; // analytic responses on pad_t grid
  std::vector<double> phi_t;              // empty when the global mean applies
  bool global_time_avg = true;
  int t_stride = 1;
  int t_frames = 1;
  // Tail-faded averaging window: a hard cut at the buffer end would leave
  // truncated mode beats rippling through the averages, breaking the
  // differentiability of the whole feature map in theta.
  std::vector<double> t_weights;
  double t_weight_sum = 0.0;

  std::size_t pad_f = 0;
  int pad_left = 0;
  std::vector<double> psi_f_center_cpb;    // cycles per bin
  std::vector<std::vector<double>> psi_f;  // up-orientation responses
  std::vector<double> phi_f;

  std::vector<int> out_bins;

  std::map<std::size_t, FftPlan> plans;

  const FftPlan& plan(std::size_t n) const {
    const auto it = plans.find(n);
    if (it == plans.end()) throw std::logic_error("missing FFT plan");
    return it->second;
  }

  // |x * psi_b| pooled onto the hop grid. Scale-exact in the input amplitude.
  Eigen::MatrixXd compute_u1(const AudioBuffer& audio) const;

  Eigen::MatrixXd time_average(const Eigen::MatrixXd& u) const;
  Eigen::VectorXd freq_average_stride(const Eigen::VectorXd& col) const;
  Eigen::VectorXd stride_only(const Eigen::VectorXd& col) const;
};

FeatureExtractor::FeatureExtractor(FilterBankConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.q1 < 1 || cfg_.q2 < 1 || cfg_.q_fr < 1 || cfg_.octaves < 1 ||
      cfg_.T <= 0.0 || cfg_.F <= 0.0 || cfg_.epsilon <= 0.0 || cfg_.hop < 1 ||
      cfg_.rate_octaves < 1 || cfg_.fr_scales < 1 || cfg_.freq_stride < 1) {
    throw std::invalid_argument("FilterBankConfig: all fields must be positive");
  }
  if (!is_power_of_two(std::size_t(cfg_.hop))) {
    throw std::invalid_argument("FilterBankConfig: hop must be a power of two");
  }
}

FeatureExtractor::~FeatureExtractor() = default;

const FeatureExtractor::Bank& FeatureExtractor::bank_for(std::size_t length) const {
  std::lock_guard<std::mutex> lock(mutex_);
  auto it = banks_.find(length);
  if (it != banks_.end()) return *it->second;

  auto bank = std::make_shared<Bank>();
  Bank& b = *bank;
  const double fs = cfg_.sample_rate;
  const int n_bins = cfg_.n_bins();
  const double f_top = 0.85 * fs / 2.0;

  b.input_len = std::max<std::size_t>(length, 1);
  b.n_frames = int((b.input_len + cfg_.hop - 1) / cfg_.hop);
  b.frame_rate = fs / cfg_.hop;

  // Pad past the longest first-order filter so the decaying tail does not
  // wrap into the attack.
  const double sigma_f_low =
      morlet_sigma(f_top * std::pow(2.0, -double(n_bins - 1) / cfg_.q1), cfg_.q1);
  const auto support =
      std::size_t(std::ceil(3.0 / (2.0 * M_PI * sigma_f_low) * fs));
  b.padded_len = next_power_of_two(b.input_len + support + cfg_.hop);
  b.plans.emplace(b.padded_len, FftPlan(b.padded_len));

  const double df = fs / double(b.padded_len);
  const double trim = std::sqrt(2.0 * std::log(1e8));  // response cut at 1e-8
  b.bands.resize(n_bins);
  for (int k = 0; k < n_bins; ++k) {
    Bank::Band& band = b.bands[k];
    band.xi_hz = f_top * std::pow(2.0, -double(n_bins - 1 - k) / cfg_.q1);
    const double sigma = morlet_sigma(band.xi_hz, cfg_.q1);
    const double f_lo = std::max(0.0, band.xi_hz - trim * sigma);
    const double f_hi = std::min(fs / 2.0, band.xi_hz + trim * sigma);
    const auto i_lo = std::size_t(std::ceil(f_lo / df));
    const auto i_hi = std::size_t(std::floor(f_hi / df));
    band.i0 = i_lo;
    band.response.resize(i_hi - i_lo + 1);
    for (std::size_t i = i_lo; i <= i_hi; ++i) {
      band.response[i - i_lo] = gauss(double(i) * df - band.xi_hz, sigma);
    }
    band.dec = cfg_.hop;
    while (band.dec > 1 && b.padded_len / band.dec < band.response.size()) {
      band.dec /= 2;
    }
    band.pool = cfg_.hop / band.dec;
    const std::size_t m = b.padded_len / band.dec;
    if (std::size_t(b.n_frames) * band.pool > m) {
      throw std::logic_error("feature bank: frame grid exceeds decimated length");
    }
    if (b.plans.find(m) == b.plans.end()) b.plans.emplace(m, FftPlan(m));
  }

  // Second-order temporal wavelets on the frame axis.
  const double r_top = 0.425 * b.frame_rate;
  double slow_sigma_frames = 1.0;
  b.psi_t_center_hz.resize(cfg_.rate_octaves);
  for (int j = 0; j < cfg_.rate_octaves; ++j) {
    b.psi_t_center_hz[j] = r_top * std::pow(2.0, -double(j));
    const double sig_cpf = morlet_sigma(b.psi_t_center_hz[j] / b.frame_rate, cfg_.q2);
    slow_sigma_frames = std::max(slow_sigma_frames, 1.0 / (2.0 * M_PI * sig_cpf));
  }
  const double t_frames_window = cfg_.T * fs / cfg_.hop;
  b.global_time_avg = t_frames_window >= double(b.n_frames);
  double phi_t_sigma_frames = 0.0;
  if (!b.global_time_avg) {
    phi_t_sigma_frames = t_frames_window / (2.0 * std::sqrt(2.0 * std::log(2.0)));
    slow_sigma_frames = std::max(slow_sigma_frames, phi_t_sigma_frames);
    b.t_stride = std::max(1, int(std::llround(t_frames_window / 2.0)));
    b.t_frames = int((b.n_frames + b.t_stride - 1) / b.t_stride);
  }
  b.pad_t = next_power_of_two(std::size_t(b.n_frames) +
                              std::size_t(std::ceil(3.0 * slow_sigma_frames)));
  if (b.plans.find(b.pad_t) == b.plans.end()) b.plans.emplace(b.pad_t, FftPlan(b.pad_t));

  b.t_weights.resize(std::size_t(b.n_frames));
  {
    const int fade = std::max(1, b.n_frames / 5);
    const int flat = b.n_frames - fade;
    for (int t = 0; t < b.n_frames; ++t) {
      if (t < flat) {
        b.t_weights[std::size_t(t)] = 1.0;
      } else {
        const double x = double(t - flat + 1) / double(fade + 1);
        b.t_weights[std::size_t(t)] = 0.5 * (1.0 + std::cos(M_PI * x));
      }
    }
    b.t_weight_sum = 0.0;
    for (const double w : b.t_weights) b.t_weight_sum += w;
  }

  b.psi_t.resize(cfg_.rate_octaves);
  for (int j = 0; j < cfg_.rate_octaves; ++j) {
    const double mu = b.psi_t_center_hz[j] / b.frame_rate;  // cycles/frame
    const double sig = morlet_sigma(mu, cfg_.q2);
    auto& resp = b.psi_t[j];
    resp.assign(b.pad_t, 0.0);
    for (std::size_t i = 0; i <= b.pad_t / 2; ++i) {
      resp[i] = gauss(double(i) / double(b.pad_t) - mu, sig);
    }
  }
  if (!b.global_time_avg) {
    const double sig_nu = 1.0 / (2.0 * M_PI * phi_t_sigma_frames);
    b.phi_t.assign(b.pad_t, 0.0);
    for (std::size_t i = 0; i < b.pad_t; ++i) {
      const double nu = double(std::min(i, b.pad_t - i)) / double(b.pad_t);
      b.phi_t[i] = gauss(nu, sig_nu);
    }
  }

  // Frequential wavelets along the log-frequency (bin) axis.
  const double c_top = 0.425;
  double max_sigma_bins = 0.0;
  b.psi_f_center_cpb.resize(cfg_.fr_scales);
  for (int j = 0; j < cfg_.fr_scales; ++j) {
    b.psi_f_center_cpb[j] = c_top * std::pow(2.0, -double(j));
    const double sig_c = morlet_sigma(b.psi_f_center_cpb[j], cfg_.q_fr);
    max_sigma_bins = std::max(max_sigma_bins, 1.0 / (2.0 * M_PI * sig_c));
  }
  const double phi_f_sigma_bins =
      cfg_.F * cfg_.q1 / (2.0 * std::sqrt(2.0 * std::log(2.0)));
  max_sigma_bins = std::max(max_sigma_bins, phi_f_sigma_bins);
  b.pad_f = next_power_of_two(std::size_t(n_bins) +
                              2 * std::size_t(std::ceil(3.0 * max_sigma_bins)));
  b.pad_left = int((b.pad_f - std::size_t(n_bins)) / 2);
  if (b.plans.find(b.pad_f) == b.plans.end()) b.plans.emplace(b.pad_f, FftPlan(b.pad_f));

  b.psi_f.resize(cfg_.fr_scales);
  for (int j = 0; j < cfg_.fr_scales; ++j) {
    const double c = b.psi_f_center_cpb[j];
    const double sig = morlet_sigma(c, cfg_.q_fr);
    auto& resp = b.psi_f[j];
    resp.assign(b.pad_f, 0.0);
    for (std::size_t i = 0; i <= b.pad_f / 2; ++i) {
      resp[i] = gauss(double(i) / double(b.pad_f) - c, sig);
    }
  }
  {
    const double sig_nu = 1.0 / (2.0 * M_PI * phi_f_sigma_bins);
    b.phi_f.assign(b.pad_f, 0.0);
    for (std::size_t i = 0; i < b.pad_f; ++i) {
      const double nu = double(std::min(i, b.pad_f - i)) / double(b.pad_f);
      b.phi_f[i] = gauss(nu, sig_nu);
    }
  }

  for (int k = 0; k < n_bins; k += cfg_.freq_stride) b.out_bins.push_back(k);

  for (const int w : cfg_.mss_windows) {
    if (!is_power_of_two(std::size_t(w))) {
      throw std::invalid_argument("FilterBankConfig: MSS windows must be powers of two");
    }
    if (b.plans.find(std::size_t(w)) == b.plans.end()) {
      b.plans.emplace(std::size_t(w), FftPlan(std::size_t(w)));
    }
  }

  auto [pos, ok] = banks_.emplace(length, std::move(bank));
  (void)ok;
  return *pos->second;
}

Eigen::MatrixXd FeatureExtractor::Bank::compute_u1(const AudioBuffer& audio) const {
  const std::size_t n = padded_len;
  std::vector<cplx> spectrum(n, cplx(0.0, 0.0));
  for (std::size_t i = 0; i < audio.samples.size(); ++i) {
    spectrum[i] = cplx(audio.samples[i], 0.0);
  }
  plan(n).forward(spectrum.data());

  Eigen::MatrixXd u1(Eigen::Index(bands.size()), Eigen::Index(n_frames));
  std::vector<cplx> folded;
  for (std::size_t k = 0; k < bands.size(); ++k) {
    const Band& band = bands[k];
    const std::size_t m = n / band.dec;
    folded.assign(m, cplx(0.0, 0.0));
    for (std::size_t i = 0; i < band.response.size(); ++i) {
      const std::size_t src = band.i0 + i;
      folded[src % m] += spectrum[src] * band.response[i];
    }
    plan(m).inverse(folded.data());
    const double scale = double(m) / double(n);
    for (int t = 0; t < n_frames; ++t) {
      double acc = 0.0;
      for (std::size_t q = 0; q < band.pool; ++q) {
        acc += std::abs(folded[std::size_t(t) * band.pool + q]);
      }
      u1(Eigen::Index(k), t) = acc * scale / double(band.pool);
    }
  }
  return u1;
}

Eigen::MatrixXd FeatureExtractor::Bank::time_average(const Eigen::MatrixXd& u) const {
  if (global_time_avg) {
    Eigen::MatrixXd out(u.rows(), 1);
    for (Eigen::Index r = 0; r < u.rows(); ++r) {
      double acc = 0.0;
      for (Eigen::Index t = 0; t < u.cols(); ++t) {
        acc += u(r, t) * t_weights[std::size_t(t)];
      }
      out(r, 0) = acc / t_weight_sum;
    }
    return out;
  }
  Eigen::MatrixXd out(u.rows(), t_frames);
  std::vector<cplx> buf(pad_t);
  for (Eigen::Index r = 0; r < u.rows(); ++r) {
    std::fill(buf.begin(), buf.end(), cplx(0.0, 0.0));
    for (Eigen::Index t = 0; t < u.cols(); ++t) buf[std::size_t(t)] = cplx(u(r, t), 0.0);
    plan(pad_t).forward(buf.data());
    for (std::size_t i = 0; i < pad_t; ++i) buf[i] *= phi_t[i];
    plan(pad_t).inverse(buf.data());
    for (int f = 0; f < t_frames; ++f) {
      // Clamp FFT roundoff; averages of moduli are nonnegative.
      out(r, f) = std::max(0.0, buf[std::size_t(f) * std::size_t(t_stride)].real());
    }
  }
  return out;
}

Eigen::VectorXd FeatureExtractor::Bank::freq_average_stride(
    const Eigen::VectorXd& col) const {
  const int n_bins = int(col.size());
  std::vector<cplx> buf(pad_f);
  for (std::size_t i = 0; i < pad_f; ++i) {
    const int src = reflect_index(long(i) - pad_left, n_bins);
    buf[i] = cplx(col[src], 0.0);
  }
  plan(pad_f).forward(buf.data());
  for (std::size_t i = 0; i < pad_f; ++i) buf[i] *= phi_f[i];
  plan(pad_f).inverse(buf.data());
  Eigen::VectorXd out(Eigen::Index(out_bins.size()));
  for (std::size_t k = 0; k < out_bins.size(); ++k) {
    out[Eigen::Index(k)] =
        std::max(0.0, buf[std::size_t(pad_left + out_bins[k])].real());
  }
  return out;
}

Eigen::VectorXd FeatureExtractor::Bank::stride_only(const Eigen::VectorXd& col) const {
  Eigen::VectorXd out(Eigen::Index(out_bins.size()));
  for (std::size_t k = 0; k < out_bins.size(); ++k) out[Eigen::Index(k)] = col[out_bins[k]];
  return out;
}

// ---------------------------------------------------------------------------
// Public transforms

Scalogram FeatureExtractor::scalogram(const AudioBuffer& audio) const {
  const Bank& bank = bank_for(audio.samples.size());
  Scalogram s;
  s.magnitudes = bank.compute_u1(audio);
  s.hop = cfg_.hop;
  s.sample_rate = cfg_.sample_rate;
  s.bin_frequencies_hz.resize(bank.bands.size());
  for (std::size_t k = 0; k < bank.bands.size(); ++k) {
    s.bin_frequencies_hz[k] = bank.bands[k].xi_hz;
  }
  return s;
}

FeatureVector FeatureExtractor::jtfs(const AudioBuffer& audio) const {
  const Bank& bank = bank_for(audio.samples.size());
  const int n_bins = cfg_.n_bins();
  const auto n_out = Eigen::Index(bank.out_bins.size());

  const Eigen::MatrixXd u1 = bank.compute_u1(audio);

  std::vector<double> values;
  std::vector<PathDescriptor> descs;
  const std::size_t total =
      std::size_t(n_out) * std::size_t(bank.t_frames) *
      std::size_t(1 + cfg_.rate_octaves + cfg_.fr_scales +
                  cfg_.rate_octaves * cfg_.fr_scales * 2);
  values.reserve(total);
  descs.reserve(total);

  auto emit = [&](const Eigen::VectorXd& v, PathKind kind, int order, double rate_hz,
                  double scale_cpo, int orientation, int time_frame) {
    for (Eigen::Index k = 0; k < v.size(); ++k) {
      values.push_back(v[k]);
      PathDescriptor d;
      d.kind = kind;
      d.order = order;
      d.freq_hz = bank.bands[std::size_t(bank.out_bins[std::size_t(k)])].xi_hz;
      d.rate_hz = rate_hz;
      d.scale_cpo = scale_cpo;
      d.orientation = orientation;
      d.time_frame = time_frame;
      descs.push_back(d);
    }
  };

  // Order 1: time average then frequential lowpass.
  const Eigen::MatrixXd s1_t = bank.time_average(u1);
  for (int f = 0; f < bank.t_frames; ++f) {
    emit(bank.freq_average_stride(s1_t.col(f)), PathKind::kOrder1, 1, 0.0, 0.0, 0, f);
  }

  // Temporal-lowpass x frequential-wavelet paths. The time-averaged rows are
  // real, so the two orientations coincide and a single path is emitted.
  std::vector<cplx> fbuf(bank.pad_f);
  std::vector<cplx> fspec(bank.pad_f);
  for (int jf = 0; jf < cfg_.fr_scales; ++jf) {
    const double cpo = bank.psi_f_center_cpb[std::size_t(jf)] * cfg_.q1;
    for (int f = 0; f < bank.t_frames; ++f) {
      for (std::size_t i = 0; i < bank.pad_f; ++i) {
        const int src = reflect_index(long(i) - bank.pad_left, n_bins);
        fbuf[i] = cplx(s1_t(src, f), 0.0);
      }
      bank.plan(bank.pad_f).forward(fbuf.data());
      for (std::size_t i = 0; i < bank.pad_f; ++i) {
        fbuf[i] *= bank.psi_f[std::size_t(jf)][i];
      }
      bank.plan(bank.pad_f).inverse(fbuf.data());
      Eigen::VectorXd mod(n_bins);
      for (int k = 0; k < n_bins; ++k) {
        mod[k] = std::abs(fbuf[std::size_t(bank.pad_left + k)]);
      }
      emit(bank.freq_average_stride(mod), PathKind::kFreqOnly, 2, 0.0, cpo, 0, f);
    }
  }

  // FFT of each scalogram row along the padded frame axis, computed once.
  Eigen::MatrixXcd rows_spec(n_bins, Eigen::Index(bank.pad_t));
  {
    std::vector<cplx> buf(bank.pad_t);
    for (int r = 0; r < n_bins; ++r) {
      std::fill(buf.begin(), buf.end(), cplx(0.0, 0.0));
      for (int t = 0; t < bank.n_frames; ++t) buf[std::size_t(t)] = cplx(u1(r, t), 0.0);
      bank.plan(bank.pad_t).forward(buf.data());
      for (std::size_t i = 0; i < bank.pad_t; ++i) rows_spec(r, Eigen::Index(i)) = buf[i];
    }
  }

  std::vector<cplx> tbuf(bank.pad_t);
  Eigen::MatrixXcd v(n_bins, bank.n_frames);
  Eigen::MatrixXcd vf(Eigen::Index(bank.pad_f), bank.n_frames);
  Eigen::MatrixXd mod(n_bins, bank.n_frames);
  for (int jt = 0; jt < cfg_.rate_octaves; ++jt) {
    const double rate = bank.psi_t_center_hz[std::size_t(jt)];
    // Complex band signal along time for every scalogram row.
    for (int r = 0; r < n_bins; ++r) {
      for (std::size_t i = 0; i < bank.pad_t; ++i) {
        tbuf[i] = rows_spec(r, Eigen::Index(i)) * bank.psi_t[std::size_t(jt)][i];
      }
      bank.plan(bank.pad_t).inverse(tbuf.data());
      for (int t = 0; t < bank.n_frames; ++t) v(r, t) = tbuf[std::size_t(t)];
    }

    // Temporal-wavelet x frequential-lowpass path.
    for (int t = 0; t < bank.n_frames; ++t) {
      for (std::size_t i = 0; i < bank.pad_f; ++i) {
        const int src = reflect_index(long(i) - bank.pad_left, n_bins);
        fspec[i] = v(src, t);
      }
      bank.plan(bank.pad_f).forward(fspec.data());
      for (std::size_t i = 0; i < bank.pad_f; ++i) vf(Eigen::Index(i), t) = fspec[i];
      for (std::size_t i = 0; i < bank.pad_f; ++i) fbuf[i] = fspec[i] * bank.phi_f[i];
      bank.plan(bank.pad_f).inverse(fbuf.data());
      for (int k = 0; k < n_bins; ++k) {
        mod(k, t) = std::abs(fbuf[std::size_t(bank.pad_left + k)]);
      }
    }
    {
      const Eigen::MatrixXd avg = bank.time_average(mod);
      for (int f = 0; f < bank.t_frames; ++f) {
        emit(bank.stride_only(avg.col(f)), PathKind::kTimeOnly, 2, rate, 0.0, 0, f);
      }
    }

    // Joint paths, both frequential orientations.
    for (int jf = 0; jf < cfg_.fr_scales; ++jf) {
      const double cpo = bank.psi_f_center_cpb[std::size_t(jf)] * cfg_.q1;
      for (const int orientation : {+1, -1}) {
        for (int t = 0; t < bank.n_frames; ++t) {
          if (orientation > 0) {
            for (std::size_t i = 0; i < bank.pad_f; ++i) {
              fbuf[i] = vf(Eigen::Index(i), t) * bank.psi_f[std::size_t(jf)][i];
            }
          } else {
            for (std::size_t i = 0; i < bank.pad_f; ++i) {
              const std::size_t mirror = (bank.pad_f - i) % bank.pad_f;
              fbuf[i] = vf(Eigen::Index(i), t) * bank.psi_f[std::size_t(jf)][mirror];
            }
          }
          bank.plan(bank.pad_f).inverse(fbuf.data());
          for (int k = 0; k < n_bins; ++k) {
            mod(k, t) = std::abs(fbuf[std::size_t(bank.pad_left + k)]);
          }
        }
        const Eigen::MatrixXd avg = bank.time_average(mod);
        for (int f = 0; f < bank.t_frames; ++f) {
          emit(bank.freq_average_stride(avg.col(f)), PathKind::kJoint, 2, rate, cpo,
               orientation, f);
        }
      }
    }
  }

  FeatureVector out;
  out.feature_map_id = jtfs_id();
  out.values = Eigen::Map<Eigen::VectorXd>(values.data(), Eigen::Index(values.size()));
  out.descriptors = std::move(descs);
  return out;
}

FeatureVector FeatureExtractor::jtfs_log(const AudioBuffer& audio) const {
  return log_compress(jtfs(audio), cfg_.epsilon);
}

FeatureVector FeatureExtractor::mss(const AudioBuffer& audio) const {
  if (audio.samples.empty()) {
    throw std::invalid_argument("mss: audio must be non-empty");
  }
  const Bank& bank = bank_for(audio.samples.size());
  const std::size_t len = audio.samples.size();

  std::vector<double> values;
  for (const int w : cfg_.mss_windows) {
    const std::size_t win = std::size_t(w);
    const std::size_t hop = win / 4;
    const std::size_t n_frames = len >= win ? 1 + (len - win) / hop : 1;
    const std::size_t n_bins = win / 2 + 1;

    std::vector<double> window(win);
    for (std::size_t i = 0; i < win; ++i) {
      window[i] = 0.5 * (1.0 - std::cos(2.0 * M_PI * double(i) / double(win)));
    }

    std::vector<double> mags(n_frames * n_bins);
    std::vector<cplx> buf(win);
    for (std::size_t f = 0; f < n_frames; ++f) {
      for (std::size_t i = 0; i < win; ++i) {
        const std::size_t src = f * hop + i;
        const double s = src < len ? audio.samples[src] : 0.0;
        buf[i] = cplx(s * window[i], 0.0);
      }
      bank.plan(win).forward(buf.data());
      for (std::size_t k = 0; k < n_bins; ++k) {
        mags[f * n_bins + k] = std::abs(buf[k]);
      }
    }
    values.insert(values.end(), mags.begin(), mags.end());
    for (const double m : mags) {
      values.push_back(std::log(std::max(m, cfg_.mss_log_floor)));
    }
  }

  FeatureVector out;
  out.feature_map_id = mss_id();
  out.values = Eigen::Map<Eigen::VectorXd>(values.data(), Eigen::Index(values.size()));
  return out;
}

FeatureVector FeatureExtractor::encoder_input(const AudioBuffer& audio) const {
  const Bank& bank = bank_for(audio.samples.size());
  const Eigen::MatrixXd u1 = bank.compute_u1(audio);
  const Eigen::MatrixXd logmag =
      (u1.array() / cfg_.epsilon).log1p().matrix();

  const int n_bins = cfg_.n_bins();
  FeatureVector out;
  out.feature_map_id = cqt_id();
  out.values.resize(2 * n_bins);
  out.descriptors.resize(std::size_t(2 * n_bins));
  for (int k = 0; k < n_bins; ++k) {
    out.values[k] = logmag.row(k).mean();
    out.values[n_bins + k] = logmag.row(k).maxCoeff();
    PathDescriptor d;
    d.order = 1;
    d.freq_hz = bank.bands[std::size_t(k)].xi_hz;
    d.kind = PathKind::kCqtMean;
    out.descriptors[std::size_t(k)] = d;
    d.kind = PathKind::kCqtMax;
    out.descriptors[std::size_t(n_bins + k)] = d;
  }
  return out;
}

FeatureVector log_compress(const FeatureVector& v, double epsilon) {
  if (epsilon <= 0.0) throw std::domain_error("log_compress: epsilon must be positive");
  FeatureVector out = v;
  for (Eigen::Index i = 0; i < v.values.size(); ++i) {
    if (v.values[i] < 0.0) {
      throw std::domain_error("log_compress: negative feature value at index " +
                              std::to_string(i));
    }
    out.values[i] = std::log1p(v.values[i] / epsilon);
  }
  return out;
}

std::string FeatureExtractor::jtfs_id() const {
  std::ostringstream id;
  id << "jtfs[fs=" << fmt_g(cfg_.sample_rate) << ",q1=" << cfg_.q1 << ",q2=" << cfg_.q2
     << ",qfr=" << cfg_.q_fr << ",oct=" << cfg_.octaves << ",T=" << fmt_g(cfg_.T)
     << ",F=" << fmt_g(cfg_.F) << ",eps=" << fmt_g(cfg_.epsilon) << ",hop=" << cfg_.hop
     << ",rates=" << cfg_.rate_octaves << ",frsc=" << cfg_.fr_scales
     << ",stride=" << cfg_.freq_stride << "]";
  return id.str();
}

std::string FeatureExtractor::mss_id() const {
  std::ostringstream id;
  id << "mss[fs=" << fmt_g(cfg_.sample_rate) << ",w=";
  for (std::size_t i = 0; i < cfg_.mss_windows.size(); ++i) {
    if (i) id << ":";
    id << cfg_.mss_windows[i];
  }
  id << ",hop=w/4,floor=" << fmt_g(cfg_.mss_log_floor) << "]";
  return id.str();
}

std::string FeatureExtractor::cqt_id() const {
  std::ostringstream id;
  id << "cqt" << 2 * cfg_.n_bins() << "[fs=" << fmt_g(cfg_.sample_rate)
     << ",q1=" << cfg_.q1 << ",oct=" << cfg_.octaves << ",eps=" << fmt_g(cfg_.epsilon)
     << ",hop=" << cfg_.hop << "]";
  return id.str();
}

int FeatureExtractor::jtfs_size() const {
  const int n_out = (cfg_.n_bins() + cfg_.freq_stride - 1) / cfg_.freq_stride;
  return n_out * (1 + cfg_.rate_octaves + cfg_.fr_scales +
                  cfg_.rate_octaves * cfg_.fr_scales * 2);
}

// ---------------------------------------------------------------------------
// Serialization

namespace {
constexpr char kFeatureMagic[4] = {'P', 'N', 'P', 'F'};
constexpr std::uint32_t kFeatureVersion = 1;
}  // namespace

void write_feature_file(const FeatureVector& v, const std::string& path) {
  std::string out;
  out.append(kFeatureMagic, 4);
  put_u32(out, kFeatureVersion);
  put_u32(out, std::uint32_t(v.feature_map_id.size()));
  out += v.feature_map_id;
  put_u64(out, std::uint64_t(v.values.size()));
  for (Eigen::Index i = 0; i < v.values.size(); ++i) put_f64(out, v.values[i]);
  write_file_bytes(path, out, "write_feature_file");
}

FeatureVector read_feature_file(const std::string& path) {
  const std::string bytes = read_file_bytes(path, "read_feature_file");
  ByteReader r(bytes);
  const std::string magic = r.bytes(4, "magic");
  if (std::memcmp(magic.data(), kFeatureMagic, 4) != 0) {
    throw std::runtime_error("read_feature_file: magic mismatch in " + path);
  }
  const std::uint32_t version = r.u32("version");
  if (version != kFeatureVersion) {
    throw std::runtime_error("read_feature_file: unsupported version " +
                             std::to_string(version));
  }
  FeatureVector v;
  const std::uint32_t id_len = r.u32("id length");
  v.feature_map_id = r.bytes(id_len, "feature_map_id");
  const std::uint64_t p = r.u64("P");
  v.values.resize(Eigen::Index(p));
  for (std::uint64_t i = 0; i < p; ++i) v.values[Eigen::Index(i)] = r.f64("value");
  return v;
}

void write_feature_csv(const FeatureVector& v, const std::string& path) {
  std::ostringstream out;
  const bool described = v.descriptors.size() == std::size_t(v.values.size());
  if (described) {
    out << "index,kind,order,freq_hz,rate_hz,scale_cpo,orientation,time_frame,value\n";
  } else {
    out << "index,value\n";
  }
  char num[64];
  for (Eigen::Index i = 0; i < v.values.size(); ++i) {
    std::snprintf(num, sizeof(num), "%.17g", v.values[i]);
    if (described) {
      const PathDescriptor& d = v.descriptors[std::size_t(i)];
      out << i << "," << int(d.kind) << "," << d.order << "," << fmt_g(d.freq_hz) << ","
          << fmt_g(d.rate_hz) << "," << fmt_g(d.scale_cpo) << "," << d.orientation << ","
          << d.time_frame << "," << num << "\n";
    } else {
      out << i << "," << num << "\n";
    }
  }
  write_file_bytes(path, out.str(), "write_feature_csv");
}

}  // namespace pnp
