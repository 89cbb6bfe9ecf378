#include "pnp/metric.hpp"

#include <Eigen/Eigenvalues>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "pnp/parallel.hpp"

namespace pnp {

namespace {

std::string theta_to_string(const NormalizedTheta& theta) {
  std::ostringstream s;
  s << "[";
  for (int i = 0; i < theta.dim(); ++i) {
    if (i) s << ", ";
    s << theta.values[i];
  }
  s << "]";
  return s.str();
}

Eigen::VectorXd probe(const FeatureFn& phi_g, const NormalizedTheta& theta) {
  try {
    return phi_g(theta);
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string("jacobian_fd: feature evaluation failed at ") +
                             theta_to_string(theta) + ": " + e.what());
  }
}

constexpr char kCacheMagic[4] = {'P', 'N', 'P', 'M'};
constexpr std::uint32_t kCacheVersion = 1;

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

struct CacheReader {
  const unsigned char* p;
  std::size_t size, pos = 0;
  explicit CacheReader(const std::string& s)
      : p(reinterpret_cast<const unsigned char*>(s.data())), size(s.size()) {}
  void need(std::size_t n, const char* what) {
    if (pos + n > size) {
      throw std::runtime_error(std::string("cache_read: truncated file while reading ") +
                               what);
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
};

}  // namespace

JacobianMatrix jacobian_fd(const NormalizedTheta& theta, const FeatureFn& phi_g,
                           double h, const std::string& feature_map_id,
                           unsigned workers) {
  return jacobian_fd(theta, phi_g,
                     Eigen::VectorXd::Constant(theta.dim(), h).eval(), feature_map_id,
                     workers);
}

JacobianMatrix jacobian_fd(const NormalizedTheta& theta, const FeatureFn& phi_g,
                           const Eigen::VectorXd& h, const std::string& feature_map_id,
                           unsigned workers) {
  const int j_dim = theta.dim();
  if (h.size() != j_dim) {
    throw std::invalid_argument("jacobian_fd: step vector dimension mismatch");
  }
  for (int j = 0; j < j_dim; ++j) {
    if (!(h[j] > 0.0)) throw std::invalid_argument("jacobian_fd: step must be positive");
  }

  JacobianMatrix jac;
  jac.theta = theta;
  jac.fd_step = h;
  jac.one_sided.assign(std::size_t(j_dim), 0);
  jac.feature_map_id = feature_map_id;

  // One probe list: +/- points per component, plus the base point when a
  // boundary forces a one-sided difference.
  struct Probe {
    NormalizedTheta point;
    Eigen::VectorXd value;
  };
  std::vector<Probe> probes;
  std::vector<std::array<int, 2>> col_plan(static_cast<std::size_t>(j_dim));  // probe indices (hi, lo)
  int base_index = -1;
  for (int j = 0; j < j_dim; ++j) {
    const double x = theta.values[j];
    NormalizedTheta up = theta;
    NormalizedTheta down = theta;
    if (x + h[j] <= 1.0 && x - h[j] >= -1.0) {
      up.values[j] = x + h[j];
      down.values[j] = x - h[j];
      col_plan[std::size_t(j)] = {int(probes.size()), int(probes.size()) + 1};
      probes.push_back({up, {}});
      probes.push_back({down, {}});
    } else {
      jac.one_sided[std::size_t(j)] = 1;
      if (base_index < 0) {
        base_index = int(probes.size());
        probes.push_back({theta, {}});
      }
      if (x + h[j] > 1.0) {
        down.values[j] = x - h[j];
        col_plan[std::size_t(j)] = {base_index, int(probes.size())};
        probes.push_back({down, {}});
      } else {
        up.values[j] = x + h[j];
        col_plan[std::size_t(j)] = {int(probes.size()), base_index};
        probes.push_back({up, {}});
      }
    }
  }

  parallel_for(
      probes.size(),
      [&](std::size_t k) { probes[k].value = probe(phi_g, probes[k].point); },
      workers == 0 ? 0 : workers);

  for (int j = 0; j < j_dim; ++j) {
    const Eigen::VectorXd& hi = probes[std::size_t(col_plan[std::size_t(j)][0])].value;
    const Eigen::VectorXd& lo = probes[std::size_t(col_plan[std::size_t(j)][1])].value;
    const double denom = jac.one_sided[std::size_t(j)] ? h[j] : 2.0 * h[j];
    const Eigen::VectorXd column = (hi - lo) / denom;
    if (jac.entries.size() == 0) {
      jac.entries.resize(column.size(), j_dim);
    } else if (column.size() != jac.entries.rows()) {
      throw std::runtime_error("jacobian_fd: feature dimension changed between probes");
    }
    jac.entries.col(j) = column;
  }
  if (!jac.entries.allFinite()) {
    throw std::runtime_error("jacobian_fd: non-finite entries at " +
                             theta_to_string(theta));
  }
  return jac;
}

Eigen::MatrixXd gram(const JacobianMatrix& jac) {
  return jac.entries.transpose() * jac.entries;
}

void eig_sym(const Eigen::MatrixXd& m, Eigen::VectorXd& eigenvalues,
             Eigen::MatrixXd& eigenvectors) {
  if (m.rows() != m.cols()) {
    throw std::invalid_argument("eig_sym: matrix must be square");
  }
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-8 * scale) {
    throw std::invalid_argument("eig_sym: matrix is not symmetric within tolerance");
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(
      0.5 * (m + m.transpose()));
  if (solver.info() != Eigen::Success) {
    throw std::runtime_error("eig_sym: eigensolver failed to converge");
  }
  const Eigen::Index n = m.rows();
  eigenvalues.resize(n);
  eigenvectors.resize(n, n);
  for (Eigen::Index k = 0; k < n; ++k) {
    // Eigen returns ascending order.
    const Eigen::Index src = n - 1 - k;
    eigenvalues[k] = solver.eigenvalues()[src];
    Eigen::VectorXd v = solver.eigenvectors().col(src);
    Eigen::Index argmax = 0;
    v.cwiseAbs().maxCoeff(&argmax);
    if (v[argmax] < 0.0) v = -v;
    eigenvectors.col(k) = v;
  }
}

Eigen::MatrixXd damp(const Eigen::MatrixXd& m, double lambda) {
  if (!(lambda >= 0.0)) {
    throw std::domain_error("damp: lambda must be nonnegative, got " +
                            std::to_string(lambda));
  }
  return m + lambda * Eigen::MatrixXd::Identity(m.rows(), m.cols());
}

MetricRecord make_metric_record(std::uint64_t sample_id, const JacobianMatrix& jac) {
  MetricRecord rec;
  rec.sample_id = sample_id;
  rec.m = gram(jac);
  rec.theta = jac.theta;
  rec.feature_map_id = jac.feature_map_id;
  rec.fd_step = jac.fd_step.size() > 0 ? jac.fd_step[0] : 0.0;
  eig_sym(rec.m, rec.eigenvalues, rec.eigenvectors);
  const double top = rec.eigenvalues.size() > 0 ? std::abs(rec.eigenvalues[0]) : 0.0;
  for (Eigen::Index i = 0; i < rec.eigenvalues.size(); ++i) {
    if (rec.eigenvalues[i] < -1e-8 * std::max(top, 1.0)) {
      throw std::runtime_error("make_metric_record: Gram matrix eigenvalue " +
                               std::to_string(rec.eigenvalues[i]) +
                               " below PSD roundoff tolerance");
    }
    if (rec.eigenvalues[i] < 0.0) rec.eigenvalues[i] = 0.0;
  }
  return rec;
}

void cache_write(const std::vector<MetricRecord>& records, const std::string& path) {
  int j_dim = -1;
  std::string feature_id;
  for (const MetricRecord& rec : records) {
    if (j_dim == -1) {
      j_dim = int(rec.m.rows());
      feature_id = rec.feature_map_id;
    } else if (int(rec.m.rows()) != j_dim || rec.feature_map_id != feature_id) {
      throw std::invalid_argument(
          "cache_write: records must share J and feature_map_id");
    }
  }
  if (j_dim == -1) j_dim = 0;

  std::string out;
  out.append(kCacheMagic, 4);
  put_u32(out, kCacheVersion);
  put_u32(out, std::uint32_t(j_dim));
  put_u64(out, std::uint64_t(records.size()));
  put_u32(out, std::uint32_t(feature_id.size()));
  out += feature_id;
  for (const MetricRecord& rec : records) {
    put_u64(out, rec.sample_id);
    for (int i = 0; i < j_dim; ++i) put_f64(out, rec.theta.values[i]);
    for (int r = 0; r < j_dim; ++r) {
      for (int c = r; c < j_dim; ++c) put_f64(out, rec.m(r, c));
    }
    for (int i = 0; i < j_dim; ++i) put_f64(out, rec.eigenvalues[i]);
    for (int c = 0; c < j_dim; ++c) {
      for (int r = 0; r < j_dim; ++r) put_f64(out, rec.eigenvectors(r, c));
    }
    put_f64(out, rec.fd_step);
  }

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cache_write: cannot open " + path);
  f.write(out.data(), std::streamsize(out.size()));
  if (!f) throw std::runtime_error("cache_write: write failed for " + path);
}

std::vector<MetricRecord> cache_read(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cache_read: cannot open " + path);
  const std::string bytes((std::istreambuf_iterator<char>(f)),
                          std::istreambuf_iterator<char>());
  CacheReader r(bytes);
  r.need(4, "magic");
  if (std::memcmp(r.p, kCacheMagic, 4) != 0) {
    throw std::runtime_error("cache_read: magic mismatch in " + path);
  }
  r.pos += 4;
  const std::uint32_t version = r.u32("version");
  if (version != kCacheVersion) {
    throw std::runtime_error("cache_read: unsupported version " +
                             std::to_string(version));
  }
  const int j_dim = int(r.u32("J"));
  const std::uint64_t n = r.u64("N");
  const std::uint32_t id_len = r.u32("feature_map_id length");
  r.need(id_len, "feature_map_id");
  const std::string feature_id(reinterpret_cast<const char*>(r.p + r.pos), id_len);
  r.pos += id_len;

  std::vector<MetricRecord> records;
  records.reserve(n);
  for (std::uint64_t k = 0; k < n; ++k) {
    MetricRecord rec;
    rec.feature_map_id = feature_id;
    rec.sample_id = r.u64("sample id");
    rec.theta.values.resize(j_dim);
    rec.theta.includes_pitch = j_dim == 5;
    for (int i = 0; i < j_dim; ++i) rec.theta.values[i] = r.f64("theta");
    rec.m.resize(j_dim, j_dim);
    for (int row = 0; row < j_dim; ++row) {
      for (int col = row; col < j_dim; ++col) {
        const double v = r.f64("metric entry");
        rec.m(row, col) = v;
        rec.m(col, row) = v;
      }
    }
    rec.eigenvalues.resize(j_dim);
    for (int i = 0; i < j_dim; ++i) rec.eigenvalues[i] = r.f64("eigenvalue");
    rec.eigenvectors.resize(j_dim, j_dim);
    for (int col = 0; col < j_dim; ++col) {
      for (int row = 0; row < j_dim; ++row) {
        rec.eigenvectors(row, col) = r.f64("eigenvector");
      }
    }
    rec.fd_step = r.f64("fd_step");
    records.push_back(std::move(rec));
  }
  return records;
}

MetricCache::MetricCache(std::vector<MetricRecord> records)
    : records_(std::move(records)) {
  index_.reserve(records_.size());
  for (std::size_t i = 0; i < records_.size(); ++i) {
    index_[records_[i].sample_id] = i;
  }
}

MetricCache MetricCache::load(const std::string& path) {
  return MetricCache(cache_read(path));
}

const MetricRecord* MetricCache::find(std::uint64_t sample_id) const {
  const auto it = index_.find(sample_id);
  return it == index_.end() ? nullptr : &records_[it->second];
}

const MetricRecord& MetricCache::at(std::uint64_t sample_id) const {
  const MetricRecord* rec = find(sample_id);
  if (!rec) {
    throw std::out_of_range("metric cache: no record for sample " +
                            std::to_string(sample_id));
  }
  return *rec;
}

double MetricCache::max_eigenvalue() const {
  double top = 0.0;
  for (const MetricRecord& rec : records_) {
    if (rec.eigenvalues.size() > 0) top = std::max(top, rec.eigenvalues[0]);
  }
  return top;
}

void write_eigenvalue_csv(const std::vector<MetricRecord>& records,
                          const std::string& path) {
  std::ostringstream out;
  out << "sample_id";
  const int j_dim = records.empty() ? 0 : int(records.front().eigenvalues.size());
  for (int i = 1; i <= j_dim; ++i) out << ",sigma2_" << i;
  out << "\n";
  char num[64];
  for (const MetricRecord& rec : records) {
    out << rec.sample_id;
    for (int i = 0; i < j_dim; ++i) {
      std::snprintf(num, sizeof(num), "%.17g", rec.eigenvalues[i]);
      out << "," << num;
    }
    out << "\n";
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_eigenvalue_csv: cannot open " + path);
  f << out.str();
}

}  // namespace pnp
