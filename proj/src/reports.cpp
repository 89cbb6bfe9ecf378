#include "pnp/reports.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include "pnp/losses.hpp"
#include "pnp/parallel.hpp"

namespace fs = std::filesystem;

namespace pnp {

namespace {

std::string num17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (const char ch : line) {
    if (ch == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  fields.push_back(cur);
  return fields;
}

}  // namespace

void write_predictions_csv(const std::vector<PredictionRow>& rows,
                           const std::string& path) {
  std::ostringstream out;
  const int j_dim = rows.empty() ? 0 : int(rows.front().theta_true.size());
  out << "sample_id";
  for (int j = 0; j < j_dim; ++j) out << ",theta_true_" << j;
  for (int j = 0; j < j_dim; ++j) out << ",theta_pred_" << j;
  out << "\n";
  for (const PredictionRow& r : rows) {
    out << r.sample_id;
    for (int j = 0; j < j_dim; ++j) out << "," << num17(r.theta_true[j]);
    for (int j = 0; j < j_dim; ++j) out << "," << num17(r.theta_pred[j]);
    out << "\n";
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_predictions_csv: cannot open " + path);
  f << out.str();
}

std::vector<PredictionRow> read_predictions_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("read_predictions_csv: cannot open " + path);
  std::string line;
  if (!std::getline(f, line)) {
    throw std::runtime_error("read_predictions_csv: empty file " + path);
  }
  const auto header = split_csv_line(line);
  if (header.size() < 3 || (header.size() - 1) % 2 != 0) {
    throw std::runtime_error("read_predictions_csv: malformed header in " + path);
  }
  const int j_dim = int((header.size() - 1) / 2);
  std::vector<PredictionRow> rows;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const auto fields = split_csv_line(line);
    if (int(fields.size()) != 1 + 2 * j_dim) {
      throw std::runtime_error("read_predictions_csv: malformed row in " + path);
    }
    PredictionRow r;
    r.sample_id = std::stoull(fields[0]);
    r.theta_true.resize(j_dim);
    r.theta_pred.resize(j_dim);
    for (int j = 0; j < j_dim; ++j) {
      r.theta_true[j] = std::stod(fields[std::size_t(1 + j)]);
      r.theta_pred[j] = std::stod(fields[std::size_t(1 + j_dim + j)]);
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<PredictionRow> predict_test_set(const DatasetManifest& manifest,
                                            const std::string& dir,
                                            const Checkpoint& ckpt) {
  if (ckpt.includes_pitch == manifest.pitch_known) {
    throw std::runtime_error(
        "predict_test_set: checkpoint pitch mode disagrees with the manifest");
  }
  std::vector<PredictionRow> rows;
  const fs::path base(dir);
  for (const std::size_t i : manifest.split_indices(Split::kTest)) {
    const SampleEntry& e = manifest.samples[i];
    const FeatureVector features = read_feature_file((base / e.feature_path).string());
    PredictionRow row;
    row.sample_id = e.id;
    row.theta_true = manifest.target_theta(e).values;
    row.theta_pred = forward(ckpt.weights, features.values);
    rows.push_back(std::move(row));
  }
  return rows;
}

EvalMetrics evaluate_predictions(const DatasetManifest& manifest,
                                 const std::vector<PredictionRow>& rows,
                                 const FeatureExtractor& extractor, unsigned workers) {
  // Index manifest samples by id.
  std::unordered_map<std::uint64_t, const SampleEntry*> by_id;
  for (const SampleEntry& e : manifest.samples) by_id[e.id] = &e;

  SynthOptions synth;
  synth.sample_rate = manifest.sample_rate;
  synth.mode_limit = manifest.mode_limit;

  std::vector<double> jtfs_dist(rows.size());
  std::vector<double> mss_dist(rows.size());
  parallel_for(
      rows.size(),
      [&](std::size_t k) {
        const PredictionRow& row = rows[k];
        const auto it = by_id.find(row.sample_id);
        if (it == by_id.end()) {
          throw std::runtime_error("evaluate_predictions: sample " +
                                   std::to_string(row.sample_id) +
                                   " is not in the manifest");
        }
        const SampleEntry& e = *it->second;
        NormalizedTheta pred;
        pred.includes_pitch = !manifest.pitch_known;
        pred.fixed_pitch = e.theta.values[0];
        pred.values = row.theta_pred;
        const AudioBuffer target = synthesize(e.theta, manifest.duration, synth);
        const AudioBuffer render = synthesize(pred, manifest.duration, synth);
        jtfs_dist[k] = (extractor.jtfs_log(render).values -
                        extractor.jtfs_log(target).values)
                           .norm();
        mss_dist[k] =
            (extractor.mss(render).values - extractor.mss(target).values).norm();
      },
      workers);

  EvalMetrics metrics;
  metrics.n = int(rows.size());
  if (!rows.empty()) {
    metrics.jtfs_mean =
        std::accumulate(jtfs_dist.begin(), jtfs_dist.end(), 0.0) / double(rows.size());
    metrics.mss_mean =
        std::accumulate(mss_dist.begin(), mss_dist.end(), 0.0) / double(rows.size());
  }
  return metrics;
}

EvalRow aggregate_eval(const std::string& loss_label, const std::string& phi_label,
                       const std::string& pitch_label,
                       const std::vector<EvalMetrics>& per_run,
                       double mean_epoch_seconds) {
  EvalRow row;
  row.loss_label = loss_label;
  row.phi_label = phi_label;
  row.pitch_label = pitch_label;
  row.epoch_seconds = mean_epoch_seconds;
  row.runs = int(per_run.size());
  if (per_run.empty()) return row;
  double jm = 0.0, mm = 0.0;
  for (const EvalMetrics& m : per_run) {
    jm += m.jtfs_mean;
    mm += m.mss_mean;
  }
  jm /= double(per_run.size());
  mm /= double(per_run.size());
  double jv = 0.0, mv = 0.0;
  for (const EvalMetrics& m : per_run) {
    jv += (m.jtfs_mean - jm) * (m.jtfs_mean - jm);
    mv += (m.mss_mean - mm) * (m.mss_mean - mm);
  }
  row.jtfs_mean = jm;
  row.mss_mean = mm;
  if (per_run.size() > 1) {
    row.jtfs_std = std::sqrt(jv / double(per_run.size() - 1));
    row.mss_std = std::sqrt(mv / double(per_run.size() - 1));
  }
  return row;
}

void write_eval_csv(const std::vector<EvalRow>& rows, const std::string& path,
                    bool append) {
  const bool exists = fs::exists(path);
  std::ofstream f(path, append ? std::ios::binary | std::ios::app : std::ios::binary);
  if (!f) throw std::runtime_error("write_eval_csv: cannot open " + path);
  if (!append || !exists) {
    f << "loss,phi,pitch,jtfs_distance_mean,jtfs_distance_std,mss_mean,mss_std,"
         "epoch_seconds,runs\n";
  }
  for (const EvalRow& r : rows) {
    f << r.loss_label << "," << r.phi_label << "," << r.pitch_label << ","
      << num17(r.jtfs_mean) << "," << num17(r.jtfs_std) << "," << num17(r.mss_mean)
      << "," << num17(r.mss_std) << "," << num17(r.epoch_seconds) << "," << r.runs
      << "\n";
  }
}

void write_eig_report(const std::string& cache_path, const std::string& out_path) {
  const std::vector<MetricRecord> records = cache_read(cache_path);
  const int j_dim = records.empty() ? 0 : int(records.front().eigenvalues.size());
  std::ostringstream out;
  out << "sample_id";
  for (int i = 1; i <= j_dim; ++i) out << ",sigma2_" << i;
  out << "\n";
  for (const MetricRecord& rec : records) {
    out << rec.sample_id;
    for (int i = 0; i < j_dim; ++i) out << "," << num17(rec.eigenvalues[i]);
    out << "\n";
  }
  // Reference line: the eigenvalues of the identity metric (P-loss).
  out << "identity";
  for (int i = 0; i < j_dim; ++i) out << ",1";
  out << "\n";
  std::ofstream f(out_path, std::ios::binary);
  if (!f) throw std::runtime_error("write_eig_report: cannot open " + out_path);
  f << out.str();
}

void write_tau_histogram(const std::string& predictions_path,
                         const std::string& cache_path, const std::string& out_path,
                         std::uint64_t seed) {
  const std::vector<PredictionRow> rows = read_predictions_csv(predictions_path);
  if (rows.size() < 10) {
    throw std::runtime_error("write_tau_histogram: needs at least 10 samples, got " +
                             std::to_string(rows.size()));
  }
  const MetricCache cache = MetricCache::load(cache_path);
  const int j_dim = int(rows.front().theta_true.size());
  const int tau_index = j_dim == 5 ? 1 : 0;

  struct Item {
    double diag;
    double log_err;
    std::size_t perm;  // seeded tie-break
  };
  std::vector<std::size_t> perm(rows.size());
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(seed);
  rng.shuffle(perm);

  std::vector<Item> items(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const MetricRecord& rec = cache.at(rows[i].sample_id);
    if (int(rec.m.rows()) != j_dim) {
      throw std::runtime_error("write_tau_histogram: cache J disagrees with predictions");
    }
    const double err = rows[i].theta_pred[tau_index] - rows[i].theta_true[tau_index];
    items[i].diag = rec.m(tau_index, tau_index);
    items[i].log_err = std::log10(std::max(err * err, 1e-12));
    items[i].perm = perm[i];
  }
  std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) {
    if (a.diag != b.diag) return a.diag < b.diag;
    return a.perm < b.perm;
  });

  const std::size_t group = std::size_t(0.2 * double(items.size()));
  constexpr double kLo = -12.0, kWidth = 0.5;
  constexpr int kBins = 28;  // [-12, 2]
  std::vector<int> top(kBins, 0), bottom(kBins, 0);
  auto bin_of = [&](double v) {
    const int b = int(std::floor((v - kLo) / kWidth));
    return std::clamp(b, 0, kBins - 1);
  };
  for (std::size_t i = 0; i < group; ++i) ++bottom[std::size_t(bin_of(items[i].log_err))];
  for (std::size_t i = items.size() - group; i < items.size(); ++i) {
    ++top[std::size_t(bin_of(items[i].log_err))];
  }

  std::ostringstream out;
  out << "bin_lo,bin_hi,count_top20,count_bottom20\n";
  for (int b = 0; b < kBins; ++b) {
    out << num17(kLo + b * kWidth) << "," << num17(kLo + (b + 1) * kWidth) << ","
        << top[std::size_t(b)] << "," << bottom[std::size_t(b)] << "\n";
  }
  std::ofstream f(out_path, std::ios::binary);
  if (!f) throw std::runtime_error("write_tau_histogram: cannot open " + out_path);
  f << out.str();
}

}  // namespace pnp
