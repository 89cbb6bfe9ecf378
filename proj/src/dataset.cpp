#include "pnp/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "pnp/parallel.hpp"

namespace fs = std::filesystem;

namespace pnp {

namespace {

std::string num17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string sample_stem(std::uint64_t id) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%06llu", static_cast<unsigned long long>(id));
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

std::string split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "test") return Split::kTest;
  throw std::invalid_argument("unknown split name: " + name);
}

std::vector<std::size_t> DatasetManifest::split_indices(Split s) const {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].split == s) idx.push_back(i);
  }
  return idx;
}

NormalizedTheta DatasetManifest::target_theta(const SampleEntry& e) const {
  if (!pitch_known) return e.theta;
  NormalizedTheta t;
  t.includes_pitch = false;
  t.fixed_pitch = e.theta.values[0];
  t.values = e.theta.values.tail(4);
  return t;
}

std::vector<Split> assign_splits(int n, Rng& rng) {
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[std::size_t(i)] = i;
  rng.shuffle(order);
  const int n_train = int(0.8 * double(n));
  const int n_val = int(0.1 * double(n));
  std::vector<Split> splits(std::size_t(n), Split::kTest);
  for (int i = 0; i < n; ++i) {
    if (i < n_train) {
      splits[std::size_t(order[std::size_t(i)])] = Split::kTrain;
    } else if (i < n_train + n_val) {
      splits[std::size_t(order[std::size_t(i)])] = Split::kVal;
    }
  }
  return splits;
}

DatasetManifest generate_dataset(const std::string& out_dir, const DatasetOptions& opts,
                                 const FeatureExtractor& extractor) {
  if (opts.n < 1) throw std::invalid_argument("generate_dataset: n must be >= 1");
  const fs::path dir(out_dir);
  const fs::path manifest_path = dir / "manifest.csv";
  if (fs::exists(manifest_path) && !opts.overwrite) {
    throw std::runtime_error("generate_dataset: " + manifest_path.string() +
                             " exists; pass overwrite to replace it");
  }
  fs::create_directories(dir / "audio");
  fs::create_directories(dir / "features");

  DatasetManifest manifest;
  manifest.n = opts.n;
  manifest.seed = opts.seed;
  manifest.pitch_known = opts.pitch_known;
  manifest.sample_rate = opts.sample_rate;
  manifest.duration =
      opts.duration > 0.0 ? opts.duration : 65536.0 / opts.sample_rate;
  manifest.mode_limit = opts.mode_limit;
  manifest.feature_map_id = extractor.cqt_id();

  Rng rng(opts.seed);
  manifest.samples.resize(std::size_t(opts.n));
  for (int i = 0; i < opts.n; ++i) {
    SampleEntry& e = manifest.samples[std::size_t(i)];
    e.id = std::uint64_t(i);
    // Redraw on synthesis infeasibility so every manifest row renders.
    int tries = 0;
    for (;;) {
      NormalizedTheta theta;
      theta.includes_pitch = true;
      theta.values.resize(5);
      for (int j = 0; j < 5; ++j) theta.values[j] = rng.uniform(-1.0, 1.0);
      try {
        const ShapeParams shape = denormalize(theta);
        shape_to_pde(shape);  // feasibility check
        e.theta = theta;
        e.shape = shape;
        break;
      } catch (const std::exception&) {
        ++manifest.redraws;
        if (++tries > opts.max_redraws_per_sample) {
          throw std::runtime_error("generate_dataset: sample " + std::to_string(i) +
                                   " kept drawing infeasible parameters");
        }
      }
    }
    e.audio_path = "audio/" + sample_stem(e.id) + ".wav";
    e.feature_path = "features/" + sample_stem(e.id) + ".pnpf";
  }

  const std::vector<Split> splits = assign_splits(opts.n, rng);
  for (int i = 0; i < opts.n; ++i) {
    manifest.samples[std::size_t(i)].split = splits[std::size_t(i)];
  }

  SynthOptions synth;
  synth.sample_rate = opts.sample_rate;
  synth.mode_limit = opts.mode_limit;
  parallel_for(
      std::size_t(opts.n),
      [&](std::size_t i) {
        const SampleEntry& e = manifest.samples[i];
        const AudioBuffer audio = synthesize(e.theta, manifest.duration, synth);
        write_wav(audio, (dir / e.audio_path).string());
        const FeatureVector features = extractor.encoder_input(audio);
        write_feature_file(features, (dir / e.feature_path).string());
      },
      opts.workers);

  write_manifest(manifest, out_dir);
  return manifest;
}

void write_manifest(const DatasetManifest& manifest, const std::string& dir) {
  const fs::path base(dir);
  {
    std::ostringstream meta;
    meta << "n=" << manifest.n << "\n";
    meta << "seed=" << manifest.seed << "\n";
    meta << "pitch_mode=" << (manifest.pitch_known ? "known" : "unknown") << "\n";
    meta << "sample_rate=" << num17(manifest.sample_rate) << "\n";
    meta << "duration=" << num17(manifest.duration) << "\n";
    meta << "mode_limit=" << manifest.mode_limit << "\n";
    meta << "feature_map_id=" << manifest.feature_map_id << "\n";
    meta << "redraws=" << manifest.redraws << "\n";
    std::ofstream f(base / "dataset.meta", std::ios::binary);
    if (!f) throw std::runtime_error("write_manifest: cannot open dataset.meta");
    f << meta.str();
  }
  std::ostringstream csv;
  csv << "id,split,audio,features";
  for (const auto& name : theta_names(true)) csv << ",theta_" << name;
  csv << ",omega1_hz,tau1_s,p,D,alpha\n";
  for (const SampleEntry& e : manifest.samples) {
    csv << e.id << "," << split_name(e.split) << "," << e.audio_path << ","
        << e.feature_path;
    for (int j = 0; j < 5; ++j) csv << "," << num17(e.theta.values[j]);
    csv << "," << num17(e.shape.omega1_hz) << "," << num17(e.shape.tau1_s) << ","
        << num17(e.shape.p) << "," << num17(e.shape.dispersion) << ","
        << num17(e.shape.alpha) << "\n";
  }
  std::ofstream f(base / "manifest.csv", std::ios::binary);
  if (!f) throw std::runtime_error("write_manifest: cannot open manifest.csv");
  f << csv.str();
}

DatasetManifest load_manifest(const std::string& dir) {
  const fs::path base(dir);
  DatasetManifest manifest;
  {
    std::ifstream f(base / "dataset.meta");
    if (!f) {
      throw std::runtime_error("load_manifest: missing " +
                               (base / "dataset.meta").string());
    }
    std::string line;
    while (std::getline(f, line)) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      const std::string key = line.substr(0, eq);
      const std::string value = line.substr(eq + 1);
      if (key == "n") manifest.n = std::stoi(value);
      else if (key == "seed") manifest.seed = std::stoull(value);
      else if (key == "pitch_mode") manifest.pitch_known = value == "known";
      else if (key == "sample_rate") manifest.sample_rate = std::stod(value);
      else if (key == "duration") manifest.duration = std::stod(value);
      else if (key == "mode_limit") manifest.mode_limit = std::stoi(value);
      else if (key == "feature_map_id") manifest.feature_map_id = value;
      else if (key == "redraws") manifest.redraws = std::stoi(value);
    }
  }
  std::ifstream f(base / "manifest.csv");
  if (!f) {
    throw std::runtime_error("load_manifest: missing " + (base / "manifest.csv").string());
  }
  std::string line;
  if (!std::getline(f, line)) throw std::runtime_error("load_manifest: empty manifest");
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != 14) {
      throw std::runtime_error("load_manifest: expected 14 columns, got " +
                               std::to_string(fields.size()));
    }
    SampleEntry e;
    e.id = std::stoull(fields[0]);
    e.split = split_from_name(fields[1]);
    e.audio_path = fields[2];
    e.feature_path = fields[3];
    e.theta.includes_pitch = true;
    e.theta.values.resize(5);
    for (int j = 0; j < 5; ++j) e.theta.values[j] = std::stod(fields[std::size_t(4 + j)]);
    e.shape.omega1_hz = std::stod(fields[9]);
    e.shape.tau1_s = std::stod(fields[10]);
    e.shape.p = std::stod(fields[11]);
    e.shape.dispersion = std::stod(fields[12]);
    e.shape.alpha = std::stod(fields[13]);
    manifest.samples.push_back(std::move(e));
  }
  if (int(manifest.samples.size()) != manifest.n) {
    throw std::runtime_error("load_manifest: row count disagrees with dataset.meta");
  }
  return manifest;
}

FeatureFn make_phi_g(const DatasetManifest& manifest,
                     const FeatureExtractor& extractor) {
  SynthOptions synth;
  synth.sample_rate = manifest.sample_rate;
  synth.mode_limit = manifest.mode_limit;
  const double duration = manifest.duration;
  return [&extractor, synth, duration](const NormalizedTheta& theta) {
    return extractor.jtfs_log(synthesize(theta, duration, synth)).values.eval();
  };
}

MetricJobReport compute_metric_cache(const DatasetManifest& manifest,
                                     const FeatureExtractor& extractor, double fd_step,
                                     const std::vector<Split>& splits,
                                     const std::string& cache_path,
                                     const std::string& eigs_csv_path,
                                     unsigned workers) {
  std::vector<std::size_t> wanted;
  for (std::size_t i = 0; i < manifest.samples.size(); ++i) {
    for (const Split s : splits) {
      if (manifest.samples[i].split == s) {
        wanted.push_back(i);
        break;
      }
    }
  }
  std::sort(wanted.begin(), wanted.end(), [&](std::size_t a, std::size_t b) {
    return manifest.samples[a].id < manifest.samples[b].id;
  });

  const FeatureFn phi_g = make_phi_g(manifest, extractor);
  std::vector<MetricRecord> records(wanted.size());
  std::vector<std::string> errors(wanted.size());
  parallel_for(
      wanted.size(),
      [&](std::size_t k) {
        const SampleEntry& e = manifest.samples[wanted[k]];
        try {
          const NormalizedTheta theta = manifest.target_theta(e);
          JacobianMatrix jac =
              jacobian_fd(theta, phi_g, fd_step, extractor.jtfs_id());
          records[k] = make_metric_record(e.id, jac);
        } catch (const std::exception& ex) {
          errors[k] = ex.what();
        }
      },
      workers);

  MetricJobReport report;
  std::vector<MetricRecord> ok;
  ok.reserve(records.size());
  for (std::size_t k = 0; k < records.size(); ++k) {
    if (errors[k].empty()) {
      ok.push_back(std::move(records[k]));
      ++report.n_ok;
    } else {
      report.failures.emplace_back(manifest.samples[wanted[k]].id, errors[k]);
    }
  }
  cache_write(ok, cache_path);
  if (!eigs_csv_path.empty()) write_eigenvalue_csv(ok, eigs_csv_path);
  return report;
}

TrainingSet load_training_set(const DatasetManifest& manifest, const std::string& dir) {
  const fs::path base(dir);
  TrainingSet set;
  const int j_dim = manifest.target_dim();
  set.targets.resize(j_dim, Eigen::Index(manifest.samples.size()));
  set.sample_ids.resize(manifest.samples.size());
  for (std::size_t i = 0; i < manifest.samples.size(); ++i) {
    const SampleEntry& e = manifest.samples[i];
    const FeatureVector features = read_feature_file((base / e.feature_path).string());
    if (features.feature_map_id != manifest.feature_map_id) {
      throw std::runtime_error("load_training_set: feature map mismatch for sample " +
                               std::to_string(e.id));
    }
    if (set.inputs.size() == 0) {
      set.inputs.resize(features.values.size(), Eigen::Index(manifest.samples.size()));
    }
    set.inputs.col(Eigen::Index(i)) = features.values;
    set.targets.col(Eigen::Index(i)) = manifest.target_theta(e).values;
    set.sample_ids[i] = e.id;
    if (e.split == Split::kTrain) set.train_idx.push_back(int(i));
    if (e.split == Split::kVal) set.val_idx.push_back(int(i));
  }
  return set;
}

}  // namespace pnp
