#include "brainseg/pipeline.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "brainseg/error.hpp"
#include "brainseg/nifti.hpp"
#include "json.hpp"

namespace brainseg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void check_keys(const json& obj, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw ConfigError("'" + where + "' must be an object");
  for (const auto& [key, _] : obj.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <typename T>
void read_opt(const json& obj, const char* key, T& dst, const std::string& where) {
  auto it = obj.find(key);
  if (it == obj.end()) return;
  try {
    dst = it->get<T>();
  } catch (const json::exception&) {
    throw ConfigError("'" + where + "." + key + "' has the wrong type");
  }
}

std::vector<Modality> read_modalities(const json& obj, const char* key, std::vector<Modality> fallback,
                                      const std::string& where) {
  std::vector<std::string> names;
  read_opt(obj, key, names, where);
  if (names.empty() && obj.find(key) == obj.end()) return fallback;
  try {
    return parse_modality_list(names);
  } catch (const Error& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

std::string join_ids(const std::vector<std::string>& ids) {
  std::string s;
  for (std::size_t i = 0; i < ids.size(); ++i) s += (i ? ";" : "") + ids[i];
  return s;
}

DRUNetConfig stage_config(const PipelineConfig& cfg, std::size_t channels, int classes) {
  DRUNetConfig n = cfg.network;
  n.in_channels = static_cast<int>(channels);
  n.num_classes = classes;
  return n;
}

std::vector<AugmentedPair> stage_dataset(const PipelineConfig& cfg, const std::vector<Subject>& subjects,
                                         const std::vector<Modality>& order) {
  return cfg.augment ? build_augmented_dataset(subjects, order, cfg.augmentation) : slice_dataset(subjects, order);
}

/// Labels become 1 for CSF and 0 elsewhere.
std::vector<Subject> csf_subjects(const std::vector<Subject>& subjects) {
  std::vector<Subject> out = subjects;
  for (auto& s : out) {
    if (!s.labels) continue;
    for (auto& v : s.labels->data()) v = v == label::kCsf ? 1 : 0;
  }
  return out;
}

Ensemble train_stage(const PipelineConfig& cfg, const std::vector<Subject>& subjects, const std::vector<Modality>& order,
                     int classes, std::uint64_t seed, bool explicit_weights_apply, const std::string& tag,
                     std::vector<std::vector<LossRecord>>& history, std::ostream& log) {
  const auto dataset = stage_dataset(cfg, subjects, order);
  TrainConfig tc = cfg.train;
  tc.seed = seed;
  if (cfg.weighting == ClassWeighting::InverseFrequency) {
    tc.class_weights = inverse_frequency_weights(dataset, classes);
  } else if (cfg.weighting != ClassWeighting::Explicit || !explicit_weights_apply) {
    tc.class_weights.clear();
  }
  log << tag << ": " << dataset.size() << " training slices, " << cfg.ensemble_size << " member(s)\n";
  auto results = train_ensemble(stage_config(cfg, order.size(), classes), dataset, tc, cfg.ensemble_size);
  Ensemble ens{{}, order};
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& h = results[i].history;
    if (!h.empty()) {
      log << "  member " << i << ": loss " << h.front().loss << " -> " << h.back().loss << " over " << h.size()
          << " steps\n";
    }
    history.push_back(h);
    ens.members.push_back(std::move(results[i].net));
  }
  return ens;
}

std::vector<Subject> read_cohort(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("data directory " + dir.string() + " does not exist");
  std::vector<Subject> subjects;
  for (const auto& d : list_subject_dirs(dir)) subjects.push_back(read_subject_dir(d));
  if (subjects.empty()) throw IoError("no subject directories below " + dir.string());
  return subjects;
}

std::string member_file(const std::string& prefix, std::size_t i, const char* ext) {
  return prefix + "member_" + std::to_string(i) + ext;
}

MetricValue mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::nullopt;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

const MetricValue& pick(const ClassMetrics& m, int metric) {
  return metric == 0 ? m.dice : (metric == 1 ? m.hd95 : m.vs);
}

const MetricValue& pick_mean(const MetricReport& r, int metric) {
  return metric == 0 ? r.mean_dice : (metric == 1 ? r.mean_hd95 : r.mean_vs);
}

constexpr const char* kMetricRows[] = {"Dice", "H95", "VS"};

/// Values of one (class, metric) over subjects whose reference holds the class.
std::vector<double> class_values(const std::vector<std::pair<std::string, MetricReport>>& reports, std::size_t cls,
                                 int metric) {
  std::vector<double> v;
  for (const auto& [_, r] : reports) {
    if (cls >= r.classes.size()) continue;
    const auto& m = r.classes[cls];
    if (m.in_reference && pick(m, metric)) v.push_back(*pick(m, metric));
  }
  return v;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

int report_error(const std::exception& e, std::ostream& err) {
  int code = exit_code::kData;
  if (dynamic_cast<const ConfigError*>(&e)) {
    code = exit_code::kUsage;
  } else if (dynamic_cast<const NumericError*>(&e)) {
    code = exit_code::kNumeric;
  } else if (dynamic_cast<const ShapeError*>(&e)) {
    code = exit_code::kData;
  } else if (dynamic_cast<const ArgumentError*>(&e)) {
    code = exit_code::kUsage;
  }
  err << "error: " << e.what() << '\n';
  return code;
}

template <typename F>
int guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const std::exception& e) {
    return report_error(e, err);
  }
}

}  // namespace

void PipelineConfig::validate() const {
  if (ensemble_size < 1) throw ConfigError("ensemble_size must be at least 1");
  if (submission != 1 && submission != 2) throw ConfigError("submission must be 1 or 2");
  if (modality_order.empty()) throw ConfigError("modality_order is empty");
  if (!(csf_threshold > 0.0 && csf_threshold < 1.0)) throw ConfigError("csf_threshold must lie in (0, 1)");
  if (coarse_modalities.empty() || csf_modalities.empty()) throw ConfigError("submission 2 modality lists are empty");
  if (weighting == ClassWeighting::Explicit &&
      train.class_weights.size() != static_cast<std::size_t>(network.num_classes)) {
    throw ConfigError("class_weights has " + std::to_string(train.class_weights.size()) + " entries, expected " +
                      std::to_string(network.num_classes));
  }
  if (fusion.rules.empty()) throw ConfigError("fusion policy has no rules");
  for (const auto& r : fusion.rules) {
    if (r.source != "csf" && r.source != "wmh") throw ConfigError("fusion rule names unknown source '" + r.source + "'");
    if (r.target < 0 || r.target > label::kMaxCode) throw ConfigError("fusion rule target outside 0..10");
  }
  try {
    network.validate();
    train.validate();
    augmentation.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
}

PipelineConfig parse_pipeline_config(const std::string& json_text, const fs::path& base_dir) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  check_keys(doc, "config",
             {"data_dir", "output_dir", "modality_order", "network", "train", "augmentation", "ensemble_size",
              "submission", "submission2"});
  PipelineConfig cfg;
  std::string data_dir, output_dir = "out";
  read_opt(doc, "data_dir", data_dir, "config");
  read_opt(doc, "output_dir", output_dir, "config");
  cfg.data_dir = data_dir.empty() ? fs::path() : resolve(base_dir, data_dir);
  cfg.output_dir = resolve(base_dir, output_dir);
  cfg.modality_order = read_modalities(doc, "modality_order", cfg.modality_order, "config");
  read_opt(doc, "ensemble_size", cfg.ensemble_size, "config");
  read_opt(doc, "submission", cfg.submission, "config");

  if (auto it = doc.find("network"); it != doc.end()) {
    const json& n = *it;
    check_keys(n, "network", {"base_filters", "num_classes", "down_dilations", "up_dilations", "upsample_kernel"});
    read_opt(n, "base_filters", cfg.network.base_filters, "network");
    read_opt(n, "num_classes", cfg.network.num_classes, "network");
    read_opt(n, "down_dilations", cfg.network.down_dilations, "network");
    read_opt(n, "up_dilations", cfg.network.up_dilations, "network");
    read_opt(n, "upsample_kernel", cfg.network.upsample_kernel, "network");
  }
  cfg.network.in_channels = static_cast<int>(cfg.modality_order.size());

  if (auto it = doc.find("train"); it != doc.end()) {
    const json& t = *it;
    check_keys(t, "train",
               {"learning_rate", "batch_size", "epochs", "seed", "optimizer", "beta1", "beta2", "epsilon",
                "class_weights"});
    read_opt(t, "learning_rate", cfg.train.learning_rate, "train");
    read_opt(t, "batch_size", cfg.train.batch_size, "train");
    read_opt(t, "epochs", cfg.train.epochs, "train");
    read_opt(t, "seed", cfg.train.seed, "train");
    read_opt(t, "beta1", cfg.train.beta1, "train");
    read_opt(t, "beta2", cfg.train.beta2, "train");
    read_opt(t, "epsilon", cfg.train.epsilon, "train");
    std::string opt = "adam";
    read_opt(t, "optimizer", opt, "train");
    if (opt == "adam") {
      cfg.train.optimizer = OptimizerKind::Adam;
    } else if (opt == "sgd") {
      cfg.train.optimizer = OptimizerKind::Sgd;
    } else {
      throw ConfigError("train.optimizer must be 'adam' or 'sgd', got '" + opt + "'");
    }
    if (auto w = t.find("class_weights"); w != t.end() && !w->is_null()) {
      if (w->is_string()) {
        if (w->get<std::string>() != "inverse_frequency") {
          throw ConfigError("train.class_weights must be null, \"inverse_frequency\" or a list");
        }
        cfg.weighting = ClassWeighting::InverseFrequency;
      } else {
        read_opt(t, "class_weights", cfg.train.class_weights, "train");
        cfg.weighting = ClassWeighting::Explicit;
      }
    }
  }

  if (auto it = doc.find("augmentation"); it != doc.end()) {
    const json& a = *it;
    check_keys(a, "augmentation",
               {"enabled", "rotation_range", "shear_range", "scale_min", "scale_max", "copies_per_slice", "seed"});
    read_opt(a, "enabled", cfg.augment, "augmentation");
    read_opt(a, "rotation_range", cfg.augmentation.rotation_range, "augmentation");
    read_opt(a, "shear_range", cfg.augmentation.shear_range, "augmentation");
    read_opt(a, "scale_min", cfg.augmentation.scale_min, "augmentation");
    read_opt(a, "scale_max", cfg.augmentation.scale_max, "augmentation");
    read_opt(a, "copies_per_slice", cfg.augmentation.copies_per_slice, "augmentation");
    read_opt(a, "seed", cfg.augmentation.seed, "augmentation");
  }

  if (auto it = doc.find("submission2"); it != doc.end()) {
    const json& s = *it;
    check_keys(s, "submission2", {"coarse_modalities", "csf_modalities", "csf_threshold", "fusion"});
    cfg.coarse_modalities = read_modalities(s, "coarse_modalities", cfg.coarse_modalities, "submission2");
    cfg.csf_modalities = read_modalities(s, "csf_modalities", cfg.csf_modalities, "submission2");
    read_opt(s, "csf_threshold", cfg.csf_threshold, "submission2");
    if (auto f = s.find("fusion"); f != s.end()) {
      if (!f->is_array()) throw ConfigError("submission2.fusion must be a list of rules");
      cfg.fusion.rules.clear();
      for (const auto& r : *f) {
        check_keys(r, "fusion rule", {"source", "target", "only_over"});
        FusionRule rule;
        read_opt(r, "source", rule.source, "fusion");
        read_opt(r, "target", rule.target, "fusion");
        read_opt(r, "only_over", rule.only_over, "fusion");
        cfg.fusion.rules.push_back(rule);
      }
    }
  }
  cfg.validate();
  return cfg;
}

PipelineConfig load_pipeline_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_pipeline_config(ss.str(), path.parent_path());
}

std::vector<Subject> prepare_subjects(const std::vector<Subject>& subjects) {
  std::vector<Subject> out;
  out.reserve(subjects.size());
  for (const auto& s : subjects) {
    Subject p{s.id, normalize_patient(s.scan).scan, std::nullopt};
    if (s.labels) p.labels = remap_pathology_to_background(*s.labels);
    out.push_back(std::move(p));
  }
  return out;
}

TrainedModels train_pipeline(const PipelineConfig& cfg, const std::vector<Subject>& prepared, std::ostream& log) {
  if (prepared.empty()) throw ArgumentError("no training subjects");
  for (const auto& s : prepared) {
    if (!s.labels) throw IoError("subject " + s.id + " has no reference labels");
  }
  TrainedModels m;
  if (cfg.submission == 1) {
    m.primary = train_stage(cfg, prepared, cfg.modality_order, cfg.network.num_classes, cfg.train.seed, true,
                            "ensemble", m.primary_history, log);
  } else {
    m.primary = train_stage(cfg, prepared, cfg.coarse_modalities, cfg.network.num_classes, cfg.train.seed, true,
                            "coarse ensemble", m.primary_history, log);
    m.csf = train_stage(cfg, csf_subjects(prepared), cfg.csf_modalities, 2,
                        cfg.train.seed + static_cast<std::uint64_t>(cfg.ensemble_size), false, "CSF ensemble",
                        m.csf_history, log);
  }
  return m;
}

LabelVolume predict_pipeline(const PipelineConfig& cfg, const TrainedModels& models, const MultiModalScan& scan) {
  if (cfg.submission == 1) return run_submission1(models.primary, scan);
  return run_submission2(models.primary, models.csf, coarse_wmh_segmenter(), scan, cfg.fusion, cfg.csf_threshold);
}

void save_models(const PipelineConfig& cfg, const TrainedModels& models, const fs::path& dir) {
  fs::create_directories(dir);
  auto save = [&](const Ensemble& e, const std::vector<std::vector<LossRecord>>& hist, const std::string& prefix) {
    for (std::size_t i = 0; i < e.members.size(); ++i) {
      save_weights(e.members[i], dir / member_file(prefix, i, ".drw"));
      if (i < hist.size()) write_loss_history_csv(hist[i], dir / ("loss_" + member_file(prefix, i, ".csv")));
    }
  };
  if (cfg.submission == 1) {
    save(models.primary, models.primary_history, "");
  } else {
    save(models.primary, models.primary_history, "coarse_");
    save(models.csf, models.csf_history, "csf_");
  }
}

TrainedModels load_models(const PipelineConfig& cfg, const fs::path& dir) {
  auto load = [&](const std::vector<Modality>& order, int classes, const std::string& prefix) {
    Ensemble e{{}, order};
    const DRUNetConfig nc = stage_config(cfg, order.size(), classes);
    for (int i = 0; i < cfg.ensemble_size; ++i) {
      e.members.push_back(load_weights(nc, dir / member_file(prefix, static_cast<std::size_t>(i), ".drw")));
    }
    return e;
  };
  TrainedModels m;
  if (cfg.submission == 1) {
    m.primary = load(cfg.modality_order, cfg.network.num_classes, "");
  } else {
    m.primary = load(cfg.coarse_modalities, cfg.network.num_classes, "coarse_");
    m.csf = load(cfg.csf_modalities, 2, "csf_");
  }
  return m;
}

void write_subject_table(const std::vector<std::pair<std::string, MetricReport>>& reports, const fs::path& path) {
  auto out = open_out(path);
  out << "Metrics";
  for (const auto& [id, _] : reports) out << ",Subject_" << id;
  out << '\n';
  for (int metric = 0; metric < 3; ++metric) {
    out << kMetricRows[metric];
    for (const auto& [_, r] : reports) out << ',' << format_metric(pick_mean(r, metric));
    out << '\n';
  }
  if (!out) throw IoError("short write to " + path.string());
}

void write_class_table(const std::vector<std::pair<std::string, MetricReport>>& reports, const fs::path& path) {
  auto out = open_out(path);
  out << "Metrics";
  for (int c = 1; c <= label::kNumStructures; ++c) out << ',' << label_name(c);
  out << ",Averaged\n";
  for (int metric = 0; metric < 3; ++metric) {
    out << kMetricRows[metric];
    std::vector<double> cell_means;
    for (std::size_t c = 0; c < static_cast<std::size_t>(label::kNumStructures); ++c) {
      const MetricValue m = mean_of(class_values(reports, c, metric));
      if (m) cell_means.push_back(*m);
      out << ',' << format_metric(m);
    }
    out << ',' << format_metric(mean_of(cell_means)) << '\n';
  }
  if (!out) throw IoError("short write to " + path.string());
}

void write_boxplot_table(const std::vector<std::pair<std::string, MetricReport>>& reports, const fs::path& path) {
  auto out = open_out(path);
  out << "class,metric,n,min,q1,median,q3,max\n";
  for (std::size_t c = 0; c < static_cast<std::size_t>(label::kNumStructures); ++c) {
    for (int metric = 0; metric < 3; ++metric) {
      const auto v = class_values(reports, c, metric);
      out << label_name(static_cast<int>(c) + 1) << ',' << kMetricRows[metric] << ',' << v.size();
      for (double q : {0.0, 25.0, 50.0, 75.0, 100.0}) {
        out << ',' << format_metric(v.empty() ? MetricValue{} : MetricValue{percentile(v, q)});
      }
      out << '\n';
    }
  }
  if (!out) throw IoError("short write to " + path.string());
}

std::vector<std::pair<std::string, MetricReport>> read_report_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::vector<std::pair<std::string, MetricReport>> reports;
  auto value = [](const json& j) { return j.is_null() ? MetricValue{} : MetricValue{j.get<double>()}; };
  try {
    const json doc = json::parse(in);
    for (const auto& s : doc) {
      MetricReport r;
      for (const auto& c : s.at("classes")) {
        r.classes.push_back({c.at("code").get<int>(), c.at("in_reference").get<bool>(), value(c.at("dice")),
                             value(c.at("hd95")), value(c.at("vs"))});
      }
      const json& a = s.at("averaged");
      r.mean_dice = value(a.at("dice"));
      r.mean_hd95 = value(a.at("hd95"));
      r.mean_vs = value(a.at("vs"));
      reports.emplace_back(s.at("subject").get<std::string>(), std::move(r));
    }
  } catch (const json::exception& e) {
    throw FormatError("malformed metrics file " + path.string() + ": " + e.what());
  }
  return reports;
}

LosoOutcome run_loso(const PipelineConfig& cfg, const std::vector<Subject>& subjects, const fs::path& out_dir,
                     std::ostream& log) {
  std::vector<std::string> ids;
  for (const auto& s : subjects) {
    if (!s.labels) throw IoError("subject " + s.id + " has no reference labels");
    ids.push_back(s.id);
  }
  LosoOutcome outcome;
  outcome.splits = loso_splits(ids);
  const auto prepared = prepare_subjects(subjects);
  fs::create_directories(out_dir / "predictions");

  for (std::size_t i = 0; i < outcome.splits.size(); ++i) {
    const auto& split = outcome.splits[i];
    log << "split " << i + 1 << "/" << outcome.splits.size() << ": test subject " << split.test_id << '\n';
    std::vector<Subject> train;
    for (std::size_t j = 0; j < prepared.size(); ++j) {
      if (j != i) train.push_back(prepared[j]);
    }
    const TrainedModels models = train_pipeline(cfg, train, log);
    LabelVolume pred = predict_pipeline(cfg, models, prepared[i].scan);
    save_nifti(pred, out_dir / "predictions" / (split.test_id + "_segm.nii.gz"));
    outcome.reports.emplace_back(split.test_id, evaluate_all(*subjects[i].labels, pred, subjects[i].scan.spacing()));
    const auto& r = outcome.reports.back().second;
    log << "  dice " << format_metric(r.mean_dice) << "  hd95 " << format_metric(r.mean_hd95) << "  vs "
        << format_metric(r.mean_vs) << '\n';
    outcome.predictions.push_back(std::move(pred));
  }

  {
    auto out = open_out(out_dir / "splits.csv");
    out << "split,test_id,train_ids\n";
    for (std::size_t i = 0; i < outcome.splits.size(); ++i) {
      out << i + 1 << ',' << outcome.splits[i].test_id << ',' << join_ids(outcome.splits[i].train_ids) << '\n';
    }
  }
  write_subject_table(outcome.reports, out_dir / "table1.csv");
  write_class_table(outcome.reports, out_dir / "table2.csv");
  write_boxplot_table(outcome.reports, out_dir / "boxplot.csv");
  write_report_csv(outcome.reports, out_dir / "per_class_metrics.csv");
  write_report_json(outcome.reports, out_dir / "metrics.json");
  return outcome;
}

int cmd_phantom(int n, const fs::path& out_dir, std::uint64_t seed, const PhantomConfig& base, std::ostream& out,
                std::ostream& err) {
  if (n < 1) {
    err << "error: phantom needs at least one subject (got " << n << ")\n";
    return exit_code::kUsage;
  }
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  const fs::path probe = out_dir / ".write_probe";
  if (ec || !std::ofstream(probe)) {
    err << "error: output directory " << out_dir.string() << " is not writable\n";
    return exit_code::kUsage;
  }
  fs::remove(probe, ec);
  return guarded(err, [&] {
    PhantomConfig cfg = base;
    cfg.seed = seed;
    cfg.validate();
    for (int i = 0; i < n; ++i) {
      const Subject s = generate_subject(cfg, i);
      write_subject_dir(s, out_dir / s.id);
      out << "wrote subject " << s.id << '\n';
    }
    return exit_code::kOk;
  });
}

int cmd_train(const fs::path& config, std::optional<std::uint64_t> seed, std::optional<fs::path> out,
              std::ostream& log, std::ostream& err) {
  return guarded(err, [&] {
    PipelineConfig cfg = load_pipeline_config(config);
    if (seed) cfg.train.seed = *seed;
    if (out) cfg.output_dir = *out;
    const auto subjects = prepare_subjects(read_cohort(cfg.data_dir));
    const TrainedModels models = train_pipeline(cfg, subjects, log);
    save_models(cfg, models, cfg.output_dir / "weights");
    log << "weights written to " << (cfg.output_dir / "weights").string() << '\n';
    return exit_code::kOk;
  });
}

int cmd_predict(const fs::path& config, const fs::path& subject_dir, const fs::path& weights_dir,
                const fs::path& out_path, bool write_probabilities, std::ostream& log, std::ostream& err) {
  return guarded(err, [&] {
    const PipelineConfig cfg = load_pipeline_config(config);
    const fs::path wdir = weights_dir.empty() ? cfg.output_dir / "weights" : weights_dir;
    const TrainedModels models = load_models(cfg, wdir);
    const Subject subject = read_subject_dir(subject_dir);
    const MultiModalScan scan = normalize_patient(subject.scan).scan;
    const fs::path target =
        out_path.empty() ? cfg.output_dir / "predictions" / (subject.id + "_segm.nii.gz") : out_path;
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    save_nifti(predict_pipeline(cfg, models, scan), target);
    log << "wrote " << target.string() << '\n';
    if (write_probabilities) {
      const ProbabilityVolume probs = ensemble_probabilities(models.primary, scan);
      for (int k = 0; k < probs.classes(); ++k) {
        const fs::path p = target.parent_path() / (subject.id + "_prob_" + std::to_string(k) + ".nii.gz");
        save_nifti(probs.channel(k), p);
      }
    }
    return exit_code::kOk;
  });
}

int cmd_evaluate(const fs::path& prediction, const fs::path& reference, const fs::path& out_dir, std::ostream& out,
                 std::ostream& err) {
  return guarded(err, [&] {
    const LabelVolume pred = load_nifti_labels(prediction);
    const LabelVolume ref = load_nifti_labels(reference);
    std::string id = prediction.filename().string();
    for (const char* ext : {".nii.gz", ".nii"}) {
      const std::string e(ext);
      if (id.size() > e.size() && id.compare(id.size() - e.size(), e.size(), e) == 0) {
        id.resize(id.size() - e.size());
        break;
      }
    }
    const std::vector<std::pair<std::string, MetricReport>> reports = {
        {id, evaluate_all(ref, pred, ref.spacing())}};
    const auto& r = reports.front().second;
    out << "class,dice,hd95,vs\n";
    for (const auto& m : r.classes) {
      out << label_name(m.code) << ',' << format_metric(m.dice) << ',' << format_metric(m.hd95) << ','
          << format_metric(m.vs) << '\n';
    }
    out << "Averaged," << format_metric(r.mean_dice) << ',' << format_metric(r.mean_hd95) << ','
        << format_metric(r.mean_vs) << '\n';
    if (!out_dir.empty()) {
      fs::create_directories(out_dir);
      write_report_csv(reports, out_dir / "metrics.csv");
      write_report_json(reports, out_dir / "metrics.json");
    }
    return exit_code::kOk;
  });
}

int cmd_loso(const fs::path& config, std::optional<std::uint64_t> seed, std::optional<fs::path> out,
             std::ostream& log, std::ostream& err) {
  return guarded(err, [&] {
    PipelineConfig cfg = load_pipeline_config(config);
    if (seed) cfg.train.seed = *seed;
    if (out) cfg.output_dir = *out;
    const auto subjects = read_cohort(cfg.data_dir);
    const fs::path dir = cfg.output_dir / "loso";
    run_loso(cfg, subjects, dir, log);
    log << "LOSO tables written to " << dir.string() << '\n';
    return exit_code::kOk;
  });
}

int cmd_report(const fs::path& metrics_json, const fs::path& out_dir, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const auto reports = read_report_json(metrics_json);
    if (reports.empty()) throw FormatError(metrics_json.string() + " holds no subjects");
    const fs::path dir = out_dir.empty() ? metrics_json.parent_path() : out_dir;
    if (!dir.empty()) fs::create_directories(dir);
    write_subject_table(reports, dir / "table1.csv");
    write_class_table(reports, dir / "table2.csv");
    write_boxplot_table(reports, dir / "boxplot.csv");
    out << "wrote table1.csv, table2.csv and boxplot.csv to " << (dir.empty() ? fs::path(".") : dir).string() << '\n';
    return exit_code::kOk;
  });
}

}  // namespace brainseg
