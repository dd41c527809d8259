#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "brainseg/inference.hpp"
#include "brainseg/metrics.hpp"
#include "brainseg/phantom.hpp"
#include "brainseg/preprocess.hpp"
#include "brainseg/training.hpp"

namespace brainseg {

/// Process exit codes used by every subcommand.
namespace exit_code {
inline constexpr int kOk = 0;
inline constexpr int kUsage = 2;
inline constexpr int kData = 3;
inline constexpr int kNumeric = 4;
}  // namespace exit_code

enum class ClassWeighting { None, InverseFrequency, Explicit };

/// Everything a run needs, loaded from one JSON file. Relative paths are
/// resolved against the directory holding the config file.
struct PipelineConfig {
  std::filesystem::path data_dir;
  std::filesystem::path output_dir;
  std::vector<Modality> modality_order = {Modality::FLAIR, Modality::T1, Modality::IR};
  /// in_channels is derived from the modality list of each stage.
  DRUNetConfig network;
  TrainConfig train;
  ClassWeighting weighting = ClassWeighting::None;
  bool augment = true;
  AugmentationConfig augmentation;
  int ensemble_size = 5;
  int submission = 1;
  std::vector<Modality> coarse_modalities = {Modality::FLAIR, Modality::T1};
  std::vector<Modality> csf_modalities = {Modality::T1, Modality::IR};
  double csf_threshold = 0.5;
  FusionPolicy fusion = FusionPolicy::default_policy();

  void validate() const;
};

PipelineConfig load_pipeline_config(const std::filesystem::path& path);
PipelineConfig parse_pipeline_config(const std::string& json_text, const std::filesystem::path& base_dir);

struct TrainedModels {
  Ensemble primary;  ///< submission 1 ensemble, or the coarse ensemble of submission 2
  Ensemble csf;      ///< submission 2 only
  std::vector<std::vector<LossRecord>> primary_history;
  std::vector<std::vector<LossRecord>> csf_history;
};

/// Normalizes each scan and folds codes 9-10 into background.
std::vector<Subject> prepare_subjects(const std::vector<Subject>& subjects);

/// Trains the configured submission's ensembles on prepared subjects.
TrainedModels train_pipeline(const PipelineConfig& cfg, const std::vector<Subject>& prepared, std::ostream& log);

/// Segments one prepared (normalized) scan with the configured submission.
LabelVolume predict_pipeline(const PipelineConfig& cfg, const TrainedModels& models, const MultiModalScan& scan);

void save_models(const PipelineConfig& cfg, const TrainedModels& models, const std::filesystem::path& dir);
TrainedModels load_models(const PipelineConfig& cfg, const std::filesystem::path& dir);

struct LosoOutcome {
  std::vector<LosoSplit> splits;
  std::vector<std::pair<std::string, MetricReport>> reports;  ///< one per held-out subject
  std::vector<LabelVolume> predictions;
};

/// Leave-one-subject-out over `subjects` (raw, unnormalized), writing the
/// tables below `out_dir`.
LosoOutcome run_loso(const PipelineConfig& cfg, const std::vector<Subject>& subjects,
                     const std::filesystem::path& out_dir, std::ostream& log);

/// Metrics x subjects table: header "Metrics,<subject>...", rows Dice, H95, VS
/// holding each subject's class-averaged values.
void write_subject_table(const std::vector<std::pair<std::string, MetricReport>>& reports,
                         const std::filesystem::path& path);
/// Metrics x classes table: header "Metrics,GM,...,BrainStem,Averaged".
/// Each cell is the mean over subjects whose reference contains the class.
void write_class_table(const std::vector<std::pair<std::string, MetricReport>>& reports,
                       const std::filesystem::path& path);
/// Five-number summaries per (class, metric) across subjects.
void write_boxplot_table(const std::vector<std::pair<std::string, MetricReport>>& reports,
                         const std::filesystem::path& path);

/// Reads the JSON produced by write_report_json.
std::vector<std::pair<std::string, MetricReport>> read_report_json(const std::filesystem::path& path);

// Subcommands. Each returns an exit code and reports errors on `err`.
int cmd_phantom(int n, const std::filesystem::path& out_dir, std::uint64_t seed, const PhantomConfig& base,
                std::ostream& out, std::ostream& err);
int cmd_train(const std::filesystem::path& config, std::optional<std::uint64_t> seed,
              std::optional<std::filesystem::path> out, std::ostream& log, std::ostream& err);
int cmd_predict(const std::filesystem::path& config, const std::filesystem::path& subject_dir,
                const std::filesystem::path& weights_dir, const std::filesystem::path& out_path, bool write_probabilities,
                std::ostream& log, std::ostream& err);
int cmd_evaluate(const std::filesystem::path& prediction, const std::filesystem::path& reference,
                 const std::filesystem::path& out_dir, std::ostream& out, std::ostream& err);
int cmd_loso(const std::filesystem::path& config, std::optional<std::uint64_t> seed,
             std::optional<std::filesystem::path> out, std::ostream& log, std::ostream& err);
int cmd_report(const std::filesystem::path& metrics_json, const std::filesystem::path& out_dir, std::ostream& out,
               std::ostream& err);

}  // namespace brainseg
