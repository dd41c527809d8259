#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "brainseg/pipeline.hpp"

namespace fs = std::filesystem;

int main(int argc, char** argv) {
  CLI::App app{"Brain tissue segmentation with an ensemble of dilated residual U-Nets"};
  app.require_subcommand(1);

  std::string config;
  std::string out;
  std::uint64_t seed = 0;

  int n = 7;
  auto* phantom = app.add_subcommand("phantom", "write a synthetic multi-modal cohort");
  phantom->add_option("-n,--subjects", n, "number of subjects")->capture_default_str();
  phantom->add_option("--out", out, "output directory")->required();
  phantom->add_option("--seed", seed, "cohort seed")->capture_default_str();
  brainseg::PhantomConfig pcfg;
  std::vector<int> shape;
  phantom->add_option("--shape", shape, "volume size X Y Z")->expected(3);
  phantom->add_option("--noise", pcfg.noise_sigma, "Gaussian noise sigma")->capture_default_str();
  phantom->add_option("--infarcts", pcfg.infarct_blobs, "infarction blobs per subject")->capture_default_str();

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config, "pipeline config (JSON)")->required();
    sub->add_option("--seed", seed, "override train.seed");
    sub->add_option("--out", out, "override output_dir");
  };
  auto* train = app.add_subcommand("train", "train the configured ensemble(s)");
  add_common(train);
  auto* loso = app.add_subcommand("loso", "leave-one-subject-out evaluation");
  add_common(loso);

  std::string subject, weights;
  bool probs = false;
  auto* predict = app.add_subcommand("predict", "segment one subject directory");
  predict->add_option("--config", config, "pipeline config (JSON)")->required();
  predict->add_option("--subject", subject, "subject directory")->required();
  predict->add_option("--weights", weights, "weights directory (default <output_dir>/weights)");
  predict->add_option("--out", out, "output label volume path");
  predict->add_flag("--probabilities", probs, "also write per-class probability maps");

  std::string pred_path, ref_path;
  auto* evaluate = app.add_subcommand("evaluate", "compare a prediction with a reference");
  evaluate->add_option("prediction", pred_path, "predicted label volume")->required();
  evaluate->add_option("reference", ref_path, "reference label volume")->required();
  evaluate->add_option("--out", out, "directory for metrics.csv and metrics.json");

  std::string metrics;
  auto* report = app.add_subcommand("report", "rebuild LOSO tables from metrics.json");
  report->add_option("metrics", metrics, "metrics.json from loso or evaluate")->required();
  report->add_option("--out", out, "output directory (default: next to the input)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : brainseg::exit_code::kUsage;
  }

  auto seed_opt = [&](CLI::App* sub) {
    return sub->count("--seed") ? std::optional<std::uint64_t>(seed) : std::nullopt;
  };
  auto out_opt = [&] { return out.empty() ? std::nullopt : std::optional<fs::path>(out); };

  if (*phantom) {
    if (!shape.empty()) pcfg.shape = {shape[0], shape[1], shape[2]};
    return brainseg::cmd_phantom(n, out, seed, pcfg, std::cout, std::cerr);
  }
  if (*train) return brainseg::cmd_train(config, seed_opt(train), out_opt(), std::cout, std::cerr);
  if (*loso) return brainseg::cmd_loso(config, seed_opt(loso), out_opt(), std::cout, std::cerr);
  if (*predict) return brainseg::cmd_predict(config, subject, weights, out, probs, std::cout, std::cerr);
  if (*evaluate) return brainseg::cmd_evaluate(pred_path, ref_path, out, std::cout, std::cerr);
  if (*report) return brainseg::cmd_report(metrics, out, std::cout, std::cerr);
  return brainseg::exit_code::kUsage;
}
