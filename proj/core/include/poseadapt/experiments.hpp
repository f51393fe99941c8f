#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "poseadapt/apanet.hpp"
#include "poseadapt/config.hpp"
#include "poseadapt/scene_synth.hpp"

namespace poseadapt {

// One adaptation problem: source scene(s) with full labels, a target
// scene with a nu-fraction of labeled train poses, and the regression
// frame (absolute or anchor-relative).
struct AdaptationTask {
  std::string name;
  std::vector<SceneDataset> sources;
  SceneDataset target;
  double nu = 0.05;
  PoseTargetMode mode = PoseTargetMode::relative;
  std::uint64_t seed = 0;
};

struct SamplePrediction {
  Pose predicted;
  Pose truth;
};

struct RunReport {
  std::string task;
  std::string method;
  double nu = 0.0;
  std::uint64_t seed = 0;
  ErrorPair target_errors;
  std::optional<ErrorPair> source_errors;  // joint model reports both sides
  std::vector<SamplePrediction> target_predictions;
  std::vector<SamplePrediction> source_predictions;
  TrainCurves curves;
  double wall_clock_sec = 0.0;
  std::map<std::string, std::string> config_snapshot;
};

std::map<std::string, std::string> to_key_values(const TrainConfig& cfg);

// Trains the method's configuration on the task and reports target-test
// medians (plus source-test medians for the joint model):
//   no_adaptation: alpha = 0, nu = 0      joint: alpha = 0, nu = 1
//   ss:            alpha = 0, nu = task nu (must be in (0, 1))
//   apanet:        alpha from config      apanets: apanet + self-supervision
RunReport run_method(const AdaptationTask& task, Method method, const TrainConfig& base);

struct RunOutcome {
  RunReport report;
  ApanetModel model;
};
RunOutcome run_method_with_model(const AdaptationTask& task, Method method, const TrainConfig& base);

// A (method, nu, seed) cell for sweep-style execution.
struct RunCell {
  const AdaptationTask* task = nullptr;
  Method method = Method::ss;
  double nu = 0.0;
  std::uint64_t seed = 0;
};

// Executes cells (in parallel when jobs > 1, each cell single-threaded)
// and returns reports in cell order regardless of completion order.
std::vector<RunReport> run_cells(const std::vector<RunCell>& cells, const TrainConfig& base, int jobs);

// One run per method in {ss, apanet, apanets} per nu value per seed.
std::vector<RunReport> nu_sweep(const AdaptationTask& task, const std::vector<double>& nu_values,
                                const std::vector<std::uint64_t>& seeds, const TrainConfig& base,
                                int jobs = 1);

struct ProbeResult {
  ErrorPair source_errors;  // joint model on the source test set(s)
  ErrorPair target_errors;  // joint model on the target test set
  ErrorPair reference_errors;  // single-scene supervised run on the first source
  bool adaptable = false;
  double threshold_scale = 2.0;
};

// Trains the ideal joint hypothesis on full labels of both sides and
// compares its per-side test errors against threshold_scale times the
// single-scene supervised reference. Low joint error on both sides means
// an efficient transfer is possible.
ProbeResult adaptability_probe(const AdaptationTask& task, const TrainConfig& base,
                               double threshold_scale = 2.0);

// Held-out scene-classification accuracy of a freshly trained
// discriminator-architecture probe on frozen encoder features.
double scene_invariance_probe(const ApanetModel& model, const AdaptationTask& task,
                              std::uint64_t seed, int epochs = 40, double lr = 1e-3);

// Fresh classifier on fixed features; returns held-out accuracy.
double train_feature_probe(const ad::Matrix& train_features, const std::vector<int>& train_labels,
                           const ad::Matrix& test_features, const std::vector<int>& test_labels,
                           std::uint64_t seed, int epochs = 40, double lr = 1e-3);

// Run archive: config.txt, report.jsonl, predictions/*.csv, medians.csv.
void emit_report(const std::vector<RunReport>& reports, const std::string& dir, const Config& config);
std::vector<RunReport> load_report_archive(const std::string& dir);
std::string medians_csv(const std::vector<RunReport>& reports);

// The seeded two-scene configuration shipped with the repo (also at
// configs/standard_task.cfg) and its tuned training settings.
Config standard_config();
AdaptationTask task_from_config(const Config& cfg);
TrainConfig train_config_from_config(const Config& cfg);

}  // namespace poseadapt
