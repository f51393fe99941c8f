#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "poseadapt/autodiff.hpp"
#include "poseadapt/pose_geometry.hpp"
#include "poseadapt/scene_synth.hpp"

namespace poseadapt {

enum class Method { no_adaptation, joint, ss, apanet, apanets };
enum class Optimization { alternating, grl };
// Regression target frame: absolute world pose, or pose relative to the
// nearest anchor image of the same scene.
enum class PoseTargetMode { absolute, relative };

const char* to_string(Method m);
Method method_from_string(const std::string& s);
const char* to_string(PoseTargetMode m);
PoseTargetMode pose_target_mode_from_string(const std::string& s);

struct TrainConfig {
  double lr = 1e-5;
  int batch_size = 16;
  double alpha = 1.0;
  double nu = 0.0;  // labeled fraction of the target train set
  int epochs = 200;
  std::uint64_t seed = 0;
  Method mode = Method::apanet;
  Optimization optimization = Optimization::alternating;
  double grl_lambda = 1.0;
  std::vector<int> encoder_hidden = {256, 128};
  bool rotation_class_head = false;
  double self_sup_prob = 0.5;  // per-sample chance of feeding the rotated view
  int anchor_stride = 10;      // every A-th train image becomes an anchor
  bool early_stop = false;     // plateau: window 10 epochs, rel improvement < 1e-4
  double s_t_init = 0.0;
  double s_q_init = -1.0;
};

// Fully connected layer y = x W + b.
struct LinearLayer {
  LinearLayer() = default;
  LinearLayer(const std::string& name, int in, int out, Rng& rng);
  ad::Var apply(ad::Tape& tape, ad::Var x, bool train) const;

  ad::Parameter W;
  ad::Parameter b;
};

// Encoder E, localizer, position/orientation regressors G_t / G_q, scene
// discriminator G_d and the trainable loss weights s_t, s_q.
//
//   f = E(x)            MLP, ReLU after each layer
//   loc = ReLU(FC_1024(f))
//   t_hat = FC_3(ReLU(FC_256(loc)))     q_hat = FC_4(ReLU(FC_256(loc)))
//   G_d: f -> 1024 -> 256 -> 64 -> 2, ReLU and dropout 0.5 between layers
class ApanetModel {
 public:
  ApanetModel(int input_dim, const TrainConfig& cfg);

  struct PoseForward {
    ad::Var features;
    ad::Var localized;
    ad::Var t_hat;  // [m x 3]
    ad::Var q_hat;  // [m x 4]
  };

  // train=true records parameter leaves (gradients flow); train=false
  // freezes parameters as constants.
  ad::Var encode(ad::Tape& tape, ad::Var images, bool train) const;
  ad::Var localize(ad::Tape& tape, ad::Var features, bool train) const;
  // (t_hat [m x 3], q_hat [m x 4]) from localizer features.
  std::pair<ad::Var, ad::Var> regress(ad::Tape& tape, ad::Var localized, bool train) const;
  PoseForward forward_pose(ad::Tape& tape, const ad::Matrix& images, bool train) const;
  // Scene logits [m x 2]. Dropout is active only when `dropout` is set
  // (training); mask values come from `rng`.
  ad::Var discriminate(ad::Tape& tape, ad::Var features, bool train_disc, bool dropout,
                       Rng& rng) const;
  // 4-way logits over the localizer features (APANetS auxiliary head).
  ad::Var classify_rotation(ad::Tape& tape, ad::Var localized, bool train) const;

  // Eval-mode prediction: p = [t_hat, normalize(q_hat)]; only E and the
  // pose regressor are involved. Throws "degenerate orientation
  // prediction" when the raw q_hat norm is below 1e-12.
  Pose predict(const std::vector<double>& image) const;

  // Eval-mode encoder features for a set of observations, one row each.
  ad::Matrix features(const std::vector<Observation>& observations) const;

  std::vector<ad::Parameter*> pose_params();  // E, localizer, heads, s_t, s_q
  std::vector<ad::Parameter*> disc_params();
  std::vector<ad::Parameter*> all_params();

  ad::Parameter& s_t() { return s_t_; }
  ad::Parameter& s_q() { return s_q_; }
  const ad::Parameter& s_t() const { return s_t_; }
  const ad::Parameter& s_q() const { return s_q_; }
  int input_dim() const { return input_dim_; }
  const TrainConfig& config() const { return config_; }

  // Training progress cursor; all RNG substreams are keyed by
  // (seed, step), so this is the complete generator state.
  std::int64_t step_counter = 0;

 private:
  friend void save_model(const ApanetModel& model, const std::string& path);
  friend ApanetModel load_model(const std::string& path);

  int input_dim_;
  TrainConfig config_;
  std::vector<LinearLayer> encoder_;
  LinearLayer localizer_;
  LinearLayer head_t_hidden_, head_t_out_;
  LinearLayer head_q_hidden_, head_q_out_;
  std::vector<LinearLayer> disc_;
  LinearLayer rotation_head_;
  ad::Parameter s_t_;
  ad::Parameter s_q_;
};

// Versioned checkpoint: magic APANET1, text manifest of shapes, then
// little-endian float64 parameter blocks.
void save_model(const ApanetModel& model, const std::string& path);
ApanetModel load_model(const std::string& path);

namespace losses {

// Eq.: ||t - t_hat||_1 e^{-s_t} + s_t + ||q - q_hat||_1 e^{-s_q} + s_q,
// averaged over the batch rows.
ad::Var pose_loss_batch(ad::Tape& tape, ad::Var t_hat, ad::Var q_hat, const ad::Matrix& t_gt,
                        const ad::Matrix& q_gt, ad::Var s_t, ad::Var s_q);

// Single-pose form; p_hat is a [1 x 7] tensor [t, q].
ad::Var pose_loss(ad::Tape& tape, ad::Var p_hat, const Pose& truth, ad::Var s_t, ad::Var s_q);

struct AdversarialEval {
  ad::Var ce_mean;        // mean scene-classification cross entropy
  double accuracy = 0.0;  // argmax accuracy on the combined batch
};

// Cross entropy of G_d on [source; target] features with scene labels
// d = 0 (source) and d = 1 (target). Minimized by the discriminator step;
// maximized through the encoder (negated, or routed through a gradient
// reversal layer in GRL mode).
AdversarialEval adversarial_loss(ad::Tape& tape, const ApanetModel& model, ad::Var f_source,
                                 ad::Var f_target, bool train_disc, bool dropout, Rng& rng);

}  // namespace losses

struct StepReport {
  double source_pose_loss = 0.0;
  double target_pose_loss = 0.0;
  double rotation_loss = 0.0;
  double adversarial_ce = 0.0;  // CE through the encoder path (0 when alpha = 0)
  double total_loss = 0.0;      // L_pose + alpha * adversarial CE
  std::optional<double> disc_loss;      // discriminator's own step CE
  std::optional<double> disc_accuracy;  // scene accuracy on the step batch
};

struct TrainCurves {
  std::vector<double> total_loss;        // per-epoch means
  std::vector<double> source_pose_loss;
  std::vector<double> target_pose_loss;
  std::vector<double> disc_loss;         // NaN for alpha = 0 runs
  std::vector<double> disc_accuracy;     // NaN for alpha = 0 runs
  int epochs_run = 0;
};

// Source scene(s), target scene, and the target frame for regression.
struct TrainingData {
  std::vector<const SceneDataset*> sources;
  const SceneDataset* target = nullptr;
  PoseTargetMode target_mode = PoseTargetMode::absolute;
};

// One adversarial adaptation run. Alternating mode takes two Adam steps
// per train step: G_d on its scene CE with E frozen, then E/G_p/s_t/s_q
// on L_pose - alpha * CE with G_d frozen. GRL mode takes a single step on
// L_pose + alpha * CE(G_d(grl(f))). alpha = 0 degrades to plain
// (semi-)supervised pose regression; the discriminator is left untouched.
class Trainer {
 public:
  Trainer(TrainingData data, const TrainConfig& cfg);

  StepReport train_step();
  // Phases exposed for inspection; train_step = disc_step + pose_step in
  // alternating mode.
  std::optional<StepReport> disc_step();
  StepReport pose_step();

  TrainCurves train();  // cfg.epochs epochs (optionally early-stopped)

  // Eq. 5 at the current parameters for an arbitrary alpha, using the
  // batches and dropout masks of step `step_index`. Evaluation only.
  double total_loss_at(double alpha, std::int64_t step_index);

  int steps_per_epoch() const { return steps_per_epoch_; }
  const std::vector<int>& labeled_target_indices() const { return labeled_target_; }
  ApanetModel& model() { return model_; }
  const ApanetModel& model() const { return model_; }

  // Test-set evaluation. In relative mode the predicted relative pose is
  // composed with the nearest anchor's ground-truth pose.
  std::vector<std::pair<Pose, Pose>> evaluate(const SceneDataset& scene,
                                              const std::vector<Observation>& observations) const;

 private:
  struct SampleRef {
    const Observation* obs = nullptr;
    int scene = 0;        // index into scenes_
    int anchor = -1;      // index into anchors_[scene]
    bool labeled = false;
  };

  struct Batch {
    ad::Matrix images;
    ad::Matrix t_gt;
    ad::Matrix q_gt;
    std::vector<int> rotation_class;
  };

  struct StepInputs {
    Batch source;
    Batch labeled_target;  // rows may be 0 when nu = 0
    ad::Matrix target_images;
  };

  void build_samples();
  int scene_index(const SceneDataset* ds) const;
  int nearest_anchor(int scene, const Eigen::Vector3d& position) const;
  void fill_pose_targets(const SampleRef& ref, int k_degrees, Batch& batch, int row) const;
  Batch assemble(const std::vector<const SampleRef*>& refs, bool augment, Rng& rot_rng) const;
  StepInputs make_step_inputs(std::int64_t step_index);
  ad::Var pose_objective(ad::Tape& tape, const StepInputs& in, ad::Var& f_source, StepReport& report);

  TrainingData data_;
  TrainConfig cfg_;
  std::vector<const SceneDataset*> scenes_;  // sources..., target last
  std::vector<std::vector<Pose>> anchors_;
  std::vector<std::vector<SampleRef>> source_samples_;  // per source scene
  std::vector<SampleRef> target_samples_;
  std::vector<int> labeled_target_;
  int steps_per_epoch_ = 0;
  ApanetModel model_;
  ad::Adam adam_pose_;
  ad::Adam adam_disc_;
};

}  // namespace poseadapt
