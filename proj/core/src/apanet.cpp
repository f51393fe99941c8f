#include "poseadapt/apanet.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "poseadapt/textio.hpp"

namespace poseadapt {

namespace {

constexpr double kDropoutP = 0.5;
constexpr int kLocalizerWidth = 1024;
constexpr int kHeadWidth = 256;
constexpr int kDiscWidths[3] = {1024, 256, 64};

// Shuffle-stream roles beside per-source-scene indices.
constexpr std::uint64_t kAdvTargetRole = 1001;
constexpr std::uint64_t kLabeledTargetRole = 1002;

// Train mode records the parameter for gradient accumulation; eval mode
// freezes its current value.
ad::Var param_var(ad::Tape& tape, const ad::Parameter& p, bool train) {
  return train ? tape.leaf(const_cast<ad::Parameter&>(p)) : tape.constant(p.value);
}

ad::Matrix images_to_matrix(const std::vector<const Observation*>& obs, int dim) {
  ad::Matrix m(static_cast<Eigen::Index>(obs.size()), dim);
  for (std::size_t i = 0; i < obs.size(); ++i) {
    if (static_cast<int>(obs[i]->image.size()) != dim) {
      throw std::invalid_argument("observation raster size does not match model input");
    }
    for (int j = 0; j < dim; ++j) m(static_cast<Eigen::Index>(i), j) = obs[i]->image[j];
  }
  return m;
}

}  // namespace

const char* to_string(Method m) {
  switch (m) {
    case Method::no_adaptation: return "no_adaptation";
    case Method::joint: return "joint";
    case Method::ss: return "ss";
    case Method::apanet: return "apanet";
    case Method::apanets: return "apanets";
  }
  return "?";
}

Method method_from_string(const std::string& s) {
  for (Method m : {Method::no_adaptation, Method::joint, Method::ss, Method::apanet, Method::apanets}) {
    if (s == to_string(m)) return m;
  }
  throw std::invalid_argument("unknown method '" + s + "'");
}

const char* to_string(PoseTargetMode m) {
  return m == PoseTargetMode::absolute ? "ape" : "rpe";
}

PoseTargetMode pose_target_mode_from_string(const std::string& s) {
  if (s == "ape" || s == "absolute") return PoseTargetMode::absolute;
  if (s == "rpe" || s == "relative") return PoseTargetMode::relative;
  throw std::invalid_argument("unknown pose mode '" + s + "' (expected ape or rpe)");
}

LinearLayer::LinearLayer(const std::string& name, int in, int out, Rng& rng)
    : W(name + ".W", in, out), b(name + ".b", 1, out) {
  const double s = std::sqrt(6.0 / static_cast<double>(in + out));
  for (Eigen::Index i = 0; i < W.value.size(); ++i) {
    W.value.data()[i] = rng.uniform(-s, s);
  }
}

ad::Var LinearLayer::apply(ad::Tape& tape, ad::Var x, bool train) const {
  return tape.add_bias(tape.matmul(x, param_var(tape, W, train)), param_var(tape, b, train));
}

ApanetModel::ApanetModel(int input_dim, const TrainConfig& cfg) : input_dim_(input_dim), config_(cfg) {
  if (input_dim_ < 1) throw std::invalid_argument("model input dim must be >= 1");
  if (cfg.encoder_hidden.empty()) {
    throw std::invalid_argument("encoder needs at least one hidden layer");
  }

  // Layers draw their init values from one seeded stream in fixed order.
  Rng rng = Rng::stream(cfg.seed, {rng_tag::kParamInit});
  int in = input_dim_;
  for (std::size_t li = 0; li < cfg.encoder_hidden.size(); ++li) {
    const int out = cfg.encoder_hidden[li];
    if (out < 1) throw std::invalid_argument("encoder hidden sizes must be >= 1");
    encoder_.emplace_back("encoder." + std::to_string(li), in, out, rng);
    in = out;
  }
  const int feature_dim = in;
  localizer_ = LinearLayer("localizer", feature_dim, kLocalizerWidth, rng);
  head_t_hidden_ = LinearLayer("G_t.hidden", kLocalizerWidth, kHeadWidth, rng);
  head_t_out_ = LinearLayer("G_t.out", kHeadWidth, 3, rng);
  head_q_hidden_ = LinearLayer("G_q.hidden", kLocalizerWidth, kHeadWidth, rng);
  head_q_out_ = LinearLayer("G_q.out", kHeadWidth, 4, rng);
  int din = feature_dim;
  for (int li = 0; li < 3; ++li) {
    disc_.emplace_back("G_d." + std::to_string(li), din, kDiscWidths[li], rng);
    din = kDiscWidths[li];
  }
  disc_.emplace_back("G_d.out", din, 2, rng);
  rotation_head_ = LinearLayer("rotation_head", kLocalizerWidth, 4, rng);

  s_t_ = ad::Parameter("s_t", 1, 1);
  s_q_ = ad::Parameter("s_q", 1, 1);
  s_t_.value(0, 0) = cfg.s_t_init;
  s_q_.value(0, 0) = cfg.s_q_init;
}

ad::Var ApanetModel::encode(ad::Tape& tape, ad::Var images, bool train) const {
  ad::Var h = images;
  for (const LinearLayer& layer : encoder_) {
    h = tape.relu(layer.apply(tape, h, train));
  }
  return h;
}

ad::Var ApanetModel::localize(ad::Tape& tape, ad::Var features, bool train) const {
  return tape.relu(localizer_.apply(tape, features, train));
}

std::pair<ad::Var, ad::Var> ApanetModel::regress(ad::Tape& tape, ad::Var localized, bool train) const {
  ad::Var t_hat = head_t_out_.apply(tape, tape.relu(head_t_hidden_.apply(tape, localized, train)), train);
  ad::Var q_hat = head_q_out_.apply(tape, tape.relu(head_q_hidden_.apply(tape, localized, train)), train);
  return {t_hat, q_hat};
}

ApanetModel::PoseForward ApanetModel::forward_pose(ad::Tape& tape, const ad::Matrix& images,
                                                   bool train) const {
  PoseForward out;
  out.features = encode(tape, tape.constant(images), train);
  out.localized = localize(tape, out.features, train);
  std::tie(out.t_hat, out.q_hat) = regress(tape, out.localized, train);
  return out;
}

ad::Var ApanetModel::discriminate(ad::Tape& tape, ad::Var features, bool train_disc, bool dropout,
                                  Rng& rng) const {
  ad::Var h = features;
  for (std::size_t li = 0; li + 1 < disc_.size(); ++li) {
    h = tape.relu(disc_[li].apply(tape, h, train_disc));
    h = tape.dropout(h, kDropoutP, rng, dropout);
  }
  return disc_.back().apply(tape, h, train_disc);
}

ad::Var ApanetModel::classify_rotation(ad::Tape& tape, ad::Var localized, bool train) const {
  return rotation_head_.apply(tape, localized, train);
}

Pose ApanetModel::predict(const std::vector<double>& image) const {
  if (static_cast<int>(image.size()) != input_dim_) {
    throw std::invalid_argument("predict: raster size does not match model input");
  }
  ad::Tape tape;
  ad::Matrix x(1, input_dim_);
  for (int j = 0; j < input_dim_; ++j) x(0, j) = image[j];
  const PoseForward fwd = forward_pose(tape, x, /*train=*/false);
  const ad::Matrix& t = fwd.t_hat.value();
  const ad::Matrix& q = fwd.q_hat.value();
  const double qnorm =
      std::sqrt(q(0, 0) * q(0, 0) + q(0, 1) * q(0, 1) + q(0, 2) * q(0, 2) + q(0, 3) * q(0, 3));
  if (qnorm < 1e-12) {
    throw std::runtime_error("degenerate orientation prediction");
  }
  Pose p;
  p.t = Eigen::Vector3d(t(0, 0), t(0, 1), t(0, 2));
  p.q = quat_normalize(Quaternion{q(0, 0), q(0, 1), q(0, 2), q(0, 3)});
  return p;
}

ad::Matrix ApanetModel::features(const std::vector<Observation>& observations) const {
  std::vector<const Observation*> ptrs;
  ptrs.reserve(observations.size());
  for (const Observation& o : observations) ptrs.push_back(&o);
  ad::Tape tape;
  return encode(tape, tape.constant(images_to_matrix(ptrs, input_dim_)), /*train=*/false).value();
}

std::vector<ad::Parameter*> ApanetModel::pose_params() {
  std::vector<ad::Parameter*> out;
  for (LinearLayer& l : encoder_) {
    out.push_back(&l.W);
    out.push_back(&l.b);
  }
  for (LinearLayer* l : {&localizer_, &head_t_hidden_, &head_t_out_, &head_q_hidden_, &head_q_out_,
                         &rotation_head_}) {
    out.push_back(&l->W);
    out.push_back(&l->b);
  }
  out.push_back(&s_t_);
  out.push_back(&s_q_);
  return out;
}

std::vector<ad::Parameter*> ApanetModel::disc_params() {
  std::vector<ad::Parameter*> out;
  for (LinearLayer& l : disc_) {
    out.push_back(&l.W);
    out.push_back(&l.b);
  }
  return out;
}

std::vector<ad::Parameter*> ApanetModel::all_params() {
  auto out = pose_params();
  for (ad::Parameter* p : disc_params()) out.push_back(p);
  return out;
}

namespace losses {

ad::Var pose_loss_batch(ad::Tape& tape, ad::Var t_hat, ad::Var q_hat, const ad::Matrix& t_gt,
                        const ad::Matrix& q_gt, ad::Var s_t, ad::Var s_q) {
  ad::Var lt = tape.mean(tape.l1_distance(t_hat, tape.constant(t_gt)));
  ad::Var lq = tape.mean(tape.l1_distance(q_hat, tape.constant(q_gt)));
  ad::Var term_t = tape.add(tape.mul(lt, tape.exp(tape.negate(s_t))), s_t);
  ad::Var term_q = tape.add(tape.mul(lq, tape.exp(tape.negate(s_q))), s_q);
  return tape.add(term_t, term_q);
}

ad::Var pose_loss(ad::Tape& tape, ad::Var p_hat, const Pose& truth, ad::Var s_t, ad::Var s_q) {
  if (p_hat.rows() != 1 || p_hat.cols() != 7) {
    throw std::invalid_argument("pose_loss: prediction must be a [1 x 7] tensor");
  }
  ad::Matrix t_gt(1, 3);
  t_gt << truth.t.x(), truth.t.y(), truth.t.z();
  const Quaternion q = quat_normalize(truth.q);
  ad::Matrix q_gt(1, 4);
  q_gt << q.w, q.x, q.y, q.z;
  return pose_loss_batch(tape, tape.slice_cols(p_hat, 0, 3), tape.slice_cols(p_hat, 3, 4), t_gt,
                         q_gt, s_t, s_q);
}

AdversarialEval adversarial_loss(ad::Tape& tape, const ApanetModel& model, ad::Var f_source,
                                 ad::Var f_target, bool train_disc, bool dropout, Rng& rng) {
  const Eigen::Index ns = f_source.rows();
  const Eigen::Index nt = f_target.rows();
  ad::Var f = tape.concat_rows(f_source, f_target);
  ad::Var logits = model.discriminate(tape, f, train_disc, dropout, rng);
  std::vector<int> labels(static_cast<std::size_t>(ns + nt), 0);
  for (Eigen::Index i = ns; i < ns + nt; ++i) labels[static_cast<std::size_t>(i)] = 1;
  AdversarialEval out;
  out.ce_mean = tape.mean(tape.softmax_cross_entropy(logits, labels));
  const ad::Matrix& z = logits.value();
  int correct = 0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const int pred = z(i, 1) > z(i, 0) ? 1 : 0;
    if (pred == labels[static_cast<std::size_t>(i)]) ++correct;
  }
  out.accuracy = static_cast<double>(correct) / static_cast<double>(z.rows());
  return out;
}

}  // namespace losses

namespace {

ApanetModel build_model(const TrainingData& data, const TrainConfig& cfg) {
  if (data.sources.empty() || data.target == nullptr) {
    throw std::invalid_argument("training data needs at least one source and a target");
  }
  const int g = data.sources.front()->config.image_size;
  return ApanetModel(g * g, cfg);
}

}  // namespace

Trainer::Trainer(TrainingData data, const TrainConfig& cfg)
    : data_(std::move(data)),
      cfg_(cfg),
      model_(build_model(data_, cfg_)),
      adam_pose_(model_.pose_params(), cfg.lr),
      adam_disc_(model_.disc_params(), cfg.lr) {
  if (cfg_.nu < 0.0 || cfg_.nu > 1.0) throw std::invalid_argument("nu must be in [0, 1]");
  if (cfg_.alpha < 0.0) throw std::invalid_argument("alpha must be >= 0");
  if (cfg_.batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  if (cfg_.anchor_stride < 1) throw std::invalid_argument("anchor stride must be >= 1");

  switch (cfg_.mode) {
    case Method::no_adaptation:
      if (cfg_.nu != 0.0) throw std::invalid_argument("no_adaptation requires nu = 0");
      if (cfg_.alpha != 0.0) throw std::invalid_argument("no_adaptation requires alpha = 0");
      break;
    case Method::joint:
      if (cfg_.nu != 1.0) throw std::invalid_argument("joint requires nu = 1");
      if (cfg_.alpha != 0.0) throw std::invalid_argument("joint requires alpha = 0");
      break;
    case Method::ss:
      if (cfg_.nu <= 0.0 || cfg_.nu >= 1.0) {
        throw std::invalid_argument("ss requires 0 < nu < 1");
      }
      if (cfg_.alpha != 0.0) throw std::invalid_argument("ss requires alpha = 0");
      break;
    case Method::apanet:
    case Method::apanets:
      break;
  }

  scenes_ = data_.sources;
  scenes_.push_back(data_.target);
  const int g = scenes_.front()->config.image_size;
  for (const SceneDataset* s : scenes_) {
    if (s->train.empty() || s->config.image_size != g) {
      throw std::invalid_argument("scenes must be nonempty and share one image size");
    }
  }
  for (const SceneDataset* s : data_.sources) {
    if (s == data_.target) throw std::invalid_argument("target must not be among the sources");
  }
  build_samples();
}

void Trainer::build_samples() {
  anchors_.resize(scenes_.size());
  for (std::size_t si = 0; si < scenes_.size(); ++si) {
    const auto& train = scenes_[si]->train;
    for (std::size_t i = 0; i < train.size(); i += static_cast<std::size_t>(cfg_.anchor_stride)) {
      Pose a = train[i].pose;
      a.q = quat_normalize(a.q);
      anchors_[si].push_back(a);
    }
  }

  source_samples_.resize(data_.sources.size());
  int total_source = 0;
  for (std::size_t si = 0; si < data_.sources.size(); ++si) {
    for (const Observation& o : data_.sources[si]->train) {
      SampleRef ref;
      ref.obs = &o;
      ref.scene = static_cast<int>(si);
      ref.anchor = nearest_anchor(static_cast<int>(si), o.pose.t);
      ref.labeled = true;
      source_samples_[si].push_back(ref);
      ++total_source;
    }
  }
  steps_per_epoch_ = (total_source + cfg_.batch_size - 1) / cfg_.batch_size;

  const int target_scene = static_cast<int>(scenes_.size()) - 1;
  const auto& ttrain = data_.target->train;
  const int n_labeled = static_cast<int>(std::llround(cfg_.nu * static_cast<double>(ttrain.size())));
  std::vector<int> order(ttrain.size());
  std::iota(order.begin(), order.end(), 0);
  Rng subset_rng = Rng::stream(cfg_.seed, {rng_tag::kLabeledSubset});
  subset_rng.shuffle(order);
  std::vector<bool> labeled(ttrain.size(), false);
  for (int i = 0; i < n_labeled && i < static_cast<int>(order.size()); ++i) {
    labeled[static_cast<std::size_t>(order[i])] = true;
  }
  for (std::size_t i = 0; i < ttrain.size(); ++i) {
    SampleRef ref;
    ref.obs = &ttrain[i];
    ref.scene = target_scene;
    ref.anchor = nearest_anchor(target_scene, ttrain[i].pose.t);
    ref.labeled = labeled[i];
    target_samples_.push_back(ref);
    if (labeled[i]) labeled_target_.push_back(static_cast<int>(i));
  }
}

int Trainer::scene_index(const SceneDataset* ds) const {
  for (std::size_t i = 0; i < scenes_.size(); ++i) {
    if (scenes_[i] == ds) return static_cast<int>(i);
  }
  throw std::invalid_argument("scene is not part of this training run");
}

int Trainer::nearest_anchor(int scene, const Eigen::Vector3d& position) const {
  const auto& anchors = anchors_[static_cast<std::size_t>(scene)];
  int best = 0;
  double best_d = (anchors[0].t - position).squaredNorm();
  for (std::size_t i = 1; i < anchors.size(); ++i) {
    const double d = (anchors[i].t - position).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(i);
    }
  }
  return best;
}

void Trainer::fill_pose_targets(const SampleRef& ref, int k_degrees, Batch& batch, int row) const {
  const Pose abs_pose = apply_image_rotation_to_pose(ref.obs->pose, k_degrees);
  Pose target = abs_pose;
  if (data_.target_mode == PoseTargetMode::relative) {
    target = relative_pose(
        anchors_[static_cast<std::size_t>(ref.scene)][static_cast<std::size_t>(ref.anchor)], abs_pose);
  }
  batch.t_gt(row, 0) = target.t.x();
  batch.t_gt(row, 1) = target.t.y();
  batch.t_gt(row, 2) = target.t.z();
  const Quaternion q = quat_normalize(target.q);
  batch.q_gt(row, 0) = q.w;
  batch.q_gt(row, 1) = q.x;
  batch.q_gt(row, 2) = q.y;
  batch.q_gt(row, 3) = q.z;
}

Trainer::Batch Trainer::assemble(const std::vector<const SampleRef*>& refs, bool augment,
                                 Rng& rot_rng) const {
  const int g = scenes_.front()->config.image_size;
  const int dim = g * g;
  Batch batch;
  batch.images.resize(static_cast<Eigen::Index>(refs.size()), dim);
  batch.t_gt.resize(static_cast<Eigen::Index>(refs.size()), 3);
  batch.q_gt.resize(static_cast<Eigen::Index>(refs.size()), 4);
  batch.rotation_class.assign(refs.size(), 0);
  for (std::size_t i = 0; i < refs.size(); ++i) {
    int k_idx = 0;
    if (augment && rot_rng.uniform() < cfg_.self_sup_prob) {
      k_idx = static_cast<int>(rot_rng.uniform_int(4));
    }
    const int k = 90 * k_idx;
    batch.rotation_class[i] = k_idx;
    if (k == 0) {
      for (int j = 0; j < dim; ++j) {
        batch.images(static_cast<Eigen::Index>(i), j) = refs[i]->obs->image[j];
      }
    } else {
      const auto rotated = rotate_raster(refs[i]->obs->image, g, k);
      for (int j = 0; j < dim; ++j) batch.images(static_cast<Eigen::Index>(i), j) = rotated[j];
    }
    fill_pose_targets(*refs[i], k, batch, static_cast<int>(i));
  }
  return batch;
}

Trainer::StepInputs Trainer::make_step_inputs(std::int64_t step_index) {
  const std::int64_t epoch = step_index / steps_per_epoch_;
  const std::int64_t pos = step_index % steps_per_epoch_;
  const int batch = cfg_.batch_size;
  const int n_scenes = static_cast<int>(source_samples_.size());
  const bool augment = cfg_.mode == Method::apanets;
  Rng rot_rng = Rng::stream(cfg_.seed, {rng_tag::kRotationTask, static_cast<std::uint64_t>(step_index)});

  // Source slots round-robin over source scenes so every scene contributes
  // equally per batch; within a scene the epoch's shuffled order cycles.
  std::vector<std::vector<int>> scene_orders(source_samples_.size());
  for (std::size_t si = 0; si < source_samples_.size(); ++si) {
    scene_orders[si].resize(source_samples_[si].size());
    std::iota(scene_orders[si].begin(), scene_orders[si].end(), 0);
    Rng r = Rng::stream(cfg_.seed, {rng_tag::kShuffle, si, static_cast<std::uint64_t>(epoch)});
    r.shuffle(scene_orders[si]);
  }
  std::vector<int> slots_used(source_samples_.size(), 0);
  std::vector<const SampleRef*> src_refs;
  src_refs.reserve(static_cast<std::size_t>(batch));
  for (int i = 0; i < batch; ++i) {
    const int sc = i % n_scenes;
    const auto& order = scene_orders[static_cast<std::size_t>(sc)];
    const int slots_per_step = (batch + n_scenes - 1 - sc) / n_scenes;
    const std::int64_t cursor = pos * slots_per_step + slots_used[static_cast<std::size_t>(sc)]++;
    const int idx = order[static_cast<std::size_t>(cursor % static_cast<std::int64_t>(order.size()))];
    src_refs.push_back(&source_samples_[static_cast<std::size_t>(sc)][static_cast<std::size_t>(idx)]);
  }

  StepInputs in;
  in.source = assemble(src_refs, augment, rot_rng);

  if (!labeled_target_.empty()) {
    std::vector<int> order = labeled_target_;
    Rng r = Rng::stream(cfg_.seed, {rng_tag::kShuffle, kLabeledTargetRole, static_cast<std::uint64_t>(epoch)});
    r.shuffle(order);
    std::vector<const SampleRef*> refs;
    refs.reserve(static_cast<std::size_t>(batch));
    for (int i = 0; i < batch; ++i) {
      const std::int64_t cursor = (pos * batch + i) % static_cast<std::int64_t>(order.size());
      refs.push_back(&target_samples_[static_cast<std::size_t>(order[static_cast<std::size_t>(cursor)])]);
    }
    in.labeled_target = assemble(refs, augment, rot_rng);
  }

  {
    std::vector<int> order(target_samples_.size());
    std::iota(order.begin(), order.end(), 0);
    Rng r = Rng::stream(cfg_.seed, {rng_tag::kShuffle, kAdvTargetRole, static_cast<std::uint64_t>(epoch)});
    r.shuffle(order);
    std::vector<const SampleRef*> refs;
    refs.reserve(static_cast<std::size_t>(batch));
    for (int i = 0; i < batch; ++i) {
      const std::int64_t cursor = (pos * batch + i) % static_cast<std::int64_t>(order.size());
      refs.push_back(&target_samples_[static_cast<std::size_t>(order[static_cast<std::size_t>(cursor)])]);
    }
    Rng unused(0);
    in.target_images = assemble(refs, /*augment=*/false, unused).images;
  }
  return in;
}

std::optional<StepReport> Trainer::disc_step() {
  if (cfg_.alpha == 0.0 || cfg_.optimization == Optimization::grl) return std::nullopt;
  const std::int64_t step = model_.step_counter;
  StepInputs in = make_step_inputs(step);
  ad::Tape tape;
  // E frozen in phase 1: features enter as constants.
  ad::Var f_s = model_.encode(tape, tape.constant(in.source.images), /*train=*/false);
  ad::Var f_t = model_.encode(tape, tape.constant(in.target_images), /*train=*/false);
  Rng drop = Rng::stream(cfg_.seed, {rng_tag::kDropout, static_cast<std::uint64_t>(step), 1});
  const auto adv = losses::adversarial_loss(tape, model_, f_s, f_t, /*train_disc=*/true,
                                            /*dropout=*/true, drop);
  tape.backward(adv.ce_mean);
  adam_disc_.step();
  adam_disc_.zero_grad();
  StepReport report;
  report.disc_loss = adv.ce_mean.scalar();
  report.disc_accuracy = adv.accuracy;
  return report;
}

ad::Var Trainer::pose_objective(ad::Tape& tape, const StepInputs& in, ad::Var& f_source,
                                StepReport& report) {
  ad::Var s_t = tape.leaf(model_.s_t());
  ad::Var s_q = tape.leaf(model_.s_q());

  f_source = model_.encode(tape, tape.constant(in.source.images), /*train=*/true);
  ad::Var loc_s = model_.localize(tape, f_source, true);
  auto [t_hat, q_hat] = model_.regress(tape, loc_s, true);
  ad::Var loss = losses::pose_loss_batch(tape, t_hat, q_hat, in.source.t_gt, in.source.q_gt, s_t, s_q);
  report.source_pose_loss = loss.scalar();

  const bool rot_head = cfg_.rotation_class_head && cfg_.mode == Method::apanets;
  ad::Var rot_logits_s;
  if (rot_head) rot_logits_s = model_.classify_rotation(tape, loc_s, true);

  if (in.labeled_target.images.rows() > 0) {
    ad::Var f_l = model_.encode(tape, tape.constant(in.labeled_target.images), true);
    ad::Var loc_l = model_.localize(tape, f_l, true);
    auto [t_l, q_l] = model_.regress(tape, loc_l, true);
    ad::Var lt = losses::pose_loss_batch(tape, t_l, q_l, in.labeled_target.t_gt,
                                         in.labeled_target.q_gt, s_t, s_q);
    report.target_pose_loss = lt.scalar();
    loss = tape.add(loss, lt);
    if (rot_head) {
      ad::Var logits = tape.concat_rows(rot_logits_s, model_.classify_rotation(tape, loc_l, true));
      std::vector<int> labels = in.source.rotation_class;
      labels.insert(labels.end(), in.labeled_target.rotation_class.begin(),
                    in.labeled_target.rotation_class.end());
      ad::Var rot_ce = tape.mean(tape.softmax_cross_entropy(logits, labels));
      report.rotation_loss = rot_ce.scalar();
      loss = tape.add(loss, rot_ce);
    }
  } else {
    report.target_pose_loss = 0.0;  // nu = 0: the labeled-target sum is empty
    if (rot_head) {
      ad::Var rot_ce = tape.mean(tape.softmax_cross_entropy(rot_logits_s, in.source.rotation_class));
      report.rotation_loss = rot_ce.scalar();
      loss = tape.add(loss, rot_ce);
    }
  }
  return loss;
}

StepReport Trainer::pose_step() {
  const std::int64_t step = model_.step_counter;
  StepInputs in = make_step_inputs(step);
  StepReport report;
  ad::Tape tape;
  ad::Var f_source;
  ad::Var loss = pose_objective(tape, in, f_source, report);

  const bool grl_mode = cfg_.optimization == Optimization::grl;
  if (cfg_.alpha > 0.0) {
    ad::Var f_target = model_.encode(tape, tape.constant(in.target_images), true);
    Rng drop = Rng::stream(cfg_.seed, {rng_tag::kDropout, static_cast<std::uint64_t>(step), 2});
    if (grl_mode) {
      ad::Var f_all = tape.gradient_reversal(tape.concat_rows(f_source, f_target), cfg_.grl_lambda);
      ad::Var logits = model_.discriminate(tape, f_all, /*train_disc=*/true, /*dropout=*/true, drop);
      std::vector<int> labels(static_cast<std::size_t>(f_all.rows()), 0);
      for (Eigen::Index i = f_source.rows(); i < f_all.rows(); ++i) {
        labels[static_cast<std::size_t>(i)] = 1;
      }
      ad::Var ce = tape.mean(tape.softmax_cross_entropy(logits, labels));
      report.adversarial_ce = ce.scalar();
      const ad::Matrix& z = logits.value();
      int correct = 0;
      for (Eigen::Index i = 0; i < z.rows(); ++i) {
        const int pred = z(i, 1) > z(i, 0) ? 1 : 0;
        if (pred == labels[static_cast<std::size_t>(i)]) ++correct;
      }
      report.disc_loss = report.adversarial_ce;
      report.disc_accuracy = static_cast<double>(correct) / static_cast<double>(z.rows());
      loss = tape.add(loss, tape.scale(ce, cfg_.alpha));
    } else {
      // G_d frozen in phase 2; the encoder maximizes the discriminator CE.
      const auto adv = losses::adversarial_loss(tape, model_, f_source, f_target,
                                                /*train_disc=*/false, /*dropout=*/true, drop);
      report.adversarial_ce = adv.ce_mean.scalar();
      loss = tape.add(loss, tape.scale(adv.ce_mean, -cfg_.alpha));
    }
  }

  report.total_loss = report.source_pose_loss + report.target_pose_loss + report.rotation_loss +
                      cfg_.alpha * report.adversarial_ce;
  tape.backward(loss);
  adam_pose_.step();
  adam_pose_.zero_grad();
  if (grl_mode && cfg_.alpha > 0.0) {
    adam_disc_.step();
    adam_disc_.zero_grad();
  }
  return report;
}

StepReport Trainer::train_step() {
  const std::int64_t step = model_.step_counter;
  try {
    const auto disc = disc_step();
    StepReport report = pose_step();
    if (disc.has_value()) {
      report.disc_loss = disc->disc_loss;
      report.disc_accuracy = disc->disc_accuracy;
    }
    model_.step_counter = step + 1;
    return report;
  } catch (const std::runtime_error& e) {
    throw std::runtime_error("train step " + std::to_string(step) + ": " + e.what());
  }
}

double Trainer::total_loss_at(double alpha, std::int64_t step_index) {
  StepInputs in = make_step_inputs(step_index);
  ad::Tape tape;
  ad::Var s_t = tape.constant(model_.s_t().value);
  ad::Var s_q = tape.constant(model_.s_q().value);
  ad::Var f_s = model_.encode(tape, tape.constant(in.source.images), false);
  ad::Var loc_s = model_.localize(tape, f_s, false);
  auto [t_hat, q_hat] = model_.regress(tape, loc_s, false);
  double pose =
      losses::pose_loss_batch(tape, t_hat, q_hat, in.source.t_gt, in.source.q_gt, s_t, s_q).scalar();
  if (in.labeled_target.images.rows() > 0) {
    ad::Var f_l = model_.encode(tape, tape.constant(in.labeled_target.images), false);
    ad::Var loc_l = model_.localize(tape, f_l, false);
    auto [t_l, q_l] = model_.regress(tape, loc_l, false);
    pose += losses::pose_loss_batch(tape, t_l, q_l, in.labeled_target.t_gt, in.labeled_target.q_gt,
                                    s_t, s_q)
                .scalar();
  }
  ad::Var f_t = model_.encode(tape, tape.constant(in.target_images), false);
  Rng drop = Rng::stream(cfg_.seed, {rng_tag::kDropout, static_cast<std::uint64_t>(step_index), 2});
  const auto adv = losses::adversarial_loss(tape, model_, f_s, f_t, false, true, drop);
  return pose + alpha * adv.ce_mean.scalar();
}

TrainCurves Trainer::train() {
  TrainCurves curves;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
    double total = 0, src = 0, tgt = 0, dloss = 0, dacc = 0;
    int dcount = 0;
    for (int s = 0; s < steps_per_epoch_; ++s) {
      const StepReport r = train_step();
      total += r.total_loss;
      src += r.source_pose_loss;
      tgt += r.target_pose_loss;
      if (r.disc_loss.has_value()) {
        dloss += *r.disc_loss;
        dacc += *r.disc_accuracy;
        ++dcount;
      }
    }
    const double inv = 1.0 / static_cast<double>(steps_per_epoch_);
    curves.total_loss.push_back(total * inv);
    curves.source_pose_loss.push_back(src * inv);
    curves.target_pose_loss.push_back(tgt * inv);
    curves.disc_loss.push_back(dcount > 0 ? dloss / dcount : nan);
    curves.disc_accuracy.push_back(dcount > 0 ? dacc / dcount : nan);
    curves.epochs_run = epoch + 1;
    if (cfg_.early_stop && epoch >= 10) {
      const double before = curves.total_loss[static_cast<std::size_t>(epoch - 10)];
      const double now = curves.total_loss.back();
      if (before - now < 1e-4 * std::abs(before)) break;
    }
  }
  return curves;
}

std::vector<std::pair<Pose, Pose>> Trainer::evaluate(const SceneDataset& scene,
                                                     const std::vector<Observation>& observations) const {
  const int si = scene_index(&scene);
  std::vector<const Observation*> ptrs;
  ptrs.reserve(observations.size());
  for (const Observation& o : observations) ptrs.push_back(&o);

  ad::Tape tape;
  const auto fwd = model_.forward_pose(tape, images_to_matrix(ptrs, model_.input_dim()), false);
  const ad::Matrix& t = fwd.t_hat.value();
  const ad::Matrix& q = fwd.q_hat.value();

  std::vector<std::pair<Pose, Pose>> pairs;
  pairs.reserve(observations.size());
  for (std::size_t i = 0; i < observations.size(); ++i) {
    const Eigen::Index r = static_cast<Eigen::Index>(i);
    const double qnorm =
        std::sqrt(q(r, 0) * q(r, 0) + q(r, 1) * q(r, 1) + q(r, 2) * q(r, 2) + q(r, 3) * q(r, 3));
    if (qnorm < 1e-12) throw std::runtime_error("degenerate orientation prediction");
    Pose pred;
    pred.t = Eigen::Vector3d(t(r, 0), t(r, 1), t(r, 2));
    pred.q = quat_normalize(Quaternion{q(r, 0), q(r, 1), q(r, 2), q(r, 3)});
    if (data_.target_mode == PoseTargetMode::relative) {
      const int ai = nearest_anchor(si, observations[i].pose.t);
      pred = compose_pose(anchors_[static_cast<std::size_t>(si)][static_cast<std::size_t>(ai)], pred);
    }
    Pose truth = observations[i].pose;
    truth.q = quat_normalize(truth.q);
    pairs.emplace_back(pred, truth);
  }
  return pairs;
}

namespace {

void write_u64(std::ofstream& out, std::uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(buf), 8);
}

std::uint64_t read_u64(std::ifstream& in) {
  unsigned char buf[8];
  in.read(reinterpret_cast<char*>(buf), 8);
  if (!in) throw std::runtime_error("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

void write_f64(std::ofstream& out, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, 8);
  write_u64(out, bits);
}

double read_f64(std::ifstream& in) {
  const std::uint64_t bits = read_u64(in);
  double d;
  std::memcpy(&d, &bits, 8);
  return d;
}

}  // namespace

void save_model(const ApanetModel& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  const TrainConfig& c = model.config_;
  out << "APANET1\n";
  out << "version 1\n";
  std::ostringstream hidden;
  for (std::size_t i = 0; i < c.encoder_hidden.size(); ++i) {
    if (i) hidden << ',';
    hidden << c.encoder_hidden[i];
  }
  out << "config input_dim=" << model.input_dim_ << " lr=" << format_double(c.lr)
      << " batch_size=" << c.batch_size << " alpha=" << format_double(c.alpha)
      << " nu=" << format_double(c.nu) << " epochs=" << c.epochs << " seed=" << c.seed
      << " mode=" << to_string(c.mode)
      << " optimization=" << (c.optimization == Optimization::grl ? "grl" : "alternating")
      << " grl_lambda=" << format_double(c.grl_lambda) << " encoder_hidden=" << hidden.str()
      << " rotation_class_head=" << (c.rotation_class_head ? 1 : 0)
      << " self_sup_prob=" << format_double(c.self_sup_prob) << " anchor_stride=" << c.anchor_stride
      << " early_stop=" << (c.early_stop ? 1 : 0) << " s_t_init=" << format_double(c.s_t_init)
      << " s_q_init=" << format_double(c.s_q_init) << "\n";
  out << "step " << model.step_counter << "\n";

  auto& mutable_model = const_cast<ApanetModel&>(model);
  const auto params = mutable_model.all_params();
  out << "params " << params.size() << "\n";
  for (const ad::Parameter* p : params) {
    out << p->name << ' ' << p->value.rows() << ' ' << p->value.cols() << "\n";
  }
  out << "BINARY\n";
  for (const ad::Parameter* p : params) {
    for (Eigen::Index j = 0; j < p->value.cols(); ++j) {
      for (Eigen::Index i = 0; i < p->value.rows(); ++i) {
        write_f64(out, p->value(i, j));
      }
    }
  }
}

ApanetModel load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::string line;
  std::getline(in, line);
  if (line != "APANET1") {
    throw std::runtime_error("bad checkpoint header: expected magic 'APANET1', got '" + line + "'");
  }
  std::getline(in, line);
  {
    const auto toks = split_whitespace(line);
    if (toks.size() != 2 || toks[0] != "version") throw std::runtime_error("missing version line");
    if (toks[1] != "1") throw std::runtime_error("unsupported version '" + toks[1] + "'");
  }

  TrainConfig cfg;
  int input_dim = 0;
  std::getline(in, line);
  {
    const auto toks = split_whitespace(line);
    if (toks.empty() || toks[0] != "config") throw std::runtime_error("missing config line");
    for (std::size_t i = 1; i < toks.size(); ++i) {
      const auto eq = toks[i].find('=');
      if (eq == std::string::npos) continue;
      const std::string key = toks[i].substr(0, eq);
      const std::string val = toks[i].substr(eq + 1);
      if (key == "input_dim") input_dim = std::stoi(val);
      else if (key == "lr") cfg.lr = std::stod(val);
      else if (key == "batch_size") cfg.batch_size = std::stoi(val);
      else if (key == "alpha") cfg.alpha = std::stod(val);
      else if (key == "nu") cfg.nu = std::stod(val);
      else if (key == "epochs") cfg.epochs = std::stoi(val);
      else if (key == "seed") cfg.seed = std::stoull(val);
      else if (key == "mode") cfg.mode = method_from_string(val);
      else if (key == "optimization")
        cfg.optimization = val == "grl" ? Optimization::grl : Optimization::alternating;
      else if (key == "grl_lambda") cfg.grl_lambda = std::stod(val);
      else if (key == "encoder_hidden") {
        cfg.encoder_hidden.clear();
        std::istringstream hs(val);
        std::string part;
        while (std::getline(hs, part, ',')) cfg.encoder_hidden.push_back(std::stoi(part));
      } else if (key == "rotation_class_head") cfg.rotation_class_head = val != "0";
      else if (key == "self_sup_prob") cfg.self_sup_prob = std::stod(val);
      else if (key == "anchor_stride") cfg.anchor_stride = std::stoi(val);
      else if (key == "early_stop") cfg.early_stop = val != "0";
      else if (key == "s_t_init") cfg.s_t_init = std::stod(val);
      else if (key == "s_q_init") cfg.s_q_init = std::stod(val);
    }
  }
  std::getline(in, line);
  std::int64_t step = 0;
  {
    const auto toks = split_whitespace(line);
    if (toks.size() != 2 || toks[0] != "step") throw std::runtime_error("missing step line");
    step = std::stoll(toks[1]);
  }

  ApanetModel model(input_dim, cfg);
  model.step_counter = step;
  const auto params = model.all_params();

  std::getline(in, line);
  {
    const auto toks = split_whitespace(line);
    if (toks.size() != 2 || toks[0] != "params") throw std::runtime_error("missing params line");
    if (std::stoul(toks[1]) != params.size()) {
      throw std::runtime_error("checkpoint parameter count does not match config");
    }
  }
  for (ad::Parameter* p : params) {
    std::getline(in, line);
    const auto toks = split_whitespace(line);
    if (toks.size() != 3 || toks[0] != p->name || std::stol(toks[1]) != p->value.rows() ||
        std::stol(toks[2]) != p->value.cols()) {
      throw std::runtime_error("checkpoint manifest mismatch at '" + line + "'");
    }
  }
  std::getline(in, line);
  if (line != "BINARY") throw std::runtime_error("missing BINARY marker");
  for (ad::Parameter* p : params) {
    for (Eigen::Index j = 0; j < p->value.cols(); ++j) {
      for (Eigen::Index i = 0; i < p->value.rows(); ++i) {
        p->value(i, j) = read_f64(in);
      }
    }
  }
  return model;
}

}  // namespace poseadapt
