#include "poseadapt/experiments.hpp"

#include <json.hpp>

#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "poseadapt/textio.hpp"

namespace poseadapt {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string sanitize(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    out.push_back(std::isalnum(static_cast<unsigned char>(c)) ? c : '_');
  }
  return out;
}

std::string short_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return std::string(buf);
}

std::string run_stem(const RunReport& r) {
  return sanitize(r.task) + "_" + sanitize(r.method) + "_nu" + sanitize(short_num(r.nu)) + "_s" +
         std::to_string(r.seed);
}

TrainConfig resolve_config(Method method, TrainConfig cfg, double task_nu) {
  cfg.mode = method;
  switch (method) {
    case Method::no_adaptation:
      cfg.alpha = 0.0;
      cfg.nu = 0.0;
      break;
    case Method::joint:
      cfg.alpha = 0.0;
      cfg.nu = 1.0;
      break;
    case Method::ss:
      cfg.alpha = 0.0;
      cfg.nu = task_nu;
      break;
    case Method::apanet:
    case Method::apanets:
      cfg.nu = task_nu;
      break;
  }
  return cfg;
}

std::vector<SamplePrediction> to_predictions(const std::vector<std::pair<Pose, Pose>>& pairs) {
  std::vector<SamplePrediction> out;
  out.reserve(pairs.size());
  for (const auto& [pred, truth] : pairs) out.push_back({pred, truth});
  return out;
}

ErrorPair errors_of(const std::vector<SamplePrediction>& preds) {
  std::vector<std::pair<Pose, Pose>> pairs;
  pairs.reserve(preds.size());
  for (const auto& p : preds) pairs.emplace_back(p.predicted, p.truth);
  return median_errors(pairs);
}

RunOutcome run_task_method(const AdaptationTask& task, Method method, const TrainConfig& base,
                           double task_nu) {
  const TrainConfig cfg = resolve_config(method, base, task_nu);
  TrainingData data;
  for (const SceneDataset& s : task.sources) data.sources.push_back(&s);
  data.target = &task.target;
  data.target_mode = task.mode;

  const auto t0 = std::chrono::steady_clock::now();
  Trainer trainer(data, cfg);
  TrainCurves curves = trainer.train();

  RunReport report;
  report.task = task.name;
  report.method = to_string(method);
  report.nu = cfg.nu;
  report.seed = cfg.seed;
  report.target_predictions = to_predictions(trainer.evaluate(task.target, task.target.test));
  report.target_errors = errors_of(report.target_predictions);
  if (method == Method::joint) {
    for (const SceneDataset& s : task.sources) {
      const auto pairs = trainer.evaluate(s, s.test);
      for (const auto& [pred, truth] : pairs) report.source_predictions.push_back({pred, truth});
    }
    report.source_errors = errors_of(report.source_predictions);
  }
  if (!curves.disc_loss.empty() && std::isnan(curves.disc_loss.front())) {
    curves.disc_loss.clear();
    curves.disc_accuracy.clear();
  }
  report.curves = std::move(curves);
  report.wall_clock_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  report.config_snapshot = to_key_values(cfg);
  report.config_snapshot["task.name"] = task.name;
  report.config_snapshot["task.mode"] = to_string(task.mode);

  return RunOutcome{std::move(report), std::move(trainer.model())};
}

}  // namespace

std::map<std::string, std::string> to_key_values(const TrainConfig& cfg) {
  std::map<std::string, std::string> kv;
  kv["train.lr"] = format_double(cfg.lr);
  kv["train.batch_size"] = std::to_string(cfg.batch_size);
  kv["train.alpha"] = format_double(cfg.alpha);
  kv["train.nu"] = format_double(cfg.nu);
  kv["train.epochs"] = std::to_string(cfg.epochs);
  kv["train.seed"] = std::to_string(cfg.seed);
  kv["train.mode"] = to_string(cfg.mode);
  kv["train.optimization"] = cfg.optimization == Optimization::grl ? "grl" : "alternating";
  kv["train.grl_lambda"] = format_double(cfg.grl_lambda);
  std::ostringstream hidden;
  for (std::size_t i = 0; i < cfg.encoder_hidden.size(); ++i) {
    if (i) hidden << ',';
    hidden << cfg.encoder_hidden[i];
  }
  kv["train.encoder_hidden"] = hidden.str();
  kv["train.rotation_class_head"] = cfg.rotation_class_head ? "1" : "0";
  kv["train.self_sup_prob"] = format_double(cfg.self_sup_prob);
  kv["train.anchor_stride"] = std::to_string(cfg.anchor_stride);
  kv["train.early_stop"] = cfg.early_stop ? "1" : "0";
  kv["train.s_t_init"] = format_double(cfg.s_t_init);
  kv["train.s_q_init"] = format_double(cfg.s_q_init);
  return kv;
}

RunReport run_method(const AdaptationTask& task, Method method, const TrainConfig& base) {
  return run_task_method(task, method, base, task.nu).report;
}

RunOutcome run_method_with_model(const AdaptationTask& task, Method method, const TrainConfig& base) {
  return run_task_method(task, method, base, task.nu);
}

std::vector<RunReport> run_cells(const std::vector<RunCell>& cells, const TrainConfig& base, int jobs) {
  std::vector<RunReport> reports(cells.size());
  std::vector<std::string> failures(cells.size());
  std::atomic<std::size_t> next{0};
  const int workers = std::max(1, jobs);

  const auto work = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      const RunCell& cell = cells[i];
      try {
        TrainConfig cfg = base;
        cfg.seed = cell.seed;
        reports[i] = run_task_method(*cell.task, cell.method, cfg, cell.nu).report;
      } catch (const std::exception& e) {
        failures[i] = e.what();
      }
    }
  };

  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (!failures[i].empty()) {
      throw std::runtime_error("run cell " + std::to_string(i) + " failed: " + failures[i]);
    }
  }
  return reports;
}

std::vector<RunReport> nu_sweep(const AdaptationTask& task, const std::vector<double>& nu_values,
                                const std::vector<std::uint64_t>& seeds, const TrainConfig& base,
                                int jobs) {
  for (double nu : nu_values) {
    if (nu < 0.0 || nu > 1.0) throw std::invalid_argument("nu values must be in [0, 1]");
  }
  std::vector<RunCell> cells;
  for (Method m : {Method::ss, Method::apanet, Method::apanets}) {
    for (double nu : nu_values) {
      for (std::uint64_t seed : seeds) {
        cells.push_back(RunCell{&task, m, nu, seed});
      }
    }
  }
  return run_cells(cells, base, jobs);
}

ProbeResult adaptability_probe(const AdaptationTask& task, const TrainConfig& base,
                               double threshold_scale) {
  if (task.sources.empty()) throw std::invalid_argument("adaptability probe: no sources");

  // Single-scene supervised reference: the joint estimator with
  // source = target on the first source scene.
  AdaptationTask solo;
  solo.name = task.name + "_reference";
  solo.sources = {task.sources.front()};
  solo.target = task.sources.front();
  solo.nu = 1.0;
  solo.mode = task.mode;
  solo.seed = task.seed;
  const RunReport reference = run_method(solo, Method::joint, base);

  const RunReport joint = run_method(task, Method::joint, base);

  ProbeResult result;
  result.reference_errors = reference.target_errors;
  result.source_errors = *joint.source_errors;
  result.target_errors = joint.target_errors;
  result.threshold_scale = threshold_scale;
  const double pos_limit = threshold_scale * result.reference_errors.position_error;
  const double orient_limit = threshold_scale * result.reference_errors.orientation_error;
  result.adaptable = result.source_errors.position_error <= pos_limit &&
                     result.source_errors.orientation_error <= orient_limit &&
                     result.target_errors.position_error <= pos_limit &&
                     result.target_errors.orientation_error <= orient_limit;
  return result;
}

double train_feature_probe(const ad::Matrix& train_features, const std::vector<int>& train_labels,
                           const ad::Matrix& test_features, const std::vector<int>& test_labels,
                           std::uint64_t seed, int epochs, double lr) {
  if (train_features.rows() != static_cast<Eigen::Index>(train_labels.size()) ||
      test_features.rows() != static_cast<Eigen::Index>(test_labels.size())) {
    throw std::invalid_argument("feature probe: label count does not match feature rows");
  }
  const int input = static_cast<int>(train_features.cols());
  Rng rng = Rng::stream(seed, {rng_tag::kProbe});
  std::vector<LinearLayer> layers;
  layers.emplace_back("probe.0", input, 1024, rng);
  layers.emplace_back("probe.1", 1024, 256, rng);
  layers.emplace_back("probe.2", 256, 64, rng);
  layers.emplace_back("probe.out", 64, 2, rng);
  std::vector<ad::Parameter*> params;
  for (LinearLayer& l : layers) {
    params.push_back(&l.W);
    params.push_back(&l.b);
  }
  ad::Adam adam(params, lr);

  const auto forward = [&](ad::Tape& tape, const ad::Matrix& x, bool train, Rng& drop) {
    ad::Var h = tape.constant(x);
    for (std::size_t li = 0; li + 1 < layers.size(); ++li) {
      h = tape.relu(layers[li].apply(tape, h, train));
      h = tape.dropout(h, 0.5, drop, train);
    }
    return layers.back().apply(tape, h, train);
  };

  const int n = static_cast<int>(train_features.rows());
  const int batch = std::min(32, n);
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < epochs; ++epoch) {
    rng.shuffle(order);
    for (int start = 0; start + batch <= n; start += batch) {
      ad::Matrix x(batch, input);
      std::vector<int> y(static_cast<std::size_t>(batch));
      for (int i = 0; i < batch; ++i) {
        const int idx = order[static_cast<std::size_t>(start + i)];
        x.row(i) = train_features.row(idx);
        y[static_cast<std::size_t>(i)] = train_labels[static_cast<std::size_t>(idx)];
      }
      ad::Tape tape;
      ad::Var logits = forward(tape, x, /*train=*/true, rng);
      ad::Var ce = tape.mean(tape.softmax_cross_entropy(logits, y));
      tape.backward(ce);
      adam.step();
      adam.zero_grad();
    }
  }

  ad::Tape tape;
  Rng no_drop(0);
  const ad::Matrix z = forward(tape, test_features, /*train=*/false, no_drop).value();
  int correct = 0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const int pred = z(i, 1) > z(i, 0) ? 1 : 0;
    if (pred == test_labels[static_cast<std::size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(z.rows());
}

double scene_invariance_probe(const ApanetModel& model, const AdaptationTask& task,
                              std::uint64_t seed, int epochs, double lr) {
  std::vector<Observation> train_obs;
  std::vector<int> train_labels;
  std::vector<Observation> test_obs;
  std::vector<int> test_labels;
  for (const SceneDataset& s : task.sources) {
    for (const Observation& o : s.train) {
      train_obs.push_back(o);
      train_labels.push_back(0);
    }
    for (const Observation& o : s.test) {
      test_obs.push_back(o);
      test_labels.push_back(0);
    }
  }
  for (const Observation& o : task.target.train) {
    train_obs.push_back(o);
    train_labels.push_back(1);
  }
  for (const Observation& o : task.target.test) {
    test_obs.push_back(o);
    test_labels.push_back(1);
  }
  return train_feature_probe(model.features(train_obs), train_labels, model.features(test_obs),
                             test_labels, seed, epochs, lr);
}

namespace {

json curves_to_json(const TrainCurves& c) {
  json j;
  j["epochs_run"] = c.epochs_run;
  j["total_loss"] = c.total_loss;
  j["source_pose_loss"] = c.source_pose_loss;
  j["target_pose_loss"] = c.target_pose_loss;
  j["disc_loss"] = c.disc_loss;
  j["disc_accuracy"] = c.disc_accuracy;
  return j;
}

TrainCurves curves_from_json(const json& j) {
  TrainCurves c;
  c.epochs_run = j.value("epochs_run", 0);
  c.total_loss = j.value("total_loss", std::vector<double>{});
  c.source_pose_loss = j.value("source_pose_loss", std::vector<double>{});
  c.target_pose_loss = j.value("target_pose_loss", std::vector<double>{});
  c.disc_loss = j.value("disc_loss", std::vector<double>{});
  c.disc_accuracy = j.value("disc_accuracy", std::vector<double>{});
  return c;
}

void write_predictions_csv(const std::vector<SamplePrediction>& preds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "index,pred_tx,pred_ty,pred_tz,pred_qw,pred_qx,pred_qy,pred_qz,"
         "gt_tx,gt_ty,gt_tz,gt_qw,gt_qx,gt_qy,gt_qz,position_error,orientation_error\n";
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const Pose& p = preds[i].predicted;
    const Pose& g = preds[i].truth;
    out << i << ',' << format_double(p.t.x()) << ',' << format_double(p.t.y()) << ','
        << format_double(p.t.z()) << ',' << format_double(p.q.w) << ',' << format_double(p.q.x)
        << ',' << format_double(p.q.y) << ',' << format_double(p.q.z) << ','
        << format_double(g.t.x()) << ',' << format_double(g.t.y()) << ',' << format_double(g.t.z())
        << ',' << format_double(g.q.w) << ',' << format_double(g.q.x) << ',' << format_double(g.q.y)
        << ',' << format_double(g.q.z) << ',' << format_double((p.t - g.t).norm()) << ','
        << format_double(quat_angular_distance_deg(p.q, g.q)) << '\n';
  }
}

std::vector<SamplePrediction> read_predictions_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::string line;
  std::getline(in, line);  // header
  std::vector<SamplePrediction> preds;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> vals;
    std::istringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) vals.push_back(std::stod(tok));
    if (vals.size() != 17) throw std::runtime_error(path + ": malformed prediction row");
    SamplePrediction p;
    p.predicted.t = Eigen::Vector3d(vals[1], vals[2], vals[3]);
    p.predicted.q = Quaternion{vals[4], vals[5], vals[6], vals[7]};
    p.truth.t = Eigen::Vector3d(vals[8], vals[9], vals[10]);
    p.truth.q = Quaternion{vals[11], vals[12], vals[13], vals[14]};
    preds.push_back(p);
  }
  return preds;
}

}  // namespace

std::string medians_csv(const std::vector<RunReport>& reports) {
  std::ostringstream out;
  out << "task,method,nu,seed,target_position_error,target_orientation_error,"
         "source_position_error,source_orientation_error\n";
  for (const RunReport& r : reports) {
    out << r.task << ',' << r.method << ',' << format_double(r.nu) << ',' << r.seed << ','
        << format_double(r.target_errors.position_error) << ','
        << format_double(r.target_errors.orientation_error) << ',';
    if (r.source_errors.has_value()) {
      out << format_double(r.source_errors->position_error) << ','
          << format_double(r.source_errors->orientation_error);
    } else {
      out << ',';
    }
    out << '\n';
  }
  return out.str();
}

void emit_report(const std::vector<RunReport>& reports, const std::string& dir, const Config& config) {
  fs::create_directories(dir);
  fs::create_directories(dir + "/predictions");
  {
    std::ofstream out(dir + "/config.txt");
    if (!out) throw std::runtime_error("cannot write " + dir + "/config.txt");
    out << config.to_string();
  }
  {
    std::ofstream out(dir + "/report.jsonl");
    if (!out) throw std::runtime_error("cannot write " + dir + "/report.jsonl");
    for (const RunReport& r : reports) {
      json j;
      j["task"] = r.task;
      j["method"] = r.method;
      j["nu"] = r.nu;
      j["seed"] = r.seed;
      j["target_position_error"] = r.target_errors.position_error;
      j["target_orientation_error"] = r.target_errors.orientation_error;
      if (r.source_errors.has_value()) {
        j["source_position_error"] = r.source_errors->position_error;
        j["source_orientation_error"] = r.source_errors->orientation_error;
      }
      j["wall_clock_sec"] = r.wall_clock_sec;
      j["curves"] = curves_to_json(r.curves);
      j["config"] = r.config_snapshot;
      j["predictions_file"] = run_stem(r) + ".csv";
      out << j.dump() << '\n';

      write_predictions_csv(r.target_predictions, dir + "/predictions/" + run_stem(r) + ".csv");
      if (!r.source_predictions.empty()) {
        write_predictions_csv(r.source_predictions,
                              dir + "/predictions/" + run_stem(r) + "_source.csv");
      }
    }
  }
  {
    std::ofstream out(dir + "/medians.csv");
    if (!out) throw std::runtime_error("cannot write " + dir + "/medians.csv");
    out << medians_csv(reports);
  }
}

std::vector<RunReport> load_report_archive(const std::string& dir) {
  std::ifstream in(dir + "/report.jsonl");
  if (!in) throw std::runtime_error("cannot read " + dir + "/report.jsonl");
  std::vector<RunReport> reports;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    RunReport r;
    r.task = j.at("task").get<std::string>();
    r.method = j.at("method").get<std::string>();
    r.nu = j.at("nu").get<double>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.target_errors.position_error = j.at("target_position_error").get<double>();
    r.target_errors.orientation_error = j.at("target_orientation_error").get<double>();
    if (j.contains("source_position_error")) {
      ErrorPair src;
      src.position_error = j.at("source_position_error").get<double>();
      src.orientation_error = j.at("source_orientation_error").get<double>();
      r.source_errors = src;
    }
    r.wall_clock_sec = j.at("wall_clock_sec").get<double>();
    r.curves = curves_from_json(j.at("curves"));
    r.config_snapshot = j.at("config").get<std::map<std::string, std::string>>();
    const std::string stem = j.at("predictions_file").get<std::string>();
    r.target_predictions = read_predictions_csv(dir + "/predictions/" + stem);
    const std::string source_path =
        dir + "/predictions/" + stem.substr(0, stem.size() - 4) + "_source.csv";
    if (fs::exists(source_path)) r.source_predictions = read_predictions_csv(source_path);
    reports.push_back(std::move(r));
  }
  return reports;
}

Config standard_config() {
  return Config::from_string(R"(
[scene]
n_landmarks = 32
n_train = 448
n_test = 96
extent = 5,5,2.5
spread = 25
image_size = 16
focal = 9

[scene.source]
seed = 101
center = 0,0,0

[scene.target]
seed = 202
center = 40,0,0

[task]
name = standard
sources = source
nu = 0.05
mode = rpe
seed = 1
seeds = 5

[train]
lr = 0.001
batch_size = 16
alpha = 1
epochs = 120
encoder_hidden = 256,128
optimization = alternating
grl_lambda = 1
rotation_class_head = 0
self_sup_prob = 0.5
anchor_stride = 10
early_stop = 0
s_t_init = 0
s_q_init = -1
)");
}

namespace {

SceneConfig scene_config_from(const Config& cfg, const std::string& section, int scene_id) {
  SceneConfig sc;
  const auto key = [&](const std::string& name) { return "scene." + section + "." + name; };
  const auto shared = [&](const std::string& name) { return "scene." + name; };
  const auto pick = [&](const std::string& name, const std::string& fallback) {
    if (cfg.has(key(name))) return cfg.get(key(name));
    if (cfg.has(shared(name))) return cfg.get(shared(name));
    return fallback;
  };
  sc.seed = std::stoull(pick("seed", "0"));
  sc.n_landmarks = std::stoi(pick("n_landmarks", "32"));
  sc.n_train = std::stoi(pick("n_train", "448"));
  sc.n_test = std::stoi(pick("n_test", "96"));
  sc.orientation_spread_deg = std::stod(pick("spread", "25"));
  sc.image_size = std::stoi(pick("image_size", "16"));
  sc.focal = std::stod(pick("focal", "9"));
  sc.pixel_jitter = pick("jitter", "0") != "0";
  sc.scene_id = scene_id;
  const auto vec3 = [&](const std::string& name, const Eigen::Vector3d& fallback) {
    const std::string raw = pick(name, "");
    if (raw.empty()) return fallback;
    Eigen::Vector3d v = fallback;
    std::istringstream ss(raw);
    std::string part;
    for (int i = 0; i < 3 && std::getline(ss, part, ','); ++i) v[i] = std::stod(part);
    return v;
  };
  sc.pose_center = vec3("center", Eigen::Vector3d::Zero());
  sc.pose_extent = vec3("extent", Eigen::Vector3d(5, 5, 2.5));
  return sc;
}

}  // namespace

AdaptationTask task_from_config(const Config& cfg) {
  AdaptationTask task;
  task.name = cfg.get("task.name", "task");
  task.nu = cfg.get_double("task.nu", 0.05);
  task.mode = pose_target_mode_from_string(cfg.get("task.mode", "rpe"));
  task.seed = cfg.get_u64("task.seed", 0);

  std::vector<std::string> source_sections;
  {
    std::istringstream ss(cfg.get("task.sources", "source"));
    std::string part;
    while (std::getline(ss, part, ',')) {
      if (!part.empty()) source_sections.push_back(part);
    }
  }
  int scene_id = 0;
  for (const std::string& section : source_sections) {
    task.sources.push_back(generate_scene(scene_config_from(cfg, section, scene_id++)));
  }
  task.target = generate_scene(scene_config_from(cfg, "target", scene_id));
  return task;
}

TrainConfig train_config_from_config(const Config& cfg) {
  TrainConfig tc;
  tc.lr = cfg.get_double("train.lr", tc.lr);
  tc.batch_size = cfg.get_int("train.batch_size", tc.batch_size);
  tc.alpha = cfg.get_double("train.alpha", tc.alpha);
  tc.nu = cfg.get_double("task.nu", tc.nu);
  tc.epochs = cfg.get_int("train.epochs", tc.epochs);
  tc.seed = cfg.get_u64("train.seed", cfg.get_u64("task.seed", tc.seed));
  if (cfg.has("train.mode")) tc.mode = method_from_string(cfg.get("train.mode"));
  if (cfg.has("train.optimization")) {
    tc.optimization =
        cfg.get("train.optimization") == "grl" ? Optimization::grl : Optimization::alternating;
  }
  tc.grl_lambda = cfg.get_double("train.grl_lambda", tc.grl_lambda);
  tc.encoder_hidden = cfg.get_int_list("train.encoder_hidden", tc.encoder_hidden);
  tc.rotation_class_head = cfg.get_bool("train.rotation_class_head", tc.rotation_class_head);
  tc.self_sup_prob = cfg.get_double("train.self_sup_prob", tc.self_sup_prob);
  tc.anchor_stride = cfg.get_int("train.anchor_stride", tc.anchor_stride);
  tc.early_stop = cfg.get_bool("train.early_stop", tc.early_stop);
  tc.s_t_init = cfg.get_double("train.s_t_init", tc.s_t_init);
  tc.s_q_init = cfg.get_double("train.s_q_init", tc.s_q_init);
  return tc;
}

}  // namespace poseadapt
