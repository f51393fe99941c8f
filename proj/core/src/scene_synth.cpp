#include "poseadapt/scene_synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include "poseadapt/rng.hpp"
#include "poseadapt/textio.hpp"

namespace poseadapt {

namespace {

constexpr double kSplatSigma = 0.8;   // pixels
constexpr int kSplatReach = 2;        // pixels either side of the center
constexpr double kNearPlane = 0.1;    // meters

void validate(const SceneConfig& c) {
  if (c.n_landmarks < 1 || c.n_train < 1 || c.n_test < 1) {
    throw std::invalid_argument("scene config: counts must be >= 1");
  }
  if (c.pose_extent.minCoeff() <= 0.0) {
    throw std::invalid_argument("scene config: pose extent must be positive");
  }
  if (c.image_size < 2 || c.image_size % 2 != 0) {
    throw std::invalid_argument("scene config: image_size must be even and >= 2");
  }
  if (c.focal <= 0.0) {
    throw std::invalid_argument("scene config: focal must be positive");
  }
  if (c.orientation_spread_deg < 0.0) {
    throw std::invalid_argument("scene config: orientation spread must be >= 0");
  }
}

Quaternion mat_to_quat(const Eigen::Matrix3d& m) {
  Quaternion q;
  const double tr = m.trace();
  if (tr > 0.0) {
    const double s = std::sqrt(tr + 1.0) * 2.0;
    q.w = 0.25 * s;
    q.x = (m(2, 1) - m(1, 2)) / s;
    q.y = (m(0, 2) - m(2, 0)) / s;
    q.z = (m(1, 0) - m(0, 1)) / s;
  } else if (m(0, 0) > m(1, 1) && m(0, 0) > m(2, 2)) {
    const double s = std::sqrt(1.0 + m(0, 0) - m(1, 1) - m(2, 2)) * 2.0;
    q.w = (m(2, 1) - m(1, 2)) / s;
    q.x = 0.25 * s;
    q.y = (m(0, 1) + m(1, 0)) / s;
    q.z = (m(0, 2) + m(2, 0)) / s;
  } else if (m(1, 1) > m(2, 2)) {
    const double s = std::sqrt(1.0 + m(1, 1) - m(0, 0) - m(2, 2)) * 2.0;
    q.w = (m(0, 2) - m(2, 0)) / s;
    q.x = (m(0, 1) + m(1, 0)) / s;
    q.y = 0.25 * s;
    q.z = (m(1, 2) + m(2, 1)) / s;
  } else {
    const double s = std::sqrt(1.0 + m(2, 2) - m(0, 0) - m(1, 1)) * 2.0;
    q.w = (m(1, 0) - m(0, 1)) / s;
    q.x = (m(0, 2) + m(2, 0)) / s;
    q.y = (m(1, 2) + m(2, 1)) / s;
    q.z = 0.25 * s;
  }
  return quat_normalize(q);
}

// Camera-to-world rotation with camera +z looking from `position` toward
// `target` and camera +y close to world up (+y).
Quaternion look_at(const Eigen::Vector3d& position, const Eigen::Vector3d& target) {
  Eigen::Vector3d forward = target - position;
  if (forward.norm() < 1e-9) forward = Eigen::Vector3d(0, 0, 1);
  forward.normalize();
  Eigen::Vector3d up(0, 1, 0);
  if (std::abs(forward.dot(up)) > 1.0 - 1e-6) up = Eigen::Vector3d(1, 0, 0);
  const Eigen::Vector3d right = up.cross(forward).normalized();
  const Eigen::Vector3d true_up = forward.cross(right);
  Eigen::Matrix3d m;
  m.col(0) = right;
  m.col(1) = true_up;
  m.col(2) = forward;
  return mat_to_quat(m);
}

Eigen::Vector3d random_unit_vector(Rng& rng) {
  for (;;) {
    const Eigen::Vector3d v(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    const double n = v.norm();
    if (n > 1e-3 && n <= 1.0) return v / n;
  }
}

Quaternion axis_angle_quat(const Eigen::Vector3d& axis, double angle) {
  const double h = 0.5 * angle;
  const double s = std::sin(h);
  return quat_normalize(Quaternion{std::cos(h), axis.x() * s, axis.y() * s, axis.z() * s});
}

}  // namespace

std::vector<double> render_observation(const Pose& pose,
                                       const std::vector<Eigen::Vector3d>& landmarks,
                                       const SceneConfig& config) {
  if (landmarks.empty()) {
    throw std::invalid_argument("render_observation: no landmarks");
  }
  const int g = config.image_size;
  std::vector<double> raster(static_cast<std::size_t>(g) * g, 0.0);
  const double center = 0.5 * (g - 1);
  const Quaternion world_to_cam = quat_inverse(pose.q);

  double jitter_u = 0.0, jitter_v = 0.0;
  if (config.pixel_jitter) {
    // one shift per frame, keyed by the pose so rendering stays a pure function
    Rng jr = Rng::stream(config.seed,
                         {rng_tag::kJitter, static_cast<std::uint64_t>(std::llround(pose.t.x() * 1e6)),
                          static_cast<std::uint64_t>(std::llround(pose.t.y() * 1e6))});
    jitter_u = jr.uniform(-1.0, 1.0);
    jitter_v = jr.uniform(-1.0, 1.0);
  }

  for (const Eigen::Vector3d& lm : landmarks) {
    const Eigen::Vector3d pc = rotate_vector(world_to_cam, lm - pose.t);
    if (pc.z() <= kNearPlane) continue;
    const double u = center + config.focal * pc.x() / pc.z() + jitter_u;
    const double v = center - config.focal * pc.y() / pc.z() + jitter_v;
    const int c0 = static_cast<int>(std::lround(u));
    const int r0 = static_cast<int>(std::lround(v));
    for (int r = r0 - kSplatReach; r <= r0 + kSplatReach; ++r) {
      if (r < 0 || r >= g) continue;
      for (int c = c0 - kSplatReach; c <= c0 + kSplatReach; ++c) {
        if (c < 0 || c >= g) continue;
        const double du = static_cast<double>(c) - u;
        const double dv = static_cast<double>(r) - v;
        raster[static_cast<std::size_t>(r) * g + c] +=
            std::exp(-(du * du + dv * dv) / (2.0 * kSplatSigma * kSplatSigma));
      }
    }
  }
  const double peak = *std::max_element(raster.begin(), raster.end());
  if (peak > 0.0) {
    for (double& v : raster) v /= peak;
  }
  return raster;
}

std::vector<double> rotate_raster(const std::vector<double>& image, int grid, int k_degrees) {
  if (grid < 1 || image.size() != static_cast<std::size_t>(grid) * grid) {
    throw std::invalid_argument("rotate_raster: raster is not grid x grid");
  }
  if (k_degrees != 0 && k_degrees != 90 && k_degrees != 180 && k_degrees != 270) {
    throw std::invalid_argument("rotate_raster: k must be one of {0, 90, 180, 270}");
  }
  if (k_degrees == 0) return image;
  std::vector<double> out(image.size());
  const int g = grid;
  for (int r = 0; r < g; ++r) {
    for (int c = 0; c < g; ++c) {
      int nr = r, nc = c;
      switch (k_degrees) {
        case 90:
          nr = c;
          nc = g - 1 - r;
          break;
        case 180:
          nr = g - 1 - r;
          nc = g - 1 - c;
          break;
        case 270:
          nr = g - 1 - c;
          nc = r;
          break;
        default:
          break;
      }
      out[static_cast<std::size_t>(nr) * g + nc] = image[static_cast<std::size_t>(r) * g + c];
    }
  }
  return out;
}

SceneDataset generate_scene(const SceneConfig& config) {
  validate(config);
  SceneDataset ds;
  ds.config = config;

  Rng lm_rng = Rng::stream(config.seed, {rng_tag::kLandmarks});
  ds.landmarks.reserve(config.n_landmarks);
  for (int i = 0; i < config.n_landmarks; ++i) {
    Eigen::Vector3d p;
    for (int k = 0; k < 3; ++k) {
      p[k] = config.pose_center[k] + 0.5 * config.pose_extent[k] * lm_rng.uniform(-1.0, 1.0);
    }
    ds.landmarks.push_back(p);
  }
  Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
  for (const auto& p : ds.landmarks) centroid += p;
  centroid /= static_cast<double>(ds.landmarks.size());

  Rng traj_rng = Rng::stream(config.seed, {rng_tag::kTrajectory});
  Rng orient_rng = Rng::stream(config.seed, {rng_tag::kOrientation});
  const double spread_rad = config.orientation_spread_deg * 3.14159265358979323846 / 180.0;

  const int total = config.n_train + config.n_test;
  int empty_frames = 0;
  for (int i = 0; i < total; ++i) {
    Pose pose;
    for (int k = 0; k < 3; ++k) {
      pose.t[k] = config.pose_center[k] + config.pose_extent[k] * traj_rng.uniform(-1.0, 1.0);
    }
    Quaternion q = look_at(pose.t, centroid);
    if (spread_rad > 0.0) {
      const Eigen::Vector3d axis = random_unit_vector(orient_rng);
      const double angle = orient_rng.uniform(0.0, spread_rad);
      q = quat_multiply(q, axis_angle_quat(axis, angle));
    }
    pose.q = q;

    Observation obs;
    obs.pose = pose;
    obs.scene_id = config.scene_id;
    obs.image = render_observation(pose, ds.landmarks, config);
    if (*std::max_element(obs.image.begin(), obs.image.end()) == 0.0) ++empty_frames;

    const bool is_train = i < config.n_train;
    std::ostringstream id;
    id << "s" << config.scene_id << "/" << (is_train ? "train" : "test") << "/"
       << (is_train ? i : i - config.n_train);
    obs.image_id = id.str();
    (is_train ? ds.train : ds.test).push_back(std::move(obs));
  }

  if (empty_frames * 10 > total) {
    throw std::runtime_error("degenerate scene geometry: over 10% of frames see no landmark");
  }
  return ds;
}

namespace {

void write_pose_file(const std::vector<Observation>& obs, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "POSESYNTH v1\n";
  for (const Observation& o : obs) {
    out << o.image_id << ' ' << format_double(o.pose.t.x()) << ' ' << format_double(o.pose.t.y())
        << ' ' << format_double(o.pose.t.z()) << ' ' << format_double(o.pose.q.w) << ' '
        << format_double(o.pose.q.x) << ' ' << format_double(o.pose.q.y) << ' '
        << format_double(o.pose.q.z) << ' ' << o.scene_id << '\n';
  }
}

std::vector<Observation> read_pose_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::string header;
  std::getline(in, header);
  if (header != "POSESYNTH v1") {
    throw std::runtime_error(path + ": expected POSESYNTH v1 header, got '" + header + "'");
  }
  std::vector<Observation> out;
  std::string line;
  while (std::getline(in, line)) {
    const auto toks = split_whitespace(line);
    if (toks.empty()) continue;
    if (toks.size() != 9) throw std::runtime_error(path + ": malformed record '" + line + "'");
    Observation o;
    o.image_id = toks[0];
    double vals[7];
    for (int i = 0; i < 7; ++i) {
      if (!parse_double_strict(toks[1 + i], vals[i])) {
        throw std::runtime_error(path + ": malformed number in '" + line + "'");
      }
    }
    o.pose.t = Eigen::Vector3d(vals[0], vals[1], vals[2]);
    o.pose.q = quat_normalize(Quaternion{vals[3], vals[4], vals[5], vals[6]});
    o.scene_id = std::stoi(toks[8]);
    out.push_back(std::move(o));
  }
  return out;
}

}  // namespace

void save_dataset(const SceneDataset& ds, const std::string& stem) {
  write_pose_file(ds.train, stem + "_train.txt");
  write_pose_file(ds.test, stem + "_test.txt");

  std::ofstream out(stem + "_rasters.txt");
  if (!out) throw std::runtime_error("cannot write " + stem + "_rasters.txt");
  const SceneConfig& c = ds.config;
  out << "POSESYNTH v1\n";
  out << "config seed=" << c.seed << " n_landmarks=" << c.n_landmarks << " n_train=" << c.n_train
      << " n_test=" << c.n_test << " center=" << format_double(c.pose_center.x()) << ','
      << format_double(c.pose_center.y()) << ',' << format_double(c.pose_center.z())
      << " extent=" << format_double(c.pose_extent.x()) << ',' << format_double(c.pose_extent.y())
      << ',' << format_double(c.pose_extent.z())
      << " spread=" << format_double(c.orientation_spread_deg) << " image_size=" << c.image_size
      << " focal=" << format_double(c.focal) << " jitter=" << (c.pixel_jitter ? 1 : 0)
      << " scene_id=" << c.scene_id << '\n';
  out << "landmarks " << ds.landmarks.size() << '\n';
  for (const auto& lm : ds.landmarks) {
    out << format_double(lm.x()) << ' ' << format_double(lm.y()) << ' ' << format_double(lm.z())
        << '\n';
  }
  for (const auto* split : {&ds.train, &ds.test}) {
    for (const Observation& o : *split) {
      out << "raster " << o.image_id;
      for (double v : o.image) out << ' ' << format_double(v);
      out << '\n';
    }
  }
}

SceneDataset load_dataset(const std::string& stem) {
  SceneDataset ds;
  ds.train = read_pose_file(stem + "_train.txt");
  ds.test = read_pose_file(stem + "_test.txt");

  std::ifstream in(stem + "_rasters.txt");
  if (!in) throw std::runtime_error("cannot read " + stem + "_rasters.txt");
  std::string line;
  std::getline(in, line);
  if (line != "POSESYNTH v1") {
    throw std::runtime_error(stem + "_rasters.txt: expected POSESYNTH v1 header");
  }
  std::getline(in, line);
  {
    const auto toks = split_whitespace(line);
    if (toks.empty() || toks[0] != "config") {
      throw std::runtime_error(stem + "_rasters.txt: missing config line");
    }
    SceneConfig& c = ds.config;
    for (std::size_t i = 1; i < toks.size(); ++i) {
      const auto eq = toks[i].find('=');
      if (eq == std::string::npos) continue;
      const std::string key = toks[i].substr(0, eq);
      const std::string val = toks[i].substr(eq + 1);
      const auto parse_vec3 = [&](Eigen::Vector3d& v) {
        std::istringstream vs(val);
        std::string part;
        for (int k = 0; k < 3 && std::getline(vs, part, ','); ++k) v[k] = std::stod(part);
      };
      if (key == "seed") c.seed = std::stoull(val);
      else if (key == "n_landmarks") c.n_landmarks = std::stoi(val);
      else if (key == "n_train") c.n_train = std::stoi(val);
      else if (key == "n_test") c.n_test = std::stoi(val);
      else if (key == "center") parse_vec3(c.pose_center);
      else if (key == "extent") parse_vec3(c.pose_extent);
      else if (key == "spread") c.orientation_spread_deg = std::stod(val);
      else if (key == "image_size") c.image_size = std::stoi(val);
      else if (key == "focal") c.focal = std::stod(val);
      else if (key == "jitter") c.pixel_jitter = val != "0";
      else if (key == "scene_id") c.scene_id = std::stoi(val);
    }
  }
  std::getline(in, line);
  {
    const auto toks = split_whitespace(line);
    if (toks.size() != 2 || toks[0] != "landmarks") {
      throw std::runtime_error(stem + "_rasters.txt: missing landmarks line");
    }
    const int n = std::stoi(toks[1]);
    ds.landmarks.resize(n);
    for (int i = 0; i < n; ++i) {
      std::getline(in, line);
      const auto lt = split_whitespace(line);
      if (lt.size() != 3) throw std::runtime_error(stem + "_rasters.txt: malformed landmark");
      ds.landmarks[i] = Eigen::Vector3d(std::stod(lt[0]), std::stod(lt[1]), std::stod(lt[2]));
    }
  }
  std::unordered_map<std::string, std::vector<double>> rasters;
  while (std::getline(in, line)) {
    const auto toks = split_whitespace(line);
    if (toks.empty()) continue;
    if (toks[0] != "raster" || toks.size() < 2) {
      throw std::runtime_error(stem + "_rasters.txt: malformed raster record");
    }
    std::vector<double> img(toks.size() - 2);
    for (std::size_t i = 2; i < toks.size(); ++i) {
      if (!parse_double_strict(toks[i], img[i - 2])) {
        throw std::runtime_error(stem + "_rasters.txt: malformed raster value");
      }
    }
    rasters.emplace(toks[1], std::move(img));
  }
  for (auto* split : {&ds.train, &ds.test}) {
    for (Observation& o : *split) {
      const auto it = rasters.find(o.image_id);
      if (it == rasters.end()) {
        throw std::runtime_error(stem + "_rasters.txt: missing raster for " + o.image_id);
      }
      o.image = it->second;
    }
  }
  return ds;
}

}  // namespace poseadapt
