#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "poseadapt/scene_synth.hpp"

using namespace poseadapt;

namespace {

SceneConfig small_config(std::uint64_t seed) {
  SceneConfig c;
  c.seed = seed;
  c.n_landmarks = 24;
  c.n_train = 120;
  c.n_test = 40;
  c.image_size = 16;
  c.focal = 9.0;
  return c;
}

double raster_sum(const std::vector<double>& img) {
  return std::accumulate(img.begin(), img.end(), 0.0);
}

// Two-sample Kolmogorov-Smirnov statistic.
double ks_statistic(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  double d = 0.0;
  std::size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] <= b[j]) {
      ++i;
    } else {
      ++j;
    }
    const double fa = static_cast<double>(i) / static_cast<double>(a.size());
    const double fb = static_cast<double>(j) / static_cast<double>(b.size());
    d = std::max(d, std::abs(fa - fb));
  }
  return d;
}

}  // namespace

TEST_CASE("generate_scene honors counts and is deterministic") {
  const SceneConfig cfg = small_config(42);
  const SceneDataset a = generate_scene(cfg);
  CHECK(a.train.size() == 120);
  CHECK(a.test.size() == 40);
  CHECK(a.landmarks.size() == 24);

  const SceneDataset b = generate_scene(cfg);
  REQUIRE(b.train.size() == a.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    CHECK(a.train[i].image == b.train[i].image);  // bit-identical rasters
    CHECK(a.train[i].pose.t == b.train[i].pose.t);
    CHECK(a.train[i].pose.q.w == b.train[i].pose.q.w);
    CHECK(a.train[i].pose.q.z == b.train[i].pose.q.z);
  }

  for (const Observation& o : a.train) {
    CHECK(*std::max_element(o.image.begin(), o.image.end()) <= 1.0);
    CHECK(*std::min_element(o.image.begin(), o.image.end()) >= 0.0);
  }
}

TEST_CASE("scenes with distant centers have disjoint position ranges") {
  SceneConfig a = small_config(1);
  SceneConfig b = small_config(2);
  b.pose_center = Eigen::Vector3d(100, 0, 0);
  const SceneDataset da = generate_scene(a);
  const SceneDataset db = generate_scene(b);
  double min_dist = 1e30;
  for (const Observation& oa : da.train) {
    for (const Observation& ob : db.train) {
      min_dist = std::min(min_dist, (oa.pose.t - ob.pose.t).norm());
    }
  }
  CHECK(min_dist > 50.0);
}

TEST_CASE("train and test pose distributions overlap within a scene") {
  const SceneDataset ds = generate_scene(small_config(77));
  for (int axis = 0; axis < 3; ++axis) {
    std::vector<double> train_axis, test_axis;
    for (const auto& o : ds.train) train_axis.push_back(o.pose.t[axis]);
    for (const auto& o : ds.test) test_axis.push_back(o.pose.t[axis]);
    const double d = ks_statistic(train_axis, test_axis);
    // critical value for alpha = 0.001 is ~1.95 * sqrt((n+m)/(n*m)) ~ 0.36
    CHECK(d < 0.36);
  }
}

TEST_CASE("render_observation: pinhole basics") {
  SceneConfig cfg = small_config(3);
  Pose cam;  // at origin, identity orientation: optical axis = +z
  const std::vector<Eigen::Vector3d> on_axis{{0.0, 0.0, 5.0}};
  const auto img = render_observation(cam, on_axis, cfg);
  const int g = cfg.image_size;

  // intensity centroid at the raster center
  double mass = 0, cr = 0, cc = 0;
  for (int r = 0; r < g; ++r) {
    for (int c = 0; c < g; ++c) {
      const double v = img[static_cast<std::size_t>(r) * g + c];
      mass += v;
      cr += v * r;
      cc += v * c;
    }
  }
  CHECK(mass > 0.0);
  CHECK(cr / mass == doctest::Approx((g - 1) / 2.0).epsilon(1e-9));
  CHECK(cc / mass == doctest::Approx((g - 1) / 2.0).epsilon(1e-9));
  const auto argmax = std::distance(img.begin(), std::max_element(img.begin(), img.end()));
  const int amr = static_cast<int>(argmax) / g, amc = static_cast<int>(argmax) % g;
  CHECK(amr >= g / 2 - 1);
  CHECK(amr <= g / 2);
  CHECK(amc >= g / 2 - 1);
  CHECK(amc <= g / 2);

  // everything behind the camera renders to a zero raster
  const std::vector<Eigen::Vector3d> behind{{0.0, 0.0, -5.0}, {1.0, 1.0, -2.0}};
  const auto dark = render_observation(cam, behind, cfg);
  CHECK(raster_sum(dark) == 0.0);
}

TEST_CASE("rotate_raster is the exact array rotation") {
  const int g = 8;
  std::vector<double> img(g * g, 0.0);
  img[0] = 1.0;  // pixel (0, 0)

  CHECK(rotate_raster(img, g, 0) == img);

  const auto r90 = rotate_raster(img, g, 90);
  CHECK(r90[static_cast<std::size_t>(0) * g + (g - 1)] == 1.0);  // (0, 0) -> (0, G-1)
  CHECK(raster_sum(r90) == 1.0);

  auto four = img;
  for (int i = 0; i < 4; ++i) four = rotate_raster(four, g, 90);
  CHECK(four == img);

  const auto r180 = rotate_raster(img, g, 180);
  CHECK(r180[static_cast<std::size_t>(g - 1) * g + (g - 1)] == 1.0);
  CHECK(rotate_raster(rotate_raster(img, g, 270), g, 90) == img);

  CHECK_THROWS_AS(rotate_raster(img, g, 45), std::invalid_argument);
  CHECK_THROWS_AS(rotate_raster(img, g - 1, 90), std::invalid_argument);
}

TEST_CASE("raster rotation is consistent with pose roll adjustment") {
  const SceneDataset ds = generate_scene(small_config(9));
  int checked = 0;
  for (std::size_t i = 0; i < ds.train.size() && checked < 12; i += 11, ++checked) {
    const Observation& obs = ds.train[i];
    const double mass = raster_sum(obs.image);
    REQUIRE(mass > 0.0);
    for (int k : {90, 180, 270}) {
      const auto rotated_raster = rotate_raster(obs.image, ds.config.image_size, k);
      const Pose rotated_pose = apply_image_rotation_to_pose(obs.pose, k);
      const auto rerendered = render_observation(rotated_pose, ds.landmarks, ds.config);
      double l1 = 0.0;
      for (std::size_t j = 0; j < rotated_raster.size(); ++j) {
        l1 += std::abs(rotated_raster[j] - rerendered[j]);
      }
      CHECK(l1 < 0.05 * mass);
    }
  }
  CHECK(checked == 12);
}

TEST_CASE("degenerate scene geometry is rejected") {
  SceneConfig cfg = small_config(5);
  cfg.focal = 1e6;  // effectively zero field of view: no landmark lands on the grid
  cfg.n_train = 30;
  cfg.n_test = 10;
  CHECK_THROWS_WITH_AS(generate_scene(cfg),
                       "degenerate scene geometry: over 10% of frames see no landmark",
                       std::runtime_error);
}

TEST_CASE("config validation") {
  SceneConfig cfg = small_config(1);
  cfg.image_size = 15;
  CHECK_THROWS_AS(generate_scene(cfg), std::invalid_argument);
  cfg = small_config(1);
  cfg.n_train = 0;
  CHECK_THROWS_AS(generate_scene(cfg), std::invalid_argument);
  cfg = small_config(1);
  cfg.pose_extent = Eigen::Vector3d(1, -1, 1);
  CHECK_THROWS_AS(generate_scene(cfg), std::invalid_argument);
}

TEST_CASE("POSESYNTH save/load roundtrip") {
  SceneConfig cfg = small_config(21);
  cfg.n_train = 40;
  cfg.n_test = 10;
  cfg.scene_id = 3;
  const SceneDataset ds = generate_scene(cfg);
  const std::string stem = "/tmp/poseadapt_test_scene";
  save_dataset(ds, stem);
  const SceneDataset back = load_dataset(stem);

  REQUIRE(back.train.size() == ds.train.size());
  REQUIRE(back.test.size() == ds.test.size());
  REQUIRE(back.landmarks.size() == ds.landmarks.size());
  CHECK(back.config.seed == ds.config.seed);
  CHECK(back.config.image_size == ds.config.image_size);
  CHECK(back.config.focal == ds.config.focal);
  CHECK(back.config.scene_id == 3);
  for (std::size_t i = 0; i < ds.train.size(); ++i) {
    CHECK(back.train[i].image_id == ds.train[i].image_id);
    CHECK(back.train[i].scene_id == 3);
    CHECK(back.train[i].image == ds.train[i].image);
    CHECK(back.train[i].pose.t == ds.train[i].pose.t);
    CHECK(back.train[i].pose.q.w == ds.train[i].pose.q.w);
    CHECK(back.train[i].pose.q.x == ds.train[i].pose.q.x);
  }
  for (const char* suffix : {"_train.txt", "_test.txt", "_rasters.txt"}) {
    std::remove((stem + suffix).c_str());
  }
}
