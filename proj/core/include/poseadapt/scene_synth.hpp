#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "poseadapt/pose_geometry.hpp"

namespace poseadapt {

// Procedural scene: a fixed landmark field observed from a box of camera
// poses, standing in for one captured location. Two configs with distinct
// centers produce datasets whose pose ranges do not overlap, which is the
// dataset shift this laboratory studies.
struct SceneConfig {
  std::uint64_t seed = 0;
  int n_landmarks = 32;
  int n_train = 448;
  int n_test = 96;
  Eigen::Vector3d pose_center = Eigen::Vector3d::Zero();
  Eigen::Vector3d pose_extent = Eigen::Vector3d(5.0, 5.0, 2.5);
  double orientation_spread_deg = 25.0;
  int image_size = 16;  // G, pixels per side
  double focal = 9.0;
  bool pixel_jitter = false;  // shift splat centers by <= 1 px (crop stand-in)
  int scene_id = 0;
};

// A synthetic "image": G x G raster of splatted landmark projections,
// its ground-truth pose, and the scene label.
struct Observation {
  std::vector<double> image;  // G*G, row-major from the top-left, values in [0, 1]
  Pose pose;
  int scene_id = 0;
  std::string image_id;
};

struct SceneDataset {
  std::vector<Observation> train;
  std::vector<Observation> test;
  std::vector<Eigen::Vector3d> landmarks;
  SceneConfig config;
};

// Deterministic in config (per-purpose RNG substreams keyed by seed).
// Landmarks are sampled uniformly in a box of half the pose extent around
// the center; cameras inside center +- extent, oriented toward the
// landmark centroid with a random perturbation up to orientation_spread.
// Throws "degenerate scene geometry" when more than 10% of the generated
// frames see no landmark at all.
SceneDataset generate_scene(const SceneConfig& config);

// Pinhole projection of each landmark, splatted as a small Gaussian bump;
// landmarks behind the camera are skipped; raster normalized to max 1.
std::vector<double> render_observation(const Pose& pose,
                                       const std::vector<Eigen::Vector3d>& landmarks,
                                       const SceneConfig& config);

// Exact array rotation by a multiple of 90 degrees. With the row-major
// top-left convention, k = 90 sends pixel (r, c) to (c, G-1-r), which is
// what rolling the camera by +90 degrees does to the rendered image.
std::vector<double> rotate_raster(const std::vector<double>& image, int grid, int k_degrees);

// POSESYNTH v1 on-disk form: <stem>_train.txt and <stem>_test.txt carry
// one `image_id tx ty tz qw qx qy qz scene_id` line per observation;
// <stem>_rasters.txt is the sidecar blob with config, landmarks and
// rasters keyed by image_id.
void save_dataset(const SceneDataset& ds, const std::string& stem);
SceneDataset load_dataset(const std::string& stem);

}  // namespace poseadapt
