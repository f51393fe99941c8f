#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "poseadapt/pose_geometry.hpp"

namespace poseadapt {

struct PoseRecord {
  std::string image_id;
  Pose pose;          // quaternion normalized and sign-canonical on ingest
  std::string scene;  // trailing numeric scene token when present, else empty
};

// Relative pose as a 6D point: translation in meters, rotation as the
// minimal axis-angle vector (norm <= pi).
struct Pose6D {
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  Eigen::Vector3d rotation = Eigen::Vector3d::Zero();
};

struct ParseReport {
  std::vector<PoseRecord> records;
  std::vector<std::string> warnings;
};

// Cambridge-Landmarks-style pose annotation files and this project's own
// POSESYNTH files. Leading lines are skipped until the first line with
// >= 8 tokens whose last 7 all parse as reals; each subsequent line is
// `image_id tx ty tz qw qx qy qz [scene]`. Malformed interior lines abort
// in strict mode (default) or are skipped with a line-numbered warning.
// Quaternions off unit norm by more than 1e-2 produce a warning and are
// renormalized. Throws "unrecognized pose file" when nothing conforms.
ParseReport parse_pose_file(const std::string& path, bool strict = true);

// Canonical re-serialization; parse -> write -> parse is a fixed point.
void write_pose_records(const std::vector<PoseRecord>& records, const std::string& path);

Pose6D to_6d(const Pose& p);

// Anchors are every A-th record in file order; each record contributes
// to_6d(relative_pose(nearest anchor by position, record)).
std::vector<Pose6D> relative_cloud(const std::vector<PoseRecord>& records, int anchor_stride);

// Euclidean distance after scaling the rotation block by rho (meters per
// radian).
double pose6d_distance(const Pose6D& a, const Pose6D& b, double rho);

double mean_pairwise_distance(const std::vector<Pose6D>& cloud, double rho);

// Fraction of queries with at least one reference within distance tau.
// Exact brute force.
double coverage_fraction(const std::vector<Pose6D>& queries, const std::vector<Pose6D>& references,
                         double tau, double rho = 1.0);

struct OccupancyResult {
  double fraction = 0.0;
  std::int64_t occupied_cells = 0;
  std::int64_t total_cells = 0;
  double radius = 0.0;  // the radius actually used
};

// Voxel proxy for "fraction of the 6D ball the cloud occupies": cells of
// edge r/sqrt(6) (cell diagonal <= r) around the cloud centroid,
// restricted to cells intersecting the radius-r ball; the fraction is
// occupied / total. radius <= 0 selects the mean pairwise distance.
OccupancyResult occupancy_estimate(const std::vector<Pose6D>& cloud, double radius = 0.0,
                                   double rho = 1.0);

}  // namespace poseadapt
