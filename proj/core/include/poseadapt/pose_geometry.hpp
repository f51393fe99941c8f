#pragma once

#include <Eigen/Core>

#include <utility>
#include <vector>

namespace poseadapt {

// Unit orientation quaternion. After normalize() the scalar part is
// nonnegative, which resolves the q/-q double cover once and for all;
// losses and metrics rely on that canonical sign.
struct Quaternion {
  double w = 1.0;
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
};

// 6-DoF camera pose: position in meters plus orientation quaternion,
// camera-to-world. A world point P maps into the camera frame as
// R(q)^T (P - t).
struct Pose {
  Eigen::Vector3d t = Eigen::Vector3d::Zero();
  Quaternion q;
};

// Intrinsic yaw-pitch-roll, radians. Yaw about the world up axis (+y),
// pitch about the camera x axis, roll about the camera optical axis (+z),
// applied in that order: R = Ry(yaw) * Rx(pitch) * Rz(roll). Roll is the
// in-image-plane rotation, which is what the rotation pretext task needs.
struct EulerAngles {
  double yaw = 0.0;    // (-pi, pi]
  double pitch = 0.0;  // [-pi/2, pi/2]
  double roll = 0.0;   // (-pi, pi]
};

// Median position error (meters) and orientation error (degrees).
struct ErrorPair {
  double position_error = 0.0;
  double orientation_error = 0.0;
};

// Unit norm with w >= 0. Throws std::invalid_argument("degenerate
// quaternion") when the input norm is below 1e-12.
Quaternion quat_normalize(const Quaternion& q);

// Hamilton product a*b, renormalized: the result rotates by b first,
// then by a (matching rotation-matrix composition R(a)R(b)).
Quaternion quat_multiply(const Quaternion& a, const Quaternion& b);

// Conjugate of a unit quaternion, canonicalized.
Quaternion quat_inverse(const Quaternion& q);

// Rotate a vector by q (camera-to-world direction: v_world = R(q) v).
Eigen::Vector3d rotate_vector(const Quaternion& q, const Eigen::Vector3d& v);

// Decompose into the convention above. Within 1e-6 of pitch = +-pi/2 the
// yaw/roll split is conventional (roll is set to 0); the flag reports it.
EulerAngles quat_to_euler(const Quaternion& q, bool* gimbal_lock = nullptr);
Quaternion euler_to_quat(const EulerAngles& e);

// Pose of a camera whose image was rotated by k degrees,
// k in {0, 90, 180, 270}: position unchanged, roll advanced by k.
Pose apply_image_rotation_to_pose(const Pose& p, int k_degrees);

// Pose of j expressed in the camera frame of i:
//   q_rel = q_i^-1 * q_j,  t_rel = R(q_i)^T (t_j - t_i).
Pose relative_pose(const Pose& p_i, const Pose& p_j);

// Inverse of relative_pose: compose_pose(p_i, relative_pose(p_i, p_j)) == p_j.
Pose compose_pose(const Pose& base, const Pose& rel);

// Geodesic angle 2*acos(|<a,b>|) in degrees, in [0, 180]; symmetric and
// invariant under sign flips of either argument.
double quat_angular_distance_deg(const Quaternion& a, const Quaternion& b);

// Medians of per-pair position and orientation errors, computed
// independently; even counts take the mean of the two central values.
// Throws on an empty list.
ErrorPair median_errors(const std::vector<std::pair<Pose, Pose>>& predicted_and_truth);

double median(std::vector<double> values);

}  // namespace poseadapt
