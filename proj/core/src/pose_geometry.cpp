#include "poseadapt/pose_geometry.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace poseadapt {

namespace {

constexpr double kPi = 3.14159265358979323846;

double wrap_angle(double a) {
  // into (-pi, pi]
  a = std::fmod(a, 2.0 * kPi);
  if (a <= -kPi) a += 2.0 * kPi;
  if (a > kPi) a -= 2.0 * kPi;
  return a;
}

}  // namespace

Quaternion quat_normalize(const Quaternion& q) {
  const double n = std::sqrt(q.w * q.w + q.x * q.x + q.y * q.y + q.z * q.z);
  if (n <= 1e-12) {
    throw std::invalid_argument("degenerate quaternion");
  }
  Quaternion r{q.w / n, q.x / n, q.y / n, q.z / n};
  if (r.w < 0.0 || (r.w == 0.0 && (r.x < 0.0 || (r.x == 0.0 && (r.y < 0.0 || (r.y == 0.0 && r.z < 0.0)))))) {
    r.w = -r.w;
    r.x = -r.x;
    r.y = -r.y;
    r.z = -r.z;
  }
  return r;
}

Quaternion quat_multiply(const Quaternion& a, const Quaternion& b) {
  Quaternion r;
  r.w = a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z;
  r.x = a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y;
  r.y = a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x;
  r.z = a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w;
  return quat_normalize(r);
}

Quaternion quat_inverse(const Quaternion& q) {
  return quat_normalize(Quaternion{q.w, -q.x, -q.y, -q.z});
}

Eigen::Vector3d rotate_vector(const Quaternion& q, const Eigen::Vector3d& v) {
  // v' = v + 2 u x (u x v + w v) with u = (x, y, z)
  const Eigen::Vector3d u(q.x, q.y, q.z);
  const Eigen::Vector3d t = 2.0 * u.cross(v);
  return v + q.w * t + u.cross(t);
}

EulerAngles quat_to_euler(const Quaternion& qin, bool* gimbal_lock) {
  const Quaternion q = quat_normalize(qin);
  // Rotation matrix entries needed for R = Ry(yaw) Rx(pitch) Rz(roll):
  //   R[0][2] =  sin(yaw) cos(pitch)
  //   R[1][0] =  cos(pitch) sin(roll)
  //   R[1][1] =  cos(pitch) cos(roll)
  //   R[1][2] = -sin(pitch)
  //   R[2][2] =  cos(yaw) cos(pitch)
  const double r02 = 2.0 * (q.x * q.z + q.w * q.y);
  const double r10 = 2.0 * (q.x * q.y + q.w * q.z);
  const double r11 = 1.0 - 2.0 * (q.x * q.x + q.z * q.z);
  const double r12 = 2.0 * (q.y * q.z - q.w * q.x);
  const double r22 = 1.0 - 2.0 * (q.x * q.x + q.y * q.y);

  EulerAngles e;
  const double sp = std::clamp(-r12, -1.0, 1.0);
  e.pitch = std::asin(sp);

  const bool locked = std::abs(e.pitch) > kPi / 2.0 - 1e-6;
  if (gimbal_lock != nullptr) *gimbal_lock = locked;

  if (!locked) {
    e.yaw = std::atan2(r02, r22);
    e.roll = std::atan2(r10, r11);
  } else {
    // cos(pitch) ~ 0: only yaw -/+ roll is determined. Put it all in yaw.
    //   R[0][0] = cos(yaw mp roll), R[0][1] = +-sin(yaw mp roll) for pitch = +-pi/2.
    const double r00 = 1.0 - 2.0 * (q.y * q.y + q.z * q.z);
    const double r01 = 2.0 * (q.x * q.y - q.w * q.z);
    e.roll = 0.0;
    e.yaw = (sp > 0.0) ? std::atan2(r01, r00) : std::atan2(-r01, r00);
  }
  e.yaw = wrap_angle(e.yaw);
  e.roll = wrap_angle(e.roll);
  return e;
}

Quaternion euler_to_quat(const EulerAngles& e) {
  const double cy = std::cos(e.yaw * 0.5), sy = std::sin(e.yaw * 0.5);
  const double cp = std::cos(e.pitch * 0.5), sp = std::sin(e.pitch * 0.5);
  const double cr = std::cos(e.roll * 0.5), sr = std::sin(e.roll * 0.5);
  const Quaternion qy{cy, 0.0, sy, 0.0};
  const Quaternion qx{cp, sp, 0.0, 0.0};
  const Quaternion qz{cr, 0.0, 0.0, sr};
  return quat_multiply(quat_multiply(qy, qx), qz);
}

Pose apply_image_rotation_to_pose(const Pose& p, int k_degrees) {
  if (k_degrees != 0 && k_degrees != 90 && k_degrees != 180 && k_degrees != 270) {
    throw std::invalid_argument("rotation class must be one of {0, 90, 180, 270} degrees");
  }
  if (k_degrees == 0) {
    Pose r = p;
    r.q = quat_normalize(r.q);
    return r;
  }
  EulerAngles e = quat_to_euler(p.q);
  e.roll = wrap_angle(e.roll + static_cast<double>(k_degrees) * kPi / 180.0);
  Pose r;
  r.t = p.t;
  r.q = euler_to_quat(e);
  return r;
}

Pose relative_pose(const Pose& p_i, const Pose& p_j) {
  const Quaternion qi_inv = quat_inverse(p_i.q);
  Pose rel;
  rel.q = quat_multiply(qi_inv, p_j.q);
  rel.t = rotate_vector(qi_inv, p_j.t - p_i.t);
  return rel;
}

Pose compose_pose(const Pose& base, const Pose& rel) {
  Pose p;
  p.q = quat_multiply(base.q, rel.q);
  p.t = base.t + rotate_vector(base.q, rel.t);
  return p;
}

double quat_angular_distance_deg(const Quaternion& a, const Quaternion& b) {
  const Quaternion qa = quat_normalize(a);
  const Quaternion qb = quat_normalize(b);
  const double dot = qa.w * qb.w + qa.x * qb.x + qa.y * qb.y + qa.z * qb.z;
  const double c = std::clamp(std::abs(dot), 0.0, 1.0);
  return 2.0 * std::acos(c) * 180.0 / kPi;
}

double median(std::vector<double> values) {
  if (values.empty()) {
    throw std::invalid_argument("median of empty list");
  }
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  if (n % 2 == 1) return values[n / 2];
  return 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

ErrorPair median_errors(const std::vector<std::pair<Pose, Pose>>& predicted_and_truth) {
  if (predicted_and_truth.empty()) {
    throw std::invalid_argument("median_errors: empty list");
  }
  std::vector<double> pos;
  std::vector<double> orient;
  pos.reserve(predicted_and_truth.size());
  orient.reserve(predicted_and_truth.size());
  for (const auto& [pred, truth] : predicted_and_truth) {
    pos.push_back((pred.t - truth.t).norm());
    orient.push_back(quat_angular_distance_deg(pred.q, truth.q));
  }
  return ErrorPair{median(std::move(pos)), median(std::move(orient))};
}

}  // namespace poseadapt
