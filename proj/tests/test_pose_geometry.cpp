#include <doctest.h>

#include <array>
#include <cmath>

#include "poseadapt/pose_geometry.hpp"
#include "poseadapt/rng.hpp"

using namespace poseadapt;

namespace {

using Mat3 = std::array<std::array<double, 3>, 3>;

// Independent rotation-matrix oracle: R = (w^2 - |u|^2) I + 2 u u^T + 2 w [u]_x.
Mat3 quat_matrix_oracle(const Quaternion& q) {
  const double w = q.w, x = q.x, y = q.y, z = q.z;
  const double s = w * w - (x * x + y * y + z * z);
  Mat3 r{};
  const double u[3] = {x, y, z};
  const double cross[3][3] = {{0, -z, y}, {z, 0, -x}, {-y, x, 0}};
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      r[i][j] = (i == j ? s : 0.0) + 2.0 * u[i] * u[j] + 2.0 * w * cross[i][j];
    }
  }
  return r;
}

Mat3 matmul3(const Mat3& a, const Mat3& b) {
  Mat3 r{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) r[i][j] += a[i][k] * b[k][j];
  return r;
}

Mat3 axis_matrix(int axis, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  if (axis == 0) return Mat3{{{1, 0, 0}, {0, c, -s}, {0, s, c}}};
  if (axis == 1) return Mat3{{{c, 0, s}, {0, 1, 0}, {-s, 0, c}}};
  return Mat3{{{c, -s, 0}, {s, c, 0}, {0, 0, 1}}};
}

// Angle of the relative rotation between two matrices, radians.
double matrix_angle(const Mat3& a, const Mat3& b) {
  // trace(a^T b)
  double tr = 0.0;
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k) tr += a[k][i] * b[k][i];
  const double c = std::min(1.0, std::max(-1.0, (tr - 1.0) / 2.0));
  return std::acos(c);
}

Quaternion random_unit_quat(Rng& rng) {
  Quaternion q{rng.normal(), rng.normal(), rng.normal(), rng.normal()};
  return quat_normalize(q);
}

Pose random_pose(Rng& rng) {
  Pose p;
  p.t = Eigen::Vector3d(rng.uniform(-10, 10), rng.uniform(-10, 10), rng.uniform(-10, 10));
  p.q = random_unit_quat(rng);
  return p;
}

constexpr double kPi = 3.14159265358979323846;

}  // namespace

TEST_CASE("quat_normalize canonicalizes scale and sign") {
  const Quaternion a = quat_normalize(Quaternion{2, 0, 0, 0});
  CHECK(a.w == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(a.x == 0.0);

  const Quaternion b = quat_normalize(Quaternion{-1, 0, 0, 0});
  CHECK(b.w == doctest::Approx(1.0).epsilon(1e-15));

  CHECK_THROWS_WITH_AS(quat_normalize(Quaternion{0, 0, 0, 0}), "degenerate quaternion",
                       std::invalid_argument);

  Rng rng(7);
  for (int i = 0; i < 200; ++i) {
    const Quaternion q = random_unit_quat(rng);
    CHECK(q.w >= 0.0);
    CHECK(q.w * q.w + q.x * q.x + q.y * q.y + q.z * q.z == doctest::Approx(1.0).epsilon(1e-9));
    // idempotent
    const Quaternion q2 = quat_normalize(q);
    CHECK(q2.w == doctest::Approx(q.w).epsilon(1e-12));
    CHECK(q2.x == doctest::Approx(q.x).epsilon(1e-12));
  }
}

TEST_CASE("quat_multiply matches the rotation-matrix oracle") {
  // identity element
  Rng rng(13);
  const Quaternion q = random_unit_quat(rng);
  const Quaternion id{1, 0, 0, 0};
  const Quaternion iq = quat_multiply(id, q);
  CHECK(quat_angular_distance_deg(iq, q) == doctest::Approx(0.0).epsilon(1e-10));

  // two 90-degree x-rotations compose to a 180-degree x-rotation
  const double h = std::sqrt(0.5);
  const Quaternion rx90{h, h, 0, 0};
  const Quaternion composed = quat_multiply(rx90, rx90);
  CHECK(composed.w == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(composed.x == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(composed.y == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(composed.z == doctest::Approx(0.0).epsilon(1e-12));
  const Mat3 oracle = matmul3(quat_matrix_oracle(rx90), quat_matrix_oracle(rx90));
  CHECK(matrix_angle(oracle, quat_matrix_oracle(composed)) < 1e-9);

  // composition order: result rotates by b first, then a
  for (int i = 0; i < 100; ++i) {
    const Quaternion a = random_unit_quat(rng);
    const Quaternion b = random_unit_quat(rng);
    const Mat3 m = matmul3(quat_matrix_oracle(a), quat_matrix_oracle(b));
    CHECK(matrix_angle(m, quat_matrix_oracle(quat_multiply(a, b))) < 1e-9);
  }

  // inverse law
  for (int i = 0; i < 50; ++i) {
    const Quaternion a = random_unit_quat(rng);
    const Quaternion prod = quat_multiply(a, quat_inverse(a));
    CHECK(quat_angular_distance_deg(prod, id) < 1e-9);
  }
}

TEST_CASE("quat_inverse is the canonical conjugate") {
  const Quaternion id{1, 0, 0, 0};
  const Quaternion iid = quat_inverse(id);
  CHECK(iid.w == 1.0);

  const double h = std::sqrt(0.5);
  const Quaternion inv = quat_inverse(Quaternion{h, h, 0, 0});
  CHECK(inv.w == doctest::Approx(h).epsilon(1e-12));
  CHECK(inv.x == doctest::Approx(-h).epsilon(1e-12));

  Rng rng(17);
  for (int i = 0; i < 100; ++i) {
    const Quaternion q = random_unit_quat(rng);
    const Quaternion q2 = quat_inverse(quat_inverse(q));
    CHECK(quat_angular_distance_deg(q, q2) < 1e-9);
  }
}

TEST_CASE("euler conversion follows the yaw(y) pitch(x) roll(z) convention") {
  const EulerAngles zero = quat_to_euler(Quaternion{1, 0, 0, 0});
  CHECK(zero.yaw == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(zero.pitch == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(zero.roll == doctest::Approx(0.0).epsilon(1e-15));

  // pure roll of pi/2 is a rotation about the optical axis (+z)
  const Quaternion roll = euler_to_quat(EulerAngles{0, 0, kPi / 2});
  CHECK(roll.w == doctest::Approx(std::cos(kPi / 4)).epsilon(1e-12));
  CHECK(roll.x == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(roll.y == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(roll.z == doctest::Approx(std::sin(kPi / 4)).epsilon(1e-12));
  CHECK(matrix_angle(quat_matrix_oracle(roll), axis_matrix(2, kPi / 2)) < 1e-9);

  // full matrix oracle for a generic triple
  const EulerAngles e{0.4, -0.3, 1.1};
  const Mat3 oracle = matmul3(axis_matrix(1, e.yaw), matmul3(axis_matrix(0, e.pitch), axis_matrix(2, e.roll)));
  CHECK(matrix_angle(oracle, quat_matrix_oracle(euler_to_quat(e))) < 1e-9);
}

TEST_CASE("euler roundtrip on 1000 seeded quaternions") {
  Rng rng(2024);
  int checked = 0;
  double worst = 0.0;
  while (checked < 1000) {
    const Quaternion q = random_unit_quat(rng);
    const EulerAngles e = quat_to_euler(q);
    if (std::abs(e.pitch) > kPi / 2 - 1e-3) continue;  // skip near gimbal lock
    CHECK(e.yaw <= kPi);
    CHECK(e.yaw > -kPi);
    CHECK(std::abs(e.pitch) <= kPi / 2);
    const Quaternion back = euler_to_quat(e);
    const double rad = quat_angular_distance_deg(q, back) * kPi / 180.0;
    worst = std::max(worst, rad);
    ++checked;
  }
  CHECK(worst < 1e-7);
}

TEST_CASE("gimbal lock is flagged and still decomposes validly") {
  const Quaternion q = euler_to_quat(EulerAngles{0.7, kPi / 2, 0.0});
  bool locked = false;
  const EulerAngles e = quat_to_euler(q, &locked);
  CHECK(locked);
  CHECK(e.roll == 0.0);
  const Quaternion back = euler_to_quat(e);
  CHECK(quat_angular_distance_deg(q, back) < 1e-7);

  bool unlocked = true;
  quat_to_euler(euler_to_quat(EulerAngles{0.3, 0.2, 0.1}), &unlocked);
  CHECK_FALSE(unlocked);
}

TEST_CASE("apply_image_rotation_to_pose adjusts roll only") {
  Rng rng(31);
  const Pose p = random_pose(rng);

  const Pose same = apply_image_rotation_to_pose(p, 0);
  CHECK(quat_angular_distance_deg(same.q, p.q) < 1e-10);
  CHECK((same.t - p.t).norm() == 0.0);

  CHECK_THROWS_AS(apply_image_rotation_to_pose(p, 45), std::invalid_argument);
  CHECK_THROWS_AS(apply_image_rotation_to_pose(p, -90), std::invalid_argument);

  // identity orientation, k = 180: a pi rotation about the optical axis
  Pose identity;
  const Pose flipped = apply_image_rotation_to_pose(identity, 180);
  CHECK(matrix_angle(quat_matrix_oracle(flipped.q), axis_matrix(2, kPi)) < 1e-9);

  // four 90-degree steps recover the original orientation; position exact
  for (int trial = 0; trial < 50; ++trial) {
    Pose cur = random_pose(rng);
    const Pose original = cur;
    for (int i = 0; i < 4; ++i) {
      cur = apply_image_rotation_to_pose(cur, 90);
      CHECK((cur.t - original.t).norm() == 0.0);
    }
    CHECK(quat_angular_distance_deg(cur.q, original.q) < 1e-7);
  }

  // the map over k is a cyclic group of order 4: k then 360-k is identity
  for (int k : {90, 180, 270}) {
    const Pose a = apply_image_rotation_to_pose(p, k);
    const Pose b = apply_image_rotation_to_pose(a, 360 - k);
    CHECK(quat_angular_distance_deg(b.q, p.q) < 1e-7);
  }
}

TEST_CASE("relative_pose conventions and composition closure") {
  Rng rng(41);

  const Pose p = random_pose(rng);
  const Pose self = relative_pose(p, p);
  CHECK(self.t.norm() < 1e-12);
  CHECK(quat_angular_distance_deg(self.q, Quaternion{1, 0, 0, 0}) < 1e-9);

  // frame coincides with world
  Pose origin;
  const Pose pj = random_pose(rng);
  const Pose rel = relative_pose(origin, pj);
  CHECK((rel.t - pj.t).norm() < 1e-12);
  CHECK(quat_angular_distance_deg(rel.q, pj.q) < 1e-9);

  // reconstruction: compose_pose(p_i, relative_pose(p_i, p_j)) == p_j
  for (int i = 0; i < 1000; ++i) {
    const Pose a = random_pose(rng);
    const Pose b = random_pose(rng);
    const Pose back = compose_pose(a, relative_pose(a, b));
    CHECK((back.t - b.t).norm() < 1e-9);
    CHECK(quat_angular_distance_deg(back.q, b.q) < 1e-7);
  }

  // chaining rel(i,j) with rel(j,k) equals rel(i,k)
  for (int i = 0; i < 1000; ++i) {
    const Pose pi = random_pose(rng);
    const Pose pj2 = random_pose(rng);
    const Pose pk = random_pose(rng);
    const Pose chained = compose_pose(relative_pose(pi, pj2), relative_pose(pj2, pk));
    const Pose direct = relative_pose(pi, pk);
    CHECK((chained.t - direct.t).norm() < 1e-9);
    CHECK(quat_angular_distance_deg(chained.q, direct.q) < 1e-7);
  }
}

TEST_CASE("quat_angular_distance is a double-cover-invariant geodesic angle") {
  Rng rng(53);
  const Quaternion q = random_unit_quat(rng);
  CHECK(quat_angular_distance_deg(q, q) == 0.0);
  CHECK(quat_angular_distance_deg(q, Quaternion{-q.w, -q.x, -q.y, -q.z}) == 0.0);

  const Quaternion roll90 = euler_to_quat(EulerAngles{0, 0, kPi / 2});
  CHECK(quat_angular_distance_deg(Quaternion{1, 0, 0, 0}, roll90) == doctest::Approx(90.0).epsilon(1e-12));

  for (int i = 0; i < 300; ++i) {
    const Quaternion a = random_unit_quat(rng);
    const Quaternion b = random_unit_quat(rng);
    const Quaternion c = random_unit_quat(rng);
    const double ab = quat_angular_distance_deg(a, b);
    const double ba = quat_angular_distance_deg(b, a);
    CHECK(ab == doctest::Approx(ba).epsilon(1e-12));
    CHECK(ab >= 0.0);
    CHECK(ab <= 180.0);
    // triangle inequality on the sampled triple
    const double ac = quat_angular_distance_deg(a, c);
    const double cb = quat_angular_distance_deg(c, b);
    CHECK(ab <= ac + cb + 1e-6);
  }
}

TEST_CASE("median_errors") {
  Pose p;
  CHECK_THROWS_AS(median_errors({}), std::invalid_argument);

  const ErrorPair exact = median_errors({{p, p}});
  CHECK(exact.position_error == 0.0);
  CHECK(exact.orientation_error == 0.0);

  const auto offset_pose = [&](double d) {
    Pose o = p;
    o.t = Eigen::Vector3d(d, 0, 0);
    return o;
  };
  const ErrorPair odd = median_errors({{offset_pose(1), p}, {offset_pose(2), p}, {offset_pose(5), p}});
  CHECK(odd.position_error == 2.0);
  CHECK(odd.orientation_error == 0.0);

  const ErrorPair even = median_errors({{offset_pose(1), p}, {offset_pose(3), p}});
  CHECK(even.position_error == 2.0);

  const ErrorPair shift = median_errors({{offset_pose(1), p}, {offset_pose(1), p}, {offset_pose(1), p}});
  CHECK(shift.position_error == 1.0);
  CHECK(shift.orientation_error == 0.0);
}
