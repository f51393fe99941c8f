#include "poseadapt/pose_analysis.hpp"

#include <array>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <unordered_set>

#include "poseadapt/textio.hpp"

namespace poseadapt {

namespace {

bool last_seven_are_reals(const std::vector<std::string>& toks) {
  if (toks.size() < 8) return false;
  double v;
  for (std::size_t i = toks.size() - 7; i < toks.size(); ++i) {
    if (!parse_double_strict(toks[i], v)) return false;
  }
  return true;
}

}  // namespace

ParseReport parse_pose_file(const std::string& path, bool strict) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);

  ParseReport report;
  std::string line;
  int line_no = 0;
  bool in_data = false;
  while (std::getline(in, line)) {
    ++line_no;
    const auto toks = split_whitespace(line);
    if (toks.empty()) continue;
    if (!in_data) {
      if (!last_seven_are_reals(toks)) continue;  // still in the header
      in_data = true;
    }

    const auto malformed = [&](const std::string& why) {
      const std::string msg = path + ":" + std::to_string(line_no) + ": " + why;
      if (strict) throw std::runtime_error(msg);
      report.warnings.push_back(msg);
    };

    if (toks.size() < 8) {
      malformed("expected at least 8 tokens, got " + std::to_string(toks.size()));
      continue;
    }
    double vals[7];
    bool ok = true;
    for (int i = 0; i < 7 && ok; ++i) ok = parse_double_strict(toks[1 + i], vals[i]);
    if (!ok) {
      malformed("pose tokens do not parse as reals");
      continue;
    }
    PoseRecord rec;
    rec.image_id = toks[0];
    rec.pose.t = Eigen::Vector3d(vals[0], vals[1], vals[2]);
    const Quaternion raw{vals[3], vals[4], vals[5], vals[6]};
    const double norm = std::sqrt(raw.w * raw.w + raw.x * raw.x + raw.y * raw.y + raw.z * raw.z);
    if (norm <= 1e-12) {
      malformed("degenerate quaternion");
      continue;
    }
    if (std::abs(norm - 1.0) > 1e-2) {
      report.warnings.push_back(path + ":" + std::to_string(line_no) +
                                ": quaternion norm " + format_double(norm) + ", renormalized");
    }
    rec.pose.q = quat_normalize(raw);
    if (toks.size() >= 9) {
      double scene_val;
      if (parse_double_strict(toks[8], scene_val)) rec.scene = toks[8];
    }
    report.records.push_back(std::move(rec));
  }
  if (!in_data) {
    throw std::runtime_error(path + ": unrecognized pose file (no conforming lines)");
  }
  return report;
}

void write_pose_records(const std::vector<PoseRecord>& records, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "POSESYNTH v1\n";
  for (const PoseRecord& r : records) {
    out << r.image_id << ' ' << format_double(r.pose.t.x()) << ' ' << format_double(r.pose.t.y())
        << ' ' << format_double(r.pose.t.z()) << ' ' << format_double(r.pose.q.w) << ' '
        << format_double(r.pose.q.x) << ' ' << format_double(r.pose.q.y) << ' '
        << format_double(r.pose.q.z);
    if (!r.scene.empty()) out << ' ' << r.scene;
    out << '\n';
  }
}

Pose6D to_6d(const Pose& p) {
  Pose6D out;
  out.translation = p.t;
  const Quaternion q = quat_normalize(p.q);
  const double vnorm = std::sqrt(q.x * q.x + q.y * q.y + q.z * q.z);
  if (vnorm > 1e-12) {
    const double angle = 2.0 * std::atan2(vnorm, q.w);  // w >= 0 keeps angle in [0, pi]
    out.rotation = Eigen::Vector3d(q.x, q.y, q.z) * (angle / vnorm);
  }
  return out;
}

std::vector<Pose6D> relative_cloud(const std::vector<PoseRecord>& records, int anchor_stride) {
  if (records.empty()) throw std::invalid_argument("relative_cloud: no records");
  if (anchor_stride < 1) throw std::invalid_argument("relative_cloud: anchor stride must be >= 1");
  std::vector<const Pose*> anchors;
  for (std::size_t i = 0; i < records.size(); i += static_cast<std::size_t>(anchor_stride)) {
    anchors.push_back(&records[i].pose);
  }
  std::vector<Pose6D> cloud;
  cloud.reserve(records.size());
  for (const PoseRecord& r : records) {
    const Pose* best = anchors.front();
    double best_d = (best->t - r.pose.t).squaredNorm();
    for (const Pose* a : anchors) {
      const double d = (a->t - r.pose.t).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = a;
      }
    }
    cloud.push_back(to_6d(relative_pose(*best, r.pose)));
  }
  return cloud;
}

double pose6d_distance(const Pose6D& a, const Pose6D& b, double rho) {
  const double dt = (a.translation - b.translation).squaredNorm();
  const double dr = (a.rotation - b.rotation).squaredNorm();
  return std::sqrt(dt + rho * rho * dr);
}

double mean_pairwise_distance(const std::vector<Pose6D>& cloud, double rho) {
  if (cloud.size() < 2) throw std::invalid_argument("mean_pairwise_distance: need >= 2 points");
  double sum = 0.0;
  std::int64_t count = 0;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    for (std::size_t j = i + 1; j < cloud.size(); ++j) {
      sum += pose6d_distance(cloud[i], cloud[j], rho);
      ++count;
    }
  }
  return sum / static_cast<double>(count);
}

double coverage_fraction(const std::vector<Pose6D>& queries, const std::vector<Pose6D>& references,
                         double tau, double rho) {
  if (queries.empty() || references.empty()) {
    throw std::invalid_argument("coverage_fraction: empty cloud");
  }
  if (tau <= 0.0) throw std::invalid_argument("coverage_fraction: tau must be > 0");
  std::int64_t covered = 0;
  for (const Pose6D& q : queries) {
    for (const Pose6D& r : references) {
      if (pose6d_distance(q, r, rho) <= tau) {
        ++covered;
        break;
      }
    }
  }
  return static_cast<double>(covered) / static_cast<double>(queries.size());
}

OccupancyResult occupancy_estimate(const std::vector<Pose6D>& cloud, double radius, double rho) {
  if (cloud.size() < 2) throw std::invalid_argument("occupancy_estimate: need >= 2 points");
  OccupancyResult result;
  result.radius = radius > 0.0 ? radius : mean_pairwise_distance(cloud, rho);
  if (result.radius <= 0.0) {
    throw std::invalid_argument("occupancy_estimate: degenerate cloud (zero radius)");
  }
  const double r = result.radius;
  const double edge = r / std::sqrt(6.0);

  std::array<double, 6> centroid{};
  for (const Pose6D& p : cloud) {
    for (int d = 0; d < 3; ++d) {
      centroid[static_cast<std::size_t>(d)] += p.translation[d];
      centroid[static_cast<std::size_t>(d + 3)] += rho * p.rotation[d];
    }
  }
  for (double& c : centroid) c /= static_cast<double>(cloud.size());

  // Cell k spans [k*edge, (k+1)*edge) per axis relative to the centroid;
  // its distance to the centroid along one axis is edge * max(0, k, -k-1).
  const auto cell_in_ball = [&](const std::array<int, 6>& k) {
    double d2 = 0.0;
    for (int d = 0; d < 6; ++d) {
      const double m = edge * std::max({0, k[static_cast<std::size_t>(d)],
                                        -k[static_cast<std::size_t>(d)] - 1});
      d2 += m * m;
    }
    return d2 <= r * r;
  };

  constexpr int kLo = -3, kHi = 2;  // edge = r/sqrt(6) puts the ball within these indices
  const auto pack = [](const std::array<int, 6>& k) {
    std::uint32_t v = 0;
    for (int d = 0; d < 6; ++d) v = v * 6 + static_cast<std::uint32_t>(k[static_cast<std::size_t>(d)] - kLo);
    return v;
  };

  std::array<int, 6> k{};
  std::int64_t total = 0;
  std::unordered_set<std::uint32_t> in_ball;
  for (k[0] = kLo; k[0] <= kHi; ++k[0])
    for (k[1] = kLo; k[1] <= kHi; ++k[1])
      for (k[2] = kLo; k[2] <= kHi; ++k[2])
        for (k[3] = kLo; k[3] <= kHi; ++k[3])
          for (k[4] = kLo; k[4] <= kHi; ++k[4])
            for (k[5] = kLo; k[5] <= kHi; ++k[5]) {
              if (cell_in_ball(k)) {
                ++total;
                in_ball.insert(pack(k));
              }
            }

  std::unordered_set<std::uint32_t> occupied;
  for (const Pose6D& p : cloud) {
    std::array<double, 6> x{};
    for (int d = 0; d < 3; ++d) {
      x[static_cast<std::size_t>(d)] = p.translation[d];
      x[static_cast<std::size_t>(d + 3)] = rho * p.rotation[d];
    }
    std::array<int, 6> idx{};
    bool within = true;
    for (int d = 0; d < 6; ++d) {
      const double rel = x[static_cast<std::size_t>(d)] - centroid[static_cast<std::size_t>(d)];
      const int ki = static_cast<int>(std::floor(rel / edge));
      if (ki < kLo || ki > kHi) {
        within = false;
        break;
      }
      idx[static_cast<std::size_t>(d)] = ki;
    }
    if (!within) continue;
    const std::uint32_t packed = pack(idx);
    if (in_ball.count(packed)) occupied.insert(packed);
  }

  result.total_cells = total;
  result.occupied_cells = static_cast<std::int64_t>(occupied.size());
  result.fraction = total > 0 ? static_cast<double>(result.occupied_cells) / static_cast<double>(total) : 0.0;
  return result;
}

}  // namespace poseadapt
