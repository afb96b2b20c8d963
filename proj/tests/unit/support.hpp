#pragma once

#include <cmath>
#include <filesystem>
#include <string>

#include <Eigen/Core>
#include <torch/torch.h>

#include "unihand/geometry.hpp"
#include "unihand/hand_model.hpp"
#include "unihand/random.hpp"

namespace testing {

inline Eigen::Vector3d random_vec(unihand::Rng& rng, double scale) {
  return {rng.uniform(-scale, scale), rng.uniform(-scale, scale), rng.uniform(-scale, scale)};
}

inline unihand::geometry::RigidTransform random_rigid(unihand::Rng& rng) {
  return unihand::geometry::RigidTransform::from_axis_angle(random_vec(rng, 2.0), random_vec(rng, 1.0));
}

inline Eigen::Matrix4d homogeneous(const unihand::geometry::RigidTransform& t) {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) m(r, c) = t.rotation(r, c);
    m(r, 3) = t.translation(r);
  }
  return m;
}

inline unihand::hand::HandPose random_pose(unihand::Rng& rng) {
  unihand::hand::HandPose p;
  for (int j = 0; j < unihand::hand::kNumArticulated; ++j) {
    for (int c = 0; c < 3; ++c) p.theta(j, c) = rng.uniform(-0.6, 0.6);
  }
  for (int k = 0; k < unihand::hand::kNumShape; ++k) p.beta(k) = rng.uniform(-1.0, 1.0);
  p.phi = random_vec(rng, 1.5);
  p.gamma = random_vec(rng, 0.3);
  return p;
}

inline double max_abs(const torch::Tensor& t) { return t.abs().max().item<double>(); }

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("unihand_unit_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testing
