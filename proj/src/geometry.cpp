#include "unihand/geometry.hpp"

#include <cmath>
#include <string>

#include "unihand/error.hpp"

namespace unihand::geometry {

RigidTransform RigidTransform::from_axis_angle(const Eigen::Vector3d& axis_angle,
                                               const Eigen::Vector3d& translation) {
  return {rotation_from_axis_angle(axis_angle), translation};
}

RigidTransform RigidTransform::from_row_major(std::span<const double, 12> values) {
  RigidTransform t;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) t.rotation(r, c) = values[3 * r + c];
    t.translation(r) = values[9 + r];
  }
  return t;
}

Eigen::Matrix4d RigidTransform::homogeneous() const {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.topLeftCorner<3, 3>() = rotation;
  m.topRightCorner<3, 1>() = translation;
  return m;
}

std::array<double, 12> RigidTransform::row_major() const {
  std::array<double, 12> out{};
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) out[3 * r + c] = rotation(r, c);
    out[9 + r] = translation(r);
  }
  return out;
}

bool RigidTransform::is_valid(double tol) const {
  if (!rotation.allFinite() || !translation.allFinite()) return false;
  const double ortho = (rotation.transpose() * rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  return ortho <= tol && std::abs(rotation.determinant() - 1.0) <= tol;
}

bool CameraIntrinsics::is_valid() const {
  return focal_x > 0 && focal_y > 0 && width > 0 && height > 0 && principal_x >= 0 &&
         principal_x <= width && principal_y >= 0 && principal_y <= height;
}

BinaryMask::BinaryMask(int height, int width)
    : height_(height), width_(width), pixels_(static_cast<std::size_t>(height) * width, 0) {
  if (height <= 0 || width <= 0) throw ShapeMismatch("mask dimensions must be positive");
}

BinaryMask::BinaryMask(int height, int width, std::vector<std::uint8_t> pixels)
    : height_(height), width_(width), pixels_(std::move(pixels)) {
  if (height <= 0 || width <= 0 || pixels_.size() != static_cast<std::size_t>(height) * width) {
    throw ShapeMismatch("mask payload does not match its dimensions");
  }
  for (auto& p : pixels_) {
    if (p > 1) throw ShapeMismatch("mask values must be 0 or 1");
  }
}

std::int64_t BinaryMask::count() const {
  std::int64_t n = 0;
  for (auto p : pixels_) n += p;
  return n;
}

std::size_t BinaryMask::index(int row, int col) const {
  return static_cast<std::size_t>(row) * width_ + col;
}

RigidTransform compose(const RigidTransform& a, const RigidTransform& b) {
  return {a.rotation * b.rotation, a.rotation * b.translation + a.translation};
}

RigidTransform invert(const RigidTransform& t) {
  const Eigen::Matrix3d rt = t.rotation.transpose();
  return {rt, -rt * t.translation};
}

RigidTransform cam_to_canonical(const RigidTransform& cam_to_world_i,
                                const RigidTransform& cam_to_world_1) {
  if (cam_to_world_i.rotation == cam_to_world_1.rotation && cam_to_world_i.translation == cam_to_world_1.translation) {
    return RigidTransform::identity();
  }
  return compose(invert(cam_to_world_1), cam_to_world_i);
}

Points3 apply_points(const RigidTransform& t, const Points3& points) {
  Points3 out = points * t.rotation.transpose();
  out.rowwise() += t.translation.transpose();
  return out;
}

Projection project_normalized(const CameraIntrinsics& intr, const Points3& points) {
  Projection proj;
  proj.uv.resize(points.rows(), 2);
  proj.valid.assign(static_cast<std::size_t>(points.rows()), false);
  for (Eigen::Index k = 0; k < points.rows(); ++k) {
    const double x = points(k, 0), y = points(k, 1), z = points(k, 2);
    if (!(z > kMinDepth)) {
      proj.uv.row(k).setConstant(std::nan(""));
      continue;
    }
    const double u = (intr.focal_x * x / z + intr.principal_x) / intr.width;
    const double v = (intr.focal_y * y / z + intr.principal_y) / intr.height;
    proj.uv(k, 0) = u;
    proj.uv(k, 1) = v;
    proj.valid[static_cast<std::size_t>(k)] = u >= 0.0 && u <= 1.0 && v >= 0.0 && v <= 1.0;
  }
  return proj;
}

double occlusion_ratio(const BinaryMask& hand_mask, const BinaryMask& visible_mask) {
  if (hand_mask.height() != visible_mask.height() || hand_mask.width() != visible_mask.width()) {
    throw ShapeMismatch("occlusion_ratio: mask dimensions differ");
  }
  const auto hand = hand_mask.pixels();
  const auto vis = visible_mask.pixels();
  std::int64_t hand_count = 0;
  std::int64_t both = 0;
  for (std::size_t i = 0; i < hand.size(); ++i) {
    hand_count += hand[i];
    both += hand[i] & vis[i];
  }
  if (hand_count == 0) throw EmptyHandMask("occlusion_ratio: hand mask is empty");
  return static_cast<double>(hand_count - both) / static_cast<double>(hand_count);
}

Eigen::Matrix3d rotation_from_axis_angle(const Eigen::Vector3d& axis_angle) {
  const double angle = axis_angle.norm();
  if (angle < 1e-12) return Eigen::Matrix3d::Identity();
  return Eigen::AngleAxisd(angle, axis_angle / angle).toRotationMatrix();
}

Eigen::Vector3d axis_angle_from_rotation(const Eigen::Matrix3d& rotation) {
  const Eigen::AngleAxisd aa(rotation);
  return aa.axis() * aa.angle();
}

}  // namespace unihand::geometry
