#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace unihand::geometry {

using Points3 = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
using Points2 = Eigen::Matrix<double, Eigen::Dynamic, 2, Eigen::RowMajor>;

/// Rigid motion acting on column vectors as p -> R p + t.
struct RigidTransform {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  static RigidTransform identity() { return {}; }
  static RigidTransform from_axis_angle(const Eigen::Vector3d& axis_angle,
                                        const Eigen::Vector3d& translation);
  /// Builds from 12 row-major values: R (9) then t (3).
  static RigidTransform from_row_major(std::span<const double, 12> values);

  Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return rotation * p + translation; }
  Eigen::Matrix4d homogeneous() const;
  std::array<double, 12> row_major() const;

  /// True when R is in SO(3) within `tol`.
  bool is_valid(double tol = 1e-9) const;
};

struct CameraIntrinsics {
  double focal_x = 300.0;
  double focal_y = 300.0;
  double principal_x = 128.0;
  double principal_y = 128.0;
  int width = 256;
  int height = 256;

  bool is_valid() const;
};

/// Binary H x W grid stored row-major; values are exactly 0 or 1.
class BinaryMask {
 public:
  BinaryMask(int height, int width);
  BinaryMask(int height, int width, std::vector<std::uint8_t> pixels);

  int height() const { return height_; }
  int width() const { return width_; }
  std::uint8_t at(int row, int col) const { return pixels_[index(row, col)]; }
  void set(int row, int col, bool on) { pixels_[index(row, col)] = on ? 1 : 0; }
  std::int64_t count() const;
  std::span<const std::uint8_t> pixels() const { return pixels_; }

 private:
  std::size_t index(int row, int col) const;

  int height_;
  int width_;
  std::vector<std::uint8_t> pixels_;
};

struct Projection {
  Points2 uv;               // normalized image coordinates
  std::vector<bool> valid;  // false behind the camera or outside [0,1]^2
};

/// Depth below which a point is treated as behind the camera.
inline constexpr double kMinDepth = 1e-6;

/// Returns the transform equivalent to applying `b` first, then `a`.
RigidTransform compose(const RigidTransform& a, const RigidTransform& b);
RigidTransform invert(const RigidTransform& t);

/// Map from the camera space of frame i into the camera space of the first
/// frame (the canonical space), given both cam-to-world extrinsics.
RigidTransform cam_to_canonical(const RigidTransform& cam_to_world_i,
                                const RigidTransform& cam_to_world_1);

Points3 apply_points(const RigidTransform& t, const Points3& points);

Projection project_normalized(const CameraIntrinsics& intr, const Points3& points);

/// Fraction of the full hand mask not covered by the visible mask.
/// Throws EmptyHandMask when the hand mask is empty and ShapeMismatch on
/// differing dimensions.
double occlusion_ratio(const BinaryMask& hand_mask, const BinaryMask& visible_mask);

Eigen::Matrix3d rotation_from_axis_angle(const Eigen::Vector3d& axis_angle);
Eigen::Vector3d axis_angle_from_rotation(const Eigen::Matrix3d& rotation);

}  // namespace unihand::geometry
