#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <torch/torch.h>

#include "unihand/geometry.hpp"

namespace unihand::hand {

inline constexpr int kNumJoints = 21;
inline constexpr int kNumArticulated = 15;
inline constexpr int kNumShape = 10;
/// Flattened frame layout: theta (45) | beta (10) | phi (3) | gamma (3).
inline constexpr int kPoseDim = 3 * kNumArticulated + kNumShape + 3 + 3;
inline constexpr int kThetaOffset = 0;
inline constexpr int kBetaOffset = 3 * kNumArticulated;
inline constexpr int kPhiOffset = kBetaOffset + kNumShape;
inline constexpr int kGammaOffset = kPhiOffset + 3;

using Joints3D = Eigen::Matrix<double, kNumJoints, 3, Eigen::RowMajor>;
using ShapeBlock = Eigen::Matrix<double, 3, kNumShape>;

/// Per-frame hand parameters: articulated joint rotations (axis-angle,
/// radians), shape coefficients, global orientation and root translation (m).
struct HandPose {
  Eigen::Matrix<double, kNumArticulated, 3, Eigen::RowMajor> theta =
      Eigen::Matrix<double, kNumArticulated, 3, Eigen::RowMajor>::Zero();
  Eigen::Matrix<double, kNumShape, 1> beta = Eigen::Matrix<double, kNumShape, 1>::Zero();
  Eigen::Vector3d phi = Eigen::Vector3d::Zero();
  Eigen::Vector3d gamma = Eigen::Vector3d::Zero();

  std::array<double, kPoseDim> to_vector() const;
  static HandPose from_vector(std::span<const double> values);
  bool is_finite() const;
};

/// Fixed kinematic tree standing in for the licensed parametric hand model.
/// Joint order: wrist, then thumb, index, middle, ring, pinky with four
/// joints each (three articulated joints followed by the tip).
struct HandSkeleton {
  std::array<int, kNumJoints> parent{};
  Joints3D rest_offsets = Joints3D::Zero();
  std::array<ShapeBlock, kNumJoints> shape_basis{};
  /// Index into theta for articulated joints, -1 otherwise.
  std::array<int, kNumJoints> articulated_map{};

  static const HandSkeleton& standard();
  /// Reads a JSON file with the same field names as this struct.
  static HandSkeleton load(const std::filesystem::path& path);

  /// Left-hand counterpart: offsets and basis reflected through x = 0.
  HandSkeleton mirrored() const;

  /// Throws ShapeMismatch when the tree or bone lengths are malformed.
  void validate() const;
};

Eigen::Matrix3d rodrigues(const Eigen::Vector3d& axis_angle);

/// Batched axis-angle to rotation, [..., 3] -> [..., 3, 3]. Uses a Taylor
/// expansion below |v| = 1e-8 so gradients stay finite at the origin.
torch::Tensor rodrigues(const torch::Tensor& axis_angle);

/// Differentiable forward kinematics over flattened poses.
class KinematicModel {
 public:
  explicit KinematicModel(HandSkeleton skeleton = HandSkeleton::standard());

  /// [..., kPoseDim] -> [..., 21, 3], in the pose's dtype.
  torch::Tensor forward(const torch::Tensor& pose) const;
  const HandSkeleton& skeleton() const { return skeleton_; }

 private:
  HandSkeleton skeleton_;
  torch::Tensor rest_offsets_;  // [21, 3]
  torch::Tensor shape_basis_;   // [21, 3, 10]
};

Joints3D forward_kinematics(const HandPose& pose, const HandSkeleton& skeleton = HandSkeleton::standard());

/// Mirror through the x = 0 plane. Pair with HandSkeleton::mirrored() to
/// move between left- and right-hand conventions.
HandPose flip_lr(const HandPose& pose);
/// Mirror normalized 2D keypoints about u = 0.5.
geometry::Points2 flip_lr_2d(const geometry::Points2& keypoints);

/// Rigidly moves a pose: joints of the result equal t applied to the joints
/// of the input.
HandPose transform_pose(const geometry::RigidTransform& t, const HandPose& pose);

torch::Tensor poses_to_tensor(std::span<const HandPose> poses, torch::Dtype dtype = torch::kFloat32);
std::vector<HandPose> poses_from_tensor(const torch::Tensor& poses);

}  // namespace unihand::hand
