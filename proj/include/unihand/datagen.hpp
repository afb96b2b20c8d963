#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "unihand/geometry.hpp"
#include "unihand/hand_model.hpp"
#include "unihand/perceptron.hpp"

namespace unihand::datagen {

enum class CameraMode { static_camera, dynamic };
enum class OcclusionRegime { clean, bursty };

CameraMode parse_camera_mode(std::string_view name);
std::string_view to_string(CameraMode mode);
OcclusionRegime parse_occlusion_regime(std::string_view name);
std::string_view to_string(OcclusionRegime regime);

/// Condition streams carried by a scene, in the order used for masks.
enum class Stream { mano, keypoints2d, keypoints3d, vision };
inline constexpr int kNumStreams = 4;

using MotionSequence = std::vector<hand::HandPose>;
using StreamMasks = std::array<std::vector<std::uint8_t>, kNumStreams>;

struct GenSpec {
  std::uint64_t seed = 0;
  int64_t frames = 48;
  CameraMode camera_mode = CameraMode::static_camera;
  int64_t keyframes = 4;
  OcclusionRegime occlusion = OcclusionRegime::clean;
  /// Missing-condition bursts: count uniform in [0, max_bursts] per stream,
  /// length uniform in [burst_min, burst_max] frames.
  int64_t max_bursts = 2;
  int64_t burst_min = 2;
  int64_t burst_max = 8;
  int max_camera_retries = 16;

  /// Throws ShapeMismatch when N < 8, K < 2 or the burst range is empty.
  void validate() const;
};

void to_json(nlohmann::json& j, const GenSpec& s);
void from_json(const nlohmann::json& j, GenSpec& s);

struct SyntheticScene {
  std::uint64_t seed = 0;
  CameraMode camera_mode = CameraMode::static_camera;
  OcclusionRegime regime = OcclusionRegime::clean;
  std::vector<int64_t> frame_ids;
  MotionSequence motion;  // canonical space
  std::vector<geometry::RigidTransform> extrinsics;  // cam_to_world
  geometry::CameraIntrinsics intrinsics;
  std::vector<double> occlusion;  // r_occ per frame
  StreamMasks masks;
  std::vector<perceptron::JointFlags> visibility;

  int64_t frames() const { return static_cast<int64_t>(motion.size()); }
  double mean_occlusion() const;
  /// Throws ShapeMismatch on inconsistent lengths or r_occ outside [0,1].
  void validate() const;
};

/// Interpolating spline with zero second derivative at both ends.
class NaturalCubicSpline {
 public:
  NaturalCubicSpline(std::vector<double> knots, std::vector<double> values);

  double operator()(double x) const;
  /// max |s''|, attained at a knot since s'' is piecewise linear.
  double max_second_derivative() const;
  const std::vector<double>& moments() const { return moments_; }

 private:
  std::vector<double> knots_;
  std::vector<double> values_;
  std::vector<double> moments_;
};

/// Knot positions of K keyframes spread evenly over frames 0..N-1.
std::vector<double> keyframe_times(int64_t frames, int64_t keyframes);

/// Per-DOF natural cubic spline through keyframe poses, sampled at integer
/// frames. No clipping.
MotionSequence interpolate_keyframes(const std::vector<hand::HandPose>& keys, int64_t frames);

/// Plausible range of one articulated rotation component (radians).
struct Range {
  double lo;
  double hi;
};
Range theta_range(int articulated, int component);

MotionSequence gen_motion(const GenSpec& spec);

/// Camera-to-world extrinsics. Dynamic trajectories are redrawn from fresh
/// sub-seeds until the hand centroid stays in [0.1,0.9]^2 for at least 95% of
/// frames; throws HandLeavesFrustum after max_camera_retries.
std::vector<geometry::RigidTransform> gen_camera(const GenSpec& spec, const MotionSequence& motion,
                                                 const geometry::CameraIntrinsics& intrinsics = {});

/// Fraction of frames whose hand centroid projects inside [0.1,0.9]^2.
double centroid_in_frustum_fraction(const MotionSequence& motion,
                                    const std::vector<geometry::RigidTransform>& extrinsics,
                                    const geometry::CameraIntrinsics& intrinsics);

SyntheticScene gen_scene(const GenSpec& spec);

struct ConditionSet {
  std::vector<perceptron::Keypoints2D> keypoints2d;  // canonical projection, [0,1]^2 when visible
  std::vector<hand::Joints3D> keypoints3d;           // canonical space
  MotionSequence mano;                               // noisy canonical pose estimates
  StreamMasks masks;
  std::vector<perceptron::JointFlags> visibility;
  std::vector<hand::Joints3D> camera_joints;  // per-frame camera-space joints
  perceptron::FeatureGrid vision;
};

ConditionSet render_conditions(const SyntheticScene& scene, const perceptron::FeatureProvider& provider);
ConditionSet render_conditions(const SyntheticScene& scene);

/// Frames [start, start + length), re-expressed in the camera space of
/// `start`.
SyntheticScene crop_scene(const SyntheticScene& scene, int64_t start, int64_t length);

/// Index 0..3 of [0,25), [25,50), [50,75), [75,100] percent.
int occlusion_bucket(double r_occ);
std::string_view bucket_label(int bucket);

void save_scene(const std::filesystem::path& path, const SyntheticScene& scene);
SyntheticScene load_scene(const std::filesystem::path& path);

struct SplitRange {
  std::uint64_t first;
  std::uint64_t last;  // inclusive
};
inline constexpr SplitRange kTrainSeeds{0, 899};
inline constexpr SplitRange kTestSeeds{900, 999};

/// Generates one scene per seed into `out_dir` (scene_<seed>.uhnd) and writes
/// manifest.json. `threads` > 1 generates seeds concurrently.
nlohmann::json generate_split(const std::vector<std::uint64_t>& seeds, const GenSpec& base,
                              const std::filesystem::path& out_dir, int threads = 1);

struct ManifestEntry {
  std::uint64_t seed;
  std::filesystem::path file;
  int64_t frames;
  double mean_occlusion;
};
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& dir);

}  // namespace unihand::datagen
