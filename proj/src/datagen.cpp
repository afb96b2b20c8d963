#include "unihand/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <thread>

#include <Eigen/SVD>

#include "unihand/archive.hpp"
#include "unihand/error.hpp"
#include "unihand/random.hpp"

namespace unihand::datagen {
namespace {

// Sub-seed streams.
constexpr std::uint64_t kMotionStream = 1;
constexpr std::uint64_t kOcclusionStream = 2;
constexpr std::uint64_t kMaskStream = 3;
constexpr std::uint64_t kWorldStream = 4;
constexpr std::uint64_t kNoiseStream = 7;
constexpr std::uint64_t kCameraStream = 100;

constexpr double kFrustumLo = 0.1;
constexpr double kFrustumHi = 0.9;
constexpr double kFrustumFraction = 0.95;

using geometry::RigidTransform;

std::vector<double> track(const std::vector<double>& knots, const std::vector<double>& values, int64_t frames) {
  NaturalCubicSpline spline(knots, values);
  std::vector<double> out(static_cast<std::size_t>(frames));
  for (int64_t i = 0; i < frames; ++i) out[static_cast<std::size_t>(i)] = spline(static_cast<double>(i));
  return out;
}

std::vector<double> draw_occlusion(const GenSpec& spec) {
  std::vector<double> r(static_cast<std::size_t>(spec.frames), 0.0);
  if (spec.occlusion == OcclusionRegime::clean) return r;
  Rng rng(derive_seed(spec.seed, kOcclusionStream));
  const double level = rng.uniform();
  const int64_t keys = std::max<int64_t>(2, spec.frames / 12);
  std::vector<double> values(static_cast<std::size_t>(keys));
  for (auto& v : values) v = std::clamp(level + rng.uniform(-0.2, 0.2), 0.0, 1.0);
  const auto samples = track(keyframe_times(spec.frames, keys), values, spec.frames);
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = std::clamp(samples[i], 0.0, 1.0);
  return r;
}

StreamMasks draw_masks(const GenSpec& spec, const std::vector<double>& occlusion) {
  StreamMasks masks;
  for (auto& m : masks) m.assign(static_cast<std::size_t>(spec.frames), 1);
  if (spec.occlusion == OcclusionRegime::clean) return masks;
  Rng rng(derive_seed(spec.seed, kMaskStream));
  for (auto& m : masks) {
    const int64_t bursts = rng.integer(0, spec.max_bursts);
    for (int64_t b = 0; b < bursts; ++b) {
      const int64_t length = rng.integer(spec.burst_min, spec.burst_max);
      const int64_t start = rng.integer(0, spec.frames - 1);
      for (int64_t i = start; i < std::min(spec.frames, start + length); ++i) m[static_cast<std::size_t>(i)] = 0;
    }
  }
  // The 2D detector gives up on nearly fully occluded frames.
  auto& m2d = masks[static_cast<int>(Stream::keypoints2d)];
  for (std::size_t i = 0; i < occlusion.size(); ++i) {
    if (occlusion[i] > 0.85) m2d[i] = 0;
  }
  return masks;
}

std::vector<perceptron::JointFlags> draw_visibility(const GenSpec& spec, const std::vector<double>& occlusion) {
  std::vector<perceptron::JointFlags> vis(static_cast<std::size_t>(spec.frames));
  Rng rng(derive_seed(spec.seed, kOcclusionStream + 1000));
  for (std::size_t i = 0; i < vis.size(); ++i) {
    for (auto& flag : vis[i]) flag = rng.uniform() >= occlusion[i] ? 1 : 0;
  }
  return vis;
}

Eigen::Vector3d centroid(const hand::Joints3D& joints) { return joints.colwise().mean().transpose(); }

RigidTransform orthonormalized(RigidTransform t) {
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(t.rotation, Eigen::ComputeFullU | Eigen::ComputeFullV);
  t.rotation = svd.matrixU() * svd.matrixV().transpose();
  return t;
}

}  // namespace

CameraMode parse_camera_mode(std::string_view name) {
  if (name == "static") return CameraMode::static_camera;
  if (name == "dynamic") return CameraMode::dynamic;
  throw UnknownKind("unknown camera mode: " + std::string(name));
}

std::string_view to_string(CameraMode mode) { return mode == CameraMode::static_camera ? "static" : "dynamic"; }

OcclusionRegime parse_occlusion_regime(std::string_view name) {
  if (name == "clean") return OcclusionRegime::clean;
  if (name == "bursty") return OcclusionRegime::bursty;
  throw UnknownKind("unknown occlusion regime: " + std::string(name));
}

std::string_view to_string(OcclusionRegime regime) { return regime == OcclusionRegime::clean ? "clean" : "bursty"; }

void GenSpec::validate() const {
  if (frames < 8) throw ShapeMismatch("GenSpec: at least 8 frames required");
  if (keyframes < 2) throw ShapeMismatch("GenSpec: at least 2 keyframes required");
  if (burst_min < 1 || burst_max < burst_min || max_bursts < 0) throw ShapeMismatch("GenSpec: bad burst range");
  if (max_camera_retries < 1) throw ShapeMismatch("GenSpec: max_camera_retries must be positive");
}

void to_json(nlohmann::json& j, const GenSpec& s) {
  j = {{"seed", s.seed},
       {"frames", s.frames},
       {"camera_mode", std::string(to_string(s.camera_mode))},
       {"keyframes", s.keyframes},
       {"occlusion", std::string(to_string(s.occlusion))},
       {"max_bursts", s.max_bursts},
       {"burst_min", s.burst_min},
       {"burst_max", s.burst_max},
       {"max_camera_retries", s.max_camera_retries}};
}

void from_json(const nlohmann::json& j, GenSpec& s) {
  s.seed = j.value("seed", s.seed);
  s.frames = j.value("frames", s.frames);
  if (j.contains("camera_mode")) s.camera_mode = parse_camera_mode(j.at("camera_mode").get<std::string>());
  s.keyframes = j.value("keyframes", s.keyframes);
  if (j.contains("occlusion")) s.occlusion = parse_occlusion_regime(j.at("occlusion").get<std::string>());
  s.max_bursts = j.value("max_bursts", s.max_bursts);
  s.burst_min = j.value("burst_min", s.burst_min);
  s.burst_max = j.value("burst_max", s.burst_max);
  s.max_camera_retries = j.value("max_camera_retries", s.max_camera_retries);
}

double SyntheticScene::mean_occlusion() const {
  if (occlusion.empty()) return 0.0;
  double sum = 0.0;
  for (double r : occlusion) sum += r;
  return sum / static_cast<double>(occlusion.size());
}

void SyntheticScene::validate() const {
  const auto n = motion.size();
  if (n == 0) throw ShapeMismatch("scene has no frames");
  if (frame_ids.size() != n || extrinsics.size() != n || occlusion.size() != n || visibility.size() != n) {
    throw ShapeMismatch("scene fields disagree on frame count");
  }
  for (const auto& m : masks) {
    if (m.size() != n) throw ShapeMismatch("scene mask length differs from frame count");
  }
  for (double r : occlusion) {
    if (!(r >= 0.0 && r <= 1.0)) throw ShapeMismatch("occlusion ratio outside [0,1]");
  }
}

NaturalCubicSpline::NaturalCubicSpline(std::vector<double> knots, std::vector<double> values)
    : knots_(std::move(knots)), values_(std::move(values)) {
  const auto n = knots_.size();
  if (n < 2 || values_.size() != n) throw ShapeMismatch("spline needs at least two matching knots and values");
  for (std::size_t i = 1; i < n; ++i) {
    if (!(knots_[i] > knots_[i - 1])) throw ShapeMismatch("spline knots must increase");
  }
  moments_.assign(n, 0.0);
  if (n == 2) return;
  // Tridiagonal system for interior second derivatives (Thomas algorithm).
  const std::size_t m = n - 2;
  std::vector<double> diag(m), upper(m), rhs(m);
  for (std::size_t k = 0; k < m; ++k) {
    const std::size_t i = k + 1;
    const double h0 = knots_[i] - knots_[i - 1];
    const double h1 = knots_[i + 1] - knots_[i];
    diag[k] = 2.0 * (h0 + h1);
    upper[k] = h1;
    rhs[k] = 6.0 * ((values_[i + 1] - values_[i]) / h1 - (values_[i] - values_[i - 1]) / h0);
  }
  for (std::size_t k = 1; k < m; ++k) {
    const double lower = knots_[k + 1] - knots_[k];
    const double w = lower / diag[k - 1];
    diag[k] -= w * upper[k - 1];
    rhs[k] -= w * rhs[k - 1];
  }
  for (std::size_t k = m; k-- > 0;) {
    double v = rhs[k];
    if (k + 1 < m) v -= upper[k] * moments_[k + 2];
    moments_[k + 1] = v / diag[k];
  }
}

double NaturalCubicSpline::operator()(double x) const {
  const auto it = std::upper_bound(knots_.begin(), knots_.end(), x);
  std::size_t i = it == knots_.begin() ? 0 : static_cast<std::size_t>(it - knots_.begin()) - 1;
  i = std::min(i, knots_.size() - 2);
  const double h = knots_[i + 1] - knots_[i];
  const double t = (x - knots_[i]) / h;
  const double m0 = moments_[i];
  const double m1 = moments_[i + 1];
  // Linear part plus the moment correction, which vanishes at both knots.
  const double linear = values_[i] + t * (values_[i + 1] - values_[i]);
  const double correction = h * h / 6.0 * ((1.0 - t) * ((1.0 - t) * (1.0 - t) - 1.0) * m0 + t * (t * t - 1.0) * m1);
  return linear + correction;
}

double NaturalCubicSpline::max_second_derivative() const {
  double best = 0.0;
  for (double m : moments_) best = std::max(best, std::abs(m));
  return best;
}

std::vector<double> keyframe_times(int64_t frames, int64_t keyframes) {
  std::vector<double> t(static_cast<std::size_t>(keyframes));
  for (int64_t k = 0; k < keyframes; ++k) {
    t[static_cast<std::size_t>(k)] = static_cast<double>(k) * static_cast<double>(frames - 1) / static_cast<double>(keyframes - 1);
  }
  return t;
}

MotionSequence interpolate_keyframes(const std::vector<hand::HandPose>& keys, int64_t frames) {
  if (keys.size() < 2) throw ShapeMismatch("interpolation needs at least two keyframes");
  const auto knots = keyframe_times(frames, static_cast<int64_t>(keys.size()));
  std::vector<std::array<double, hand::kPoseDim>> key_vectors;
  key_vectors.reserve(keys.size());
  for (const auto& k : keys) key_vectors.push_back(k.to_vector());

  std::vector<std::array<double, hand::kPoseDim>> out(static_cast<std::size_t>(frames));
  std::vector<double> values(keys.size());
  for (int d = 0; d < hand::kPoseDim; ++d) {
    for (std::size_t k = 0; k < keys.size(); ++k) values[k] = key_vectors[k][static_cast<std::size_t>(d)];
    const auto samples = track(knots, values, frames);
    for (std::size_t i = 0; i < samples.size(); ++i) out[i][static_cast<std::size_t>(d)] = samples[i];
  }
  MotionSequence motion;
  motion.reserve(out.size());
  for (const auto& v : out) motion.push_back(hand::HandPose::from_vector(v));
  return motion;
}

Range theta_range(int articulated, int component) {
  const int finger = articulated / 3;
  const int level = articulated % 3;
  if (finger == 0) {
    static constexpr Range thumb[3] = {{-0.3, 0.8}, {-0.4, 0.4}, {-0.5, 0.5}};
    return thumb[component];
  }
  if (level == 0) {
    static constexpr Range base[3] = {{-0.2, 1.4}, {-0.1, 0.1}, {-0.3, 0.3}};
    return base[component];
  }
  if (component == 0) return level == 1 ? Range{0.0, 1.6} : Range{0.0, 1.2};
  return {-0.05, 0.05};
}

MotionSequence gen_motion(const GenSpec& spec) {
  spec.validate();
  Rng rng(derive_seed(spec.seed, kMotionStream));
  hand::HandPose base;
  for (int k = 0; k < hand::kNumShape; ++k) base.beta(k) = std::clamp(rng.normal() * 0.7, -2.0, 2.0);
  base.phi = Eigen::Vector3d(rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), rng.uniform(-0.6, 0.6));
  base.gamma = Eigen::Vector3d(rng.uniform(-0.05, 0.05), rng.uniform(-0.12, -0.06), rng.uniform(0.45, 0.6));

  std::vector<hand::HandPose> keys(static_cast<std::size_t>(spec.keyframes), base);
  for (auto& key : keys) {
    const double curl = rng.uniform();
    for (int a = 0; a < hand::kNumArticulated; ++a) {
      for (int c = 0; c < 3; ++c) {
        const Range r = theta_range(a, c);
        double u = rng.uniform();
        if (a >= 3 && c == 0) u = 0.6 * curl + 0.4 * u;
        key.theta(a, c) = r.lo + (r.hi - r.lo) * (0.15 + 0.7 * u);
      }
    }
    for (int c = 0; c < 3; ++c) key.phi(c) += rng.uniform(-0.25, 0.25);
    for (int c = 0; c < 3; ++c) key.gamma(c) += rng.uniform(-0.03, 0.03);
  }

  auto motion = interpolate_keyframes(keys, spec.frames);
  for (auto& pose : motion) {
    pose.beta = base.beta;
    for (int a = 0; a < hand::kNumArticulated; ++a) {
      for (int c = 0; c < 3; ++c) {
        const Range r = theta_range(a, c);
        pose.theta(a, c) = std::clamp(pose.theta(a, c), r.lo, r.hi);
      }
    }
  }
  return motion;
}

double centroid_in_frustum_fraction(const MotionSequence& motion, const std::vector<RigidTransform>& extrinsics,
                                    const geometry::CameraIntrinsics& intrinsics) {
  if (motion.size() != extrinsics.size() || motion.empty()) throw ShapeMismatch("motion and extrinsics differ in length");
  int inside = 0;
  for (std::size_t i = 0; i < motion.size(); ++i) {
    const auto to_cam = geometry::invert(geometry::cam_to_canonical(extrinsics[i], extrinsics[0]));
    geometry::Points3 c(1, 3);
    c.row(0) = to_cam.apply(centroid(hand::forward_kinematics(motion[i]))).transpose();
    const auto proj = geometry::project_normalized(intrinsics, c);
    const double u = proj.uv(0, 0), v = proj.uv(0, 1);
    if (proj.valid[0] && u >= kFrustumLo && u <= kFrustumHi && v >= kFrustumLo && v <= kFrustumHi) ++inside;
  }
  return static_cast<double>(inside) / static_cast<double>(motion.size());
}

std::vector<RigidTransform> gen_camera(const GenSpec& spec, const MotionSequence& motion,
                                       const geometry::CameraIntrinsics& intrinsics) {
  spec.validate();
  if (static_cast<int64_t>(motion.size()) != spec.frames) throw ShapeMismatch("motion length differs from spec");
  Rng world_rng(derive_seed(spec.seed, kWorldStream));
  const Eigen::Vector3d world_aa(world_rng.uniform(-1.0, 1.0), world_rng.uniform(-1.0, 1.0), world_rng.uniform(-1.0, 1.0));
  const Eigen::Vector3d world_t(world_rng.uniform(-1.0, 1.0), world_rng.uniform(-1.0, 1.0), world_rng.uniform(0.5, 1.5));
  const auto first = RigidTransform::from_axis_angle(world_aa, world_t);
  const auto n = static_cast<std::size_t>(spec.frames);

  if (spec.camera_mode == CameraMode::static_camera) return std::vector<RigidTransform>(n, first);

  const auto knots = keyframe_times(spec.frames, spec.keyframes);
  for (int attempt = 0; attempt < spec.max_camera_retries; ++attempt) {
    Rng rng(derive_seed(spec.seed, kCameraStream + static_cast<std::uint64_t>(attempt)));
    // Six DOF tracks (axis-angle, translation) relative to the first camera.
    std::array<std::vector<double>, 6> tracks;
    for (int d = 0; d < 6; ++d) {
      const double amplitude = d < 3 ? 0.12 : 0.03;
      std::vector<double> values(static_cast<std::size_t>(spec.keyframes));
      values[0] = 0.0;
      for (std::size_t k = 1; k < values.size(); ++k) values[k] = rng.uniform(-amplitude, amplitude);
      tracks[static_cast<std::size_t>(d)] = track(knots, values, spec.frames);
    }
    std::vector<RigidTransform> extrinsics(n, first);
    for (std::size_t i = 1; i < n; ++i) {
      const Eigen::Vector3d aa(tracks[0][i], tracks[1][i], tracks[2][i]);
      const Eigen::Vector3d t(tracks[3][i], tracks[4][i], tracks[5][i]);
      extrinsics[i] = geometry::compose(first, RigidTransform::from_axis_angle(aa, t));
    }
    if (centroid_in_frustum_fraction(motion, extrinsics, intrinsics) >= kFrustumFraction) return extrinsics;
  }
  throw HandLeavesFrustum("no camera trajectory kept the hand in view for seed " + std::to_string(spec.seed));
}

SyntheticScene gen_scene(const GenSpec& spec) {
  spec.validate();
  SyntheticScene s;
  s.seed = spec.seed;
  s.camera_mode = spec.camera_mode;
  s.regime = spec.occlusion;
  s.frame_ids.resize(static_cast<std::size_t>(spec.frames));
  for (int64_t i = 0; i < spec.frames; ++i) s.frame_ids[static_cast<std::size_t>(i)] = i;
  s.motion = gen_motion(spec);
  s.extrinsics = gen_camera(spec, s.motion, s.intrinsics);
  s.occlusion = draw_occlusion(spec);
  s.masks = draw_masks(spec, s.occlusion);
  s.visibility = draw_visibility(spec, s.occlusion);
  return s;
}

ConditionSet render_conditions(const SyntheticScene& scene, const perceptron::FeatureProvider& provider) {
  scene.validate();
  const auto n = static_cast<std::size_t>(scene.frames());
  const bool noisy = scene.regime == OcclusionRegime::bursty;
  ConditionSet out;
  out.masks = scene.masks;
  out.keypoints2d.resize(n);
  out.keypoints3d.resize(n);
  out.camera_joints.resize(n);
  out.visibility.resize(n);
  out.mano = scene.motion;
  std::vector<perceptron::Keypoints2D> camera_uv(n);
  std::vector<perceptron::JointFlags> camera_vis(n);

  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(derive_seed(scene.seed, kNoiseStream), static_cast<std::uint64_t>(scene.frame_ids[i])));
    const double r = scene.occlusion[i];
    const auto to_canonical = geometry::cam_to_canonical(scene.extrinsics[i], scene.extrinsics[0]);
    const geometry::Points3 canonical_joints = hand::forward_kinematics(scene.motion[i]);
    const geometry::Points3 cam = geometry::apply_points(geometry::invert(to_canonical), canonical_joints);
    out.camera_joints[i] = cam;
    out.keypoints3d[i] = geometry::apply_points(to_canonical, cam);

    const auto canonical_proj = geometry::project_normalized(scene.intrinsics, out.keypoints3d[i]);
    const auto camera_proj = geometry::project_normalized(scene.intrinsics, cam);
    for (int j = 0; j < hand::kNumJoints; ++j) {
      const bool occluded = scene.visibility[i][static_cast<std::size_t>(j)] == 0;
      Eigen::RowVector2d uv = canonical_proj.uv.row(j);
      if (!uv.allFinite()) uv.setConstant(0.5);
      if (noisy) {
        const double sigma = occluded ? 0.02 : 0.004;
        uv += Eigen::RowVector2d(rng.normal(0.0, sigma), rng.normal(0.0, sigma));
      }
      const bool in_image = uv.minCoeff() >= 0.0 && uv.maxCoeff() <= 1.0;
      out.keypoints2d[i].row(j) = uv;
      out.visibility[i][static_cast<std::size_t>(j)] = (!occluded && in_image) ? 1 : 0;

      const auto jj = static_cast<std::size_t>(j);
      camera_vis[i][jj] = (!occluded && camera_proj.valid[jj]) ? 1 : 0;
      camera_uv[i].row(j) = camera_vis[i][jj] ? Eigen::RowVector2d(camera_proj.uv.row(j)) : Eigen::RowVector2d(0.0, 0.0);
    }

    if (noisy) {
      auto& m = out.mano[i];
      const double scale = 1.0 + 2.0 * r;
      for (int a = 0; a < hand::kNumArticulated; ++a) {
        for (int c = 0; c < 3; ++c) m.theta(a, c) += rng.normal(0.0, 0.03 * scale);
      }
      for (int k = 0; k < hand::kNumShape; ++k) m.beta(k) += rng.normal(0.0, 0.05);
      for (int c = 0; c < 3; ++c) m.phi(c) += rng.normal(0.0, 0.02 * scale);
      for (int c = 0; c < 3; ++c) m.gamma(c) += rng.normal(0.0, 0.005 * scale);
    }
  }

  perceptron::FrameMeta meta{scene.seed, scene.frame_ids};
  out.vision = provider.features(meta, camera_uv, camera_vis);
  return out;
}

ConditionSet render_conditions(const SyntheticScene& scene) {
  return render_conditions(scene, perceptron::SyntheticFeatureProvider());
}

SyntheticScene crop_scene(const SyntheticScene& scene, int64_t start, int64_t length) {
  scene.validate();
  if (start < 0 || length < 1 || start + length > scene.frames()) throw ShapeMismatch("crop window outside the scene");
  auto slice = [&](const auto& v) {
    using V = std::decay_t<decltype(v)>;
    return V(v.begin() + start, v.begin() + start + length);
  };
  SyntheticScene out;
  out.seed = scene.seed;
  out.camera_mode = scene.camera_mode;
  out.regime = scene.regime;
  out.intrinsics = scene.intrinsics;
  out.frame_ids = slice(scene.frame_ids);
  out.extrinsics = slice(scene.extrinsics);
  out.occlusion = slice(scene.occlusion);
  out.visibility = slice(scene.visibility);
  for (int s = 0; s < kNumStreams; ++s) out.masks[static_cast<std::size_t>(s)] = slice(scene.masks[static_cast<std::size_t>(s)]);
  out.motion = slice(scene.motion);

  const auto to_old = geometry::cam_to_canonical(scene.extrinsics[static_cast<std::size_t>(start)], scene.extrinsics[0]);
  const bool identity = to_old.rotation == Eigen::Matrix3d::Identity() && to_old.translation.isZero(0.0);
  if (!identity) {
    const auto to_new = geometry::invert(to_old);
    for (auto& pose : out.motion) pose = hand::transform_pose(to_new, pose);
  }
  return out;
}

int occlusion_bucket(double r_occ) {
  if (!(r_occ >= 0.0 && r_occ <= 1.0)) throw ShapeMismatch("occlusion ratio outside [0,1]");
  if (r_occ < 0.25) return 0;
  if (r_occ < 0.5) return 1;
  if (r_occ < 0.75) return 2;
  return 3;
}

std::string_view bucket_label(int bucket) {
  static constexpr std::string_view labels[4] = {"[0,25)", "[25,50)", "[50,75)", "[75,100]"};
  if (bucket < 0 || bucket > 3) throw ShapeMismatch("bucket index out of range");
  return labels[bucket];
}

void save_scene(const std::filesystem::path& path, const SyntheticScene& scene) {
  scene.validate();
  const auto n = scene.frames();
  io::Archive a;
  a.kind = "scene";
  a.metadata = {{"seed", std::to_string(scene.seed)},
                {"camera_mode", std::string(to_string(scene.camera_mode))},
                {"occlusion_regime", std::string(to_string(scene.regime))},
                {"width", scene.intrinsics.width},
                {"height", scene.intrinsics.height}};

  std::vector<float> ids, motion, extr, occ, masks, vis;
  for (auto id : scene.frame_ids) ids.push_back(static_cast<float>(id));
  for (const auto& p : scene.motion) {
    for (double v : p.to_vector()) motion.push_back(static_cast<float>(v));
  }
  for (const auto& e : scene.extrinsics) {
    for (double v : e.row_major()) extr.push_back(static_cast<float>(v));
  }
  for (double r : scene.occlusion) occ.push_back(static_cast<float>(r));
  for (const auto& m : scene.masks) {
    for (auto v : m) masks.push_back(static_cast<float>(v));
  }
  for (const auto& f : scene.visibility) {
    for (auto v : f) vis.push_back(static_cast<float>(v));
  }
  const auto& k = scene.intrinsics;
  a.add("frame_ids", {n}, std::move(ids));
  a.add("motion", {n, hand::kPoseDim}, std::move(motion));
  a.add("extrinsics", {n, 12}, std::move(extr));
  a.add("intrinsics", {4}, {static_cast<float>(k.focal_x), static_cast<float>(k.focal_y),
                            static_cast<float>(k.principal_x), static_cast<float>(k.principal_y)});
  a.add("occlusion", {n}, std::move(occ));
  a.add("masks", {kNumStreams, n}, std::move(masks));
  a.add("visibility", {n, hand::kNumJoints}, std::move(vis));
  io::write_archive(path, a);
}

SyntheticScene load_scene(const std::filesystem::path& path) {
  const auto a = io::read_archive(path);
  if (a.kind != "scene") throw FormatError(path.string() + " is not a scene archive");
  SyntheticScene s;
  s.seed = std::stoull(a.metadata.at("seed").get<std::string>());
  s.camera_mode = parse_camera_mode(a.metadata.at("camera_mode").get<std::string>());
  s.regime = parse_occlusion_regime(a.metadata.at("occlusion_regime").get<std::string>());
  s.intrinsics.width = a.metadata.at("width").get<int>();
  s.intrinsics.height = a.metadata.at("height").get<int>();

  const auto& ids = a.get("frame_ids");
  const auto n = static_cast<std::size_t>(ids.shape.at(0));
  auto expect = [&](const io::NamedArray& arr, std::vector<int64_t> shape) {
    if (arr.shape != shape) throw FormatError("scene array '" + arr.name + "' has an unexpected shape");
    return arr.data;
  };
  const auto ni = static_cast<int64_t>(n);
  const auto motion = expect(a.get("motion"), {ni, hand::kPoseDim});
  const auto extr = expect(a.get("extrinsics"), {ni, 12});
  const auto intr = expect(a.get("intrinsics"), {4});
  const auto occ = expect(a.get("occlusion"), {ni});
  const auto masks = expect(a.get("masks"), {kNumStreams, ni});
  const auto vis = expect(a.get("visibility"), {ni, hand::kNumJoints});

  s.intrinsics.focal_x = intr[0];
  s.intrinsics.focal_y = intr[1];
  s.intrinsics.principal_x = intr[2];
  s.intrinsics.principal_y = intr[3];
  s.frame_ids.resize(n);
  s.motion.resize(n);
  s.extrinsics.resize(n);
  s.occlusion.resize(n);
  s.visibility.resize(n);
  for (auto& m : s.masks) m.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    s.frame_ids[i] = static_cast<int64_t>(ids.data[i]);
    std::array<double, hand::kPoseDim> p{};
    for (std::size_t d = 0; d < p.size(); ++d) p[d] = motion[i * hand::kPoseDim + d];
    s.motion[i] = hand::HandPose::from_vector(p);
    std::array<double, 12> e{};
    for (std::size_t d = 0; d < 12; ++d) e[d] = extr[i * 12 + d];
    s.extrinsics[i] = orthonormalized(RigidTransform::from_row_major(e));
    s.occlusion[i] = occ[i];
    for (std::size_t k = 0; k < kNumStreams; ++k) s.masks[k][i] = masks[k * n + i] > 0.5f ? 1 : 0;
    for (std::size_t j = 0; j < hand::kNumJoints; ++j) s.visibility[i][j] = vis[i * hand::kNumJoints + j] > 0.5f ? 1 : 0;
  }
  s.validate();
  return s;
}

nlohmann::json generate_split(const std::vector<std::uint64_t>& seeds, const GenSpec& base,
                              const std::filesystem::path& out_dir, int threads) {
  std::filesystem::create_directories(out_dir);
  std::vector<nlohmann::json> entries(seeds.size());
  auto work = [&](std::size_t begin, std::size_t step) {
    for (std::size_t i = begin; i < seeds.size(); i += step) {
      GenSpec spec = base;
      spec.seed = seeds[i];
      const auto scene = gen_scene(spec);
      const std::string file = "scene_" + std::to_string(spec.seed) + ".uhnd";
      save_scene(out_dir / file, scene);
      const double occ = scene.mean_occlusion();
      entries[i] = {{"seed", spec.seed},
                    {"file", file},
                    {"frames", scene.frames()},
                    {"mean_occlusion", occ},
                    {"bucket", std::string(bucket_label(occlusion_bucket(occ)))}};
    }
  };
  const auto workers = static_cast<std::size_t>(std::max(1, threads));
  if (workers == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w, workers);
    for (auto& t : pool) t.join();
  }
  nlohmann::json manifest = {{"version", io::kFormatVersion}, {"spec", base}, {"scenes", entries}};
  std::ofstream(out_dir / "manifest.json") << manifest.dump(2) << '\n';
  return manifest;
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw FormatError("no manifest.json in " + dir.string());
  const auto doc = nlohmann::json::parse(in);
  std::vector<ManifestEntry> out;
  for (const auto& e : doc.at("scenes")) {
    out.push_back({e.at("seed").get<std::uint64_t>(), dir / e.at("file").get<std::string>(),
                   e.at("frames").get<int64_t>(), e.at("mean_occlusion").get<double>()});
  }
  return out;
}

}  // namespace unihand::datagen
