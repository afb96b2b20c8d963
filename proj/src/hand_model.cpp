#include "unihand/hand_model.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "unihand/error.hpp"

namespace unihand::hand {
namespace {

// Rest offsets from the parent joint in meters, hand frame: fingers extend
// along +y, the thumb sits on +x, the palm faces -z.
constexpr double kRestOffsets[kNumJoints][3] = {
    {0.000, 0.000, 0.000},                                                    // wrist
    {0.020, 0.020, -0.005}, {0.020, 0.025, 0.000}, {0.010, 0.028, 0.000}, {0.005, 0.025, 0.000},   // thumb
    {0.025, 0.085, 0.000},  {0.000, 0.040, 0.000}, {0.000, 0.024, 0.000}, {0.000, 0.020, 0.000},   // index
    {0.005, 0.090, 0.000},  {0.000, 0.044, 0.000}, {0.000, 0.028, 0.000}, {0.000, 0.022, 0.000},   // middle
    {-0.014, 0.084, 0.000}, {0.000, 0.040, 0.000}, {0.000, 0.026, 0.000}, {0.000, 0.021, 0.000},   // ring
    {-0.030, 0.074, 0.000}, {0.000, 0.032, 0.000}, {0.000, 0.019, 0.000}, {0.000, 0.018, 0.000},   // pinky
};

// Linear shape blend, meters per unit beta; drawn once from U(-5 mm, 5 mm)
// with seed 0 and frozen here. Rank 10.
constexpr double kShapeBasis[kNumJoints][3][kNumShape] = {
    {{ 0.000000,  0.000000,  0.000000,  0.000000,  0.000000,  0.000000,  0.000000,  0.000000,  0.000000,  0.000000},
      { 0.000000,  0.000000,  0.000000,  0.000000,  0.000000,  0.000000,  0.000000,  0.000000,  0.000000,  0.000000},
      { 0.000000,  0.000000,  0.000000,  0.000000,  0.000000,  0.000000,  0.000000,  0.000000,  0.000000,  0.000000}},
    {{ 0.001884, -0.001111, -0.003649,  0.002215,  0.000254, -0.001898, -0.000142,  0.003895,  0.004340, -0.001422},
      { 0.000715, -0.001781,  0.000943, -0.001621, -0.001084,  0.003903, -0.002728,  0.001232, -0.004160,  0.003326},
      { 0.002871, -0.002606,  0.003765, -0.004414, -0.001639, -0.003497, -0.000497,  0.002963, -0.002694, -0.004480}},
    {{-0.000954, -0.003015, -0.004092,  0.000803, -0.002013,  0.001720, -0.003005,  0.004421, -0.001349, -0.003945},
      { 0.001291,  0.004272, -0.000596,  0.004546, -0.000001, -0.000748,  0.001202,  0.004951,  0.004489, -0.000400},
      { 0.002577, -0.000026,  0.000293,  0.002858, -0.000853,  0.002345,  0.002111,  0.004321, -0.003851,  0.002290}},
    {{ 0.004274,  0.004679, -0.004853,  0.003636,  0.004812,  0.004572, -0.003512,  0.004726,  0.003899,  0.003224},
      {-0.000200, -0.002676,  0.003019,  0.004235, -0.002339,  0.000389, -0.000572,  0.004310, -0.004595,  0.002320},
      { 0.001144, -0.004716,  0.002192, -0.004840,  0.002580,  0.000128,  0.004291, -0.004339,  0.003413, -0.004333}},
    {{-0.001557, -0.000697,  0.004661,  0.000622, -0.002411, -0.002583,  0.003881, -0.002741, -0.003754, -0.002117},
      { 0.000861,  0.000541,  0.003097,  0.000605, -0.002116, -0.000871,  0.003181,  0.001265,  0.004591, -0.001306},
      { 0.000526,  0.000939,  0.003483, -0.003545, -0.000935,  0.004100, -0.004569,  0.003227, -0.000846,  0.003298}},
    {{-0.004900, -0.001350, -0.004214,  0.001526, -0.002262,  0.002027,  0.004438, -0.003732,  0.003648, -0.004405},
      {-0.001192, -0.000702, -0.000112,  0.004765,  0.002757, -0.001911, -0.002302,  0.003631,  0.003813,  0.000107},
      {-0.001557,  0.004949, -0.001841, -0.003173,  0.003801,  0.003123,  0.001679,  0.004584,  0.004257,  0.002482}},
    {{ 0.003607, -0.002529, -0.003588,  0.001701,  0.002146, -0.003329, -0.001044,  0.004103,  0.000614,  0.000783},
      {-0.003059,  0.000260,  0.000234, -0.004111,  0.004819,  0.000714, -0.004936,  0.002726,  0.004783,  0.000899},
      {-0.001803, -0.003125,  0.001725, -0.003049,  0.000777,  0.001022,  0.004624, -0.004277, -0.000000,  0.002441}},
    {{-0.003228, -0.001119, -0.004371,  0.002259, -0.004122, -0.001049,  0.003735, -0.000277,  0.004126,  0.002659},
      { 0.004153, -0.003726, -0.004264, -0.004297,  0.003689,  0.001341, -0.000034, -0.003365,  0.001737, -0.001820},
      { 0.002109, -0.000396,  0.000075,  0.002897, -0.004073,  0.000788, -0.003028,  0.003081, -0.000112,  0.004887}},
    {{-0.003171,  0.004630,  0.003009, -0.000187,  0.003135,  0.001028,  0.001551,  0.004137, -0.004347,  0.003350},
      {-0.001182, -0.001745,  0.004940,  0.002812, -0.000145, -0.000774,  0.003775, -0.004132,  0.002084,  0.002892},
      { 0.002992, -0.001777,  0.002966, -0.002747, -0.001377, -0.000826,  0.000414, -0.003874, -0.000931, -0.004997}},
    {{ 0.002444,  0.003519, -0.003611,  0.002038,  0.003211,  0.004818,  0.003438, -0.000759,  0.004797,  0.004740},
      { 0.000037,  0.002534,  0.004138, -0.000239,  0.003638,  0.002016, -0.002061,  0.002677,  0.000707, -0.004062},
      {-0.001086, -0.004263, -0.000238, -0.000715, -0.000763,  0.000863, -0.003773,  0.004338,  0.001841,  0.003238}},
    {{ 0.003968,  0.000833, -0.004598,  0.002115,  0.000690,  0.003260,  0.000322,  0.003132,  0.004970, -0.001494},
      {-0.003290, -0.001083,  0.002530, -0.000608,  0.000884, -0.003726,  0.002261, -0.002199, -0.003094,  0.003629},
      { 0.000644, -0.000155,  0.003988, -0.004140,  0.001962, -0.001720, -0.003246,  0.001748, -0.001372, -0.001701}},
    {{ 0.004437, -0.003007,  0.000122, -0.004760, -0.003366,  0.003834,  0.002892,  0.000568, -0.002775,  0.000577},
      {-0.004879,  0.002130,  0.002168,  0.001460,  0.001113, -0.004263, -0.002536,  0.000744, -0.001058,  0.004920},
      { 0.004237, -0.003480,  0.000900,  0.001962, -0.003635, -0.001874,  0.002159,  0.004011, -0.001583, -0.002611}},
    {{ 0.003218,  0.000850, -0.000234, -0.002438, -0.004273, -0.004821,  0.000800, -0.003089,  0.004755, -0.003925},
      {-0.000479, -0.001053, -0.002677,  0.002488,  0.001437,  0.002258, -0.004172, -0.001473,  0.000198, -0.000733},
      {-0.004594, -0.003060,  0.004450, -0.003374,  0.003521,  0.003221, -0.001087, -0.000332,  0.003240,  0.001807}},
    {{ 0.003369,  0.002576,  0.001913,  0.004130,  0.003228, -0.003209,  0.002482, -0.004133, -0.000741, -0.001032},
      {-0.002978,  0.004379, -0.004052, -0.004951, -0.001771,  0.004907, -0.002353,  0.003307, -0.003269,  0.000864},
      { 0.004584,  0.002165,  0.004805,  0.000746,  0.004833,  0.003370,  0.002782,  0.003885,  0.001315, -0.001436}},
    {{ 0.000283, -0.002735,  0.002775, -0.003299,  0.000772,  0.000359,  0.001719,  0.002605, -0.003902,  0.001249},
      {-0.000860,  0.001142,  0.001940,  0.000855,  0.002329,  0.000200, -0.000371, -0.002132, -0.002708,  0.001953},
      { 0.001957, -0.003045,  0.004718,  0.001712,  0.000312,  0.003412, -0.000135, -0.000241, -0.002417, -0.003439}},
    {{ 0.002116,  0.003441,  0.001778, -0.001312,  0.000757,  0.000634,  0.004366, -0.001123, -0.003352,  0.003769},
      { 0.003947, -0.004517, -0.003018,  0.001363,  0.002888,  0.001067, -0.003084, -0.003824,  0.000060,  0.003155},
      {-0.002829, -0.004249,  0.000510, -0.003082, -0.004326,  0.002733,  0.003212, -0.001017, -0.002059, -0.002229}},
    {{-0.001390,  0.000769,  0.000278, -0.001447,  0.001374,  0.001758,  0.000583, -0.001127,  0.001239,  0.000919},
      {-0.001597, -0.001968,  0.000457,  0.001123,  0.001108, -0.001172,  0.000658,  0.004858, -0.000720,  0.003430},
      {-0.004187,  0.003752,  0.004417, -0.002381, -0.004879, -0.000170, -0.003173,  0.004716,  0.003977,  0.004607}},
    {{ 0.001039,  0.000152,  0.003327,  0.001523, -0.002514,  0.004343, -0.000603,  0.002736,  0.000009, -0.003166},
      {-0.002041,  0.000744, -0.003570, -0.004863, -0.000661,  0.002622,  0.001142, -0.001759,  0.002172, -0.000155},
      { 0.004995,  0.002760,  0.003306, -0.002405, -0.003477, -0.003007, -0.000677,  0.000121, -0.003054,  0.002799}},
    {{ 0.003684, -0.001840,  0.000081,  0.000944,  0.002224, -0.003525, -0.002191,  0.002307,  0.000682,  0.003999},
      {-0.000521, -0.000934, -0.001935, -0.002686,  0.001508, -0.002353,  0.003623, -0.002294,  0.001734,  0.000682},
      { 0.001285,  0.003954, -0.003300, -0.003502, -0.003781, -0.004236,  0.000342, -0.003343,  0.003072, -0.004774}},
    {{-0.001254, -0.000268, -0.002835, -0.001441, -0.002772, -0.002182,  0.004269, -0.000828, -0.001141,  0.001112},
      { 0.001641,  0.001603, -0.004152,  0.000819,  0.002359,  0.002956,  0.000885, -0.003694, -0.004163, -0.001769},
      { 0.004276, -0.000274,  0.003955, -0.000403,  0.002551, -0.000149,  0.002087, -0.001828,  0.003899, -0.002343}},
    {{-0.004938,  0.002212,  0.001766,  0.001569,  0.001874,  0.000863, -0.003847,  0.001692, -0.004934, -0.003172},
      {-0.000791, -0.001216, -0.003810, -0.000730,  0.001236, -0.001225,  0.002085, -0.002691, -0.003562,  0.002489},
      { 0.001687, -0.000706, -0.003632,  0.001637,  0.002500, -0.003361,  0.001893, -0.001444,  0.004151,  0.002515}},
};

HandSkeleton build_standard() {
  HandSkeleton s;
  s.parent[0] = -1;
  s.articulated_map[0] = -1;
  int theta_index = 0;
  for (int finger = 0; finger < 5; ++finger) {
    const int base = 1 + 4 * finger;
    for (int k = 0; k < 4; ++k) {
      const int j = base + k;
      s.parent[j] = k == 0 ? 0 : j - 1;
      s.articulated_map[j] = k < 3 ? theta_index++ : -1;
    }
  }
  for (int j = 0; j < kNumJoints; ++j) {
    for (int a = 0; a < 3; ++a) {
      s.rest_offsets(j, a) = kRestOffsets[j][a];
      for (int k = 0; k < kNumShape; ++k) s.shape_basis[j](a, k) = kShapeBasis[j][a][k];
    }
  }
  s.validate();
  return s;
}

torch::Tensor skew(const torch::Tensor& v) {
  auto x = v.select(-1, 0), y = v.select(-1, 1), z = v.select(-1, 2);
  auto o = torch::zeros_like(x);
  auto rows = torch::stack({o, -z, y, z, o, -x, -y, x, o}, -1);
  auto shape = v.sizes().vec();
  shape.back() = 3;
  shape.push_back(3);
  return rows.reshape(shape);
}

}  // namespace

std::array<double, kPoseDim> HandPose::to_vector() const {
  std::array<double, kPoseDim> v{};
  for (int j = 0; j < kNumArticulated; ++j) {
    for (int a = 0; a < 3; ++a) v[kThetaOffset + 3 * j + a] = theta(j, a);
  }
  for (int k = 0; k < kNumShape; ++k) v[kBetaOffset + k] = beta(k);
  for (int a = 0; a < 3; ++a) {
    v[kPhiOffset + a] = phi(a);
    v[kGammaOffset + a] = gamma(a);
  }
  return v;
}

HandPose HandPose::from_vector(std::span<const double> values) {
  if (values.size() != kPoseDim) throw ShapeMismatch("HandPose::from_vector expects 61 values");
  HandPose p;
  for (int j = 0; j < kNumArticulated; ++j) {
    for (int a = 0; a < 3; ++a) p.theta(j, a) = values[kThetaOffset + 3 * j + a];
  }
  for (int k = 0; k < kNumShape; ++k) p.beta(k) = values[kBetaOffset + k];
  for (int a = 0; a < 3; ++a) {
    p.phi(a) = values[kPhiOffset + a];
    p.gamma(a) = values[kGammaOffset + a];
  }
  return p;
}

bool HandPose::is_finite() const {
  return theta.allFinite() && beta.allFinite() && phi.allFinite() && gamma.allFinite();
}

const HandSkeleton& HandSkeleton::standard() {
  static const HandSkeleton skeleton = build_standard();
  return skeleton;
}

HandSkeleton HandSkeleton::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open skeleton file " + path.string());
  const auto doc = nlohmann::json::parse(in);
  HandSkeleton s;
  const auto& parent = doc.at("parent");
  const auto& offsets = doc.at("rest_offsets");
  const auto& basis = doc.at("shape_basis");
  const auto& amap = doc.at("articulated_map");
  if (parent.size() != kNumJoints || offsets.size() != kNumJoints || basis.size() != kNumJoints ||
      amap.size() != kNumJoints) {
    throw ShapeMismatch("skeleton file must describe 21 joints");
  }
  for (int j = 0; j < kNumJoints; ++j) {
    s.parent[j] = parent[j].get<int>();
    s.articulated_map[j] = amap[j].get<int>();
    for (int a = 0; a < 3; ++a) {
      s.rest_offsets(j, a) = offsets[j].at(a).get<double>();
      for (int k = 0; k < kNumShape; ++k) s.shape_basis[j](a, k) = basis[j].at(a).at(k).get<double>();
    }
  }
  s.validate();
  return s;
}

HandSkeleton HandSkeleton::mirrored() const {
  HandSkeleton m = *this;
  m.rest_offsets.col(0) *= -1.0;
  for (auto& block : m.shape_basis) block.row(0) *= -1.0;
  return m;
}

void HandSkeleton::validate() const {
  if (parent[0] != -1) throw ShapeMismatch("skeleton root must have parent -1");
  std::set<int> used;
  for (int j = 0; j < kNumJoints; ++j) {
    if (j > 0) {
      if (parent[j] < 0 || parent[j] >= j) throw ShapeMismatch("skeleton parents must precede children");
      const double len = rest_offsets.row(j).norm();
      if (len < 0.005 || len > 0.12) throw ShapeMismatch("rest bone length outside [0.005, 0.12] m");
    }
    const int a = articulated_map[j];
    if (a >= 0) {
      if (a >= kNumArticulated || !used.insert(a).second) throw ShapeMismatch("invalid articulated_map");
    }
  }
  if (static_cast<int>(used.size()) != kNumArticulated) {
    throw ShapeMismatch("articulated_map must cover all 15 rotations");
  }
}

Eigen::Matrix3d rodrigues(const Eigen::Vector3d& v) {
  const double theta2 = v.squaredNorm();
  double a, b;
  if (theta2 < 1e-16) {
    a = 1.0 - theta2 / 6.0;
    b = 0.5 - theta2 / 24.0;
  } else {
    const double theta = std::sqrt(theta2);
    a = std::sin(theta) / theta;
    b = (1.0 - std::cos(theta)) / theta2;
  }
  Eigen::Matrix3d k;
  k << 0.0, -v.z(), v.y(), v.z(), 0.0, -v.x(), -v.y(), v.x(), 0.0;
  return Eigen::Matrix3d::Identity() + a * k + b * k * k;
}

torch::Tensor rodrigues(const torch::Tensor& axis_angle) {
  auto theta2 = (axis_angle * axis_angle).sum(-1, /*keepdim=*/true);
  auto small = theta2 < 1e-16;
  auto safe2 = torch::where(small, torch::ones_like(theta2), theta2);
  auto theta = torch::sqrt(safe2);
  auto a = torch::where(small, 1.0 - theta2 / 6.0, torch::sin(theta) / theta).unsqueeze(-1);
  auto b = torch::where(small, 0.5 - theta2 / 24.0, (1.0 - torch::cos(theta)) / safe2).unsqueeze(-1);
  auto k = skew(axis_angle);
  auto eye = torch::eye(3, axis_angle.options());
  return eye + a * k + b * torch::matmul(k, k);
}

KinematicModel::KinematicModel(HandSkeleton skeleton) : skeleton_(std::move(skeleton)) {
  skeleton_.validate();
  auto opts = torch::TensorOptions().dtype(torch::kFloat64);
  rest_offsets_ = torch::empty({kNumJoints, 3}, opts);
  shape_basis_ = torch::empty({kNumJoints, 3, kNumShape}, opts);
  auto ro = rest_offsets_.accessor<double, 2>();
  auto sb = shape_basis_.accessor<double, 3>();
  for (int j = 0; j < kNumJoints; ++j) {
    for (int a = 0; a < 3; ++a) {
      ro[j][a] = skeleton_.rest_offsets(j, a);
      for (int k = 0; k < kNumShape; ++k) sb[j][a][k] = skeleton_.shape_basis[j](a, k);
    }
  }
}

torch::Tensor KinematicModel::forward(const torch::Tensor& pose) const {
  if (pose.size(-1) != kPoseDim) throw ShapeMismatch("forward_kinematics expects 61 pose values per frame");
  const auto dtype = pose.scalar_type();
  auto batch = pose.sizes().vec();
  batch.pop_back();

  auto theta = pose.narrow(-1, kThetaOffset, 3 * kNumArticulated);
  auto theta_shape = batch;
  theta_shape.push_back(kNumArticulated);
  theta_shape.push_back(3);
  theta = theta.reshape(theta_shape);
  auto beta = pose.narrow(-1, kBetaOffset, kNumShape);
  auto phi = pose.narrow(-1, kPhiOffset, 3);
  auto gamma = pose.narrow(-1, kGammaOffset, 3);

  // [..., 21, 3] shaped bone offsets.
  auto basis = shape_basis_.to(dtype);
  auto offsets = rest_offsets_.to(dtype) + torch::matmul(basis, beta.unsqueeze(-2).unsqueeze(-1)).squeeze(-1);
  auto local = rodrigues(theta);
  auto global = rodrigues(phi);

  std::vector<torch::Tensor> world_rot(kNumJoints);
  std::vector<torch::Tensor> positions(kNumJoints);
  auto rotate = [](const torch::Tensor& r, const torch::Tensor& v) {
    return torch::matmul(r, v.unsqueeze(-1)).squeeze(-1);
  };
  world_rot[0] = global;
  positions[0] = gamma + rotate(global, offsets.select(-2, 0));
  for (int j = 1; j < kNumJoints; ++j) {
    const int p = skeleton_.parent[j];
    positions[j] = positions[p] + rotate(world_rot[p], offsets.select(-2, j));
    const int a = skeleton_.articulated_map[j];
    world_rot[j] = a >= 0 ? torch::matmul(world_rot[p], local.select(-3, a)) : world_rot[p];
  }
  return torch::stack(positions, -2);
}

Joints3D forward_kinematics(const HandPose& pose, const HandSkeleton& skeleton) {
  const Eigen::Matrix3d global = rodrigues(pose.phi);
  std::array<Eigen::Matrix3d, kNumJoints> world_rot;
  Joints3D joints;
  auto offset = [&](int j) -> Eigen::Vector3d {
    return skeleton.rest_offsets.row(j).transpose() + skeleton.shape_basis[j] * pose.beta;
  };
  world_rot[0] = global;
  joints.row(0) = (pose.gamma + global * offset(0)).transpose();
  for (int j = 1; j < kNumJoints; ++j) {
    const int p = skeleton.parent[j];
    joints.row(j) = joints.row(p) + (world_rot[p] * offset(j)).transpose();
    const int a = skeleton.articulated_map[j];
    world_rot[j] = a >= 0 ? Eigen::Matrix3d(world_rot[p] * rodrigues(Eigen::Vector3d(pose.theta.row(a).transpose())))
                          : world_rot[p];
  }
  return joints;
}

HandPose flip_lr(const HandPose& pose) {
  HandPose out = pose;
  out.theta.col(1) *= -1.0;
  out.theta.col(2) *= -1.0;
  out.phi.y() *= -1.0;
  out.phi.z() *= -1.0;
  out.gamma.x() *= -1.0;
  return out;
}

geometry::Points2 flip_lr_2d(const geometry::Points2& keypoints) {
  geometry::Points2 out = keypoints;
  out.col(0) = (1.0 - keypoints.col(0).array()).matrix();
  return out;
}

HandPose transform_pose(const geometry::RigidTransform& t, const HandPose& pose) {
  HandPose out = pose;
  out.phi = geometry::axis_angle_from_rotation(t.rotation * rodrigues(pose.phi));
  out.gamma = t.rotation * pose.gamma + t.translation;
  return out;
}

torch::Tensor poses_to_tensor(std::span<const HandPose> poses, torch::Dtype dtype) {
  auto out = torch::empty({static_cast<int64_t>(poses.size()), kPoseDim}, torch::kFloat64);
  auto acc = out.accessor<double, 2>();
  for (std::size_t i = 0; i < poses.size(); ++i) {
    const auto v = poses[i].to_vector();
    for (int k = 0; k < kPoseDim; ++k) acc[static_cast<int64_t>(i)][k] = v[k];
  }
  return out.to(dtype);
}

std::vector<HandPose> poses_from_tensor(const torch::Tensor& poses) {
  auto flat = poses.detach().to(torch::kFloat64).reshape({-1, kPoseDim}).contiguous();
  std::vector<HandPose> out;
  out.reserve(static_cast<std::size_t>(flat.size(0)));
  const double* data = flat.data_ptr<double>();
  for (int64_t i = 0; i < flat.size(0); ++i) {
    out.push_back(HandPose::from_vector(std::span<const double>(data + i * kPoseDim, kPoseDim)));
  }
  return out;
}

}  // namespace unihand::hand
