#include "unihand/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/SVD>

#include "unihand/error.hpp"

namespace unihand::metrics {
namespace {

constexpr double kMillimeters = 1000.0;
// Alignment round-off (~1e-13 mm) must not fail the 0 mm threshold.
constexpr double kThresholdSlack = 1e-9;

void check_pair(const JointSequence& pred, const JointSequence& gt) {
  if (pred.size() != gt.size() || pred.empty()) throw ShapeMismatch("metric inputs must be equal, non-empty sequences");
}

geometry::Points3 as_points(const hand::Joints3D& joints) { return geometry::Points3(joints); }

}  // namespace

geometry::Points3 SimilarityTransform::apply(const geometry::Points3& points) const {
  geometry::Points3 out = scale * points * rotation.transpose();
  out.rowwise() += translation.transpose();
  return out;
}

SimilarityTransform procrustes(const geometry::Points3& pred, const geometry::Points3& gt, bool with_scale) {
  if (pred.rows() != gt.rows()) throw ShapeMismatch("procrustes: point counts differ");
  if (pred.rows() < 3) throw DegenerateConfiguration("procrustes needs at least three points");
  const auto k = static_cast<double>(pred.rows());
  const Eigen::RowVector3d mu_pred = pred.colwise().mean();
  const Eigen::RowVector3d mu_gt = gt.colwise().mean();
  const geometry::Points3 pc = pred.rowwise() - mu_pred;
  const geometry::Points3 gc = gt.rowwise() - mu_gt;
  if (gc.squaredNorm() / k < 1e-24) throw DegenerateConfiguration("procrustes: target points coincide");
  const double var_pred = pc.squaredNorm() / k;
  if (with_scale && var_pred < 1e-24) throw DegenerateConfiguration("procrustes: source points coincide");

  const Eigen::Matrix3d cov = gc.transpose() * pc / k;
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Vector3d s = Eigen::Vector3d::Ones();
  if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0.0) s(2) = -1.0;

  SimilarityTransform t;
  t.rotation = svd.matrixU() * s.asDiagonal() * svd.matrixV().transpose();
  t.scale = with_scale ? svd.singularValues().dot(s) / var_pred : 1.0;
  t.translation = mu_gt.transpose() - t.scale * t.rotation * mu_pred.transpose();
  return t;
}

std::vector<double> aligned_joint_errors(const JointSequence& pred, const JointSequence& gt) {
  check_pair(pred, gt);
  std::vector<double> errors;
  errors.reserve(pred.size() * hand::kNumJoints);
  for (std::size_t f = 0; f < pred.size(); ++f) {
    const auto p = as_points(pred[f]);
    const auto g = as_points(gt[f]);
    const auto aligned = procrustes(p, g).apply(p);
    for (int j = 0; j < hand::kNumJoints; ++j) errors.push_back((aligned.row(j) - g.row(j)).norm() * kMillimeters);
  }
  return errors;
}

double pa_mpjpe(const JointSequence& pred, const JointSequence& gt) {
  const auto errors = aligned_joint_errors(pred, gt);
  double sum = 0.0;
  for (double e : errors) sum += e;
  return sum / static_cast<double>(errors.size());
}

double auc_from_errors(std::span<const double> errors_mm, double max_mm, double step_mm) {
  if (errors_mm.empty()) throw ShapeMismatch("auc: no errors given");
  const auto steps = static_cast<int>(std::lround(max_mm / step_mm));
  std::vector<double> pck(static_cast<std::size_t>(steps) + 1);
  for (int i = 0; i <= steps; ++i) {
    const double threshold = i * step_mm;
    const auto hits = std::count_if(errors_mm.begin(), errors_mm.end(), [&](double e) { return e <= threshold + kThresholdSlack; });
    pck[static_cast<std::size_t>(i)] = static_cast<double>(hits) / static_cast<double>(errors_mm.size());
  }
  double area = 0.0;
  for (int i = 0; i < steps; ++i) area += 0.5 * (pck[static_cast<std::size_t>(i)] + pck[static_cast<std::size_t>(i) + 1]) * step_mm;
  return area / (steps * step_mm);
}

double auc_j(const JointSequence& pred, const JointSequence& gt) {
  const auto errors = aligned_joint_errors(pred, gt);
  return auc_from_errors(errors);
}

double f_score(const geometry::Points3& pred, const geometry::Points3& gt, double threshold) {
  auto covered = [threshold](const geometry::Points3& from, const geometry::Points3& to) {
    int hits = 0;
    for (Eigen::Index i = 0; i < from.rows(); ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < to.rows(); ++j) best = std::min(best, (from.row(i) - to.row(j)).norm());
      if (best < threshold) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(from.rows());
  };
  const double precision = covered(pred, gt);
  const double recall = covered(gt, pred);
  if (precision + recall <= 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

FScores f_scores(const JointSequence& pred, const JointSequence& gt) {
  check_pair(pred, gt);
  FScores out;
  for (std::size_t f = 0; f < pred.size(); ++f) {
    const auto p = as_points(pred[f]);
    const auto g = as_points(gt[f]);
    const auto aligned = procrustes(p, g).apply(p);
    out.at5 += f_score(aligned, g, 0.005);
    out.at15 += f_score(aligned, g, 0.015);
  }
  out.at5 /= static_cast<double>(pred.size());
  out.at15 /= static_cast<double>(pred.size());
  return out;
}

geometry::Points3 stack_frames(const JointSequence& seq, std::size_t first, std::size_t count) {
  geometry::Points3 out(static_cast<Eigen::Index>(count * hand::kNumJoints), 3);
  for (std::size_t f = 0; f < count; ++f) {
    out.middleRows(static_cast<Eigen::Index>(f * hand::kNumJoints), hand::kNumJoints) = seq[first + f];
  }
  return out;
}

double aligned_sequence_error(const JointSequence& pred, const JointSequence& gt, const SimilarityTransform& t) {
  check_pair(pred, gt);
  double sum = 0.0;
  for (std::size_t f = 0; f < pred.size(); ++f) {
    const auto aligned = t.apply(as_points(pred[f]));
    for (int j = 0; j < hand::kNumJoints; ++j) sum += (aligned.row(j) - gt[f].row(j)).norm();
  }
  return sum * kMillimeters / static_cast<double>(pred.size() * hand::kNumJoints);
}

double g_mpjpe(const JointSequence& pred, const JointSequence& gt) {
  check_pair(pred, gt);
  if (pred.size() < 2) throw SequenceTooShort("g_mpjpe needs at least two frames");
  const auto t = procrustes(stack_frames(pred, 0, 2), stack_frames(gt, 0, 2), false);
  return aligned_sequence_error(pred, gt, t);
}

double ga_mpjpe(const JointSequence& pred, const JointSequence& gt) {
  check_pair(pred, gt);
  if (pred.size() < 2) throw SequenceTooShort("ga_mpjpe needs at least two frames");
  const auto t = procrustes(stack_frames(pred, 0, pred.size()), stack_frames(gt, 0, gt.size()), false);
  return aligned_sequence_error(pred, gt, t);
}

double acc_err(const JointSequence& pred, const JointSequence& gt) {
  check_pair(pred, gt);
  if (pred.size() < 3) throw SequenceTooShort("acc_err needs at least three frames");
  double sum = 0.0;
  for (std::size_t i = 1; i + 1 < pred.size(); ++i) {
    const hand::Joints3D a_pred = pred[i + 1] - 2.0 * pred[i] + pred[i - 1];
    const hand::Joints3D a_gt = gt[i + 1] - 2.0 * gt[i] + gt[i - 1];
    sum += (a_pred - a_gt).rowwise().norm().sum();
  }
  return sum * kMillimeters / static_cast<double>((pred.size() - 2) * hand::kNumJoints);
}

MetricSet evaluate_sequence(const JointSequence& pred, const JointSequence& gt) {
  MetricSet m;
  const auto errors = aligned_joint_errors(pred, gt);
  double sum = 0.0;
  for (double e : errors) sum += e;
  m.pa_mpjpe = sum / static_cast<double>(errors.size());
  m.auc_j = auc_from_errors(errors);
  const auto f = f_scores(pred, gt);
  m.f5 = f.at5;
  m.f15 = f.at15;
  m.g_mpjpe = g_mpjpe(pred, gt);
  m.ga_mpjpe = ga_mpjpe(pred, gt);
  m.acc_err = acc_err(pred, gt);
  return m;
}

}  // namespace unihand::metrics
