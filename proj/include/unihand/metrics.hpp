#pragma once

#include <span>
#include <vector>

#include <Eigen/Core>

#include "unihand/geometry.hpp"
#include "unihand/hand_model.hpp"

namespace unihand::metrics {

using JointSequence = std::vector<hand::Joints3D>;

/// p -> s R p + t.
struct SimilarityTransform {
  double scale = 1.0;
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  geometry::Points3 apply(const geometry::Points3& points) const;
};

/// Least-squares similarity (or rigid, with_scale = false) transform taking
/// `pred` onto `gt` (Umeyama). Throws DegenerateConfiguration for fewer than
/// three points or a collapsed point set.
SimilarityTransform procrustes(const geometry::Points3& pred, const geometry::Points3& gt, bool with_scale = true);

/// Per-frame, per-joint distances in mm after per-frame similarity alignment.
std::vector<double> aligned_joint_errors(const JointSequence& pred, const JointSequence& gt);

double pa_mpjpe(const JointSequence& pred, const JointSequence& gt);

/// Area under the PCK curve over thresholds 0..max_mm (step_mm), normalized.
double auc_from_errors(std::span<const double> errors_mm, double max_mm = 50.0, double step_mm = 1.0);
double auc_j(const JointSequence& pred, const JointSequence& gt);

struct FScores {
  double at5 = 0.0;
  double at15 = 0.0;
};

/// Joint-set F-score at a threshold (meters) for one aligned frame.
double f_score(const geometry::Points3& pred, const geometry::Points3& gt, double threshold);
/// F@5mm and F@15mm on Procrustes-aligned joints, averaged over frames.
FScores f_scores(const JointSequence& pred, const JointSequence& gt);

/// Rigid alignment fitted on the first two frames, error over all frames (mm).
double g_mpjpe(const JointSequence& pred, const JointSequence& gt);
/// Rigid alignment fitted on the whole sequence (mm).
double ga_mpjpe(const JointSequence& pred, const JointSequence& gt);
/// Mean error of the sequence after applying `t` to every predicted frame (mm).
double aligned_sequence_error(const JointSequence& pred, const JointSequence& gt, const SimilarityTransform& t);

/// Mean norm of the difference of second temporal differences, mm/frame^2.
/// Throws SequenceTooShort below three frames.
double acc_err(const JointSequence& pred, const JointSequence& gt);

struct MetricSet {
  double pa_mpjpe = 0.0;
  double auc_j = 0.0;
  double f5 = 0.0;
  double f15 = 0.0;
  double g_mpjpe = 0.0;
  double ga_mpjpe = 0.0;
  double acc_err = 0.0;
};

MetricSet evaluate_sequence(const JointSequence& pred, const JointSequence& gt);

/// Stacks frames [first, first + count) into one point set.
geometry::Points3 stack_frames(const JointSequence& seq, std::size_t first, std::size_t count);

}  // namespace unihand::metrics
