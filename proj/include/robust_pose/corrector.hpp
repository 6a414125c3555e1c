#pragma once

#include "robust_pose/geometry.hpp"

#include <Eigen/Core>

#include <vector>

namespace robust_pose {

enum class LossVariant { Robust, NonRobust };

struct CorrectorConfig {
  double c_bar = 0.0;      ///< TLS clamp (meters)
  double step_size = 0.0;  ///< unitless gradient multiplier
  int max_iters = 100;
  double grad_tol = 0.0;   ///< sup-norm of the gradient (meters)
  LossVariant loss_variant = LossVariant::Robust;
  int max_halvings = 10;

  /// c_bar = 0.1 D, grad_tol = 1e-4 D, step_size = N.
  static CorrectorConfig defaults_for(const CadModel& model);
  void validate() const;
};

struct CorrectionResult {
  Eigen::Matrix3Xd delta_y;
  KeypointSet corrected_keypoints;
  Pose corrected_pose;
  double initial_objective = 0.0;
  double final_objective = 0.0;
  int iterations = 0;
  bool converged = false;
};

/// Objective of a posed model against a cloud plus its gradient with respect
/// to the pose, nearest-neighbour correspondences held fixed.
struct ModelFit {
  double objective = 0.0;
  Eigen::Matrix3d grad_rotation = Eigen::Matrix3d::Zero();
  Eigen::Vector3d grad_translation = Eigen::Vector3d::Zero();
  Eigen::Index inliers = 0;
};

/// (1/n) sum_i rho(min_j |X_i - T B_j|) where rho is TLS (Robust) or the
/// square (NonRobust). Residuals exactly at c_bar count as clamped.
[[nodiscard]] ModelFit evaluate_model_fit(const Pose& pose, const Eigen::Matrix3Xd& x,
                                          const CadModel& model, double c_bar, LossVariant variant,
                                          bool with_gradient = true);

[[nodiscard]] double corrector_objective(const Eigen::Matrix3Xd& delta_y, const KeypointSet& y_tilde,
                                         const CadModel& model, const PointCloud& x,
                                         const CorrectorConfig& cfg);

/// Gradient of the corrector objective with respect to the keypoint
/// correction, correspondences frozen at the current pose.
[[nodiscard]] Eigen::Matrix3Xd corrector_gradient(const Eigen::Matrix3Xd& delta_y, const KeypointSet& y_tilde,
                                                  const CadModel& model, const PointCloud& x,
                                                  const CorrectorConfig& cfg);

/// Safeguarded constant-step gradient descent on the keypoint correction,
/// started at zero. The returned correction is the one whose corrected
/// keypoints equal the model keypoints at the optimal pose.
[[nodiscard]] CorrectionResult solve_correction(const KeypointSet& y_tilde, const CadModel& model,
                                                const PointCloud& x, const CorrectorConfig& cfg);

struct CorrectionInstance {
  KeypointSet y_tilde;
  PointCloud cloud;
};

/// Independent solves, one per instance.
[[nodiscard]] std::vector<CorrectionResult> solve_corrections(const std::vector<CorrectionInstance>& batch,
                                                              const CadModel& model,
                                                              const CorrectorConfig& cfg);

/// Backward contract of the corrector layer: d(delta_y*)/d(y_tilde) = -I.
[[nodiscard]] Eigen::MatrixXd correction_jacobian(const CorrectionResult& result);

/// y_tilde = T b.
[[nodiscard]] KeypointSet hallucinate_keypoints(const Pose& pose, const CadModel& model);

}  // namespace robust_pose
