#include "robust_pose/corrector.hpp"

#include <cmath>

namespace robust_pose {

CorrectorConfig CorrectorConfig::defaults_for(const CadModel& model) {
  CorrectorConfig cfg;
  cfg.c_bar = 0.1 * model.diameter();
  cfg.grad_tol = 1e-4 * model.diameter();
  cfg.step_size = static_cast<double>(model.num_keypoints());
  return cfg;
}

void CorrectorConfig::validate() const {
  if (!(c_bar > 0.0)) throw InvalidArgument("corrector c_bar must be positive");
  if (!(step_size > 0.0)) throw InvalidArgument("corrector step_size must be positive");
  if (max_iters < 1) throw InvalidArgument("corrector max_iters must be at least 1");
  if (!(grad_tol > 0.0)) throw InvalidArgument("corrector grad_tol must be positive");
  if (max_halvings < 0) throw InvalidArgument("corrector max_halvings must be non-negative");
}

ModelFit evaluate_model_fit(const Pose& pose, const Eigen::Matrix3Xd& x, const CadModel& model,
                            double c_bar, LossVariant variant, bool with_gradient) {
  ModelFit fit;
  const Eigen::Index n = x.cols();
  if (n == 0) throw InvalidArgument("model fit needs a non-empty cloud");
  const double c2 = c_bar * c_bar;
  const Eigen::Matrix3d rt = pose.rotation.transpose();
  const auto& dense = model.dense_points();
  const KdTree& tree = model.index();

  double total = 0.0;
  Eigen::Matrix3d sum_rb = Eigen::Matrix3d::Zero();
  Eigen::Vector3d sum_r = Eigen::Vector3d::Zero();
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Vector3d xi = x.col(i);
    // Search in the model frame so the dense index is built once per model.
    const Eigen::Vector3d q = rt * (xi - pose.translation);
    // Anything at or beyond c_bar is clamped, so the robust search stops there.
    const Neighbor nn = variant == LossVariant::Robust ? tree.nearest_within(q, c2) : tree.nearest(q);
    if (nn.index < 0) {
      total += c2;
      continue;
    }
    const Eigen::Vector3d bj = dense.col(nn.index);
    const Eigen::Vector3d r = xi - (pose.rotation * bj + pose.translation);
    const double d2 = r.squaredNorm();
    if (variant == LossVariant::Robust && !(d2 < c2)) {
      total += c2;
      continue;
    }
    total += d2;
    ++fit.inliers;
    if (with_gradient) {
      sum_rb.noalias() += r * bj.transpose();
      sum_r += r;
    }
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  fit.objective = total * inv_n;
  if (with_gradient) {
    fit.grad_rotation = -2.0 * inv_n * sum_rb;
    fit.grad_translation = -2.0 * inv_n * sum_r;
  }
  return fit;
}

namespace {

struct Evaluation {
  double objective = 0.0;
  Eigen::Matrix3Xd gradient;
};

Evaluation evaluate(const Eigen::Matrix3Xd& delta_y, const KeypointSet& y_tilde, const CadModel& model,
                    const Eigen::Matrix3Xd& x, const CorrectorConfig& cfg, bool with_gradient) {
  Evaluation e;
  const Eigen::Matrix3Xd y = y_tilde.points + delta_y;
  if (!with_gradient) {
    const Pose pose = register_keypoints(y, model.keypoints().points);
    e.objective = evaluate_model_fit(pose, x, model, cfg.c_bar, cfg.loss_variant, false).objective;
  } else {
    const RegistrationDifferential reg = register_with_differential(y, model.keypoints().points);
    const ModelFit fit = evaluate_model_fit(reg.pose, x, model, cfg.c_bar, cfg.loss_variant, true);
    e.objective = fit.objective;
    e.gradient = reg.pullback(fit.grad_rotation, fit.grad_translation);
  }
  if (!std::isfinite(e.objective)) throw NonFiniteObjective("corrector objective is not finite");
  return e;
}

void check_inputs(const KeypointSet& y_tilde, const CadModel& model, const PointCloud& x) {
  if (x.size() == 0) throw InvalidArgument("corrector needs a non-empty point cloud");
  if (y_tilde.size() != model.num_keypoints()) {
    throw DimensionMismatch("detected keypoint count differs from the model keypoint count");
  }
  if (!x.points.allFinite() || !y_tilde.points.allFinite()) {
    throw NonFiniteObjective("corrector inputs contain non-finite values");
  }
}

}  // namespace

double corrector_objective(const Eigen::Matrix3Xd& delta_y, const KeypointSet& y_tilde, const CadModel& model,
                           const PointCloud& x, const CorrectorConfig& cfg) {
  check_inputs(y_tilde, model, x);
  if (delta_y.cols() != y_tilde.size()) throw DimensionMismatch("correction shape differs from keypoints");
  return evaluate(delta_y, y_tilde, model, x.points, cfg, false).objective;
}

Eigen::Matrix3Xd corrector_gradient(const Eigen::Matrix3Xd& delta_y, const KeypointSet& y_tilde,
                                    const CadModel& model, const PointCloud& x, const CorrectorConfig& cfg) {
  check_inputs(y_tilde, model, x);
  if (delta_y.cols() != y_tilde.size()) throw DimensionMismatch("correction shape differs from keypoints");
  return evaluate(delta_y, y_tilde, model, x.points, cfg, true).gradient;
}

CorrectionResult solve_correction(const KeypointSet& y_tilde, const CadModel& model, const PointCloud& x,
                                  const CorrectorConfig& cfg) {
  cfg.validate();
  check_inputs(y_tilde, model, x);
  const Eigen::Index n_kp = y_tilde.size();

  Eigen::Matrix3Xd delta = Eigen::Matrix3Xd::Zero(3, n_kp);
  Evaluation current = evaluate(delta, y_tilde, model, x.points, cfg, true);
  CorrectionResult result;
  result.initial_objective = current.objective;

  int iter = 0;
  bool converged = false;
  for (; iter < cfg.max_iters; ++iter) {
    if (current.gradient.cwiseAbs().maxCoeff() < cfg.grad_tol) {
      converged = true;
      break;
    }
    double step = cfg.step_size;
    bool accepted = false;
    for (int h = 0; h <= cfg.max_halvings; ++h, step *= 0.5) {
      const Eigen::Matrix3Xd candidate = delta - step * current.gradient;
      Evaluation next = evaluate(candidate, y_tilde, model, x.points, cfg, true);
      if (next.objective <= current.objective) {
        delta = candidate;
        current = std::move(next);
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      // No decrease along the gradient even at the smallest step: stationary
      // up to the correspondence switch.
      converged = true;
      break;
    }
  }
  if (!converged && current.gradient.cwiseAbs().maxCoeff() < cfg.grad_tol) converged = true;

  // Replace the correction by the one landing on the posed model keypoints;
  // it yields the same pose and removes the dependence on the start point.
  const Pose pose = register_keypoints(y_tilde.points + delta, model.keypoints().points);
  Eigen::Matrix3Xd canonical = apply_pose(pose, model.keypoints().points) - y_tilde.points;
  double canonical_obj = evaluate(canonical, y_tilde, model, x.points, cfg, false).objective;
  if (canonical_obj > result.initial_objective) {
    canonical = delta;
    canonical_obj = current.objective;
  }

  result.delta_y = canonical;
  result.corrected_keypoints.points = y_tilde.points + result.delta_y;
  result.corrected_pose = register_keypoints(result.corrected_keypoints, model.keypoints());
  result.final_objective = canonical_obj;
  result.iterations = iter;
  result.converged = converged;
  return result;
}

std::vector<CorrectionResult> solve_corrections(const std::vector<CorrectionInstance>& batch,
                                                const CadModel& model, const CorrectorConfig& cfg) {
  std::vector<CorrectionResult> out;
  out.reserve(batch.size());
  for (const auto& inst : batch) out.push_back(solve_correction(inst.y_tilde, model, inst.cloud, cfg));
  return out;
}

Eigen::MatrixXd correction_jacobian(const CorrectionResult& result) {
  const Eigen::Index dim = 3 * result.delta_y.cols();
  return -Eigen::MatrixXd::Identity(dim, dim);
}

KeypointSet hallucinate_keypoints(const Pose& pose, const CadModel& model) {
  return apply_pose(pose, model.keypoints());
}

}  // namespace robust_pose
