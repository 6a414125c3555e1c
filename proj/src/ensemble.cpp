#include "robust_pose/ensemble.hpp"

#include "robust_pose/parallel.hpp"
#include "robust_pose/random.hpp"
#include "robust_pose/robust_points.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace robust_pose {

namespace {

struct Layout {
  Eigen::Index w1 = 0, b1 = 0, w2 = 0, b2 = 0, total = 0;
};

Layout layout_of(const DetectorParams& p) {
  Layout l;
  const Eigen::Index in = p.input_size();
  const Eigen::Index h = p.hidden;
  const Eigen::Index out = p.output_size();
  l.w1 = 0;
  l.b1 = l.w1 + h * in;
  l.w2 = l.b1 + h;
  l.b2 = l.w2 + out * h;
  l.total = l.b2 + out;
  return l;
}

DetectorParams shell(const CadModel& model, int fps_size, int hidden) {
  if (fps_size < 1 || hidden < 1) throw InvalidArgument("detector sizes must be positive");
  DetectorParams p;
  p.fps_size = fps_size;
  p.hidden = hidden;
  p.num_keypoints = static_cast<int>(model.num_keypoints());
  p.scale = model.diameter();
  p.model_id = model.name();
  p.theta = Eigen::VectorXd::Zero(layout_of(p).total);
  return p;
}

}  // namespace

DetectorParams DetectorParams::zeros(const CadModel& model, int fps_size, int hidden) {
  return shell(model, fps_size, hidden);
}

DetectorParams DetectorParams::random(const CadModel& model, std::uint64_t seed, int fps_size, int hidden,
                                      double output_gain) {
  DetectorParams p = shell(model, fps_size, hidden);
  p.seed = seed;
  const Layout l = layout_of(p);
  auto rng = make_rng(seed, 0xde);
  std::normal_distribution<double> g1(0.0, std::sqrt(2.0 / p.input_size()));
  std::normal_distribution<double> g2(0.0, output_gain * std::sqrt(1.0 / hidden));
  for (Eigen::Index i = l.w1; i < l.b1; ++i) p.theta(i) = g1(rng);
  for (Eigen::Index i = l.w2; i < l.b2; ++i) p.theta(i) = g2(rng);
  return p;
}

Eigen::Index DetectorParams::parameter_count() const { return layout_of(*this).total; }

void DetectorParams::validate() const {
  if (fps_size < 1 || hidden < 1 || num_keypoints < 3) throw InvalidArgument("detector sizes are invalid");
  if (theta.size() != parameter_count()) throw DimensionMismatch("detector parameter vector has the wrong length");
  if (!theta.allFinite()) throw InvalidArgument("detector parameters must be finite");
  if (!(scale > 0.0)) throw InvalidArgument("detector scale must be positive");
  if (!(centroid_clamp > 0.0)) throw InvalidArgument("detector centroid clamp must be positive");
}

Eigen::Map<const Eigen::MatrixXd> DetectorParams::w1() const {
  const Layout l = layout_of(*this);
  return {theta.data() + l.w1, hidden, input_size()};
}
Eigen::Map<const Eigen::VectorXd> DetectorParams::b1() const {
  const Layout l = layout_of(*this);
  return {theta.data() + l.b1, hidden};
}
Eigen::Map<const Eigen::MatrixXd> DetectorParams::w2() const {
  const Layout l = layout_of(*this);
  return {theta.data() + l.w2, output_size(), hidden};
}
Eigen::Map<const Eigen::VectorXd> DetectorParams::b2() const {
  const Layout l = layout_of(*this);
  return {theta.data() + l.b2, output_size()};
}

Eigen::VectorXd detector_descriptor(const DetectorParams& params, const PointCloud& x, Eigen::Vector3d* centroid) {
  if (x.size() == 0) throw InvalidArgument("detector needs a non-empty point cloud");
  GncConfig gnc;
  gnc.c_bar_centroid = params.centroid_clamp * params.scale;
  const Eigen::Vector3d c = robust_centroid(x.points, gnc).centroid;
  if (centroid != nullptr) *centroid = c;

  // FPS from the point farthest from the centroid, so the ordering does not
  // depend on how the cloud happens to be indexed.
  const Eigen::VectorXd r2 = (x.points.colwise() - c).colwise().squaredNorm().transpose();
  Eigen::Index start = 0;
  for (Eigen::Index i = 1; i < r2.size(); ++i) {
    if (r2(i) > r2(start)) start = i;
  }
  const int k = static_cast<int>(std::min<Eigen::Index>(params.fps_size, x.size()));
  const auto idx = fps_indices(x.points, k, start);
  Eigen::Matrix3Xd local(3, static_cast<Eigen::Index>(idx.size()));
  for (std::size_t s = 0; s < idx.size(); ++s) {
    local.col(static_cast<Eigen::Index>(s)) =
        (x.points.col(idx[s]) - c) / params.scale;
  }
  const double clip = params.descriptor_clip;
  Eigen::VectorXd d = Eigen::VectorXd::Zero(params.input_size());
  if (params.descriptor_order == DescriptorOrder::Selection) {
    d.head(local.size()) = Eigen::Map<const Eigen::VectorXd>(local.data(), local.size()).cwiseMax(-clip).cwiseMin(clip);
    return d;
  }
  const auto& dirs = projection_directions();
  for (Eigen::Index a = 0; a < dirs.cols(); ++a) {
    Eigen::VectorXd v = (local.transpose() * dirs.col(a)).cwiseMax(-clip).cwiseMin(clip);
    std::sort(v.data(), v.data() + v.size());
    d.segment(a * params.fps_size, v.size()) = v;
  }
  return d;
}

const Eigen::Matrix<double, 3, 13>& projection_directions() {
  static const Eigen::Matrix<double, 3, 13> dirs = [] {
    Eigen::Matrix<double, 3, 13> m;
    m << 1, 0, 0, 1, 1, 0, 1, 0, 1, 1, 1, 1, -1,
         0, 1, 0, 1, -1, 1, 0, 1, 0, 1, 1, -1, 1,
         0, 0, 1, 0, 0, 1, -1, -1, 1, 1, -1, 1, 1;
    m.colwise().normalize();
    return m;
  }();
  return dirs;
}

DescriptorOrder parse_descriptor_order(const std::string& name) {
  if (name == "sorted_projections") return DescriptorOrder::SortedProjections;
  if (name == "selection") return DescriptorOrder::Selection;
  throw InvalidArgument("unknown descriptor order '" + name + "' (sorted_projections, selection)");
}

std::string to_string(DescriptorOrder order) {
  return order == DescriptorOrder::Selection ? "selection" : "sorted_projections";
}

namespace {

DetectorForward forward_from_descriptor(const DetectorParams& params, const Eigen::VectorXd& descriptor,
                                        const Eigen::Vector3d& centroid) {
  DetectorForward f;
  f.centroid = centroid;
  f.descriptor = descriptor;
  f.hidden_pre = params.w1() * descriptor + params.b1();
  const Eigen::VectorXd out = params.w2() * f.hidden_pre.cwiseMax(0.0) + params.b2();
  f.keypoints.points = Eigen::Map<const Eigen::Matrix3Xd>(out.data(), 3, params.num_keypoints) * params.scale;
  f.keypoints.points.colwise() += centroid;
  return f;
}

}  // namespace

DetectorForward detect_forward(const DetectorParams& params, const PointCloud& x) {
  Eigen::Vector3d c;
  const Eigen::VectorXd d = detector_descriptor(params, x, &c);
  return forward_from_descriptor(params, d, c);
}

KeypointSet detect(const DetectorParams& params, const PointCloud& x) { return detect_forward(params, x).keypoints; }

Eigen::VectorXd detector_backward(const DetectorParams& params, const DetectorForward& fwd,
                                  const Eigen::Matrix3Xd& grad_keypoints) {
  if (grad_keypoints.cols() != params.num_keypoints) throw DimensionMismatch("keypoint gradient has the wrong shape");
  const Layout l = layout_of(params);
  Eigen::VectorXd g = Eigen::VectorXd::Zero(l.total);
  const Eigen::VectorXd go = Eigen::Map<const Eigen::VectorXd>(grad_keypoints.data(), params.output_size()) * params.scale;
  const Eigen::VectorXd h = fwd.hidden_pre.cwiseMax(0.0);
  Eigen::Map<Eigen::MatrixXd>(g.data() + l.w2, params.output_size(), params.hidden) = go * h.transpose();
  g.segment(l.b2, params.output_size()) = go;
  Eigen::VectorXd gh = params.w2().transpose() * go;
  for (Eigen::Index i = 0; i < gh.size(); ++i) {
    if (!(fwd.hidden_pre(i) > 0.0)) gh(i) = 0.0;
  }
  Eigen::Map<Eigen::MatrixXd>(g.data() + l.w1, params.hidden, params.input_size()) = gh * fwd.descriptor.transpose();
  g.segment(l.b1, params.hidden) = gh;
  return g;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw InvalidArgument("learning rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw InvalidArgument("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw InvalidArgument("weight decay must be non-negative");
  if (batch_size < 1) throw InvalidArgument("batch size must be positive");
  if (epochs < 0) throw InvalidArgument("epochs must be non-negative");
}

void grad_step(DetectorParams& params, const Eigen::VectorXd& gradient, const TrainConfig& cfg,
               Eigen::VectorXd& velocity) {
  if (gradient.size() != params.theta.size()) throw DimensionMismatch("gradient shape differs from parameters");
  if (velocity.size() == 0) velocity = Eigen::VectorXd::Zero(params.theta.size());
  if (velocity.size() != params.theta.size()) throw DimensionMismatch("velocity shape differs from parameters");
  velocity = cfg.momentum * velocity + gradient + cfg.weight_decay * params.theta;
  params.theta -= cfg.learning_rate * velocity;
}

double loss_self(const PointCloud& x, const Pose& t_hat, const CadModel& model, double c_bar) {
  return evaluate_model_fit(t_hat, x.points, model, c_bar, LossVariant::Robust, false).objective;
}

namespace {

struct SupFit {
  double value = 0.0;
  Eigen::Matrix3d grad_rotation = Eigen::Matrix3d::Zero();
  Eigen::Vector3d grad_translation = Eigen::Vector3d::Zero();
};

SupFit sup_fit(const Pose& t_hat, const Pose& t_prime, const CadModel& model, bool with_gradient) {
  const auto& b = model.dense_points();
  const KdTree& tree = model.index();
  const Eigen::Index m = b.cols();
  const Pose hat_in_prime = t_prime.inverse() * t_hat;
  const Pose prime_in_hat = t_hat.inverse() * t_prime;
  SupFit f;
  double a_sum = 0.0;
  double b_sum = 0.0;
  for (Eigen::Index i = 0; i < m; ++i) {
    const Eigen::Vector3d bi = b.col(i);
    const Neighbor nn = tree.nearest(hat_in_prime * bi);
    const Eigen::Vector3d r = t_hat * bi - t_prime * Eigen::Vector3d(b.col(nn.index));
    a_sum += r.squaredNorm();
    if (with_gradient) {
      f.grad_rotation.noalias() += 2.0 * r * bi.transpose();
      f.grad_translation += 2.0 * r;
    }
  }
  for (Eigen::Index j = 0; j < m; ++j) {
    const Eigen::Vector3d bj = b.col(j);
    const Neighbor nn = tree.nearest(prime_in_hat * bj);
    const Eigen::Vector3d bi = b.col(nn.index);
    const Eigen::Vector3d r = t_prime * bj - t_hat * bi;
    b_sum += r.squaredNorm();
    if (with_gradient) {
      f.grad_rotation.noalias() -= 2.0 * r * bi.transpose();
      f.grad_translation -= 2.0 * r;
    }
  }
  const double inv_m = 1.0 / static_cast<double>(m);
  f.value = a_sum * inv_m + b_sum * inv_m;
  f.grad_rotation *= inv_m;
  f.grad_translation *= inv_m;
  return f;
}

}  // namespace

double loss_sup(const Pose& t_hat, const Pose& t_prime, const CadModel& model) {
  return sup_fit(t_hat, t_prime, model, false).value;
}

Eigen::Matrix3Xd loss_self_gradient(const PointCloud& x, const Eigen::Matrix3Xd& y, const CadModel& model,
                                    double c_bar) {
  if (x.size() == 0) throw InvalidArgument("self loss needs a non-empty point cloud");
  const RegistrationDifferential reg = register_with_differential(y, model.keypoints().points);
  const ModelFit fit = evaluate_model_fit(reg.pose, x.points, model, c_bar, LossVariant::Robust, true);
  return reg.pullback(fit.grad_rotation, fit.grad_translation);
}

Eigen::Matrix3Xd loss_sup_gradient(const Eigen::Matrix3Xd& y, const Pose& t_prime, const CadModel& model) {
  const RegistrationDifferential reg = register_with_differential(y, model.keypoints().points);
  const SupFit fit = sup_fit(reg.pose, t_prime, model, true);
  return reg.pullback(fit.grad_rotation, fit.grad_translation);
}

EnsembleLoss ensemble_loss(const std::vector<ModelOutput>& outputs, const PointCloud& x, const CadModel& model,
                           double c_bar, GradientMode mode) {
  if (outputs.empty()) throw InvalidArgument("ensemble loss needs at least one model");
  EnsembleLoss loss;
  loss.grad.assign(outputs.size(), Eigen::Matrix3Xd::Zero(3, model.num_keypoints()));
  auto gradient_keypoints = [&](const ModelOutput& o) -> const Eigen::Matrix3Xd& {
    return mode == GradientMode::Corrected ? o.corrected.points : o.detected.points;
  };
  const double label_scale = 2.0 / static_cast<double>(model.num_keypoints());
  auto pseudo_label = [&](const ModelOutput& o, const Pose& target) -> Eigen::Matrix3Xd {
    return label_scale * (o.detected.points - apply_pose(target, model.keypoints().points));
  };
  for (std::size_t k = 0; k < outputs.size(); ++k) {
    const ModelOutput& target = outputs[k];
    if (!target.valid || !target.certificate.oc) continue;
    loss.self_loss += loss_self(x, target.corrected_pose, model, c_bar);
    if (mode == GradientMode::PseudoLabel) {
      loss.grad[k] += pseudo_label(target, target.corrected_pose);
    } else {
      try {
        loss.grad[k] += loss_self_gradient(x, gradient_keypoints(target), model, c_bar);
      } catch (const DegenerateConfiguration&) {
      }
    }
    for (std::size_t kp = 0; kp < outputs.size(); ++kp) {
      if (kp == k || !outputs[kp].valid) continue;
      loss.sup_loss += loss_sup(outputs[kp].corrected_pose, target.corrected_pose, model);
      if (mode == GradientMode::PseudoLabel) {
        loss.grad[kp] += pseudo_label(outputs[kp], target.corrected_pose);
        continue;
      }
      try {
        loss.grad[kp] += loss_sup_gradient(gradient_keypoints(outputs[kp]), target.corrected_pose, model);
      } catch (const DegenerateConfiguration&) {
      }
    }
  }
  loss.value = loss.self_loss + loss.sup_loss;
  return loss;
}

GradientMode parse_gradient_mode(const std::string& name) {
  if (name == "corrected") return GradientMode::Corrected;
  if (name == "detected") return GradientMode::Detected;
  if (name == "pseudo_label") return GradientMode::PseudoLabel;
  throw InvalidArgument("unknown gradient mode '" + name + "' (corrected, detected, pseudo_label)");
}

std::string to_string(GradientMode mode) {
  switch (mode) {
    case GradientMode::Corrected: return "corrected";
    case GradientMode::Detected: return "detected";
    case GradientMode::PseudoLabel: return "pseudo_label";
  }
  return "pseudo_label";
}

Pose ensemble_pose(const std::vector<ModelOutput>& outputs) {
  if (outputs.empty()) throw InvalidArgument("ensemble needs at least one model");
  for (const auto& o : outputs) {
    if (o.valid && o.certificate.oc) return o.corrected_pose;
  }
  return outputs.front().corrected_pose;
}

namespace {

struct DescriptorCache {
  Eigen::VectorXd descriptor;
  Eigen::Vector3d centroid;
  Eigen::Matrix3Xd target;
};

std::vector<DescriptorCache> cache_descriptors(const DetectorParams& params, const std::vector<SceneSample>& scenes,
                                               int workers) {
  std::vector<DescriptorCache> cache(scenes.size());
  parallel_for(scenes.size(), workers, [&](std::size_t i) {
    if (!scenes[i].keypoints_gt) throw InvalidArgument("supervised training needs ground-truth keypoints");
    cache[i].descriptor = detector_descriptor(params, scenes[i].x, &cache[i].centroid);
    cache[i].target = scenes[i].keypoints_gt->points;
  });
  return cache;
}

double normalised_mse(const Eigen::Matrix3Xd& a, const Eigen::Matrix3Xd& b, double scale) {
  return (a - b).squaredNorm() / (static_cast<double>(a.cols()) * scale * scale);
}

}  // namespace

double keypoint_mse(const DetectorParams& params, const std::vector<SceneSample>& scenes, int workers) {
  if (scenes.empty()) throw InvalidArgument("keypoint MSE needs scenes");
  std::vector<double> per(scenes.size());
  parallel_for(scenes.size(), workers, [&](std::size_t i) {
    if (!scenes[i].keypoints_gt) throw InvalidArgument("keypoint MSE needs ground-truth keypoints");
    per[i] = normalised_mse(detect(params, scenes[i].x).points, scenes[i].keypoints_gt->points, params.scale);
  });
  return std::accumulate(per.begin(), per.end(), 0.0) / static_cast<double>(per.size());
}

DetectorParams pretrain_supervised(const DetectorParams& params, const std::vector<SceneSample>& scenes,
                                   const TrainConfig& cfg, PretrainLog* log, int workers) {
  cfg.validate();
  params.validate();
  if (scenes.empty()) throw InvalidArgument("supervised training needs scenes");
  DetectorParams p = params;
  if (cfg.epochs == 0) return p;
  // Descriptors do not depend on the weights, so they are computed once.
  const auto cache = cache_descriptors(p, scenes, workers);
  Eigen::VectorXd velocity = Eigen::VectorXd::Zero(p.theta.size());
  std::vector<std::size_t> order(scenes.size());
  const double n_inv = 1.0 / static_cast<double>(p.num_keypoints);
  const double s2_inv = 1.0 / (p.scale * p.scale);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    auto rng = make_rng(cfg.seed, static_cast<std::uint64_t>(epoch) + 1);
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      Eigen::VectorXd grad = Eigen::VectorXd::Zero(p.theta.size());
      for (std::size_t b = start; b < end; ++b) {
        const DescriptorCache& c = cache[order[b]];
        const DetectorForward f = forward_from_descriptor(p, c.descriptor, c.centroid);
        const Eigen::Matrix3Xd diff = f.keypoints.points - c.target;
        epoch_loss += diff.squaredNorm() * n_inv * s2_inv;
        grad += detector_backward(p, f, 2.0 * n_inv * s2_inv * diff);
      }
      grad /= static_cast<double>(end - start);
      grad_step(p, grad, cfg, velocity);
    }
    if (log != nullptr) log->epoch_loss.push_back(epoch_loss / static_cast<double>(scenes.size()));
  }
  return p;
}

void SelfTrainConfig::validate() const {
  train.validate();
  if (iterations < 0) throw InvalidArgument("iterations must be non-negative");
  if (eval_every < 1) throw InvalidArgument("eval_every must be positive");
  if (corrector_points < 10) throw InvalidArgument("corrector_points must be at least 10");
}

namespace {

struct SceneRun {
  std::vector<ModelOutput> outputs;
  std::vector<DetectorForward> forwards;
  PointCloud subsample;
};

SceneRun run_scene(const std::vector<DetectorParams>& detectors, const PointCloud& x, const BinaryMask& mask,
                   const CadModel& model, const CameraIntrinsics& camera, const CorrectorConfig& corrector,
                   const CertificateConfig& cert, int corrector_points, std::uint64_t seed) {
  SceneRun run;
  run.subsample = x.size() > corrector_points ? random_sample(x, corrector_points, seed) : x;
  for (const auto& d : detectors) {
    ModelOutput o;
    DetectorForward f;
    try {
      f = detect_forward(d, x);
      o.detected = f.keypoints;
      const CorrectionResult c = solve_correction(o.detected, model, run.subsample, corrector);
      o.corrected = c.corrected_keypoints;
      o.corrected_pose = c.corrected_pose;
      o.certificate = observable_correctness(x, mask, o.corrected_pose, model, camera, cert);
    } catch (const Error&) {
      o.valid = false;
      o.certificate = CertificateResult{};
      if (o.detected.size() == 0) o.detected.points = Eigen::Matrix3Xd::Zero(3, model.num_keypoints());
      o.corrected = o.detected;
    }
    run.outputs.push_back(std::move(o));
    run.forwards.push_back(std::move(f));
  }
  return run;
}

std::uint64_t scene_stream(const SceneSample& s) { return derive_seed(s.seed, 0x5ab); }

}  // namespace

std::vector<ModelOutput> run_models(const std::vector<DetectorParams>& detectors, const PointCloud& x,
                                    const BinaryMask& mask, const CadModel& model, const CameraIntrinsics& camera,
                                    const CorrectorConfig& corrector, const CertificateConfig& cert,
                                    int corrector_points, std::uint64_t seed) {
  return run_scene(detectors, x, mask, model, camera, corrector, cert, corrector_points, seed).outputs;
}

EvaluationSummary evaluate_ensemble(const std::vector<DetectorParams>& detectors,
                                    const std::vector<SceneSample>& scenes, const CadModel& model,
                                    const CameraIntrinsics& camera, const CorrectorConfig& corrector,
                                    const CertificateConfig& cert, int corrector_points, int workers) {
  if (detectors.empty()) throw InvalidArgument("evaluation needs at least one detector");
  if (scenes.empty()) throw InvalidArgument("evaluation needs scenes");
  std::vector<std::vector<ModelOutput>> outs(scenes.size());
  EvaluationSummary s;
  s.adds.resize(scenes.size());
  parallel_for(scenes.size(), workers, [&](std::size_t i) {
    if (!scenes[i].pose_gt) throw InvalidArgument("evaluation needs ground-truth poses");
    outs[i] = run_models(detectors, scenes[i].x, scenes[i].mask, model, camera, corrector, cert, corrector_points,
                         scene_stream(scenes[i]));
    s.adds[i] = adds_metric(ensemble_pose(outs[i]), *scenes[i].pose_gt, model);
  });
  s.oc_fraction.assign(detectors.size(), 0.0);
  for (const auto& o : outs) {
    bool any = false;
    for (std::size_t k = 0; k < o.size(); ++k) {
      const bool ok = o[k].valid && o[k].certificate.oc;
      s.oc_fraction[k] += ok ? 1.0 : 0.0;
      any = any || ok;
    }
    s.ensemble_oc += any ? 1.0 : 0.0;
  }
  const auto n = static_cast<double>(scenes.size());
  for (auto& f : s.oc_fraction) f /= n;
  s.ensemble_oc /= n;
  s.mean_adds = std::accumulate(s.adds.begin(), s.adds.end(), 0.0) / n / model.diameter();
  return s;
}

std::vector<DetectorParams> self_train(const std::vector<DetectorParams>& detectors,
                                       const std::vector<SceneSample>& scenes, const CadModel& model,
                                       const CameraIntrinsics& camera, const CorrectorConfig& corrector,
                                       const CertificateConfig& cert, const SelfTrainConfig& cfg,
                                       const std::vector<SceneSample>& eval_scenes, TrainLog& log,
                                       const std::function<void(const TrainRecord&)>& progress) {
  cfg.validate();
  if (detectors.empty()) throw InvalidArgument("self-training needs at least one detector");
  if (scenes.empty() && cfg.iterations > 0) throw InvalidArgument("self-training needs scenes");
  for (const auto& d : detectors) {
    d.validate();
    if (d.num_keypoints != model.num_keypoints()) throw DimensionMismatch("detector keypoint count differs from model");
  }
  std::vector<DetectorParams> params = detectors;
  std::vector<Eigen::VectorXd> velocity(params.size());
  for (std::size_t k = 0; k < params.size(); ++k) velocity[k] = Eigen::VectorXd::Zero(params[k].theta.size());
  const std::size_t k_models = params.size();
  const double s2_inv = 1.0 / (model.diameter() * model.diameter());

  auto evaluate_into = [&](TrainRecord& r) {
    if (eval_scenes.empty()) return;
    const EvaluationSummary e =
        evaluate_ensemble(params, eval_scenes, model, camera, corrector, cert, cfg.corrector_points, cfg.workers);
    r.eval_oc = e.oc_fraction;
    r.eval_adds = e.mean_adds;
  };

  TrainRecord first;
  first.iteration = 0;
  first.oc_fraction.assign(k_models, 0.0);
  evaluate_into(first);
  log.records.push_back(first);
  if (progress) progress(first);

  const auto batch = static_cast<std::size_t>(cfg.train.batch_size);
  std::size_t cursor = 0;
  for (int it = 1; it <= cfg.iterations; ++it) {
    std::vector<SceneRun> runs(batch);
    std::vector<EnsembleLoss> losses(batch);
    std::vector<std::vector<Eigen::VectorXd>> grads(batch);
    parallel_for(batch, cfg.workers, [&](std::size_t b) {
      const SceneSample& s = scenes[(cursor + b) % scenes.size()];
      runs[b] = run_scene(params, s.x, s.mask, model, camera, corrector, cert, cfg.corrector_points, scene_stream(s));
      losses[b] = ensemble_loss(runs[b].outputs, runs[b].subsample, model, corrector.c_bar, cfg.gradient_mode);
      grads[b].resize(k_models);
      for (std::size_t k = 0; k < k_models; ++k) {
        if (!runs[b].outputs[k].valid || losses[b].grad[k].isZero(0.0)) continue;
        grads[b][k] = detector_backward(params[k], runs[b].forwards[k], losses[b].grad[k] * s2_inv);
      }
    });
    cursor = (cursor + batch) % scenes.size();

    TrainRecord rec;
    rec.iteration = it;
    rec.oc_fraction.assign(k_models, 0.0);
    bool any_certified = false;
    std::vector<Eigen::VectorXd> total(k_models);
    for (std::size_t k = 0; k < k_models; ++k) total[k] = Eigen::VectorXd::Zero(params[k].theta.size());
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t k = 0; k < k_models; ++k) {
        const bool ok = runs[b].outputs[k].valid && runs[b].outputs[k].certificate.oc;
        rec.oc_fraction[k] += ok ? 1.0 : 0.0;
        any_certified = any_certified || ok;
        if (grads[b][k].size() > 0) total[k] += grads[b][k];
      }
      rec.self_loss += losses[b].self_loss;
      rec.sup_loss += losses[b].sup_loss;
    }
    const auto nb = static_cast<double>(batch);
    for (auto& f : rec.oc_fraction) f /= nb;
    rec.self_loss /= nb;
    rec.sup_loss /= nb;
    if (any_certified) {
      for (std::size_t k = 0; k < k_models; ++k) grad_step(params[k], total[k] / nb, cfg.train, velocity[k]);
      rec.updated = true;
    }
    if (it % cfg.eval_every == 0 || it == cfg.iterations) evaluate_into(rec);
    log.records.push_back(rec);
    if (progress) progress(rec);
  }
  return params;
}

void save_detector(const std::filesystem::path& stem, const DetectorParams& params) {
  params.validate();
  auto bin = stem;
  bin += ".bin";
  auto header = stem;
  header += ".json";
  write_points_f32(bin, params.theta.transpose());
  nlohmann::json j{{"format", "f32le"},
                   {"weights", bin.filename().string()},
                   {"parameter_count", params.theta.size()},
                   {"fps_size", params.fps_size},
                   {"hidden", params.hidden},
                   {"num_keypoints", params.num_keypoints},
                   {"input_descriptor_size", params.input_size()},
                   {"scale", params.scale},
                   {"centroid_clamp", params.centroid_clamp},
                   {"descriptor_clip", params.descriptor_clip},
                   {"descriptor_order", to_string(params.descriptor_order)},
                   {"model_id", params.model_id},
                   {"seed", params.seed}};
  std::ofstream out(header);
  if (!out) throw IoError("cannot write " + header.string());
  out << j.dump(2) << '\n';
}

DetectorParams load_detector(const std::filesystem::path& stem) {
  auto header = stem;
  header += ".json";
  std::ifstream in(header);
  if (!in) throw IoError("cannot open " + header.string());
  DetectorParams p;
  try {
    nlohmann::json j;
    in >> j;
    p.fps_size = j.at("fps_size").get<int>();
    p.hidden = j.at("hidden").get<int>();
    p.num_keypoints = j.at("num_keypoints").get<int>();
    p.scale = j.at("scale").get<double>();
    p.centroid_clamp = j.at("centroid_clamp").get<double>();
    p.descriptor_clip = j.value("descriptor_clip", 1.0);
    p.descriptor_order = parse_descriptor_order(j.value("descriptor_order", std::string("sorted_projections")));
    p.model_id = j.value("model_id", std::string{});
    p.seed = j.value("seed", std::uint64_t{0});
    const Eigen::MatrixXd w = read_points_f32(header.parent_path() / j.at("weights").get<std::string>(), 1);
    p.theta = w.row(0).transpose();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(header.string() + ": " + e.what());
  }
  p.validate();
  return p;
}

void write_train_log_csv(const std::filesystem::path& path, const TrainLog& log, std::size_t num_models) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "iteration";
  for (std::size_t k = 0; k < num_models; ++k) out << ",oc_frac_model_" << k + 1;
  out << ",self_loss,sup_loss,updated,eval_adds";
  for (std::size_t k = 0; k < num_models; ++k) out << ",eval_oc_model_" << k + 1;
  out << '\n';
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return std::string(buf);
  };
  for (const auto& r : log.records) {
    out << r.iteration;
    for (std::size_t k = 0; k < num_models; ++k) out << ',' << num(k < r.oc_fraction.size() ? r.oc_fraction[k] : 0.0);
    out << ',' << num(r.self_loss) << ',' << num(r.sup_loss) << ',' << (r.updated ? 1 : 0) << ',';
    if (r.eval_adds >= 0.0) out << num(r.eval_adds);
    for (std::size_t k = 0; k < num_models; ++k) {
      out << ',';
      if (k < r.eval_oc.size()) out << num(r.eval_oc[k]);
    }
    out << '\n';
  }
}

}  // namespace robust_pose
