#pragma once

#include "robust_pose/certificates.hpp"
#include "robust_pose/corrector.hpp"
#include "robust_pose/geometry.hpp"
#include "robust_pose/synth.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace robust_pose {

/// Layout of the FPS subsample inside the descriptor.
enum class DescriptorOrder {
  SortedProjections,  ///< per direction in projection_directions(), sorted projections
  Selection,          ///< point by point in FPS selection order
};

/// The 13 unit directions (3 axes, 6 face diagonals, 4 body diagonals).
[[nodiscard]] const Eigen::Matrix<double, 3, 13>& projection_directions();

[[nodiscard]] DescriptorOrder parse_descriptor_order(const std::string& name);
[[nodiscard]] std::string to_string(DescriptorOrder order);

/// Keypoint regressor: descriptor (FPS subsample about the robust centroid,
/// scaled by 1/scale) -> affine -> ReLU -> affine -> 3N offsets. Detections
/// are centroid + scale * offsets. All weights live in one flat vector.
struct DetectorParams {
  Eigen::VectorXd theta;
  int fps_size = 64;
  int hidden = 64;
  int num_keypoints = 0;
  double scale = 1.0;           ///< object diameter; descriptor and output unit
  double centroid_clamp = 0.5;  ///< GNC clamp, fraction of scale
  double descriptor_clip = 1.0; ///< descriptor entries are clipped to +-clip (units of scale)
  DescriptorOrder descriptor_order = DescriptorOrder::SortedProjections;
  std::string model_id;
  std::uint64_t seed = 0;

  /// He-initialised hidden layer, output layer scaled down by `output_gain`.
  static DetectorParams random(const CadModel& model, std::uint64_t seed, int fps_size = 64, int hidden = 64,
                               double output_gain = 0.1);
  static DetectorParams zeros(const CadModel& model, int fps_size = 64, int hidden = 64);

  [[nodiscard]] int input_size() const {
    return (descriptor_order == DescriptorOrder::Selection ? 3 : 13) * fps_size;
  }
  [[nodiscard]] int output_size() const { return 3 * num_keypoints; }
  [[nodiscard]] Eigen::Index parameter_count() const;
  void validate() const;

  [[nodiscard]] Eigen::Map<const Eigen::MatrixXd> w1() const;
  [[nodiscard]] Eigen::Map<const Eigen::VectorXd> b1() const;
  [[nodiscard]] Eigen::Map<const Eigen::MatrixXd> w2() const;
  [[nodiscard]] Eigen::Map<const Eigen::VectorXd> b2() const;
};

/// Everything the backward pass needs from one forward pass.
struct DetectorForward {
  KeypointSet keypoints;
  Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
  Eigen::VectorXd descriptor;
  Eigen::VectorXd hidden_pre;
};

[[nodiscard]] Eigen::VectorXd detector_descriptor(const DetectorParams& params, const PointCloud& x,
                                                  Eigen::Vector3d* centroid = nullptr);
[[nodiscard]] DetectorForward detect_forward(const DetectorParams& params, const PointCloud& x);
[[nodiscard]] KeypointSet detect(const DetectorParams& params, const PointCloud& x);
/// dL/dtheta from dL/d(keypoints); the descriptor is treated as input data.
[[nodiscard]] Eigen::VectorXd detector_backward(const DetectorParams& params, const DetectorForward& fwd,
                                                const Eigen::Matrix3Xd& grad_keypoints);

struct TrainConfig {
  double learning_rate = 2e-2;
  double momentum = 0.9;
  double weight_decay = 1e-5;
  int batch_size = 20;
  int epochs = 1;
  std::uint64_t seed = 0;

  void validate() const;
};

/// v <- momentum v + g + weight_decay theta; theta <- theta - lr v.
void grad_step(DetectorParams& params, const Eigen::VectorXd& gradient, const TrainConfig& cfg,
               Eigen::VectorXd& velocity);

/// (1/n) sum_i tls(min_j |X_i - T_hat B_j|, c_bar).
[[nodiscard]] double loss_self(const PointCloud& x, const Pose& t_hat, const CadModel& model, double c_bar);
/// Bidirectional mean squared closest-point distance between the posed dense samples.
[[nodiscard]] double loss_sup(const Pose& t_hat, const Pose& t_prime, const CadModel& model);

/// Gradients with respect to the keypoints y registered to T_hat = reg(y),
/// nearest-neighbour correspondences frozen at the evaluation point.
[[nodiscard]] Eigen::Matrix3Xd loss_self_gradient(const PointCloud& x, const Eigen::Matrix3Xd& y,
                                                  const CadModel& model, double c_bar);
/// Only T_hat = reg(y) is differentiated; t_prime is a constant target.
[[nodiscard]] Eigen::Matrix3Xd loss_sup_gradient(const Eigen::Matrix3Xd& y, const Pose& t_prime,
                                                 const CadModel& model);

/// How the gated ensemble loss is turned into keypoint gradients.
enum class GradientMode {
  Corrected,    ///< loss gradients at the corrected keypoints, passed through unchanged
  Detected,     ///< loss gradients at the detections, against the corrected targets
  PseudoLabel,  ///< each gated term pulls the detections toward its target's posed model keypoints
};

[[nodiscard]] GradientMode parse_gradient_mode(const std::string& name);
[[nodiscard]] std::string to_string(GradientMode mode);

struct ModelOutput {
  KeypointSet detected;
  KeypointSet corrected;
  Pose corrected_pose;
  CertificateResult certificate;
  bool valid = true;  ///< false when detection or correction failed
};

struct EnsembleLoss {
  double value = 0.0;
  double self_loss = 0.0;  ///< sum of gated self terms
  double sup_loss = 0.0;   ///< sum of gated supervision terms
  std::vector<Eigen::Matrix3Xd> grad;  ///< per model, dL/d(keypoints)
};

/// sum_k oc_k [loss_self(X, T_k) + sum_{k' != k} loss_sup(T_k', T_k)]; the
/// supervision term only produces gradient for model k'. In PseudoLabel mode
/// the self term of model k has gradient 2 (y_k - T_k b) / N and the
/// supervision term 2 (y_k' - T_k b) / N, y being the detections.
[[nodiscard]] EnsembleLoss ensemble_loss(const std::vector<ModelOutput>& outputs, const PointCloud& x,
                                         const CadModel& model, double c_bar,
                                         GradientMode mode = GradientMode::PseudoLabel);

/// First certified corrected pose in declared order, else model 0's.
[[nodiscard]] Pose ensemble_pose(const std::vector<ModelOutput>& outputs);

struct PretrainLog {
  std::vector<double> epoch_loss;  ///< mean normalised keypoint MSE per epoch, before the epoch's updates
};

/// SGD on |detect(X) - y*|^2 / (N scale^2).
[[nodiscard]] DetectorParams pretrain_supervised(const DetectorParams& params, const std::vector<SceneSample>& scenes,
                                                 const TrainConfig& cfg, PretrainLog* log = nullptr,
                                                 int workers = 1);

/// Mean normalised keypoint MSE of a detector over scenes with ground truth.
[[nodiscard]] double keypoint_mse(const DetectorParams& params, const std::vector<SceneSample>& scenes,
                                  int workers = 1);

struct SelfTrainConfig {
  TrainConfig train;
  int iterations = 300;
  int eval_every = 50;
  int corrector_points = 250;  ///< cloud subsample used by the corrector
  GradientMode gradient_mode = GradientMode::PseudoLabel;
  int workers = 1;

  void validate() const;
};

struct TrainRecord {
  int iteration = 0;
  std::vector<double> oc_fraction;  ///< per model, on the current batch
  double self_loss = 0.0;           ///< batch mean
  double sup_loss = 0.0;            ///< batch mean
  double eval_adds = -1.0;          ///< mean normalised ADD-S on the evaluation set, -1 when not evaluated
  std::vector<double> eval_oc;      ///< per model on the evaluation set, empty when not evaluated
  bool updated = false;             ///< false when the batch had no certified instance
};

struct TrainLog {
  std::vector<TrainRecord> records;
};

/// Runs detect, correct and certify for every model on one scene.
[[nodiscard]] std::vector<ModelOutput> run_models(const std::vector<DetectorParams>& detectors, const PointCloud& x,
                                                  const BinaryMask& mask, const CadModel& model,
                                                  const CameraIntrinsics& camera, const CorrectorConfig& corrector,
                                                  const CertificateConfig& cert, int corrector_points,
                                                  std::uint64_t seed);

struct EvaluationSummary {
  std::vector<double> oc_fraction;  ///< per model
  double ensemble_oc = 0.0;
  double mean_adds = 0.0;           ///< ensemble output, normalised by D
  std::vector<double> adds;         ///< per scene, ensemble output, meters
};

/// Evaluates the certified ensemble on scenes; ADD-S uses the ground truth.
[[nodiscard]] EvaluationSummary evaluate_ensemble(const std::vector<DetectorParams>& detectors,
                                                  const std::vector<SceneSample>& scenes, const CadModel& model,
                                                  const CameraIntrinsics& camera, const CorrectorConfig& corrector,
                                                  const CertificateConfig& cert, int corrector_points, int workers);

/// Certificate-gated self-training. `scenes` is cycled in order, batch by
/// batch; its ground truth is never read. `eval_scenes` (may be empty) only
/// feed the log.
[[nodiscard]] std::vector<DetectorParams> self_train(const std::vector<DetectorParams>& detectors,
                                                     const std::vector<SceneSample>& scenes, const CadModel& model,
                                                     const CameraIntrinsics& camera,
                                                     const CorrectorConfig& corrector, const CertificateConfig& cert,
                                                     const SelfTrainConfig& cfg,
                                                     const std::vector<SceneSample>& eval_scenes, TrainLog& log,
                                                     const std::function<void(const TrainRecord&)>& progress = {});

/// `<stem>.json` header plus `<stem>.bin` little-endian f32 weights.
void save_detector(const std::filesystem::path& stem, const DetectorParams& params);
[[nodiscard]] DetectorParams load_detector(const std::filesystem::path& stem);

void write_train_log_csv(const std::filesystem::path& path, const TrainLog& log, std::size_t num_models);

}  // namespace robust_pose
