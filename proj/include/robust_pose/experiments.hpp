#pragma once

#include "robust_pose/certificates.hpp"
#include "robust_pose/corrector.hpp"
#include "robust_pose/ensemble.hpp"
#include "robust_pose/synth.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace robust_pose {

enum class ExperimentKind { CorrectorAnalysis, CorrectorRobustness, CentroidRobustness, SelfTrain, Certify, GenScenes };

[[nodiscard]] ExperimentKind parse_experiment_kind(const std::string& name);
[[nodiscard]] std::string to_string(ExperimentKind kind);

/// Corrector settings relative to the model diameter D; step_size 0 means N.
struct CorrectorSettings {
  double c_bar = 0.1;
  double grad_tol = 1e-4;
  double step_size = 0.0;
  int max_iters = 100;
  int max_halvings = 10;

  [[nodiscard]] CorrectorConfig resolve(const CadModel& model, LossVariant variant = LossVariant::Robust) const;
};

/// Certificate settings; eps_3d is a fraction of D.
struct CertificateSettings {
  double p = 0.9;
  double eps_3d = 0.04;
  double eps_2d = 0.10;
  int dilation_radius = 1;
  double splat_scale = 0.75;

  [[nodiscard]] CertificateConfig resolve(const CadModel& model) const;
};

/// 70/30-style clouds: inliers in a ball, outliers in a cube about the origin.
struct CentroidSettings {
  int points = 100;
  double inlier_radius = 0.02;
  Eigen::Vector3d center{1.0, 1.0, 1.0};
  double outlier_box = 2.0;
  double c_bar = 0.1;
  int pool_size = 32;
  int training_clouds = 20;
  int mlp_epochs = 200;
};

struct SelfTrainSettings {
  int models = 2;
  SceneConfig sim;
  SceneConfig real;
  int pretrain_scenes = 500;
  int pretrain_epochs = 100;
  int pool_scenes = 1000;
  int eval_scenes = 100;
  int comparison_scenes = 200;
  int iterations = 3000;
  int check_iterations = 300;
  int eval_every = 50;
  double learning_rate = 2e-2;
  double momentum = 0.9;
  double weight_decay = 1e-5;
  int batch_size = 20;
  int corrector_points = 150;
  GradientMode gradient_mode = GradientMode::PseudoLabel;
  int fps_size = 64;
  int hidden = 64;
  double success_threshold = 0.05;  ///< threshold-ADD-S, fraction of D
};

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::CorrectorAnalysis;
  std::string model = "box";
  std::uint64_t seed = 0;
  std::vector<double> grid;
  int trials = 100;
  int check_trials = 40;
  double keypoint_noise_prob = 0.8;  ///< f
  double sigma = 0.4;                ///< fixed keypoint noise of the outlier sweep
  SceneConfig scene;
  CorrectorSettings corrector;
  CertificateSettings certificate;
  CentroidSettings centroid;
  SelfTrainSettings selftrain;
  std::string scene_path;  ///< certify: scene JSON written by gen-scenes
  std::string pose_path;   ///< certify: pose JSON {"rotation": [...], "translation": [...]}, or an object holding "pose" or "pose_gt"
  int count = 10;          ///< gen-scenes
  // Run settings; they never change any output.
  std::filesystem::path out_dir = "out";
  int workers = 1;
  bool check = false;

  /// Defaults of one subcommand (grid, certificate p and scene domains).
  static ExperimentConfig defaults(ExperimentKind kind);
  void validate() const;
  /// Resolved config echoed into every manifest; excludes the run settings.
  [[nodiscard]] nlohmann::json to_json() const;
};

/// Applies the keys of `j` on top of `cfg`. Unknown keys are rejected with InvalidArgument.
void apply_config_json(ExperimentConfig& cfg, const nlohmann::json& j);

struct CheckOutcome {
  std::string name;
  double value = 0.0;
  double threshold = 0.0;
  bool pass = false;
};

struct ExperimentResult {
  nlohmann::json summary;
  std::vector<CheckOutcome> checks;  ///< filled in check mode

  [[nodiscard]] bool passed() const;
};

/// Runs one subcommand and writes its outputs plus manifest.json into cfg.out_dir.
[[nodiscard]] ExperimentResult run_experiment(const ExperimentConfig& cfg);

/// Shortest round-trip decimal form; used for every CSV number.
[[nodiscard]] std::string format_number(double v);

struct MethodScore {
  std::string method;
  std::string model;  ///< detector index, or "ensemble"
  double threshold_adds = 0.0;  ///< fraction of scenes with ADD-S below the threshold
  double mean_adds = 0.0;       ///< normalised by D
  double auc = 0.0;             ///< ADD-S AUC up to 0.1 D
  double oc_fraction = 0.0;
  int count = 0;
};

/// Scores the detectors on scenes with ground truth. Without the corrector the
/// pose is the registration of the detections; with it, the corrected pose
/// (plus an "ensemble" row).
[[nodiscard]] std::vector<MethodScore> score_detectors(const std::string& method,
                                                       const std::vector<DetectorParams>& detectors,
                                                       const std::vector<SceneSample>& scenes, const CadModel& model,
                                                       const CameraIntrinsics& camera,
                                                       const CorrectorConfig& corrector,
                                                       const CertificateConfig& cert, int corrector_points,
                                                       bool with_corrector, double success_threshold, int workers);

/// Scenes derive_seed(base, i) for i < n.
[[nodiscard]] std::vector<SceneSample> generate_scenes(const CadModel& model, const SceneConfig& cfg, int n,
                                                       std::uint64_t base, int workers);

}  // namespace robust_pose
