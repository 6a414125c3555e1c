#pragma once

#include "robust_pose/certificates.hpp"
#include "robust_pose/geometry.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <filesystem>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

namespace robust_pose {

enum class BuiltinKind { Box, Cylinder, LBracket };

[[nodiscard]] BuiltinKind parse_builtin_kind(const std::string& name);
[[nodiscard]] std::string to_string(BuiltinKind kind);

inline constexpr int kDefaultDenseSamples = 2048;

/// Deterministic stand-in CAD model. `size` is the bounding box (for the
/// cylinder: diameter, diameter, height). Keypoints: Box, the 8 corners;
/// Cylinder, 4 rim quadrant points and the 2 axis endpoints; LBracket, the
/// 12 prism corners. The keypoints are part of the dense sample.
[[nodiscard]] CadModel builtin_model(BuiltinKind kind, const Eigen::Vector3d& size, std::uint64_t seed = 0,
                                     int dense_samples = kDefaultDenseSamples);

struct PoseBounds {
  Eigen::Vector3d translation_min{-0.15, -0.1, 1.0};
  Eigen::Vector3d translation_max{0.15, 0.1, 3.0};
  /// Rotations are drawn uniformly over SO(3) when >= pi, otherwise as a
  /// uniform axis with angle uniform in [0, max_rotation_angle].
  double max_rotation_angle = std::numbers::pi;
};

struct MaskCorruption {
  int blob_count = 0;
  int blob_radius = 0;     ///< pixels
  int erosion_count = 0;
  int erosion_radius = 0;  ///< pixels

  [[nodiscard]] bool none() const { return (blob_count == 0 || blob_radius == 0) && (erosion_count == 0 || erosion_radius == 0); }
};

struct SceneConfig {
  CameraIntrinsics camera;
  PoseBounds pose_bounds;
  double gaussian_noise_std = 0.0;     ///< gamma, meters
  double outlier_rate = 0.0;           ///< eta in [0, 1)
  double outlier_box_scale = 2.0;
  double keypoint_noise_sigma = 0.0;   ///< fraction of D
  double keypoint_noise_prob = 0.8;
  MaskCorruption mask_corruption;
  double depth_band = 0.01;            ///< visibility band, fraction of D
  int mask_dilation_radius = 1;
  double splat_scale = 0.75;           ///< mask splat radius in sample spacings
  std::uint64_t seed = 0;
  int max_pose_retries = 100;

  void validate() const;
};

void to_json(nlohmann::json& j, const SceneConfig& c);
void from_json(const nlohmann::json& j, SceneConfig& c);
void to_json(nlohmann::json& j, const CameraIntrinsics& c);
void from_json(const nlohmann::json& j, CameraIntrinsics& c);

struct SceneSample {
  PointCloud x;
  BinaryMask mask;         ///< corrupted detected mask M
  BinaryMask mask_gt;      ///< M*
  std::optional<Pose> pose_gt;
  std::optional<KeypointSet> keypoints_gt;
  /// True for points that are not samples of the visible surface.
  std::vector<bool> outlier_flags;
  std::string model_id;
  std::uint64_t seed = 0;
};

/// Copy with the ground truth removed; training code must not need it.
[[nodiscard]] SceneSample strip_ground_truth(const SceneSample& s);

struct OcclusionParams {
  double depth_band = 0.0;    ///< meters
  double splat_radius = 0.0;  ///< meters, footprint of each point in the depth buffer
};

/// Depth-buffer visibility with surfel splats: each point covers a disk of
/// `splat_radius` lying in its tangent plane (a camera-facing disk when its
/// normal is zero or `normals` is empty). A point is kept when its own surfel
/// depth is within `depth_band` of the nearest surfel depth on its pixel.
/// Returns kept column indices (ascending). Throws EmptyProjection if nothing
/// is visible.
[[nodiscard]] std::vector<Eigen::Index> occlude_indices(const Eigen::Matrix3Xd& posed_dense,
                                                        const CameraIntrinsics& camera,
                                                        const OcclusionParams& params,
                                                        const Eigen::Matrix3Xd& normals = {});
[[nodiscard]] PointCloud occlude(const PointCloud& posed_dense, const CameraIntrinsics& camera,
                                 const OcclusionParams& params, const Eigen::Matrix3Xd& normals = {});
/// Visibility parameters derived from a model: band 0.01 D, splat 1.25 sample spacings.
[[nodiscard]] OcclusionParams occlusion_params_for(const CadModel& model, double depth_band_fraction = 0.01);

/// Adds iid N(0, gamma^2) to every coordinate.
[[nodiscard]] PointCloud inject_noise(const PointCloud& x, double gamma, std::uint64_t seed);

struct OutlierInjection {
  PointCloud cloud;
  std::vector<bool> flags;
};

/// Replaces floor(eta n) uniformly chosen points by uniform samples in the
/// cloud's bounding box scaled by `box_scale` about the cloud mean.
[[nodiscard]] OutlierInjection inject_outliers(const PointCloud& x, double eta, double box_scale, std::uint64_t seed);

/// Adds disc blobs touching the mask boundary and erodes discs around random
/// boundary pixels. Never returns an empty mask.
[[nodiscard]] BinaryMask corrupt_mask(const BinaryMask& mask_gt, const MaskCorruption& corruption, std::uint64_t seed);

struct LabeledCloud {
  PointCloud cloud;
  std::vector<bool> outlier_flags;
};

/// `inliers` points uniform in a ball of `ball_radius` about `center`, then
/// `outliers` points uniform in the axis-aligned cube of side `box_size`
/// centred at the origin.
[[nodiscard]] LabeledCloud ball_with_box_outliers(int inliers, int outliers, double ball_radius,
                                                  const Eigen::Vector3d& center, double box_size, std::uint64_t seed);

struct ColorImage {
  int width = 0;
  int height = 0;
  std::vector<Eigen::Vector3d> rgb;  // row-major

  [[nodiscard]] const Eigen::Vector3d& at(int u, int v) const {
    return rgb[static_cast<std::size_t>(v) * static_cast<std::size_t>(width) + static_cast<std::size_t>(u)];
  }
};

/// Masked pixels (u, v) with depth z > 0 become ((u-cx) z/fx, (v-cy) z/fy, z).
/// depth is height x width (row v, column u). Throws EmptyMask.
[[nodiscard]] PointCloud back_project(const Eigen::MatrixXd& depth, const BinaryMask& mask,
                                      const CameraIntrinsics& camera, const ColorImage* color = nullptr);

/// With probability f per keypoint, adds iid uniform noise in
/// [-sigma D / 2, sigma D / 2] to each coordinate.
[[nodiscard]] KeypointSet perturb_keypoints(const KeypointSet& y_star, double sigma, double f, double diameter,
                                            std::uint64_t seed);

[[nodiscard]] Pose sample_pose(const PoseBounds& bounds, std::mt19937_64& rng);

/// Full generative model: pose, ground-truth mask, visibility, mask
/// corruption with blob outliers, Gaussian noise and replaced outliers.
[[nodiscard]] SceneSample generate_scene(const CadModel& model, const SceneConfig& cfg, std::uint64_t seed);

/// Object colour used as point features: a smooth function of model-frame position.
[[nodiscard]] Eigen::Vector3d surface_color(const Eigen::Vector3d& model_point, double diameter);

// Dataset layout: manifest.json plus, per scene i, scene_XXXX.json,
// scene_XXXX_points.bin (little-endian f32 xyz), scene_XXXX_colors.bin,
// scene_XXXX_mask.pgm and scene_XXXX_mask_gt.pgm.
struct DatasetInfo {
  std::string model_spec;
  SceneConfig config;
  std::uint64_t seed = 0;
  int count = 0;
};

void write_scene(const std::filesystem::path& dir, const std::string& stem, const SceneSample& scene,
                 const CameraIntrinsics& camera);
/// Reads a scene record written by write_scene. Throws IoError on malformed input.
[[nodiscard]] SceneSample read_scene(const std::filesystem::path& scene_json, CameraIntrinsics* camera = nullptr);

void write_points_f32(const std::filesystem::path& path, const Eigen::MatrixXd& values);
[[nodiscard]] Eigen::MatrixXd read_points_f32(const std::filesystem::path& path, Eigen::Index rows);

}  // namespace robust_pose
