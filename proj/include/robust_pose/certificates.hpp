#pragma once

#include "robust_pose/geometry.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

namespace robust_pose {

struct CameraIntrinsics {
  double fx = 500.0;
  double fy = 500.0;
  double cx = 319.5;
  double cy = 239.5;
  int width = 640;
  int height = 480;

  void validate() const;
  /// Pixel coordinates (u, v) of a camera-frame point; z must be positive.
  [[nodiscard]] Eigen::Vector2d project(const Eigen::Vector3d& p) const {
    return {fx * p.x() / p.z() + cx, fy * p.y() / p.z() + cy};
  }
};

/// height x width boolean grid; pixel (u, v) is column u of row v.
class BinaryMask {
 public:
  BinaryMask() = default;
  BinaryMask(int width, int height) : width_(width), height_(height), data_(static_cast<std::size_t>(width) * height, 0) {}

  [[nodiscard]] int width() const { return width_; }
  [[nodiscard]] int height() const { return height_; }
  [[nodiscard]] bool in_bounds(int u, int v) const { return u >= 0 && v >= 0 && u < width_ && v < height_; }
  [[nodiscard]] bool at(int u, int v) const { return data_[offset(u, v)] != 0; }
  void set(int u, int v, bool value = true) { data_[offset(u, v)] = value ? 1 : 0; }
  [[nodiscard]] std::size_t area() const;
  [[nodiscard]] bool same_shape(const BinaryMask& other) const {
    return width_ == other.width_ && height_ == other.height_;
  }
  [[nodiscard]] const std::vector<std::uint8_t>& data() const { return data_; }
  bool operator==(const BinaryMask&) const = default;

 private:
  [[nodiscard]] std::size_t offset(int u, int v) const {
    return static_cast<std::size_t>(v) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(u);
  }
  int width_ = 0;
  int height_ = 0;
  std::vector<std::uint8_t> data_;
};

/// Setwise union with a (2r+1)x(2r+1) square structuring element.
[[nodiscard]] BinaryMask dilate(const BinaryMask& mask, int radius);
/// Pixel (u, v) nearest to a continuous image coordinate.
[[nodiscard]] inline std::pair<int, int> pixel_of(const Eigen::Vector2d& uv) {
  return {static_cast<int>(std::floor(uv.x() + 0.5)), static_cast<int>(std::floor(uv.y() + 0.5))};
}

struct CertificateConfig {
  double p = 0.9;
  double eps_3d = 0.0;  ///< meters
  double eps_2d = 0.10; ///< overlap slack (ratio)
  int dilation_radius = 1;
  /// Splat radius of each rendered model point, in units of the model's
  /// sample spacing.
  double splat_scale = 0.75;

  /// p = 0.9, eps_3d = 0.04 D, eps_2d = 0.10, radius 1.
  static CertificateConfig defaults_for(const CadModel& model);
  void validate() const;
};

struct CertificateResult {
  bool oc_3d = false;
  bool oc_2d = false;
  bool oc = false;
  double score_3d = 0.0;
  double score_2d = 0.0;
};

void to_json(nlohmann::json& j, const CertificateResult& r);

/// (percentile(nearest_distances(X, T B), p) < eps_3d, percentile value).
[[nodiscard]] std::pair<bool, double> cert_3d(const PointCloud& x, const Pose& pose, const CadModel& model,
                                              const CertificateConfig& cfg);

/// Point-splat rendering of the posed dense sample followed by dilation.
/// Points with z <= 0 are skipped; throws EmptyProjection when nothing lands
/// in the image.
[[nodiscard]] BinaryMask render_mask(const Pose& pose, const CadModel& model, const CameraIntrinsics& camera,
                                     const CertificateConfig& cfg);
/// Same, for explicit camera-frame points splatted with a world radius.
[[nodiscard]] BinaryMask render_points(const Eigen::Matrix3Xd& points, double splat_radius,
                                       const CameraIntrinsics& camera, int dilation_radius);

/// (|M n M_hat| / |M| > 1 - eps_2d, ratio). Throws EmptyDetectedMask when |M| = 0.
[[nodiscard]] std::pair<bool, double> cert_2d(const BinaryMask& detected, const BinaryMask& rendered,
                                              const CertificateConfig& cfg);

[[nodiscard]] CertificateResult observable_correctness(const PointCloud& x, const BinaryMask& detected,
                                                       const Pose& pose, const CadModel& model,
                                                       const CameraIntrinsics& camera,
                                                       const CertificateConfig& cfg);

/// P5 with values 0/255.
void write_pgm(const std::filesystem::path& path, const BinaryMask& mask);
/// Any non-zero pixel reads as set. Throws IoError on malformed input.
[[nodiscard]] BinaryMask read_pgm(const std::filesystem::path& path);

}  // namespace robust_pose
