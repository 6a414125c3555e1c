#include "robust_pose/synth.hpp"

#include "robust_pose/model_io.hpp"
#include "robust_pose/random.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>

namespace robust_pose {

BuiltinKind parse_builtin_kind(const std::string& name) {
  if (name == "box" || name == "Box") return BuiltinKind::Box;
  if (name == "cylinder" || name == "Cylinder") return BuiltinKind::Cylinder;
  if (name == "lbracket" || name == "LBracket" || name == "l_bracket") return BuiltinKind::LBracket;
  throw InvalidArgument("unknown builtin model '" + name + "'");
}

std::string to_string(BuiltinKind kind) {
  switch (kind) {
    case BuiltinKind::Box: return "box";
    case BuiltinKind::Cylinder: return "cylinder";
    case BuiltinKind::LBracket: return "lbracket";
  }
  return "box";
}

namespace {

struct Patch {
  std::function<Eigen::Vector3d(double, double)> map;
  double area = 0.0;
  std::function<Eigen::Vector3d(double, double)> normal;
};

Patch rectangle(const Eigen::Vector3d& origin, const Eigen::Vector3d& edge_u, const Eigen::Vector3d& edge_v) {
  const Eigen::Vector3d n = edge_u.cross(edge_v).normalized();
  return {[=](double u, double v) -> Eigen::Vector3d { return origin + u * edge_u + v * edge_v; },
          edge_u.cross(edge_v).norm(), [=](double, double) -> Eigen::Vector3d { return n; }};
}

struct SurfaceSample {
  Eigen::Matrix3Xd points;
  Eigen::Matrix3Xd normals;
};

double radical_inverse_base2(std::uint32_t b) {
  b = (b << 16u) | (b >> 16u);
  b = ((b & 0x55555555u) << 1u) | ((b & 0xAAAAAAAAu) >> 1u);
  b = ((b & 0x33333333u) << 2u) | ((b & 0xCCCCCCCCu) >> 2u);
  b = ((b & 0x0F0F0F0Fu) << 4u) | ((b & 0xF0F0F0F0u) >> 4u);
  b = ((b & 0x00FF00FFu) << 8u) | ((b & 0xFF00FF00u) >> 8u);
  return static_cast<double>(b) * 2.3283064365386963e-10;
}

/// Hammersley points on the patches, counts proportional to area (largest
/// remainder), shifted by a seed-dependent Cranley-Patterson rotation.
SurfaceSample sample_patches(const std::vector<Patch>& patches, int total, std::uint64_t seed) {
  const double area = std::accumulate(patches.begin(), patches.end(), 0.0,
                                      [](double acc, const Patch& p) { return acc + p.area; });
  std::vector<int> counts(patches.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  int assigned = 0;
  for (std::size_t k = 0; k < patches.size(); ++k) {
    const double exact = total * patches[k].area / area;
    counts[k] = static_cast<int>(std::floor(exact));
    assigned += counts[k];
    remainders.emplace_back(exact - counts[k], k);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (int r = 0; assigned < total; ++r, ++assigned) ++counts[remainders[static_cast<std::size_t>(r) % remainders.size()].second];

  auto rng = make_rng(seed, 0xca);
  SurfaceSample out{Eigen::Matrix3Xd(3, total), Eigen::Matrix3Xd(3, total)};
  Eigen::Index col = 0;
  for (std::size_t k = 0; k < patches.size(); ++k) {
    const double su = uniform01(rng);
    const double sv = uniform01(rng);
    for (int i = 0; i < counts[k]; ++i) {
      double u = (i + 0.5) / counts[k] + su;
      double v = radical_inverse_base2(static_cast<std::uint32_t>(i)) + sv;
      u -= std::floor(u);
      v -= std::floor(v);
      out.points.col(col) = patches[k].map(u, v);
      out.normals.col(col++) = patches[k].normal(u, v);
    }
  }
  return out;
}

Eigen::Matrix3Xd concat(const Eigen::Matrix3Xd& a, const Eigen::Matrix3Xd& b) {
  Eigen::Matrix3Xd out(3, a.cols() + b.cols());
  out << a, b;
  return out;
}

// Samples on edges and corners carry no normal.
Eigen::Matrix3Xd with_edge_normals(const Eigen::Matrix3Xd& surface_normals, Eigen::Index edge_samples) {
  return concat(surface_normals, Eigen::Matrix3Xd::Zero(3, edge_samples));
}

CadModel make_box(const Eigen::Vector3d& s, std::uint64_t seed, int samples) {
  const Eigen::Vector3d h = s / 2.0;
  Eigen::Matrix3Xd corners(3, 8);
  for (int i = 0; i < 8; ++i) {
    corners.col(i) = Eigen::Vector3d((i & 1) ? h.x() : -h.x(), (i & 2) ? h.y() : -h.y(), (i & 4) ? h.z() : -h.z());
  }
  const Eigen::Vector3d ex(s.x(), 0, 0);
  const Eigen::Vector3d ey(0, s.y(), 0);
  const Eigen::Vector3d ez(0, 0, s.z());
  const Eigen::Vector3d lo = -h;
  std::vector<Patch> faces = {
      rectangle(lo, ey, ez), rectangle(lo + ex, ey, ez),  // x faces
      rectangle(lo, ex, ez), rectangle(lo + ey, ex, ez),  // y faces
      rectangle(lo, ex, ey), rectangle(lo + ez, ex, ey),  // z faces
  };
  const SurfaceSample surface = sample_patches(faces, samples - 8, seed);
  return CadModel(concat(surface.points, corners), KeypointSet{corners}, 0.0, "box",
                  with_edge_normals(surface.normals, 8));
}

CadModel make_cylinder(const Eigen::Vector3d& s, std::uint64_t seed, int samples) {
  const double r = s.x() / 2.0;
  const double hz = s.z() / 2.0;
  const double two_pi = 2.0 * std::numbers::pi;
  Eigen::Matrix3Xd kp(3, 6);
  kp.col(0) = Eigen::Vector3d(r, 0, hz);
  kp.col(1) = Eigen::Vector3d(0, r, hz);
  kp.col(2) = Eigen::Vector3d(-r, 0, -hz);
  kp.col(3) = Eigen::Vector3d(0, -r, -hz);
  kp.col(4) = Eigen::Vector3d(0, 0, hz);
  kp.col(5) = Eigen::Vector3d(0, 0, -hz);

  // Rims sampled explicitly so antipodal top/bottom pairs realise the diameter.
  const int rim = 64;
  Eigen::Matrix3Xd rims(3, 2 * rim);
  for (int i = 0; i < rim; ++i) {
    const double a = two_pi * i / rim;
    rims.col(i) = Eigen::Vector3d(r * std::cos(a), r * std::sin(a), hz);
    rims.col(rim + i) = Eigen::Vector3d(r * std::cos(a), r * std::sin(a), -hz);
  }
  std::vector<Patch> patches;
  patches.push_back({[=](double u, double v) -> Eigen::Vector3d {
                       return {r * std::cos(two_pi * u), r * std::sin(two_pi * u), -hz + 2.0 * hz * v};
                     },
                     two_pi * r * 2.0 * hz,
                     [=](double u, double) -> Eigen::Vector3d {
                       return {std::cos(two_pi * u), std::sin(two_pi * u), 0.0};
                     }});
  for (double z : {hz, -hz}) {
    patches.push_back({[=](double u, double v) -> Eigen::Vector3d {
                         const double rr = r * std::sqrt(u);
                         return {rr * std::cos(two_pi * v), rr * std::sin(two_pi * v), z};
                       },
                       std::numbers::pi * r * r,
                       [=](double, double) -> Eigen::Vector3d { return {0.0, 0.0, z > 0.0 ? 1.0 : -1.0}; }});
  }
  const SurfaceSample surface = sample_patches(patches, samples - 6 - 2 * rim, seed);
  return CadModel(concat(concat(surface.points, rims), kp), KeypointSet{kp}, 0.0, "cylinder",
                  with_edge_normals(surface.normals, 2 * rim + 6));
}

CadModel make_lbracket(const Eigen::Vector3d& s, std::uint64_t seed, int samples) {
  const double t = 0.35 * std::min(s.x(), s.z());
  // L profile in the x-z plane, extruded along y.
  const std::vector<Eigen::Vector2d> poly = {{0, 0}, {s.x(), 0}, {s.x(), t}, {t, t}, {t, s.z()}, {0, s.z()}};
  const Eigen::Vector3d shift(-s.x() / 2.0, -s.y() / 2.0, -s.z() / 2.0);
  auto lift = [&](const Eigen::Vector2d& p, double y) { return Eigen::Vector3d(p.x(), y, p.y()) + shift; };

  Eigen::Matrix3Xd kp(3, 12);
  for (std::size_t i = 0; i < poly.size(); ++i) {
    kp.col(static_cast<Eigen::Index>(i)) = lift(poly[i], 0.0);
    kp.col(static_cast<Eigen::Index>(i + 6)) = lift(poly[i], s.y());
  }
  std::vector<Patch> patches;
  const Eigen::Vector3d ey(0, s.y(), 0);
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Eigen::Vector3d a = lift(poly[i], 0.0);
    const Eigen::Vector3d b = lift(poly[(i + 1) % poly.size()], 0.0);
    patches.push_back(rectangle(a, b - a, ey));
  }
  for (double y : {0.0, s.y()}) {
    patches.push_back(rectangle(lift({0, 0}, y), Eigen::Vector3d(s.x(), 0, 0), Eigen::Vector3d(0, 0, t)));
    patches.push_back(rectangle(lift({0, t}, y), Eigen::Vector3d(t, 0, 0), Eigen::Vector3d(0, 0, s.z() - t)));
  }
  const SurfaceSample surface = sample_patches(patches, samples - 12, seed);
  return CadModel(concat(surface.points, kp), KeypointSet{kp}, 0.0, "lbracket",
                  with_edge_normals(surface.normals, 12));
}

}  // namespace

CadModel builtin_model(BuiltinKind kind, const Eigen::Vector3d& size, std::uint64_t seed, int dense_samples) {
  if (!(size.array() > 0.0).all()) throw InvalidArgument("builtin model sizes must be positive");
  if (dense_samples < 256) throw InvalidArgument("builtin models need at least 256 dense samples");
  switch (kind) {
    case BuiltinKind::Box: return make_box(size, seed, dense_samples);
    case BuiltinKind::Cylinder: return make_cylinder(size, seed, dense_samples);
    case BuiltinKind::LBracket: return make_lbracket(size, seed, dense_samples);
  }
  throw InvalidArgument("unknown builtin kind");
}

void SceneConfig::validate() const {
  camera.validate();
  if (!(gaussian_noise_std >= 0.0)) throw InvalidArgument("gaussian noise std must be non-negative");
  if (!(outlier_rate >= 0.0 && outlier_rate < 1.0)) throw InvalidArgument("outlier rate must lie in [0, 1)");
  if (!(outlier_box_scale >= 1.0)) throw InvalidArgument("outlier box scale must be >= 1");
  if (!(keypoint_noise_sigma >= 0.0)) throw InvalidArgument("keypoint noise sigma must be non-negative");
  if (!(keypoint_noise_prob >= 0.0 && keypoint_noise_prob <= 1.0)) {
    throw InvalidArgument("keypoint noise probability must lie in [0, 1]");
  }
  if (!(pose_bounds.translation_min.array() <= pose_bounds.translation_max.array()).all()) {
    throw InvalidArgument("pose bounds: min exceeds max");
  }
  if (!(pose_bounds.translation_min.z() > 0.0)) throw InvalidArgument("pose bounds must keep the object in front of the camera");
  if (!(pose_bounds.max_rotation_angle >= 0.0)) throw InvalidArgument("max rotation angle must be non-negative");
  if (mask_corruption.blob_count < 0 || mask_corruption.blob_radius < 0 || mask_corruption.erosion_count < 0 ||
      mask_corruption.erosion_radius < 0) {
    throw InvalidArgument("mask corruption parameters must be non-negative");
  }
  if (!(depth_band > 0.0)) throw InvalidArgument("depth band must be positive");
  if (mask_dilation_radius < 0) throw InvalidArgument("mask dilation radius must be non-negative");
  if (max_pose_retries < 1) throw InvalidArgument("max pose retries must be at least 1");
}

void to_json(nlohmann::json& j, const CameraIntrinsics& c) {
  j = nlohmann::json{{"fx", c.fx}, {"fy", c.fy}, {"cx", c.cx}, {"cy", c.cy}, {"width", c.width}, {"height", c.height}};
}

void from_json(const nlohmann::json& j, CameraIntrinsics& c) {
  c.fx = j.value("fx", c.fx);
  c.fy = j.value("fy", c.fy);
  c.cx = j.value("cx", c.cx);
  c.cy = j.value("cy", c.cy);
  c.width = j.value("width", c.width);
  c.height = j.value("height", c.height);
}

namespace {

nlohmann::json vec_json(const Eigen::Vector3d& v) { return nlohmann::json::array({v.x(), v.y(), v.z()}); }

Eigen::Vector3d vec_from(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) throw InvalidArgument("expected a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

}  // namespace

void to_json(nlohmann::json& j, const SceneConfig& c) {
  j = nlohmann::json{
      {"camera", c.camera},
      {"pose_bounds",
       {{"translation_min", vec_json(c.pose_bounds.translation_min)},
        {"translation_max", vec_json(c.pose_bounds.translation_max)},
        {"max_rotation_angle", c.pose_bounds.max_rotation_angle}}},
      {"gaussian_noise_std", c.gaussian_noise_std},
      {"outlier_rate", c.outlier_rate},
      {"outlier_box_scale", c.outlier_box_scale},
      {"keypoint_noise_sigma", c.keypoint_noise_sigma},
      {"keypoint_noise_prob", c.keypoint_noise_prob},
      {"mask_corruption",
       {{"blob_count", c.mask_corruption.blob_count},
        {"blob_radius", c.mask_corruption.blob_radius},
        {"erosion_count", c.mask_corruption.erosion_count},
        {"erosion_radius", c.mask_corruption.erosion_radius}}},
      {"depth_band", c.depth_band},
      {"mask_dilation_radius", c.mask_dilation_radius},
      {"splat_scale", c.splat_scale},
      {"seed", c.seed},
      {"max_pose_retries", c.max_pose_retries}};
}

void from_json(const nlohmann::json& j, SceneConfig& c) {
  if (!j.is_object()) throw InvalidArgument("scene config must be an object");
  if (j.contains("camera")) c.camera = j.at("camera").get<CameraIntrinsics>();
  if (j.contains("pose_bounds")) {
    const auto& b = j.at("pose_bounds");
    if (b.contains("translation_min")) c.pose_bounds.translation_min = vec_from(b.at("translation_min"));
    if (b.contains("translation_max")) c.pose_bounds.translation_max = vec_from(b.at("translation_max"));
    c.pose_bounds.max_rotation_angle = b.value("max_rotation_angle", c.pose_bounds.max_rotation_angle);
  }
  c.gaussian_noise_std = j.value("gaussian_noise_std", c.gaussian_noise_std);
  c.outlier_rate = j.value("outlier_rate", c.outlier_rate);
  c.outlier_box_scale = j.value("outlier_box_scale", c.outlier_box_scale);
  c.keypoint_noise_sigma = j.value("keypoint_noise_sigma", c.keypoint_noise_sigma);
  c.keypoint_noise_prob = j.value("keypoint_noise_prob", c.keypoint_noise_prob);
  if (j.contains("mask_corruption")) {
    const auto& m = j.at("mask_corruption");
    c.mask_corruption.blob_count = m.value("blob_count", c.mask_corruption.blob_count);
    c.mask_corruption.blob_radius = m.value("blob_radius", c.mask_corruption.blob_radius);
    c.mask_corruption.erosion_count = m.value("erosion_count", c.mask_corruption.erosion_count);
    c.mask_corruption.erosion_radius = m.value("erosion_radius", c.mask_corruption.erosion_radius);
  }
  c.depth_band = j.value("depth_band", c.depth_band);
  c.mask_dilation_radius = j.value("mask_dilation_radius", c.mask_dilation_radius);
  c.splat_scale = j.value("splat_scale", c.splat_scale);
  c.seed = j.value("seed", c.seed);
  c.max_pose_retries = j.value("max_pose_retries", c.max_pose_retries);
}

SceneSample strip_ground_truth(const SceneSample& s) {
  SceneSample out = s;
  out.pose_gt.reset();
  out.keypoints_gt.reset();
  out.mask_gt = BinaryMask();
  out.outlier_flags.clear();
  return out;
}

namespace {

// Depth at which the ray through pixel (u, v) meets the surfel (p, n, radius),
// or +inf when it misses the disk. Without a usable normal the surfel faces
// the camera at depth p.z.
double surfel_depth(const Eigen::Vector3d& p, const Eigen::Vector3d& n, int u, int v,
                    const CameraIntrinsics& camera, double radius) {
  const Eigen::Vector3d ray((u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, 1.0);
  const double denom = n.dot(ray);
  if (std::abs(denom) < 1e-3 * ray.norm()) {
    const double du = camera.fx * (ray.x() - p.x() / p.z());
    const double dv = camera.fy * (ray.y() - p.y() / p.z());
    const double rpx = camera.fx * radius / p.z();
    return du * du + dv * dv <= std::max(rpx * rpx, 0.5) ? p.z() : std::numeric_limits<double>::infinity();
  }
  const double z = n.dot(p) / denom;
  if ((z * ray - p).squaredNorm() > radius * radius) return std::numeric_limits<double>::infinity();
  return z;
}

}  // namespace

std::vector<Eigen::Index> occlude_indices(const Eigen::Matrix3Xd& posed, const CameraIntrinsics& camera,
                                          const OcclusionParams& params, const Eigen::Matrix3Xd& normals) {
  if (normals.cols() != 0 && normals.cols() != posed.cols()) {
    throw InvalidArgument("normals must match the points column for column");
  }
  const int w = camera.width;
  const int h = camera.height;
  std::vector<double> zbuf(static_cast<std::size_t>(w) * static_cast<std::size_t>(h),
                           std::numeric_limits<double>::infinity());
  auto cell = [&](int u, int v) -> double& {
    return zbuf[static_cast<std::size_t>(v) * static_cast<std::size_t>(w) + static_cast<std::size_t>(u)];
  };
  auto normal_of = [&](Eigen::Index i) -> Eigen::Vector3d {
    return normals.cols() == 0 ? Eigen::Vector3d::Zero() : Eigen::Vector3d(normals.col(i));
  };
  const double r = params.splat_radius;
  for (Eigen::Index i = 0; i < posed.cols(); ++i) {
    const Eigen::Vector3d p = posed.col(i);
    if (!(p.z() > 0.0)) continue;
    const Eigen::Vector3d n = normal_of(i);
    const Eigen::Vector2d uv = camera.project(p);
    const double ru = camera.fx * r / p.z();
    const double rv = camera.fy * r / p.z();
    const auto [pu, pv] = pixel_of(uv);
    if (pu >= 0 && pv >= 0 && pu < w && pv < h) cell(pu, pv) = std::min(cell(pu, pv), p.z());
    if (ru < 0.5 && rv < 0.5) continue;
    // Without a usable normal (edges, when normals are supplied) a point only covers its own pixel.
    if (normals.cols() != 0 && n.squaredNorm() == 0.0) continue;
    const int u0 = std::max(0, static_cast<int>(std::floor(uv.x() - ru)));
    const int u1 = std::min(w - 1, static_cast<int>(std::ceil(uv.x() + ru)));
    const int v0 = std::max(0, static_cast<int>(std::floor(uv.y() - rv)));
    const int v1 = std::min(h - 1, static_cast<int>(std::ceil(uv.y() + rv)));
    for (int v = v0; v <= v1; ++v) {
      const double dv = (v - uv.y()) / rv;
      for (int u = u0; u <= u1; ++u) {
        const double du = (u - uv.x()) / ru;
        if (du * du + dv * dv <= 1.0) cell(u, v) = std::min(cell(u, v), surfel_depth(p, n, u, v, camera, r));
      }
    }
  }
  std::vector<Eigen::Index> kept;
  for (Eigen::Index i = 0; i < posed.cols(); ++i) {
    const Eigen::Vector3d p = posed.col(i);
    if (!(p.z() > 0.0)) continue;
    const auto [pu, pv] = pixel_of(camera.project(p));
    if (pu < 0 || pv < 0 || pu >= w || pv >= h) continue;
    if (p.z() <= cell(pu, pv) + params.depth_band) kept.push_back(i);
  }
  if (kept.empty()) throw EmptyProjection("no visible point projects into the image");
  return kept;
}

PointCloud occlude(const PointCloud& posed_dense, const CameraIntrinsics& camera, const OcclusionParams& params,
                   const Eigen::Matrix3Xd& normals) {
  return posed_dense.select(occlude_indices(posed_dense.points, camera, params, normals));
}

OcclusionParams occlusion_params_for(const CadModel& model, double depth_band_fraction) {
  return {depth_band_fraction * model.diameter(), 1.25 * model.sample_spacing()};
}

PointCloud inject_noise(const PointCloud& x, double gamma, std::uint64_t seed) {
  if (!(gamma >= 0.0)) throw InvalidArgument("noise std must be non-negative");
  PointCloud out = x;
  if (gamma == 0.0) return out;
  auto rng = make_rng(seed, 0x01);
  std::normal_distribution<double> gauss(0.0, gamma);
  for (Eigen::Index i = 0; i < out.points.size(); ++i) out.points.data()[i] += gauss(rng);
  return out;
}

OutlierInjection inject_outliers(const PointCloud& x, double eta, double box_scale, std::uint64_t seed) {
  if (!(eta >= 0.0 && eta < 1.0)) throw InvalidArgument("outlier rate must lie in [0, 1)");
  if (!(box_scale >= 1.0)) throw InvalidArgument("outlier box scale must be >= 1");
  OutlierInjection out{x, std::vector<bool>(static_cast<std::size_t>(x.size()), false)};
  const auto count = static_cast<int>(std::floor(eta * static_cast<double>(x.size()) + 1e-9));
  if (count == 0 || x.size() == 0) return out;

  const Eigen::Vector3d mean = x.points.rowwise().mean();
  const Eigen::Vector3d lo = x.points.rowwise().minCoeff();
  const Eigen::Vector3d hi = x.points.rowwise().maxCoeff();
  const Eigen::Vector3d box_lo = mean + box_scale * (lo - mean);
  const Eigen::Vector3d box_hi = mean + box_scale * (hi - mean);

  auto rng = make_rng(seed, 0x02);
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(x.size()));
  std::iota(idx.begin(), idx.end(), 0);
  for (int k = 0; k < count; ++k) {
    const auto j = std::uniform_int_distribution<std::int64_t>(k, x.size() - 1)(rng);
    std::swap(idx[static_cast<std::size_t>(k)], idx[static_cast<std::size_t>(j)]);
  }
  std::sort(idx.begin(), idx.begin() + count);
  for (int k = 0; k < count; ++k) {
    const Eigen::Index c = idx[static_cast<std::size_t>(k)];
    for (int a = 0; a < 3; ++a) out.cloud.points(a, c) = box_lo(a) + uniform01(rng) * (box_hi(a) - box_lo(a));
    if (out.cloud.has_features()) {
      for (Eigen::Index r = 0; r < out.cloud.features.rows(); ++r) out.cloud.features(r, c) = uniform01(rng);
    }
    out.flags[static_cast<std::size_t>(c)] = true;
  }
  return out;
}

namespace {

std::vector<std::pair<int, int>> boundary_pixels(const BinaryMask& m) {
  std::vector<std::pair<int, int>> out;
  for (int v = 0; v < m.height(); ++v) {
    for (int u = 0; u < m.width(); ++u) {
      if (!m.at(u, v)) continue;
      const bool edge = !m.in_bounds(u - 1, v) || !m.at(u - 1, v) || !m.in_bounds(u + 1, v) || !m.at(u + 1, v) ||
                        !m.in_bounds(u, v - 1) || !m.at(u, v - 1) || !m.in_bounds(u, v + 1) || !m.at(u, v + 1);
      if (edge) out.emplace_back(u, v);
    }
  }
  return out;
}

void paint_disc(BinaryMask& m, int cu, int cv, int radius, bool value) {
  for (int v = cv - radius; v <= cv + radius; ++v) {
    for (int u = cu - radius; u <= cu + radius; ++u) {
      if (!m.in_bounds(u, v)) continue;
      const int du = u - cu;
      const int dv = v - cv;
      if (du * du + dv * dv <= radius * radius) m.set(u, v, value);
    }
  }
}

}  // namespace

BinaryMask corrupt_mask(const BinaryMask& mask_gt, const MaskCorruption& c, std::uint64_t seed) {
  if (mask_gt.area() == 0) throw EmptyMask("cannot corrupt an empty mask");
  BinaryMask out = mask_gt;
  if (c.none()) return out;
  const auto boundary = boundary_pixels(mask_gt);
  auto rng = make_rng(seed, 0x03);
  std::uniform_int_distribution<std::size_t> pick(0, boundary.size() - 1);
  if (c.blob_radius > 0) {
    for (int b = 0; b < c.blob_count; ++b) {
      const auto [u, v] = boundary[pick(rng)];
      paint_disc(out, u, v, c.blob_radius, true);
    }
  }
  if (c.erosion_radius > 0) {
    for (int e = 0; e < c.erosion_count; ++e) {
      const auto [u, v] = boundary[pick(rng)];
      paint_disc(out, u, v, c.erosion_radius, false);
    }
  }
  if (out.area() == 0) return mask_gt;
  return out;
}

LabeledCloud ball_with_box_outliers(int inliers, int outliers, double ball_radius, const Eigen::Vector3d& center,
                                    double box_size, std::uint64_t seed) {
  if (inliers < 0 || outliers < 0 || inliers + outliers == 0) throw InvalidArgument("cloud needs points");
  if (!(ball_radius >= 0.0) || !(box_size >= 0.0)) throw InvalidArgument("ball radius and box size must be non-negative");
  auto rng = make_rng(seed, 0x0b);
  std::normal_distribution<double> g;
  LabeledCloud out;
  out.cloud.points.resize(3, inliers + outliers);
  for (int i = 0; i < inliers; ++i) {
    Eigen::Vector3d dir(g(rng), g(rng), g(rng));
    while (dir.norm() == 0.0) dir = Eigen::Vector3d(g(rng), g(rng), g(rng));
    out.cloud.points.col(i) = center + ball_radius * std::cbrt(uniform01(rng)) * dir.normalized();
  }
  for (int i = 0; i < outliers; ++i) {
    const Eigen::Vector3d u(uniform01(rng), uniform01(rng), uniform01(rng));
    out.cloud.points.col(inliers + i) = box_size * (u.array() - 0.5).matrix();
  }
  out.outlier_flags.assign(static_cast<std::size_t>(inliers + outliers), false);
  std::fill(out.outlier_flags.begin() + inliers, out.outlier_flags.end(), true);
  return out;
}

PointCloud back_project(const Eigen::MatrixXd& depth, const BinaryMask& mask, const CameraIntrinsics& camera,
                        const ColorImage* color) {
  if (depth.rows() != mask.height() || depth.cols() != mask.width()) {
    throw DimensionMismatch("depth image and mask dimensions differ");
  }
  if (color != nullptr && (color->width != mask.width() || color->height != mask.height())) {
    throw DimensionMismatch("color image and mask dimensions differ");
  }
  std::vector<Eigen::Vector3d> pts;
  std::vector<Eigen::Vector3d> cols;
  for (int v = 0; v < mask.height(); ++v) {
    for (int u = 0; u < mask.width(); ++u) {
      if (!mask.at(u, v)) continue;
      const double z = depth(v, u);
      if (!(z > 0.0)) continue;
      pts.emplace_back((u - camera.cx) * z / camera.fx, (v - camera.cy) * z / camera.fy, z);
      if (color != nullptr) cols.push_back(color->at(u, v));
    }
  }
  if (pts.empty()) throw EmptyMask("no masked pixel with positive depth");
  PointCloud out;
  out.points.resize(3, static_cast<Eigen::Index>(pts.size()));
  for (std::size_t i = 0; i < pts.size(); ++i) out.points.col(static_cast<Eigen::Index>(i)) = pts[i];
  if (color != nullptr) {
    out.features.resize(3, static_cast<Eigen::Index>(cols.size()));
    for (std::size_t i = 0; i < cols.size(); ++i) out.features.col(static_cast<Eigen::Index>(i)) = cols[i];
  }
  return out;
}

KeypointSet perturb_keypoints(const KeypointSet& y_star, double sigma, double f, double diameter,
                              std::uint64_t seed) {
  if (!(sigma >= 0.0)) throw InvalidArgument("keypoint noise sigma must be non-negative");
  if (!(f >= 0.0 && f <= 1.0)) throw InvalidArgument("keypoint noise probability must lie in [0, 1]");
  KeypointSet out = y_star;
  if (sigma == 0.0 || f == 0.0) return out;
  auto rng = make_rng(seed, 0x04);
  const double half = 0.5 * sigma * diameter;
  std::uniform_real_distribution<double> noise(-half, half);
  for (Eigen::Index k = 0; k < out.size(); ++k) {
    if (uniform01(rng) >= f) continue;
    for (int a = 0; a < 3; ++a) out.points(a, k) += noise(rng);
  }
  return out;
}

Pose sample_pose(const PoseBounds& bounds, std::mt19937_64& rng) {
  Pose pose;
  if (bounds.max_rotation_angle >= std::numbers::pi) {
    pose.rotation = random_rotation(rng);
  } else {
    std::normal_distribution<double> gauss(0.0, 1.0);
    Eigen::Vector3d axis;
    do {
      axis = Eigen::Vector3d(gauss(rng), gauss(rng), gauss(rng));
    } while (axis.norm() < 1e-9);
    pose.rotation = rotation_about_axis(axis, uniform01(rng) * bounds.max_rotation_angle);
  }
  for (int a = 0; a < 3; ++a) {
    pose.translation(a) =
        bounds.translation_min(a) + uniform01(rng) * (bounds.translation_max(a) - bounds.translation_min(a));
  }
  return pose;
}

Eigen::Vector3d surface_color(const Eigen::Vector3d& model_point, double diameter) {
  const Eigen::Vector3d c = (0.5 * Eigen::Vector3d::Ones() + model_point / diameter).cwiseMax(0.0).cwiseMin(1.0);
  return c;
}

SceneSample generate_scene(const CadModel& model, const SceneConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const CameraIntrinsics& cam = cfg.camera;
  auto pose_rng = make_rng(seed, 0x10);
  const OcclusionParams occ = occlusion_params_for(model, cfg.depth_band);
  const double splat = cfg.splat_scale * model.sample_spacing();

  for (int attempt = 0; attempt < cfg.max_pose_retries; ++attempt) {
    const Pose pose = sample_pose(cfg.pose_bounds, pose_rng);
    const Eigen::Matrix3Xd posed = apply_pose(pose, model.dense_points());
    bool inside = true;
    for (Eigen::Index i = 0; i < posed.cols() && inside; ++i) {
      if (!(posed(2, i) > 0.0)) {
        inside = false;
        break;
      }
      const Eigen::Vector2d uv = cam.project(posed.col(i));
      inside = uv.x() >= 0.0 && uv.y() >= 0.0 && uv.x() <= cam.width - 1.0 && uv.y() <= cam.height - 1.0;
    }
    if (!inside) continue;

    const std::uint64_t attempt_seed = derive_seed(seed, static_cast<std::uint64_t>(attempt));
    SceneSample s;
    s.seed = seed;
    s.model_id = model.name();
    s.pose_gt = pose;
    s.keypoints_gt = apply_pose(pose, model.keypoints());
    s.mask_gt = render_points(posed, splat, cam, cfg.mask_dilation_radius);
    s.mask = corrupt_mask(s.mask_gt, cfg.mask_corruption, derive_seed(attempt_seed, 1));

    const auto visible = occlude_indices(posed, cam, occ, pose.rotation * model.normals());
    std::vector<Eigen::Vector3d> pts;
    std::vector<Eigen::Vector3d> colors;
    std::vector<bool> flags;
    double mean_depth = 0.0;
    for (const Eigen::Index i : visible) {
      mean_depth += posed(2, i);
      const auto [u, v] = pixel_of(cam.project(posed.col(i)));
      if (!s.mask.at(u, v)) continue;
      pts.emplace_back(posed.col(i));
      colors.push_back(surface_color(model.dense_points().col(i), model.diameter()));
      flags.push_back(false);
    }
    mean_depth /= static_cast<double>(visible.size());

    // Pixels added by the corruption spawn points at arbitrary depths, at the
    // same density as visible surface points per ground-truth mask pixel.
    auto blob_rng = make_rng(attempt_seed, 0x20);
    const double density =
        std::min(1.0, static_cast<double>(visible.size()) / static_cast<double>(std::max<std::size_t>(1, s.mask_gt.area())));
    for (int v = 0; v < cam.height; ++v) {
      for (int u = 0; u < cam.width; ++u) {
        if (!s.mask.at(u, v) || s.mask_gt.at(u, v)) continue;
        if (uniform01(blob_rng) >= density) continue;
        const double z = mean_depth * (0.5 + uniform01(blob_rng));
        pts.emplace_back((u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z);
        colors.emplace_back(uniform01(blob_rng), uniform01(blob_rng), uniform01(blob_rng));
        flags.push_back(true);
      }
    }
    if (pts.empty()) continue;

    PointCloud x;
    x.points.resize(3, static_cast<Eigen::Index>(pts.size()));
    x.features.resize(3, static_cast<Eigen::Index>(pts.size()));
    for (std::size_t i = 0; i < pts.size(); ++i) {
      x.points.col(static_cast<Eigen::Index>(i)) = pts[i];
      x.features.col(static_cast<Eigen::Index>(i)) = colors[i];
    }
    x = inject_noise(x, cfg.gaussian_noise_std, derive_seed(attempt_seed, 2));
    OutlierInjection injected = inject_outliers(x, cfg.outlier_rate, cfg.outlier_box_scale, derive_seed(attempt_seed, 3));
    for (std::size_t i = 0; i < flags.size(); ++i) flags[i] = flags[i] || injected.flags[i];
    s.x = std::move(injected.cloud);
    s.outlier_flags = std::move(flags);
    return s;
  }
  throw EmptyProjection("could not place the object inside the camera frustum");
}

void write_points_f32(const std::filesystem::path& path, const Eigen::MatrixXd& values) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  static_assert(std::endian::native == std::endian::little, "f32 point files are little-endian");
  for (Eigen::Index c = 0; c < values.cols(); ++c) {
    for (Eigen::Index r = 0; r < values.rows(); ++r) {
      const auto f = static_cast<float>(values(r, c));
      out.write(reinterpret_cast<const char*>(&f), sizeof(float));
    }
  }
  if (!out) throw IoError("failed writing " + path.string());
}

Eigen::MatrixXd read_points_f32(const std::filesystem::path& path, Eigen::Index rows) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open " + path.string());
  const auto bytes = static_cast<std::size_t>(in.tellg());
  const std::size_t stride = sizeof(float) * static_cast<std::size_t>(rows);
  if (bytes % stride != 0) throw IoError(path.string() + ": size is not a multiple of the record size");
  in.seekg(0);
  std::vector<float> buf(bytes / sizeof(float));
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(bytes));
  if (!in) throw IoError("failed reading " + path.string());
  Eigen::MatrixXd out(rows, static_cast<Eigen::Index>(bytes / stride));
  for (Eigen::Index c = 0; c < out.cols(); ++c) {
    for (Eigen::Index r = 0; r < rows; ++r) {
      const float f = buf[static_cast<std::size_t>(c * rows + r)];
      if (!std::isfinite(f)) throw IoError(path.string() + ": non-finite value");
      out(r, c) = f;
    }
  }
  return out;
}

void write_scene(const std::filesystem::path& dir, const std::string& stem, const SceneSample& scene,
                 const CameraIntrinsics& camera) {
  std::filesystem::create_directories(dir);
  write_points_f32(dir / (stem + "_points.bin"), scene.x.points);
  nlohmann::json j{{"points", stem + "_points.bin"},
                   {"num_points", scene.x.size()},
                   {"mask", stem + "_mask.pgm"},
                   {"camera", camera},
                   {"model_id", scene.model_id},
                   {"seed", scene.seed}};
  if (scene.x.has_features()) {
    write_points_f32(dir / (stem + "_colors.bin"), scene.x.features);
    j["colors"] = stem + "_colors.bin";
  }
  write_pgm(dir / (stem + "_mask.pgm"), scene.mask);
  if (scene.mask_gt.width() > 0) {
    write_pgm(dir / (stem + "_mask_gt.pgm"), scene.mask_gt);
    j["mask_gt"] = stem + "_mask_gt.pgm";
  }
  if (scene.pose_gt) j["pose_gt"] = pose_to_json(*scene.pose_gt);
  if (scene.keypoints_gt) j["keypoints_gt"] = keypoints_to_json(*scene.keypoints_gt);
  std::ofstream out(dir / (stem + ".json"));
  if (!out) throw IoError("cannot write scene record " + stem);
  out << j.dump(2) << '\n';
}

SceneSample read_scene(const std::filesystem::path& scene_json, CameraIntrinsics* camera) {
  std::ifstream in(scene_json);
  if (!in) throw IoError("cannot open scene " + scene_json.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(scene_json.string() + ": " + e.what());
  }
  const auto dir = scene_json.parent_path();
  SceneSample s;
  try {
    const Eigen::MatrixXd pts = read_points_f32(dir / j.at("points").get<std::string>(), 3);
    if (pts.cols() == 0) throw IoError(scene_json.string() + ": empty point file");
    s.x.points = pts;
    if (j.contains("colors")) {
      s.x.features = read_points_f32(dir / j.at("colors").get<std::string>(), 3);
      if (s.x.features.cols() != s.x.points.cols()) throw IoError(scene_json.string() + ": color count mismatch");
    }
    s.mask = read_pgm(dir / j.at("mask").get<std::string>());
    if (j.contains("mask_gt")) s.mask_gt = read_pgm(dir / j.at("mask_gt").get<std::string>());
    if (j.contains("pose_gt")) s.pose_gt = pose_from_json(j.at("pose_gt"));
    if (j.contains("keypoints_gt")) s.keypoints_gt = keypoints_from_json(j.at("keypoints_gt"));
    s.model_id = j.value("model_id", std::string{});
    s.seed = j.value("seed", std::uint64_t{0});
    if (camera != nullptr) *camera = j.at("camera").get<CameraIntrinsics>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(scene_json.string() + ": " + e.what());
  } catch (const InvalidArgument& e) {
    throw IoError(scene_json.string() + ": " + e.what());
  }
  return s;
}

}  // namespace robust_pose
