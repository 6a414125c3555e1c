#include "robust_pose/certificates.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

namespace robust_pose {

void CameraIntrinsics::validate() const {
  if (!(fx > 0.0 && fy > 0.0)) throw InvalidArgument("focal lengths must be positive");
  if (width <= 0 || height <= 0) throw InvalidArgument("image size must be positive");
  if (!(cx >= 0.0 && cx < width && cy >= 0.0 && cy < height)) {
    throw InvalidArgument("principal point must lie inside the image");
  }
}

std::size_t BinaryMask::area() const {
  return static_cast<std::size_t>(std::count(data_.begin(), data_.end(), std::uint8_t{1}));
}

BinaryMask dilate(const BinaryMask& mask, int radius) {
  if (radius <= 0) return mask;
  const int w = mask.width();
  const int h = mask.height();
  // Separable: horizontal then vertical running max.
  BinaryMask horiz(w, h);
  for (int v = 0; v < h; ++v) {
    int last = -radius - 1;  // last set column seen
    std::vector<int> next_set(static_cast<std::size_t>(w) + 1, w + radius + 1);
    for (int u = w - 1; u >= 0; --u) {
      next_set[static_cast<std::size_t>(u)] = mask.at(u, v) ? u : next_set[static_cast<std::size_t>(u) + 1];
    }
    for (int u = 0; u < w; ++u) {
      if (mask.at(u, v)) last = u;
      if (u - last <= radius || next_set[static_cast<std::size_t>(u)] - u <= radius) horiz.set(u, v);
    }
  }
  BinaryMask out(w, h);
  for (int u = 0; u < w; ++u) {
    int last = -radius - 1;
    std::vector<int> next_set(static_cast<std::size_t>(h) + 1, h + radius + 1);
    for (int v = h - 1; v >= 0; --v) {
      next_set[static_cast<std::size_t>(v)] = horiz.at(u, v) ? v : next_set[static_cast<std::size_t>(v) + 1];
    }
    for (int v = 0; v < h; ++v) {
      if (horiz.at(u, v)) last = v;
      if (v - last <= radius || next_set[static_cast<std::size_t>(v)] - v <= radius) out.set(u, v);
    }
  }
  return out;
}

CertificateConfig CertificateConfig::defaults_for(const CadModel& model) {
  CertificateConfig cfg;
  cfg.eps_3d = 0.04 * model.diameter();
  return cfg;
}

void CertificateConfig::validate() const {
  if (!(p > 0.0 && p <= 1.0)) throw InvalidArgument("certificate percentile must lie in (0, 1]");
  if (!(eps_3d > 0.0)) throw InvalidArgument("eps_3d must be positive");
  if (!(eps_2d > 0.0 && eps_2d < 1.0)) throw InvalidArgument("eps_2d must lie in (0, 1)");
  if (dilation_radius < 0) throw InvalidArgument("dilation radius must be non-negative");
  if (!(splat_scale >= 0.0)) throw InvalidArgument("splat scale must be non-negative");
}

void to_json(nlohmann::json& j, const CertificateResult& r) {
  j = nlohmann::json{{"oc", r.oc}, {"oc3d", r.oc_3d}, {"oc2d", r.oc_2d},
                     {"score3d", r.score_3d}, {"score2d", r.score_2d}};
}

std::pair<bool, double> cert_3d(const PointCloud& x, const Pose& pose, const CadModel& model,
                                const CertificateConfig& cfg) {
  if (x.size() == 0) throw InvalidArgument("3D certificate needs a non-empty cloud");
  // Nearest model point found in the model frame against the shared index.
  const Eigen::Matrix3d rt = pose.rotation.transpose();
  ScoreSet d(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const Eigen::Vector3d xi = x.points.col(i);
    const Neighbor nn = model.index().nearest(rt * (xi - pose.translation));
    d(i) = (xi - pose * Eigen::Vector3d(model.dense_points().col(nn.index))).norm();
  }
  const double score = percentile(d, cfg.p);
  return {score < cfg.eps_3d, score};
}

BinaryMask render_points(const Eigen::Matrix3Xd& points, double splat_radius, const CameraIntrinsics& camera,
                         int dilation_radius) {
  BinaryMask mask(camera.width, camera.height);
  bool any = false;
  for (Eigen::Index i = 0; i < points.cols(); ++i) {
    const Eigen::Vector3d p = points.col(i);
    if (!(p.z() > 0.0)) continue;
    const Eigen::Vector2d uv = camera.project(p);
    const double ru = camera.fx * splat_radius / p.z();
    const double rv = camera.fy * splat_radius / p.z();
    const auto [pu, pv] = pixel_of(uv);
    if (camera.width + ru < uv.x() || uv.x() < -ru - 1.0 || camera.height + rv < uv.y() || uv.y() < -rv - 1.0) {
      continue;
    }
    if (mask.in_bounds(pu, pv)) {
      mask.set(pu, pv);
      any = true;
    }
    if (ru < 0.5 && rv < 0.5) continue;
    const int u0 = std::max(0, static_cast<int>(std::floor(uv.x() - ru)));
    const int u1 = std::min(camera.width - 1, static_cast<int>(std::ceil(uv.x() + ru)));
    const int v0 = std::max(0, static_cast<int>(std::floor(uv.y() - rv)));
    const int v1 = std::min(camera.height - 1, static_cast<int>(std::ceil(uv.y() + rv)));
    for (int v = v0; v <= v1; ++v) {
      const double dv = (v - uv.y()) / rv;
      for (int u = u0; u <= u1; ++u) {
        const double du = (u - uv.x()) / ru;
        if (du * du + dv * dv <= 1.0) {
          mask.set(u, v);
          any = true;
        }
      }
    }
  }
  if (!any) throw EmptyProjection("no model point projects into the image");
  return dilate(mask, dilation_radius);
}

BinaryMask render_mask(const Pose& pose, const CadModel& model, const CameraIntrinsics& camera,
                       const CertificateConfig& cfg) {
  return render_points(apply_pose(pose, model.dense_points()), cfg.splat_scale * model.sample_spacing(), camera,
                       cfg.dilation_radius);
}

std::pair<bool, double> cert_2d(const BinaryMask& detected, const BinaryMask& rendered, const CertificateConfig& cfg) {
  if (!detected.same_shape(rendered)) throw DimensionMismatch("mask dimensions differ");
  std::size_t area = 0;
  std::size_t overlap = 0;
  const auto& a = detected.data();
  const auto& b = rendered.data();
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == 0) continue;
    ++area;
    if (b[i] != 0) ++overlap;
  }
  if (area == 0) throw EmptyDetectedMask("detected mask is empty");
  const double ratio = static_cast<double>(overlap) / static_cast<double>(area);
  return {ratio > 1.0 - cfg.eps_2d, ratio};
}

CertificateResult observable_correctness(const PointCloud& x, const BinaryMask& detected, const Pose& pose,
                                         const CadModel& model, const CameraIntrinsics& camera,
                                         const CertificateConfig& cfg) {
  CertificateResult r;
  std::tie(r.oc_3d, r.score_3d) = cert_3d(x, pose, model, cfg);
  const BinaryMask rendered = render_mask(pose, model, camera, cfg);
  std::tie(r.oc_2d, r.score_2d) = cert_2d(detected, rendered, cfg);
  r.oc = r.oc_3d && r.oc_2d;
  return r;
}

void write_pgm(const std::filesystem::path& path, const BinaryMask& mask) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "P5\n" << mask.width() << ' ' << mask.height() << "\n255\n";
  std::vector<char> row(static_cast<std::size_t>(mask.width()));
  for (int v = 0; v < mask.height(); ++v) {
    for (int u = 0; u < mask.width(); ++u) row[static_cast<std::size_t>(u)] = mask.at(u, v) ? char(255) : char(0);
    out.write(row.data(), static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw IoError("failed writing " + path.string());
}

namespace {

std::string next_token(std::istream& in) {
  std::string tok;
  while (in) {
    const int c = in.peek();
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      break;
    }
  }
  in >> tok;
  return tok;
}

}  // namespace

BinaryMask read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  if (next_token(in) != "P5") throw IoError(path.string() + ": not a binary PGM (P5)");
  int w = 0;
  int h = 0;
  int maxval = 0;
  try {
    w = std::stoi(next_token(in));
    h = std::stoi(next_token(in));
    maxval = std::stoi(next_token(in));
  } catch (const std::exception&) {
    throw IoError(path.string() + ": malformed PGM header");
  }
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) throw IoError(path.string() + ": unsupported PGM header");
  in.get();
  std::vector<char> buf(static_cast<std::size_t>(w) * static_cast<std::size_t>(h));
  in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (in.gcount() != static_cast<std::streamsize>(buf.size())) throw IoError(path.string() + ": truncated PGM");
  BinaryMask mask(w, h);
  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < w; ++u) {
      if (buf[static_cast<std::size_t>(v) * w + u] != 0) mask.set(u, v);
    }
  }
  return mask;
}

}  // namespace robust_pose
