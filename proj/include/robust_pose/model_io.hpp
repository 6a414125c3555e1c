#pragma once

#include "robust_pose/geometry.hpp"

#include <nlohmann/json_fwd.hpp>

#include <filesystem>
#include <string>

namespace robust_pose {

[[nodiscard]] nlohmann::json pose_to_json(const Pose& pose);
[[nodiscard]] Pose pose_from_json(const nlohmann::json& j);
[[nodiscard]] nlohmann::json keypoints_to_json(const KeypointSet& k);
[[nodiscard]] KeypointSet keypoints_from_json(const nlohmann::json& j);

/// Vertices of an ASCII or binary little-endian PLY, or the `v` lines of an OBJ.
[[nodiscard]] Eigen::Matrix3Xd load_mesh_vertices(const std::filesystem::path& path);

/// Dense sample from a mesh file plus a JSON sidecar
/// {"keypoints": [[x,y,z],...], "diameter": D (optional)}.
[[nodiscard]] CadModel load_cad_model(const std::filesystem::path& mesh, const std::filesystem::path& sidecar);

/// "box", "cylinder", "lbracket" (optionally "kind:sx,sy,sz") or "path.ply|obj:sidecar.json".
[[nodiscard]] CadModel model_from_spec(const std::string& spec, std::uint64_t seed = 0);

}  // namespace robust_pose
