#include "robust_pose/model_io.hpp"

#include "robust_pose/synth.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace robust_pose {

nlohmann::json pose_to_json(const Pose& pose) {
  nlohmann::json rot = nlohmann::json::array();
  for (int r = 0; r < 3; ++r) {
    rot.push_back({pose.rotation(r, 0), pose.rotation(r, 1), pose.rotation(r, 2)});
  }
  return {{"rotation", rot},
          {"translation", {pose.translation.x(), pose.translation.y(), pose.translation.z()}}};
}

Pose pose_from_json(const nlohmann::json& j) {
  try {
    Pose p;
    const auto& rot = j.at("rotation");
    const auto& t = j.at("translation");
    if (rot.size() != 3 || t.size() != 3) throw InvalidArgument("pose needs a 3x3 rotation and a 3-vector");
    for (int r = 0; r < 3; ++r) {
      if (rot[r].size() != 3) throw InvalidArgument("pose rotation rows must have 3 entries");
      for (int c = 0; c < 3; ++c) p.rotation(r, c) = rot[r][c].get<double>();
      p.translation(r) = t[r].get<double>();
    }
    if (!p.is_valid(1e-6)) throw InvalidArgument("pose rotation is not a proper rotation");
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("malformed pose: ") + e.what());
  }
}

nlohmann::json keypoints_to_json(const KeypointSet& k) {
  nlohmann::json out = nlohmann::json::array();
  for (Eigen::Index i = 0; i < k.size(); ++i) out.push_back({k.points(0, i), k.points(1, i), k.points(2, i)});
  return out;
}

KeypointSet keypoints_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.empty()) throw InvalidArgument("keypoints must be a non-empty array of 3-vectors");
  KeypointSet k;
  k.points.resize(3, static_cast<Eigen::Index>(j.size()));
  try {
    for (std::size_t i = 0; i < j.size(); ++i) {
      if (j[i].size() != 3) throw InvalidArgument("keypoint entries must be 3-vectors");
      for (int c = 0; c < 3; ++c) k.points(c, static_cast<Eigen::Index>(i)) = j[i][c].get<double>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("malformed keypoints: ") + e.what());
  }
  if (!k.points.allFinite()) throw InvalidArgument("keypoints must be finite");
  return k;
}

namespace {

Eigen::Matrix3Xd to_matrix(const std::vector<Eigen::Vector3d>& v) {
  Eigen::Matrix3Xd m(3, static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) m.col(static_cast<Eigen::Index>(i)) = v[i];
  return m;
}

Eigen::Matrix3Xd load_obj(std::istream& in, const std::string& name) {
  std::vector<Eigen::Vector3d> v;
  std::string line;
  while (std::getline(in, line)) {
    if (line.size() < 2 || line[0] != 'v' || (line[1] != ' ' && line[1] != '\t')) continue;
    std::istringstream ss(line.substr(2));
    Eigen::Vector3d p;
    if (!(ss >> p.x() >> p.y() >> p.z())) throw IoError(name + ": malformed vertex line");
    v.push_back(p);
  }
  return to_matrix(v);
}

std::size_t ply_type_size(const std::string& t) {
  if (t == "char" || t == "uchar" || t == "int8" || t == "uint8") return 1;
  if (t == "short" || t == "ushort" || t == "int16" || t == "uint16") return 2;
  if (t == "int" || t == "uint" || t == "float" || t == "int32" || t == "uint32" || t == "float32") return 4;
  if (t == "double" || t == "float64") return 8;
  throw IoError("unsupported PLY property type '" + t + "'");
}

double read_scalar(const char* p, const std::string& t) {
  if (t == "float" || t == "float32") return std::bit_cast<float>(*reinterpret_cast<const std::uint32_t*>(p));
  if (t == "double" || t == "float64") {
    std::uint64_t b;
    std::memcpy(&b, p, 8);
    return std::bit_cast<double>(b);
  }
  throw IoError("PLY vertex coordinates must be float or double");
}

Eigen::Matrix3Xd load_ply(std::istream& in, const std::string& name) {
  std::string line;
  std::getline(in, line);
  if (line.rfind("ply", 0) != 0) throw IoError(name + ": missing PLY magic");
  std::string format;
  long vertex_count = -1;
  bool in_vertex = false;
  std::vector<std::pair<std::string, std::string>> props;  // (type, name)
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ss(line);
    std::string word;
    ss >> word;
    if (word == "format") {
      ss >> format;
    } else if (word == "element") {
      std::string el;
      long count = 0;
      ss >> el >> count;
      in_vertex = el == "vertex";
      if (in_vertex) vertex_count = count;
      else if (vertex_count < 0) throw IoError(name + ": vertex element must come first");
    } else if (word == "property" && in_vertex) {
      std::string type;
      std::string pname;
      ss >> type >> pname;
      if (type == "list") throw IoError(name + ": list properties on vertices are unsupported");
      props.emplace_back(type, pname);
    } else if (word == "end_header") {
      break;
    }
  }
  if (vertex_count <= 0) throw IoError(name + ": no vertices");
  int ix = -1, iy = -1, iz = -1;
  for (std::size_t i = 0; i < props.size(); ++i) {
    if (props[i].second == "x") ix = static_cast<int>(i);
    if (props[i].second == "y") iy = static_cast<int>(i);
    if (props[i].second == "z") iz = static_cast<int>(i);
  }
  if (ix < 0 || iy < 0 || iz < 0) throw IoError(name + ": vertex x/y/z properties missing");

  Eigen::Matrix3Xd pts(3, vertex_count);
  if (format == "ascii") {
    for (long i = 0; i < vertex_count; ++i) {
      if (!std::getline(in, line)) throw IoError(name + ": truncated vertex list");
      std::istringstream ss(line);
      std::vector<double> vals(props.size());
      for (auto& v : vals) {
        if (!(ss >> v)) throw IoError(name + ": malformed vertex line");
      }
      pts.col(i) = Eigen::Vector3d(vals[static_cast<std::size_t>(ix)], vals[static_cast<std::size_t>(iy)],
                                   vals[static_cast<std::size_t>(iz)]);
    }
  } else if (format == "binary_little_endian") {
    std::vector<std::size_t> offsets;
    std::size_t stride = 0;
    for (const auto& p : props) {
      offsets.push_back(stride);
      stride += ply_type_size(p.first);
    }
    std::vector<char> rec(stride);
    for (long i = 0; i < vertex_count; ++i) {
      in.read(rec.data(), static_cast<std::streamsize>(stride));
      if (!in) throw IoError(name + ": truncated vertex data");
      for (int a = 0; a < 3; ++a) {
        const int k = a == 0 ? ix : (a == 1 ? iy : iz);
        pts(a, i) = read_scalar(rec.data() + offsets[static_cast<std::size_t>(k)], props[static_cast<std::size_t>(k)].first);
      }
    }
  } else {
    throw IoError(name + ": unsupported PLY format '" + format + "'");
  }
  return pts;
}

}  // namespace

Eigen::Matrix3Xd load_mesh_vertices(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const auto ext = path.extension().string();
  Eigen::Matrix3Xd pts = ext == ".obj" ? load_obj(in, path.string()) : load_ply(in, path.string());
  if (pts.cols() < 3) throw IoError(path.string() + ": too few vertices");
  if (!pts.allFinite()) throw IoError(path.string() + ": non-finite vertex");
  return pts;
}

CadModel load_cad_model(const std::filesystem::path& mesh, const std::filesystem::path& sidecar) {
  const Eigen::Matrix3Xd dense = load_mesh_vertices(mesh);
  std::ifstream in(sidecar);
  if (!in) throw IoError("cannot open " + sidecar.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(sidecar.string() + ": " + e.what());
  }
  if (!j.contains("keypoints")) throw IoError(sidecar.string() + ": missing \"keypoints\"");
  KeypointSet kp = keypoints_from_json(j.at("keypoints"));
  const double diameter = j.value("diameter", 0.0);
  return CadModel(dense, std::move(kp), diameter, mesh.stem().string());
}

CadModel model_from_spec(const std::string& spec, std::uint64_t seed) {
  const auto colon = spec.find(':');
  const std::string head = spec.substr(0, colon);
  const bool is_file = head.ends_with(".ply") || head.ends_with(".obj");
  if (is_file) {
    if (colon == std::string::npos) throw InvalidArgument("model file spec needs ':keypoints.json'");
    return load_cad_model(head, spec.substr(colon + 1));
  }
  const BuiltinKind kind = parse_builtin_kind(head);
  Eigen::Vector3d size = kind == BuiltinKind::Cylinder ? Eigen::Vector3d(0.1, 0.1, 0.2) : Eigen::Vector3d(0.2, 0.1, 0.08);
  if (kind == BuiltinKind::LBracket) size = Eigen::Vector3d(0.15, 0.08, 0.12);
  if (colon != std::string::npos) {
    std::istringstream ss(spec.substr(colon + 1));
    char sep = 0;
    if (!(ss >> size.x() >> sep >> size.y() >> sep >> size.z())) {
      throw InvalidArgument("builtin size must read 'sx,sy,sz'");
    }
  }
  return builtin_model(kind, size, seed);
}

}  // namespace robust_pose
