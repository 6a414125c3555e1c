// Acceptance suite: one PASS/FAIL line per criterion. Usage:
//   acceptance <path to robust_pose_cli> [--full]
// --full runs the 3000-iteration self-training benchmark instead of the 300-iteration check.

#include "oracles.hpp"

#include "robust_pose/corrector.hpp"
#include "robust_pose/ensemble.hpp"
#include "robust_pose/errors.hpp"
#include "robust_pose/experiments.hpp"
#include "robust_pose/random.hpp"
#include "robust_pose/robust_points.hpp"
#include "robust_pose/synth.hpp"

#include <nlohmann/json.hpp>

#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <sstream>
#include <string>

using namespace robust_pose;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

const CadModel& box() {
  static const CadModel m = builtin_model(BuiltinKind::Box, Eigen::Vector3d(0.2, 0.1, 0.08));
  return m;
}

std::string num(double v, int digits = 4) {
  std::ostringstream s;
  s.precision(digits);
  s << v;
  return s.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

ExperimentConfig config_for(ExperimentKind kind, const fs::path& out) {
  ExperimentConfig c = ExperimentConfig::defaults(kind);
  c.out_dir = out;
  c.workers = 1;
  return c;
}

std::vector<double> method_values(const nlohmann::json& summary, const std::string& method, const std::string& key) {
  std::vector<double> v;
  for (const auto& x : summary.at("methods").at(method).at(key)) v.push_back(x.is_null() ? std::nan("") : x.get<double>());
  return v;
}

Outcome corrector_efficacy(const fs::path& tmp) {
  const auto t0 = std::chrono::steady_clock::now();
  const ExperimentResult r = run_experiment(config_for(ExperimentKind::CorrectorAnalysis, tmp / "c1"));
  const double secs = seconds_since(t0);
  const auto& s = r.summary;
  const std::size_t g = s.at("grid").size() - 1;
  const double robust_oc = method_values(s, "robust", "oc_fraction")[g];
  const double robust_adds = method_values(s, "robust", "certified_mean_adds")[g];
  const double none_oc = method_values(s, "none", "oc_fraction")[g];
  return {robust_oc >= 0.9 && robust_adds <= 0.05 && none_oc <= 0.05 && secs < 300.0,
          "sigma=0.6, 100 trials: robust oc " + num(robust_oc) + " (>= 0.9), certified ADD-S/D " + num(robust_adds) +
              " (<= 0.05), no-corrector oc " + num(none_oc) + " (<= 0.05), " + num(secs, 3) + " s (< 300)"};
}

Outcome robust_ordering(const fs::path& tmp) {
  ExperimentConfig c = config_for(ExperimentKind::CorrectorRobustness, tmp / "c2");
  const ExperimentResult r = run_experiment(c);
  const auto robust = method_values(r.summary, "robust", "mean_adds");
  const auto none = method_values(r.summary, "none", "mean_adds");
  const auto plain = method_values(r.summary, "non_robust", "mean_adds");
  bool ok = true;
  std::string detail;
  for (std::size_t g = 0; g < c.grid.size(); ++g) {
    if (c.grid[g] < 0.4) continue;
    ok = ok && robust[g] < none[g] && none[g] < plain[g] && robust[g] <= 2.0 * robust[0];
    detail += "eta=" + num(c.grid[g]) + ": " + num(robust[g]) + " < " + num(none[g]) + " < " + num(plain[g]) + "; ";
  }
  return {ok, detail + "robust at eta=0: " + num(robust[0]) + " (bound 2x)"};
}

Outcome jacobian_check() {
  CorrectorConfig cfg = CorrectorConfig::defaults_for(box());
  cfg.grad_tol = 1e-9 * box().diameter();
  cfg.max_iters = 5000;
  // Instances must sit at the global optimum (zero objective on a clean scene);
  // stationary points inside flat valleys are not isolated minimisers.
  const double optimal = 1e-12 * box().diameter() * box().diameter();
  double worst = 0.0;
  int unconverged = 0;
  int used = 0;
  int skipped = 0;
  for (std::uint64_t s = 0; used < 50 && s < 1000; ++s) {
    const SceneSample scene = generate_scene(box(), SceneConfig{}, derive_seed(31, s));
    const KeypointSet y = perturb_keypoints(*scene.keypoints_gt, 0.2, 0.8, box().diameter(), derive_seed(32, s));
    const CorrectionResult r = solve_correction(y, box(), scene.x, cfg);
    if (!r.converged || r.final_objective > optimal) {
      ++skipped;
      continue;
    }
    ++used;
    std::mt19937_64 rng(derive_seed(33, s));
    for (int dir = 0; dir < 20; ++dir) {
      Eigen::Matrix3Xd delta = oracle::random_points(rng, y.size());
      delta *= 1e-3 * box().diameter() / delta.norm();
      const CorrectionResult p = solve_correction(KeypointSet{y.points + delta}, box(), scene.x, cfg);
      unconverged += p.converged ? 0 : 1;
      worst = std::max(worst, (p.delta_y - r.delta_y + delta).norm() / delta.norm());
    }
  }
  return {used == 50 && worst <= 1e-2 && unconverged == 0,
          std::to_string(used) + " instances x 20 directions: max |d(y+delta) - d(y) + delta| / |delta| = " +
              num(worst) + " (<= 0.01), unconverged solves " + std::to_string(unconverged) + ", " +
              std::to_string(skipped) + " non-optimal instances skipped"};
}

Outcome registration_exactness() {
  std::mt19937_64 rng(41);
  double worst_r = 0.0;
  double worst_t = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const Eigen::Matrix3Xd b = oracle::random_points(rng, 3 + i % 20, 0.2);
    const Pose t = oracle::random_pose(rng, 2.0);
    const Pose est = register_keypoints(apply_pose(t, b), b);
    worst_r = std::max(worst_r, (est.rotation - t.rotation).norm());
    worst_t = std::max(worst_t, (est.translation - t.translation).norm());
  }
  return {worst_r <= 1e-9 && worst_t <= 1e-9,
          "1000 round trips: max rotation error " + num(worst_r) + ", max translation error " + num(worst_t) +
              " (<= 1e-9)"};
}

Outcome oracle_equivalence() {
  std::mt19937_64 rng(51);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    std::uniform_int_distribution<int> size(5, 500);
    const int m = size(rng);
    const int n = size(rng);
    const Eigen::Matrix3Xd dense = oracle::random_points(rng, m, 0.1);
    const CadModel model(dense, KeypointSet{dense.leftCols(5)});
    const Pose t = oracle::random_pose(rng, 0.2);
    const Pose t2 = oracle::random_pose(rng, 0.2);
    const Eigen::Matrix3Xd x = oracle::random_points(rng, n, 0.3);
    const double c_bar = 0.05;
    auto rel = [](double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); };
    worst = std::max(worst, rel(loss_self(PointCloud(x), t, model, c_bar), oracle::loss_self(x, t, dense, c_bar)));
    worst = std::max(worst, rel(loss_sup(t, t2, model), oracle::loss_sup(t, t2, dense)));
    worst = std::max(worst, rel(adds_metric(t, t2, model), oracle::adds(t, t2, dense)));
    const Eigen::VectorXd d = nearest_distances(x, dense);
    worst = std::max(worst, (d - oracle::nearest_distances(x, dense)).cwiseAbs().maxCoeff());
  }
  return {worst <= 1e-9, "100 instances (n, m <= 500): max deviation " + num(worst) + " (<= 1e-9)"};
}

Outcome gradient_checks() {
  std::mt19937_64 rng(61);
  const CadModel m = builtin_model(BuiltinKind::Box, Eigen::Vector3d(0.2, 0.1, 0.08), 0, 256);
  const double c_bar = 0.1 * m.diameter();
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const Pose t = oracle::random_pose(rng, 0.3);
    const KeypointSet y = perturb_keypoints(hallucinate_keypoints(t, m), 0.05, 1.0, m.diameter(), derive_seed(62, trial));
    const Pose t_prime{rotation_about_axis(oracle::random_points(rng, 1).col(0), 0.1) * t.rotation,
                       t.translation + oracle::random_points(rng, 1, 0.01).col(0)};
    Eigen::Matrix3Xd x = apply_pose(Pose{rotation_about_axis(oracle::random_points(rng, 1).col(0), 0.05) * t.rotation,
                                         t.translation + oracle::random_points(rng, 1, 0.005).col(0)},
                                    m.dense_points());
    x.rightCols(20) = oracle::random_points(rng, 20, 0.5).colwise() + t.translation;
    const oracle::FrozenGradients fd = oracle::frozen_loss_gradients(m, x, y.points, t_prime, c_bar, 1e-7);
    const Eigen::Matrix3Xd g_self = loss_self_gradient(PointCloud(x), y.points, m, c_bar);
    const Eigen::Matrix3Xd g_sup = loss_sup_gradient(y.points, t_prime, m);
    worst = std::max(worst, (g_self - fd.self).norm() / g_self.norm());
    worst = std::max(worst, (g_sup - fd.sup).norm() / g_sup.norm());
  }
  return {worst <= 1e-4, "50 instances: max relative deviation from central differences " + num(worst) + " (<= 1e-4)"};
}

Outcome gnc_centroid(const fs::path& tmp) {
  const Eigen::Vector3d center(1, 1, 1);
  GncConfig gnc;
  gnc.c_bar_centroid = 0.1;
  double worst_robust = 0.0;
  double best_mean = std::numeric_limits<double>::infinity();
  for (std::uint64_t s = 0; s < 100; ++s) {
    const LabeledCloud c = ball_with_box_outliers(70, 30, 0.02, center, 2.0, s);
    worst_robust = std::max(worst_robust, (robust_centroid(c.cloud, gnc).centroid - center).norm());
    best_mean = std::min(best_mean, (c.cloud.points.rowwise().mean() - center).norm());
  }
  ExperimentConfig cfg = config_for(ExperimentKind::CentroidRobustness, tmp / "c7");
  cfg.grid = {0.3};
  const ExperimentResult r = run_experiment(cfg);
  const double fps = r.summary.at("fps_outlier_fraction").at("mean")[0].get<double>();
  const double pool = r.summary.at("pool_outlier_fraction").at("mean")[0].get<double>();
  return {worst_robust < 0.02 && best_mean > 0.1 && fps > pool,
          "100 seeds: max robust error " + num(worst_robust) + " m (< 0.02), min mean error " + num(best_mean) +
              " m (> 0.1); outlier fraction fps " + num(fps) + " > robust_pool " + num(pool)};
}

Outcome certificate_discrimination() {
  const CertificateConfig cert = CertificateConfig::defaults_for(box());
  const double d = box().diameter();
  int tp = 0, pos = 0, tn = 0, neg = 0;
  for (std::uint64_t i = 0; i < 200; ++i) {
    const SceneSample s = generate_scene(box(), SceneConfig{}, derive_seed(71, i));
    auto rng = make_rng(72, i);
    const bool want_correct = i % 2 == 0;
    for (int attempt = 0; attempt < 1000; ++attempt) {
      const Eigen::Vector3d axis = oracle::random_points(rng, 1).col(0);
      const double angle = want_correct ? 0.03 * uniform01(rng) : 0.3 + 2.8 * uniform01(rng);
      const double shift = want_correct ? 0.005 * d : (0.1 + 0.4 * uniform01(rng)) * d;
      const Pose p{rotation_about_axis(axis, angle) * s.pose_gt->rotation,
                   s.pose_gt->translation + shift * oracle::random_points(rng, 1).col(0).normalized()};
      const double adds = adds_metric(p, *s.pose_gt, box());
      if (want_correct ? adds >= 0.02 * d : adds <= 0.2 * d) continue;
      bool oc = false;
      try {
        oc = observable_correctness(s.x, s.mask, p, box(), CameraIntrinsics{}, cert).oc;
      } catch (const EmptyProjection&) {
      }
      (want_correct ? pos : neg) += 1;
      if (want_correct) tp += oc ? 1 : 0;
      else tn += oc ? 0 : 1;
      break;
    }
  }
  const double tpr = static_cast<double>(tp) / pos;
  const double tnr = static_cast<double>(tn) / neg;
  return {pos + neg == 200 && tpr >= 0.9 && tnr >= 0.9,
          std::to_string(pos) + " correct / " + std::to_string(neg) + " wrong poses: TPR " + num(tpr) + ", TNR " +
              num(tnr) + " (>= 0.9)"};
}

Outcome zero_certificate_gating() {
  const SceneConfig real = ExperimentConfig::defaults(ExperimentKind::SelfTrain).selftrain.real;
  const auto scenes = generate_scenes(box(), real, 8, 81, 1);
  std::vector<DetectorParams> dets{DetectorParams::random(box(), 82), DetectorParams::random(box(), 83)};
  CertificateConfig cert = CertificateConfig::defaults_for(box());
  cert.eps_3d = 1e-12;
  SelfTrainConfig st;
  st.iterations = 3;
  st.train.batch_size = 4;
  TrainLog log;
  const auto out = self_train(dets, scenes, box(), CameraIntrinsics{}, CorrectorConfig::defaults_for(box()), cert, st,
                              {}, log);
  bool identical = true;
  for (std::size_t k = 0; k < dets.size(); ++k) identical = identical && out[k].theta == dets[k].theta;
  bool none_updated = true;
  for (const auto& r : log.records) none_updated = none_updated && !r.updated;
  return {identical && none_updated, std::string("zero-certificate batches leave parameters ") +
                                         (identical ? "bit-identical" : "CHANGED")};
}

bool files_identical(const fs::path& a, const fs::path& b, std::string& why) {
  std::vector<fs::path> fa, fb;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (e.is_regular_file()) fa.push_back(fs::relative(e.path(), a));
  }
  for (const auto& e : fs::recursive_directory_iterator(b)) {
    if (e.is_regular_file()) fb.push_back(fs::relative(e.path(), b));
  }
  std::sort(fa.begin(), fa.end());
  std::sort(fb.begin(), fb.end());
  if (fa != fb || fa.empty()) {
    why = "file lists differ";
    return false;
  }
  for (const auto& f : fa) {
    std::ifstream ia(a / f, std::ios::binary), ib(b / f, std::ios::binary);
    const std::string ca((std::istreambuf_iterator<char>(ia)), {});
    const std::string cb((std::istreambuf_iterator<char>(ib)), {});
    if (ca != cb) {
      why = f.string() + " differs";
      return false;
    }
  }
  return true;
}

Outcome cli_determinism(const std::string& cli, const fs::path& tmp) {
  const fs::path dir = tmp / "c11";
  fs::create_directories(dir);
  auto write = [&](const std::string& name, const nlohmann::json& j) {
    std::ofstream(dir / name) << j.dump(2) << '\n';
    return (dir / name).string();
  };
  const std::string gen = "gen-scenes --count 3 --seed 5";
  const std::string scene = (dir / "gen_w1" / "scene_0000.json").string();
  struct Command {
    std::string name;
    std::string args;
  };
  const std::vector<Command> commands{
      {"gen", gen},
      {"certify", "certify --scene " + scene + " --pose " + scene},
      {"analysis", "corrector-analysis --seed 3 --config " + write("analysis.json", {{"trials", 6}})},
      {"robustness", "corrector-robustness --seed 3 --config " + write("robustness.json", {{"trials", 6}})},
      {"centroid", "centroid-robustness --seed 3 --config " + write("centroid.json", {{"trials", 6}})},
      {"selftrain", "selftrain --seed 3 --config " +
                        write("selftrain.json", {{"selftrain",
                                                  {{"pretrain_scenes", 30},
                                                   {"pretrain_epochs", 3},
                                                   {"pool_scenes", 40},
                                                   {"eval_scenes", 10},
                                                   {"comparison_scenes", 10},
                                                   {"iterations", 6},
                                                   {"eval_every", 3},
                                                   {"batch_size", 8}}}})},
  };
  std::string detail;
  bool ok = true;
  for (const auto& c : commands) {
    for (int workers : {1, 3}) {
      const fs::path out = dir / (c.name + "_w" + std::to_string(workers));
      const std::string cmd = "\"" + cli + "\" " + c.args + " --workers " + std::to_string(workers) + " --out \"" +
                              out.string() + "\" > /dev/null";
      if (std::system(cmd.c_str()) != 0) {
        ok = false;
        detail += c.name + " failed; ";
      }
    }
    std::string why;
    if (!files_identical(dir / (c.name + "_w1"), dir / (c.name + "_w3"), why)) {
      ok = false;
      detail += c.name + ": " + why + "; ";
    }
  }
  return {ok, ok ? "6 commands, workers 1 vs 3: byte-identical outputs" : detail};
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << "usage: acceptance <robust_pose_cli> [--full]\n";
    return 2;
  }
  const std::string cli = argv[1];
  const bool full = argc > 2 && std::string(argv[2]) == "--full";
  const fs::path tmp = fs::temp_directory_path() / ("robust_pose_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(tmp);

  int failures = 0;
  auto run = [&](int id, const std::string& name, const std::function<Outcome()>& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += o.pass ? 0 : 1;
    std::cout << (o.pass ? "[PASS] " : "[FAIL] ") << id << ". " << name << ": " << o.detail << " ["
              << num(seconds_since(t0), 3) << " s]" << std::endl;
  };

  run(1, "corrector efficacy", [&] { return corrector_efficacy(tmp); });
  run(2, "robust vs non-robust ordering", [&] { return robust_ordering(tmp); });
  run(3, "correction Jacobian numeric check", jacobian_check);
  run(4, "registration exactness", registration_exactness);
  run(5, "loss and metric oracle equivalence", oracle_equivalence);
  run(6, "loss gradient checks", gradient_checks);
  run(7, "GNC centroid and pooling selection", [&] { return gnc_centroid(tmp); });
  run(8, "certificate discrimination", certificate_discrimination);

  // 9 and 10 share one benchmark run.
  ExperimentResult bench;
  double bench_secs = 0.0;
  std::string bench_error;
  {
    const auto t0 = std::chrono::steady_clock::now();
    ExperimentConfig c = config_for(ExperimentKind::SelfTrain, tmp / "c9");
    c.check = !full;
    try {
      bench = run_experiment(c);
    } catch (const std::exception& e) {
      bench_error = e.what();
    }
    bench_secs = seconds_since(t0);
  }
  run(9, "self-training progression", [&] {
    if (!bench_error.empty()) return Outcome{false, "exception: " + bench_error};
    const double gain = bench.summary.at("improvement").get<double>();
    const double need = full ? 0.3 : 0.1;
    const double budget = full ? 1800.0 : 180.0;
    const Outcome gate = zero_certificate_gating();
    const auto& s = bench.summary;
    return Outcome{gain >= need && bench_secs < budget && gate.pass,
                   std::string(full ? "3000" : "300") + " iterations: oc " + num(s.at("initial_oc_mean").get<double>()) +
                       " -> " + num(s.at("final_oc_mean").get<double>()) + ", gain " + num(gain) + " (>= " +
                       num(need) + "), " + num(bench_secs, 4) + " s (< " + num(budget) + "); " + gate.detail};
  });
  run(10, "corrector bridges the domain gap", [&] {
    if (!bench_error.empty()) return Outcome{false, "exception: " + bench_error};
    const auto& t = bench.summary.at("threshold_adds");
    const double so = t.at("sim_only").get<double>();
    const double sc = t.at("sim_corrector").get<double>();
    return Outcome{sc > so, "200 scenes, threshold-ADD-S (0.05 D): sim+corrector " + num(sc) + " > sim-only " + num(so)};
  });
  run(11, "CLI determinism", [&] { return cli_determinism(cli, tmp); });

  std::error_code ec;
  fs::remove_all(tmp, ec);
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
