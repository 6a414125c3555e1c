#include "robust_pose/experiments.hpp"

#include "robust_pose/errors.hpp"
#include "robust_pose/model_io.hpp"
#include "robust_pose/parallel.hpp"
#include "robust_pose/plot.hpp"
#include "robust_pose/random.hpp"
#include "robust_pose/robust_points.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <set>

namespace robust_pose {

namespace {

const char* const kKindNames[] = {"corrector-analysis", "corrector-robustness", "centroid-robustness",
                                  "selftrain",          "certify",              "gen-scenes"};

using Row = std::vector<std::string>;

void write_csv(const std::filesystem::path& path, const Row& header, const std::vector<Row>& rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  auto line = [&](const Row& r) {
    for (std::size_t i = 0; i < r.size(); ++i) out << (i ? "," : "") << r[i];
    out << '\n';
  };
  line(header);
  for (const auto& r : rows) line(r);
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

// NaN becomes JSON null.
nlohmann::json number_json(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

nlohmann::json array_json(const std::vector<double>& v) {
  nlohmann::json a = nlohmann::json::array();
  for (double x : v) a.push_back(number_json(x));
  return a;
}

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw InvalidArgument(where + " must be an object");
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw InvalidArgument("unknown key '" + key + "' in " + where);
  }
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& target) {
  if (j.contains(key)) target = j.at(key).get<T>();
}

Eigen::Vector3d vec3(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) throw InvalidArgument("expected a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

int effective_trials(const ExperimentConfig& cfg) {
  return cfg.check ? std::min(cfg.trials, cfg.check_trials) : cfg.trials;
}

std::uint64_t trial_seed(std::uint64_t seed, std::size_t grid_index, int trial) {
  return derive_seed(derive_seed(seed, grid_index), static_cast<std::uint64_t>(trial));
}

/// Index of the grid value closest to `target`.
std::size_t grid_index_near(const std::vector<double>& grid, double target) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < grid.size(); ++i) {
    if (std::abs(grid[i] - target) < std::abs(grid[best] - target)) best = i;
  }
  return best;
}

struct PoseScore {
  double adds = 1.0;  // fraction of D
  bool oc = false;
};

PoseScore score_pose(const Pose& pose, const SceneSample& scene, const CadModel& model, const CameraIntrinsics& camera,
                     const CertificateConfig& cert) {
  PoseScore s;
  s.adds = adds_metric(pose, *scene.pose_gt, model) / model.diameter();
  try {
    s.oc = observable_correctness(scene.x, scene.mask, pose, model, camera, cert).oc;
  } catch (const EmptyProjection&) {
    s.oc = false;
  }
  return s;
}

std::vector<std::string> keypoint_sweep(const ExperimentConfig& cfg, const CadModel& model, const std::filesystem::path& dir,
                                        nlohmann::json& summary, std::vector<CheckOutcome>& checks) {
  const bool analysis = cfg.kind == ExperimentKind::CorrectorAnalysis;
  const std::vector<std::string> methods =
      analysis ? std::vector<std::string>{"none", "robust"} : std::vector<std::string>{"none", "robust", "non_robust"};
  const int trials = effective_trials(cfg);
  const CorrectorConfig robust = cfg.corrector.resolve(model, LossVariant::Robust);
  const CorrectorConfig plain = cfg.corrector.resolve(model, LossVariant::NonRobust);
  const CertificateConfig cert = cfg.certificate.resolve(model);
  const CameraIntrinsics& camera = cfg.scene.camera;
  const std::size_t m = methods.size();

  const std::size_t total = cfg.grid.size() * static_cast<std::size_t>(trials);
  std::vector<std::vector<PoseScore>> scores(total);
  parallel_for(total, cfg.workers, [&](std::size_t i) {
    const std::size_t g = i / static_cast<std::size_t>(trials);
    const int t = static_cast<int>(i % static_cast<std::size_t>(trials));
    const std::uint64_t seed = trial_seed(cfg.seed, g, t);
    SceneConfig sc = cfg.scene;
    if (!analysis) sc.outlier_rate = cfg.grid[g];
    const SceneSample scene = generate_scene(model, sc, seed);
    const double sigma = analysis ? cfg.grid[g] : cfg.sigma;
    const KeypointSet y = perturb_keypoints(*scene.keypoints_gt, sigma, cfg.keypoint_noise_prob, model.diameter(),
                                            derive_seed(seed, 1));
    auto& out = scores[i];
    out.push_back(score_pose(register_keypoints(y, model.keypoints()), scene, model, camera, cert));
    out.push_back(score_pose(solve_correction(y, model, scene.x, robust).corrected_pose, scene, model, camera, cert));
    if (!analysis) {
      out.push_back(score_pose(solve_correction(y, model, scene.x, plain).corrected_pose, scene, model, camera, cert));
    }
  });

  std::vector<Row> rows;
  nlohmann::json per_method = nlohmann::json::object();
  std::vector<std::vector<double>> mean_adds(m), oc_frac(m), cert_adds(m);
  for (std::size_t k = 0; k < m; ++k) {
    nlohmann::json mean_a = nlohmann::json::array(), std_a = nlohmann::json::array(), oc_a = nlohmann::json::array(),
                   cert_a = nlohmann::json::array(), cert_n = nlohmann::json::array(), n_a = nlohmann::json::array();
    for (std::size_t g = 0; g < cfg.grid.size(); ++g) {
      std::vector<double> adds, certified;
      for (int t = 0; t < trials; ++t) {
        const PoseScore& s = scores[g * static_cast<std::size_t>(trials) + static_cast<std::size_t>(t)][k];
        adds.push_back(s.adds);
        if (s.oc) certified.push_back(s.adds);
      }
      const double oc = static_cast<double>(certified.size()) / trials;
      mean_adds[k].push_back(mean_of(adds));
      oc_frac[k].push_back(oc);
      cert_adds[k].push_back(mean_of(certified));
      mean_a.push_back(number_json(mean_of(adds)));
      std_a.push_back(number_json(std_of(adds)));
      oc_a.push_back(oc);
      cert_a.push_back(number_json(mean_of(certified)));
      cert_n.push_back(certified.size());
      n_a.push_back(trials);
    }
    per_method[methods[k]] = {{"mean_adds", mean_a},        {"std_adds", std_a},
                              {"oc_fraction", oc_a},        {"certified_mean_adds", cert_a},
                              {"certified_count", cert_n}, {"count", n_a}};
  }
  for (std::size_t g = 0; g < cfg.grid.size(); ++g) {
    for (int t = 0; t < trials; ++t) {
      const auto& s = scores[g * static_cast<std::size_t>(trials) + static_cast<std::size_t>(t)];
      for (std::size_t k = 0; k < m; ++k) {
        rows.push_back({format_number(cfg.grid[g]), std::to_string(t), std::to_string(trial_seed(cfg.seed, g, t)),
                        methods[k], format_number(s[k].adds), s[k].oc ? "1" : "0"});
      }
    }
  }
  const std::string var = analysis ? "sigma" : "eta";
  write_csv(dir / "trials.csv", {var, "trial", "seed", "method", "adds", "oc"}, rows);
  summary["sweep_variable"] = var;
  summary["grid"] = cfg.grid;
  summary["trials"] = trials;
  summary["methods"] = per_method;

  std::vector<PlotSeries> adds_series, oc_series;
  for (std::size_t k = 0; k < m; ++k) {
    adds_series.push_back({methods[k], mean_adds[k]});
    oc_series.push_back({methods[k], oc_frac[k]});
  }
  write_line_chart_svg(dir / "adds.svg", "Mean ADD-S / D", var, "ADD-S / D", cfg.grid, adds_series);
  write_line_chart_svg(dir / "oc.svg", "Certified fraction", var, "oc fraction", cfg.grid, oc_series);
  std::vector<std::string> files{"trials.csv", "adds.svg", "oc.svg"};

  if (!cfg.check) return files;
  if (analysis) {
    const std::size_t g = cfg.grid.size() - 1;
    const std::string at = " at sigma=" + format_number(cfg.grid[g]);
    checks.push_back({"robust oc fraction" + at, oc_frac[1][g], 0.9, oc_frac[1][g] >= 0.9});
    checks.push_back({"robust certified mean ADD-S / D" + at, cert_adds[1][g], 0.05, cert_adds[1][g] <= 0.05});
    checks.push_back({"no-corrector oc fraction" + at, oc_frac[0][g], 0.05, oc_frac[0][g] <= 0.05});
  } else {
    const double base = mean_adds[1][0];
    for (std::size_t g = 0; g < cfg.grid.size(); ++g) {
      if (cfg.grid[g] < 0.4) continue;
      const std::string at = " at eta=" + format_number(cfg.grid[g]);
      checks.push_back({"robust < none" + at, mean_adds[1][g], mean_adds[0][g], mean_adds[1][g] < mean_adds[0][g]});
      checks.push_back({"none < non-robust" + at, mean_adds[0][g], mean_adds[2][g], mean_adds[0][g] < mean_adds[2][g]});
      checks.push_back({"robust within 2x of first grid value" + at, mean_adds[1][g], 2.0 * base,
                        mean_adds[1][g] <= 2.0 * base});
    }
  }
  return files;
}

double outlier_fraction(const std::vector<Eigen::Index>& idx, const std::vector<bool>& flags) {
  double n = 0.0;
  for (Eigen::Index i : idx) n += flags[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
  return idx.empty() ? 0.0 : n / static_cast<double>(idx.size());
}

std::vector<std::string> centroid_sweep(const ExperimentConfig& cfg, const std::filesystem::path& dir,
                                        nlohmann::json& summary, std::vector<CheckOutcome>& checks) {
  const CentroidSettings& cs = cfg.centroid;
  const int trials = effective_trials(cfg);
  GncConfig gnc;
  gnc.c_bar_centroid = cs.c_bar;
  auto split = [&](double eta) {
    const int outliers = static_cast<int>(std::lround(eta * cs.points));
    return std::pair<int, int>{cs.points - outliers, outliers};
  };

  // Oracle scores: an MLP fitted to the inlier indicator on separate clouds of the same outlier rate.
  std::vector<ScalarMlp> mlps(cfg.grid.size());
  parallel_for(cfg.grid.size(), cfg.workers, [&](std::size_t g) {
    const auto [n_in, n_out] = split(cfg.grid[g]);
    Eigen::MatrixXd feats(3, static_cast<Eigen::Index>(cs.training_clouds) * cs.points);
    Eigen::VectorXd labels(feats.cols());
    for (int s = 0; s < cs.training_clouds; ++s) {
      const LabeledCloud c = ball_with_box_outliers(n_in, n_out, cs.inlier_radius, cs.center, cs.outlier_box,
                                                    derive_seed(derive_seed(cfg.seed, 1000 + g), s));
      const Eigen::Vector3d bar = robust_centroid(c.cloud, gnc).centroid;
      feats.middleCols(static_cast<Eigen::Index>(s) * cs.points, cs.points) = center_cloud(c.cloud, bar).points;
      for (int i = 0; i < cs.points; ++i) {
        labels(static_cast<Eigen::Index>(s) * cs.points + i) = c.outlier_flags[static_cast<std::size_t>(i)] ? 0.0 : 1.0;
      }
    }
    auto rng = make_rng(cfg.seed, 2000 + g);
    MlpFitConfig fit;
    fit.epochs = cs.mlp_epochs;
    fit.seed = derive_seed(cfg.seed, 3000 + g);
    mlps[g] = fit_scalar_mlp(ScalarMlp::random(3, rng), feats, labels, fit);
  });

  struct Trial {
    double robust = 0.0, mean = 0.0, oracle = 0.0, fps = 0.0, pool = 0.0;
  };
  const std::size_t total = cfg.grid.size() * static_cast<std::size_t>(trials);
  std::vector<Trial> res(total);
  parallel_for(total, cfg.workers, [&](std::size_t i) {
    const std::size_t g = i / static_cast<std::size_t>(trials);
    const int t = static_cast<int>(i % static_cast<std::size_t>(trials));
    const std::uint64_t seed = trial_seed(cfg.seed, g, t);
    const auto [n_in, n_out] = split(cfg.grid[g]);
    const LabeledCloud c = ball_with_box_outliers(n_in, n_out, cs.inlier_radius, cs.center, cs.outlier_box, seed);
    const Eigen::Vector3d bar = robust_centroid(c.cloud, gnc).centroid;
    Trial& r = res[i];
    r.robust = (bar - cs.center).norm();
    r.mean = (c.cloud.points.rowwise().mean() - cs.center).norm();
    r.oracle = (c.cloud.points.leftCols(n_in).rowwise().mean() - cs.center).norm();
    auto rng = make_rng(seed, 1);
    const auto start = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(cs.points));
    const int k = std::min(cs.pool_size, cs.points);
    r.fps = outlier_fraction(fps_indices(c.cloud.points, k, start), c.outlier_flags);
    const Eigen::MatrixXd feats = center_cloud(c.cloud, bar).points;
    r.pool = outlier_fraction(top_k_indices(pooling_scores(feats, identity_pooling(mlps[g], cs.points, k)), k),
                              c.outlier_flags);
  });

  std::vector<Row> rows;
  const char* names[] = {"robust_error", "mean_error", "oracle_error", "fps_outlier_fraction", "pool_outlier_fraction"};
  std::vector<std::vector<double>> means(5), stds(5);
  for (std::size_t g = 0; g < cfg.grid.size(); ++g) {
    std::vector<std::vector<double>> cols(5);
    for (int t = 0; t < trials; ++t) {
      const Trial& r = res[g * static_cast<std::size_t>(trials) + static_cast<std::size_t>(t)];
      const double v[] = {r.robust, r.mean, r.oracle, r.fps, r.pool};
      for (int c = 0; c < 5; ++c) cols[c].push_back(v[c]);
      rows.push_back({format_number(cfg.grid[g]), std::to_string(t), std::to_string(trial_seed(cfg.seed, g, t)),
                      format_number(r.robust), format_number(r.mean), format_number(r.oracle), format_number(r.fps),
                      format_number(r.pool)});
    }
    for (int c = 0; c < 5; ++c) {
      means[c].push_back(mean_of(cols[c]));
      stds[c].push_back(std_of(cols[c]));
    }
  }
  write_csv(dir / "trials.csv",
            {"eta", "trial", "seed", names[0], names[1], names[2], names[3], names[4]}, rows);
  summary["sweep_variable"] = "eta";
  summary["grid"] = cfg.grid;
  summary["trials"] = trials;
  for (int c = 0; c < 5; ++c) summary[names[c]] = {{"mean", array_json(means[c])}, {"std", array_json(stds[c])}};
  write_line_chart_svg(dir / "centroid_error.svg", "Centroid error (m)", "eta", "error (m)", cfg.grid,
                       {{"robust", means[0]}, {"mean", means[1]}, {"oracle", means[2]}});
  write_line_chart_svg(dir / "outlier_fraction.svg", "Outlier fraction of the selection", "eta", "fraction",
                       cfg.grid, {{"fps", means[3]}, {"robust_pool", means[4]}, {"eta", cfg.grid}});

  if (cfg.check) {
    const std::size_t g = grid_index_near(cfg.grid, 0.3);
    const std::string at = " at eta=" + format_number(cfg.grid[g]);
    checks.push_back({"robust error / mean error" + at, means[0][g] / means[1][g], 0.2, means[0][g] < 0.2 * means[1][g]});
    checks.push_back({"fps outlier fraction > eta" + at, means[3][g], cfg.grid[g], means[3][g] > cfg.grid[g]});
    checks.push_back({"fps outlier fraction > robust_pool" + at, means[3][g], means[4][g], means[3][g] > means[4][g]});
  }
  return {"trials.csv", "centroid_error.svg", "outlier_fraction.svg"};
}

nlohmann::json score_json(const MethodScore& s) {
  return {{"method", s.method},       {"model", s.model},           {"threshold_adds", s.threshold_adds},
          {"mean_adds", number_json(s.mean_adds)}, {"auc", s.auc}, {"oc_fraction", s.oc_fraction},
          {"count", s.count}};
}

double model_mean(const std::vector<MethodScore>& rows, double MethodScore::*field) {
  std::vector<double> v;
  for (const auto& r : rows) {
    if (r.model != "ensemble") v.push_back(r.*field);
  }
  return mean_of(v);
}

std::vector<std::string> selftrain_run(const ExperimentConfig& cfg, const CadModel& model,
                                       const std::filesystem::path& dir, nlohmann::json& summary,
                                       std::vector<CheckOutcome>& checks) {
  const SelfTrainSettings& st = cfg.selftrain;
  const CorrectorConfig cc = cfg.corrector.resolve(model);
  const CertificateConfig cert = cfg.certificate.resolve(model);
  const CameraIntrinsics& camera = st.real.camera;

  const auto sim = generate_scenes(model, st.sim, st.pretrain_scenes, derive_seed(cfg.seed, 1), cfg.workers);
  std::vector<SceneSample> pool = generate_scenes(model, st.real, st.pool_scenes, derive_seed(cfg.seed, 3), cfg.workers);
  for (auto& s : pool) s = strip_ground_truth(s);
  const auto eval = generate_scenes(model, st.real, st.eval_scenes, derive_seed(cfg.seed, 4), cfg.workers);
  const auto compare = generate_scenes(model, st.real, st.comparison_scenes, derive_seed(cfg.seed, 5), cfg.workers);

  TrainConfig train;
  train.learning_rate = st.learning_rate;
  train.momentum = st.momentum;
  train.weight_decay = st.weight_decay;
  train.batch_size = st.batch_size;

  std::filesystem::create_directories(dir / "detectors");
  std::vector<std::string> files;
  std::vector<DetectorParams> detectors;
  nlohmann::json pretrain = nlohmann::json::array();
  for (int k = 0; k < st.models; ++k) {
    TrainConfig pc = train;
    pc.epochs = st.pretrain_epochs;
    pc.seed = derive_seed(cfg.seed, 200 + static_cast<std::uint64_t>(k));
    PretrainLog plog;
    detectors.push_back(pretrain_supervised(
        DetectorParams::random(model, derive_seed(cfg.seed, 100 + static_cast<std::uint64_t>(k)), st.fps_size, st.hidden),
        sim, pc, &plog, cfg.workers));
    const std::string stem = "pretrained_" + std::to_string(k + 1);
    save_detector(dir / "detectors" / stem, detectors.back());
    files.push_back("detectors/" + stem + ".json");
    files.push_back("detectors/" + stem + ".bin");
    pretrain.push_back({{"model", k + 1}, {"epoch_loss", array_json(plog.epoch_loss)}});
  }

  std::vector<MethodScore> table =
      score_detectors("sim_only", detectors, compare, model, camera, cc, cert, st.corrector_points, false,
                      st.success_threshold, cfg.workers);
  const auto with_corrector = score_detectors("sim_corrector", detectors, compare, model, camera, cc, cert,
                                              st.corrector_points, true, st.success_threshold, cfg.workers);

  SelfTrainConfig sc;
  sc.train = train;
  sc.train.seed = derive_seed(cfg.seed, 300);
  sc.iterations = cfg.check ? std::min(st.iterations, st.check_iterations) : st.iterations;
  sc.eval_every = st.eval_every;
  sc.corrector_points = st.corrector_points;
  sc.gradient_mode = st.gradient_mode;
  sc.workers = cfg.workers;
  TrainLog log;
  const auto trained = self_train(detectors, pool, model, camera, cc, cert, sc, eval, log);
  for (int k = 0; k < st.models; ++k) {
    const std::string stem = "selftrained_" + std::to_string(k + 1);
    save_detector(dir / "detectors" / stem, trained[static_cast<std::size_t>(k)]);
    files.push_back("detectors/" + stem + ".json");
    files.push_back("detectors/" + stem + ".bin");
  }
  const auto after = score_detectors("self_trained", trained, compare, model, camera, cc, cert, st.corrector_points,
                                     true, st.success_threshold, cfg.workers);
  table.insert(table.end(), with_corrector.begin(), with_corrector.end());
  table.insert(table.end(), after.begin(), after.end());

  write_train_log_csv(dir / "train_log.csv", log, static_cast<std::size_t>(st.models));
  std::vector<Row> rows;
  nlohmann::json table_json = nlohmann::json::array();
  for (const auto& s : table) {
    rows.push_back({s.method, s.model, format_number(s.threshold_adds), format_number(s.mean_adds),
                    format_number(s.auc), format_number(s.oc_fraction), std::to_string(s.count)});
    table_json.push_back(score_json(s));
  }
  write_csv(dir / "comparison.csv", {"method", "model", "threshold_adds", "mean_adds", "auc", "oc_fraction", "count"},
            rows);

  std::vector<double> its;
  std::vector<PlotSeries> series(static_cast<std::size_t>(st.models));
  for (int k = 0; k < st.models; ++k) series[static_cast<std::size_t>(k)].name = "model " + std::to_string(k + 1);
  const TrainRecord* first = nullptr;
  const TrainRecord* last = nullptr;
  int skipped = 0;
  for (const auto& r : log.records) {
    if (r.iteration > 0 && !r.updated) ++skipped;
    if (r.eval_oc.empty()) continue;
    if (!first) first = &r;
    last = &r;
    its.push_back(r.iteration);
    for (std::size_t k = 0; k < series.size(); ++k) series[k].y.push_back(r.eval_oc[k]);
  }
  if (!its.empty()) write_line_chart_svg(dir / "oc.svg", "Certified fraction (evaluation set)", "iteration",
                                         "oc fraction", its, series);
  const std::vector<double> initial = first ? first->eval_oc : std::vector<double>{};
  const std::vector<double> final_oc = last ? last->eval_oc : std::vector<double>{};
  const double improvement = mean_of(final_oc) - mean_of(initial);
  const double sim_corr = model_mean(with_corrector, &MethodScore::threshold_adds);
  const std::vector<MethodScore> sim_rows(table.begin(), table.begin() + st.models);
  summary["iterations"] = sc.iterations;
  summary["initial_oc"] = array_json(initial);
  summary["final_oc"] = array_json(final_oc);
  summary["initial_oc_mean"] = number_json(mean_of(initial));
  summary["final_oc_mean"] = number_json(mean_of(final_oc));
  summary["improvement"] = number_json(improvement);
  summary["skipped_updates"] = skipped;
  summary["pretraining"] = pretrain;
  summary["comparison"] = table_json;
  summary["threshold_adds"] = {{"sim_only", model_mean(sim_rows, &MethodScore::threshold_adds)},
                               {"sim_corrector", sim_corr},
                               {"self_trained", model_mean(after, &MethodScore::threshold_adds)}};

  if (cfg.check) {
    const double need = sc.iterations >= 3000 ? 0.3 : 0.1;
    checks.push_back({"oc fraction improvement", improvement, need, improvement >= need});
    const double so = model_mean(sim_rows, &MethodScore::threshold_adds);
    checks.push_back({"sim+corrector threshold-ADD-S > sim-only", sim_corr, so, sim_corr > so});
  }
  files.insert(files.end(), {"train_log.csv", "comparison.csv"});
  if (!its.empty()) files.push_back("oc.svg");
  return files;
}

std::vector<std::string> certify_run(const ExperimentConfig& cfg, const CadModel& model, const std::filesystem::path& dir,
                                     nlohmann::json& summary) {
  CameraIntrinsics camera;
  const SceneSample scene = read_scene(cfg.scene_path, &camera);
  std::ifstream in(cfg.pose_path);
  if (!in) throw IoError("cannot open pose " + cfg.pose_path);
  nlohmann::json pj;
  try {
    in >> pj;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(cfg.pose_path + ": " + e.what());
  }
  const Pose pose = pose_from_json(pj.contains("pose") ? pj.at("pose") : pj.contains("pose_gt") ? pj.at("pose_gt") : pj);
  CertificateResult r;
  try {
    r = observable_correctness(scene.x, scene.mask, pose, model, camera, cfg.certificate.resolve(model));
  } catch (const EmptyProjection&) {
    r = CertificateResult{};
  }
  nlohmann::json cj = r;
  summary["certificate"] = cj;
  write_json(dir / "certificate.json", cj);
  return {"certificate.json"};
}

std::vector<std::string> gen_scenes_run(const ExperimentConfig& cfg, const CadModel& model,
                                        const std::filesystem::path& dir, nlohmann::json& summary) {
  const auto scenes = generate_scenes(model, cfg.scene, cfg.count, cfg.seed, cfg.workers);
  std::vector<std::string> files;
  nlohmann::json list = nlohmann::json::array();
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    char stem[32];
    std::snprintf(stem, sizeof(stem), "scene_%04zu", i);
    write_scene(dir, stem, scenes[i], cfg.scene.camera);
    list.push_back(std::string(stem) + ".json");
    files.push_back(std::string(stem) + ".json");
  }
  summary["scenes"] = list;
  summary["count"] = scenes.size();
  return files;
}

}  // namespace

ExperimentKind parse_experiment_kind(const std::string& name) {
  for (int i = 0; i < 6; ++i) {
    if (name == kKindNames[i]) return static_cast<ExperimentKind>(i);
  }
  throw InvalidArgument("unknown experiment '" + name + "'");
}

std::string to_string(ExperimentKind kind) { return kKindNames[static_cast<int>(kind)]; }

CorrectorConfig CorrectorSettings::resolve(const CadModel& model, LossVariant variant) const {
  CorrectorConfig c = CorrectorConfig::defaults_for(model);
  c.c_bar = c_bar * model.diameter();
  c.grad_tol = grad_tol * model.diameter();
  if (step_size > 0.0) c.step_size = step_size;
  c.max_iters = max_iters;
  c.max_halvings = max_halvings;
  c.loss_variant = variant;
  c.validate();
  return c;
}

CertificateConfig CertificateSettings::resolve(const CadModel& model) const {
  CertificateConfig c;
  c.p = p;
  c.eps_3d = eps_3d * model.diameter();
  c.eps_2d = eps_2d;
  c.dilation_radius = dilation_radius;
  c.splat_scale = splat_scale;
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::defaults(ExperimentKind kind) {
  ExperimentConfig c;
  c.kind = kind;
  c.selftrain.sim.pose_bounds.max_rotation_angle = std::numbers::pi / 3.0;
  c.selftrain.real = c.selftrain.sim;
  c.selftrain.real.gaussian_noise_std = 0.005;
  c.selftrain.real.outlier_rate = 0.2;
  c.selftrain.real.mask_corruption = {2, 4, 2, 4};
  switch (kind) {
    case ExperimentKind::CorrectorAnalysis:
    case ExperimentKind::CorrectorRobustness:
      c.grid = {0.0, 0.2, 0.4, 0.6};
      break;
    case ExperimentKind::CentroidRobustness:
      c.grid = {0.0, 0.1, 0.2, 0.3, 0.4};
      break;
    case ExperimentKind::SelfTrain:
      c.certificate.p = 0.7;
      break;
    default:
      break;
  }
  return c;
}

void ExperimentConfig::validate() const {
  const bool sweep = kind == ExperimentKind::CorrectorAnalysis || kind == ExperimentKind::CorrectorRobustness ||
                     kind == ExperimentKind::CentroidRobustness;
  if (sweep && grid.empty()) throw InvalidArgument("grid must not be empty");
  if (trials < 1 || check_trials < 1) throw InvalidArgument("trials must be >= 1");
  if (workers < 1) throw InvalidArgument("workers must be >= 1");
  if (!(keypoint_noise_prob >= 0.0 && keypoint_noise_prob <= 1.0)) throw InvalidArgument("keypoint_noise_prob must lie in [0, 1]");
  if (!(sigma >= 0.0)) throw InvalidArgument("sigma must be >= 0");
  for (double g : grid) {
    if (!std::isfinite(g) || g < 0.0) throw InvalidArgument("grid values must be finite and >= 0");
    if (kind != ExperimentKind::CorrectorAnalysis && sweep && g >= 1.0) throw InvalidArgument("outlier rates must be < 1");
  }
  scene.validate();
  const CorrectorSettings& cs = corrector;
  if (!(cs.c_bar > 0.0) || !(cs.grad_tol > 0.0) || cs.step_size < 0.0 || cs.max_iters < 1 || cs.max_halvings < 0) {
    throw InvalidArgument("invalid corrector settings");
  }
  if (!(certificate.p > 0.0 && certificate.p <= 1.0) || !(certificate.eps_3d > 0.0) || certificate.eps_2d < 0.0 ||
      certificate.eps_2d > 1.0 || certificate.dilation_radius < 0 || !(certificate.splat_scale > 0.0)) {
    throw InvalidArgument("invalid certificate settings");
  }
  const CentroidSettings& c = centroid;
  if (c.points < 1 || !(c.inlier_radius > 0.0) || !(c.outlier_box > 0.0) || !(c.c_bar > 0.0) || c.pool_size < 1 ||
      c.training_clouds < 1 || c.mlp_epochs < 0) {
    throw InvalidArgument("invalid centroid settings");
  }
  if (kind == ExperimentKind::CentroidRobustness) {
    for (double g : grid) {
      if (std::lround(g * c.points) >= c.points) throw InvalidArgument("every cloud needs at least one inlier");
    }
  }
  const SelfTrainSettings& s = selftrain;
  s.sim.validate();
  s.real.validate();
  if (s.models < 1 || s.pretrain_scenes < 1 || s.pretrain_epochs < 0 || s.pool_scenes < 1 || s.eval_scenes < 0 ||
      s.comparison_scenes < 1 || s.iterations < 0 || s.check_iterations < 0 || s.eval_every < 1 ||
      !(s.learning_rate > 0.0) || s.momentum < 0.0 || s.momentum >= 1.0 || s.weight_decay < 0.0 || s.batch_size < 1 ||
      s.corrector_points < 3 || s.fps_size < 1 || s.hidden < 1 || !(s.success_threshold > 0.0)) {
    throw InvalidArgument("invalid selftrain settings");
  }
  if (kind == ExperimentKind::Certify && (scene_path.empty() || pose_path.empty())) {
    throw InvalidArgument("certify needs scene_path and pose_path");
  }
  if (kind == ExperimentKind::GenScenes && count < 1) throw InvalidArgument("count must be >= 1");
}

nlohmann::json ExperimentConfig::to_json() const {
  const auto& s = selftrain;
  return {{"experiment", robust_pose::to_string(kind)},
          {"model", model},
          {"seed", seed},
          {"grid", grid},
          {"trials", trials},
          {"check_trials", check_trials},
          {"check", check},
          {"keypoint_noise_prob", keypoint_noise_prob},
          {"sigma", sigma},
          {"scene", scene},
          {"corrector",
           {{"c_bar", corrector.c_bar},
            {"grad_tol", corrector.grad_tol},
            {"step_size", corrector.step_size},
            {"max_iters", corrector.max_iters},
            {"max_halvings", corrector.max_halvings}}},
          {"certificate",
           {{"p", certificate.p},
            {"eps_3d", certificate.eps_3d},
            {"eps_2d", certificate.eps_2d},
            {"dilation_radius", certificate.dilation_radius},
            {"splat_scale", certificate.splat_scale}}},
          {"centroid",
           {{"points", centroid.points},
            {"inlier_radius", centroid.inlier_radius},
            {"center", {centroid.center.x(), centroid.center.y(), centroid.center.z()}},
            {"outlier_box", centroid.outlier_box},
            {"c_bar", centroid.c_bar},
            {"pool_size", centroid.pool_size},
            {"training_clouds", centroid.training_clouds},
            {"mlp_epochs", centroid.mlp_epochs}}},
          {"selftrain",
           {{"models", s.models},
            {"sim", s.sim},
            {"real", s.real},
            {"pretrain_scenes", s.pretrain_scenes},
            {"pretrain_epochs", s.pretrain_epochs},
            {"pool_scenes", s.pool_scenes},
            {"eval_scenes", s.eval_scenes},
            {"comparison_scenes", s.comparison_scenes},
            {"iterations", s.iterations},
            {"check_iterations", s.check_iterations},
            {"eval_every", s.eval_every},
            {"learning_rate", s.learning_rate},
            {"momentum", s.momentum},
            {"weight_decay", s.weight_decay},
            {"batch_size", s.batch_size},
            {"corrector_points", s.corrector_points},
            {"gradient_mode", robust_pose::to_string(s.gradient_mode)},
            {"fps_size", s.fps_size},
            {"hidden", s.hidden},
            {"success_threshold", s.success_threshold}}},
          {"scene_path", scene_path},
          {"pose_path", pose_path},
          {"count", count}};
}

void apply_config_json(ExperimentConfig& cfg, const nlohmann::json& j) {
  try {
    reject_unknown(j,
                   {"experiment", "model", "seed", "grid", "trials", "check_trials", "check", "keypoint_noise_prob",
                    "sigma", "scene", "corrector", "certificate", "centroid", "selftrain", "scene_path", "pose_path",
                    "count", "workers", "out"},
                   "config");
    if (j.contains("experiment") && parse_experiment_kind(j.at("experiment").get<std::string>()) != cfg.kind) {
      throw InvalidArgument("config is for experiment '" + j.at("experiment").get<std::string>() + "'");
    }
    read(j, "model", cfg.model);
    read(j, "seed", cfg.seed);
    read(j, "grid", cfg.grid);
    read(j, "trials", cfg.trials);
    read(j, "check_trials", cfg.check_trials);
    read(j, "check", cfg.check);
    read(j, "keypoint_noise_prob", cfg.keypoint_noise_prob);
    read(j, "sigma", cfg.sigma);
    read(j, "scene_path", cfg.scene_path);
    read(j, "pose_path", cfg.pose_path);
    read(j, "count", cfg.count);
    read(j, "workers", cfg.workers);
    if (j.contains("out")) cfg.out_dir = j.at("out").get<std::string>();
    if (j.contains("scene")) from_json(j.at("scene"), cfg.scene);
    if (j.contains("corrector")) {
      const auto& c = j.at("corrector");
      reject_unknown(c, {"c_bar", "grad_tol", "step_size", "max_iters", "max_halvings"}, "corrector");
      read(c, "c_bar", cfg.corrector.c_bar);
      read(c, "grad_tol", cfg.corrector.grad_tol);
      read(c, "step_size", cfg.corrector.step_size);
      read(c, "max_iters", cfg.corrector.max_iters);
      read(c, "max_halvings", cfg.corrector.max_halvings);
    }
    if (j.contains("certificate")) {
      const auto& c = j.at("certificate");
      reject_unknown(c, {"p", "eps_3d", "eps_2d", "dilation_radius", "splat_scale"}, "certificate");
      read(c, "p", cfg.certificate.p);
      read(c, "eps_3d", cfg.certificate.eps_3d);
      read(c, "eps_2d", cfg.certificate.eps_2d);
      read(c, "dilation_radius", cfg.certificate.dilation_radius);
      read(c, "splat_scale", cfg.certificate.splat_scale);
    }
    if (j.contains("centroid")) {
      const auto& c = j.at("centroid");
      reject_unknown(c,
                     {"points", "inlier_radius", "center", "outlier_box", "c_bar", "pool_size", "training_clouds",
                      "mlp_epochs"},
                     "centroid");
      read(c, "points", cfg.centroid.points);
      read(c, "inlier_radius", cfg.centroid.inlier_radius);
      if (c.contains("center")) cfg.centroid.center = vec3(c.at("center"));
      read(c, "outlier_box", cfg.centroid.outlier_box);
      read(c, "c_bar", cfg.centroid.c_bar);
      read(c, "pool_size", cfg.centroid.pool_size);
      read(c, "training_clouds", cfg.centroid.training_clouds);
      read(c, "mlp_epochs", cfg.centroid.mlp_epochs);
    }
    if (j.contains("selftrain")) {
      const auto& c = j.at("selftrain");
      auto& s = cfg.selftrain;
      reject_unknown(c,
                     {"models", "sim", "real", "pretrain_scenes", "pretrain_epochs", "pool_scenes", "eval_scenes",
                      "comparison_scenes", "iterations", "check_iterations", "eval_every", "learning_rate", "momentum",
                      "weight_decay", "batch_size", "corrector_points", "gradient_mode", "fps_size", "hidden",
                      "success_threshold"},
                     "selftrain");
      read(c, "models", s.models);
      if (c.contains("sim")) from_json(c.at("sim"), s.sim);
      if (c.contains("real")) from_json(c.at("real"), s.real);
      read(c, "pretrain_scenes", s.pretrain_scenes);
      read(c, "pretrain_epochs", s.pretrain_epochs);
      read(c, "pool_scenes", s.pool_scenes);
      read(c, "eval_scenes", s.eval_scenes);
      read(c, "comparison_scenes", s.comparison_scenes);
      read(c, "iterations", s.iterations);
      read(c, "check_iterations", s.check_iterations);
      read(c, "eval_every", s.eval_every);
      read(c, "learning_rate", s.learning_rate);
      read(c, "momentum", s.momentum);
      read(c, "weight_decay", s.weight_decay);
      read(c, "batch_size", s.batch_size);
      read(c, "corrector_points", s.corrector_points);
      if (c.contains("gradient_mode")) s.gradient_mode = parse_gradient_mode(c.at("gradient_mode").get<std::string>());
      read(c, "fps_size", s.fps_size);
      read(c, "hidden", s.hidden);
      read(c, "success_threshold", s.success_threshold);
    }
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("config: ") + e.what());
  }
}

bool ExperimentResult::passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const CheckOutcome& c) { return c.pass; });
}

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (v == 0.0) return "0";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

std::vector<SceneSample> generate_scenes(const CadModel& model, const SceneConfig& cfg, int n, std::uint64_t base,
                                         int workers) {
  std::vector<SceneSample> out(static_cast<std::size_t>(std::max(n, 0)));
  parallel_for(out.size(), workers, [&](std::size_t i) { out[i] = generate_scene(model, cfg, derive_seed(base, i)); });
  return out;
}

std::vector<MethodScore> score_detectors(const std::string& method, const std::vector<DetectorParams>& detectors,
                                         const std::vector<SceneSample>& scenes, const CadModel& model,
                                         const CameraIntrinsics& camera, const CorrectorConfig& corrector,
                                         const CertificateConfig& cert, int corrector_points, bool with_corrector,
                                         double success_threshold, int workers) {
  if (scenes.empty()) throw InvalidArgument("scoring needs scenes");
  const std::size_t k_models = detectors.size();
  const std::size_t columns = k_models + (with_corrector ? 1 : 0);
  std::vector<std::vector<PoseScore>> res(scenes.size(), std::vector<PoseScore>(columns));
  parallel_for(scenes.size(), workers, [&](std::size_t i) {
    const SceneSample& s = scenes[i];
    if (!s.pose_gt) throw InvalidArgument("scoring needs ground-truth poses");
    if (with_corrector) {
      const auto outs = run_models(detectors, s.x, s.mask, model, camera, corrector, cert, corrector_points,
                                   derive_seed(s.seed, 0x5ab));
      for (std::size_t k = 0; k < k_models; ++k) {
        if (!outs[k].valid) continue;
        res[i][k] = {adds_metric(outs[k].corrected_pose, *s.pose_gt, model) / model.diameter(), outs[k].certificate.oc};
      }
      const bool any = std::any_of(outs.begin(), outs.end(), [](const ModelOutput& o) { return o.valid && o.certificate.oc; });
      res[i][k_models] = {adds_metric(ensemble_pose(outs), *s.pose_gt, model) / model.diameter(), any};
      return;
    }
    for (std::size_t k = 0; k < k_models; ++k) {
      try {
        res[i][k] = score_pose(register_keypoints(detect(detectors[k], s.x), model.keypoints()), s, model, camera, cert);
      } catch (const DegenerateConfiguration&) {
        res[i][k] = PoseScore{};
      }
    }
  });
  std::vector<MethodScore> rows;
  for (std::size_t c = 0; c < columns; ++c) {
    MethodScore m;
    m.method = method;
    m.model = c < k_models ? std::to_string(c + 1) : "ensemble";
    std::vector<double> adds, meters;
    double oc = 0.0, ok = 0.0;
    for (const auto& r : res) {
      adds.push_back(r[c].adds);
      meters.push_back(r[c].adds * model.diameter());
      oc += r[c].oc ? 1.0 : 0.0;
      ok += r[c].adds < success_threshold ? 1.0 : 0.0;
    }
    const auto n = static_cast<double>(res.size());
    m.threshold_adds = ok / n;
    m.mean_adds = mean_of(adds);
    m.auc = adds_auc(meters, 0.1 * model.diameter());
    m.oc_fraction = oc / n;
    m.count = static_cast<int>(res.size());
    rows.push_back(m);
  }
  return rows;
}

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  std::filesystem::create_directories(cfg.out_dir);
  ExperimentResult result;
  nlohmann::json summary{{"experiment", to_string(cfg.kind)}};
  std::vector<std::string> files;
  const bool needs_model = cfg.kind != ExperimentKind::CentroidRobustness;
  const std::optional<CadModel> model =
      needs_model ? std::optional<CadModel>(model_from_spec(cfg.model)) : std::nullopt;
  switch (cfg.kind) {
    case ExperimentKind::CorrectorAnalysis:
    case ExperimentKind::CorrectorRobustness:
      files = keypoint_sweep(cfg, *model, cfg.out_dir, summary, result.checks);
      break;
    case ExperimentKind::CentroidRobustness:
      files = centroid_sweep(cfg, cfg.out_dir, summary, result.checks);
      break;
    case ExperimentKind::SelfTrain:
      files = selftrain_run(cfg, *model, cfg.out_dir, summary, result.checks);
      break;
    case ExperimentKind::Certify:
      files = certify_run(cfg, *model, cfg.out_dir, summary);
      break;
    case ExperimentKind::GenScenes:
      files = gen_scenes_run(cfg, *model, cfg.out_dir, summary);
      break;
  }
  if (cfg.check) {
    nlohmann::json checks = nlohmann::json::array();
    for (const auto& c : result.checks) {
      checks.push_back({{"name", c.name}, {"value", number_json(c.value)}, {"threshold", number_json(c.threshold)},
                        {"pass", c.pass}});
    }
    summary["checks"] = checks;
  }
  result.summary = summary;
  write_json(cfg.out_dir / "summary.json", summary);
  files.push_back("summary.json");
  write_json(cfg.out_dir / "manifest.json", {{"command", to_string(cfg.kind)}, {"config", cfg.to_json()}, {"outputs", files}});
  return result;
}

}  // namespace robust_pose
