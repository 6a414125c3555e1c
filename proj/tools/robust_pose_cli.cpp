#include "robust_pose/errors.hpp"
#include "robust_pose/experiments.hpp"
#include "robust_pose/parallel.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <fstream>
#include <iostream>
#include <optional>

using namespace robust_pose;

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<int> workers;
  bool check = false;
  std::string model;
  std::string scene;
  std::string pose;
  std::optional<int> count;
  std::optional<int> trials;
};

ExperimentConfig resolve(ExperimentKind kind, const Flags& f) {
  ExperimentConfig cfg = ExperimentConfig::defaults(kind);
  cfg.workers = default_workers();
  if (!f.config.empty()) {
    std::ifstream in(f.config);
    if (!in) throw IoError("cannot open config " + f.config);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw IoError(f.config + ": " + e.what());
    }
    apply_config_json(cfg, j);
  }
  if (f.seed) cfg.seed = *f.seed;
  if (!f.out.empty()) cfg.out_dir = f.out;
  if (f.workers) cfg.workers = *f.workers;
  if (f.check) cfg.check = true;
  if (!f.model.empty()) cfg.model = f.model;
  if (!f.scene.empty()) cfg.scene_path = f.scene;
  if (!f.pose.empty()) cfg.pose_path = f.pose;
  if (f.count) cfg.count = *f.count;
  if (f.trials) cfg.trials = *f.trials;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Outlier-robust keypoint pose estimation experiments"};
  app.require_subcommand(1);
  Flags flags;
  const char* names[] = {"corrector-analysis", "corrector-robustness", "centroid-robustness",
                         "selftrain",          "certify",              "gen-scenes"};
  const char* help[] = {"corrector vs no corrector over keypoint noise sigma",
                        "robust, non-robust and no corrector over outlier rate",
                        "robust centroid and FPS vs robust pooling over outlier rate",
                        "sim pre-training followed by certified ensemble self-training",
                        "certificate of one pose on one scene",
                        "write synthetic scenes"};
  std::vector<CLI::App*> subs;
  for (int i = 0; i < 6; ++i) {
    CLI::App* s = app.add_subcommand(names[i], help[i]);
    s->add_option("--config", flags.config, "JSON config file")->check(CLI::ExistingFile);
    s->add_option("--seed", flags.seed, "master seed");
    s->add_option("--out", flags.out, "output directory");
    s->add_option("--workers", flags.workers, "worker threads")->check(CLI::PositiveNumber);
    s->add_flag("--check", flags.check, "reduced run asserting the acceptance thresholds");
    s->add_option("--model", flags.model, "box, cylinder, lbracket[:sx,sy,sz] or mesh.ply|obj:sidecar.json");
    if (i < 3) s->add_option("--trials", flags.trials, "trials per grid value");
    if (i == 4) {
      s->add_option("--scene", flags.scene, "scene JSON written by gen-scenes");
      s->add_option("--pose", flags.pose, "pose JSON {\"rotation\": [[...]], \"translation\": [...]}");
    }
    if (i == 5) s->add_option("--count", flags.count, "number of scenes");
    subs.push_back(s);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  int chosen = 0;
  for (int i = 0; i < 6; ++i) {
    if (subs[static_cast<std::size_t>(i)]->parsed()) chosen = i;
  }
  const auto kind = static_cast<ExperimentKind>(chosen);
  try {
    const ExperimentConfig cfg = resolve(kind, flags);
    const ExperimentResult result = run_experiment(cfg);
    if (kind == ExperimentKind::Certify) std::cout << result.summary.at("certificate").dump() << '\n';
    for (const auto& c : result.checks) {
      std::cout << (c.pass ? "PASS " : "FAIL ") << c.name << ": " << format_number(c.value) << " (threshold "
                << format_number(c.threshold) << ")\n";
    }
    std::cout << "outputs written to " << cfg.out_dir.string() << '\n';
    return cfg.check && !result.passed() ? 1 : 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
