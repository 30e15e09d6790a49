#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "unidistill/harness.hpp"
#include "unidistill/io.hpp"

namespace ud = unidistill;
namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitNumeric = 2;

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::size_t> steps;
  std::optional<std::size_t> batch;
  std::optional<std::string> path;
  std::optional<double> lambda1, lambda2, lambda3;
  std::optional<std::size_t> seeds;
};

ud::RunConfig resolve(const Overrides& o) {
  ud::RunConfig c = o.config.empty() ? ud::RunConfig{} : ud::load_run_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (o.out) c.out_dir = *o.out;
  if (o.steps) c.optimizer.steps = *o.steps;
  if (o.batch) c.optimizer.batch = *o.batch;
  if (o.path) {
    const auto p = ud::parse_path(*o.path);
    if (p != c.distill.path) c.distill = ud::DistillConfig::defaults(p);
  }
  if (o.lambda1) c.distill.weights.lambda1 = *o.lambda1;
  if (o.lambda2) c.distill.weights.lambda2 = *o.lambda2;
  if (o.lambda3) c.distill.weights.lambda3 = *o.lambda3;
  if (o.seeds) c.seeds = *o.seeds;
  c.validate();
  return c;
}

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "JSON run configuration")->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "Base seed");
  cmd->add_option("--out", o.out, "Output directory");
}

void add_training(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--steps", o.steps, "Optimizer steps");
  cmd->add_option("--batch", o.batch, "Scenes per step");
}

void add_distill(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--path", o.path, "Distillation path")->check(CLI::IsMember({"l2c", "c2l", "f2l", "f2c"}));
  cmd->add_option("--lambda1", o.lambda1, "Feature loss weight");
  cmd->add_option("--lambda2", o.lambda2, "Relation loss weight");
  cmd->add_option("--lambda3", o.lambda3, "Response loss weight");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-modality BEV detector distillation on synthetic scenes"};
  app.require_subcommand(1);
  Overrides o;
  std::string scenes, teacher, checkpoint, modality = "lidar", study;
  std::size_t count = 512, index = 0;

  auto* gen = app.add_subcommand("gen-scenes", "Generate a scene file");
  add_common(gen, o);
  gen->add_option("--count", count, "Number of scenes");

  auto* train = app.add_subcommand("train", "Train a detector on the detection loss");
  add_common(train, o);
  add_training(train, o);
  train->add_option("--scenes", scenes, "Scene file")->required();
  train->add_option("--modality", modality, "lidar, camera or fusion")
      ->check(CLI::IsMember({"lidar", "camera", "fusion"}));

  auto* distill = app.add_subcommand("distill", "Train a student against a frozen teacher");
  add_common(distill, o);
  add_training(distill, o);
  add_distill(distill, o);
  distill->add_option("--scenes", scenes, "Scene file")->required();
  distill->add_option("--teacher", teacher, "Teacher checkpoint")->required();

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  add_common(eval, o);
  eval->add_option("--checkpoint", checkpoint, "Detector checkpoint")->required();
  eval->add_option("--scenes", scenes, "Scene file")->required();

  auto* gc = app.add_subcommand("grad-check", "Check loss gradients against finite differences");
  add_common(gc, o);

  auto* ablate = app.add_subcommand("ablate", "Run an ablation sweep");
  add_common(ablate, o);
  add_training(ablate, o);
  add_distill(ablate, o);
  ablate->add_option("--study", study, "Study name")->required();
  ablate->add_option("--scenes", scenes, "Scene file (generated from the config when omitted)");
  ablate->add_option("--teacher", teacher, "Teacher checkpoint shared by all seeds");
  ablate->add_option("--seeds", o.seeds, "Number of seeds");

  auto* dump = app.add_subcommand("dump-resp", "Write the channel-mean response map of one scene");
  add_common(dump, o);
  dump->add_option("--checkpoint", checkpoint, "Detector checkpoint")->required();
  dump->add_option("--scenes", scenes, "Scene file")->required();
  dump->add_option("--index", index, "Scene index within the file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  auto opt_path = [](const std::string& s) { return s.empty() ? std::nullopt : std::optional<fs::path>(s); };
  try {
    const ud::RunConfig config = resolve(o);
    fs::path written;
    if (*gen) {
      written = ud::cmd_gen_scenes(config, count);
    } else if (*train) {
      written = ud::cmd_train(config, ud::parse_modality(modality), scenes);
    } else if (*distill) {
      written = ud::cmd_distill(config, teacher, scenes);
    } else if (*eval) {
      written = ud::cmd_eval(config, checkpoint, scenes);
    } else if (*gc) {
      bool ok = true;
      std::string report;
      for (const auto& c : ud::run_grad_checks(config.seed)) {
        ok = ok && c.report.passed;
        char buf[160];
        std::snprintf(buf, sizeof buf, "%-18s %s max_rel_error=%.3e kinks=%zu\n", c.name.c_str(),
                      c.report.passed ? "PASS" : "FAIL", c.report.max_rel_error, c.report.kinks);
        report += buf;
        if (!c.report.passed) report += c.report.summary() + "\n";
      }
      std::cout << report;
      ud::write_text_file(fs::path(config.out_dir) / "grad_check.txt", report);
      return ok ? kExitOk : kExitNumeric;
    } else if (*ablate) {
      written = ud::cmd_ablate(config, study, opt_path(scenes), opt_path(teacher));
    } else if (*dump) {
      written = ud::cmd_dump_resp(config, checkpoint, scenes, index);
    }
    std::cout << "wrote " << written.string() << '\n';
    return kExitOk;
  } catch (const ud::NumericError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  }
}
