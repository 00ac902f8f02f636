// Experiment runner CLI: seeded single runs, paired-seed variant comparison,
// and figure-data emission from dumped features.

#include <CLI11.hpp>

#include "pcaagg/experiment.hpp"

namespace {

int cmd_run(const std::string& spec_path, uint64_t seed, bool seed_set,
            const std::string& out_dir, bool dry_run) {
  pcaagg::ExperimentSpec spec = pcaagg::load_spec(spec_path);
  if (seed_set) spec.seed = seed;
  spec.model.seed = spec.seed;
  if (dry_run) {
    pcaagg::Model<pcaagg::Real> model = pcaagg::Model<pcaagg::Real>::init(spec.model);
    nlohmann::json cfg = pcaagg::spec_to_json(spec);
    cfg["param_count"] = model.params.total_parameters();
    std::cout << cfg.dump(2) << "\n";
    std::cout << "parameters: " << model.params.total_parameters() << "\n";
    return 0;
  }
  pcaagg::RunArtifacts art = pcaagg::run_experiment(spec, spec.seed, out_dir);
  std::cout << "run complete: " << art.dir.string() << "\n";
  std::cout << "steps: " << art.steps_run << "  miou: " << art.report.miou << "\n";
  return 0;
}

int cmd_compare(const std::string& spec_path, int64_t seeds, const std::string& out_dir) {
  pcaagg::ExperimentSpec spec = pcaagg::load_spec(spec_path);
  pcaagg::ComparisonSummary summary = pcaagg::compare_experiments(spec, seeds, out_dir);
  std::cout << "compared " << summary.variant_names.size() << " variants x " << seeds
            << " seeds -> " << (std::filesystem::path(out_dir) / "summary.csv").string() << "\n";
  for (const auto& name : summary.variant_names) {
    double mu = 0;
    int64_t n = 0;
    for (const auto& run : summary.runs)
      if (run.variant == name) {
        mu += run.art.report.miou;
        ++n;
      }
    std::cout << "  " << name << ": mean miou " << (n ? mu / double(n) : 0.0) << " over " << n
              << " seeds\n";
  }
  return 0;
}

int cmd_emit(const std::vector<std::string>& dirs) {
  std::vector<std::filesystem::path> paths(dirs.begin(), dirs.end());
  int emitted = pcaagg::emit_figure_data(paths);
  std::cout << "emitted figure data for " << emitted << " of " << dirs.size() << " runs\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Parallel cost-aggregation experiment runner"};
  app.require_subcommand(1);

  std::string spec_path, out_dir = "runs/run";
  uint64_t seed = 0;
  bool dry_run = false;
  auto* run = app.add_subcommand("run", "Train and evaluate one seeded run");
  run->add_option("--spec", spec_path, "Experiment spec (JSON)")->required();
  auto* seed_opt = run->add_option("--seed", seed, "Seed override");
  run->add_option("--out", out_dir, "Run directory");
  run->add_flag("--dry-run", dry_run, "Print resolved config and parameter count, then exit");

  std::string cmp_spec, cmp_out = "runs/compare";
  int64_t cmp_seeds = 5;
  auto* cmp = app.add_subcommand("compare", "Run all sweep variants on paired seeds");
  cmp->add_option("--spec", cmp_spec, "Experiment spec (JSON) with a sweep")->required();
  cmp->add_option("--seeds", cmp_seeds, "Number of paired seeds");
  cmp->add_option("--out", cmp_out, "Comparison output directory");

  std::vector<std::string> emit_dirs;
  auto* emit = app.add_subcommand("emit-figure-data", "Write coupling/redundancy CSVs from dumps");
  emit->add_option("dirs", emit_dirs, "Run directories")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return cmd_run(spec_path, seed, seed_opt->count() > 0, out_dir, dry_run);
    if (cmp->parsed()) return cmd_compare(cmp_spec, cmp_seeds, cmp_out);
    if (emit->parsed()) return cmd_emit(emit_dirs);
  } catch (const pcaagg::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const pcaagg::DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
