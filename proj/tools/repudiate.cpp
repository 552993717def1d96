// Command-line driver for the proof-of-repudiation toolkit: trains and logs
// small models, forges mini-batch substitutions, reconstructs PoRs, verifies
// logs by replay, runs the membership-inference suite, and emits metrics.

#include <cstdio>
#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "repud/experiment.hpp"

namespace {

using repud::ExperimentConfig;

struct GlobalFlags {
  std::string config_path;
  std::string out_dir = "run";
  long long seed = -1;
  int threads = -1;
  double epsilon = -1.0;
};

ExperimentConfig load_config(const GlobalFlags& flags) {
  if (flags.config_path.empty()) {
    throw repud::ConfigError("--config is required for this command");
  }
  ExperimentConfig cfg = ExperimentConfig::load(flags.config_path);
  if (flags.seed >= 0) {
    const auto s = static_cast<std::uint64_t>(flags.seed);
    cfg.seed = s;
    cfg.init_seed = repud::mix64(s, 1);
    cfg.schedule_seed = repud::mix64(s, 2);
    cfg.forge.seed = repud::mix64(s, 3);
    cfg.attacks.suite.shadow_seed = repud::mix64(s, 4);
    cfg.probe_seed = repud::mix64(s, 5);
    cfg.eval_group_seed = repud::mix64(s, 6);
    if (cfg.data.kind == repud::DatasetConfig::Kind::Blobs ||
        cfg.data.kind == repud::DatasetConfig::Kind::Subspace) {
      cfg.data.seed = repud::mix64(s, 7);
    }
  }
  if (flags.threads >= 0) cfg.threads = flags.threads;
  if (flags.epsilon > 0) cfg.epsilon = flags.epsilon;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"proof-of-repudiation toolkit"};
  app.require_subcommand(1);
  app.fallthrough(true);  // global flags may follow the subcommand name

  GlobalFlags flags;
  app.add_option("--config", flags.config_path, "experiment config JSON");
  app.add_option("--out", flags.out_dir, "output directory");
  app.add_option("--seed", flags.seed, "derive every component seed from this value");
  app.add_option("--threads", flags.threads, "worker thread cap (0 = hardware)");
  app.add_option("--epsilon", flags.epsilon, "verification threshold override");

  auto* train = app.add_subcommand("train", "train and record a PoL log");

  auto* forge = app.add_subcommand("forge", "generate the forged-batch store");
  std::string forge_log = "run/pol";
  long long insert_val_index = -1;
  double insert_fraction = -1.0;
  forge->add_option("--log", forge_log, "PoL log directory");
  forge->add_option("--insert-val-index", insert_val_index,
                    "non-membership mode: validation sample to insert");
  forge->add_option("--insert-fraction", insert_fraction,
                    "non-membership mode: fraction of steps to replace");

  auto* reconstruct = app.add_subcommand("reconstruct", "replay PoRs from the store");
  std::string rec_log = "run/pol", rec_store = "run/forge.jsonl", rec_group = "all";
  reconstruct->add_option("--log", rec_log, "PoL log directory");
  reconstruct->add_option("--forge", rec_store, "forge.jsonl path");
  reconstruct->add_option("--group", rec_group, "group id or 'all'");

  auto* verify = app.add_subcommand("verify", "replay-verify a log directory");
  std::string verify_log = "run/pol";
  std::size_t subset_k = 0;
  verify->add_option("--log", verify_log, "log directory (PoL or PoR)");
  verify->add_option("--subset-k", subset_k, "check only the k largest updates");

  auto* attack = app.add_subcommand("attack", "run the MI attack roster");
  std::string atk_log = "run/pol", atk_pors = "run/pors";
  attack->add_option("--log", atk_log, "PoL log directory");
  attack->add_option("--pors", atk_pors, "reconstructed PoR directory");

  auto* metrics = app.add_subcommand("metrics", "aggregate metric reports");
  std::string met_log = "run/pol", met_pors = "run/pors", met_scores = "run/scores.csv";
  metrics->add_option("--log", met_log, "PoL log directory");
  metrics->add_option("--pors", met_pors, "reconstructed PoR directory");
  metrics->add_option("--scores", met_scores, "scores CSV from the attack stage");

  auto* demo = app.add_subcommand("demo-impossibility",
                                  "subspace-outlier lower-bound demonstration");
  std::size_t demo_n = 12, demo_d = 6, demo_trials = 100;
  long long demo_seed = 1;
  demo->add_option("--n", demo_n, "dataset size per trial");
  demo->add_option("--d", demo_d, "feature dimension");
  demo->add_option("--trials", demo_trials, "number of trials");
  demo->add_option("--seed", demo_seed, "trial seed");

  auto* report = app.add_subcommand("report", "summarize a run directory");
  std::string report_run = "run";
  report->add_option("--run", report_run, "run directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (train->parsed()) {
      const ExperimentConfig cfg = load_config(flags);
      const auto out = repud::cmd_train(cfg, flags.out_dir);
      std::printf("log: %s\nfinal_loss: %.6f\ntrain_accuracy: %.4f\nval_accuracy: %.4f\n",
                  out.log_dir.c_str(), out.final_loss, out.train_accuracy,
                  out.validation_accuracy);
      return 0;
    }
    if (forge->parsed()) {
      ExperimentConfig cfg = load_config(flags);
      if (insert_val_index >= 0) {
        cfg.insert_val_index = insert_val_index;
        if (insert_fraction >= 0) cfg.insert_fraction = insert_fraction;
        const auto out = repud::cmd_forge_insert(cfg, forge_log, flags.out_dir);
        std::printf("por: %s\nreplaced_steps: %zu\nmax_substitution_dist: %.6g\n",
                    out.por_dir.c_str(), out.replaced_steps, out.max_substitution_dist);
        return 0;
      }
      const auto out = repud::cmd_forge(cfg, forge_log, flags.out_dir);
      std::printf("store: %s\nstats: %s\nphase1_grad_evals: %llu\n",
                  out.store_path.c_str(), out.stats_path.c_str(),
                  static_cast<unsigned long long>(out.phase1_total));
      return 0;
    }
    if (reconstruct->parsed()) {
      const ExperimentConfig cfg = load_config(flags);
      const auto out = repud::cmd_reconstruct(
          cfg, rec_log, rec_store, rec_group,
          std::filesystem::path(flags.out_dir) / "pors");
      std::printf("pors: %s\ngroups: %zu\n", out.pors_dir.c_str(), out.groups.size());
      return 0;
    }
    if (verify->parsed()) {
      const ExperimentConfig cfg = load_config(flags);
      const double eps = flags.epsilon > 0 ? flags.epsilon : cfg.epsilon;
      const auto rep = repud::cmd_verify(cfg, verify_log, eps, subset_k);
      std::cout << rep.to_json().dump(2) << "\n";
      return rep.pass ? 0 : 1;
    }
    if (attack->parsed()) {
      const ExperimentConfig cfg = load_config(flags);
      const auto out = repud::cmd_attack(cfg, atk_log, atk_pors, flags.out_dir);
      std::printf("scores: %s\nrows: %zu\n", out.scores_csv.c_str(), out.rows);
      return 0;
    }
    if (metrics->parsed()) {
      const ExperimentConfig cfg = load_config(flags);
      const auto out = repud::cmd_metrics(
          cfg, met_log, met_pors, met_scores,
          std::filesystem::path(flags.out_dir) / "metrics");
      std::printf("report: %s\n", out.report_json.c_str());
      return 0;
    }
    if (demo->parsed()) {
      const auto rows = repud::demo_impossibility(
          demo_n, demo_d, demo_trials, static_cast<std::uint64_t>(demo_seed));
      std::printf("%8s %20s %20s %6s\n", "trial", "min_grad_dist", "bound", "holds");
      std::size_t violations = 0;
      for (const auto& row : rows) {
        std::printf("%8zu %20.12g %20.12g %6s\n", row.trial, row.min_grad_dist,
                    row.bound, row.holds ? "yes" : "NO");
        if (!row.holds) ++violations;
      }
      std::printf("violations: %zu / %zu\n", violations, rows.size());
      return violations == 0 ? 0 : 1;
    }
    if (report->parsed()) {
      const std::string text = repud::cmd_report(report_run);
      const auto out_path = std::filesystem::path(flags.out_dir) / "report.md";
      std::filesystem::create_directories(flags.out_dir);
      repud::atomic_write_file(out_path, text);
      std::printf("report: %s\n", out_path.c_str());
      return 0;
    }
  } catch (const repud::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
