#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "repud/attacks.hpp"
#include "repud/forge.hpp"
#include "repud/metrics.hpp"

namespace repud {

struct DatasetConfig {
  enum class Kind { Blobs, Subspace, Idx, Container };
  Kind kind = Kind::Blobs;
  // blobs / subspace
  std::size_t n = 0;
  std::size_t d = 0;
  int classes = 2;
  double separation = 3.0;
  std::uint64_t seed = 0;
  std::size_t val_n = 0;
  // idx
  std::filesystem::path images, labels;
  std::size_t take_n = 0;  // 0 = all remaining
  std::size_t offset = 0;
  // container
  std::filesystem::path train_path, validation_path;

  nlohmann::json to_json() const;
  static DatasetConfig from_json(const nlohmann::json& j);
};

struct AttacksConfig {
  AttackSuiteConfig suite;
  bool enabled = true;
  nlohmann::json to_json() const;
  static AttacksConfig from_json(const nlohmann::json& j);
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  int threads = 0;
  double epsilon = 1e-3;
  DatasetConfig data;
  ModelSpec model;
  Hyperparams hp;
  bool augment = false;
  long long checkpoint_interval = 1;
  std::uint64_t init_seed = 7;
  std::uint64_t schedule_seed = 13;
  ForgeConfig forge;
  AttacksConfig attacks;
  std::size_t probes_per_pair = 5;
  std::uint64_t probe_seed = 29;
  std::size_t eval_groups = 0;  // 0 = all groups
  std::uint64_t eval_group_seed = 31;
  std::size_t uniformity_pors = 100;
  long long por_checkpoint_interval = 0;  // 0 = final checkpoint only
  double insert_fraction = 0.0;
  long long insert_val_index = -1;

  void validate() const;
  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);
  std::uint64_t content_hash() const;
};

struct LoadedData {
  Dataset train;
  Dataset validation;
};
LoadedData load_experiment_data(const ExperimentConfig& cfg);

double accuracy(const ParamVector& params, const ModelSpec& spec, const Dataset& ds);

// seeded choice of which lambda-groups get reconstructed/evaluated
std::vector<std::size_t> select_eval_groups(std::size_t group_count, std::size_t take,
                                            std::uint64_t seed);

// ---- pipeline stages (shared by the CLI and the test suites) ----

struct TrainOutputs {
  std::filesystem::path log_dir;
  double final_loss = 0.0;
  double train_accuracy = 0.0;
  double validation_accuracy = 0.0;
};
TrainOutputs cmd_train(const ExperimentConfig& cfg, const std::filesystem::path& out_dir);

struct ForgeOutputs {
  std::filesystem::path store_path;
  std::filesystem::path stats_path;
  std::uint64_t phase1_total = 0;
};
ForgeOutputs cmd_forge(const ExperimentConfig& cfg, const std::filesystem::path& log_dir,
                       const std::filesystem::path& out_dir);

// group_selector: "all" (config eval set) or a decimal group id
struct ReconstructOutputs {
  std::filesystem::path pors_dir;
  std::vector<std::size_t> groups;
};
ReconstructOutputs cmd_reconstruct(const ExperimentConfig& cfg,
                                   const std::filesystem::path& log_dir,
                                   const std::filesystem::path& store_path,
                                   const std::string& group_selector,
                                   const std::filesystem::path& out_dir);

VerificationReport cmd_verify(const ExperimentConfig& cfg,
                              const std::filesystem::path& log_dir, double epsilon,
                              std::size_t subset_k /* 0 = full */);

struct AttackOutputs {
  std::filesystem::path scores_csv;
  std::filesystem::path calibration_json;
  std::size_t rows = 0;
};
AttackOutputs cmd_attack(const ExperimentConfig& cfg, const std::filesystem::path& log_dir,
                         const std::filesystem::path& pors_dir,
                         const std::filesystem::path& out_dir);

struct MetricsOutputs {
  std::filesystem::path report_json;
  std::filesystem::path prediction_diff_csv;
  std::filesystem::path score_diff_csv;
  std::filesystem::path uniformity_tsv;
  std::filesystem::path freq_profile_tsv;
};
MetricsOutputs cmd_metrics(const ExperimentConfig& cfg,
                           const std::filesystem::path& log_dir,
                           const std::filesystem::path& pors_dir,
                           const std::filesystem::path& scores_csv,
                           const std::filesystem::path& out_dir);

struct ImpossibilityRow {
  std::size_t trial = 0;
  double min_grad_dist = 0.0;
  double bound = 0.0;
  bool holds = false;
};
std::vector<ImpossibilityRow> demo_impossibility(std::size_t n, std::size_t d,
                                                 std::size_t trials, std::uint64_t seed);

struct InsertOutputs {
  std::filesystem::path por_dir;
  std::size_t replaced_steps = 0;
  double max_substitution_dist = 0.0;
};
InsertOutputs cmd_forge_insert(const ExperimentConfig& cfg,
                               const std::filesystem::path& log_dir,
                               const std::filesystem::path& out_dir);

std::string cmd_report(const std::filesystem::path& run_dir);

}  // namespace repud
