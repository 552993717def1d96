#pragma once

#include <atomic>
#include <filesystem>
#include <optional>
#include <utility>
#include <vector>

#include "repud/pol.hpp"

namespace repud {

struct ForgeConfig {
  std::size_t mu = 1;          // candidate batches per (split, step)
  std::size_t kappa = 1;       // split count
  std::size_t group_size = 1;  // lambda
  std::uint64_t seed = 0;
  bool augment = false;
  bool count_gradients = true;

  void validate(std::size_t n) const;
  nlohmann::json to_json() const;
  static ForgeConfig from_json(const nlohmann::json& j);
};

struct CostCounters {
  std::atomic<std::uint64_t> phase1_candidate_evals{0};
  std::atomic<std::uint64_t> phase1_original_evals{0};
  std::atomic<std::uint64_t> phase2_evals{0};

  std::uint64_t phase1_total() const {
    return phase1_candidate_evals.load() + phase1_original_evals.load();
  }
};

// View of one (group, step) cell: the batch the forged log uses at that
// step, the squared gradient distance of the substitution, and whether the
// original batch was replaced.
struct ForgedEntry {
  const MiniBatchSpec* batch = nullptr;
  double grad_dist_sq = 0.0;
  bool replaced = false;
};

// Phase-1 output. Entries are synthesized from the per-(step, split) argmin
// table and the split plan; within a split all groups share one candidate.
struct ForgedBatchStore {
  ForgeConfig cfg;
  std::size_t n = 0;
  long long steps = 0;
  SplitPlan plan;
  std::vector<MiniBatchSpec> original;       // B_* per step, 1-based step t at [t-1]
  std::vector<MiniBatchSpec> argmin_batch;   // per (t-1)*kappa + k
  std::vector<double> argmin_dist_sq;        // same indexing

  std::size_t group_count() const { return plan.group_count(); }
  ForgedEntry entry(std::size_t group, long long t) const;
  // the full batch sequence a PoR for `group` replays
  std::vector<MiniBatchSpec> sequence_for_group(std::size_t group) const;
  void validate() const;
};

// argmin over candidates of || grad(candidate; theta_prev) - orig_grad ||_2^2,
// ties broken by lowest index
std::pair<std::size_t, double> candidate_argmin(const ParamVector& theta_prev,
                                                const ParamVector& orig_grad,
                                                const std::vector<MiniBatchSpec>& candidates,
                                                const ModelSpec& spec, const Dataset& ds,
                                                double weight_decay, int threads = 1);

// Per-point forging: for every step draws mu candidate batches from
// D \ {x_minus} and keeps the gradient argmin.
struct PointwiseForge {
  std::vector<MiniBatchSpec> batches;   // per step
  std::vector<double> dist_sq;          // substitution distance per step
};
PointwiseForge forge_pointwise(const PoLLog& log, const Dataset& ds,
                               std::size_t x_minus, const ForgeConfig& cfg,
                               CostCounters* counters, int threads);

// Split re-use + group combining. forge_all is the plain-SGD variant;
// forge_all_full additionally samples flip flags for candidates and uses the
// weight-decay loss and per-step learning rates from the manifest.
ForgedBatchStore forge_all(const PoLLog& log, const Dataset& ds, const SplitPlan& plan,
                           const ForgeConfig& cfg, CostCounters* counters, int threads);
ForgedBatchStore forge_all_full(const PoLLog& log, const Dataset& ds,
                                const SplitPlan& plan, const ForgeConfig& cfg,
                                CostCounters* counters, int threads);

struct PoR {
  std::vector<std::uint32_t> group;  // target sample indices
  PoLLog forged_log;
  ParamVector theta_minus;
  double max_substitution_dist = 0.0;  // max per-step ||grad_forge - grad_orig||_2
  std::size_t replaced_steps = 0;
};

PoR reconstruct_por(const PoLLog& log, const Dataset& ds, const ForgedBatchStore& store,
                    std::size_t group_id, long long checkpoint_interval,
                    CostCounters* counters);

// The Def.-3-style artifact: original checkpoints with substituted batches.
// verify_full reports per-step errors of lr * ||grad_forge - grad_orig||.
PoLLog substituted_log(const PoLLog& log, const ForgedBatchStore& store,
                       std::size_t group_id);

// Scans every batch of a log for the group's indices; a valid PoR scans to 0.
std::size_t exclusion_scan(const PoLLog& log, const std::vector<std::uint32_t>& group);

// Non-membership forge: inserts x_star into a random fraction of steps.
struct InsertForge {
  PoLLog forged_log;       // indices refer to `extended`
  Dataset extended;        // ds plus x_star at index n
  ParamVector theta_prime;
  std::vector<long long> replaced_steps;
  std::vector<double> dist_sq;  // per replaced step
};
InsertForge forge_insert(const PoLLog& log, const Dataset& ds,
                         const std::vector<double>& x_star, int y_star, double fraction,
                         const ForgeConfig& cfg, CostCounters* counters, int threads);

// Impossibility bound for batch-size-1 logistic regression on the subspace
// construction: min over i >= 2 of the gradient substitution distance, and
// the analytic lower bound |sigmoid(w.x1) - y1| * dist(x1, Gamma).
struct Thm1Result {
  double min_grad_dist = 0.0;
  double bound = 0.0;
  std::size_t argmin_index = 0;
};
Thm1Result thm1_bound(const SubspaceData& sub, const ParamVector& w);

void write_forge_store(const ForgedBatchStore& store, const std::filesystem::path& path);
ForgedBatchStore read_forge_store(const std::filesystem::path& path, const PoLLog& log);

}  // namespace repud
