#pragma once

#include <string>
#include <vector>

#include "repud/pol.hpp"

namespace repud {

enum class AttackKind { Xent, MEntr, LiRA, EnhancedMia };
const char* attack_name(AttackKind kind);
AttackKind attack_from_name(const std::string& name);

// All scores are oriented so that higher means more member-like;
// prediction = (score >= threshold).
struct AttackScore {
  long long sample_id = -1;
  double score = 0.0;
  bool prediction = false;
};

struct ShadowModel {
  ParamVector params;
  std::vector<std::uint8_t> member;  // over the pool, 1 = trained on
};

struct ShadowSet {
  std::vector<ShadowModel> shadows;
  ModelSpec spec;
  Hyperparams hp;
  std::uint64_t seed = 0;
  std::size_t pool_n = 0;
};

// Each shadow trains on an independent random half of the pool.
ShadowSet train_shadows(const Dataset& pool, std::size_t count, const ModelSpec& spec,
                        const Hyperparams& hp, std::uint64_t seed, int threads);

enum class CalibMethod { MaxAccuracy, FixedFpr };

struct Calibration {
  CalibMethod method = CalibMethod::MaxAccuracy;
  double fpr = 0.0;                // FixedFpr only
  bool per_label_mode = false;
  double global = 0.0;
  std::vector<double> per_label;   // indexed by label
  std::vector<std::uint8_t> label_set;  // 1 if a per-label threshold exists

  double threshold_for(int label) const;
  nlohmann::json to_json() const;
  static Calibration from_json(const nlohmann::json& j);
};

// Exhaustive best-accuracy split of two score sets (higher = member).
double max_accuracy_threshold(const std::vector<double>& in_scores,
                              const std::vector<double>& out_scores);
// (1-fpr) quantile of non-member scores, so ~fpr of them land above.
double fixed_fpr_threshold(std::vector<double> population_scores, double fpr);

// scoring primitives
double xent_score(const ParamVector& params, const ModelSpec& spec, const double* x,
                  int label);
double mentr_value(const double* probs, std::size_t classes, int label);
double mentr_score(const ParamVector& params, const ModelSpec& spec, const double* x,
                   int label);
double logit_confidence(const ParamVector& params, const ModelSpec& spec,
                        const double* x, int label);

struct GaussFit {
  double mu_in = 0.0, sd_in = 1.0;
  double mu_out = 0.0, sd_out = 1.0;
  std::size_t n_in = 0, n_out = 0;
};
GaussFit fit_gaussians(const std::vector<double>& in_values,
                       const std::vector<double>& out_values);
double lira_log_ratio(double phi, const GaussFit& fit);

AttackScore attack_xent(const ParamVector& target, const ModelSpec& spec,
                        const double* x, int label, long long sample_id,
                        const Calibration& cal);
AttackScore attack_mentr(const ParamVector& target, const ModelSpec& spec,
                         const double* x, int label, long long sample_id,
                         const Calibration& cal);
// Fits per-example Gaussians from the sample's shadow confidences.
AttackScore attack_lira(const ParamVector& target, const ModelSpec& spec,
                        const Dataset& pool, std::size_t pool_index, long long sample_id,
                        const ShadowSet& shadows, double threshold);
AttackScore attack_enhanced_mia(const ParamVector& target, const ModelSpec& spec,
                                const double* x, int label, long long sample_id,
                                const Calibration& cal);

struct AttackSuiteConfig {
  std::vector<AttackKind> roster{AttackKind::LiRA, AttackKind::EnhancedMia,
                                 AttackKind::MEntr, AttackKind::Xent};
  std::size_t shadow_count = 16;
  std::uint64_t shadow_seed = 0;
  long long shadow_steps = 0;        // 0: reuse target total_steps
  std::optional<ModelSpec> shadow_spec;  // cross-arch shadows when set
  double enhanced_fpr = 0.1;
  bool lira_ratio_threshold = false;  // true: decide at log-ratio 0
  std::size_t calibration_probes = 0;  // cap for LiRA calibration, 0 = all
};

// The attacker's fixed auxiliary state: shadows trained on train+validation,
// per-sample LiRA statistics, and the calibrated thresholds. Pool ids are
// 0..train_n-1 for training samples, then validation samples.
struct AttackSuite {
  ModelSpec spec;
  AttackSuiteConfig cfg;
  Dataset pool;
  std::size_t train_n = 0;
  ShadowSet shadows;
  Calibration xent_cal, mentr_cal, lira_cal, emia_cal;
  std::vector<GaussFit> lira_stats;  // per pool sample

  static AttackSuite build(const Dataset& train, const Dataset& validation,
                           const ModelSpec& target_spec, const Hyperparams& target_hp,
                           const ParamVector& theta_star, const AttackSuiteConfig& cfg,
                           int threads);

  AttackScore score(AttackKind kind, const ParamVector& model, long long pool_id) const;
  bool predict(AttackKind kind, const ParamVector& model, long long pool_id) const;
  nlohmann::json calibration_json() const;
};

// Def.-4 equivalence check over a finite probe set: returns the ids on which
// the two models receive different prediction bits.
std::vector<long long> mi_disagreement(const AttackSuite& suite, AttackKind kind,
                                       const ParamVector& model_a,
                                       const ParamVector& model_b,
                                       const std::vector<long long>& probe_ids);

}  // namespace repud
