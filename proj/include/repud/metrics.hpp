#pragma once

#include <functional>
#include <vector>

#include "repud/attacks.hpp"
#include "repud/data.hpp"

namespace repud {

// squared l2 distance scaled by the parameter count
double metric_model_distance(const ParamVector& theta_star,
                             const ParamVector& theta_minus);

// Seeded probe sets per evaluated pair. Pool ids: training samples are their
// own ids, validation sample j is train_n + j.
struct ProbePlan {
  std::vector<std::vector<long long>> diff;        // the pair's own group
  std::vector<std::vector<long long>> common;      // sampled from D minus group
  std::vector<std::vector<long long>> validation;  // sampled held-out ids

  static ProbePlan make(const std::vector<std::vector<std::uint32_t>>& groups,
                        std::size_t train_n, std::size_t validation_n,
                        std::size_t per_pair, std::uint64_t seed);
};

struct PredictionDiff {
  double diff_pct = 0.0;
  double common_pct = 0.0;
  double validation_pct = 0.0;
  std::size_t pairs = 0;
  std::size_t diff_disagreements = 0;
  std::size_t common_disagreements = 0;
  std::size_t validation_disagreements = 0;
};

// Counts pairs whose prediction bits differ on at least one probe, per
// setting. `predict(model, pool_id)` must already hold the calibrated attack.
PredictionDiff metric_prediction_diff(
    const std::function<bool(const ParamVector&, long long)>& predict,
    const ParamVector& theta_star, const std::vector<ParamVector>& forged,
    const ProbePlan& plan);

double metric_score_diff(double score_star, double score_minus);

// l1 distance between per-sample slot frequencies and uniform
double metric_uniformity(const std::vector<MiniBatchSpec>& sequence, std::size_t n);

// per-sample frequencies sorted descending; sums to 1
std::vector<double> metric_freq_profile(const std::vector<MiniBatchSpec>& sequence,
                                        std::size_t n);

}  // namespace repud
