#include "repud/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace repud {

double metric_model_distance(const ParamVector& theta_star,
                             const ParamVector& theta_minus) {
  if (theta_star.size() != theta_minus.size()) {
    throw std::invalid_argument("metric_model_distance: length mismatch");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < theta_star.size(); ++i) {
    const double d = theta_star[i] - theta_minus[i];
    acc += d * d;
  }
  return acc / static_cast<double>(theta_star.size());
}

ProbePlan ProbePlan::make(const std::vector<std::vector<std::uint32_t>>& groups,
                          std::size_t train_n, std::size_t validation_n,
                          std::size_t per_pair, std::uint64_t seed) {
  if (per_pair == 0) throw std::invalid_argument("probe plan: empty probe sets");
  if (validation_n < per_pair) {
    throw std::invalid_argument("probe plan: validation set smaller than probe size");
  }
  ProbePlan plan;
  plan.diff.reserve(groups.size());
  plan.common.reserve(groups.size());
  plan.validation.reserve(groups.size());
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const auto& group = groups[g];
    plan.diff.emplace_back(group.begin(), group.end());

    Rng rng = Rng::stream(seed, g, 0xc0);
    if (train_n <= group.size()) {
      throw std::invalid_argument("probe plan: no common probes available");
    }
    std::vector<long long> common;
    while (common.size() < per_pair) {
      const auto pick = static_cast<std::uint32_t>(rng.below(train_n));
      if (std::binary_search(group.begin(), group.end(), pick)) continue;
      if (std::find(common.begin(), common.end(), pick) != common.end()) continue;
      common.push_back(pick);
    }
    plan.common.push_back(std::move(common));

    Rng vrng = Rng::stream(seed, g, 0x7a1);
    const auto vpick = vrng.sample_distinct(validation_n, per_pair);
    std::vector<long long> val;
    val.reserve(per_pair);
    for (const auto v : vpick) val.push_back(static_cast<long long>(train_n + v));
    plan.validation.push_back(std::move(val));
  }
  return plan;
}

PredictionDiff metric_prediction_diff(
    const std::function<bool(const ParamVector&, long long)>& predict,
    const ParamVector& theta_star, const std::vector<ParamVector>& forged,
    const ProbePlan& plan) {
  if (forged.size() != plan.diff.size()) {
    throw std::invalid_argument("metric_prediction_diff: pair count mismatch");
  }
  if (forged.empty()) throw std::invalid_argument("metric_prediction_diff: no pairs");
  PredictionDiff out;
  out.pairs = forged.size();
  const auto disagrees = [&](const std::vector<long long>& probes,
                             const ParamVector& theta_minus) {
    for (const long long id : probes) {
      if (predict(theta_star, id) != predict(theta_minus, id)) return true;
    }
    return false;
  };
  for (std::size_t g = 0; g < forged.size(); ++g) {
    if (disagrees(plan.diff[g], forged[g])) out.diff_disagreements++;
    if (disagrees(plan.common[g], forged[g])) out.common_disagreements++;
    if (disagrees(plan.validation[g], forged[g])) out.validation_disagreements++;
  }
  const double scale = 100.0 / static_cast<double>(out.pairs);
  out.diff_pct = scale * static_cast<double>(out.diff_disagreements);
  out.common_pct = scale * static_cast<double>(out.common_disagreements);
  out.validation_pct = scale * static_cast<double>(out.validation_disagreements);
  return out;
}

double metric_score_diff(double score_star, double score_minus) {
  return std::abs(score_star - score_minus);
}

namespace {

std::vector<double> frequencies(const std::vector<MiniBatchSpec>& sequence,
                                std::size_t n) {
  if (sequence.empty()) throw std::invalid_argument("uniformity: empty sequence");
  std::vector<std::size_t> counts(n, 0);
  std::size_t slots = 0;
  for (const auto& batch : sequence) {
    for (const auto idx : batch.indices) {
      if (idx >= n) throw std::out_of_range("uniformity: index out of range");
      counts[idx]++;
    }
    slots += batch.size();
  }
  std::vector<double> freq(n);
  for (std::size_t i = 0; i < n; ++i) {
    freq[i] = static_cast<double>(counts[i]) / static_cast<double>(slots);
  }
  return freq;
}

}  // namespace

double metric_uniformity(const std::vector<MiniBatchSpec>& sequence, std::size_t n) {
  const auto freq = frequencies(sequence, n);
  const double uniform = 1.0 / static_cast<double>(n);
  double l1 = 0.0;
  for (const double f : freq) l1 += std::abs(f - uniform);
  return l1;
}

std::vector<double> metric_freq_profile(const std::vector<MiniBatchSpec>& sequence,
                                        std::size_t n) {
  auto freq = frequencies(sequence, n);
  std::sort(freq.begin(), freq.end(), std::greater<double>());
  return freq;
}

}  // namespace repud
