#include "repud/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace repud {

const char* attack_name(AttackKind kind) {
  switch (kind) {
    case AttackKind::Xent: return "xent";
    case AttackKind::MEntr: return "mentr";
    case AttackKind::LiRA: return "lira";
    case AttackKind::EnhancedMia: return "enhanced_mia";
  }
  return "?";
}

AttackKind attack_from_name(const std::string& name) {
  if (name == "xent") return AttackKind::Xent;
  if (name == "mentr") return AttackKind::MEntr;
  if (name == "lira") return AttackKind::LiRA;
  if (name == "enhanced_mia") return AttackKind::EnhancedMia;
  throw ConfigError("unknown attack '" + name + "'");
}

namespace {

constexpr double kProbFloor = 1e-12;
constexpr double kSdFloor = 1e-6;

std::vector<double> probs_of(const ParamVector& params, const ModelSpec& spec,
                             const double* x) {
  std::vector<double> probs(static_cast<std::size_t>(spec.classes));
  forward(params, spec, x, 1, probs.data());
  return probs;
}

// shadow training on a subset of the pool
ParamVector train_on_subset(const Dataset& pool, const std::vector<std::uint32_t>& subset,
                            const ModelSpec& spec, const Hyperparams& hp,
                            std::uint64_t init_seed, std::uint64_t schedule_seed) {
  Dataset sub;
  sub.n = subset.size();
  sub.dim = pool.dim;
  sub.classes = pool.classes;
  sub.shape = pool.shape;
  sub.features.resize(sub.n * sub.dim);
  sub.labels.resize(sub.n);
  for (std::size_t i = 0; i < subset.size(); ++i) {
    std::copy_n(pool.row(subset[i]), pool.dim, sub.features.data() + i * sub.dim);
    sub.labels[i] = pool.labels[subset[i]];
  }
  const BatchSchedule sched = make_schedule_steps(
      sub.n, static_cast<std::size_t>(hp.batch_size),
      static_cast<std::size_t>(hp.total_steps), schedule_seed, false);
  ParamVector theta = init_params(spec, init_seed);
  OptimizerState state = OptimizerState::init(theta.size());
  for (long long t = 1; t <= hp.total_steps; ++t) {
    const LossGrad lg = loss_and_grad(
        theta, spec, sched.batches[static_cast<std::size_t>(t - 1)], sub, hp.weight_decay);
    auto [next, next_state] = modified_sgd_step(theta, lg.grad, std::move(state), hp);
    theta = std::move(next);
    state = std::move(next_state);
  }
  return theta;
}

}  // namespace

ShadowSet train_shadows(const Dataset& pool, std::size_t count, const ModelSpec& spec,
                        const Hyperparams& hp, std::uint64_t seed, int threads) {
  if (count < 2) throw std::invalid_argument("train_shadows: need at least 2 shadows");
  pool.validate();
  hp.validate();
  const std::size_t half = pool.n / 2;
  if (half < static_cast<std::size_t>(hp.batch_size)) {
    throw std::invalid_argument("train_shadows: pool half smaller than batch size");
  }
  ShadowSet set;
  set.spec = spec;
  set.hp = hp;
  set.seed = seed;
  set.pool_n = pool.n;
  set.shadows.resize(count);
  parallel_for(0, count, threads, [&](std::size_t s) {
    Rng rng = Rng::stream(seed, s, 0xa0d);
    std::vector<std::uint32_t> order(pool.n);
    for (std::size_t i = 0; i < pool.n; ++i) order[i] = static_cast<std::uint32_t>(i);
    rng.shuffle(order);
    std::vector<std::uint32_t> members(order.begin(),
                                       order.begin() + static_cast<std::ptrdiff_t>(half));
    std::sort(members.begin(), members.end());
    ShadowModel& sm = set.shadows[s];
    sm.member.assign(pool.n, 0);
    for (const auto i : members) sm.member[i] = 1;
    sm.params = train_on_subset(pool, members, spec, hp, rng.next_u64(), rng.next_u64());
  });
  return set;
}

double Calibration::threshold_for(int label) const {
  if (!per_label_mode) return global;
  if (label < 0 || static_cast<std::size_t>(label) >= per_label.size() ||
      !label_set[static_cast<std::size_t>(label)]) {
    throw std::invalid_argument("calibration: no threshold for label " +
                                std::to_string(label));
  }
  return per_label[static_cast<std::size_t>(label)];
}

nlohmann::json Calibration::to_json() const {
  nlohmann::json j;
  j["method"] = method == CalibMethod::MaxAccuracy ? "max_accuracy" : "fixed_fpr";
  j["fpr"] = fpr;
  j["per_label_mode"] = per_label_mode;
  j["global"] = global;
  j["per_label"] = per_label;
  j["label_set"] = label_set;
  return j;
}

Calibration Calibration::from_json(const nlohmann::json& j) {
  Calibration c;
  const std::string m = j.at("method").get<std::string>();
  if (m == "max_accuracy") {
    c.method = CalibMethod::MaxAccuracy;
  } else if (m == "fixed_fpr") {
    c.method = CalibMethod::FixedFpr;
  } else {
    throw ConfigError("calibration: unknown method");
  }
  c.fpr = j.at("fpr").get<double>();
  c.per_label_mode = j.at("per_label_mode").get<bool>();
  c.global = j.at("global").get<double>();
  c.per_label = j.at("per_label").get<std::vector<double>>();
  c.label_set = j.at("label_set").get<std::vector<std::uint8_t>>();
  return c;
}

double max_accuracy_threshold(const std::vector<double>& in_scores,
                              const std::vector<double>& out_scores) {
  if (in_scores.empty() && out_scores.empty()) {
    throw std::invalid_argument("max_accuracy_threshold: no scores");
  }
  std::vector<double> in_sorted = in_scores;
  std::vector<double> out_sorted = out_scores;
  std::sort(in_sorted.begin(), in_sorted.end());
  std::sort(out_sorted.begin(), out_sorted.end());

  std::vector<double> all;
  all.reserve(in_sorted.size() + out_sorted.size());
  all.insert(all.end(), in_sorted.begin(), in_sorted.end());
  all.insert(all.end(), out_sorted.begin(), out_sorted.end());
  std::sort(all.begin(), all.end());
  all.erase(std::unique(all.begin(), all.end()), all.end());

  std::vector<double> candidates;
  candidates.reserve(all.size() + 1);
  candidates.push_back(all.front() - 1.0);
  for (std::size_t i = 0; i + 1 < all.size(); ++i) {
    candidates.push_back(0.5 * (all[i] + all[i + 1]));
  }
  candidates.push_back(all.back() + 1.0);

  double best_threshold = candidates.front();
  std::size_t best_correct = 0;
  for (const double t : candidates) {
    const std::size_t in_ge =
        in_sorted.end() - std::lower_bound(in_sorted.begin(), in_sorted.end(), t);
    const std::size_t out_lt =
        std::lower_bound(out_sorted.begin(), out_sorted.end(), t) - out_sorted.begin();
    const std::size_t correct = in_ge + out_lt;
    if (correct > best_correct) {
      best_correct = correct;
      best_threshold = t;
    }
  }
  return best_threshold;
}

double fixed_fpr_threshold(std::vector<double> population_scores, double fpr) {
  if (population_scores.empty()) {
    throw std::invalid_argument("fixed_fpr_threshold: empty population");
  }
  if (fpr <= 0.0 || fpr >= 1.0) {
    throw std::invalid_argument("fixed_fpr_threshold: fpr outside (0,1)");
  }
  std::sort(population_scores.begin(), population_scores.end());
  const std::size_t n = population_scores.size();
  std::size_t rank = static_cast<std::size_t>(
      std::ceil((1.0 - fpr) * static_cast<double>(n)));
  rank = std::min(std::max<std::size_t>(rank, 1), n);
  return population_scores[rank - 1];
}

double xent_score(const ParamVector& params, const ModelSpec& spec, const double* x,
                  int label) {
  const auto probs = probs_of(params, spec, x);
  const double py = std::max(probs[static_cast<std::size_t>(label)], kProbFloor);
  return std::log(py);  // = -crossentropy
}

double mentr_value(const double* probs, std::size_t classes, int label) {
  double value = 0.0;
  for (std::size_t k = 0; k < classes; ++k) {
    const double p = probs[k];
    if (static_cast<int>(k) == label) {
      value += -(1.0 - p) * std::log(std::max(p, kProbFloor));
    } else {
      value += -p * std::log(std::max(1.0 - p, kProbFloor));
    }
  }
  return value;
}

double mentr_score(const ParamVector& params, const ModelSpec& spec, const double* x,
                   int label) {
  const auto probs = probs_of(params, spec, x);
  return -mentr_value(probs.data(), probs.size(), label);
}

double logit_confidence(const ParamVector& params, const ModelSpec& spec,
                        const double* x, int label) {
  const auto probs = probs_of(params, spec, x);
  const double py =
      std::clamp(probs[static_cast<std::size_t>(label)], kProbFloor, 1.0 - kProbFloor);
  return std::log(py / (1.0 - py));
}

GaussFit fit_gaussians(const std::vector<double>& in_values,
                       const std::vector<double>& out_values) {
  const auto fit_one = [](const std::vector<double>& v, double& mu, double& sd) {
    if (v.empty()) return false;
    double m = 0.0;
    for (const double x : v) m += x;
    m /= static_cast<double>(v.size());
    double var = 0.0;
    for (const double x : v) var += (x - m) * (x - m);
    var /= static_cast<double>(v.size());
    mu = m;
    sd = std::max(std::sqrt(var), kSdFloor);
    return true;
  };
  GaussFit fit;
  fit.n_in = in_values.size();
  fit.n_out = out_values.size();
  const bool has_in = fit_one(in_values, fit.mu_in, fit.sd_in);
  const bool has_out = fit_one(out_values, fit.mu_out, fit.sd_out);
  if (!has_in && !has_out) throw std::invalid_argument("fit_gaussians: no observations");
  // one-sided degenerate case: mirror the populated side so the ratio stays defined
  if (!has_in) {
    fit.mu_in = fit.mu_out;
    fit.sd_in = fit.sd_out;
  }
  if (!has_out) {
    fit.mu_out = fit.mu_in;
    fit.sd_out = fit.sd_in;
  }
  return fit;
}

double lira_log_ratio(double phi, const GaussFit& fit) {
  const auto log_norm = [](double x, double mu, double sd) {
    const double z = (x - mu) / sd;
    return -0.5 * z * z - std::log(sd) - 0.9189385332046727;  // log sqrt(2 pi)
  };
  return log_norm(phi, fit.mu_in, fit.sd_in) - log_norm(phi, fit.mu_out, fit.sd_out);
}

AttackScore attack_xent(const ParamVector& target, const ModelSpec& spec,
                        const double* x, int label, long long sample_id,
                        const Calibration& cal) {
  AttackScore s;
  s.sample_id = sample_id;
  s.score = xent_score(target, spec, x, label);
  s.prediction = s.score >= cal.threshold_for(label);
  return s;
}

AttackScore attack_mentr(const ParamVector& target, const ModelSpec& spec,
                         const double* x, int label, long long sample_id,
                         const Calibration& cal) {
  AttackScore s;
  s.sample_id = sample_id;
  s.score = mentr_score(target, spec, x, label);
  s.prediction = s.score >= cal.threshold_for(label);
  return s;
}

AttackScore attack_lira(const ParamVector& target, const ModelSpec& spec,
                        const Dataset& pool, std::size_t pool_index, long long sample_id,
                        const ShadowSet& shadows, double threshold) {
  if (pool_index >= pool.n) throw std::out_of_range("attack_lira: pool index");
  std::vector<double> phi_in, phi_out;
  for (const auto& sm : shadows.shadows) {
    const double phi = logit_confidence(sm.params, shadows.spec, pool.row(pool_index),
                                        pool.labels[pool_index]);
    (sm.member[pool_index] ? phi_in : phi_out).push_back(phi);
  }
  if (phi_in.size() < 2 || phi_out.size() < 2) {
    throw std::invalid_argument("attack_lira: need >= 2 IN and >= 2 OUT shadows");
  }
  const GaussFit fit = fit_gaussians(phi_in, phi_out);
  AttackScore s;
  s.sample_id = sample_id;
  s.score = lira_log_ratio(
      logit_confidence(target, spec, pool.row(pool_index), pool.labels[pool_index]), fit);
  s.prediction = s.score >= threshold;
  return s;
}

AttackScore attack_enhanced_mia(const ParamVector& target, const ModelSpec& spec,
                                const double* x, int label, long long sample_id,
                                const Calibration& cal) {
  AttackScore s;
  s.sample_id = sample_id;
  s.score = xent_score(target, spec, x, label);  // -loss
  s.prediction = s.score >= cal.global;
  return s;
}

AttackSuite AttackSuite::build(const Dataset& train, const Dataset& validation,
                               const ModelSpec& target_spec, const Hyperparams& target_hp,
                               const ParamVector& theta_star, const AttackSuiteConfig& cfg,
                               int threads) {
  train.validate();
  validation.validate();
  if (train.dim != validation.dim || train.classes != validation.classes) {
    throw std::invalid_argument("attack suite: train/validation mismatch");
  }

  AttackSuite suite;
  suite.spec = target_spec;
  suite.cfg = cfg;
  suite.train_n = train.n;
  suite.pool = train;
  suite.pool.n = train.n + validation.n;
  suite.pool.features.insert(suite.pool.features.end(), validation.features.begin(),
                             validation.features.end());
  suite.pool.labels.insert(suite.pool.labels.end(), validation.labels.begin(),
                           validation.labels.end());
  suite.pool.classes = std::max(train.classes, validation.classes);

  Hyperparams shadow_hp = target_hp;
  if (cfg.shadow_steps > 0) shadow_hp.total_steps = cfg.shadow_steps;
  const ModelSpec shadow_spec = cfg.shadow_spec ? *cfg.shadow_spec : target_spec;
  if (shadow_spec.input_dim() != train.dim || shadow_spec.classes != train.classes) {
    throw ConfigError("attack suite: shadow arch incompatible with the data");
  }
  suite.shadows = train_shadows(suite.pool, cfg.shadow_count, shadow_spec, shadow_hp,
                                cfg.shadow_seed, threads);

  // per-shadow scores over the whole pool
  const std::size_t s_count = cfg.shadow_count;
  const std::size_t pn = suite.pool.n;
  const auto c = static_cast<std::size_t>(suite.pool.classes);
  std::vector<std::vector<double>> xe(s_count), me(s_count), phi(s_count);
  parallel_for(0, s_count, threads, [&](std::size_t s) {
    xe[s].resize(pn);
    me[s].resize(pn);
    phi[s].resize(pn);
    std::vector<double> probs(pn * c);
    forward(suite.shadows.shadows[s].params, suite.shadows.spec,
            suite.pool.features.data(), pn, probs.data());
    for (std::size_t i = 0; i < pn; ++i) {
      const double* p = probs.data() + i * c;
      const int y = suite.pool.labels[i];
      const double py = std::clamp(p[y], kProbFloor, 1.0 - kProbFloor);
      xe[s][i] = std::log(std::max(p[y], kProbFloor));
      me[s][i] = -mentr_value(p, c, y);
      phi[s][i] = std::log(py / (1.0 - py));
    }
  });

  // per-sample LiRA gaussians
  suite.lira_stats.resize(pn);
  parallel_for(0, pn, threads, [&](std::size_t i) {
    std::vector<double> in_v, out_v;
    for (std::size_t s = 0; s < s_count; ++s) {
      (suite.shadows.shadows[s].member[i] ? in_v : out_v).push_back(phi[s][i]);
    }
    suite.lira_stats[i] = fit_gaussians(in_v, out_v);
  });

  // per-label thresholds for xent / mentr
  const auto per_label_cal = [&](const std::vector<std::vector<double>>& mat) {
    Calibration cal;
    cal.method = CalibMethod::MaxAccuracy;
    cal.per_label_mode = true;
    cal.per_label.assign(c, 0.0);
    cal.label_set.assign(c, 0);
    for (std::size_t label = 0; label < c; ++label) {
      std::vector<double> in_scores, out_scores;
      for (std::size_t i = 0; i < pn; ++i) {
        if (suite.pool.labels[i] != static_cast<int>(label)) continue;
        for (std::size_t s = 0; s < s_count; ++s) {
          (suite.shadows.shadows[s].member[i] ? in_scores : out_scores)
              .push_back(mat[s][i]);
        }
      }
      if (in_scores.empty() && out_scores.empty()) continue;
      cal.per_label[label] = max_accuracy_threshold(in_scores, out_scores);
      cal.label_set[label] = 1;
    }
    return cal;
  };
  suite.xent_cal = per_label_cal(xe);
  suite.mentr_cal = per_label_cal(me);

  // LiRA threshold: leave-one-shadow-out scores, or the plain ratio test
  suite.lira_cal.method = CalibMethod::MaxAccuracy;
  suite.lira_cal.per_label_mode = false;
  if (cfg.lira_ratio_threshold) {
    suite.lira_cal.global = 0.0;
  } else {
    std::vector<std::size_t> calib_ids(pn);
    std::iota(calib_ids.begin(), calib_ids.end(), 0);
    if (cfg.calibration_probes > 0 && cfg.calibration_probes < pn) {
      Rng rng = Rng::stream(cfg.shadow_seed, 0xca11b);
      const auto pick = rng.sample_distinct(pn, cfg.calibration_probes);
      calib_ids.assign(pick.begin(), pick.end());
    }
    std::vector<double> in_scores, out_scores;
    for (const std::size_t i : calib_ids) {
      for (std::size_t s = 0; s < s_count; ++s) {
        std::vector<double> in_v, out_v;
        for (std::size_t s2 = 0; s2 < s_count; ++s2) {
          if (s2 == s) continue;
          (suite.shadows.shadows[s2].member[i] ? in_v : out_v).push_back(phi[s2][i]);
        }
        if (in_v.empty() && out_v.empty()) continue;
        const double score = lira_log_ratio(phi[s][i], fit_gaussians(in_v, out_v));
        (suite.shadows.shadows[s].member[i] ? in_scores : out_scores).push_back(score);
      }
    }
    suite.lira_cal.global = max_accuracy_threshold(in_scores, out_scores);
  }

  // EnhancedMIA: population threshold from validation losses under theta_star
  suite.emia_cal.method = CalibMethod::FixedFpr;
  suite.emia_cal.fpr = cfg.enhanced_fpr;
  suite.emia_cal.per_label_mode = false;
  {
    std::vector<double> pop;
    pop.reserve(validation.n);
    std::vector<double> probs(validation.n * c);
    forward(theta_star, target_spec, validation.features.data(), validation.n,
            probs.data());
    for (std::size_t i = 0; i < validation.n; ++i) {
      const double* p = probs.data() + i * c;
      pop.push_back(std::log(std::max(p[validation.labels[i]], kProbFloor)));
    }
    suite.emia_cal.global = fixed_fpr_threshold(std::move(pop), cfg.enhanced_fpr);
  }
  return suite;
}

AttackScore AttackSuite::score(AttackKind kind, const ParamVector& model,
                               long long pool_id) const {
  if (pool_id < 0 || static_cast<std::size_t>(pool_id) >= pool.n) {
    throw std::out_of_range("attack suite: pool id");
  }
  const auto i = static_cast<std::size_t>(pool_id);
  const double* x = pool.row(i);
  const int y = pool.labels[i];
  switch (kind) {
    case AttackKind::Xent:
      return attack_xent(model, spec, x, y, pool_id, xent_cal);
    case AttackKind::MEntr:
      return attack_mentr(model, spec, x, y, pool_id, mentr_cal);
    case AttackKind::EnhancedMia:
      return attack_enhanced_mia(model, spec, x, y, pool_id, emia_cal);
    case AttackKind::LiRA: {
      AttackScore s;
      s.sample_id = pool_id;
      s.score = lira_log_ratio(logit_confidence(model, spec, x, y), lira_stats[i]);
      s.prediction = s.score >= lira_cal.global;
      return s;
    }
  }
  throw std::logic_error("attack suite: unknown attack");
}

bool AttackSuite::predict(AttackKind kind, const ParamVector& model,
                          long long pool_id) const {
  return score(kind, model, pool_id).prediction;
}

nlohmann::json AttackSuite::calibration_json() const {
  nlohmann::json j;
  j["shadow_count"] = cfg.shadow_count;
  j["shadow_seed"] = cfg.shadow_seed;
  j["xent"] = xent_cal.to_json();
  j["mentr"] = mentr_cal.to_json();
  j["lira"] = lira_cal.to_json();
  j["enhanced_mia"] = emia_cal.to_json();
  return j;
}

std::vector<long long> mi_disagreement(const AttackSuite& suite, AttackKind kind,
                                       const ParamVector& model_a,
                                       const ParamVector& model_b,
                                       const std::vector<long long>& probe_ids) {
  std::vector<long long> diff;
  for (const long long id : probe_ids) {
    if (suite.predict(kind, model_a, id) != suite.predict(kind, model_b, id)) {
      diff.push_back(id);
    }
  }
  return diff;
}

}  // namespace repud
