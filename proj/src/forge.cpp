#include "repud/forge.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

namespace repud {

void ForgeConfig::validate(std::size_t n) const {
  if (mu < 1) throw ConfigError("forge: mu < 1");
  if (kappa < 1 || group_size < 1) throw ConfigError("forge: kappa/lambda < 1");
  if (n % (group_size * kappa) != 0) {
    throw ConfigError("forge: lambda*kappa must divide n");
  }
}

nlohmann::json ForgeConfig::to_json() const {
  return {{"mu", mu},
          {"kappa", kappa},
          {"lambda", group_size},
          {"seed", seed},
          {"augment", augment},
          {"count_gradients", count_gradients}};
}

ForgeConfig ForgeConfig::from_json(const nlohmann::json& j) {
  ForgeConfig cfg;
  cfg.mu = j.at("mu").get<std::size_t>();
  cfg.kappa = j.at("kappa").get<std::size_t>();
  cfg.group_size = j.at("lambda").get<std::size_t>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  cfg.augment = j.value("augment", false);
  cfg.count_gradients = j.value("count_gradients", true);
  return cfg;
}

ForgedEntry ForgedBatchStore::entry(std::size_t group, long long t) const {
  if (group >= plan.group_count() || t < 1 || t > steps) {
    throw std::out_of_range("forge store: entry out of range");
  }
  const std::uint16_t k = plan.split_of(group, t);
  const MiniBatchSpec& orig = original[static_cast<std::size_t>(t - 1)];
  ForgedEntry e;
  e.replaced = orig.intersects(plan.groups[group]);
  if (e.replaced) {
    const std::size_t cell = static_cast<std::size_t>(t - 1) * cfg.kappa + k;
    e.batch = &argmin_batch[cell];
    e.grad_dist_sq = argmin_dist_sq[cell];
  } else {
    e.batch = &orig;
    e.grad_dist_sq = 0.0;
  }
  return e;
}

std::vector<MiniBatchSpec> ForgedBatchStore::sequence_for_group(std::size_t group) const {
  std::vector<MiniBatchSpec> seq;
  seq.reserve(static_cast<std::size_t>(steps));
  for (long long t = 1; t <= steps; ++t) {
    seq.push_back(*entry(group, t).batch);
  }
  return seq;
}

void ForgedBatchStore::validate() const {
  cfg.validate(n);
  if (original.size() != static_cast<std::size_t>(steps) ||
      argmin_batch.size() != static_cast<std::size_t>(steps) * cfg.kappa ||
      argmin_dist_sq.size() != argmin_batch.size()) {
    throw std::runtime_error("forge store: inconsistent sizes");
  }
  if (plan.n != n || plan.group_size != cfg.group_size ||
      plan.split_count != cfg.kappa ||
      plan.step_count() != static_cast<std::size_t>(steps)) {
    throw std::runtime_error("forge store: plan mismatch");
  }
}

namespace {

double grad_dist_sq(const ParamVector& a, const ParamVector& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc;
}

// indices of [0, n) not in `exclude` (exclude sorted ascending)
std::vector<std::uint32_t> complement_of(std::size_t n,
                                         const std::vector<std::uint32_t>& exclude) {
  std::vector<std::uint32_t> out;
  out.reserve(n - exclude.size());
  std::size_t e = 0;
  for (std::uint32_t i = 0; i < n; ++i) {
    if (e < exclude.size() && exclude[e] == i) {
      ++e;
    } else {
      out.push_back(i);
    }
  }
  return out;
}

MiniBatchSpec sample_candidate(Rng& rng, const std::vector<std::uint32_t>& pool,
                               std::size_t b, bool augment) {
  const auto picks = rng.sample_distinct(pool.size(), b);
  std::vector<std::uint32_t> idx(b);
  for (std::size_t i = 0; i < b; ++i) idx[i] = pool[picks[i]];
  std::vector<std::uint8_t> flags(b, 0);
  if (augment) {
    for (auto& f : flags) f = rng.bernoulli(0.5) ? 1 : 0;
  }
  return MiniBatchSpec::make(std::move(idx), std::move(flags));
}

void require_every_step_checkpointed(const PoLLog& log) {
  if (log.manifest.checkpoint_interval != 1) {
    throw ConfigError("forging requires a checkpoint at every step (C=1 log)");
  }
}

}  // namespace

std::pair<std::size_t, double> candidate_argmin(const ParamVector& theta_prev,
                                                const ParamVector& orig_grad,
                                                const std::vector<MiniBatchSpec>& candidates,
                                                const ModelSpec& spec, const Dataset& ds,
                                                double weight_decay, int threads) {
  if (candidates.empty()) throw std::invalid_argument("candidate_argmin: no candidates");
  std::vector<double> dists(candidates.size());
  parallel_for(0, candidates.size(), threads, [&](std::size_t m) {
    const LossGrad lg = loss_and_grad(theta_prev, spec, candidates[m], ds, weight_decay);
    dists[m] = grad_dist_sq(lg.grad, orig_grad);
  });
  std::size_t best = 0;
  for (std::size_t m = 1; m < candidates.size(); ++m) {
    if (dists[m] < dists[best]) best = m;  // ties keep the lowest index
  }
  return {best, dists[best]};
}

PointwiseForge forge_pointwise(const PoLLog& log, const Dataset& ds,
                               std::size_t x_minus, const ForgeConfig& cfg,
                               CostCounters* counters, int threads) {
  log.validate();
  require_every_step_checkpointed(log);
  if (x_minus >= ds.n) throw std::invalid_argument("forge_pointwise: bad x_minus");
  const auto& m = log.manifest;
  const std::size_t b = static_cast<std::size_t>(m.hp.batch_size);
  if (b > ds.n - 1) throw ConfigError("forge_pointwise: b > n-1, no candidate batches");
  if (cfg.mu < 1) throw ConfigError("forge_pointwise: mu < 1");

  const std::vector<std::uint32_t> pool =
      complement_of(ds.n, {static_cast<std::uint32_t>(x_minus)});

  PointwiseForge out;
  out.batches.reserve(static_cast<std::size_t>(log.tau()));
  out.dist_sq.reserve(static_cast<std::size_t>(log.tau()));
  for (long long t = 1; t <= log.tau(); ++t) {
    const ParamVector& theta_prev = log.checkpoint(t - 1);
    const auto& orig_batch = log.steps[static_cast<std::size_t>(t - 1)].batch;
    const LossGrad orig =
        loss_and_grad(theta_prev, m.spec, orig_batch, ds, m.hp.weight_decay);
    if (counters && cfg.count_gradients) counters->phase1_original_evals += 1;

    Rng rng = Rng::stream(cfg.seed, static_cast<std::uint64_t>(t), 0);
    std::vector<MiniBatchSpec> candidates;
    candidates.reserve(cfg.mu);
    for (std::size_t c = 0; c < cfg.mu; ++c) {
      candidates.push_back(sample_candidate(rng, pool, b, m.augment));
    }
    const auto [best, dist] = candidate_argmin(theta_prev, orig.grad, candidates, m.spec,
                                               ds, m.hp.weight_decay, threads);
    if (counters && cfg.count_gradients) counters->phase1_candidate_evals += cfg.mu;
    out.batches.push_back(candidates[best]);
    out.dist_sq.push_back(dist);
  }
  return out;
}

namespace {

ForgedBatchStore forge_engine(const PoLLog& log, const Dataset& ds,
                              const SplitPlan& plan, const ForgeConfig& cfg,
                              CostCounters* counters, int threads) {
  log.validate();
  require_every_step_checkpointed(log);
  cfg.validate(ds.n);
  plan.validate();
  const auto& m = log.manifest;
  if (cfg.augment != m.augment) {
    throw ConfigError("forge: config augment flag disagrees with the log manifest");
  }
  if (plan.n != ds.n || plan.group_size != cfg.group_size ||
      plan.split_count != cfg.kappa ||
      plan.step_count() != static_cast<std::size_t>(log.tau())) {
    throw ConfigError("forge: split plan inconsistent with config/log");
  }
  const std::size_t b = static_cast<std::size_t>(m.hp.batch_size);
  const std::size_t split_size = ds.n / cfg.kappa;
  if (b > ds.n - split_size) {
    throw ConfigError("forge: b exceeds candidate pool n - n/kappa");
  }

  ForgedBatchStore store;
  store.cfg = cfg;
  store.n = ds.n;
  store.steps = log.tau();
  store.plan = plan;
  store.original.reserve(static_cast<std::size_t>(log.tau()));
  for (const auto& rec : log.steps) store.original.push_back(rec.batch);
  store.argmin_batch.resize(static_cast<std::size_t>(log.tau()) * cfg.kappa);
  store.argmin_dist_sq.assign(static_cast<std::size_t>(log.tau()) * cfg.kappa, 0.0);

  for (long long t = 1; t <= log.tau(); ++t) {
    const ParamVector& theta_prev = log.checkpoint(t - 1);
    const auto& orig_batch = store.original[static_cast<std::size_t>(t - 1)];
    const LossGrad orig =
        loss_and_grad(theta_prev, m.spec, orig_batch, ds, m.hp.weight_decay);
    if (counters && cfg.count_gradients) counters->phase1_original_evals += 1;

    for (std::size_t k = 0; k < cfg.kappa; ++k) {
      const auto members = plan.split_members(t, static_cast<std::uint16_t>(k));
      const auto pool = complement_of(ds.n, members);
      Rng rng = Rng::stream(cfg.seed, static_cast<std::uint64_t>(t), k + 1);
      std::vector<MiniBatchSpec> candidates;
      candidates.reserve(cfg.mu);
      for (std::size_t c = 0; c < cfg.mu; ++c) {
        candidates.push_back(sample_candidate(rng, pool, b, m.augment));
      }
      const auto [best, dist] = candidate_argmin(theta_prev, orig.grad, candidates,
                                                 m.spec, ds, m.hp.weight_decay, threads);
      if (counters && cfg.count_gradients) counters->phase1_candidate_evals += cfg.mu;
      const std::size_t cell = static_cast<std::size_t>(t - 1) * cfg.kappa + k;
      store.argmin_batch[cell] = candidates[best];
      store.argmin_dist_sq[cell] = dist;
    }
  }
  store.validate();
  return store;
}

}  // namespace

ForgedBatchStore forge_all(const PoLLog& log, const Dataset& ds, const SplitPlan& plan,
                           const ForgeConfig& cfg, CostCounters* counters, int threads) {
  if (log.manifest.augment || !log.manifest.hp.is_plain_sgd()) {
    throw ConfigError("forge_all handles plain SGD only; use forge_all_full");
  }
  return forge_engine(log, ds, plan, cfg, counters, threads);
}

ForgedBatchStore forge_all_full(const PoLLog& log, const Dataset& ds,
                                const SplitPlan& plan, const ForgeConfig& cfg,
                                CostCounters* counters, int threads) {
  return forge_engine(log, ds, plan, cfg, counters, threads);
}

PoR reconstruct_por(const PoLLog& log, const Dataset& ds, const ForgedBatchStore& store,
                    std::size_t group_id, long long checkpoint_interval,
                    CostCounters* counters) {
  log.validate();
  store.validate();
  if (group_id >= store.group_count()) {
    throw std::out_of_range("reconstruct_por: unknown group");
  }
  if (checkpoint_interval < 1) {
    throw std::invalid_argument("reconstruct_por: checkpoint interval < 1");
  }
  const auto& m = log.manifest;

  PoR por;
  por.group = store.plan.groups[group_id];
  por.forged_log.manifest = m;
  por.forged_log.manifest.checkpoint_interval = checkpoint_interval;
  por.forged_log.steps.reserve(static_cast<std::size_t>(log.tau()));

  ParamVector theta = log.checkpoint(0);
  OptimizerState state = OptimizerState::init(theta.size());
  const bool track_velocity = m.hp.momentum != 0.0;
  const auto store_checkpoint = [&](long long t) {
    por.forged_log.checkpoints.emplace(t, theta);
    if (track_velocity) por.forged_log.velocity_checkpoints.emplace(t, state.velocity);
  };
  store_checkpoint(0);

  double max_dist_sq = 0.0;
  for (long long t = 1; t <= log.tau(); ++t) {
    const ForgedEntry e = store.entry(group_id, t);
    if (e.replaced) {
      por.replaced_steps += 1;
      max_dist_sq = std::max(max_dist_sq, e.grad_dist_sq);
    }
    const LossGrad lg = loss_and_grad(theta, m.spec, *e.batch, ds, m.hp.weight_decay);
    if (counters && store.cfg.count_gradients) counters->phase2_evals += 1;
    const double lr = lr_at(t - 1, m.hp);
    auto [next, next_state] = modified_sgd_step(theta, lg.grad, std::move(state), m.hp);
    theta = std::move(next);
    state = std::move(next_state);
    por.forged_log.steps.push_back(StepRecord{t, *e.batch, lr});
    if (t % checkpoint_interval == 0 || t == log.tau()) store_checkpoint(t);
  }
  por.theta_minus = theta;
  por.max_substitution_dist = std::sqrt(max_dist_sq);
  por.forged_log.validate();
  return por;
}

PoLLog substituted_log(const PoLLog& log, const ForgedBatchStore& store,
                       std::size_t group_id) {
  log.validate();
  store.validate();
  if (group_id >= store.group_count()) {
    throw std::out_of_range("substituted_log: unknown group");
  }
  PoLLog out = log;
  for (long long t = 1; t <= log.tau(); ++t) {
    out.steps[static_cast<std::size_t>(t - 1)].batch = *store.entry(group_id, t).batch;
  }
  return out;
}

std::size_t exclusion_scan(const PoLLog& log, const std::vector<std::uint32_t>& group) {
  std::size_t hits = 0;
  for (const auto& rec : log.steps) {
    for (const auto idx : rec.batch.indices) {
      if (std::binary_search(group.begin(), group.end(), idx)) ++hits;
    }
  }
  return hits;
}

InsertForge forge_insert(const PoLLog& log, const Dataset& ds,
                         const std::vector<double>& x_star, int y_star, double fraction,
                         const ForgeConfig& cfg, CostCounters* counters, int threads) {
  log.validate();
  require_every_step_checkpointed(log);
  if (x_star.size() != ds.dim) throw std::invalid_argument("forge_insert: x_star dim");
  if (y_star < 0 || y_star >= ds.classes) {
    throw std::invalid_argument("forge_insert: x_star label");
  }
  if (fraction < 0.0 || fraction > 1.0) {
    throw std::invalid_argument("forge_insert: fraction outside [0,1]");
  }
  const auto& m = log.manifest;
  const std::size_t b = static_cast<std::size_t>(m.hp.batch_size);

  InsertForge out;
  out.extended = ds;
  out.extended.features.insert(out.extended.features.end(), x_star.begin(), x_star.end());
  out.extended.labels.push_back(y_star);
  out.extended.n = ds.n + 1;
  const auto star_index = static_cast<std::uint32_t>(ds.n);

  const auto tau = static_cast<std::size_t>(log.tau());
  const std::size_t h_count =
      fraction == 0.0
          ? 0
          : static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(tau)));
  Rng pick_rng = Rng::stream(cfg.seed, 0x1b5e27);
  const auto h_steps0 = pick_rng.sample_distinct(tau, std::min(h_count, tau));

  // forged batch per selected step, each containing x_star exactly once
  std::map<long long, std::pair<MiniBatchSpec, double>> replacements;
  for (const auto t0 : h_steps0) {
    const long long t = static_cast<long long>(t0) + 1;
    const ParamVector& theta_prev = log.checkpoint(t - 1);
    const auto& orig_batch = log.steps[static_cast<std::size_t>(t - 1)].batch;
    const LossGrad orig =
        loss_and_grad(theta_prev, m.spec, orig_batch, out.extended, m.hp.weight_decay);
    if (counters && cfg.count_gradients) counters->phase1_original_evals += 1;

    Rng rng = Rng::stream(cfg.seed, static_cast<std::uint64_t>(t), 0x5747);
    std::vector<MiniBatchSpec> candidates;
    candidates.reserve(cfg.mu);
    for (std::size_t c = 0; c < cfg.mu; ++c) {
      const auto others = rng.sample_distinct(ds.n, b - 1);
      std::vector<std::uint32_t> idx(others.begin(), others.end());
      idx.push_back(star_index);
      std::vector<std::uint8_t> flags(b, 0);
      if (m.augment) {
        for (auto& f : flags) f = rng.bernoulli(0.5) ? 1 : 0;
      }
      candidates.push_back(MiniBatchSpec::make(std::move(idx), std::move(flags)));
    }
    const auto [best, dist] = candidate_argmin(theta_prev, orig.grad, candidates, m.spec,
                                               out.extended, m.hp.weight_decay, threads);
    if (counters && cfg.count_gradients) counters->phase1_candidate_evals += cfg.mu;
    replacements.emplace(t, std::make_pair(candidates[best], dist));
  }

  // replay with substitutions on the extended dataset
  out.forged_log.manifest = m;
  out.forged_log.manifest.n = out.extended.n;
  ParamVector theta = log.checkpoint(0);
  OptimizerState state = OptimizerState::init(theta.size());
  const bool track_velocity = m.hp.momentum != 0.0;
  const auto store_checkpoint = [&](long long t) {
    out.forged_log.checkpoints.emplace(t, theta);
    if (track_velocity) out.forged_log.velocity_checkpoints.emplace(t, state.velocity);
  };
  store_checkpoint(0);
  for (long long t = 1; t <= log.tau(); ++t) {
    const auto it = replacements.find(t);
    const MiniBatchSpec& batch = it == replacements.end()
                                     ? log.steps[static_cast<std::size_t>(t - 1)].batch
                                     : it->second.first;
    if (it != replacements.end()) {
      out.replaced_steps.push_back(t);
      out.dist_sq.push_back(it->second.second);
    }
    const LossGrad lg =
        loss_and_grad(theta, m.spec, batch, out.extended, m.hp.weight_decay);
    if (counters && cfg.count_gradients) counters->phase2_evals += 1;
    const double lr = lr_at(t - 1, m.hp);
    auto [next, next_state] = modified_sgd_step(theta, lg.grad, std::move(state), m.hp);
    theta = std::move(next);
    state = std::move(next_state);
    out.forged_log.steps.push_back(StepRecord{t, batch, lr});
    if (t % m.checkpoint_interval == 0 || t == log.tau()) store_checkpoint(t);
  }
  out.theta_prime = theta;
  out.forged_log.validate();
  return out;
}

Thm1Result thm1_bound(const SubspaceData& sub, const ParamVector& w) {
  const Dataset& ds = sub.data;
  if (ds.classes != 2) throw std::invalid_argument("thm1: binary labels required");
  const std::size_t d = ds.dim;
  if (w.size() != d + 1) throw std::invalid_argument("thm1: w must be logreg(d,2) params");
  const std::vector<double> x1(ds.row(sub.outlier_index), ds.row(sub.outlier_index) + d);
  const double dist = dist_to_subspace(x1, sub.basis);
  if (dist <= 0.0) throw std::invalid_argument("thm1: x1 lies on the subspace");

  const ModelSpec spec = ModelSpec::logreg(static_cast<int>(d), 2);
  const auto grad_of = [&](std::size_t i) {
    const MiniBatchSpec batch = MiniBatchSpec::make_plain({static_cast<std::uint32_t>(i)});
    return loss_and_grad(w, spec, batch, ds, 0.0).grad;
  };
  const ParamVector g1 = grad_of(sub.outlier_index);

  Thm1Result res;
  res.min_grad_dist = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < ds.n; ++i) {
    if (i == sub.outlier_index) continue;
    const double dist_i = l2_distance(g1, grad_of(i));
    if (dist_i < res.min_grad_dist) {
      res.min_grad_dist = dist_i;
      res.argmin_index = i;
    }
  }

  std::vector<double> probs(2);
  forward(w, spec, x1.data(), 1, probs.data());
  const double y1 = ds.labels[sub.outlier_index] == 1 ? 1.0 : 0.0;
  res.bound = std::abs(probs[1] - y1) * dist;
  return res;
}

void write_forge_store(const ForgedBatchStore& store, const std::filesystem::path& path) {
  store.validate();
  std::string out;
  nlohmann::json header;
  header["type"] = "forge_store";
  header["config"] = store.cfg.to_json();
  header["plan_seed"] = store.plan.seed;
  header["n"] = store.n;
  header["steps"] = store.steps;
  out += header.dump();
  out += '\n';
  for (std::size_t g = 0; g < store.group_count(); ++g) {
    for (long long t = 1; t <= store.steps; ++t) {
      const ForgedEntry e = store.entry(g, t);
      nlohmann::json j;
      j["g"] = g;
      j["t"] = t;
      j["idx"] = e.batch->indices;
      j["flip"] = e.batch->flip_flags;
      j["rep"] = e.replaced;
      j["d2"] = e.grad_dist_sq;
      out += j.dump();
      out += '\n';
    }
  }
  atomic_write_file(path, out);
}

ForgedBatchStore read_forge_store(const std::filesystem::path& path, const PoLLog& log) {
  std::istringstream in(read_file_text(path));
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("forge store: empty file");
  const auto header = nlohmann::json::parse(line);
  if (header.value("type", std::string()) != "forge_store") {
    throw std::runtime_error("forge store: bad header");
  }
  ForgedBatchStore store;
  store.cfg = ForgeConfig::from_json(header.at("config"));
  store.n = header.at("n").get<std::size_t>();
  store.steps = header.at("steps").get<long long>();
  if (store.n != log.manifest.n || store.steps != log.tau()) {
    throw std::runtime_error("forge store: log mismatch");
  }
  store.plan = make_split_plan(store.n, store.cfg.group_size, store.cfg.kappa,
                               static_cast<std::size_t>(store.steps),
                               header.at("plan_seed").get<std::uint64_t>());
  store.original.reserve(static_cast<std::size_t>(store.steps));
  for (const auto& rec : log.steps) store.original.push_back(rec.batch);
  store.argmin_batch.resize(static_cast<std::size_t>(store.steps) * store.cfg.kappa);
  store.argmin_dist_sq.assign(static_cast<std::size_t>(store.steps) * store.cfg.kappa,
                              0.0);
  std::vector<std::uint8_t> filled(store.argmin_batch.size(), 0);

  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    if (!j.value("rep", false)) continue;  // unreplaced rows mirror the log
    const auto g = j.at("g").get<std::size_t>();
    const auto t = j.at("t").get<long long>();
    const std::uint16_t k = store.plan.split_of(g, t);
    const std::size_t cell = static_cast<std::size_t>(t - 1) * store.cfg.kappa + k;
    MiniBatchSpec batch =
        MiniBatchSpec::make(j.at("idx").get<std::vector<std::uint32_t>>(),
                            j.at("flip").get<std::vector<std::uint8_t>>());
    const double d2 = j.at("d2").get<double>();
    if (filled[cell]) {
      if (!(store.argmin_batch[cell] == batch) || store.argmin_dist_sq[cell] != d2) {
        throw std::runtime_error("forge store: inconsistent rows for one split");
      }
    } else {
      store.argmin_batch[cell] = std::move(batch);
      store.argmin_dist_sq[cell] = d2;
      filled[cell] = 1;
    }
  }
  store.validate();
  return store;
}

}  // namespace repud
