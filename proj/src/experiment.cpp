#include "repud/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

namespace repud {

namespace {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::filesystem::path group_dir_name(std::size_t g) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "por_%06zu", g);
  return buf;
}

}  // namespace

nlohmann::json DatasetConfig::to_json() const {
  nlohmann::json j;
  switch (kind) {
    case Kind::Blobs:
      j["type"] = "blobs";
      j["n"] = n;
      j["d"] = d;
      j["classes"] = classes;
      j["separation"] = separation;
      j["seed"] = seed;
      j["val_n"] = val_n;
      break;
    case Kind::Subspace:
      j["type"] = "subspace";
      j["n"] = n;
      j["d"] = d;
      j["seed"] = seed;
      break;
    case Kind::Idx:
      j["type"] = "idx";
      j["images"] = images.string();
      j["labels"] = labels.string();
      j["take_n"] = take_n;
      j["offset"] = offset;
      j["val_n"] = val_n;
      break;
    case Kind::Container:
      j["type"] = "container";
      j["train"] = train_path.string();
      j["validation"] = validation_path.string();
      break;
  }
  return j;
}

DatasetConfig DatasetConfig::from_json(const nlohmann::json& j) {
  DatasetConfig c;
  const std::string type = j.at("type").get<std::string>();
  if (type == "blobs") {
    c.kind = Kind::Blobs;
    c.n = j.at("n").get<std::size_t>();
    c.d = j.at("d").get<std::size_t>();
    c.classes = j.at("classes").get<int>();
    c.separation = j.value("separation", 3.0);
    c.seed = j.value("seed", std::uint64_t{0});
    c.val_n = j.value("val_n", std::size_t{0});
  } else if (type == "subspace") {
    c.kind = Kind::Subspace;
    c.n = j.at("n").get<std::size_t>();
    c.d = j.at("d").get<std::size_t>();
    c.seed = j.value("seed", std::uint64_t{0});
  } else if (type == "idx") {
    c.kind = Kind::Idx;
    c.images = j.at("images").get<std::string>();
    c.labels = j.at("labels").get<std::string>();
    c.take_n = j.at("take_n").get<std::size_t>();
    c.offset = j.value("offset", std::size_t{0});
    c.val_n = j.value("val_n", std::size_t{0});
  } else if (type == "container") {
    c.kind = Kind::Container;
    c.train_path = j.at("train").get<std::string>();
    c.validation_path = j.value("validation", std::string());
  } else {
    throw ConfigError("dataset: unknown type '" + type + "'");
  }
  return c;
}

nlohmann::json AttacksConfig::to_json() const {
  nlohmann::json j;
  j["enabled"] = enabled;
  auto roster = nlohmann::json::array();
  for (const auto k : suite.roster) roster.push_back(attack_name(k));
  j["roster"] = roster;
  j["shadow_count"] = suite.shadow_count;
  j["shadow_seed"] = suite.shadow_seed;
  j["shadow_steps"] = suite.shadow_steps;
  if (suite.shadow_spec) j["shadow_model"] = model_spec_to_json(*suite.shadow_spec);
  j["enhanced_fpr"] = suite.enhanced_fpr;
  j["lira_ratio_threshold"] = suite.lira_ratio_threshold;
  j["calibration_probes"] = suite.calibration_probes;
  return j;
}

AttacksConfig AttacksConfig::from_json(const nlohmann::json& j) {
  AttacksConfig c;
  c.enabled = j.value("enabled", true);
  if (j.contains("roster")) {
    c.suite.roster.clear();
    for (const auto& name : j.at("roster")) {
      c.suite.roster.push_back(attack_from_name(name.get<std::string>()));
    }
  }
  c.suite.shadow_count = j.value("shadow_count", std::size_t{16});
  c.suite.shadow_seed = j.value("shadow_seed", std::uint64_t{0});
  c.suite.shadow_steps = j.value("shadow_steps", 0LL);
  if (j.contains("shadow_model")) {
    c.suite.shadow_spec = model_spec_from_json(j.at("shadow_model"));
  }
  c.suite.enhanced_fpr = j.value("enhanced_fpr", 0.1);
  c.suite.lira_ratio_threshold = j.value("lira_ratio_threshold", false);
  c.suite.calibration_probes = j.value("calibration_probes", std::size_t{0});
  return c;
}

void ExperimentConfig::validate() const {
  model.validate();
  hp.validate();
  if (epsilon <= 0) throw ConfigError("config: epsilon <= 0");
  if (checkpoint_interval < 1) throw ConfigError("config: checkpoint_interval < 1");
  if (probes_per_pair < 1) throw ConfigError("config: probes_per_pair < 1");
  if (data.kind != DatasetConfig::Kind::Container) {
    const std::size_t n = data.kind == DatasetConfig::Kind::Idx ? data.take_n : data.n;
    if (n == 0) throw ConfigError("config: dataset size must be positive");
    if (n % (forge.group_size * forge.kappa) != 0) {
      throw ConfigError("config: lambda*kappa must divide n");
    }
    if (n % static_cast<std::size_t>(hp.batch_size) != 0) {
      throw ConfigError("config: batch size must divide n");
    }
    if (static_cast<std::size_t>(hp.batch_size) > n - n / forge.kappa) {
      throw ConfigError("config: batch size exceeds candidate pool n - n/kappa");
    }
    if (eval_groups > n / forge.group_size) {
      throw ConfigError("config: eval group count exceeds n/lambda");
    }
  }
  if (attacks.enabled) {
    if (attacks.suite.roster.empty()) throw ConfigError("config: empty attack roster");
    if (attacks.suite.shadow_count < 2) throw ConfigError("config: shadow_count < 2");
    if (attacks.suite.enhanced_fpr <= 0 || attacks.suite.enhanced_fpr >= 1) {
      throw ConfigError("config: enhanced_fpr outside (0,1)");
    }
    if (data.val_n > 0 && data.val_n < probes_per_pair) {
      throw ConfigError("config: validation set smaller than probes_per_pair");
    }
  }
  if (insert_fraction < 0 || insert_fraction > 1) {
    throw ConfigError("config: insert_fraction outside [0,1]");
  }
}

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json j;
  j["seed"] = seed;
  j["threads"] = threads;
  j["epsilon"] = epsilon;
  j["dataset"] = data.to_json();
  j["model"] = model_spec_to_json(model);
  j["hyperparams"] = hyperparams_to_json(hp);
  j["augment"] = augment;
  j["checkpoint_interval"] = checkpoint_interval;
  j["init_seed"] = init_seed;
  j["schedule_seed"] = schedule_seed;
  j["forge"] = forge.to_json();
  j["attacks"] = attacks.to_json();
  j["probes"] = {{"per_pair", probes_per_pair}, {"seed", probe_seed}};
  j["eval"] = {{"groups", eval_groups},
               {"group_seed", eval_group_seed},
               {"uniformity_pors", uniformity_pors},
               {"por_checkpoint_interval", por_checkpoint_interval}};
  j["insert"] = {{"fraction", insert_fraction}, {"val_index", insert_val_index}};
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  c.seed = j.value("seed", std::uint64_t{1});
  c.threads = j.value("threads", 0);
  c.epsilon = j.value("epsilon", 1e-3);
  c.data = DatasetConfig::from_json(j.at("dataset"));
  c.model = model_spec_from_json(j.at("model"));
  c.hp = hyperparams_from_json(j.at("hyperparams"));
  c.augment = j.value("augment", false);
  c.checkpoint_interval = j.value("checkpoint_interval", 1LL);
  c.init_seed = j.value("init_seed", std::uint64_t{7});
  c.schedule_seed = j.value("schedule_seed", std::uint64_t{13});
  c.forge = ForgeConfig::from_json(j.at("forge"));
  if (j.contains("attacks")) c.attacks = AttacksConfig::from_json(j.at("attacks"));
  if (j.contains("probes")) {
    c.probes_per_pair = j.at("probes").value("per_pair", std::size_t{5});
    c.probe_seed = j.at("probes").value("seed", std::uint64_t{29});
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    c.eval_groups = e.value("groups", std::size_t{0});
    c.eval_group_seed = e.value("group_seed", std::uint64_t{31});
    c.uniformity_pors = e.value("uniformity_pors", std::size_t{100});
    c.por_checkpoint_interval = e.value("por_checkpoint_interval", 0LL);
  }
  if (j.contains("insert")) {
    c.insert_fraction = j.at("insert").value("fraction", 0.0);
    c.insert_val_index = j.at("insert").value("val_index", -1LL);
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file_text(path));
  } catch (const std::exception& e) {
    throw ConfigError("cannot load config " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

std::uint64_t ExperimentConfig::content_hash() const {
  const std::string dumped = to_json().dump();
  return fnv1a64(dumped.data(), dumped.size());
}

LoadedData load_experiment_data(const ExperimentConfig& cfg) {
  LoadedData out;
  switch (cfg.data.kind) {
    case DatasetConfig::Kind::Blobs: {
      Dataset all = synth_gaussian(cfg.data.n + cfg.data.val_n, cfg.data.d,
                                   cfg.data.classes, cfg.data.seed, cfg.data.separation);
      out.train = all;
      out.train.n = cfg.data.n;
      out.train.features.resize(cfg.data.n * all.dim);
      out.train.labels.resize(cfg.data.n);
      out.validation = all;
      out.validation.n = cfg.data.val_n;
      out.validation.features.assign(all.features.begin() +
                                         static_cast<std::ptrdiff_t>(cfg.data.n * all.dim),
                                     all.features.end());
      out.validation.labels.assign(all.labels.begin() +
                                       static_cast<std::ptrdiff_t>(cfg.data.n),
                                   all.labels.end());
      break;
    }
    case DatasetConfig::Kind::Subspace: {
      out.train = synth_subspace(cfg.data.n, cfg.data.d, cfg.data.seed).data;
      out.validation = out.train;  // subspace runs do not use attacks
      break;
    }
    case DatasetConfig::Kind::Idx: {
      Dataset all;
      try {
        all = load_idx(cfg.data.images, cfg.data.labels);
      } catch (const std::exception& e) {
        throw ConfigError(std::string("dataset: ") + e.what());
      }
      const std::size_t need = cfg.data.offset + cfg.data.take_n + cfg.data.val_n;
      if (need > all.n) {
        throw ConfigError("dataset: idx file holds " + std::to_string(all.n) +
                          " samples, config needs " + std::to_string(need));
      }
      const auto slice = [&](std::size_t from, std::size_t count) {
        Dataset d = all;
        d.n = count;
        d.features.assign(all.features.begin() + static_cast<std::ptrdiff_t>(from * all.dim),
                          all.features.begin() +
                              static_cast<std::ptrdiff_t>((from + count) * all.dim));
        d.labels.assign(all.labels.begin() + static_cast<std::ptrdiff_t>(from),
                        all.labels.begin() + static_cast<std::ptrdiff_t>(from + count));
        return d;
      };
      out.train = slice(cfg.data.offset, cfg.data.take_n);
      out.validation = slice(cfg.data.offset + cfg.data.take_n, cfg.data.val_n);
      // class count must cover both slices
      out.train.classes = all.classes;
      out.validation.classes = all.classes;
      break;
    }
    case DatasetConfig::Kind::Container: {
      try {
        out.train = read_dataset(cfg.data.train_path);
        out.validation = cfg.data.validation_path.empty()
                             ? out.train
                             : read_dataset(cfg.data.validation_path);
      } catch (const std::exception& e) {
        throw ConfigError(std::string("dataset: ") + e.what());
      }
      break;
    }
  }
  out.train.validate();
  out.validation.validate();
  if (cfg.model.input_dim() != out.train.dim) {
    throw ConfigError("config: model input dim != dataset dim");
  }
  if (cfg.model.classes < out.train.classes) {
    throw ConfigError("config: model classes < dataset classes");
  }
  if (out.train.n % (cfg.forge.group_size * cfg.forge.kappa) != 0) {
    throw ConfigError("config: lambda*kappa must divide n");
  }
  if (out.train.n % static_cast<std::size_t>(cfg.hp.batch_size) != 0) {
    throw ConfigError("config: batch size must divide n");
  }
  return out;
}

double accuracy(const ParamVector& params, const ModelSpec& spec, const Dataset& ds) {
  const auto c = static_cast<std::size_t>(spec.classes);
  std::size_t correct = 0;
  const std::size_t chunk = 256;
  std::vector<double> probs(chunk * c);
  for (std::size_t from = 0; from < ds.n; from += chunk) {
    const std::size_t rows = std::min(chunk, ds.n - from);
    forward(params, spec, ds.row(from), rows, probs.data());
    for (std::size_t i = 0; i < rows; ++i) {
      const double* p = probs.data() + i * c;
      const std::size_t pred = std::max_element(p, p + c) - p;
      if (static_cast<int>(pred) == ds.labels[from + i]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(ds.n);
}

std::vector<std::size_t> select_eval_groups(std::size_t group_count, std::size_t take,
                                            std::uint64_t seed) {
  if (take == 0 || take >= group_count) {
    std::vector<std::size_t> all(group_count);
    std::iota(all.begin(), all.end(), 0);
    return all;
  }
  Rng rng = Rng::stream(seed, 0xe7a1);
  const auto pick = rng.sample_distinct(group_count, take);
  return {pick.begin(), pick.end()};
}

TrainOutputs cmd_train(const ExperimentConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  const LoadedData data = load_experiment_data(cfg);

  PoLManifest manifest;
  manifest.spec = cfg.model;
  manifest.hp = cfg.hp;
  manifest.init_seed = cfg.init_seed;
  manifest.schedule_seed = cfg.schedule_seed;
  manifest.n = data.train.n;
  manifest.augment = cfg.augment;
  manifest.checkpoint_interval = cfg.checkpoint_interval;

  const TrainResult result = record_training(data.train, manifest);

  std::filesystem::create_directories(out_dir);
  const auto log_dir = out_dir / "pol";
  const auto tmp_dir = out_dir / "pol.tmp";
  std::filesystem::remove_all(tmp_dir);
  write_log(result.log, tmp_dir);
  std::filesystem::remove_all(log_dir);
  std::filesystem::rename(tmp_dir, log_dir);

  TrainOutputs out;
  out.log_dir = log_dir;
  out.final_loss = result.final_loss;
  out.train_accuracy = accuracy(result.final_params, cfg.model, data.train);
  out.validation_accuracy = data.validation.n > 0
                                ? accuracy(result.final_params, cfg.model, data.validation)
                                : 0.0;

  nlohmann::json summary;
  summary["final_loss"] = out.final_loss;
  summary["train_accuracy"] = out.train_accuracy;
  summary["validation_accuracy"] = out.validation_accuracy;
  summary["config_hash"] = cfg.content_hash();
  summary["config"] = cfg.to_json();
  atomic_write_file(out_dir / "train_summary.json", summary.dump(2) + "\n");
  return out;
}

ForgeOutputs cmd_forge(const ExperimentConfig& cfg, const std::filesystem::path& log_dir,
                       const std::filesystem::path& out_dir) {
  cfg.validate();
  const LoadedData data = load_experiment_data(cfg);
  const PoLLog log = read_log(log_dir);
  if (log.manifest.checkpoint_interval != 1) {
    throw ConfigError("forge: the log must carry a checkpoint at every step (C=1)");
  }

  ForgeConfig fcfg = cfg.forge;
  fcfg.augment = log.manifest.augment;
  const SplitPlan plan =
      make_split_plan(data.train.n, fcfg.group_size, fcfg.kappa,
                      static_cast<std::size_t>(log.tau()), fcfg.seed);
  CostCounters counters;
  const ForgedBatchStore store =
      forge_all_full(log, data.train, plan, fcfg, &counters, cfg.threads);

  std::filesystem::create_directories(out_dir);
  ForgeOutputs out;
  out.store_path = out_dir / "forge.jsonl";
  out.stats_path = out_dir / "forge_stats.json";
  write_forge_store(store, out.store_path);

  const auto tau = static_cast<std::uint64_t>(log.tau());
  const std::uint64_t expected_phase1 = fcfg.kappa * fcfg.mu * tau + tau;
  const std::uint64_t naive = static_cast<std::uint64_t>(data.train.n) * fcfg.mu * tau;
  const std::uint64_t efficient =
      fcfg.kappa * fcfg.mu * tau + static_cast<std::uint64_t>(data.train.n) * tau /
                                      fcfg.group_size;
  nlohmann::json stats;
  stats["phase1_candidate_evals"] = counters.phase1_candidate_evals.load();
  stats["phase1_original_evals"] = counters.phase1_original_evals.load();
  stats["phase1_total"] = counters.phase1_total();
  stats["phase1_expected"] = expected_phase1;
  stats["phase1_matches_expected"] = counters.phase1_total() == expected_phase1;
  stats["phase2_expected"] = static_cast<std::uint64_t>(data.train.n) * tau /
                             fcfg.group_size;
  stats["naive_grad_evals"] = naive;
  stats["efficient_grad_evals"] = efficient;
  stats["naive_over_efficient"] =
      static_cast<double>(naive) / static_cast<double>(efficient);
  stats["config_hash"] = cfg.content_hash();
  atomic_write_file(out.stats_path, stats.dump(2) + "\n");
  out.phase1_total = counters.phase1_total();
  return out;
}

ReconstructOutputs cmd_reconstruct(const ExperimentConfig& cfg,
                                   const std::filesystem::path& log_dir,
                                   const std::filesystem::path& store_path,
                                   const std::string& group_selector,
                                   const std::filesystem::path& out_dir) {
  cfg.validate();
  const LoadedData data = load_experiment_data(cfg);
  const PoLLog log = read_log(log_dir);
  const ForgedBatchStore store = read_forge_store(store_path, log);

  std::vector<std::size_t> groups;
  if (group_selector == "all") {
    groups = select_eval_groups(store.group_count(), cfg.eval_groups, cfg.eval_group_seed);
  } else {
    std::size_t g = 0;
    try {
      g = std::stoull(group_selector);
    } catch (const std::exception&) {
      throw ConfigError("reconstruct: bad group selector '" + group_selector + "'");
    }
    if (g >= store.group_count()) {
      throw ConfigError("reconstruct: unknown group " + group_selector);
    }
    groups.push_back(g);
  }

  const long long ckpt_interval =
      cfg.por_checkpoint_interval > 0 ? cfg.por_checkpoint_interval : log.tau();
  std::filesystem::create_directories(out_dir);

  std::vector<nlohmann::json> index_rows(groups.size());
  CostCounters counters;
  parallel_for(0, groups.size(), cfg.threads, [&](std::size_t i) {
    const std::size_t g = groups[i];
    const PoR por = reconstruct_por(log, data.train, store, g, ckpt_interval, &counters);
    const std::size_t hits = exclusion_scan(por.forged_log, por.group);
    if (hits != 0) {
      throw std::runtime_error("reconstruct: exclusion scan found target samples");
    }
    const auto dir = out_dir / group_dir_name(g);
    std::filesystem::remove_all(dir);
    write_log(por.forged_log, dir);
    nlohmann::json meta;
    meta["group_id"] = g;
    meta["members"] = por.group;
    meta["replaced_steps"] = por.replaced_steps;
    meta["max_substitution_dist"] = por.max_substitution_dist;
    meta["exclusion_hits"] = hits;
    atomic_write_file(dir / "por.json", meta.dump(2) + "\n");
    nlohmann::json row;
    row["group_id"] = g;
    row["dir"] = group_dir_name(g).string();
    index_rows[i] = row;
  });

  nlohmann::json index;
  index["pors"] = index_rows;
  index["config_hash"] = cfg.content_hash();
  index["phase2_evals"] = counters.phase2_evals.load();
  atomic_write_file(out_dir / "index.json", index.dump(2) + "\n");

  ReconstructOutputs out;
  out.pors_dir = out_dir;
  out.groups = groups;
  return out;
}

VerificationReport cmd_verify(const ExperimentConfig& cfg,
                              const std::filesystem::path& log_dir, double epsilon,
                              std::size_t subset_k) {
  const PoLLog log = read_log(log_dir);
  Dataset ds;
  if (std::filesystem::exists(log_dir / "dataset.bin")) {
    ds = read_dataset(log_dir / "dataset.bin");
  } else {
    ds = load_experiment_data(cfg).train;
  }
  if (subset_k == 0) return verify_full(log, ds, epsilon);
  return verify_subset(log, ds, epsilon, subset_k);
}

namespace {

struct PorHandle {
  std::size_t group_id = 0;
  std::filesystem::path dir;
  std::vector<std::uint32_t> members;
  ParamVector theta_minus;
};

std::vector<PorHandle> load_pors(const std::filesystem::path& pors_dir) {
  const auto index =
      nlohmann::json::parse(read_file_text(pors_dir / "index.json"));
  std::vector<PorHandle> out;
  for (const auto& row : index.at("pors")) {
    PorHandle h;
    h.group_id = row.at("group_id").get<std::size_t>();
    h.dir = pors_dir / row.at("dir").get<std::string>();
    const auto meta = nlohmann::json::parse(read_file_text(h.dir / "por.json"));
    h.members = meta.at("members").get<std::vector<std::uint32_t>>();
    const auto manifest = PoLManifest::from_json(
        nlohmann::json::parse(read_file_text(h.dir / "manifest.json")));
    const PoLLog log = read_log(h.dir);
    h.theta_minus = log.checkpoint(manifest.hp.total_steps);
    out.push_back(std::move(h));
  }
  return out;
}

}  // namespace

AttackOutputs cmd_attack(const ExperimentConfig& cfg, const std::filesystem::path& log_dir,
                         const std::filesystem::path& pors_dir,
                         const std::filesystem::path& out_dir) {
  cfg.validate();
  if (!cfg.attacks.enabled) throw ConfigError("attack: attacks disabled in config");
  const LoadedData data = load_experiment_data(cfg);
  if (data.validation.n < cfg.probes_per_pair) {
    throw ConfigError("attack: validation set smaller than probes_per_pair");
  }
  const PoLLog log = read_log(log_dir);
  const ParamVector theta_star = log.checkpoint(log.tau());
  const std::vector<PorHandle> pors = load_pors(pors_dir);
  if (pors.empty()) throw ConfigError("attack: no PoRs found");

  const AttackSuite suite =
      AttackSuite::build(data.train, data.validation, cfg.model, cfg.hp, theta_star,
                         cfg.attacks.suite, cfg.threads);

  std::vector<std::vector<std::uint32_t>> groups;
  groups.reserve(pors.size());
  for (const auto& h : pors) groups.push_back(h.members);
  const ProbePlan plan = ProbePlan::make(groups, data.train.n, data.validation.n,
                                         cfg.probes_per_pair, cfg.probe_seed);

  // the original model is scored on the union of all probe ids
  std::set<long long> union_ids;
  for (std::size_t i = 0; i < pors.size(); ++i) {
    union_ids.insert(plan.diff[i].begin(), plan.diff[i].end());
    union_ids.insert(plan.common[i].begin(), plan.common[i].end());
    union_ids.insert(plan.validation[i].begin(), plan.validation[i].end());
  }

  std::string csv = "sample_id,attack,score,prediction,model_id\n";
  std::size_t rows = 0;
  const auto emit = [&](const ParamVector& model, const std::string& model_id,
                        long long id) {
    for (const AttackKind kind : cfg.attacks.suite.roster) {
      const AttackScore s = suite.score(kind, model, id);
      csv += std::to_string(id);
      csv += ',';
      csv += attack_name(kind);
      csv += ',';
      csv += format_double(s.score);
      csv += ',';
      csv += s.prediction ? '1' : '0';
      csv += ',';
      csv += model_id;
      csv += '\n';
      ++rows;
    }
  };
  for (const long long id : union_ids) emit(theta_star, "original", id);
  for (std::size_t i = 0; i < pors.size(); ++i) {
    std::set<long long> ids;
    ids.insert(plan.diff[i].begin(), plan.diff[i].end());
    ids.insert(plan.common[i].begin(), plan.common[i].end());
    ids.insert(plan.validation[i].begin(), plan.validation[i].end());
    const std::string model_id = group_dir_name(pors[i].group_id).string();
    for (const long long id : ids) emit(pors[i].theta_minus, model_id, id);
  }

  std::filesystem::create_directories(out_dir);
  AttackOutputs out;
  out.scores_csv = out_dir / "scores.csv";
  out.calibration_json = out_dir / "calibration.json";
  atomic_write_file(out.scores_csv, csv);
  nlohmann::json cal = suite.calibration_json();
  cal["config_hash"] = cfg.content_hash();
  atomic_write_file(out.calibration_json, cal.dump(2) + "\n");
  out.rows = rows;
  return out;
}

namespace {

struct ScoreTable {
  // (model_id, attack, sample_id) -> (score, prediction)
  std::map<std::tuple<std::string, std::string, long long>, std::pair<double, bool>> rows;

  static ScoreTable parse(const std::filesystem::path& csv_path) {
    ScoreTable table;
    std::istringstream in(read_file_text(csv_path));
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("scores csv: empty");
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::istringstream ls(line);
      std::string id_s, attack, score_s, pred_s, model;
      std::getline(ls, id_s, ',');
      std::getline(ls, attack, ',');
      std::getline(ls, score_s, ',');
      std::getline(ls, pred_s, ',');
      std::getline(ls, model, ',');
      table.rows[{model, attack, std::stoll(id_s)}] = {std::stod(score_s),
                                                       pred_s == "1"};
    }
    return table;
  }

  const std::pair<double, bool>& at(const std::string& model, const std::string& attack,
                                    long long id) const {
    const auto it = rows.find({model, attack, id});
    if (it == rows.end()) {
      throw std::runtime_error("scores csv: missing row " + model + "/" + attack + "/" +
                               std::to_string(id));
    }
    return it->second;
  }
};

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double stderr_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double var = 0.0;
  for (const double x : v) var += (x - m) * (x - m);
  var /= static_cast<double>(v.size() - 1);
  return std::sqrt(var / static_cast<double>(v.size()));
}

double quantile_sorted(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) return 0.0;
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}

}  // namespace

MetricsOutputs cmd_metrics(const ExperimentConfig& cfg,
                           const std::filesystem::path& log_dir,
                           const std::filesystem::path& pors_dir,
                           const std::filesystem::path& scores_csv,
                           const std::filesystem::path& out_dir) {
  cfg.validate();
  const LoadedData data = load_experiment_data(cfg);
  const PoLLog log = read_log(log_dir);
  const ParamVector theta_star = log.checkpoint(log.tau());
  const std::vector<PorHandle> pors = load_pors(pors_dir);
  if (pors.empty()) throw ConfigError("metrics: no PoRs found");
  const ScoreTable scores = ScoreTable::parse(scores_csv);

  std::vector<std::vector<std::uint32_t>> groups;
  for (const auto& h : pors) groups.push_back(h.members);
  const ProbePlan plan = ProbePlan::make(groups, data.train.n, data.validation.n,
                                         cfg.probes_per_pair, cfg.probe_seed);

  // d_theta per pair
  std::vector<double> d_theta;
  d_theta.reserve(pors.size());
  for (const auto& h : pors) {
    d_theta.push_back(metric_model_distance(theta_star, h.theta_minus));
  }

  // prediction diff per attack, recounted from the attack stage's csv
  nlohmann::json pred_diff = nlohmann::json::object();
  std::string pred_csv = "attack,setting,pairs,disagreements,percent\n";
  for (const AttackKind kind : cfg.attacks.suite.roster) {
    const std::string aname = attack_name(kind);
    std::size_t diff_n = 0, common_n = 0, val_n = 0;
    for (std::size_t i = 0; i < pors.size(); ++i) {
      const std::string model_id = group_dir_name(pors[i].group_id).string();
      const auto disagrees = [&](const std::vector<long long>& ids) {
        for (const long long id : ids) {
          if (scores.at("original", aname, id).second !=
              scores.at(model_id, aname, id).second) {
            return true;
          }
        }
        return false;
      };
      if (disagrees(plan.diff[i])) ++diff_n;
      if (disagrees(plan.common[i])) ++common_n;
      if (disagrees(plan.validation[i])) ++val_n;
    }
    const double scale = 100.0 / static_cast<double>(pors.size());
    nlohmann::json jr;
    jr["pairs"] = pors.size();
    jr["diff_pct"] = scale * static_cast<double>(diff_n);
    jr["common_pct"] = scale * static_cast<double>(common_n);
    jr["validation_pct"] = scale * static_cast<double>(val_n);
    pred_diff[aname] = jr;
    for (const auto& [setting, count] :
         {std::pair<const char*, std::size_t>{"diff", diff_n},
          {"common", common_n},
          {"validation", val_n}}) {
      pred_csv += aname;
      pred_csv += ',';
      pred_csv += setting;
      pred_csv += ',';
      pred_csv += std::to_string(pors.size());
      pred_csv += ',';
      pred_csv += std::to_string(count);
      pred_csv += ',';
      pred_csv += format_double(scale * static_cast<double>(count));
      pred_csv += '\n';
    }
  }

  // score differences on the removed samples
  nlohmann::json score_diff = nlohmann::json::object();
  std::string sd_csv = "attack,count,mean,min,p25,p50,p75,max\n";
  for (const AttackKind kind : cfg.attacks.suite.roster) {
    const std::string aname = attack_name(kind);
    std::vector<double> diffs;
    for (std::size_t i = 0; i < pors.size(); ++i) {
      const std::string model_id = group_dir_name(pors[i].group_id).string();
      for (const long long id : plan.diff[i]) {
        diffs.push_back(metric_score_diff(scores.at("original", aname, id).first,
                                          scores.at(model_id, aname, id).first));
      }
    }
    std::sort(diffs.begin(), diffs.end());
    nlohmann::json jq;
    jq["count"] = diffs.size();
    jq["mean"] = mean_of(diffs);
    jq["min"] = diffs.empty() ? 0.0 : diffs.front();
    jq["p25"] = quantile_sorted(diffs, 0.25);
    jq["p50"] = quantile_sorted(diffs, 0.50);
    jq["p75"] = quantile_sorted(diffs, 0.75);
    jq["max"] = diffs.empty() ? 0.0 : diffs.back();
    score_diff[aname] = jq;
    sd_csv += aname + "," + std::to_string(diffs.size()) + "," +
              format_double(mean_of(diffs)) + "," +
              format_double(diffs.empty() ? 0.0 : diffs.front()) + "," +
              format_double(quantile_sorted(diffs, 0.25)) + "," +
              format_double(quantile_sorted(diffs, 0.50)) + "," +
              format_double(quantile_sorted(diffs, 0.75)) + "," +
              format_double(diffs.empty() ? 0.0 : diffs.back()) + "\n";
  }

  // uniformity over PoR batch sequences plus the two reference schedules
  std::vector<double> uniformities;
  const std::size_t uni_count = std::min(cfg.uniformity_pors, pors.size());
  for (std::size_t i = 0; i < uni_count; ++i) {
    const PoLLog por_log = read_log(pors[i].dir);
    std::vector<MiniBatchSpec> seq;
    seq.reserve(por_log.steps.size());
    for (const auto& rec : por_log.steps) seq.push_back(rec.batch);
    uniformities.push_back(metric_uniformity(seq, data.train.n));
  }
  const auto tau = static_cast<std::size_t>(log.tau());
  const BatchSchedule loop_sched =
      make_schedule_steps(data.train.n, static_cast<std::size_t>(cfg.hp.batch_size), tau,
                          cfg.schedule_seed, false);
  const double loop_uniformity = metric_uniformity(loop_sched.batches, data.train.n);
  const auto independent = make_independent_batches(
      data.train.n, static_cast<std::size_t>(cfg.hp.batch_size), tau,
      mix64(cfg.probe_seed, 0xba5e), false);
  const double independent_uniformity = metric_uniformity(independent, data.train.n);

  std::string uni_tsv = "source\tl1_uniformity\n";
  uni_tsv += "dataloader_loop\t" + format_double(loop_uniformity) + "\n";
  uni_tsv += "independent_sampling\t" + format_double(independent_uniformity) + "\n";
  for (std::size_t i = 0; i < uniformities.size(); ++i) {
    uni_tsv += "por_" + std::to_string(pors[i].group_id) + "\t" +
               format_double(uniformities[i]) + "\n";
  }

  // sorted frequency profiles for plotting
  std::string prof_tsv = "rank\tdataloader_loop\tindependent\tforged\n";
  {
    const auto loop_prof = metric_freq_profile(loop_sched.batches, data.train.n);
    const auto ind_prof = metric_freq_profile(independent, data.train.n);
    const PoLLog por_log = read_log(pors.front().dir);
    std::vector<MiniBatchSpec> seq;
    for (const auto& rec : por_log.steps) seq.push_back(rec.batch);
    const auto forged_prof = metric_freq_profile(seq, data.train.n);
    for (std::size_t i = 0; i < loop_prof.size(); ++i) {
      prof_tsv += std::to_string(i) + "\t" + format_double(loop_prof[i]) + "\t" +
                  format_double(ind_prof[i]) + "\t" + format_double(forged_prof[i]) + "\n";
    }
  }

  nlohmann::json report;
  report["config"] = cfg.to_json();
  report["config_hash"] = cfg.content_hash();
  report["input_hashes"] = {
      {"scores_csv", hash_file(scores_csv)},
      {"log_manifest", hash_file(log_dir / "manifest.json")},
      {"pors_index", hash_file(pors_dir / "index.json")}};
  std::vector<double> d_sorted = d_theta;
  std::sort(d_sorted.begin(), d_sorted.end());
  report["d_theta"] = {{"count", d_theta.size()},
                       {"mean", mean_of(d_theta)},
                       {"median", quantile_sorted(d_sorted, 0.5)},
                       {"min", d_sorted.empty() ? 0.0 : d_sorted.front()},
                       {"max", d_sorted.empty() ? 0.0 : d_sorted.back()},
                       {"values", d_theta}};
  report["prediction_diff"] = pred_diff;
  report["score_diff"] = score_diff;
  report["uniformity"] = {{"pors_mean", mean_of(uniformities)},
                          {"pors_stderr", stderr_of(uniformities)},
                          {"pors_count", uniformities.size()},
                          {"dataloader_loop", loop_uniformity},
                          {"independent_sampling", independent_uniformity}};

  std::filesystem::create_directories(out_dir);
  MetricsOutputs out;
  out.report_json = out_dir / "report.json";
  out.prediction_diff_csv = out_dir / "prediction_diff.csv";
  out.score_diff_csv = out_dir / "score_diff.csv";
  out.uniformity_tsv = out_dir / "uniformity.tsv";
  out.freq_profile_tsv = out_dir / "freq_profile.tsv";
  atomic_write_file(out.report_json, report.dump(2) + "\n");
  atomic_write_file(out.prediction_diff_csv, pred_csv);
  atomic_write_file(out.score_diff_csv, sd_csv);
  atomic_write_file(out.uniformity_tsv, uni_tsv);
  atomic_write_file(out.freq_profile_tsv, prof_tsv);
  return out;
}

std::vector<ImpossibilityRow> demo_impossibility(std::size_t n, std::size_t d,
                                                 std::size_t trials, std::uint64_t seed) {
  std::vector<ImpossibilityRow> rows;
  rows.reserve(trials);
  for (std::size_t trial = 0; trial < trials; ++trial) {
    const SubspaceData sub = synth_subspace(n, d, mix64(seed, trial));
    Rng wrng = Rng::stream(seed, trial, 0x3e1);
    ParamVector w(d + 1);
    const double scale = wrng.uniform(0.25, 2.0);
    for (auto& v : w) v = scale * wrng.normal();
    const Thm1Result res = thm1_bound(sub, w);
    ImpossibilityRow row;
    row.trial = trial;
    row.min_grad_dist = res.min_grad_dist;
    row.bound = res.bound;
    row.holds = res.min_grad_dist >= res.bound - 1e-12;
    rows.push_back(row);
  }
  return rows;
}

InsertOutputs cmd_forge_insert(const ExperimentConfig& cfg,
                               const std::filesystem::path& log_dir,
                               const std::filesystem::path& out_dir) {
  cfg.validate();
  if (cfg.insert_val_index < 0) {
    throw ConfigError("forge-insert: insert.val_index must be set");
  }
  const LoadedData data = load_experiment_data(cfg);
  if (static_cast<std::size_t>(cfg.insert_val_index) >= data.validation.n) {
    throw ConfigError("forge-insert: insert.val_index out of range");
  }
  const PoLLog log = read_log(log_dir);

  const auto vi = static_cast<std::size_t>(cfg.insert_val_index);
  const std::vector<double> x_star(data.validation.row(vi),
                                   data.validation.row(vi) + data.validation.dim);
  const double fraction =
      cfg.insert_fraction > 0.0
          ? cfg.insert_fraction
          : static_cast<double>(cfg.hp.batch_size) / static_cast<double>(data.train.n);

  CostCounters counters;
  const InsertForge forged =
      forge_insert(log, data.train, x_star, data.validation.labels[vi], fraction,
                   cfg.forge, &counters, cfg.threads);

  const auto dir = out_dir / "por_insert";
  std::filesystem::remove_all(dir);
  write_log(forged.forged_log, dir);
  write_dataset(forged.extended, dir / "dataset.bin");

  double max_d2 = 0.0;
  for (const double d2 : forged.dist_sq) max_d2 = std::max(max_d2, d2);
  nlohmann::json meta;
  meta["val_index"] = cfg.insert_val_index;
  meta["fraction"] = fraction;
  meta["replaced_steps"] = forged.replaced_steps;
  meta["replaced_count"] = forged.replaced_steps.size();
  meta["max_substitution_dist"] = std::sqrt(max_d2);
  meta["config_hash"] = cfg.content_hash();
  atomic_write_file(dir / "insert.json", meta.dump(2) + "\n");

  InsertOutputs out;
  out.por_dir = dir;
  out.replaced_steps = forged.replaced_steps.size();
  out.max_substitution_dist = std::sqrt(max_d2);
  return out;
}

std::string cmd_report(const std::filesystem::path& run_dir) {
  std::ostringstream os;
  os << "# Run report: " << run_dir.string() << "\n\n";
  const auto add_json = [&](const std::filesystem::path& p, const std::string& title) {
    if (!std::filesystem::exists(p)) return;
    os << "## " << title << "\n\n```json\n" << read_file_text(p) << "```\n\n";
  };
  add_json(run_dir / "train_summary.json", "Training");
  add_json(run_dir / "forge_stats.json", "Forging cost");
  if (std::filesystem::exists(run_dir / "pors" / "index.json")) {
    const auto index =
        nlohmann::json::parse(read_file_text(run_dir / "pors" / "index.json"));
    os << "## PoRs\n\n" << index.at("pors").size() << " reconstructed\n\n";
  }
  add_json(run_dir / "metrics" / "report.json", "Metrics");
  return os.str();
}

}  // namespace repud
