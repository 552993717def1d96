#include "repud/pol.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace repud {

namespace {

std::string arch_name(Arch a) {
  switch (a) {
    case Arch::LogReg: return "logreg";
    case Arch::Mlp: return "mlp";
    case Arch::SmallCnn: return "cnn";
  }
  return "?";
}

}  // namespace

nlohmann::json model_spec_to_json(const ModelSpec& s) {
  nlohmann::json j;
  j["arch"] = arch_name(s.arch);
  j["classes"] = s.classes;
  switch (s.arch) {
    case Arch::LogReg:
      j["dim"] = s.logreg_dim;
      break;
    case Arch::Mlp:
      j["widths"] = s.mlp_widths;
      break;
    case Arch::SmallCnn:
      j["input"] = {s.cnn_input.height, s.cnn_input.width, s.cnn_input.channels};
      j["channels"] = s.cnn_channels;
      break;
  }
  return j;
}

ModelSpec model_spec_from_json(const nlohmann::json& j) {
  const std::string arch = j.at("arch").get<std::string>();
  if (arch == "logreg") {
    return ModelSpec::logreg(j.at("dim").get<int>(), j.at("classes").get<int>());
  }
  if (arch == "mlp") {
    return ModelSpec::mlp(j.at("widths").get<std::vector<int>>());
  }
  if (arch == "cnn") {
    const auto in = j.at("input").get<std::vector<int>>();
    if (in.size() != 3) throw ConfigError("model: cnn input must be [h,w,ch]");
    return ModelSpec::small_cnn({in[0], in[1], in[2]},
                                j.at("channels").get<std::vector<int>>(),
                                j.at("classes").get<int>());
  }
  throw ConfigError("model: unknown arch '" + arch + "'");
}

nlohmann::json hyperparams_to_json(const Hyperparams& hp) {
  nlohmann::json j;
  j["step_size"] = hp.step_size;
  j["batch_size"] = hp.batch_size;
  j["total_steps"] = hp.total_steps;
  j["momentum"] = hp.momentum;
  j["weight_decay"] = hp.weight_decay;
  j["lr_schedule"] = hp.schedule == LrSchedule::Constant ? "constant" : "cosine";
  j["lr_min"] = hp.lr_min;
  return j;
}

Hyperparams hyperparams_from_json(const nlohmann::json& j) {
  Hyperparams hp;
  hp.step_size = j.at("step_size").get<double>();
  hp.batch_size = j.at("batch_size").get<int>();
  hp.total_steps = j.at("total_steps").get<long long>();
  hp.momentum = j.value("momentum", 0.0);
  hp.weight_decay = j.value("weight_decay", 0.0);
  const std::string sched = j.value("lr_schedule", std::string("constant"));
  if (sched == "constant") {
    hp.schedule = LrSchedule::Constant;
  } else if (sched == "cosine") {
    hp.schedule = LrSchedule::CosineAnneal;
  } else {
    throw ConfigError("hp: unknown lr_schedule '" + sched + "'");
  }
  hp.lr_min = j.value("lr_min", 0.0);
  hp.validate();
  return hp;
}

void PoLManifest::validate() const {
  spec.validate();
  hp.validate();
  if (n < 1) throw std::invalid_argument("manifest: n < 1");
  if (checkpoint_interval < 1) {
    throw std::invalid_argument("manifest: checkpoint interval < 1");
  }
  if (static_cast<std::size_t>(hp.batch_size) > n) {
    throw std::invalid_argument("manifest: batch size > n");
  }
  if (format_version != kLogFormatVersion) {
    throw std::runtime_error("manifest: unsupported format version");
  }
}

nlohmann::json PoLManifest::to_json() const {
  nlohmann::json j;
  j["format_version"] = format_version;
  j["model"] = model_spec_to_json(spec);
  j["hyperparams"] = hyperparams_to_json(hp);
  j["init_seed"] = init_seed;
  j["schedule_seed"] = schedule_seed;
  j["n"] = n;
  j["augment"] = augment;
  j["checkpoint_interval"] = checkpoint_interval;
  return j;
}

PoLManifest PoLManifest::from_json(const nlohmann::json& j) {
  PoLManifest m;
  m.format_version = j.at("format_version").get<int>();
  if (m.format_version != kLogFormatVersion) {
    throw std::runtime_error("manifest: unsupported format version");
  }
  m.spec = model_spec_from_json(j.at("model"));
  m.hp = hyperparams_from_json(j.at("hyperparams"));
  m.init_seed = j.at("init_seed").get<std::uint64_t>();
  m.schedule_seed = j.at("schedule_seed").get<std::uint64_t>();
  m.n = j.at("n").get<std::size_t>();
  m.augment = j.at("augment").get<bool>();
  m.checkpoint_interval = j.at("checkpoint_interval").get<long long>();
  m.validate();
  return m;
}

void PoLLog::validate() const {
  manifest.validate();
  const long long tau_ = tau();
  if (steps.size() != static_cast<std::size_t>(tau_)) {
    throw std::runtime_error("log: step count != tau");
  }
  for (long long t = 1; t <= tau_; ++t) {
    const auto& rec = steps[static_cast<std::size_t>(t - 1)];
    if (rec.t != t) throw std::runtime_error("log: steps not contiguous");
    for (const auto idx : rec.batch.indices) {
      if (idx >= manifest.n) throw std::runtime_error("log: batch index out of range");
    }
  }
  if (!checkpoints.count(0) || !checkpoints.count(tau_)) {
    throw std::runtime_error("log: checkpoints at 0 and tau required");
  }
  for (const auto& [t, v] : checkpoints) {
    if (t < 0 || t > tau_) throw std::runtime_error("log: checkpoint step out of range");
    if (v.size() != manifest.spec.param_count()) {
      throw std::runtime_error("log: checkpoint size mismatch");
    }
  }
  if (manifest.hp.momentum != 0.0) {
    for (const auto& [t, v] : checkpoints) {
      (void)v;
      if (!velocity_checkpoints.count(t)) {
        throw std::runtime_error("log: momentum run missing velocity checkpoint");
      }
    }
  }
}

const ParamVector& PoLLog::checkpoint(long long t) const {
  const auto it = checkpoints.find(t);
  if (it == checkpoints.end()) throw std::out_of_range("log: missing checkpoint");
  return it->second;
}

nlohmann::json VerificationReport::to_json() const {
  nlohmann::json j;
  j["epsilon"] = epsilon;
  j["max_error"] = max_error;
  j["pass"] = pass;
  j["segments_checked"] = segments_checked;
  j["segments_total"] = segments_total;
  auto arr = nlohmann::json::array();
  for (const auto& s : segments) {
    arr.push_back({{"from", s.from}, {"to", s.to}, {"error", s.error}});
  }
  j["segments"] = arr;
  return j;
}

TrainResult record_training(const Dataset& ds, const PoLManifest& manifest) {
  manifest.validate();
  ds.validate();
  if (ds.n != manifest.n) throw std::invalid_argument("record_training: n mismatch");
  if (manifest.augment && !ds.shape.valid()) {
    throw std::invalid_argument("record_training: augmentation needs image data");
  }
  const auto& hp = manifest.hp;
  const long long tau = hp.total_steps;
  const BatchSchedule sched = make_schedule_steps(
      ds.n, static_cast<std::size_t>(hp.batch_size), static_cast<std::size_t>(tau),
      manifest.schedule_seed, manifest.augment);

  TrainResult result;
  PoLLog& log = result.log;
  log.manifest = manifest;
  log.steps.reserve(static_cast<std::size_t>(tau));

  ParamVector theta = init_params(manifest.spec, manifest.init_seed);
  OptimizerState state = OptimizerState::init(theta.size());
  const bool track_velocity = hp.momentum != 0.0;

  const auto store_checkpoint = [&](long long t) {
    log.checkpoints.emplace(t, theta);
    if (track_velocity) log.velocity_checkpoints.emplace(t, state.velocity);
  };
  store_checkpoint(0);

  double last_loss = 0.0;
  for (long long t = 1; t <= tau; ++t) {
    const MiniBatchSpec& batch = sched.batches[static_cast<std::size_t>(t - 1)];
    const LossGrad lg = loss_and_grad(theta, manifest.spec, batch, ds, hp.weight_decay);
    if (!std::isfinite(lg.loss)) {
      throw std::runtime_error("record_training: non-finite loss at step " +
                               std::to_string(t));
    }
    last_loss = lg.loss;
    const double lr = lr_at(t - 1, hp);
    auto [next, next_state] = modified_sgd_step(theta, lg.grad, std::move(state), hp);
    theta = std::move(next);
    state = std::move(next_state);
    log.steps.push_back(StepRecord{t, batch, lr});
    if (t % manifest.checkpoint_interval == 0 || t == tau) store_checkpoint(t);
  }

  result.final_params = log.checkpoint(tau);
  result.final_loss = last_loss;
  log.validate();
  return result;
}

namespace {

// Replays (from, to] starting at the logged checkpoint for `from` and
// returns the l2 distance to the logged checkpoint at `to`. Uses the same
// gradient and update code as record_training, so an in-memory honest
// segment replays bit-identically.
double replay_segment(const PoLLog& log, const Dataset& ds, long long from,
                      long long to) {
  const auto& m = log.manifest;
  ParamVector theta = log.checkpoint(from);
  OptimizerState state;
  state.step_index = from;
  if (m.hp.momentum != 0.0) {
    const auto it = log.velocity_checkpoints.find(from);
    if (it == log.velocity_checkpoints.end()) {
      throw std::runtime_error("verify: missing velocity checkpoint at " +
                               std::to_string(from));
    }
    state.velocity = it->second;
  } else {
    state.velocity.assign(theta.size(), 0.0);
  }
  for (long long t = from + 1; t <= to; ++t) {
    const auto& rec = log.steps[static_cast<std::size_t>(t - 1)];
    const double expect_lr = lr_at(t - 1, m.hp);
    if (rec.lr != expect_lr) {
      throw std::runtime_error("verify: recorded lr disagrees with manifest at step " +
                               std::to_string(t));
    }
    const LossGrad lg = loss_and_grad(theta, m.spec, rec.batch, ds, m.hp.weight_decay);
    auto [next, next_state] = modified_sgd_step(theta, lg.grad, std::move(state), m.hp);
    theta = std::move(next);
    state = std::move(next_state);
  }
  return l2_distance(theta, log.checkpoint(to));
}

std::vector<std::pair<long long, long long>> checkpoint_segments(const PoLLog& log) {
  std::vector<long long> ts;
  ts.reserve(log.checkpoints.size());
  for (const auto& [t, v] : log.checkpoints) {
    (void)v;
    ts.push_back(t);
  }
  std::sort(ts.begin(), ts.end());
  std::vector<std::pair<long long, long long>> segs;
  for (std::size_t i = 0; i + 1 < ts.size(); ++i) segs.emplace_back(ts[i], ts[i + 1]);
  return segs;
}

}  // namespace

VerificationReport verify_full(const PoLLog& log, const Dataset& ds, double epsilon) {
  log.validate();
  if (ds.n != log.manifest.n) throw std::invalid_argument("verify: dataset n mismatch");
  const auto segs = checkpoint_segments(log);
  VerificationReport report;
  report.epsilon = epsilon;
  report.segments_total = segs.size();
  for (const auto& [a, b] : segs) {
    const double err = replay_segment(log, ds, a, b);
    report.segments.push_back({a, b, err});
    report.max_error = std::max(report.max_error, err);
  }
  report.segments_checked = segs.size();
  report.pass = report.max_error <= epsilon;
  return report;
}

VerificationReport verify_subset(const PoLLog& log, const Dataset& ds, double epsilon,
                                 std::size_t k) {
  log.validate();
  if (ds.n != log.manifest.n) throw std::invalid_argument("verify: dataset n mismatch");
  const auto segs = checkpoint_segments(log);
  if (k > segs.size()) throw std::invalid_argument("verify_subset: k > segment count");

  // rank by logged parameter movement, largest updates first
  std::vector<std::size_t> order(segs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<double> movement(segs.size());
  for (std::size_t i = 0; i < segs.size(); ++i) {
    movement[i] =
        l2_distance(log.checkpoint(segs[i].first), log.checkpoint(segs[i].second));
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return movement[a] > movement[b];
  });

  VerificationReport report;
  report.epsilon = epsilon;
  report.segments_total = segs.size();
  std::vector<std::size_t> chosen(order.begin(),
                                  order.begin() + static_cast<std::ptrdiff_t>(k));
  std::sort(chosen.begin(), chosen.end());
  for (const std::size_t i : chosen) {
    const double err = replay_segment(log, ds, segs[i].first, segs[i].second);
    report.segments.push_back({segs[i].first, segs[i].second, err});
    report.max_error = std::max(report.max_error, err);
  }
  report.segments_checked = k;
  report.pass = report.max_error <= epsilon;
  return report;
}

namespace {

constexpr std::uint32_t kCkptMagic = 0x4b435052u;  // "RPCK" little-endian
constexpr std::uint32_t kCkptVersion = 1;

void write_param_blob(const std::filesystem::path& path, long long t,
                      const std::vector<double>& values) {
  std::vector<std::uint8_t> payload;
  payload.reserve(values.size() * 4);
  for (const double v : values) {
    const float f = static_cast<float>(v);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32le(payload, bits);
  }
  std::vector<std::uint8_t> out;
  out.reserve(payload.size() + 28);
  put_u32le(out, kCkptMagic);
  put_u32le(out, kCkptVersion);
  put_u64le(out, static_cast<std::uint64_t>(t));
  put_u64le(out, values.size());
  put_u32le(out, crc32(payload.data(), payload.size()));
  out.insert(out.end(), payload.begin(), payload.end());
  atomic_write_file(path, out.data(), out.size());
}

std::vector<double> read_param_blob(const std::filesystem::path& path,
                                    long long expect_t) {
  const auto bytes = read_file_bytes(path);
  if (bytes.size() < 28) throw std::runtime_error("checkpoint: truncated header");
  if (get_u32le(bytes.data()) != kCkptMagic) {
    throw std::runtime_error("checkpoint: bad magic");
  }
  if (get_u32le(bytes.data() + 4) != kCkptVersion) {
    throw std::runtime_error("checkpoint: unsupported version");
  }
  const auto t = static_cast<long long>(get_u64le(bytes.data() + 8));
  if (t != expect_t) throw std::runtime_error("checkpoint: step mismatch");
  const std::uint64_t count = get_u64le(bytes.data() + 16);
  const std::uint32_t stored_crc = get_u32le(bytes.data() + 24);
  if (bytes.size() != 28 + count * 4) {
    throw std::runtime_error("checkpoint: truncated payload");
  }
  if (crc32(bytes.data() + 28, count * 4) != stored_crc) {
    throw std::runtime_error("checkpoint: checksum failure");
  }
  std::vector<double> values(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint32_t bits = get_u32le(bytes.data() + 28 + i * 4);
    float f;
    std::memcpy(&f, &bits, 4);
    values[i] = static_cast<double>(f);
  }
  return values;
}

}  // namespace

void write_log(const PoLLog& log, const std::filesystem::path& dir) {
  log.validate();
  std::filesystem::create_directories(dir / "checkpoints");
  atomic_write_file(dir / "manifest.json", log.manifest.to_json().dump(2) + "\n");

  std::string lines;
  for (const auto& rec : log.steps) {
    nlohmann::json j;
    j["t"] = rec.t;
    j["idx"] = rec.batch.indices;
    j["flip"] = rec.batch.flip_flags;
    j["lr"] = rec.lr;
    lines += j.dump();
    lines += '\n';
  }
  atomic_write_file(dir / "steps.jsonl", lines);

  for (const auto& [t, params] : log.checkpoints) {
    write_param_blob(dir / "checkpoints" / ("ckpt_" + std::to_string(t) + ".bin"), t,
                     params);
  }
  for (const auto& [t, vel] : log.velocity_checkpoints) {
    write_param_blob(dir / "checkpoints" / ("vel_" + std::to_string(t) + ".bin"), t, vel);
  }
}

PoLLog read_log(const std::filesystem::path& dir) {
  PoLLog log;
  log.manifest =
      PoLManifest::from_json(nlohmann::json::parse(read_file_text(dir / "manifest.json")));

  std::istringstream steps_in(read_file_text(dir / "steps.jsonl"));
  std::string line;
  while (std::getline(steps_in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    StepRecord rec;
    rec.t = j.at("t").get<long long>();
    rec.batch = MiniBatchSpec::make(j.at("idx").get<std::vector<std::uint32_t>>(),
                                    j.at("flip").get<std::vector<std::uint8_t>>());
    rec.lr = j.at("lr").get<double>();
    log.steps.push_back(std::move(rec));
  }

  const long long tau = log.manifest.hp.total_steps;
  const long long interval = log.manifest.checkpoint_interval;
  std::vector<long long> keys{0};
  for (long long t = interval; t < tau; t += interval) keys.push_back(t);
  keys.push_back(tau);
  for (const long long t : keys) {
    const auto path = dir / "checkpoints" / ("ckpt_" + std::to_string(t) + ".bin");
    auto values = read_param_blob(path, t);
    log.checkpoints.emplace(t, std::move(values));
    if (log.manifest.hp.momentum != 0.0) {
      const auto vpath = dir / "checkpoints" / ("vel_" + std::to_string(t) + ".bin");
      log.velocity_checkpoints.emplace(t, read_param_blob(vpath, t));
    }
  }
  log.validate();
  return log;
}

}  // namespace repud
