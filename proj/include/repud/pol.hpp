#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "repud/model.hpp"

#include "json.hpp"

namespace repud {

constexpr int kLogFormatVersion = 1;

nlohmann::json model_spec_to_json(const ModelSpec& s);
ModelSpec model_spec_from_json(const nlohmann::json& j);
nlohmann::json hyperparams_to_json(const Hyperparams& hp);
Hyperparams hyperparams_from_json(const nlohmann::json& j);

struct PoLManifest {
  ModelSpec spec;
  Hyperparams hp;
  std::uint64_t init_seed = 0;
  std::uint64_t schedule_seed = 0;
  std::size_t n = 0;
  bool augment = false;
  long long checkpoint_interval = 1;
  int format_version = kLogFormatVersion;

  void validate() const;
  nlohmann::json to_json() const;
  static PoLManifest from_json(const nlohmann::json& j);
};

struct StepRecord {
  long long t = 0;
  MiniBatchSpec batch;
  double lr = 0.0;
};

struct PoLLog {
  PoLManifest manifest;
  std::vector<StepRecord> steps;  // t = 1..tau, contiguous
  std::map<long long, ParamVector> checkpoints;
  std::map<long long, std::vector<double>> velocity_checkpoints;  // momentum runs

  long long tau() const { return manifest.hp.total_steps; }
  void validate() const;
  const ParamVector& checkpoint(long long t) const;
};

struct VerificationReport {
  struct Segment {
    long long from = 0;
    long long to = 0;
    double error = 0.0;
  };
  std::vector<Segment> segments;   // checked segments, in log order
  double max_error = 0.0;
  double epsilon = 0.0;
  bool pass = false;
  std::size_t segments_checked = 0;
  std::size_t segments_total = 0;

  nlohmann::json to_json() const;
};

struct TrainResult {
  PoLLog log;
  ParamVector final_params;
  double final_loss = 0.0;
};

// Runs the training loop described by the manifest and records the log.
// Plain Eq.-1 SGD when momentum, weight decay and scheduling are all off,
// the momentum/weight-decay/schedule variant otherwise.
TrainResult record_training(const Dataset& ds, const PoLManifest& manifest);

VerificationReport verify_full(const PoLLog& log, const Dataset& ds, double epsilon);

// Replays only the k segments with the largest checkpoint-to-checkpoint
// parameter movement.
VerificationReport verify_subset(const PoLLog& log, const Dataset& ds, double epsilon,
                                 std::size_t k);

void write_log(const PoLLog& log, const std::filesystem::path& dir);
PoLLog read_log(const std::filesystem::path& dir);

}  // namespace repud
