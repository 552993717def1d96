#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "repud/common.hpp"

namespace repud {

struct ImageShape {
  int height = 0;
  int width = 0;
  int channels = 0;
  bool valid() const { return height > 0 && width > 0 && channels > 0; }
  std::size_t pixel_count() const {
    return static_cast<std::size_t>(height) * width * channels;
  }
  bool operator==(const ImageShape&) const = default;
};

// Immutable after construction; rows are features[i*dim .. i*dim+dim).
struct Dataset {
  std::vector<double> features;
  std::vector<int> labels;
  std::size_t n = 0;
  std::size_t dim = 0;
  int classes = 0;
  std::uint64_t seed = 0;
  ImageShape shape{};  // zeroed when features are not images

  const double* row(std::size_t i) const { return features.data() + i * dim; }
  void validate() const;
};

// A batch is a set: indices strictly ascending, one flip flag per index.
struct MiniBatchSpec {
  std::vector<std::uint32_t> indices;
  std::vector<std::uint8_t> flip_flags;

  static MiniBatchSpec make(std::vector<std::uint32_t> idx,
                            std::vector<std::uint8_t> flags);
  static MiniBatchSpec make_plain(std::vector<std::uint32_t> idx);
  std::size_t size() const { return indices.size(); }
  bool contains(std::uint32_t sample) const;
  bool intersects(const std::vector<std::uint32_t>& sorted) const;
  bool operator==(const MiniBatchSpec&) const = default;
};

struct BatchSchedule {
  std::vector<MiniBatchSpec> batches;
  std::uint64_t seed = 0;
};

// Static λ-groups plus a per-step assignment of groups to κ splits.
struct SplitPlan {
  std::size_t n = 0;
  std::size_t group_size = 0;   // λ
  std::size_t split_count = 0;  // κ
  std::uint64_t seed = 0;
  std::vector<std::vector<std::uint32_t>> groups;  // n/λ groups, sorted indices
  std::vector<std::uint32_t> group_of;             // sample -> group id
  // assignment[t][g] = split id of group g at step t+1 (steps are 1-based)
  std::vector<std::vector<std::uint16_t>> assignment;

  std::size_t group_count() const { return groups.size(); }
  std::size_t step_count() const { return assignment.size(); }
  std::uint16_t split_of(std::size_t group, long long t) const;
  // all sample indices of split k at step t, ascending
  std::vector<std::uint32_t> split_members(long long t, std::uint16_t k) const;
  void validate() const;
};

Dataset load_idx(const std::filesystem::path& images_path,
                 const std::filesystem::path& labels_path);

Dataset synth_gaussian(std::size_t n, std::size_t d, int c, std::uint64_t seed,
                       double class_separation);

struct SubspaceData {
  Dataset data;
  std::size_t outlier_index = 0;                  // always 0 by construction
  std::vector<std::vector<double>> basis;         // d-1 coordinate vectors
};
SubspaceData synth_subspace(std::size_t n, std::size_t d, std::uint64_t seed);

// In-place horizontal flip of flagged rows; errors if a flag is set on
// non-image features.
void apply_flip(double* features, std::size_t rows, std::size_t dim,
                const ImageShape& shape, const std::uint8_t* flags);

// Copies batch rows out of the dataset and applies the batch's flip flags.
std::vector<double> gather_batch(const Dataset& ds, const MiniBatchSpec& batch);

BatchSchedule make_schedule(std::size_t n, std::size_t b, std::size_t epochs,
                            std::uint64_t seed, bool augment);
// Same scheme truncated/extended to an exact number of steps.
BatchSchedule make_schedule_steps(std::size_t n, std::size_t b, std::size_t steps,
                                  std::uint64_t seed, bool augment);
// Batches drawn independently each step (distinct within a batch). This is
// the non-epoch SGD sampling style used as the uniformity baseline.
std::vector<MiniBatchSpec> make_independent_batches(std::size_t n, std::size_t b,
                                                    std::size_t steps,
                                                    std::uint64_t seed,
                                                    bool augment);

SplitPlan make_split_plan(std::size_t n, std::size_t group_size,
                          std::size_t split_count, std::size_t steps,
                          std::uint64_t seed);

double dist_to_subspace(const std::vector<double>& x,
                        const std::vector<std::vector<double>>& basis);

// Self-describing binary container (see docs/FORMATS.md).
void write_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset read_dataset(const std::filesystem::path& path);

}  // namespace repud
