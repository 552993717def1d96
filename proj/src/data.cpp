#include "repud/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <stdexcept>

namespace repud {

void Dataset::validate() const {
  if (n < 1) throw std::invalid_argument("dataset: n < 1");
  if (classes < 2) throw std::invalid_argument("dataset: classes < 2");
  if (features.size() != n * dim) throw std::invalid_argument("dataset: feature size");
  if (labels.size() != n) throw std::invalid_argument("dataset: label count");
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= classes) {
      throw std::invalid_argument("dataset: label out of range");
    }
  }
  for (const double v : features) {
    if (!std::isfinite(v)) throw std::invalid_argument("dataset: non-finite feature");
  }
  if (shape.valid() && shape.pixel_count() != dim) {
    throw std::invalid_argument("dataset: shape does not match dim");
  }
}

MiniBatchSpec MiniBatchSpec::make(std::vector<std::uint32_t> idx,
                                  std::vector<std::uint8_t> flags) {
  if (idx.size() != flags.size()) {
    throw std::invalid_argument("batch: index/flag size mismatch");
  }
  // canonical ascending order; gradient summation relies on it
  std::vector<std::size_t> order(idx.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return idx[a] < idx[b]; });
  MiniBatchSpec out;
  out.indices.reserve(idx.size());
  out.flip_flags.reserve(idx.size());
  for (const std::size_t o : order) {
    out.indices.push_back(idx[o]);
    out.flip_flags.push_back(flags[o] ? 1 : 0);
  }
  for (std::size_t i = 1; i < out.indices.size(); ++i) {
    if (out.indices[i] == out.indices[i - 1]) {
      throw std::invalid_argument("batch: duplicate index");
    }
  }
  return out;
}

MiniBatchSpec MiniBatchSpec::make_plain(std::vector<std::uint32_t> idx) {
  std::vector<std::uint8_t> flags(idx.size(), 0);
  return make(std::move(idx), std::move(flags));
}

bool MiniBatchSpec::contains(std::uint32_t sample) const {
  return std::binary_search(indices.begin(), indices.end(), sample);
}

bool MiniBatchSpec::intersects(const std::vector<std::uint32_t>& sorted) const {
  auto a = indices.begin();
  auto b = sorted.begin();
  while (a != indices.end() && b != sorted.end()) {
    if (*a < *b) {
      ++a;
    } else if (*b < *a) {
      ++b;
    } else {
      return true;
    }
  }
  return false;
}

std::uint16_t SplitPlan::split_of(std::size_t group, long long t) const {
  if (t < 1 || static_cast<std::size_t>(t) > assignment.size()) {
    throw std::out_of_range("split plan: step out of range");
  }
  return assignment[static_cast<std::size_t>(t - 1)][group];
}

std::vector<std::uint32_t> SplitPlan::split_members(long long t,
                                                    std::uint16_t k) const {
  std::vector<std::uint32_t> out;
  out.reserve(n / split_count);
  const auto& at = assignment[static_cast<std::size_t>(t - 1)];
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (at[g] == k) {
      out.insert(out.end(), groups[g].begin(), groups[g].end());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

void SplitPlan::validate() const {
  if (group_size * split_count == 0 || n % (group_size * split_count) != 0) {
    throw std::invalid_argument("split plan: lambda*kappa must divide n");
  }
  if (groups.size() != n / group_size) {
    throw std::invalid_argument("split plan: group count");
  }
  std::vector<bool> seen(n, false);
  for (const auto& g : groups) {
    if (g.size() != group_size) throw std::invalid_argument("split plan: group size");
    for (const auto i : g) {
      if (i >= n || seen[i]) throw std::invalid_argument("split plan: bad group member");
      seen[i] = true;
    }
  }
  const std::size_t groups_per_split = groups.size() / split_count;
  for (const auto& at : assignment) {
    std::vector<std::size_t> counts(split_count, 0);
    for (const auto k : at) {
      if (k >= split_count) throw std::invalid_argument("split plan: bad split id");
      counts[k]++;
    }
    for (const auto c : counts) {
      if (c != groups_per_split) {
        throw std::invalid_argument("split plan: splits not equi-sized");
      }
    }
  }
}

namespace {

std::uint32_t read_be32(const std::uint8_t* p) {
  return (static_cast<std::uint32_t>(p[0]) << 24) |
         (static_cast<std::uint32_t>(p[1]) << 16) |
         (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images_path,
                 const std::filesystem::path& labels_path) {
  const auto img = read_file_bytes(images_path);
  const auto lab = read_file_bytes(labels_path);
  if (img.size() < 16) throw std::runtime_error("idx: truncated image header");
  if (lab.size() < 8) throw std::runtime_error("idx: truncated label header");
  if (read_be32(img.data()) != 0x00000803u) {
    throw std::runtime_error("idx: bad image magic");
  }
  if (read_be32(lab.data()) != 0x00000801u) {
    throw std::runtime_error("idx: bad label magic");
  }
  const std::size_t n_img = read_be32(img.data() + 4);
  const std::size_t rows = read_be32(img.data() + 8);
  const std::size_t cols = read_be32(img.data() + 12);
  const std::size_t n_lab = read_be32(lab.data() + 4);
  if (n_img != n_lab) throw std::runtime_error("idx: image/label count mismatch");
  const std::size_t dim = rows * cols;
  if (img.size() != 16 + n_img * dim) throw std::runtime_error("idx: truncated image data");
  if (lab.size() != 8 + n_lab) throw std::runtime_error("idx: truncated label data");

  Dataset ds;
  ds.n = n_img;
  ds.dim = dim;
  ds.shape = {static_cast<int>(rows), static_cast<int>(cols), 1};
  ds.features.resize(n_img * dim);
  ds.labels.resize(n_img);
  int max_label = 0;
  for (std::size_t i = 0; i < n_img * dim; ++i) {
    ds.features[i] = static_cast<double>(img[16 + i]) / 255.0;
  }
  for (std::size_t i = 0; i < n_lab; ++i) {
    ds.labels[i] = lab[8 + i];
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.classes = max_label + 1;
  ds.validate();
  return ds;
}

Dataset synth_gaussian(std::size_t n, std::size_t d, int c, std::uint64_t seed,
                       double class_separation) {
  if (n < static_cast<std::size_t>(c)) throw std::invalid_argument("synth: n < c");
  Dataset ds;
  ds.n = n;
  ds.dim = d;
  ds.classes = c;
  ds.seed = seed;
  ds.features.resize(n * d);
  ds.labels.resize(n);

  Rng rng = Rng::stream(seed, 0x5b0b5);
  // class means at separation/sqrt(2) along distinct directions, so any two
  // means are exactly class_separation apart when c <= d
  std::vector<std::vector<double>> means(static_cast<std::size_t>(c),
                                         std::vector<double>(d, 0.0));
  const double r = class_separation / std::sqrt(2.0);
  for (int k = 0; k < c; ++k) {
    if (static_cast<std::size_t>(k) < d) {
      means[static_cast<std::size_t>(k)][static_cast<std::size_t>(k)] = r;
    } else {
      for (std::size_t j = 0; j < d; ++j) {
        means[static_cast<std::size_t>(k)][j] = rng.normal();
      }
      double norm = 0.0;
      for (const double v : means[static_cast<std::size_t>(k)]) norm += v * v;
      norm = std::sqrt(std::max(norm, 1e-12));
      for (auto& v : means[static_cast<std::size_t>(k)]) v *= r / norm;
    }
  }

  // balanced labels (counts differ by at most 1), shuffled order
  std::vector<int> label_pool(n);
  for (std::size_t i = 0; i < n; ++i) label_pool[i] = static_cast<int>(i % c);
  rng.shuffle(label_pool);

  for (std::size_t i = 0; i < n; ++i) {
    const int y = label_pool[i];
    ds.labels[i] = y;
    double* row = ds.features.data() + i * d;
    const auto& mu = means[static_cast<std::size_t>(y)];
    for (std::size_t j = 0; j < d; ++j) {
      row[j] = mu[j] + rng.normal();
    }
  }
  ds.validate();
  return ds;
}

SubspaceData synth_subspace(std::size_t n, std::size_t d, std::uint64_t seed) {
  if (d < 2 || n < 3) throw std::invalid_argument("synth_subspace: need d >= 2, n >= 3");
  SubspaceData out;
  Dataset& ds = out.data;
  ds.n = n;
  ds.dim = d;
  ds.classes = 2;
  ds.seed = seed;
  ds.features.assign(n * d, 0.0);
  ds.labels.resize(n);

  Rng rng = Rng::stream(seed, 0x5b5);
  // x1 off the subspace: final coordinate bounded away from zero
  double* x1 = ds.features.data();
  for (std::size_t j = 0; j + 1 < d; ++j) x1[j] = rng.normal();
  const double off = rng.uniform(0.5, 1.5);
  x1[d - 1] = rng.bernoulli(0.5) ? off : -off;
  ds.labels[0] = rng.bernoulli(0.5) ? 1 : 0;  // any 0/1 label differs from 0.5

  for (std::size_t i = 1; i < n; ++i) {
    double* row = ds.features.data() + i * d;
    for (std::size_t j = 0; j + 1 < d; ++j) row[j] = rng.normal();
    row[d - 1] = 0.0;  // exactly on Gamma
    ds.labels[i] = rng.bernoulli(0.5) ? 1 : 0;
  }

  out.outlier_index = 0;
  out.basis.assign(d - 1, std::vector<double>(d, 0.0));
  for (std::size_t j = 0; j + 1 < d; ++j) out.basis[j][j] = 1.0;
  ds.validate();
  return out;
}

void apply_flip(double* features, std::size_t rows, std::size_t dim,
                const ImageShape& shape, const std::uint8_t* flags) {
  bool any = false;
  for (std::size_t i = 0; i < rows; ++i) any = any || flags[i];
  if (!any) return;
  if (!shape.valid() || shape.pixel_count() != dim) {
    throw std::invalid_argument("apply_flip: flip flag set on non-image features");
  }
  const std::size_t h = static_cast<std::size_t>(shape.height);
  const std::size_t w = static_cast<std::size_t>(shape.width);
  const std::size_t ch = static_cast<std::size_t>(shape.channels);
  for (std::size_t i = 0; i < rows; ++i) {
    if (!flags[i]) continue;
    double* img = features + i * dim;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w / 2; ++x) {
        for (std::size_t c = 0; c < ch; ++c) {
          std::swap(img[(y * w + x) * ch + c], img[(y * w + (w - 1 - x)) * ch + c]);
        }
      }
    }
  }
}

std::vector<double> gather_batch(const Dataset& ds, const MiniBatchSpec& batch) {
  std::vector<double> out(batch.size() * ds.dim);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const std::uint32_t idx = batch.indices[i];
    if (idx >= ds.n) throw std::out_of_range("gather_batch: index out of range");
    std::memcpy(out.data() + i * ds.dim, ds.row(idx), ds.dim * sizeof(double));
  }
  apply_flip(out.data(), batch.size(), ds.dim, ds.shape, batch.flip_flags.data());
  return out;
}

namespace {

BatchSchedule schedule_impl(std::size_t n, std::size_t b, std::size_t steps,
                            std::uint64_t seed, bool augment) {
  if (b < 1 || b > n) throw std::invalid_argument("schedule: bad batch size");
  const std::size_t per_epoch = n / b;  // remainder dropped
  if (per_epoch == 0) throw std::invalid_argument("schedule: b > n");
  BatchSchedule sched;
  sched.seed = seed;
  sched.batches.reserve(steps);
  Rng perm_rng = Rng::stream(seed, 0x9e0c4);
  Rng flip_rng = Rng::stream(seed, 0xf11b);
  std::vector<std::uint32_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<std::uint32_t>(i);
  while (sched.batches.size() < steps) {
    perm_rng.shuffle(order);
    for (std::size_t k = 0; k < per_epoch && sched.batches.size() < steps; ++k) {
      std::vector<std::uint32_t> idx(order.begin() + static_cast<std::ptrdiff_t>(k * b),
                                     order.begin() + static_cast<std::ptrdiff_t>((k + 1) * b));
      std::vector<std::uint8_t> flags(b, 0);
      if (augment) {
        for (auto& f : flags) f = flip_rng.bernoulli(0.5) ? 1 : 0;
      }
      sched.batches.push_back(MiniBatchSpec::make(std::move(idx), std::move(flags)));
    }
  }
  return sched;
}

}  // namespace

BatchSchedule make_schedule(std::size_t n, std::size_t b, std::size_t epochs,
                            std::uint64_t seed, bool augment) {
  return schedule_impl(n, b, (n / b) * epochs, seed, augment);
}

BatchSchedule make_schedule_steps(std::size_t n, std::size_t b, std::size_t steps,
                                  std::uint64_t seed, bool augment) {
  return schedule_impl(n, b, steps, seed, augment);
}

std::vector<MiniBatchSpec> make_independent_batches(std::size_t n, std::size_t b,
                                                    std::size_t steps,
                                                    std::uint64_t seed,
                                                    bool augment) {
  if (b < 1 || b > n) throw std::invalid_argument("independent batches: bad batch size");
  Rng rng = Rng::stream(seed, 0x1dd);
  std::vector<MiniBatchSpec> out;
  out.reserve(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    auto idx = rng.sample_distinct(n, b);
    std::vector<std::uint8_t> flags(b, 0);
    if (augment) {
      for (auto& f : flags) f = rng.bernoulli(0.5) ? 1 : 0;
    }
    out.push_back(MiniBatchSpec::make(std::move(idx), std::move(flags)));
  }
  return out;
}

SplitPlan make_split_plan(std::size_t n, std::size_t group_size,
                          std::size_t split_count, std::size_t steps,
                          std::uint64_t seed) {
  if (group_size < 1 || split_count < 1 || n % (group_size * split_count) != 0) {
    throw std::invalid_argument("split plan: lambda*kappa must divide n");
  }
  if (split_count > 0xffff) throw std::invalid_argument("split plan: kappa too large");
  SplitPlan plan;
  plan.n = n;
  plan.group_size = group_size;
  plan.split_count = split_count;
  plan.seed = seed;

  const std::size_t group_count = n / group_size;
  Rng rng = Rng::stream(seed, 0x9409b);

  // static groups: chunk a seeded permutation of the sample indices
  std::vector<std::uint32_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<std::uint32_t>(i);
  rng.shuffle(order);
  plan.groups.resize(group_count);
  plan.group_of.resize(n);
  for (std::size_t g = 0; g < group_count; ++g) {
    auto& grp = plan.groups[g];
    grp.assign(order.begin() + static_cast<std::ptrdiff_t>(g * group_size),
               order.begin() + static_cast<std::ptrdiff_t>((g + 1) * group_size));
    std::sort(grp.begin(), grp.end());
    for (const auto i : grp) plan.group_of[i] = static_cast<std::uint32_t>(g);
  }

  // per step, deal a fresh permutation of group ids round-robin into splits
  const std::size_t groups_per_split = group_count / split_count;
  std::vector<std::uint32_t> gids(group_count);
  for (std::size_t g = 0; g < group_count; ++g) gids[g] = static_cast<std::uint32_t>(g);
  plan.assignment.resize(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    rng.shuffle(gids);
    auto& at = plan.assignment[t];
    at.resize(group_count);
    for (std::size_t pos = 0; pos < group_count; ++pos) {
      at[gids[pos]] = static_cast<std::uint16_t>(pos / groups_per_split);
    }
  }
  return plan;
}

double dist_to_subspace(const std::vector<double>& x,
                        const std::vector<std::vector<double>>& basis) {
  if (basis.empty()) return l2_norm(x);
  const std::size_t d = x.size();
  const std::size_t m = basis.size();
  for (const auto& b : basis) {
    if (b.size() != d) throw std::invalid_argument("dist_to_subspace: dim mismatch");
  }
  // solve (B^T B) c = B^T x, then residual = x - B c
  std::vector<double> gram(m * m, 0.0);
  std::vector<double> rhs(m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = i; j < m; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += basis[i][k] * basis[j][k];
      gram[i * m + j] = s;
      gram[j * m + i] = s;
    }
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += basis[i][k] * x[k];
    rhs[i] = s;
  }
  // Cholesky; failure means the basis is linearly dependent
  std::vector<double> chol(m * m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = gram[i * m + j];
      for (std::size_t k = 0; k < j; ++k) s -= chol[i * m + k] * chol[j * m + k];
      if (i == j) {
        if (s <= 1e-12) throw std::invalid_argument("dist_to_subspace: degenerate basis");
        chol[i * m + i] = std::sqrt(s);
      } else {
        chol[i * m + j] = s / chol[j * m + j];
      }
    }
  }
  std::vector<double> y(m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double s = rhs[i];
    for (std::size_t k = 0; k < i; ++k) s -= chol[i * m + k] * y[k];
    y[i] = s / chol[i * m + i];
  }
  std::vector<double> coef(m, 0.0);
  for (std::size_t ii = m; ii-- > 0;) {
    double s = y[ii];
    for (std::size_t k = ii + 1; k < m; ++k) s -= chol[k * m + ii] * coef[k];
    coef[ii] = s / chol[ii * m + ii];
  }
  double dist_sq = 0.0;
  for (std::size_t k = 0; k < d; ++k) {
    double proj = 0.0;
    for (std::size_t i = 0; i < m; ++i) proj += coef[i] * basis[i][k];
    const double r = x[k] - proj;
    dist_sq += r * r;
  }
  return std::sqrt(std::max(dist_sq, 0.0));
}

namespace {
constexpr std::uint32_t kDatasetMagic = 0x53445052u;  // "RPDS" little-endian
constexpr std::uint32_t kDatasetVersion = 1;
}  // namespace

void write_dataset(const Dataset& ds, const std::filesystem::path& path) {
  ds.validate();
  std::vector<std::uint8_t> out;
  out.reserve(64 + ds.features.size() * 8 + ds.n * 2);
  put_u32le(out, kDatasetMagic);
  put_u32le(out, kDatasetVersion);
  put_u64le(out, ds.n);
  put_u64le(out, ds.dim);
  put_u32le(out, static_cast<std::uint32_t>(ds.classes));
  put_u64le(out, ds.seed);
  put_u32le(out, static_cast<std::uint32_t>(ds.shape.height));
  put_u32le(out, static_cast<std::uint32_t>(ds.shape.width));
  put_u32le(out, static_cast<std::uint32_t>(ds.shape.channels));
  for (const double v : ds.features) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64le(out, bits);
  }
  for (const int y : ds.labels) {
    out.push_back(static_cast<std::uint8_t>(y & 0xff));
    out.push_back(static_cast<std::uint8_t>((y >> 8) & 0xff));
  }
  const std::uint32_t crc = crc32(out.data(), out.size());
  put_u32le(out, crc);
  atomic_write_file(path, out.data(), out.size());
}

Dataset read_dataset(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  if (bytes.size() < 48 + 4) throw std::runtime_error("dataset file: truncated");
  const std::uint32_t stored_crc = get_u32le(bytes.data() + bytes.size() - 4);
  if (crc32(bytes.data(), bytes.size() - 4) != stored_crc) {
    throw std::runtime_error("dataset file: checksum failure");
  }
  const std::uint8_t* p = bytes.data();
  if (get_u32le(p) != kDatasetMagic) throw std::runtime_error("dataset file: bad magic");
  if (get_u32le(p + 4) != kDatasetVersion) {
    throw std::runtime_error("dataset file: unsupported version");
  }
  Dataset ds;
  ds.n = get_u64le(p + 8);
  ds.dim = get_u64le(p + 16);
  ds.classes = static_cast<int>(get_u32le(p + 24));
  ds.seed = get_u64le(p + 28);
  ds.shape.height = static_cast<int>(get_u32le(p + 36));
  ds.shape.width = static_cast<int>(get_u32le(p + 40));
  ds.shape.channels = static_cast<int>(get_u32le(p + 44));
  const std::size_t expect = 48 + ds.n * ds.dim * 8 + ds.n * 2 + 4;
  if (bytes.size() != expect) throw std::runtime_error("dataset file: size mismatch");
  ds.features.resize(ds.n * ds.dim);
  const std::uint8_t* fp = p + 48;
  for (std::size_t i = 0; i < ds.features.size(); ++i) {
    const std::uint64_t bits = get_u64le(fp + i * 8);
    std::memcpy(&ds.features[i], &bits, 8);
  }
  const std::uint8_t* lp = fp + ds.features.size() * 8;
  ds.labels.resize(ds.n);
  for (std::size_t i = 0; i < ds.n; ++i) {
    ds.labels[i] = static_cast<int>(lp[2 * i]) | (static_cast<int>(lp[2 * i + 1]) << 8);
  }
  ds.validate();
  return ds;
}

}  // namespace repud
