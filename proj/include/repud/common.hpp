#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace repud {

// Thrown on malformed configs and CLI misuse; the CLI maps it to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Deterministic RNG. mt19937_64 gives a standardized bit stream; all
// distributions are implemented here (std:: distributions are
// implementation-defined and would break cross-platform reproducibility).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  // [0, 1)
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // unbiased integer in [0, n)
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::below: n == 0");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t r;
    do {
      r = next_u64();
    } while (r >= limit);
    return r % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller, one value per call
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // k distinct values from [0, n), in ascending order
  std::vector<std::uint32_t> sample_distinct(std::size_t n, std::size_t k);

  // independent sub-stream derived from (seed material, stream ids)
  static Rng stream(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

 private:
  std::mt19937_64 eng_;
};

std::uint64_t mix64(std::uint64_t a, std::uint64_t b);

// CRC-32 (IEEE, zlib-compatible)
std::uint32_t crc32(const void* data, std::size_t len);

// FNV-1a, used for content hashes embedded in reports
std::uint64_t fnv1a64(const void* data, std::size_t len);
std::uint64_t hash_file(const std::filesystem::path& p);

// Runs fn(i) for i in [begin, end) on up to `threads` workers. Results must
// go to disjoint slots; iteration-to-slot mapping is scheduling-independent.
void parallel_for(std::size_t begin, std::size_t end, int threads,
                  const std::function<void(std::size_t)>& fn);

int effective_threads(int requested);

enum class LogLevel { Error = 0, Warn = 1, Info = 2, Debug = 3 };
LogLevel log_level();  // from REPUDIATE_LOG_LEVEL, default warn
void log_msg(LogLevel level, const std::string& msg);
inline void log_error(const std::string& m) { log_msg(LogLevel::Error, m); }
inline void log_warn(const std::string& m) { log_msg(LogLevel::Warn, m); }
inline void log_info(const std::string& m) { log_msg(LogLevel::Info, m); }
inline void log_debug(const std::string& m) { log_msg(LogLevel::Debug, m); }

// Whole-file IO; writes go through a temp file + rename.
std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& p);
std::string read_file_text(const std::filesystem::path& p);
void atomic_write_file(const std::filesystem::path& p, const void* data,
                       std::size_t len);
void atomic_write_file(const std::filesystem::path& p, const std::string& text);

// little-endian scalar packing
void put_u32le(std::vector<std::uint8_t>& out, std::uint32_t v);
void put_u64le(std::vector<std::uint8_t>& out, std::uint64_t v);
std::uint32_t get_u32le(const std::uint8_t* p);
std::uint64_t get_u64le(const std::uint8_t* p);

double l2_distance(const std::vector<double>& a, const std::vector<double>& b);
double l2_norm(const std::vector<double>& a);

}  // namespace repud
