#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <initializer_list>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace hcsc {

using Vector = Eigen::VectorXd;
/// Column-major matrix; batches of vectors are stored one vector per column.
using Matrix = Eigen::MatrixXd;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// Invalid user-supplied configuration (bad sizes, inconsistent toggles, ...).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller broke an operation's precondition (shape mismatch, bad level, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Non-finite values showed up where finite ones are required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed binary file. Carries the byte offset where decoding failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

/// Filesystem failure; the message names the path.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Random streams
// ---------------------------------------------------------------------------

/// Tags for named substreams. Every stochastic component draws from its own
/// substream so results do not depend on call order or thread scheduling.
enum class Stream : std::uint64_t {
  kGenerate = 1,
  kAugment = 2,
  kInstanceSelect = 3,
  kProtoSelect = 4,
  kKMeans = 5,
  kShuffle = 6,
  kInit = 7,
  kQueueInit = 8,
  kSplit = 9,
  kProbe = 10,
};

std::uint64_t splitmix64(std::uint64_t x) noexcept;

/// Seeded pseudo-random stream (mt19937_64 underneath).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Independent stream keyed by (seed, tag, a, b, c).
  static Rng substream(std::uint64_t seed, Stream tag, std::uint64_t a = 0,
                       std::uint64_t b = 0, std::uint64_t c = 0);

  std::uint64_t next() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double normal() { return normal_(engine_); }
  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n);
  bool bernoulli(double p) { return uniform() < p; }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

// ---------------------------------------------------------------------------
// Small utilities
// ---------------------------------------------------------------------------

/// Rounds every coefficient to the nearest float. Training state is kept
/// float-representable so f32 checkpoints restore it exactly.
void round_to_f32(Matrix& m);
void round_to_f32(Vector& v);

bool all_finite(const Matrix& m);
bool all_finite(const Vector& v);

/// Numerically stable log(sum(exp(x))).
double log_sum_exp(const Vector& x);
/// Softmax with max subtraction.
Vector softmax(const Vector& logits);

/// Shortest round-trippable decimal for a double.
std::string format_double(double x);
std::string join(const std::vector<std::string>& parts, std::string_view sep);
std::vector<std::string> split(std::string_view text, char sep);

/// Worker count from an explicit value, HCSC_THREADS, or hardware concurrency.
std::size_t resolve_threads(std::size_t requested);

/// Runs body(begin, end) over contiguous chunks of [0, n). Chunking is a pure
/// function of (n, threads); callers write results into per-index slots.
void parallel_for(std::size_t n, std::size_t threads,
                  const std::function<void(std::size_t, std::size_t)>& body);

/// Writes bytes to a temp file next to `path`, then renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

/// Parses "key=value" lines (blank lines and '#' comments skipped), order kept.
std::vector<std::pair<std::string, std::string>> parse_kv_lines(std::string_view text);

}  // namespace hcsc
