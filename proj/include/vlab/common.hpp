#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace vlab {

// ---------------------------------------------------------------------------
// Error taxonomy. The CLI maps these onto its documented exit codes:
//   usage/config -> 2, threshold -> 3, data/hash/format -> 4, I/O -> 5.
// ---------------------------------------------------------------------------
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad flags, unparsable config file, invalid option combination.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Structural mismatch between tensor shapes or sequence layouts.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Out-of-range token id, class index, or slot.
class IndexError : public Error {
 public:
  using Error::Error;
};

// Softmax row with every entry masked.
class MaskError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced by an op, or non-finite gradients in the optimizer.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Sequence longer than the model capacity.
class CapacityError : public Error {
 public:
  using Error::Error;
};

// Malformed dataset / checkpoint / dump contents, hash mismatches.
class DataError : public Error {
 public:
  using Error::Error;
};

// Generator could not satisfy its constraints within the retry budget.
class GenError : public Error {
 public:
  using Error::Error;
};

// Degenerate evaluation request (e.g. empty denominator).
class EvalError : public Error {
 public:
  using Error::Error;
};

// Filesystem failures.
class IoError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Hashes
// ---------------------------------------------------------------------------

// FNV-1a, 64-bit: offset basis 14695981039346656037, prime 1099511628211.
inline uint64_t fnv1a64(std::string_view bytes, uint64_t h = 14695981039346656037ull) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// CRC-32 (IEEE 802.3): reflected, polynomial 0xEDB88320, init and final xor
// 0xFFFFFFFF. Table-driven; the checkpoint tests cross-check it against a
// bitwise reimplementation.
uint32_t crc32(const void* data, size_t len, uint32_t seed = 0);

// ---------------------------------------------------------------------------
// Small helpers shared by the file formats
// ---------------------------------------------------------------------------
std::string read_file(const std::filesystem::path& path);

// Writes via a temp file in the same directory, then renames over the target.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

std::vector<std::string> split(std::string_view s, char sep);

std::string hex_u64(uint64_t v);
uint64_t parse_hex_u64(std::string_view s);

// Exact binomial one-sided sign test: probability of >= wins successes in
// wins+losses fair coin flips. Ties are dropped by the caller; with no
// informative pairs the p-value is 1.
double sign_test_p(int wins, int losses);

}  // namespace vlab
