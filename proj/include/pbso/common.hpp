#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace pbso {

/// Half-open range [begin, end) of token indices.
struct Span {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end > begin ? end - begin : 0; }
  bool empty() const { return end <= begin; }
  bool contains(std::size_t k) const { return k >= begin && k < end; }
  friend bool operator==(const Span&, const Span&) = default;
};

/// Base for every error the library raises. `kind()` is the stable,
/// machine-readable name printed by the CLI.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

class MalformedTranscript : public Error {
 public:
  MalformedTranscript(const std::string& reason, std::size_t offset)
      : Error("MalformedTranscript",
              reason + " (at byte " + std::to_string(offset) + ")"),
        reason_(reason),
        offset_(offset) {}
  const std::string& reason() const noexcept { return reason_; }
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::string reason_;
  std::size_t offset_;
};

class InvariantViolation : public Error {
 public:
  explicit InvariantViolation(const std::string& what)
      : Error("InvariantViolation", what) {}
};

class InvalidConfig : public Error {
 public:
  explicit InvalidConfig(const std::string& what) : Error("InvalidConfig", what) {}
};

class LengthMismatch : public Error {
 public:
  LengthMismatch(std::size_t expected, std::size_t got)
      : Error("LengthMismatch", "expected " + std::to_string(expected) +
                                    " positions, got " + std::to_string(got)) {}
};

class NonFiniteLoss : public Error {
 public:
  explicit NonFiniteLoss(std::size_t token)
      : Error("NonFiniteLoss",
              "non-finite value at token " + std::to_string(token)),
        token_(token) {}
  std::size_t token() const noexcept { return token_; }

 private:
  std::size_t token_;
};

class TooLarge : public Error {
 public:
  explicit TooLarge(const std::string& what) : Error("TooLarge", what) {}
};

class VerifierUnavailable : public Error {
 public:
  VerifierUnavailable(std::string backend, const std::string& cause)
      : Error("VerifierUnavailable", backend + ": " + cause),
        backend_(std::move(backend)),
        cause_(cause) {}
  const std::string& backend() const noexcept { return backend_; }
  const std::string& cause() const noexcept { return cause_; }

 private:
  std::string backend_;
  std::string cause_;
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error("IoError", what) {}
};

// splitmix64 finalizer; the building block for counter-based seed streams.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Derives an independent stream seed from a root seed and a path of
/// counters: derive_seed(s, a, b) == mix64(mix64(mix64(s) ^ a) ^ b).
template <typename... Counters>
std::uint64_t derive_seed(std::uint64_t root, Counters... counters) {
  std::uint64_t s = mix64(root);
  ((s = mix64(s ^ static_cast<std::uint64_t>(counters))), ...);
  return s;
}

/// 64-bit FNV-1a. Used for content keys in caches and fixture tables.
inline std::uint64_t fnv1a(std::string_view data) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

}  // namespace pbso
