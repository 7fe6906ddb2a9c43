#include "dknn/error.hpp"
#include "dknn/hashing.hpp"
#include "dknn/random.hpp"

#include <openssl/evp.h>

#include <array>
#include <limits>

namespace dknn {

std::string_view error_code_name(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::MalformedRecord: return "MalformedRecord";
    case ErrorCode::DuplicateId: return "DuplicateId";
    case ErrorCode::EmptyText: return "EmptyText";
    case ErrorCode::TooFewDocuments: return "TooFewDocuments";
    case ErrorCode::TransportError: return "TransportError";
    case ErrorCode::BackendRefused: return "BackendRefused";
    case ErrorCode::UnparsableCompletion: return "UnparsableCompletion";
    case ErrorCode::LogprobsUnsupported: return "LogprobsUnsupported";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::UnknownDocId: return "UnknownDocId";
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::KTooLarge: return "KTooLarge";
    case ErrorCode::TargetInDemos: return "TargetInDemos";
    case ErrorCode::InvalidTemplate: return "InvalidTemplate";
    case ErrorCode::FingerprintMismatch: return "FingerprintMismatch";
    case ErrorCode::Io: return "Io";
    case ErrorCode::SchemaVersionMismatch: return "SchemaVersionMismatch";
    case ErrorCode::SelfPairing: return "SelfPairing";
    case ErrorCode::InsufficientPerLabel: return "InsufficientPerLabel";
    case ErrorCode::DegenerateLabels: return "DegenerateLabels";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::MissingArtifact: return "MissingArtifact";
    case ErrorCode::ConfigError: return "ConfigError";
  }
  return "Unknown";
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t parent, std::string_view name) noexcept {
  return splitmix64(splitmix64(parent) ^ fnv1a(name));
}

std::uint64_t derive_seed(std::uint64_t parent, std::string_view name, std::uint64_t index) noexcept {
  return splitmix64(derive_seed(parent, name) ^ splitmix64(index + 0x51ed270b27ULL));
}

std::uint64_t uniform_below(std::mt19937_64& rng, std::uint64_t bound) {
  if (bound <= 1) return 0;
  // Rejection sampling removes modulo bias.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t draw = rng();
  while (draw >= limit) draw = rng();
  return draw % bound;
}

std::string sha256_hex(std::string_view data) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int length = 0;
  EVP_Digest(data.data(), data.size(), digest.data(), &length, EVP_sha256(), nullptr);
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(length * 2);
  for (unsigned int i = 0; i < length; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xF]);
  }
  return out;
}

}  // namespace dknn
