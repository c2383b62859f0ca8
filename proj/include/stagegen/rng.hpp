#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <sstream>
#include <string>

#include "stagegen/error.hpp"

namespace stagegen {

using Rng = std::mt19937_64;

/// Derives an independent stream seed from a base seed and a stream tag.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over the combined value
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

template <class T>
void fill_normal(std::span<T> out, Rng& rng, double mean = 0.0, double stddev = 1.0) {
  std::normal_distribution<double> dist(mean, stddev);
  for (auto& v : out) v = static_cast<T>(dist(rng));
}

template <class T>
void fill_uniform(std::span<T> out, Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : out) v = static_cast<T>(dist(rng));
}

inline std::string serialize_rng(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

inline Rng deserialize_rng(const std::string& text) {
  Rng rng;
  std::istringstream is(text);
  is >> rng;
  if (is.fail()) throw FormatError("malformed RNG state");
  return rng;
}

/// Fisher-Yates shuffle driven by an explicit engine; std::shuffle's draw
/// pattern is implementation-defined, this one is not.
template <class V>
void deterministic_shuffle(V& items, Rng& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(items[i - 1], items[j]);
  }
}

}  // namespace stagegen
