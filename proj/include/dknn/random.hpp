#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <utility>

namespace dknn {

/// Mixes a parent seed with a name into an independent child seed.
/// Used for the named sub-seeds ("folds", "random-selection", "run") so
/// that a single top-level seed reproduces a whole experiment.
std::uint64_t derive_seed(std::uint64_t parent, std::string_view name) noexcept;
std::uint64_t derive_seed(std::uint64_t parent, std::string_view name, std::uint64_t index) noexcept;

/// Uniform draw in [0, bound). Unlike std::uniform_int_distribution the
/// result is identical across standard library implementations.
std::uint64_t uniform_below(std::mt19937_64& rng, std::uint64_t bound);

/// Portable Fisher-Yates shuffle.
template <class T>
void portable_shuffle(std::span<T> items, std::mt19937_64& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform_below(rng, i));
    using std::swap;
    swap(items[i - 1], items[j]);
  }
}

}  // namespace dknn
