#ifndef MOECACHE_RANDOM_HPP
#define MOECACHE_RANDOM_HPP

#include <cstddef>
#include <cstdint>
#include <cmath>
#include <random>
#include <utility>

namespace moecache
{

// std::mt19937_64 is fully specified by the standard; the distributions in
// <random> are not. These helpers keep generated data identical across
// standard library implementations.
using Rng = std::mt19937_64;

inline double uniform01(Rng & rng)
{
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline std::size_t uniform_index(Rng & rng, std::size_t n)
{
    auto i = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n));
    return i < n ? i : n - 1;
}

// Box-Muller; one value per call.
inline double standard_normal(Rng & rng)
{
    double u1 = uniform01(rng);
    while (u1 <= 0.0)
        u1 = uniform01(rng);
    double const u2 = uniform01(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

template <typename T>
void shuffle(Rng & rng, T * first, std::size_t n)
{
    for (std::size_t i = n; i > 1; --i) {
        std::size_t j = uniform_index(rng, i);
        std::swap(first[i - 1], first[j]);
    }
}

} // namespace moecache

#endif
