#ifndef MOECACHE_FEATURES_HPP
#define MOECACHE_FEATURES_HPP

#include "moecache/trace.hpp"

#include <algorithm>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

namespace moecache
{

/*
 * Recency r and frequency f of every expert of one layer. r counts the steps
 * since the last routing (1 = routed this step) and starts at infinity; f is
 * the number of steps the expert has been routed in.
 */
class FeatureTracker
{
public:
    static constexpr std::uint64_t infinity = std::numeric_limits<std::uint64_t>::max();

    FeatureTracker() = default;

    explicit FeatureTracker(std::size_t num_experts)
        : recency_(num_experts, infinity)
        , frequency_(num_experts, 0)
        , mark_(num_experts, 0)
    {
    }

    void reset()
    {
        std::fill(recency_.begin(), recency_.end(), infinity);
        std::fill(frequency_.begin(), frequency_.end(), 0);
        max_frequency_ = 0;
        steps_ = 0;
    }

    // One time step: routed experts get r = 1, f + 1; all others r + 1.
    void update(std::span<ExpertId const> routed)
    {
        ++steps_;
        for (ExpertId e : routed)
            mark_[e] = steps_;
        for (std::size_t e = 0; e < recency_.size(); ++e) {
            if (mark_[e] == steps_) {
                recency_[e] = 1;
                max_frequency_ = std::max(max_frequency_, ++frequency_[e]);
            } else if (recency_[e] != infinity) {
                ++recency_[e];
            }
        }
    }

    std::uint64_t recency(ExpertId e) const { return recency_[e]; }
    std::uint64_t frequency(ExpertId e) const { return frequency_[e]; }
    std::uint64_t max_frequency() const { return max_frequency_; }
    std::uint64_t steps() const { return steps_; }
    std::size_t num_experts() const { return recency_.size(); }

    friend bool operator==(FeatureTracker const & a, FeatureTracker const & b)
    {
        return a.recency_ == b.recency_ && a.frequency_ == b.frequency_ && a.max_frequency_ == b.max_frequency_;
    }

private:
    std::vector<std::uint64_t> recency_;
    std::vector<std::uint64_t> frequency_;
    std::vector<std::uint64_t> mark_;
    std::uint64_t max_frequency_ = 0;
    std::uint64_t steps_ = 0;
};

inline void update_features(FeatureTracker & tracker, std::span<ExpertId const> routed)
{
    tracker.update(routed);
}

/*
 * Network input [1/r (all experts) || f / max f (all experts)], length 2E.
 * Infinite recency maps to 0; a zero max frequency maps every f to 0.
 */
template <typename Scalar>
void normalize_into(FeatureTracker const & tracker, std::span<Scalar> out)
{
    auto const n = tracker.num_experts();
    auto const max_f = tracker.max_frequency();
    for (std::size_t e = 0; e < n; ++e) {
        auto const r = tracker.recency(static_cast<ExpertId>(e));
        out[e] = r == FeatureTracker::infinity ? Scalar(0) : Scalar(1) / static_cast<Scalar>(r);
        out[n + e] = max_f == 0 ? Scalar(0)
                                : static_cast<Scalar>(tracker.frequency(static_cast<ExpertId>(e))) /
                                      static_cast<Scalar>(max_f);
    }
}

template <typename Scalar = float>
std::vector<Scalar> normalize(FeatureTracker const & tracker)
{
    std::vector<Scalar> v(2 * tracker.num_experts());
    normalize_into<Scalar>(tracker, v);
    return v;
}

} // namespace moecache

#endif
