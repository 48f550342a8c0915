#ifndef MOECACHE_ML_POLICY_HPP
#define MOECACHE_ML_POLICY_HPP

#include "moecache/eviction_net.hpp"
#include "moecache/features.hpp"
#include "moecache/policies.hpp"

#include <algorithm>
#include <memory>
#include <optional>
#include <span>
#include <vector>

namespace moecache
{

/*
 * Victim: the resident, unpinned expert with the largest predicted distance.
 * Ties go to the smallest id.
 */
template <typename Scalar>
ExpertId ml_policy_evict(std::span<ExpertId const> resident, std::span<Scalar const> scores,
                         std::span<ExpertId const> pinned)
{
    std::optional<ExpertId> best;
    for (ExpertId e : resident) {
        if (std::find(pinned.begin(), pinned.end(), e) != pinned.end())
            continue;
        if (!best || scores[e] > scores[*best] || (scores[e] == scores[*best] && e < *best))
            best = e;
    }
    if (!best)
        throw NoEvictable("ml: every resident expert is pinned");
    return *best;
}

/*
 * Learned eviction. Before each access group the feature tracker advances by
 * the group's routed sets and the net scores all experts once; misses on a
 * full cache then evict the expert with the largest predicted distance.
 */
class MlCache : public CachePolicy
{
public:
    MlCache(std::size_t capacity, std::size_t num_experts, std::shared_ptr<EvictionNet<float> const> net,
            bool include_prefill_features = true)
        : CachePolicy(capacity, num_experts)
        , net_(std::move(net))
        , tracker_(num_experts)
        , features_(2 * num_experts, 0.0f)
        , scores_(num_experts, 0.0f)
        , include_prefill_(include_prefill_features)
    {
        if (!net_)
            throw MissingCheckpoint("ml policy requires a trained net");
        if (net_->num_experts() != num_experts)
            throw ShapeMismatch("net is for E = " + std::to_string(net_->num_experts()) + ", trace has E = " +
                                std::to_string(num_experts));
    }

    std::string name() const override { return "ml"; }

    void begin_sequence() override { tracker_.reset(); }

    FeatureTracker const & tracker() const { return tracker_; }
    std::span<float const> scores() const { return scores_; }

protected:
    void on_event(std::span<std::vector<ExpertId> const> routings, Phase phase) override
    {
        if (phase == Phase::decode || include_prefill_)
            for (auto const & r : routings)
                tracker_.update(r);
        normalize_into<float>(tracker_, features_);
        scores_ = net_->forward(std::span<float const>(features_));
    }

    void on_hit(ExpertId, AccessContext const &) override {}
    void on_insert(ExpertId, AccessContext const &) override {}

    ExpertId choose_victim(ExpertId, AccessContext const &) override
    {
        std::optional<ExpertId> best;
        for (ExpertId e = 0; e < num_experts(); ++e) {
            if (!evictable(e))
                continue;
            if (!best || scores_[e] > scores_[*best])
                best = e;
        }
        if (!best)
            throw NoEvictable("ml: every resident expert is pinned");
        return *best;
    }

private:
    std::shared_ptr<EvictionNet<float> const> net_;
    FeatureTracker tracker_;
    std::vector<float> features_;
    std::vector<float> scores_;
    bool include_prefill_;
};

} // namespace moecache

#endif
