#ifndef MOECACHE_POLICIES_HPP
#define MOECACHE_POLICIES_HPP

/*
 * Per-layer expert caches. A CachePolicy owns the resident set of one layer
 * and decides victims; the shared access() path handles hits, fills and the
 * pinning of experts already served by the current decode event.
 */

#include "moecache/errors.hpp"
#include "moecache/random.hpp"
#include "moecache/stream.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <list>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace moecache
{

struct AccessContext
{
    std::uint32_t layer = 0;
    std::uint64_t position = 0; // position in the layer's flattened stream
    std::uint64_t seq_id = 0;
    Phase phase = Phase::decode;
    std::uint64_t step = 0;
};

struct PolicyDecision
{
    std::optional<ExpertId> evicted;
    ExpertId loaded = 0;
    bool was_hit = false;

    friend bool operator==(PolicyDecision const &, PolicyDecision const &) = default;
};

class CachePolicy
{
public:
    CachePolicy(std::size_t capacity, std::size_t num_experts)
        : capacity_(capacity)
        , resident_(num_experts, 0)
        , pinned_(num_experts, 0)
    {
        if (capacity == 0)
            throw InvalidConfig("capacity", "must be >= 1");
    }

    virtual ~CachePolicy() = default;

    virtual std::string name() const = 0;

    // Called when a new independent sequence starts.
    virtual void begin_sequence() {}

    /*
     * Opens an access group. `routings` are the per-time-step routed sets the
     * group covers (used by policies that track features). Inside a decode
     * group every expert already served stays resident until end_event(); a
     * prefill union may exceed the capacity, so nothing is pinned there.
     */
    void begin_event(std::span<std::vector<ExpertId> const> routings, Phase phase)
    {
        pin_ = phase == Phase::decode;
        on_event(routings, phase);
    }

    void end_event()
    {
        for (ExpertId e : pinned_list_)
            pinned_[e] = 0;
        pinned_list_.clear();
        pin_ = false;
    }

    PolicyDecision access(ExpertId expert, AccessContext const & ctx)
    {
        PolicyDecision d;
        d.loaded = expert;
        if (resident_[expert]) {
            d.was_hit = true;
            on_hit(expert, ctx);
        } else {
            on_miss(expert, ctx);
            if (size_ == capacity_) {
                ExpertId victim = choose_victim(expert, ctx);
                if (victim >= resident_.size() || !resident_[victim] || pinned_[victim])
                    throw std::logic_error(name() + " chose a non-evictable victim");
                resident_[victim] = 0;
                --size_;
                d.evicted = victim;
            }
            resident_[expert] = 1;
            ++size_;
            on_insert(expert, ctx);
        }
        if (pin_ && !pinned_[expert]) {
            pinned_[expert] = 1;
            pinned_list_.push_back(expert);
        }
        return d;
    }

    bool resident(ExpertId e) const { return resident_[e] != 0; }
    bool pinned(ExpertId e) const { return pinned_[e] != 0; }
    bool evictable(ExpertId e) const { return resident_[e] && !pinned_[e]; }
    std::size_t size() const { return size_; }
    std::size_t capacity() const { return capacity_; }
    std::size_t num_experts() const { return resident_.size(); }

    std::vector<ExpertId> resident_set() const
    {
        std::vector<ExpertId> out;
        for (ExpertId e = 0; e < resident_.size(); ++e)
            if (resident_[e])
                out.push_back(e);
        return out;
    }

protected:
    virtual void on_event(std::span<std::vector<ExpertId> const>, Phase) {}
    virtual void on_hit(ExpertId expert, AccessContext const & ctx) = 0;
    virtual void on_miss(ExpertId, AccessContext const &) {}
    // Only called with a full cache; must return an evictable expert.
    virtual ExpertId choose_victim(ExpertId incoming, AccessContext const & ctx) = 0;
    virtual void on_insert(ExpertId expert, AccessContext const & ctx) = 0;

    // Evictable expert minimizing key(e); ties go to the smallest id.
    template <typename Key>
    ExpertId argmin_evictable(Key key) const
    {
        std::optional<ExpertId> best;
        decltype(key(ExpertId{})) best_key{};
        for (ExpertId e = 0; e < resident_.size(); ++e) {
            if (!evictable(e))
                continue;
            auto k = key(e);
            if (!best || k < best_key) {
                best = e;
                best_key = k;
            }
        }
        if (!best)
            throw NoEvictable(name() + ": every resident expert is pinned");
        return *best;
    }

private:
    std::size_t capacity_;
    std::size_t size_ = 0;
    std::vector<char> resident_;
    std::vector<char> pinned_;
    std::vector<ExpertId> pinned_list_;
    bool pin_ = false;
};

class LruCache : public CachePolicy
{
public:
    LruCache(std::size_t capacity, std::size_t num_experts)
        : CachePolicy(capacity, num_experts)
        , last_use_(num_experts, 0)
    {
    }

    std::string name() const override { return "lru"; }

protected:
    void on_hit(ExpertId e, AccessContext const &) override { last_use_[e] = ++clock_; }
    void on_insert(ExpertId e, AccessContext const &) override { last_use_[e] = ++clock_; }

    ExpertId choose_victim(ExpertId, AccessContext const &) override
    {
        return argmin_evictable([&](ExpertId e) { return last_use_[e]; });
    }

private:
    std::uint64_t clock_ = 0;
    std::vector<std::uint64_t> last_use_;
};

// Counts every access in the current sequence, including accesses to experts
// that were evicted since; counters restart with each sequence.
class LfuCache : public CachePolicy
{
public:
    LfuCache(std::size_t capacity, std::size_t num_experts)
        : CachePolicy(capacity, num_experts)
        , freq_(num_experts, 0)
    {
    }

    std::string name() const override { return "lfu"; }

    void begin_sequence() override { std::fill(freq_.begin(), freq_.end(), 0); }

protected:
    void on_hit(ExpertId e, AccessContext const &) override { ++freq_[e]; }
    void on_insert(ExpertId e, AccessContext const &) override { ++freq_[e]; }

    ExpertId choose_victim(ExpertId, AccessContext const &) override
    {
        return argmin_evictable([&](ExpertId e) { return freq_[e]; });
    }

private:
    std::vector<std::uint64_t> freq_;
};

class FifoCache : public CachePolicy
{
public:
    FifoCache(std::size_t capacity, std::size_t num_experts)
        : CachePolicy(capacity, num_experts)
        , inserted_(num_experts, 0)
    {
    }

    std::string name() const override { return "fifo"; }

protected:
    void on_hit(ExpertId, AccessContext const &) override {}
    void on_insert(ExpertId e, AccessContext const &) override { inserted_[e] = ++clock_; }

    ExpertId choose_victim(ExpertId, AccessContext const &) override
    {
        return argmin_evictable([&](ExpertId e) { return inserted_[e]; });
    }

private:
    std::uint64_t clock_ = 0;
    std::vector<std::uint64_t> inserted_;
};

/*
 * Adaptive Replacement Cache (Megiddo & Modha). T1/T2 hold resident experts
 * seen once / at least twice; B1/B2 are their ghost lists. Lists run from LRU
 * (front) to MRU (back). When the preferred list only holds pinned experts
 * the victim comes from the other list.
 */
class ArcCache : public CachePolicy
{
public:
    enum class Where : std::uint8_t
    {
        none,
        t1,
        t2,
        b1,
        b2,
    };

    ArcCache(std::size_t capacity, std::size_t num_experts)
        : CachePolicy(capacity, num_experts)
        , where_(num_experts, Where::none)
        , it_(num_experts)
    {
    }

    std::string name() const override { return "arc"; }

    std::size_t t1_size() const { return t1_.size(); }
    std::size_t t2_size() const { return t2_.size(); }
    std::size_t b1_size() const { return b1_.size(); }
    std::size_t b2_size() const { return b2_.size(); }
    double target() const { return p_; }

protected:
    void on_hit(ExpertId e, AccessContext const &) override { move_to(e, Where::t2); }

    ExpertId choose_victim(ExpertId x, AccessContext const &) override
    {
        double const c = static_cast<double>(capacity());
        double const n1 = static_cast<double>(b1_.size());
        double const n2 = static_cast<double>(b2_.size());
        if (where_[x] == Where::b1) {
            p_ = std::min(c, p_ + std::max(n2 / n1, 1.0));
            return replace(x);
        }
        if (where_[x] == Where::b2) {
            p_ = std::max(0.0, p_ - std::max(n1 / n2, 1.0));
            return replace(x);
        }
        if (t1_.size() + b1_.size() >= capacity()) {
            if (t1_.size() < capacity()) {
                drop_lru(b1_);
                return replace(x);
            }
            ExpertId victim = lru_evictable(t1_);
            unlink(victim);
            return victim;
        }
        if (t1_.size() + t2_.size() + b1_.size() + b2_.size() >= 2 * capacity())
            drop_lru(b2_);
        return replace(x);
    }

    void on_insert(ExpertId x, AccessContext const &) override
    {
        if (where_[x] == Where::b1 || where_[x] == Where::b2)
            move_to(x, Where::t2);
        else
            move_to(x, Where::t1);
    }

private:
    std::list<ExpertId> & list_of(Where w)
    {
        switch (w) {
        case Where::t1:
            return t1_;
        case Where::t2:
            return t2_;
        case Where::b1:
            return b1_;
        default:
            return b2_;
        }
    }

    void unlink(ExpertId e)
    {
        if (where_[e] != Where::none)
            list_of(where_[e]).erase(it_[e]);
        where_[e] = Where::none;
    }

    void move_to(ExpertId e, Where w)
    {
        unlink(e);
        auto & l = list_of(w);
        it_[e] = l.insert(l.end(), e);
        where_[e] = w;
    }

    void drop_lru(std::list<ExpertId> & l)
    {
        if (!l.empty())
            unlink(l.front());
    }

    std::optional<ExpertId> lru_evictable_opt(std::list<ExpertId> const & l) const
    {
        for (ExpertId e : l)
            if (evictable(e))
                return e;
        return std::nullopt;
    }

    ExpertId lru_evictable(std::list<ExpertId> const & l) const
    {
        if (auto e = lru_evictable_opt(l))
            return *e;
        if (auto e = lru_evictable_opt(&l == &t1_ ? t2_ : t1_))
            return *e;
        throw NoEvictable("arc: every resident expert is pinned");
    }

    ExpertId replace(ExpertId x)
    {
        double const n1 = static_cast<double>(t1_.size());
        bool from_t1 = !t1_.empty() && (n1 > p_ || (where_[x] == Where::b2 && n1 == p_));
        auto victim = lru_evictable_opt(from_t1 ? t1_ : t2_);
        if (!victim) {
            from_t1 = !from_t1;
            victim = lru_evictable_opt(from_t1 ? t1_ : t2_);
        }
        if (!victim)
            throw NoEvictable("arc: every resident expert is pinned");
        move_to(*victim, from_t1 ? Where::b1 : Where::b2);
        return *victim;
    }

    std::list<ExpertId> t1_, t2_, b1_, b2_;
    std::vector<Where> where_;
    std::vector<std::list<ExpertId>::iterator> it_;
    double p_ = 0.0;
};

/*
 * LeCaR regret update. A request that hits the LRU ghost history means the
 * LRU expert was wrong, so the LFU weight grows by exp(lambda * discount^t),
 * where t is the time the entry spent in the history; and vice versa.
 */
struct LecarWeights
{
    double lru = 0.5;
    double lfu = 0.5;
};

enum class GhostList
{
    lru,
    lfu,
};

inline constexpr double lecar_weight_floor = 1e-12;

inline void lecar_update(LecarWeights & w, GhostList hit_in, std::uint64_t t, double learning_rate,
                         double discount)
{
    double const reward = std::pow(discount, static_cast<double>(t));
    if (hit_in == GhostList::lru)
        w.lfu *= std::exp(learning_rate * reward);
    else
        w.lru *= std::exp(learning_rate * reward);
    double const sum = w.lru + w.lfu;
    w.lru = std::clamp(w.lru / sum, lecar_weight_floor, 1.0 - lecar_weight_floor);
    w.lfu = 1.0 - w.lru;
}

struct LecarParams
{
    double learning_rate = 0.45;
    double discount_base = 0.005; // discount = discount_base^(1/C)
    std::uint64_t seed = 0;
};

class LecarCache : public CachePolicy
{
public:
    LecarCache(std::size_t capacity, std::size_t num_experts, LecarParams params = {})
        : CachePolicy(capacity, num_experts)
        , params_(params)
        , discount_(std::pow(params.discount_base, 1.0 / static_cast<double>(capacity)))
        , rng_(params.seed)
        , freq_(num_experts, 0)
        , last_use_(num_experts, 0)
        , ghost_(num_experts)
    {
    }

    std::string name() const override { return "lecar"; }

    void begin_sequence() override { std::fill(freq_.begin(), freq_.end(), 0); }

    LecarWeights const & weights() const { return weights_; }
    double discount() const { return discount_; }
    std::size_t history_size(GhostList which) const { return history(which).size(); }

protected:
    void on_hit(ExpertId e, AccessContext const &) override
    {
        ++clock_;
        ++freq_[e];
        last_use_[e] = clock_;
    }

    void on_miss(ExpertId x, AccessContext const &) override
    {
        ++clock_;
        auto & g = ghost_[x];
        if (g.in) {
            lecar_update(weights_, g.list, clock_ - g.evicted_at, params_.learning_rate, discount_);
            history(g.list).remove(x);
            g.in = false;
        }
    }

    ExpertId choose_victim(ExpertId, AccessContext const &) override
    {
        ExpertId lru = argmin_evictable([&](ExpertId e) { return last_use_[e]; });
        ExpertId lfu = argmin_evictable([&](ExpertId e) { return freq_[e]; });
        GhostList action = uniform01(rng_) < weights_.lru ? GhostList::lru : GhostList::lfu;
        ExpertId victim = action == GhostList::lru ? lru : lfu;
        auto & h = history(action);
        if (h.size() >= capacity()) {
            ghost_[h.front()].in = false;
            h.pop_front();
        }
        h.push_back(victim);
        ghost_[victim] = Ghost{true, action, clock_};
        return victim;
    }

    void on_insert(ExpertId e, AccessContext const &) override
    {
        ++freq_[e];
        last_use_[e] = clock_;
    }

private:
    struct Ghost
    {
        bool in = false;
        GhostList list = GhostList::lru;
        std::uint64_t evicted_at = 0;
    };

    std::list<ExpertId> & history(GhostList w) { return w == GhostList::lru ? hist_lru_ : hist_lfu_; }
    std::list<ExpertId> const & history(GhostList w) const { return w == GhostList::lru ? hist_lru_ : hist_lfu_; }

    LecarParams params_;
    double discount_;
    Rng rng_;
    LecarWeights weights_;
    std::uint64_t clock_ = 0;
    std::vector<std::uint64_t> freq_;
    std::vector<std::uint64_t> last_use_;
    std::vector<Ghost> ghost_;
    std::list<ExpertId> hist_lru_, hist_lfu_;
};

// Belady's MIN: evicts the expert whose next access is farthest away.
class BeladyCache : public CachePolicy
{
public:
    BeladyCache(std::size_t capacity, std::size_t num_experts, OracleIndex const & oracle)
        : CachePolicy(capacity, num_experts)
        , oracle_(&oracle)
    {
    }

    std::string name() const override { return "belady"; }

protected:
    void on_hit(ExpertId, AccessContext const &) override {}
    void on_insert(ExpertId, AccessContext const &) override {}

    ExpertId choose_victim(ExpertId, AccessContext const & ctx) override
    {
        // negate so that argmin picks the farthest next use
        return argmin_evictable([&](ExpertId e) {
            return std::numeric_limits<std::uint64_t>::max() - belady_next_use(*oracle_, e, ctx.position);
        });
    }

private:
    OracleIndex const * oracle_;
};

} // namespace moecache

#endif
