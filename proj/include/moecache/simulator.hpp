#ifndef MOECACHE_SIMULATOR_HPP
#define MOECACHE_SIMULATOR_HPP

/*
 * Trace replay through per-layer expert caches: hit/miss and I/O accounting,
 * the load/compute overlap latency model, refetch and eviction-quality
 * diagnostics, capacity sweeps and the VRAM cache-size calculator.
 */

#include "moecache/ml_policy.hpp"
#include "moecache/policies.hpp"
#include "moecache/stream.hpp"
#include "moecache/trace.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <exception>
#include <mutex>
#include <thread>
#include <tuple>
#include <vector>

namespace moecache
{

using Duration = std::chrono::nanoseconds;

inline std::vector<std::string> const & known_policies()
{
    static std::vector<std::string> const names = {"arc", "belady", "fifo", "lecar", "lfu", "lru", "ml"};
    return names;
}

// Trained nets: one per layer, or a single net shared by every layer.
struct NetBank
{
    std::vector<std::shared_ptr<EvictionNet<float> const>> nets;

    std::shared_ptr<EvictionNet<float> const> for_layer(std::uint32_t layer) const
    {
        if (nets.size() == 1)
            return nets.front();
        if (layer >= nets.size())
            throw MissingCheckpoint("no eviction net for layer " + std::to_string(layer));
        return nets[layer];
    }
};

struct PolicySpec
{
    std::string name;
    LecarParams lecar;
    std::shared_ptr<NetBank const> nets;
    bool ml_include_prefill_features = true;

    void validate() const
    {
        if (std::find(known_policies().begin(), known_policies().end(), name) == known_policies().end())
            throw InvalidConfig("policies", "unknown policy \"" + name + "\"");
        if (name == "ml" && (!nets || nets->nets.empty()))
            throw MissingCheckpoint("policy \"ml\" listed but no eviction-net checkpoints were provided");
        if (name == "lecar" && !(lecar.learning_rate > 0.0))
            throw InvalidConfig("lecar.learning_rate", "must be positive");
        if (name == "lecar" && !(lecar.discount_base > 0.0 && lecar.discount_base < 1.0))
            throw InvalidConfig("lecar.discount_base", "must lie in (0, 1)");
    }
};

inline PolicySpec policy(std::string name)
{
    PolicySpec s;
    s.name = std::move(name);
    return s;
}

// A trace split into per-layer streams with oracle indexes, shared read-only
// by every simulation of a sweep.
struct CompiledTrace
{
    TraceHeader header;
    std::vector<LayerStream> streams;
    std::vector<OracleIndex> oracles;
    std::uint64_t decode_steps = 0; // distinct (seq, step) decode tokens

    explicit CompiledTrace(RoutingTrace const & trace)
        : header(trace.header)
        , streams(compile_streams(trace))
    {
        oracles.reserve(streams.size());
        for (auto const & s : streams)
            oracles.emplace_back(s, header.num_experts);
        if (!streams.empty())
            for (auto const & g : streams.front().groups)
                decode_steps += g.phase == Phase::decode;
    }
};

inline std::unique_ptr<CachePolicy> make_policy(PolicySpec const & spec, std::size_t capacity,
                                                std::size_t num_experts, std::uint32_t layer,
                                                OracleIndex const & oracle)
{
    if (spec.name == "lru")
        return std::make_unique<LruCache>(capacity, num_experts);
    if (spec.name == "lfu")
        return std::make_unique<LfuCache>(capacity, num_experts);
    if (spec.name == "fifo")
        return std::make_unique<FifoCache>(capacity, num_experts);
    if (spec.name == "arc")
        return std::make_unique<ArcCache>(capacity, num_experts);
    if (spec.name == "lecar") {
        LecarParams p = spec.lecar;
        p.seed = spec.lecar.seed * 1000003ULL + layer;
        return std::make_unique<LecarCache>(capacity, num_experts, p);
    }
    if (spec.name == "belady")
        return std::make_unique<BeladyCache>(capacity, num_experts, oracle);
    if (spec.name == "ml") {
        if (!spec.nets)
            throw MissingCheckpoint("policy \"ml\" requires eviction-net checkpoints");
        return std::make_unique<MlCache>(capacity, num_experts, spec.nets->for_layer(layer),
                                         spec.ml_include_prefill_features);
    }
    throw InvalidConfig("policies", "unknown policy \"" + spec.name + "\"");
}

struct CostModel
{
    Duration t_load = std::chrono::milliseconds(3);
    Duration t_compute = std::chrono::microseconds(158);
    bool loads_serial = true;
    Duration ml_scoring = Duration::zero(); // per (decode step, layer), ml policy only

    void validate() const
    {
        if (t_load <= Duration::zero())
            throw InvalidConfig("cost.t_load", "must be positive");
        if (t_compute <= Duration::zero())
            throw InvalidConfig("cost.t_compute", "must be positive");
        if (ml_scoring < Duration::zero())
            throw InvalidConfig("cost.ml_scoring", "must not be negative");
    }

    /*
     * Latency of one access group: with any miss the expert computations hide
     * under the loads, otherwise the experts compute back to back.
     */
    Duration group_latency(std::size_t experts, std::size_t misses) const
    {
        if (misses > 0)
            return loads_serial ? t_load * static_cast<std::int64_t>(misses) : t_load;
        return t_compute * static_cast<std::int64_t>(experts);
    }
};

struct SimOptions
{
    bool count_prefill = false;          // include prefill accesses in hits/misses
    std::uint32_t refetch_window = 5;    // decode steps
    bool keep_eviction_log = false;
};

struct EvictionRecord
{
    std::uint64_t seq_id = 0;
    Phase phase = Phase::decode;
    std::uint64_t step = 0;
    std::uint32_t layer = 0;
    std::uint64_t position = 0;
    ExpertId victim = 0;

    friend bool operator==(EvictionRecord const &, EvictionRecord const &) = default;
};

struct SimReport
{
    std::string policy;
    std::size_t capacity = 0;

    std::uint64_t hits = 0;
    std::uint64_t misses = 0;
    std::uint64_t compulsory_misses = 0; // first-ever touches among the counted misses
    double hit_rate = 0.0;               // hits / (hits + misses)
    double hit_rate_warm = 0.0;          // compulsory misses excluded
    std::uint64_t io_count = 0;

    std::uint64_t prefill_hits = 0;
    std::uint64_t prefill_misses = 0;
    std::uint64_t decode_hits = 0;
    std::uint64_t decode_misses = 0;

    std::uint64_t decode_steps = 0;
    Duration est_decode_latency = Duration::zero();
    Duration est_prefill_latency = Duration::zero();
    double tokens_per_second_est = 0.0;

    std::uint32_t refetch_window = 0;
    std::uint64_t decode_evictions = 0;
    std::uint64_t refetches = 0;
    double refetch_within_w = 0.0;

    std::vector<EvictionRecord> eviction_log;
};

namespace detail
{

struct LayerTally
{
    std::uint64_t prefill_hits = 0, prefill_misses = 0, decode_hits = 0, decode_misses = 0;
    std::uint64_t compulsory_prefill = 0, compulsory_decode = 0;
    std::uint64_t decode_evictions = 0, refetches = 0;
    Duration decode_latency = Duration::zero(), prefill_latency = Duration::zero();
    std::vector<EvictionRecord> log;
};

/*
 * Evictions waiting to be re-accessed within the window. Bounded by the
 * evictions of the last `window` steps of the current sequence.
 */
class RefetchWindow
{
public:
    explicit RefetchWindow(std::uint32_t window)
        : window_(window)
    {
    }

    void begin_step(std::uint64_t seq, std::uint64_t step)
    {
        std::erase_if(pending_, [&](Pending const & p) { return p.seq != seq || p.deadline < step; });
    }

    void evicted(ExpertId victim, std::uint64_t seq, std::uint64_t step)
    {
        pending_.push_back({victim, seq, step + window_});
    }

    // True when `e` was evicted within the window; consumes the entry.
    bool accessed(ExpertId e)
    {
        auto it = std::find_if(pending_.begin(), pending_.end(), [&](Pending const & p) { return p.victim == e; });
        if (it == pending_.end())
            return false;
        pending_.erase(it);
        return true;
    }

private:
    struct Pending
    {
        ExpertId victim;
        std::uint64_t seq;
        std::uint64_t deadline;
    };

    std::uint32_t window_;
    std::vector<Pending> pending_;
};

inline LayerTally replay_layer(CompiledTrace const & ct, std::uint32_t layer, PolicySpec const & spec,
                               std::size_t capacity, CostModel const & cost, SimOptions const & opt)
{
    auto const & stream = ct.streams[layer];
    auto const E = ct.header.num_experts;
    auto cache = make_policy(spec, capacity, E, layer, ct.oracles[layer]);
    bool const is_ml = spec.name == "ml";

    LayerTally tally;
    RefetchWindow refetch(opt.refetch_window);
    std::vector<char> touched(E, 0);
    std::optional<std::uint64_t> seq;
    for (auto const & g : stream.groups) {
        if (seq != g.seq_id) {
            seq = g.seq_id;
            cache->begin_sequence();
        }
        bool const decode = g.phase == Phase::decode;
        if (decode)
            refetch.begin_step(g.seq_id, g.step);
        cache->begin_event(g.routings, g.phase);
        AccessContext ctx{layer, g.first_position, g.seq_id, g.phase, g.step};
        std::size_t misses = 0;
        for (ExpertId e : g.experts) {
            if (decode && refetch.accessed(e))
                ++tally.refetches;
            auto d = cache->access(e, ctx);
            if (!d.was_hit) {
                ++misses;
                if (!touched[e])
                    ++(decode ? tally.compulsory_decode : tally.compulsory_prefill);
            }
            touched[e] = 1;
            if (d.evicted) {
                if (decode) {
                    ++tally.decode_evictions;
                    refetch.evicted(*d.evicted, g.seq_id, g.step);
                }
                if (opt.keep_eviction_log)
                    tally.log.push_back({g.seq_id, g.phase, g.step, layer, ctx.position, *d.evicted});
            }
            ++ctx.position;
        }
        cache->end_event();

        auto const hits = g.experts.size() - misses;
        auto const latency = cost.group_latency(g.experts.size(), misses);
        if (decode) {
            tally.decode_hits += hits;
            tally.decode_misses += misses;
            tally.decode_latency += latency + (is_ml ? cost.ml_scoring : Duration::zero());
        } else {
            tally.prefill_hits += hits;
            tally.prefill_misses += misses;
            tally.prefill_latency += latency;
        }
    }
    return tally;
}

} // namespace detail

/*
 * Replays the trace with an independent cache of `capacity` experts per
 * layer. Prefill unions load each listed expert at most once; decode steps
 * access their experts in order with intra-step pinning.
 */
inline SimReport simulate(CompiledTrace const & ct, PolicySpec const & spec, std::size_t capacity,
                          CostModel const & cost = {}, SimOptions const & opt = {})
{
    spec.validate();
    cost.validate();
    if (capacity < ct.header.top_k)
        throw CapacityTooSmall("capacity " + std::to_string(capacity) + " < top_k " +
                               std::to_string(ct.header.top_k));

    SimReport r;
    r.policy = spec.name;
    r.capacity = capacity;
    r.refetch_window = opt.refetch_window;
    r.decode_steps = ct.decode_steps;
    std::uint64_t compulsory_prefill = 0, compulsory_decode = 0;
    for (std::uint32_t l = 0; l < ct.header.num_layers; ++l) {
        auto t = detail::replay_layer(ct, l, spec, capacity, cost, opt);
        r.prefill_hits += t.prefill_hits;
        r.prefill_misses += t.prefill_misses;
        r.decode_hits += t.decode_hits;
        r.decode_misses += t.decode_misses;
        compulsory_prefill += t.compulsory_prefill;
        compulsory_decode += t.compulsory_decode;
        r.decode_evictions += t.decode_evictions;
        r.refetches += t.refetches;
        r.est_decode_latency += t.decode_latency;
        r.est_prefill_latency += t.prefill_latency;
        if (opt.keep_eviction_log)
            r.eviction_log.insert(r.eviction_log.end(), t.log.begin(), t.log.end());
    }
    r.hits = r.decode_hits + (opt.count_prefill ? r.prefill_hits : 0);
    r.misses = r.decode_misses + (opt.count_prefill ? r.prefill_misses : 0);
    r.compulsory_misses = compulsory_decode + (opt.count_prefill ? compulsory_prefill : 0);
    r.io_count = r.misses;
    auto const total = r.hits + r.misses;
    r.hit_rate = total > 0 ? static_cast<double>(r.hits) / static_cast<double>(total) : 0.0;
    auto const warm = total - r.compulsory_misses;
    r.hit_rate_warm = warm > 0 ? static_cast<double>(r.hits) / static_cast<double>(warm) : 0.0;
    auto const secs = std::chrono::duration<double>(r.est_decode_latency).count();
    r.tokens_per_second_est = secs > 0.0 ? static_cast<double>(r.decode_steps) / secs : 0.0;
    r.refetch_within_w =
        r.decode_evictions > 0 ? static_cast<double>(r.refetches) / static_cast<double>(r.decode_evictions) : 0.0;
    return r;
}

inline SimReport simulate(RoutingTrace const & trace, PolicySpec const & spec, std::size_t capacity,
                          CostModel const & cost = {}, SimOptions const & opt = {})
{
    return simulate(CompiledTrace(trace), spec, capacity, cost, opt);
}

// Fraction of decode evictions whose victim returns within `window` decode
// steps of the same sequence and layer; 0 without evictions.
inline double refetch_rate(CompiledTrace const & ct, PolicySpec const & spec, std::size_t capacity,
                           std::uint32_t window = 5)
{
    SimOptions opt;
    opt.refetch_window = window;
    return simulate(ct, spec, capacity, CostModel{}, opt).refetch_within_w;
}

/*
 * The same metric computed from a full eviction log rather than the bounded
 * online window.
 */
inline double refetch_rate_from_log(CompiledTrace const & ct, std::vector<EvictionRecord> const & log,
                                    std::uint32_t window = 5)
{
    std::uint64_t evictions = 0, refetched = 0;
    for (auto const & ev : log) {
        if (ev.phase != Phase::decode)
            continue;
        ++evictions;
        auto const & stream = ct.streams[ev.layer];
        auto const next = ct.oracles[ev.layer].next_position(ev.victim, ev.position);
        if (next == never)
            continue;
        // locate the group holding `next`
        auto it = std::upper_bound(stream.groups.begin(), stream.groups.end(), next,
                                   [](std::uint64_t p, AccessGroup const & g) { return p < g.first_position; });
        auto const & g = *std::prev(it);
        if (g.phase == Phase::decode && g.seq_id == ev.seq_id && g.step <= ev.step + window)
            ++refetched;
    }
    return evictions > 0 ? static_cast<double>(refetched) / static_cast<double>(evictions) : 0.0;
}

struct DuelResult
{
    std::uint64_t a_better = 0;
    std::uint64_t b_better = 0;
    std::uint64_t ties = 0;
    double fraction_a_better = 0.5;
};

/*
 * At every access position where both logs evict, compares the oracle
 * next-use distance of each policy's own victim. The farther victim is the
 * better choice; ties are left out. Without any strict winner the result is
 * 0.5.
 */
inline DuelResult duel_from_logs(CompiledTrace const & ct, std::vector<EvictionRecord> la,
                                 std::vector<EvictionRecord> lb)
{
    auto key = [](EvictionRecord const & e) { return std::make_pair(e.layer, e.position); };
    auto by_key = [&](EvictionRecord const & x, EvictionRecord const & y) { return key(x) < key(y); };
    std::sort(la.begin(), la.end(), by_key);
    std::sort(lb.begin(), lb.end(), by_key);

    DuelResult out;
    auto ia = la.begin();
    auto ib = lb.begin();
    while (ia != la.end() && ib != lb.end()) {
        if (key(*ia) < key(*ib)) {
            ++ia;
        } else if (key(*ib) < key(*ia)) {
            ++ib;
        } else {
            auto const & oracle = ct.oracles[ia->layer];
            auto const da = belady_next_use(oracle, ia->victim, ia->position);
            auto const db = belady_next_use(oracle, ib->victim, ib->position);
            if (da > db)
                ++out.a_better;
            else if (db > da)
                ++out.b_better;
            else
                ++out.ties;
            ++ia;
            ++ib;
        }
    }
    auto const decided = out.a_better + out.b_better;
    out.fraction_a_better =
        decided > 0 ? static_cast<double>(out.a_better) / static_cast<double>(decided) : 0.5;
    return out;
}

// Runs both policies independently, then duels their eviction logs.
inline DuelResult eviction_quality_duel(CompiledTrace const & ct, PolicySpec const & a, PolicySpec const & b,
                                        std::size_t capacity)
{
    SimOptions opt;
    opt.keep_eviction_log = true;
    opt.count_prefill = true;
    auto ra = simulate(ct, a, capacity, CostModel{}, opt);
    auto rb = simulate(ct, b, capacity, CostModel{}, opt);
    return duel_from_logs(ct, std::move(ra.eviction_log), std::move(rb.eviction_log));
}

/*
 * VRAM cache-size calculator:
 *
 *   cache size = (vram - non-expert bytes) * experts per layer / all expert bytes
 *
 * all_experts_bytes is the storage of every expert of every layer, so the
 * ratio experts_per_layer / all_experts_bytes is experts-per-layer per byte
 * of a full per-layer slot across the model: one cache slot per layer costs
 * all_experts_bytes / experts_per_layer bytes. The result is floored and
 * clamped to [0, experts_per_layer].
 */
struct HardwareBudget
{
    std::uint64_t vram_bytes = 0;
    std::uint64_t nonexpert_bytes = 0;
    std::uint64_t all_experts_bytes = 0;
    std::uint64_t experts_per_layer = 0;
};

inline std::uint64_t cache_size_calc(HardwareBudget const & b)
{
    if (b.vram_bytes <= b.nonexpert_bytes)
        return 0;
    if (b.all_experts_bytes == 0)
        return b.experts_per_layer;
    unsigned __int128 const headroom = b.vram_bytes - b.nonexpert_bytes;
    unsigned __int128 const slots = headroom * b.experts_per_layer / b.all_experts_bytes;
    return slots > b.experts_per_layer ? b.experts_per_layer : static_cast<std::uint64_t>(slots);
}

/*
 * Every (policy, capacity) cell, computed on up to `jobs` threads. Rows are
 * ordered by policy name, then capacity ascending.
 */
inline std::vector<SimReport> sweep(CompiledTrace const & ct, std::vector<PolicySpec> const & policies,
                                    std::vector<std::size_t> const & capacities, CostModel const & cost = {},
                                    SimOptions const & opt = {}, unsigned jobs = 1)
{
    if (capacities.empty())
        throw InvalidConfig("capacities", "must not be empty");
    for (auto const & p : policies)
        p.validate();
    for (auto c : capacities)
        if (c < ct.header.top_k)
            throw CapacityTooSmall("capacity " + std::to_string(c) + " < top_k " +
                                   std::to_string(ct.header.top_k));

    std::vector<std::pair<PolicySpec const *, std::size_t>> cells;
    for (auto const & p : policies)
        for (auto c : capacities)
            cells.emplace_back(&p, c);
    std::stable_sort(cells.begin(), cells.end(), [](auto const & x, auto const & y) {
        return std::tie(x.first->name, x.second) < std::tie(y.first->name, y.second);
    });

    std::vector<SimReport> rows(cells.size());
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto worker = [&] {
        for (std::size_t i; (i = next.fetch_add(1)) < cells.size();) {
            try {
                rows[i] = simulate(ct, *cells[i].first, cells[i].second, cost, opt);
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure)
                    failure = std::current_exception();
            }
        }
    };
    jobs = std::max(1u, std::min<unsigned>(jobs, static_cast<unsigned>(cells.size())));
    std::vector<std::thread> pool;
    for (unsigned j = 1; j < jobs; ++j)
        pool.emplace_back(worker);
    worker();
    for (auto & t : pool)
        t.join();
    if (failure)
        std::rethrow_exception(failure);
    return rows;
}

} // namespace moecache

#endif
