#ifndef MOECACHE_TESTS_HELPERS_HPP
#define MOECACHE_TESTS_HELPERS_HPP

#include "moecache/simulator.hpp"
#include "moecache/trace.hpp"

#include <filesystem>
#include <unistd.h>
#include <optional>
#include <set>
#include <vector>

namespace testing_helpers
{

using namespace moecache;

inline RoutingTrace make_trace(std::uint32_t L, std::uint32_t E, std::uint32_t K, std::uint32_t seqs,
                               std::uint32_t prefill, std::uint32_t decode, std::uint64_t seed,
                               double recency_boost = 0.3, std::uint32_t w_hot = 4)
{
    SyntheticWorkloadConfig cfg;
    cfg.num_seqs = seqs;
    cfg.prefill_tokens = prefill;
    cfg.decode_steps = decode;
    cfg.rng_seed = seed;
    cfg.recency_boost = recency_boost;
    cfg.w_hot = w_hot;
    return generate_trace(TraceHeader{"test", L, E, K}, cfg);
}

// Hand-written decode-only trace for one layer.
inline RoutingTrace decode_trace(std::uint32_t E, std::uint32_t K, std::vector<std::vector<ExpertId>> const & steps,
                                 std::uint64_t seq = 0)
{
    RoutingTrace t;
    t.header = {"hand", 1, E, K};
    for (std::size_t i = 0; i < steps.size(); ++i)
        t.events.push_back({seq, Phase::decode, i, 0, steps[i]});
    return t;
}

// Every decision a policy takes while replaying one layer stream.
inline std::vector<PolicyDecision> replay(CachePolicy & cache, LayerStream const & stream)
{
    std::vector<PolicyDecision> out;
    std::optional<std::uint64_t> seq;
    for (auto const & g : stream.groups) {
        if (seq != g.seq_id) {
            seq = g.seq_id;
            cache.begin_sequence();
        }
        cache.begin_event(g.routings, g.phase);
        AccessContext ctx{stream.layer, g.first_position, g.seq_id, g.phase, g.step};
        for (ExpertId e : g.experts) {
            out.push_back(cache.access(e, ctx));
            ++ctx.position;
        }
        cache.end_event();
    }
    return out;
}

// Reference LRU/LFU: recompute recency or frequency by scanning the history.
inline std::vector<std::optional<ExpertId>> naive_decisions(LayerStream const & stream, std::size_t cap, bool lfu)
{
    struct Access
    {
        std::uint64_t seq;
        ExpertId e;
    };
    std::vector<Access> history;
    std::set<ExpertId> resident;
    std::vector<std::optional<ExpertId>> out;
    for (auto const & g : stream.groups) {
        std::set<ExpertId> pinned;
        for (ExpertId e : g.experts) {
            std::optional<ExpertId> victim;
            if (!resident.count(e) && resident.size() == cap) {
                std::optional<std::pair<std::uint64_t, ExpertId>> best;
                for (ExpertId r : resident) {
                    if (pinned.count(r))
                        continue;
                    std::uint64_t key = 0;
                    if (lfu) {
                        for (auto const & h : history)
                            key += h.seq == g.seq_id && h.e == r;
                    } else {
                        for (std::size_t i = history.size(); i-- > 0;)
                            if (history[i].e == r) {
                                key = i;
                                break;
                            }
                    }
                    if (!best || std::make_pair(key, r) < *best)
                        best = std::make_pair(key, r);
                }
                victim = best->second;
                resident.erase(*victim);
            }
            resident.insert(e);
            history.push_back({g.seq_id, e});
            if (g.phase == Phase::decode)
                pinned.insert(e);
            out.push_back(victim);
        }
    }
    return out;
}

class TempDir
{
public:
    TempDir()
    {
        static int n = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("moecache_test_" + std::to_string(::getpid()) + "_" + std::to_string(n++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() { std::filesystem::remove_all(path_); }
    std::filesystem::path const & path() const { return path_; }
    std::string str(std::string const & name) const { return (path_ / name).string(); }

private:
    std::filesystem::path path_;
};

} // namespace testing_helpers

#endif
