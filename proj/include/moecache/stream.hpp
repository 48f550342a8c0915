#ifndef MOECACHE_STREAM_HPP
#define MOECACHE_STREAM_HPP

#include "moecache/trace.hpp"

#include <algorithm>
#include <cstdint>
#include <limits>
#include <vector>

namespace moecache
{

/*
 * One cache-visible unit of work on a single layer: either the deduplicated
 * prefill union of a sequence or one decode step.
 */
struct AccessGroup
{
    std::uint64_t seq_id = 0;
    Phase phase = Phase::decode;
    std::uint64_t step = 0;            // decode step; 0 for a prefill union
    std::uint64_t first_position = 0;  // position of experts[0] in the layer stream
    std::vector<ExpertId> experts;     // accesses in replay order
    std::vector<std::vector<ExpertId>> routings; // per time step: prefill tokens, or the single decode step
};

// The flattened access stream of one layer. Position p refers to the p-th
// expert access of this layer over the whole replay.
struct LayerStream
{
    std::uint32_t layer = 0;
    std::uint64_t num_positions = 0;
    std::vector<AccessGroup> groups;
};

/*
 * Splits a trace into per-layer streams. Prefill tokens of a sequence are
 * merged into one group whose accesses are the union of the token routings in
 * order of first appearance; decode steps map one to one onto groups.
 */
inline std::vector<LayerStream> compile_streams(RoutingTrace const & trace)
{
    auto const L = trace.header.num_layers;
    auto const E = trace.header.num_experts;
    std::vector<LayerStream> streams(L);
    for (std::uint32_t l = 0; l < L; ++l)
        streams[l].layer = l;

    std::vector<std::vector<char>> in_union(L, std::vector<char>(E, 0));
    // index of the open prefill group per layer, if any
    std::vector<std::size_t> open(L, std::numeric_limits<std::size_t>::max());

    for (auto const & ev : trace.events) {
        auto & s = streams[ev.layer];
        if (ev.phase == Phase::prefill) {
            auto & g_idx = open[ev.layer];
            if (g_idx == std::numeric_limits<std::size_t>::max() || s.groups[g_idx].seq_id != ev.seq_id) {
                s.groups.push_back(AccessGroup{ev.seq_id, Phase::prefill, 0, 0, {}, {}});
                g_idx = s.groups.size() - 1;
                std::fill(in_union[ev.layer].begin(), in_union[ev.layer].end(), 0);
            }
            auto & g = s.groups[g_idx];
            g.routings.push_back(ev.experts);
            for (ExpertId e : ev.experts)
                if (!in_union[ev.layer][e]) {
                    in_union[ev.layer][e] = 1;
                    g.experts.push_back(e);
                }
        } else {
            open[ev.layer] = std::numeric_limits<std::size_t>::max();
            s.groups.push_back(AccessGroup{ev.seq_id, Phase::decode, ev.step, 0, ev.experts, {ev.experts}});
        }
    }
    for (auto & s : streams) {
        std::uint64_t pos = 0;
        for (auto & g : s.groups) {
            g.first_position = pos;
            pos += g.experts.size();
        }
        s.num_positions = pos;
    }
    return streams;
}

inline constexpr std::uint64_t never = std::numeric_limits<std::uint64_t>::max();

/*
 * Future access positions of every expert in one layer stream, for Belady's
 * MIN and for judging eviction quality after the fact.
 */
class OracleIndex
{
public:
    OracleIndex() = default;

    OracleIndex(LayerStream const & stream, std::uint32_t num_experts)
        : positions_(num_experts)
    {
        for (auto const & g : stream.groups)
            for (std::size_t i = 0; i < g.experts.size(); ++i)
                positions_[g.experts[i]].push_back(g.first_position + i);
    }

    // Smallest recorded position of `expert` strictly after `position`, or never.
    std::uint64_t next_position(ExpertId expert, std::uint64_t position) const
    {
        auto const & p = positions_[expert];
        auto it = std::upper_bound(p.begin(), p.end(), position);
        return it == p.end() ? never : *it;
    }

    std::vector<std::uint64_t> const & positions(ExpertId expert) const { return positions_[expert]; }

    std::size_t num_experts() const { return positions_.size(); }

private:
    std::vector<std::vector<std::uint64_t>> positions_;
};

// Distance from `position` to the next access of `expert`, or never.
inline std::uint64_t belady_next_use(OracleIndex const & index, ExpertId expert, std::uint64_t position)
{
    auto next = index.next_position(expert, position);
    return next == never ? never : next - position;
}

} // namespace moecache

#endif
