#ifndef MOECACHE_TRACE_HPP
#define MOECACHE_TRACE_HPP

/*
 * Expert-routing traces: the data model, the line-delimited file format and
 * a seeded synthetic generator.
 *
 * File format: UTF-8, one JSON object per line. The first line is the header
 *   {"model_name":"...","num_layers":L,"num_experts":E,"top_k":K}
 * and every following line is one event
 *   {"seq_id":s,"phase":p,"step":t,"layer":l,"experts":[e0,e1,...]}
 * where phase is 0 for prefill and 1 for decode. Prefill is stored token by
 * token (step = token index); the simulator unions the tokens of a sequence.
 * Unknown fields are rejected.
 */

#include "moecache/errors.hpp"
#include "moecache/random.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iosfwd>
#include <map>
#include <set>
#include <limits>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

namespace moecache
{

using ExpertId = std::uint32_t;

enum class Phase : std::uint8_t
{
    prefill = 0,
    decode = 1,
};

inline char const * to_string(Phase p)
{
    return p == Phase::prefill ? "prefill" : "decode";
}

struct TraceHeader
{
    std::string model_name;
    std::uint32_t num_layers = 1;
    std::uint32_t num_experts = 1;
    std::uint32_t top_k = 1;

    void validate() const
    {
        if (num_layers < 1)
            throw InvalidConfig("num_layers", "must be >= 1");
        if (num_experts < 1)
            throw InvalidConfig("num_experts", "must be >= 1");
        if (top_k < 1)
            throw InvalidConfig("top_k", "must be >= 1");
        if (top_k > num_experts)
            throw InvalidConfig("top_k", "must not exceed num_experts");
    }

    friend bool operator==(TraceHeader const &, TraceHeader const &) = default;
};

struct AccessEvent
{
    std::uint64_t seq_id = 0;
    Phase phase = Phase::decode;
    std::uint64_t step = 0;
    std::uint32_t layer = 0;
    std::vector<ExpertId> experts;

    auto order_key() const
    {
        return std::make_tuple(seq_id, static_cast<int>(phase), step, layer);
    }

    friend bool operator==(AccessEvent const &, AccessEvent const &) = default;
};

struct RoutingTrace
{
    TraceHeader header;
    std::vector<AccessEvent> events;

    friend bool operator==(RoutingTrace const &, RoutingTrace const &) = default;
};

struct ValidationReport
{
    std::vector<std::string> warnings;
    std::size_t prefill_events = 0;
    std::size_t decode_events = 0;
    std::size_t sequences = 0;
};

/*
 * Incremental checker for the RoutingTrace invariants. Events are fed in file
 * order; violations throw MalformedFile (or HeaderMismatch for out-of-range
 * layers and experts) carrying the offending line number.
 */
class TraceValidator
{
public:
    explicit TraceValidator(TraceHeader const & header)
        : header_(header)
        , seen_(header.num_experts, 0)
    {
    }

    void feed(AccessEvent const & ev, std::size_t line)
    {
        if (ev.layer >= header_.num_layers)
            throw HeaderMismatch(line, "layer " + std::to_string(ev.layer) +
                                           " >= num_layers " + std::to_string(header_.num_layers));
        ++stamp_;
        for (ExpertId e : ev.experts) {
            if (e >= header_.num_experts)
                throw HeaderMismatch(line, "expert " + std::to_string(e) +
                                               " >= num_experts " + std::to_string(header_.num_experts));
            if (seen_[e] == stamp_)
                throw MalformedFile(line, "duplicate expert " + std::to_string(e) + " in event");
            seen_[e] = stamp_;
        }
        if (ev.phase == Phase::decode && ev.experts.size() != header_.top_k)
            throw MalformedFile(line, "decode event has " + std::to_string(ev.experts.size()) +
                                          " experts, expected top_k = " + std::to_string(header_.top_k));
        if (ev.phase == Phase::prefill && ev.experts.empty())
            throw MalformedFile(line, "prefill event has no experts");
        if (ev.phase == Phase::prefill && ev.experts.size() != header_.top_k)
            report_.warnings.push_back("line " + std::to_string(line) + ": prefill event has " +
                                       std::to_string(ev.experts.size()) + " experts (expected per-token top_k)");

        if (has_prev_) {
            if (!(prev_ < ev.order_key()))
                throw MalformedFile(line, "events not strictly sorted by (seq_id, phase, step, layer)");
            if (!same_group(ev))
                close_group(line);
            if (std::get<0>(prev_) != ev.seq_id)
                ++report_.sequences;
        } else {
            report_.sequences = 1;
        }
        if (!has_prev_ || !same_group(ev)) {
            group_phase_ = ev.phase;
            group_layers_ = 0;
            group_line_ = line;
        }
        if (ev.phase == Phase::decode && ev.layer != group_layers_)
            throw MalformedFile(line, "decode step is missing layer " + std::to_string(group_layers_));
        ++group_layers_;
        prev_ = ev.order_key();
        has_prev_ = true;
        (ev.phase == Phase::decode ? report_.decode_events : report_.prefill_events) += 1;
    }

    ValidationReport finish(std::size_t line)
    {
        if (has_prev_)
            close_group(line);
        return report_;
    }

private:
    using Key = std::tuple<std::uint64_t, int, std::uint64_t, std::uint32_t>;

    bool same_group(AccessEvent const & ev) const
    {
        return std::get<0>(prev_) == ev.seq_id && std::get<1>(prev_) == static_cast<int>(ev.phase) &&
               std::get<2>(prev_) == ev.step;
    }

    void close_group(std::size_t line)
    {
        if (group_layers_ == header_.num_layers)
            return;
        if (group_phase_ == Phase::decode)
            throw MalformedFile(line, "decode step starting at line " + std::to_string(group_line_) + " has " +
                                          std::to_string(group_layers_) + " of " +
                                          std::to_string(header_.num_layers) + " layers");
        report_.warnings.push_back("line " + std::to_string(group_line_) + ": prefill token covers " +
                                   std::to_string(group_layers_) + " of " + std::to_string(header_.num_layers) +
                                   " layers");
    }

    TraceHeader header_;
    std::vector<std::uint64_t> seen_;
    std::uint64_t stamp_ = 0;
    Key prev_{};
    bool has_prev_ = false;
    Phase group_phase_ = Phase::decode;
    std::uint32_t group_layers_ = 0;
    std::size_t group_line_ = 0;
    ValidationReport report_;
};

// Checks every invariant of an in-memory trace. Line numbers in errors refer
// to the serialized form (header on line 1).
inline ValidationReport validate_trace(RoutingTrace const & trace)
{
    try {
        trace.header.validate();
    } catch (InvalidConfig const & e) {
        throw MalformedFile(1, e.what());
    }
    TraceValidator v(trace.header);
    for (std::size_t i = 0; i < trace.events.size(); ++i)
        v.feed(trace.events[i], i + 2);
    return v.finish(trace.events.size() + 2);
}

/*
 * Synthetic workloads.
 */
struct SyntheticWorkloadConfig
{
    std::uint32_t num_seqs = 4;
    std::uint32_t decode_steps = 256;
    std::uint32_t prefill_tokens = 32;
    double zipf_s = 1.0;
    double recency_boost = 0.3;
    std::uint32_t w_hot = 4;
    std::uint64_t rng_seed = 1;
    // Seeds the per-layer popularity permutation, which belongs to the model
    // rather than to a workload: traces that differ only in rng_seed share
    // their popular experts.
    std::uint64_t popularity_seed = 0;

    void validate() const
    {
        if (num_seqs == 0)
            throw InvalidConfig("num_seqs", "must be >= 1");
        if (decode_steps == 0 && prefill_tokens == 0)
            throw InvalidConfig("decode_steps", "decode_steps and prefill_tokens are both zero");
        if (w_hot == 0)
            throw InvalidConfig("w_hot", "must be >= 1");
        if (!(zipf_s >= 0.0) || !std::isfinite(zipf_s))
            throw InvalidConfig("zipf_s", "must be a finite non-negative number");
        if (!(recency_boost >= 0.0 && recency_boost <= 1.0))
            throw InvalidConfig("recency_boost", "must lie in [0, 1]");
    }
};

// Unnormalized Zipf weights 1/(rank+1)^s for ranks 0..n-1.
inline std::vector<double> zipf_weights(std::size_t n, double s)
{
    std::vector<double> w(n);
    for (std::size_t r = 0; r < n; ++r)
        w[r] = 1.0 / std::pow(static_cast<double>(r + 1), s);
    return w;
}

namespace detail
{

// Per-layer routing state of the generator within one sequence.
class LayerRouter
{
public:
    LayerRouter(std::vector<double> const & rank_weights, std::vector<ExpertId> const & rank_to_expert,
                std::uint32_t w_hot)
        : weight_(rank_weights.size())
        , w_hot_(w_hot)
        , hot_count_(rank_weights.size(), 0)
    {
        for (std::size_t r = 0; r < rank_weights.size(); ++r)
            weight_[rank_to_expert[r]] = rank_weights[r];
    }

    std::vector<ExpertId> route(Rng & rng, std::uint32_t k, double recency_boost)
    {
        std::size_t const n = weight_.size();
        std::vector<char> chosen(n, 0);
        std::vector<ExpertId> out;
        out.reserve(k);
        std::vector<ExpertId> hot;
        for (std::uint32_t i = 0; i < k; ++i) {
            bool from_hot = uniform01(rng) < recency_boost;
            ExpertId pick = 0;
            if (from_hot) {
                hot.clear();
                for (ExpertId e = 0; e < n; ++e)
                    if (hot_count_[e] > 0 && !chosen[e])
                        hot.push_back(e);
                if (hot.empty())
                    from_hot = false;
                else
                    pick = hot[uniform_index(rng, hot.size())];
            }
            if (!from_hot) {
                double total = 0.0;
                for (ExpertId e = 0; e < n; ++e)
                    if (!chosen[e])
                        total += weight_[e];
                double u = uniform01(rng) * total;
                pick = static_cast<ExpertId>(n);
                for (ExpertId e = 0; e < n; ++e) {
                    if (chosen[e])
                        continue;
                    pick = e;
                    u -= weight_[e];
                    if (u < 0.0)
                        break;
                }
            }
            chosen[pick] = 1;
            out.push_back(pick);
        }
        window_.push_back(out);
        for (ExpertId e : out)
            ++hot_count_[e];
        if (window_.size() > w_hot_) {
            for (ExpertId e : window_.front())
                --hot_count_[e];
            window_.erase(window_.begin());
        }
        return out;
    }

private:
    std::vector<double> weight_;
    std::uint32_t w_hot_;
    std::vector<std::uint32_t> hot_count_;
    std::vector<std::vector<ExpertId>> window_;
};

} // namespace detail

// rank_to_expert[layer][rank]: each layer's permutation of popularity ranks.
inline std::vector<std::vector<ExpertId>> popularity_ranks(std::uint32_t num_layers, std::uint32_t num_experts,
                                                           std::uint64_t popularity_seed)
{
    std::vector<std::vector<ExpertId>> rank_to_expert(num_layers);
    Rng perm_rng(popularity_seed);
    for (auto & perm : rank_to_expert) {
        perm.resize(num_experts);
        for (ExpertId e = 0; e < num_experts; ++e)
            perm[e] = e;
        shuffle(perm_rng, perm.data(), perm.size());
    }
    return rank_to_expert;
}

/*
 * Draws a trace from a Zipf popularity model mixed with short-term reuse.
 * Each layer gets its own permutation of popularity ranks, drawn from
 * popularity_seed and fixed for the whole trace. Within a sequence each
 * routed slot comes, with probability recency_boost, uniformly from the
 * experts this layer routed in the last w_hot steps (prefill tokens
 * included), and otherwise from the Zipf law.
 */
inline RoutingTrace generate_trace(TraceHeader const & header, SyntheticWorkloadConfig const & cfg)
{
    header.validate();
    cfg.validate();

    auto const E = header.num_experts;
    auto const weights = zipf_weights(E, cfg.zipf_s);
    auto const rank_to_expert = popularity_ranks(header.num_layers, E, cfg.popularity_seed);

    Rng rng(cfg.rng_seed);

    RoutingTrace trace;
    trace.header = header;
    trace.events.reserve(static_cast<std::size_t>(cfg.num_seqs) * (cfg.prefill_tokens + cfg.decode_steps) *
                         header.num_layers);
    for (std::uint32_t s = 0; s < cfg.num_seqs; ++s) {
        std::vector<detail::LayerRouter> routers;
        routers.reserve(header.num_layers);
        for (std::uint32_t l = 0; l < header.num_layers; ++l)
            routers.emplace_back(weights, rank_to_expert[l], cfg.w_hot);
        auto emit = [&](Phase phase, std::uint32_t steps) {
            for (std::uint32_t t = 0; t < steps; ++t)
                for (std::uint32_t l = 0; l < header.num_layers; ++l)
                    trace.events.push_back(
                        AccessEvent{s, phase, t, l, routers[l].route(rng, header.top_k, cfg.recency_boost)});
        };
        emit(Phase::prefill, cfg.prefill_tokens);
        emit(Phase::decode, cfg.decode_steps);
    }
    return trace;
}

/*
 * Serialization.
 */
inline void write_trace(RoutingTrace const & trace, std::ostream & os)
{
    using ojson = nlohmann::ordered_json;
    ojson h;
    h["model_name"] = trace.header.model_name;
    h["num_layers"] = trace.header.num_layers;
    h["num_experts"] = trace.header.num_experts;
    h["top_k"] = trace.header.top_k;
    os << h.dump() << '\n';
    for (auto const & ev : trace.events) {
        ojson j;
        j["seq_id"] = ev.seq_id;
        j["phase"] = static_cast<int>(ev.phase);
        j["step"] = ev.step;
        j["layer"] = ev.layer;
        j["experts"] = ev.experts;
        os << j.dump() << '\n';
    }
}

inline void write_trace(RoutingTrace const & trace, std::string const & path)
{
    validate_trace(trace);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os)
        throw Error("cannot open " + path + " for writing");
    write_trace(trace, os);
    if (!os)
        throw Error("write failed: " + path);
}

namespace detail
{

inline void require_keys(nlohmann::json const & j, std::initializer_list<char const *> keys, std::size_t line)
{
    if (!j.is_object())
        throw MalformedFile(line, "record is not a JSON object");
    for (auto const * k : keys)
        if (!j.contains(k))
            throw MalformedFile(line, std::string("missing field \"") + k + "\"");
    for (auto const & [k, v] : j.items())
        if (std::find_if(keys.begin(), keys.end(), [&](char const * x) { return k == x; }) == keys.end())
            throw MalformedFile(line, "unknown field \"" + k + "\"");
}

template <typename T>
T get_uint(nlohmann::json const & j, char const * key, std::size_t line)
{
    auto const & v = j.at(key);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0))
        throw MalformedFile(line, std::string("field \"") + key + "\" must be a non-negative integer");
    auto x = v.get<std::uint64_t>();
    if (x > std::numeric_limits<T>::max())
        throw MalformedFile(line, std::string("field \"") + key + "\" out of range");
    return static_cast<T>(x);
}

} // namespace detail

inline RoutingTrace read_trace(std::istream & is, ValidationReport * report = nullptr)
{
    RoutingTrace trace;
    std::string text;
    std::size_t line = 0;
    auto parse = [&](std::size_t ln) {
        try {
            return nlohmann::json::parse(text);
        } catch (nlohmann::json::exception const & e) {
            throw MalformedFile(ln, std::string("not valid JSON: ") + e.what());
        }
    };

    if (!std::getline(is, text))
        throw MalformedFile(1, "missing header line");
    line = 1;
    {
        auto j = parse(line);
        detail::require_keys(j, {"model_name", "num_layers", "num_experts", "top_k"}, line);
        if (!j["model_name"].is_string())
            throw MalformedFile(line, "field \"model_name\" must be a string");
        trace.header.model_name = j["model_name"].get<std::string>();
        trace.header.num_layers = detail::get_uint<std::uint32_t>(j, "num_layers", line);
        trace.header.num_experts = detail::get_uint<std::uint32_t>(j, "num_experts", line);
        trace.header.top_k = detail::get_uint<std::uint32_t>(j, "top_k", line);
        try {
            trace.header.validate();
        } catch (InvalidConfig const & e) {
            throw MalformedFile(line, e.what());
        }
    }

    TraceValidator validator(trace.header);
    while (std::getline(is, text)) {
        ++line;
        if (text.empty())
            throw MalformedFile(line, "empty line");
        auto j = parse(line);
        detail::require_keys(j, {"seq_id", "phase", "step", "layer", "experts"}, line);
        AccessEvent ev;
        ev.seq_id = detail::get_uint<std::uint64_t>(j, "seq_id", line);
        auto phase = detail::get_uint<std::uint32_t>(j, "phase", line);
        if (phase > 1)
            throw MalformedFile(line, "field \"phase\" must be 0 (prefill) or 1 (decode)");
        ev.phase = static_cast<Phase>(phase);
        ev.step = detail::get_uint<std::uint64_t>(j, "step", line);
        ev.layer = detail::get_uint<std::uint32_t>(j, "layer", line);
        auto const & ex = j["experts"];
        if (!ex.is_array())
            throw MalformedFile(line, "field \"experts\" must be an array");
        ev.experts.reserve(ex.size());
        for (auto const & x : ex) {
            if (!x.is_number_unsigned() && !(x.is_number_integer() && x.get<std::int64_t>() >= 0))
                throw MalformedFile(line, "expert ids must be non-negative integers");
            auto id = x.get<std::uint64_t>();
            if (id >= trace.header.num_experts)
                throw HeaderMismatch(line, "expert " + std::to_string(id) + " >= num_experts " +
                                               std::to_string(trace.header.num_experts));
            ev.experts.push_back(static_cast<ExpertId>(id));
        }
        validator.feed(ev, line);
        trace.events.push_back(std::move(ev));
    }
    auto r = validator.finish(line + 1);
    if (report)
        *report = std::move(r);
    return trace;
}

inline RoutingTrace read_trace(std::string const & path, ValidationReport * report = nullptr)
{
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw Error("cannot open trace file " + path);
    return read_trace(is, report);
}

inline std::string serialize_trace(RoutingTrace const & trace)
{
    std::ostringstream os;
    write_trace(trace, os);
    return os.str();
}

/*
 * Mean fraction of a layer's experts touched by the first n prefill tokens,
 * averaged over sequences and layers, for each n in token_counts.
 */
inline std::vector<std::pair<std::size_t, double>> prefill_coverage(RoutingTrace const & trace,
                                                                    std::vector<std::size_t> const & token_counts)
{
    if (!std::is_sorted(token_counts.begin(), token_counts.end()))
        throw InvalidConfig("token_counts", "must be ascending");
    std::vector<std::pair<std::size_t, double>> out;
    if (token_counts.empty())
        return out;
    std::size_t const need = token_counts.back();
    auto const L = trace.header.num_layers;
    auto const E = trace.header.num_experts;

    // (seq, layer) -> prefill routings in token order
    std::map<std::uint64_t, std::vector<std::vector<AccessEvent const *>>> by_seq;
    for (auto const & ev : trace.events) {
        auto & layers = by_seq[ev.seq_id];
        if (layers.empty())
            layers.resize(L);
        if (ev.phase == Phase::prefill)
            layers[ev.layer].push_back(&ev);
    }
    for (auto const & [seq, layers] : by_seq)
        for (std::uint32_t l = 0; l < L; ++l)
            if (layers[l].size() < need)
                throw InsufficientTokens("sequence " + std::to_string(seq) + " layer " + std::to_string(l) +
                                         " has " + std::to_string(layers[l].size()) + " prefill tokens, need " +
                                         std::to_string(need));

    std::vector<double> sum(token_counts.size(), 0.0);
    for (auto const & [seq, layers] : by_seq) {
        for (std::uint32_t l = 0; l < L; ++l) {
            std::vector<char> seen(E, 0);
            std::size_t distinct = 0, tok = 0;
            for (std::size_t i = 0; i < token_counts.size(); ++i) {
                for (; tok < token_counts[i]; ++tok)
                    for (ExpertId e : layers[l][tok]->experts)
                        if (!seen[e]) {
                            seen[e] = 1;
                            ++distinct;
                        }
                sum[i] += static_cast<double>(distinct) / E;
            }
        }
    }
    double const cells = static_cast<double>(by_seq.size()) * L;
    for (std::size_t i = 0; i < token_counts.size(); ++i)
        out.emplace_back(token_counts[i], cells > 0 ? sum[i] / cells : 0.0);
    return out;
}

} // namespace moecache

#endif
