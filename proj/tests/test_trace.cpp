#include "helpers.hpp"

#include "moecache/trace.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <sstream>

using namespace moecache;
using testing_helpers::make_trace;

namespace
{

std::string header_line(std::uint32_t L, std::uint32_t E, std::uint32_t K)
{
    return R"({"model_name":"m","num_layers":)" + std::to_string(L) + R"(,"num_experts":)" + std::to_string(E) +
           R"(,"top_k":)" + std::to_string(K) + "}\n";
}

RoutingTrace parse(std::string const & text, ValidationReport * rep = nullptr)
{
    std::istringstream is(text);
    return read_trace(is, rep);
}

std::vector<double> ranks(std::vector<double> const & v)
{
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]])
            ++j;
        for (std::size_t k = i; k <= j; ++k)
            r[idx[k]] = (static_cast<double>(i) + static_cast<double>(j)) / 2.0;
        i = j + 1;
    }
    return r;
}

double spearman(std::vector<double> const & a, std::vector<double> const & b)
{
    auto ra = ranks(a), rb = ranks(b);
    double const n = static_cast<double>(a.size());
    double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n, mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (ra[i] - ma) * (rb[i] - mb);
        saa += (ra[i] - ma) * (ra[i] - ma);
        sbb += (rb[i] - mb) * (rb[i] - mb);
    }
    return sab / std::sqrt(saa * sbb);
}

} // namespace

TEST(Header, RejectsTopKAboveExperts)
{
    TraceHeader h{"m", 1, 4, 8};
    try {
        h.validate();
        FAIL();
    } catch (InvalidConfig const & e) {
        EXPECT_EQ(e.field(), "top_k");
    }
    EXPECT_THROW((TraceHeader{"m", 0, 4, 2}.validate()), InvalidConfig);
    EXPECT_THROW((TraceHeader{"m", 1, 4, 0}.validate()), InvalidConfig);
}

TEST(Generate, SinglePrefillToken)
{
    SyntheticWorkloadConfig cfg;
    cfg.num_seqs = 1;
    cfg.decode_steps = 0;
    cfg.prefill_tokens = 1;
    auto t = generate_trace({"m", 1, 8, 2}, cfg);
    ASSERT_EQ(t.events.size(), 1u);
    EXPECT_EQ(t.events[0].phase, Phase::prefill);
    EXPECT_EQ(t.events[0].experts.size(), 2u);
}

TEST(Generate, OneDecodeEventPerStepAndLayer)
{
    SyntheticWorkloadConfig cfg;
    cfg.num_seqs = 1;
    cfg.decode_steps = 3;
    cfg.prefill_tokens = 0;
    auto t = generate_trace({"m", 2, 8, 2}, cfg);
    ASSERT_EQ(t.events.size(), 6u);
    for (std::size_t i = 0; i < 6; ++i) {
        EXPECT_EQ(t.events[i].phase, Phase::decode);
        EXPECT_EQ(t.events[i].step, i / 2);
        EXPECT_EQ(t.events[i].layer, i % 2);
    }
}

TEST(Generate, ConfigErrors)
{
    SyntheticWorkloadConfig cfg;
    cfg.num_seqs = 0;
    EXPECT_THROW(generate_trace({"m", 1, 8, 2}, cfg), InvalidConfig);
    cfg = {};
    cfg.decode_steps = 0;
    cfg.prefill_tokens = 0;
    EXPECT_THROW(generate_trace({"m", 1, 8, 2}, cfg), InvalidConfig);
    cfg = {};
    cfg.recency_boost = 1.5;
    EXPECT_THROW(generate_trace({"m", 1, 8, 2}, cfg), InvalidConfig);
    cfg = {};
    cfg.w_hot = 0;
    EXPECT_THROW(generate_trace({"m", 1, 8, 2}, cfg), InvalidConfig);
    EXPECT_THROW(generate_trace({"m", 1, 4, 8}, SyntheticWorkloadConfig{}), InvalidConfig);
}

TEST(Generate, SatisfiesInvariants)
{
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto t = make_trace(1 + seed % 3, 8 + seed, 1 + seed % 4, 2, seed % 5, 20, seed);
        auto rep = validate_trace(t);
        EXPECT_TRUE(rep.warnings.empty());
        for (auto const & ev : t.events)
            EXPECT_EQ(ev.experts.size(), t.header.top_k);
    }
}

TEST(Generate, Deterministic)
{
    auto a = serialize_trace(make_trace(2, 16, 4, 3, 5, 50, 42));
    auto b = serialize_trace(make_trace(2, 16, 4, 3, 5, 50, 42));
    auto c = serialize_trace(make_trace(2, 16, 4, 3, 5, 50, 43));
    EXPECT_EQ(a, b);
    EXPECT_NE(a, c);
}

TEST(Generate, PopularitySharedAcrossRngSeeds)
{
    auto p = popularity_ranks(3, 16, 0);
    EXPECT_EQ(p, popularity_ranks(3, 16, 0));
    EXPECT_NE(p[0], p[1]);
    auto sorted = p[2];
    std::sort(sorted.begin(), sorted.end());
    for (ExpertId e = 0; e < 16; ++e)
        EXPECT_EQ(sorted[e], e);
}

TEST(Generate, ZipfRanksMatchEmpiricalFrequencies)
{
    auto t = make_trace(1, 64, 8, 1, 0, 10000, 3, 0.0);
    std::vector<double> count(64, 0.0);
    for (auto const & ev : t.events)
        for (auto e : ev.experts)
            count[e] += 1.0;
    auto const w = zipf_weights(64, 1.0);
    auto const perm = popularity_ranks(1, 64, 0)[0];
    std::vector<double> mass(64);
    for (std::size_t r = 0; r < 64; ++r)
        mass[perm[r]] = w[r];
    EXPECT_GT(spearman(count, mass), 0.95);
}

TEST(Serialization, RoundTrip)
{
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto t = make_trace(1 + seed % 3, 8, 2, 2, seed % 4, 10, seed);
        EXPECT_EQ(parse(serialize_trace(t)), t);
    }
}

TEST(Serialization, FieldNamesAndPhaseEncoding)
{
    auto t = testing_helpers::decode_trace(4, 2, {{1, 3}});
    auto text = serialize_trace(t);
    EXPECT_EQ(text, R"({"model_name":"hand","num_layers":1,"num_experts":4,"top_k":2})"
                    "\n"
                    R"({"seq_id":0,"phase":1,"step":0,"layer":0,"experts":[1,3]})"
                    "\n");
}

TEST(Serialization, EmptyEventsIsValid)
{
    auto t = parse(header_line(2, 8, 2));
    EXPECT_TRUE(t.events.empty());
    EXPECT_EQ(t.header.num_layers, 2u);
}

TEST(Serialization, ExpertOutOfRangeNamesLine)
{
    std::string text = header_line(1, 4, 2) + R"({"seq_id":0,"phase":1,"step":0,"layer":0,"experts":[0,1]})" "\n" +
                       R"({"seq_id":0,"phase":1,"step":1,"layer":0,"experts":[0,4]})" "\n";
    try {
        parse(text);
        FAIL();
    } catch (HeaderMismatch const & e) {
        EXPECT_EQ(e.line(), 3u);
        EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos);
    }
}

TEST(Serialization, LayerOutOfRange)
{
    std::string text = header_line(1, 4, 2) + R"({"seq_id":0,"phase":1,"step":0,"layer":1,"experts":[0,1]})" "\n";
    EXPECT_THROW(parse(text), HeaderMismatch);
}

TEST(Serialization, RejectsInvariantViolations)
{
    auto ev = [](char const * body) { return std::string(body) + "\n"; };
    auto const h = header_line(2, 4, 2);
    // duplicate expert
    EXPECT_THROW(parse(h + ev(R"({"seq_id":0,"phase":1,"step":0,"layer":0,"experts":[1,1]})")), MalformedFile);
    // wrong decode cardinality
    EXPECT_THROW(parse(h + ev(R"({"seq_id":0,"phase":1,"step":0,"layer":0,"experts":[1]})")), MalformedFile);
    // out of order
    EXPECT_THROW(parse(h + ev(R"({"seq_id":0,"phase":1,"step":0,"layer":1,"experts":[0,1]})") +
                       ev(R"({"seq_id":0,"phase":1,"step":0,"layer":0,"experts":[0,1]})")),
                 MalformedFile);
    // decode step missing a layer
    EXPECT_THROW(parse(h + ev(R"({"seq_id":0,"phase":1,"step":0,"layer":0,"experts":[0,1]})") +
                       ev(R"({"seq_id":0,"phase":1,"step":1,"layer":0,"experts":[0,1]})")),
                 MalformedFile);
    // unknown field
    EXPECT_THROW(parse(h + ev(R"({"seq_id":0,"phase":1,"step":0,"layer":0,"experts":[0,1],"x":1})")),
                 MalformedFile);
    // missing field
    EXPECT_THROW(parse(h + ev(R"({"seq_id":0,"phase":1,"step":0,"experts":[0,1]})")), MalformedFile);
    // bad phase
    EXPECT_THROW(parse(h + ev(R"({"seq_id":0,"phase":2,"step":0,"layer":0,"experts":[0,1]})")), MalformedFile);
    // empty prefill
    EXPECT_THROW(parse(h + ev(R"({"seq_id":0,"phase":0,"step":0,"layer":0,"experts":[]})")), MalformedFile);
    // not JSON
    EXPECT_THROW(parse(h + "nope\n"), MalformedFile);
    // empty line
    EXPECT_THROW(parse(h + "\n"), MalformedFile);
    // header: K > E
    EXPECT_THROW(parse(header_line(1, 2, 4)), MalformedFile);
    EXPECT_THROW(parse(""), MalformedFile);
}

TEST(Serialization, PrefillUnionEventsWarn)
{
    std::string text = header_line(2, 8, 2) + R"({"seq_id":0,"phase":0,"step":0,"layer":0,"experts":[0,1,5]})" "\n";
    ValidationReport rep;
    auto t = parse(text, &rep);
    EXPECT_EQ(t.events.size(), 1u);
    EXPECT_EQ(rep.warnings.size(), 2u); // size != K, and layer 1 absent
}

TEST(Serialization, WriteRejectsInvalidTrace)
{
    auto t = testing_helpers::decode_trace(4, 2, {{1, 1}});
    testing_helpers::TempDir dir;
    EXPECT_THROW(write_trace(t, dir.str("t.jsonl")), MalformedFile);
}

TEST(PrefillCoverage, OneTokenIsTopKOverE)
{
    auto t = make_trace(3, 8, 2, 4, 4, 0, 9);
    auto cov = prefill_coverage(t, {1});
    ASSERT_EQ(cov.size(), 1u);
    EXPECT_DOUBLE_EQ(cov[0].second, 0.25);
}

TEST(PrefillCoverage, SublinearInTokenCount)
{
    auto t = make_trace(2, 64, 8, 8, 256, 0, 5, 0.0);
    auto cov = prefill_coverage(t, {8, 16, 32, 64, 128, 256});
    for (std::size_t i = 1; i < cov.size(); ++i)
        EXPECT_GT(cov[i].second, cov[i - 1].second);
    for (std::size_t i = 2; i < cov.size(); ++i)
        EXPECT_LE(cov[i].second - cov[i - 1].second, cov[i - 1].second - cov[i - 2].second);
}

TEST(PrefillCoverage, Errors)
{
    auto t = make_trace(1, 8, 2, 2, 4, 2, 1);
    EXPECT_THROW(prefill_coverage(t, {5}), InsufficientTokens);
    EXPECT_THROW(prefill_coverage(t, {2, 1}), InvalidConfig);
}
