// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 on any FAIL.

#include "helpers.hpp"

#include "moecache/commands.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <sstream>

using namespace moecache;
namespace fs = std::filesystem;

namespace
{

struct Outcome
{
    bool ok = false;
    std::string detail;
};

std::string fmt(char const * f, auto... args)
{
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

// The dominance grid, shared with the refetch ordering check.
struct GridCell
{
    std::string label;
    std::shared_ptr<CompiledTrace> ct;
    std::size_t capacity;
};

std::vector<GridCell> dominance_grid(std::size_t & traces, std::size_t & skipped)
{
    std::vector<GridCell> cells;
    traces = skipped = 0;
    std::uint64_t seed = 100;
    for (std::uint32_t L : {1u, 2u, 4u})
        for (std::uint32_t E : {8u, 64u})
            for (std::uint32_t K : {2u, 8u})
                for (int rep = 0; rep < 2; ++rep) {
                    auto t = testing_helpers::make_trace(L, E, K, 3, 16, 96, seed++);
                    auto ct = std::make_shared<CompiledTrace>(t);
                    ++traces;
                    for (std::size_t pct : {25u, 50u, 75u}) {
                        std::size_t const c = E * pct / 100;
                        if (c < K) {
                            ++skipped;
                            continue;
                        }
                        cells.push_back({fmt("L=%u E=%u K=%u seed=%llu C=%zu", L, E, K,
                                             static_cast<unsigned long long>(seed - 1), c),
                                         ct, c});
                    }
                }
    return cells;
}

Outcome oracle_dominance()
{
    std::size_t traces = 0, skipped = 0;
    auto cells = dominance_grid(traces, skipped);
    std::size_t violations = 0, comparisons = 0;
    std::string first;
    for (auto const & cell : cells) {
        auto const & h = cell.ct->header;
        // an untrained net stands in for the learned policy; Belady must beat any eviction rule
        auto bank = std::make_shared<NetBank>();
        bank->nets.push_back(std::make_shared<EvictionNet<float>>(EvictionNet<float>::random(h.num_experts, 32, 1)));
        PolicySpec ml = policy("ml");
        ml.nets = bank;
        for (bool prefill : {false, true}) {
            SimOptions opt;
            opt.count_prefill = prefill;
            auto const best = simulate(*cell.ct, policy("belady"), cell.capacity, CostModel{}, opt).hit_rate;
            for (auto const & spec :
                 {policy("lru"), policy("lfu"), policy("fifo"), policy("arc"), policy("lecar"), ml}) {
                ++comparisons;
                auto const r = simulate(*cell.ct, spec, cell.capacity, CostModel{}, opt).hit_rate;
                if (r > best) {
                    if (!violations)
                        first = spec.name + " on " + cell.label + (prefill ? " (all accesses)" : " (decode)");
                    ++violations;
                }
            }
        }
    }
    return {traces >= 20 && violations == 0,
            fmt("%zu traces, %zu cells, %zu comparisons, %zu violations%s%s, %zu C<K cells skipped", traces,
                cells.size(), comparisons, violations, violations ? ", first: " : "", first.c_str(), skipped)};
}

Outcome brute_force_equivalence()
{
    std::size_t traces = 0, runs = 0, mismatches = 0;
    for (std::uint64_t seed = 0; traces < 100; ++seed) {
        std::uint32_t const E = 3 + seed % 8;
        std::uint32_t const K = 1 + seed % std::min<std::uint32_t>(3, E);
        std::uint32_t const decode = std::min<std::uint32_t>(40, 190 / K / 2);
        auto t = testing_helpers::make_trace(1, E, K, 2, seed % 3, decode, seed);
        CompiledTrace ct(t);
        if (ct.streams[0].num_positions > 200)
            continue;
        ++traces;
        for (std::size_t cap = K; cap <= E; ++cap)
            for (bool lfu : {false, true}) {
                std::unique_ptr<CachePolicy> cache;
                if (lfu)
                    cache = std::make_unique<LfuCache>(cap, E);
                else
                    cache = std::make_unique<LruCache>(cap, E);
                auto d = testing_helpers::replay(*cache, ct.streams[0]);
                auto ref = testing_helpers::naive_decisions(ct.streams[0], cap, lfu);
                ++runs;
                bool same = d.size() == ref.size();
                for (std::size_t i = 0; same && i < d.size(); ++i)
                    same = d[i].evicted == ref[i];
                mismatches += !same;
            }
    }
    return {mismatches == 0, fmt("%zu traces, %zu decision sequences, %zu mismatches", traces, runs, mismatches)};
}

Outcome update_rule()
{
    FeatureTracker t(8);
    std::vector<ExpertId> const first{4}, second{3};
    update_features(t, first);
    bool ok = t.recency(4) == 1 && t.frequency(4) == 1;
    for (ExpertId e = 0; e < 8; ++e)
        if (e != 4)
            ok = ok && t.recency(e) == FeatureTracker::infinity && t.frequency(e) == 0;
    update_features(t, second);
    ok = ok && t.recency(3) == 1 && t.recency(4) == 2 && t.frequency(3) == 1 && t.frequency(4) == 1;
    for (ExpertId e = 0; e < 8; ++e)
        if (e != 3 && e != 4)
            ok = ok && t.recency(e) == FeatureTracker::infinity;
    return {ok, fmt("after t=1: r[3]=%llu r[4]=%llu f[3]=%llu f[4]=%llu", static_cast<unsigned long long>(t.recency(3)),
                    static_cast<unsigned long long>(t.recency(4)), static_cast<unsigned long long>(t.frequency(3)),
                    static_cast<unsigned long long>(t.frequency(4)))};
}

Outcome gradient_check()
{
    double const h = 1e-4;
    double worst = 0.0;
    std::size_t compared = 0;
    for (std::uint64_t n = 0; n < 20; ++n) {
        Rng rng(900 + n);
        auto net = EvictionNet<double>::random(4, 8, 1900 + n);
        Matrix<double> x(8, 6), t(4, 6), m(4, 6);
        for (Eigen::Index j = 0; j < 6; ++j) {
            for (Eigen::Index i = 0; i < 8; ++i)
                x(i, j) = uniform01(rng);
            for (Eigen::Index i = 0; i < 4; ++i) {
                t(i, j) = uniform01(rng);
                m(i, j) = uniform01(rng) < 0.75 ? 1.0 : 0.0;
            }
        }
        m(0, 0) = 1.0;
        auto grad = NetParams<double>::zeros(4, 8);
        net.loss(x, t, m, &grad);
        std::vector<Eigen::Map<Matrix<double>>> analytic;
        grad.for_each([&](auto & g) { analytic.emplace_back(g.data(), g.size(), 1); });
        std::size_t k = 0;
        net.params().for_each([&](auto & p) {
            auto const & g = analytic[k++];
            for (Eigen::Index i = 0; i < p.size(); ++i) {
                double const keep = p.data()[i];
                p.data()[i] = keep + h;
                double const up = net.loss(x, t, m);
                p.data()[i] = keep - h;
                double const down = net.loss(x, t, m);
                p.data()[i] = keep;
                double const num = (up - down) / (2 * h);
                double const an = g(i);
                worst = std::max(worst, std::abs(num - an) / std::max(1e-6, std::abs(num) + std::abs(an)));
                ++compared;
            }
        });
    }
    return {compared > 0 && worst < 1e-4,
            fmt("20 nets (E=4, hidden 8), %zu parameters, max relative error %.3g", compared, worst)};
}

Outcome learned_efficacy()
{
    TraceHeader const h{"synthetic", 1, 64, 8};
    SyntheticWorkloadConfig w;
    w.num_seqs = 4;
    w.decode_steps = 512;
    w.prefill_tokens = 32;
    w.zipf_s = 1.0;
    w.recency_boost = 0.3;
    w.w_hot = 4;

    auto trained_policy = [&](MaskMode mask, std::size_t & best_epoch) {
        DatasetOptions dopt;
        dopt.capacity = 32;
        dopt.d_max = 16.0;
        dopt.mask = mask;
        std::vector<LayerDataset> parts;
        for (std::uint64_t s = 0; s < 32; ++s) {
            w.rng_seed = 1000 + s;
            parts.push_back(build_dataset(generate_trace(h, w), dopt)[0]);
        }
        TrainingConfig tc;
        tc.seed = 7;
        auto fit = train<float>(concat(parts), tc);
        best_epoch = fit.best_epoch;
        auto bank = std::make_shared<NetBank>();
        bank->nets.push_back(std::make_shared<EvictionNet<float>>(fit.net));
        PolicySpec ml = policy("ml");
        ml.nets = bank;
        return ml;
    };
    std::size_t epoch_all = 0, epoch_belady = 0;
    auto const ml_all = trained_policy(MaskMode::all, epoch_all);
    auto const ml_belady = trained_policy(MaskMode::belady, epoch_belady);

    double lru = 0, lfu = 0, mlr = 0, ref = 0;
    int const held_out = 10;
    for (int s = 0; s < held_out; ++s) {
        w.rng_seed = 5000 + static_cast<std::uint64_t>(s);
        CompiledTrace ct(generate_trace(h, w));
        lru += simulate(ct, policy("lru"), 32).hit_rate * 100 / held_out;
        lfu += simulate(ct, policy("lfu"), 32).hit_rate * 100 / held_out;
        mlr += simulate(ct, ml_all, 32).hit_rate * 100 / held_out;
        ref += simulate(ct, ml_belady, 32).hit_rate * 100 / held_out;
    }
    bool const ok = mlr >= std::max(lru, lfu) - 0.5 && mlr - std::min(lru, lfu) >= 2.0;
    return {ok, fmt("ml %.2f%% (mask all, best epoch %zu), lru %.2f%%, lfu %.2f%% over %d held-out traces; "
                    "belady-mask ml for reference %.2f%% (best epoch %zu)",
                    mlr, epoch_all, lru, lfu, held_out, ref, epoch_belady)};
}

Outcome refetch_ordering()
{
    std::size_t traces = 0, skipped = 0, violations = 0;
    auto cells = dominance_grid(traces, skipped);
    double belady_sum = 0, lru_sum = 0;
    std::string first;
    for (auto const & cell : cells) {
        auto const b = refetch_rate(*cell.ct, policy("belady"), cell.capacity, 5);
        auto const l = refetch_rate(*cell.ct, policy("lru"), cell.capacity, 5);
        belady_sum += b;
        lru_sum += l;
        if (b > l) {
            if (!violations)
                first = fmt("%s (%.4f > %.4f)", cell.label.c_str(), b, l);
            ++violations;
        }
    }
    auto const n = static_cast<double>(cells.size());
    return {violations == 0, fmt("%zu cells, %zu violations%s%s, mean belady %.4f, mean lru %.4f", cells.size(),
                                 violations, violations ? ", first: " : "", first.c_str(), belady_sum / n,
                                 lru_sum / n)};
}

Outcome latency_model()
{
    CostModel cost;
    auto const two = cost.group_latency(8, 2);
    auto const none = cost.group_latency(8, 0);
    using namespace std::chrono_literals;
    return {two == 6ms && none == 1264us,
            fmt("2 misses: %.3f ms, all hits (K=8): %.3f ms", std::chrono::duration<double, std::milli>(two).count(),
                std::chrono::duration<double, std::milli>(none).count())};
}

Outcome cache_size()
{
    std::uint64_t const GB = 1'000'000'000ULL;
    auto const c = cache_size_calc({25 * GB, 10 * GB, 30 * GB, 128});
    auto const z = cache_size_calc({10 * GB, 10 * GB, 30 * GB, 128});
    return {c == 64 && z == 0,
            fmt("15 GB headroom -> %llu, zero headroom -> %llu", static_cast<unsigned long long>(c),
                static_cast<unsigned long long>(z))};
}

Outcome determinism()
{
    testing_helpers::TempDir dir;
    std::ostringstream log;
    for (auto const * run : {"a", "b"}) {
        RunConfig c;
        c.seed = 42;
        c.out_dir = dir.str(run);
        c.model = {"synthetic", 2, 16, 2};
        c.workload.num_seqs = 2;
        c.workload.decode_steps = 64;
        c.workload.prefill_tokens = 8;
        c.capacities = {4, 8};
        c.policies = RunConfig::default_policies();
        c.policies.push_back({"ml", {}});
        c.training.dataset.capacity = 8;
        c.training.dataset.d_max = 16.0;
        c.training.fit.hidden = 32;
        c.training.fit.batch_size = 32;
        c.training.fit.max_epochs = 10;
        c.jobs = 2;
        cmd_gen_trace(c, log);
        c.trace_path = (fs::path(c.out_dir) / trace_file_name()).string();
        cmd_train(c, log);
        cmd_eval(c, log);
    }
    std::size_t files = 0, differ = 0;
    std::string first;
    for (auto const & e : fs::recursive_directory_iterator(dir.str("a"))) {
        if (!e.is_regular_file())
            continue;
        ++files;
        auto const rel = fs::relative(e.path(), dir.str("a"));
        auto const other = fs::path(dir.str("b")) / rel;
        if (!fs::exists(other) ||
            detail::read_file(e.path().string()) != detail::read_file(other.string())) {
            if (!differ)
                first = rel.string();
            ++differ;
        }
    }
    return {files >= 8 && differ == 0,
            fmt("%zu files compared, %zu differ%s%s", files, differ, differ ? ", first: " : "", first.c_str())};
}

} // namespace

int main()
{
    std::vector<std::pair<std::string, std::function<Outcome()>>> const checks = {
        {"oracle-dominance", oracle_dominance},
        {"brute-force-equivalence", brute_force_equivalence},
        {"update-rule", update_rule},
        {"gradient-check", gradient_check},
        {"learned-policy-efficacy", learned_efficacy},
        {"refetch-ordering", refetch_ordering},
        {"latency-model", latency_model},
        {"cache-size-calculator", cache_size},
        {"determinism", determinism},
    };
    int failed = 0;
    for (auto const & [name, check] : checks) {
        auto const t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = check();
        } catch (std::exception const & e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        auto const secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::cout << (o.ok ? "PASS " : "FAIL ") << name << ": " << o.detail << fmt(" [%.1fs]", secs) << std::endl;
        failed += !o.ok;
    }
    std::cout << (failed ? "FAILED " : "ALL PASSED ") << checks.size() - static_cast<std::size_t>(failed) << "/"
              << checks.size() << std::endl;
    return failed ? 1 : 0;
}
