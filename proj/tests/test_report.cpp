#include "helpers.hpp"

#include "moecache/config.hpp"
#include "moecache/report.hpp"

#include <gtest/gtest.h>

using namespace moecache;

namespace
{

std::vector<SimReport> sample_rows()
{
    auto t = testing_helpers::make_trace(2, 16, 2, 2, 4, 30, 3);
    CompiledTrace ct(t);
    return sweep(ct, {policy("lru"), policy("belady")}, {4, 8});
}

void expect_same(SimReport const & a, SimReport const & b)
{
    EXPECT_EQ(detail::report_cells(a), detail::report_cells(b));
}

std::string field_of(nlohmann::json const & j)
{
    try {
        parse_config(j).validate(false);
    } catch (InvalidConfig const & e) {
        return e.field();
    }
    return "";
}

} // namespace

TEST(Report, JsonRoundTrip)
{
    auto rows = sample_rows();
    auto text = report_json(rows);
    auto back = parse_report_json(text);
    ASSERT_EQ(back.size(), rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i)
        expect_same(back[i], rows[i]);
    EXPECT_EQ(report_json(back), text);
    EXPECT_EQ(nlohmann::json::parse(text).at("schema_version"), 1);
}

TEST(Report, CsvRoundTrip)
{
    auto rows = sample_rows();
    auto text = report_csv(rows);
    EXPECT_EQ(text.substr(0, text.find('\n')),
              "policy,capacity,hits,misses,compulsory_misses,hit_rate,hit_rate_warm,io_count,prefill_hits,"
              "prefill_misses,decode_hits,decode_misses,decode_steps,est_decode_latency_ns,est_prefill_latency_ns,"
              "tokens_per_second_est,refetch_window,decode_evictions,refetches,refetch_within_w");
    auto back = parse_report_csv(text);
    ASSERT_EQ(back.size(), 4u);
    for (std::size_t i = 0; i < rows.size(); ++i)
        expect_same(back[i], rows[i]);
    EXPECT_EQ(back[0].hit_rate, rows[0].hit_rate);
    EXPECT_EQ(back[3].tokens_per_second_est, rows[3].tokens_per_second_est);
}

TEST(Report, CsvRejectsMalformed)
{
    auto text = report_csv(sample_rows());
    EXPECT_THROW(parse_report_csv("policy,capacity\nlru,4\n"), MalformedFile);
    auto broken = text;
    broken.replace(broken.find("lru,"), 4, "lru,x");
    EXPECT_THROW(parse_report_csv(broken), MalformedFile);
    EXPECT_THROW(parse_report_json("{\"schema_version\":2,\"rows\":[]}"), MalformedFile);
    EXPECT_THROW(parse_report_json("[1,2"), MalformedFile);
}

TEST(Report, SeriesRoundTrip)
{
    auto rows = sample_rows();
    auto hr = parse_hit_rate_series(hit_rate_series_csv(rows));
    auto tp = parse_throughput_series(throughput_series_csv(rows));
    ASSERT_EQ(hr.size(), rows.size());
    ASSERT_EQ(tp.size(), rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        EXPECT_EQ(hr[i].policy, rows[i].policy);
        EXPECT_EQ(hr[i].capacity, rows[i].capacity);
        EXPECT_EQ(hr[i].a, rows[i].hit_rate);
        EXPECT_EQ(hr[i].b, rows[i].hit_rate_warm);
        EXPECT_EQ(tp[i].a, rows[i].tokens_per_second_est);
        double const ms = std::chrono::duration<double, std::milli>(rows[i].est_decode_latency).count();
        EXPECT_DOUBLE_EQ(tp[i].b, ms);
    }
    EXPECT_THROW(parse_hit_rate_series(throughput_series_csv(rows)), MalformedFile);
}

TEST(Report, TableListsEveryRow)
{
    auto table = report_table(sample_rows());
    EXPECT_NE(table.find("belady"), std::string::npos);
    EXPECT_NE(table.find("lru"), std::string::npos);
    EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 5);
}

TEST(Diagnostics, RoundTrip)
{
    Diagnostics d;
    d.capacity = 8;
    d.refetch_window = 5;
    d.refetch = {{"lru", 10, 3, 0.3, 0.3}, {"belady", 7, 0, 0.0, 0.0}};
    d.duel_policies = {"belady", "lru"};
    d.duel = {{0.5, 0.8}, {0.2, 0.5}};
    EXPECT_EQ(parse_diagnostics_json(diagnostics_json(d)), d);

    auto j = nlohmann::json::parse(diagnostics_json(d));
    j["duel"]["fraction_row_better"] = {{0.5}};
    EXPECT_THROW(parse_diagnostics_json(j.dump()), MalformedFile);
}

TEST(Timeline, HandTrace)
{
    auto t = testing_helpers::decode_trace(4, 1, {{0}, {1}, {2}});
    CompiledTrace ct(t);
    SimOptions opt;
    opt.keep_eviction_log = true;
    auto r = simulate(ct, policy("lru"), 2, CostModel{}, opt);
    auto rows = build_timeline(t, r.eviction_log);
    ASSERT_EQ(rows.size(), 4u);
    EXPECT_EQ(rows[2].kind, "access");
    EXPECT_EQ(rows[3], (TimelineRow{"evict", 0, Phase::decode, 2, 0, {0}}));
    auto csv = timeline_csv(rows);
    EXPECT_EQ(csv, "kind,seq_id,phase,step,layer,experts\n"
                   "access,0,decode,0,0,0\n"
                   "access,0,decode,1,0,1\n"
                   "access,0,decode,2,0,2\n"
                   "evict,0,decode,2,0,0\n");
    EXPECT_EQ(parse_timeline_csv(csv), rows);
}

TEST(Timeline, RowCountAndOrderOnGeneratedTrace)
{
    auto t = testing_helpers::make_trace(2, 16, 4, 2, 6, 20, 4);
    CompiledTrace ct(t);
    SimOptions opt;
    opt.keep_eviction_log = true;
    opt.count_prefill = true;
    auto r = simulate(ct, policy("fifo"), 6, CostModel{}, opt);
    auto rows = build_timeline(t, r.eviction_log);
    EXPECT_EQ(rows.size(), t.events.size() + r.eviction_log.size());
    // every eviction directly follows an access or eviction of the same layer and sequence
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].kind != "evict")
            continue;
        ASSERT_GT(i, 0u);
        EXPECT_EQ(rows[i - 1].layer, rows[i].layer);
        EXPECT_EQ(rows[i - 1].seq_id, rows[i].seq_id);
        EXPECT_EQ(rows[i - 1].phase, rows[i].phase);
    }
    EXPECT_EQ(parse_timeline_csv(timeline_csv(rows)), rows);

    auto extra = r.eviction_log;
    extra.push_back({99, Phase::decode, 0, 0, 0, 1});
    EXPECT_THROW(build_timeline(t, extra), Error);
}

TEST(Config, Defaults)
{
    auto c = parse_config(nlohmann::json::object());
    EXPECT_EQ(c.seed, 1u);
    EXPECT_EQ(c.out_dir, "out");
    EXPECT_EQ(c.policies.size(), 6u);
    EXPECT_EQ(c.checkpoints(), (std::filesystem::path("out") / "checkpoints").string());
    EXPECT_EQ(c.training.fit.batch_size, 256u);
    EXPECT_EQ(c.training.fit.patience, 10u);
    EXPECT_NO_THROW(c.validate(false));
}

TEST(Config, ParsesEverySection)
{
    auto j = nlohmann::json::parse(R"({
      "seed": 9, "out_dir": "o", "jobs": 2, "checkpoint_dir": "ck",
      "model": {"model_name": "m", "num_layers": 3, "num_experts": 16, "top_k": 2},
      "workload": {"num_seqs": 2, "decode_steps": 10, "prefill_tokens": 4, "zipf_s": 1.2,
                   "recency_boost": 0.1, "w_hot": 3, "popularity_seed": 5},
      "policies": ["lru", {"name": "lecar", "learning_rate": 0.3, "discount_base": 0.01}],
      "capacities": [4, 8],
      "cost": {"t_load_us": 2500, "t_compute_us": 100.5, "ml_scoring_us": 2, "loads_serial": false},
      "sim": {"count_prefill": true, "refetch_window": 3},
      "training": {"capacity": 4, "d_max": 16, "mask": "all", "hidden": 32, "learning_rate": 0.01,
                   "weight_decay": 0, "max_epochs": 5, "patience": 2, "batch_size": 8,
                   "validation_fraction": 0.2, "shared_net": true, "include_prefill_features": false}
    })");
    auto c = parse_config(j);
    EXPECT_EQ(c.seed, 9u);
    EXPECT_EQ(c.checkpoints(), "ck");
    EXPECT_EQ(c.model.num_layers, 3u);
    EXPECT_EQ(c.workload.w_hot, 3u);
    EXPECT_EQ(c.workload.popularity_seed, 5u);
    ASSERT_EQ(c.policies.size(), 2u);
    EXPECT_DOUBLE_EQ(c.policies[1].lecar.learning_rate, 0.3);
    EXPECT_EQ(c.capacities, (std::vector<std::size_t>{4, 8}));
    EXPECT_EQ(c.cost.t_load, std::chrono::microseconds(2500));
    EXPECT_EQ(c.cost.t_compute.count(), 100500);
    EXPECT_FALSE(c.cost.loads_serial);
    EXPECT_TRUE(c.sim.count_prefill);
    EXPECT_EQ(c.training.dataset.mask, MaskMode::all);
    EXPECT_TRUE(c.training.shared_net);
    EXPECT_FALSE(c.training.dataset.include_prefill_features);
    EXPECT_NO_THROW(c.validate(false));

    auto specs = policy_specs(c, nullptr);
    EXPECT_EQ(specs[1].lecar.seed, 9u);
}

TEST(Config, ErrorsNameTheField)
{
    using nlohmann::json;
    EXPECT_EQ(field_of(json::parse(R"({"sed": 1})")), "sed");
    EXPECT_EQ(field_of(json::parse(R"({"seed": -1})")), "seed");
    EXPECT_EQ(field_of(json::parse(R"({"jobs": 0})")), "jobs");
    EXPECT_EQ(field_of(json::parse(R"({"model": {"top_k": 99}})")), "model.top_k");
    EXPECT_EQ(field_of(json::parse(R"({"model": {"num_experts": 0}})")), "model.num_experts");
    EXPECT_EQ(field_of(json::parse(R"({"workload": {"zipf_s": -1}})")), "workload.zipf_s");
    EXPECT_EQ(field_of(json::parse(R"({"workload": {"extra": 1}})")), "workload.extra");
    EXPECT_EQ(field_of(json::parse(R"({"policies": ["lru", "magic"]})")), "policies");
    EXPECT_EQ(field_of(json::parse(R"({"policies": [{"name": "lru", "learning_rate": 1}]})")), "policies[0]");
    EXPECT_EQ(field_of(json::parse(R"({"capacities": [4, -2]})")), "capacities[1]");
    EXPECT_EQ(field_of(json::parse(R"({"capacities": []})")), "capacities");
    EXPECT_EQ(field_of(json::parse(R"({"cost": {"t_load_us": 0}})")), "cost.t_load");
    EXPECT_EQ(field_of(json::parse(R"({"sim": {"refetch_window": "5"}})")), "sim.refetch_window");
    EXPECT_EQ(field_of(json::parse(R"({"training": {"mask": "some"}})")), "training.mask");
    EXPECT_EQ(field_of(json::parse(R"({"training": {"batch_size": 0}})")), "training.batch_size");
    EXPECT_EQ(field_of(json::parse(R"({"training": {"validation_fraction": 1.5}})")), "training.validation_fraction");
    EXPECT_EQ(field_of(json::parse("[]")), "<root>");
}

TEST(Config, LoadFromFile)
{
    testing_helpers::TempDir dir;
    detail::write_file(dir.str("c.json"), R"({"seed": 4, "capacities": [2]})");
    auto c = load_config(dir.str("c.json"));
    EXPECT_EQ(c.seed, 4u);
    detail::write_file(dir.str("bad.json"), "{");
    EXPECT_THROW(load_config(dir.str("bad.json")), InvalidConfig);
    EXPECT_THROW(load_config(dir.str("missing.json")), InvalidConfig);

    RunConfig r;
    r.trace_path = dir.str("nope.jsonl");
    try {
        r.validate();
        FAIL();
    } catch (InvalidConfig const & e) {
        EXPECT_EQ(e.field(), "trace");
    }
}
