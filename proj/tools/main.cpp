// moecache: expert-cache simulation command line.

#include "moecache/commands.hpp"

#include "CLI11.hpp"

#include <cstdlib>
#include <iostream>
#include <optional>

namespace
{

using namespace moecache;

struct Globals
{
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out_dir;
    std::optional<unsigned> jobs;
};

struct Overrides
{
    std::optional<std::string> trace;
    std::optional<std::string> checkpoint_dir;
    std::vector<std::string> policies;
    std::vector<std::size_t> capacities;

    std::optional<std::uint32_t> layers, experts, top_k;
    std::optional<std::uint32_t> num_seqs, decode_steps, prefill_tokens, w_hot;
    std::optional<double> zipf_s, recency_boost;

    std::optional<std::string> mask;
    std::optional<double> d_max;
    std::optional<std::size_t> train_capacity, max_epochs;
    bool shared_net = false;
    bool count_prefill = false;
};

RunConfig resolve(Globals const & g, Overrides const & o)
{
    nlohmann::json j = nlohmann::json::object();
    if (!g.config.empty()) {
        std::ifstream is(g.config);
        if (!is)
            throw InvalidConfig("config", "cannot open " + g.config);
        try {
            j = nlohmann::json::parse(is);
        } catch (nlohmann::json::parse_error const & e) {
            throw InvalidConfig("config", std::string("not valid JSON: ") + e.what());
        }
    }
    if (char const * env = std::getenv("MOECACHE_OUT_DIR"); env && *env && j.is_object() && !j.contains("out_dir"))
        j["out_dir"] = env;
    RunConfig c = parse_config(j);

    if (g.seed)
        c.seed = *g.seed;
    if (g.out_dir)
        c.out_dir = *g.out_dir;
    if (g.jobs)
        c.jobs = *g.jobs;
    if (o.trace)
        c.trace_path = *o.trace;
    if (o.checkpoint_dir)
        c.checkpoint_dir = *o.checkpoint_dir;
    if (!o.policies.empty()) {
        c.policies.clear();
        for (auto const & p : o.policies)
            c.policies.push_back({p, {}});
    }
    if (!o.capacities.empty())
        c.capacities = o.capacities;
    if (o.layers)
        c.model.num_layers = *o.layers;
    if (o.experts)
        c.model.num_experts = *o.experts;
    if (o.top_k)
        c.model.top_k = *o.top_k;
    if (o.num_seqs)
        c.workload.num_seqs = *o.num_seqs;
    if (o.decode_steps)
        c.workload.decode_steps = *o.decode_steps;
    if (o.prefill_tokens)
        c.workload.prefill_tokens = *o.prefill_tokens;
    if (o.w_hot)
        c.workload.w_hot = *o.w_hot;
    if (o.zipf_s)
        c.workload.zipf_s = *o.zipf_s;
    if (o.recency_boost)
        c.workload.recency_boost = *o.recency_boost;
    if (o.mask)
        c.training.dataset.mask = parse_mask_mode(*o.mask);
    if (o.d_max)
        c.training.dataset.d_max = *o.d_max;
    if (o.train_capacity)
        c.training.dataset.capacity = *o.train_capacity;
    if (o.max_epochs)
        c.training.fit.max_epochs = *o.max_epochs;
    if (o.shared_net)
        c.training.shared_net = true;
    if (o.count_prefill)
        c.sim.count_prefill = true;
    return c;
}

void add_trace_option(CLI::App * sub, Overrides & o)
{
    sub->add_option("--trace", o.trace, "Trace file (default: synthesize from the config's model and workload)");
}

void add_sim_options(CLI::App * sub, Overrides & o)
{
    add_trace_option(sub, o);
    sub->add_option("--checkpoint-dir", o.checkpoint_dir, "Directory holding the ml policy's nets");
    sub->add_option("--policies", o.policies, "Policies: arc belady fifo lecar lfu lru ml")->delimiter(',');
    sub->add_option("--capacities", o.capacities, "Cache capacities in experts per layer")->delimiter(',');
    sub->add_flag("--count-prefill", o.count_prefill, "Count prefill accesses in hit rates");
}

} // namespace

int main(int argc, char ** argv)
{
    CLI::App app{"Trace-driven expert cache simulator for Mixture-of-Experts inference"};
    app.require_subcommand(1);
    app.fallthrough();

    Globals g;
    Overrides o;
    app.add_option("--config", g.config, "JSON run configuration")->check(CLI::ExistingFile);
    app.add_option("--seed", g.seed, "Run seed (overrides the config)");
    app.add_option("--out-dir", g.out_dir, "Output directory (default: $MOECACHE_OUT_DIR, then ./out)");
    app.add_option("--jobs", g.jobs, "Worker threads for sweeps and per-layer training");

    auto * gen = app.add_subcommand("gen-trace", "Generate a synthetic routing trace");
    gen->add_option("--layers", o.layers, "Number of MoE layers");
    gen->add_option("--experts", o.experts, "Experts per layer");
    gen->add_option("--top-k", o.top_k, "Experts routed per token");
    gen->add_option("--num-seqs", o.num_seqs, "Sequences");
    gen->add_option("--decode-steps", o.decode_steps, "Decode steps per sequence");
    gen->add_option("--prefill-tokens", o.prefill_tokens, "Prompt tokens per sequence");
    gen->add_option("--zipf-s", o.zipf_s, "Zipf exponent of expert popularity");
    gen->add_option("--recency-boost", o.recency_boost, "Probability of drawing from recently routed experts");
    gen->add_option("--w-hot", o.w_hot, "Recency window in steps");

    auto * train = app.add_subcommand("train", "Build the labelled dataset and train the eviction nets");
    add_trace_option(train, o);
    train->add_option("--checkpoint-dir", o.checkpoint_dir, "Where to write the nets");
    train->add_option("--mask", o.mask, "Loss mask: belady or all")->check(CLI::IsMember({"belady", "all"}));
    train->add_option("--d-max", o.d_max, "Distance clamp for targets");
    train->add_option("--capacity", o.train_capacity, "Oracle cache capacity used for labelling");
    train->add_option("--max-epochs", o.max_epochs, "Epoch limit");
    train->add_flag("--shared-net", o.shared_net, "Train one net on every layer's samples");

    auto * eval = app.add_subcommand("eval", "Sweep policies x capacities and write reports");
    add_sim_options(eval, o);

    auto * diag = app.add_subcommand("diagnose", "Refetch rates, eviction duels and eviction timelines");
    add_sim_options(diag, o);

    HardwareBudget budget;
    std::string vram, nonexpert, experts;
    auto * size = app.add_subcommand(
        "cache-size",
        "Experts per layer that fit in VRAM: floor((vram - non-expert) * experts-per-layer / all-experts), "
        "where all-experts is the size of every expert of every layer and the result is clamped to "
        "[0, experts-per-layer]. Sizes accept B, KB, MB, GB, TB, KiB, MiB, GiB, TiB.");
    size->add_option("--vram", vram, "Usable VRAM")->required();
    size->add_option("--nonexpert", nonexpert, "Non-expert weights and activations")->required();
    size->add_option("--all-experts", experts, "Size of all expert weights of the model")->required();
    size->add_option("--experts-per-layer", budget.experts_per_layer, "Experts per layer")->required();

    std::string trace_path;
    auto * check = app.add_subcommand("validate-trace", "Check a trace file against the schema");
    check->add_option("trace", trace_path, "Trace file")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            cmd_gen_trace(resolve(g, o), std::cout);
        } else if (*train) {
            cmd_train(resolve(g, o), std::cout);
        } else if (*eval) {
            cmd_eval(resolve(g, o), std::cout);
        } else if (*diag) {
            cmd_diagnose(resolve(g, o), std::cout);
        } else if (*size) {
            budget.vram_bytes = parse_bytes(vram, "vram");
            budget.nonexpert_bytes = parse_bytes(nonexpert, "nonexpert");
            budget.all_experts_bytes = parse_bytes(experts, "all_experts");
            cmd_cache_size(budget, std::cout);
        } else if (*check) {
            cmd_validate_trace(trace_path, std::cout);
        }
    } catch (std::exception const & e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
