#ifndef MOECACHE_CONFIG_HPP
#define MOECACHE_CONFIG_HPP

/*
 * Run configuration: one JSON document drives every command. Unknown keys are
 * rejected so a typo cannot silently fall back to a default.
 *
 *   {
 *     "seed": 1, "out_dir": "out", "jobs": 1,
 *     "trace": "path/to/trace.jsonl",            // or omit and give model + workload
 *     "model": {"model_name": "synthetic", "num_layers": 2, "num_experts": 64, "top_k": 8},
 *     "workload": {"num_seqs": 4, "decode_steps": 256, ...},
 *     "policies": ["lru", {"name": "lecar", "learning_rate": 0.45}],
 *     "capacities": [16, 32],
 *     "cost": {"t_load_us": 3000, "t_compute_us": 158, "loads_serial": true, "ml_scoring_us": 0},
 *     "sim": {"count_prefill": false, "refetch_window": 5},
 *     "training": {"capacity": 32, "d_max": 64, "mask": "belady", ...},
 *     "checkpoint_dir": "out/checkpoints"
 *   }
 */

#include "moecache/errors.hpp"
#include "moecache/simulator.hpp"
#include "moecache/training.hpp"

#include "json.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <type_traits>
#include <vector>

namespace moecache
{

struct PolicyEntry
{
    std::string name;
    LecarParams lecar;
};

struct TrainingSettings
{
    DatasetOptions dataset;
    TrainingConfig fit;
    bool shared_net = false; // one net trained on every layer's samples
};

struct RunConfig
{
    std::uint64_t seed = 1;
    std::string out_dir = "out";
    unsigned jobs = 1;

    std::string trace_path; // empty: synthesize from model + workload
    TraceHeader model{"synthetic", 2, 64, 8};
    SyntheticWorkloadConfig workload;

    std::vector<PolicyEntry> policies;
    std::vector<std::size_t> capacities{16, 32, 48};
    CostModel cost;
    SimOptions sim;
    TrainingSettings training;
    std::string checkpoint_dir; // empty: <out_dir>/checkpoints

    std::string checkpoints() const
    {
        return checkpoint_dir.empty() ? (std::filesystem::path(out_dir) / "checkpoints").string() : checkpoint_dir;
    }

    // Default policy list when none is configured.
    static std::vector<PolicyEntry> default_policies()
    {
        std::vector<PolicyEntry> out;
        for (auto const * n : {"arc", "belady", "fifo", "lecar", "lfu", "lru"})
            out.push_back({n, {}});
        return out;
    }

    void validate(bool require_trace_file = true) const
    {
        if (jobs == 0)
            throw InvalidConfig("jobs", "must be >= 1");
        if (out_dir.empty())
            throw InvalidConfig("out_dir", "must not be empty");
        if (!trace_path.empty() && require_trace_file && !std::filesystem::exists(trace_path))
            throw InvalidConfig("trace", "file not found: " + trace_path);
        if (trace_path.empty()) {
            prefixed("model.", [&] { model.validate(); });
            prefixed("workload.", [&] { workload.validate(); });
        }
        if (capacities.empty())
            throw InvalidConfig("capacities", "must not be empty");
        for (auto c : capacities)
            if (c == 0)
                throw InvalidConfig("capacities", "every capacity must be >= 1");
        for (auto const & p : policies)
            if (std::find(known_policies().begin(), known_policies().end(), p.name) == known_policies().end())
                throw InvalidConfig("policies", "unknown policy \"" + p.name + "\"");
        prefixed("", [&] { cost.validate(); });
        auto const & d = training.dataset;
        auto const & f = training.fit;
        if (d.capacity == 0)
            throw InvalidConfig("training.capacity", "must be >= 1");
        if (!(d.d_max > 0.0) || !std::isfinite(d.d_max))
            throw InvalidConfig("training.d_max", "must be positive");
        if (f.hidden == 0)
            throw InvalidConfig("training.hidden", "must be >= 1");
        if (f.batch_size == 0)
            throw InvalidConfig("training.batch_size", "must be >= 1");
        if (f.max_epochs == 0)
            throw InvalidConfig("training.max_epochs", "must be >= 1");
        if (!(f.validation_fraction > 0.0 && f.validation_fraction < 1.0))
            throw InvalidConfig("training.validation_fraction", "must lie in (0, 1)");
        if (!(f.optimizer.learning_rate > 0.0))
            throw InvalidConfig("training.learning_rate", "must be positive");
        if (!(f.optimizer.weight_decay >= 0.0))
            throw InvalidConfig("training.weight_decay", "must not be negative");
        if (!(f.optimizer.beta1 >= 0.0 && f.optimizer.beta1 < 1.0))
            throw InvalidConfig("training.beta1", "must lie in [0, 1)");
        if (!(f.optimizer.beta2 >= 0.0 && f.optimizer.beta2 < 1.0))
            throw InvalidConfig("training.beta2", "must lie in [0, 1)");
        if (!(f.optimizer.epsilon > 0.0))
            throw InvalidConfig("training.epsilon", "must be positive");
    }

private:
    template <typename F>
    static void prefixed(std::string const & prefix, F && f)
    {
        try {
            f();
        } catch (InvalidConfig const & e) {
            throw InvalidConfig(prefix + e.field(), e.why());
        }
    }
};

namespace detail
{

// Typed, strict view of one JSON object.
class ObjectReader
{
public:
    ObjectReader(nlohmann::json const & j, std::string path)
        : j_(j)
        , path_(std::move(path))
    {
        if (!j_.is_object())
            throw InvalidConfig(path_.empty() ? "<root>" : path_, "expected an object");
    }

    bool has(std::string const & key) const { return j_.contains(key); }

    template <typename T>
    void get(std::string const & key, T & out)
    {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end())
            return;
        out = convert<T>(*it, field(key));
    }

    nlohmann::json const * child(std::string const & key)
    {
        seen_.insert(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    std::string field(std::string const & key) const { return path_.empty() ? key : path_ + "." + key; }

    void finish() const
    {
        for (auto const & [k, v] : j_.items())
            if (!seen_.count(k))
                throw InvalidConfig(field(k), "unknown key");
    }

    template <typename T>
    static T convert(nlohmann::json const & v, std::string const & name)
    {
        if constexpr (std::is_same_v<T, bool>) {
            if (!v.is_boolean())
                throw InvalidConfig(name, "expected true or false");
            return v.get<bool>();
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!v.is_string())
                throw InvalidConfig(name, "expected a string");
            return v.get<std::string>();
        } else if constexpr (std::is_integral_v<T>) {
            if (v.is_number_unsigned())
                return checked<T>(v.get<std::uint64_t>(), name);
            if (v.is_number_integer())
                throw InvalidConfig(name, "must not be negative");
            throw InvalidConfig(name, "expected an integer");
        } else {
            if (!v.is_number())
                throw InvalidConfig(name, "expected a number");
            return v.get<T>();
        }
    }

private:
    template <typename T>
    static T checked(std::uint64_t x, std::string const & name)
    {
        if (x > static_cast<std::uint64_t>(std::numeric_limits<T>::max()))
            throw InvalidConfig(name, "out of range");
        return static_cast<T>(x);
    }

    nlohmann::json const & j_;
    std::string path_;
    std::set<std::string> seen_;
};

inline Duration micros(double us, std::string const & name)
{
    if (!std::isfinite(us))
        throw InvalidConfig(name, "must be finite");
    return Duration(static_cast<Duration::rep>(std::llround(us * 1000.0)));
}

} // namespace detail

inline RunConfig parse_config(nlohmann::json const & j)
{
    using detail::ObjectReader;
    RunConfig c;
    ObjectReader root(j, "");
    root.get("seed", c.seed);
    root.get("out_dir", c.out_dir);
    root.get("jobs", c.jobs);
    root.get("trace", c.trace_path);
    root.get("checkpoint_dir", c.checkpoint_dir);

    if (auto const * m = root.child("model")) {
        ObjectReader r(*m, "model");
        r.get("model_name", c.model.model_name);
        r.get("num_layers", c.model.num_layers);
        r.get("num_experts", c.model.num_experts);
        r.get("top_k", c.model.top_k);
        r.finish();
    }
    if (auto const * w = root.child("workload")) {
        ObjectReader r(*w, "workload");
        r.get("num_seqs", c.workload.num_seqs);
        r.get("decode_steps", c.workload.decode_steps);
        r.get("prefill_tokens", c.workload.prefill_tokens);
        r.get("zipf_s", c.workload.zipf_s);
        r.get("recency_boost", c.workload.recency_boost);
        r.get("w_hot", c.workload.w_hot);
        r.get("popularity_seed", c.workload.popularity_seed);
        r.finish();
    }

    c.policies = RunConfig::default_policies();
    if (auto const * ps = root.child("policies")) {
        if (!ps->is_array())
            throw InvalidConfig("policies", "expected an array");
        c.policies.clear();
        for (std::size_t i = 0; i < ps->size(); ++i) {
            auto const & p = (*ps)[i];
            auto const where = "policies[" + std::to_string(i) + "]";
            PolicyEntry e;
            if (p.is_string()) {
                e.name = p.get<std::string>();
            } else {
                ObjectReader r(p, where);
                if (!r.has("name"))
                    throw InvalidConfig(where + ".name", "missing");
                r.get("name", e.name);
                r.get("learning_rate", e.lecar.learning_rate);
                r.get("discount_base", e.lecar.discount_base);
                r.finish();
                if (e.name != "lecar" && (r.has("learning_rate") || r.has("discount_base")))
                    throw InvalidConfig(where, "parameters given for a policy that takes none");
            }
            c.policies.push_back(e);
        }
    }

    if (auto const * cap = root.child("capacities")) {
        if (!cap->is_array())
            throw InvalidConfig("capacities", "expected an array");
        c.capacities.clear();
        for (std::size_t i = 0; i < cap->size(); ++i)
            c.capacities.push_back(
                ObjectReader::convert<std::size_t>((*cap)[i], "capacities[" + std::to_string(i) + "]"));
    }

    if (auto const * co = root.child("cost")) {
        ObjectReader r(*co, "cost");
        double t_load = 3000.0, t_compute = 158.0, scoring = 0.0;
        r.get("t_load_us", t_load);
        r.get("t_compute_us", t_compute);
        r.get("ml_scoring_us", scoring);
        r.get("loads_serial", c.cost.loads_serial);
        r.finish();
        c.cost.t_load = detail::micros(t_load, "cost.t_load_us");
        c.cost.t_compute = detail::micros(t_compute, "cost.t_compute_us");
        c.cost.ml_scoring = detail::micros(scoring, "cost.ml_scoring_us");
    }

    if (auto const * s = root.child("sim")) {
        ObjectReader r(*s, "sim");
        r.get("count_prefill", c.sim.count_prefill);
        r.get("refetch_window", c.sim.refetch_window);
        r.finish();
    }

    if (auto const * t = root.child("training")) {
        ObjectReader r(*t, "training");
        auto & d = c.training.dataset;
        auto & f = c.training.fit;
        r.get("capacity", d.capacity);
        r.get("d_max", d.d_max);
        r.get("include_prefill_features", d.include_prefill_features);
        std::string mask = to_string(d.mask);
        r.get("mask", mask);
        try {
            d.mask = parse_mask_mode(mask);
        } catch (InvalidConfig const &) {
            throw InvalidConfig("training.mask", "expected belady or all, got '" + mask + "'");
        }
        r.get("hidden", f.hidden);
        r.get("learning_rate", f.optimizer.learning_rate);
        r.get("weight_decay", f.optimizer.weight_decay);
        r.get("beta1", f.optimizer.beta1);
        r.get("beta2", f.optimizer.beta2);
        r.get("epsilon", f.optimizer.epsilon);
        r.get("max_epochs", f.max_epochs);
        r.get("patience", f.patience);
        r.get("batch_size", f.batch_size);
        r.get("validation_fraction", f.validation_fraction);
        r.get("shared_net", c.training.shared_net);
        r.finish();
    }
    root.finish();
    return c;
}

inline RunConfig load_config(std::string const & path)
{
    std::ifstream is(path);
    if (!is)
        throw InvalidConfig("config", "cannot open " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(is);
    } catch (nlohmann::json::parse_error const & e) {
        throw InvalidConfig("config", std::string("not valid JSON: ") + e.what());
    }
    return parse_config(j);
}

// The policy list as simulator specs; seeds and nets are filled in here.
inline std::vector<PolicySpec> policy_specs(RunConfig const & c, std::shared_ptr<NetBank const> nets)
{
    std::vector<PolicySpec> out;
    for (auto const & p : c.policies) {
        PolicySpec s = policy(p.name);
        s.lecar = p.lecar;
        s.lecar.seed = c.seed;
        s.ml_include_prefill_features = c.training.dataset.include_prefill_features;
        if (p.name == "ml")
            s.nets = nets;
        out.push_back(std::move(s));
    }
    return out;
}

} // namespace moecache

#endif
