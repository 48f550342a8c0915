#ifndef MOECACHE_COMMANDS_HPP
#define MOECACHE_COMMANDS_HPP

/*
 * The command-line workflows as library calls. Each command writes its files
 * into a staging directory, parses them back, and only then moves them into
 * place, so a failed command leaves no partial outputs.
 */

#include "moecache/config.hpp"
#include "moecache/eviction_net.hpp"
#include "moecache/report.hpp"
#include "moecache/simulator.hpp"
#include "moecache/trace.hpp"
#include "moecache/training.hpp"

#include <atomic>
#include <filesystem>
#include <map>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

namespace moecache
{

namespace fs = std::filesystem;

// Files staged next to their destination directory and moved in by commit().
class StagedOutput
{
public:
    explicit StagedOutput(fs::path dest)
        : dest_(std::move(dest))
    {
        staging_ = dest_ / (".staging-" + std::to_string(counter()++));
        fs::remove_all(staging_);
        fs::create_directories(staging_);
    }

    StagedOutput(StagedOutput const &) = delete;
    StagedOutput & operator=(StagedOutput const &) = delete;

    ~StagedOutput()
    {
        std::error_code ec;
        fs::remove_all(staging_, ec);
    }

    fs::path path(std::string const & name) const { return staging_ / name; }

    void write(std::string const & name, std::string const & text)
    {
        detail::write_file(path(name).string(), text);
        names_.push_back(name);
    }

    // Registers a file that was written directly to path(name).
    void add(std::string const & name) { names_.push_back(name); }

    void commit()
    {
        for (auto const & n : names_)
            fs::rename(staging_ / n, dest_ / n);
        names_.clear();
    }

    fs::path const & dest() const { return dest_; }

private:
    static std::atomic<unsigned> & counter()
    {
        static std::atomic<unsigned> c{0};
        return c;
    }

    fs::path dest_;
    fs::path staging_;
    std::vector<std::string> names_;
};

inline std::string trace_file_name() { return "trace.jsonl"; }
inline std::string layer_checkpoint_name(std::uint32_t layer) { return "layer_" + std::to_string(layer) + ".bin"; }
inline std::string shared_checkpoint_name() { return "shared.bin"; }

// The configured trace file, or a trace synthesized from model + workload.
inline RoutingTrace load_trace(RunConfig const & cfg)
{
    if (!cfg.trace_path.empty())
        return read_trace(cfg.trace_path);
    auto w = cfg.workload;
    w.rng_seed = cfg.seed;
    return generate_trace(cfg.model, w);
}

// ---- gen-trace

inline void cmd_gen_trace(RunConfig const & cfg, std::ostream & log)
{
    cfg.validate(false);
    cfg.model.validate();
    auto w = cfg.workload;
    w.rng_seed = cfg.seed;
    auto trace = generate_trace(cfg.model, w);
    fs::create_directories(cfg.out_dir);
    StagedOutput out(cfg.out_dir);
    out.write(trace_file_name(), serialize_trace(trace));
    ValidationReport rep;
    read_trace(out.path(trace_file_name()).string(), &rep);
    out.commit();
    auto const & h = trace.header;
    log << "wrote " << (out.dest() / trace_file_name()).string() << ": model " << h.model_name << ", L=" << h.num_layers
        << " E=" << h.num_experts << " K=" << h.top_k << ", " << rep.sequences << " sequences, "
        << rep.prefill_events << " prefill events, " << rep.decode_events << " decode events\n";
}

// ---- train

struct TrainedLayer
{
    std::uint32_t layer = 0; // for a shared net, 0
    TrainingResult<float> result;
    std::size_t samples = 0;
};

/*
 * Trains the nets for a trace without touching the file system. Layers train
 * on up to `jobs` threads; each layer's seed depends only on the run seed.
 */
inline std::vector<TrainedLayer> train_nets(RoutingTrace const & trace, TrainingSettings const & s,
                                            std::uint64_t seed, unsigned jobs = 1)
{
    auto datasets = build_dataset(trace, s.dataset);
    if (s.shared_net)
        datasets = {concat(datasets, 0)};
    std::vector<TrainedLayer> out(datasets.size());
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto worker = [&] {
        for (std::size_t i; (i = next.fetch_add(1)) < datasets.size();) {
            try {
                auto fit = s.fit;
                fit.seed = seed * 1000003u + i;
                out[i] = {static_cast<std::uint32_t>(i), train<float>(datasets[i], fit), datasets[i].size()};
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure)
                    failure = std::current_exception();
            }
        }
    };
    jobs = std::max(1u, std::min<unsigned>(jobs, static_cast<unsigned>(datasets.size())));
    std::vector<std::thread> pool;
    for (unsigned j = 1; j < jobs; ++j)
        pool.emplace_back(worker);
    worker();
    for (auto & t : pool)
        t.join();
    if (failure)
        std::rethrow_exception(failure);
    return out;
}

inline std::string train_log_csv(std::vector<TrainedLayer> const & layers)
{
    std::ostringstream os;
    os << "layer,epoch,train_mse,validation_mse\n";
    for (auto const & l : layers)
        for (auto const & e : l.result.log)
            os << l.layer << ',' << e.epoch << ',' << detail::fmt_double(e.train_mse) << ','
               << detail::fmt_double(e.validation_mse) << '\n';
    return os.str();
}

inline void cmd_train(RunConfig const & cfg, std::ostream & log)
{
    cfg.validate();
    auto trace = load_trace(cfg);
    auto layers = train_nets(trace, cfg.training, cfg.seed, cfg.jobs);

    fs::create_directories(cfg.checkpoints());
    StagedOutput out(cfg.checkpoints());
    auto const E = trace.header.num_experts;
    for (auto const & l : layers) {
        auto const name = cfg.training.shared_net ? shared_checkpoint_name() : layer_checkpoint_name(l.layer);
        save_net(l.result.net, out.path(name).string());
        if (!(load_net<float>(out.path(name).string(), E) == l.result.net))
            throw Error("checkpoint " + name + " did not read back identically");
        out.add(name);
    }
    out.write("train_log.csv", train_log_csv(layers));
    out.commit();

    for (auto const & l : layers) {
        auto const & r = l.result;
        log << (cfg.training.shared_net ? std::string("shared") : "layer " + std::to_string(l.layer)) << ": "
            << l.samples << " samples, " << r.log.size() - 1 << " epochs, best epoch " << r.best_epoch
            << ", validation mse " << r.log.front().validation_mse << " -> " << r.best_validation_mse
            << (r.stopped_early ? " (early stop)" : "") << '\n';
    }
    log << "checkpoints in " << cfg.checkpoints() << ", " << serialized_size(layers.front().result.net)
        << " bytes per net\n";
}

// ---- eval / diagnose

/*
 * Checkpoints for an E-expert trace with `layers` layers: shared.bin when
 * present, otherwise one file per layer.
 */
inline std::shared_ptr<NetBank const> load_net_bank(std::string const & dir, std::uint32_t layers, std::size_t E)
{
    auto bank = std::make_shared<NetBank>();
    auto const shared = fs::path(dir) / shared_checkpoint_name();
    if (fs::exists(shared)) {
        bank->nets.push_back(std::make_shared<EvictionNet<float>>(load_net<float>(shared.string(), E)));
        return bank;
    }
    for (std::uint32_t l = 0; l < layers; ++l) {
        auto const p = fs::path(dir) / layer_checkpoint_name(l);
        if (!fs::exists(p))
            throw MissingCheckpoint("no checkpoint " + p.string() + "; run train first");
        bank->nets.push_back(std::make_shared<EvictionNet<float>>(load_net<float>(p.string(), E)));
    }
    return bank;
}

inline bool wants_ml(RunConfig const & cfg)
{
    return std::any_of(cfg.policies.begin(), cfg.policies.end(), [](PolicyEntry const & p) { return p.name == "ml"; });
}

inline std::vector<PolicySpec> resolve_policies(RunConfig const & cfg, TraceHeader const & h)
{
    std::shared_ptr<NetBank const> nets;
    if (wants_ml(cfg))
        nets = load_net_bank(cfg.checkpoints(), h.num_layers, h.num_experts);
    return policy_specs(cfg, nets);
}

inline std::vector<SimReport> cmd_eval(RunConfig const & cfg, std::ostream & log)
{
    cfg.validate();
    if (cfg.policies.empty())
        throw InvalidConfig("policies", "must not be empty");
    auto trace = load_trace(cfg);
    CompiledTrace ct(trace);
    auto specs = resolve_policies(cfg, trace.header);
    auto rows = sweep(ct, specs, cfg.capacities, cfg.cost, cfg.sim, cfg.jobs);

    fs::create_directories(cfg.out_dir);
    StagedOutput out(cfg.out_dir);
    out.write("report.json", report_json(rows));
    out.write("report.csv", report_csv(rows));
    out.write("hit_rate.csv", hit_rate_series_csv(rows));
    out.write("throughput.csv", throughput_series_csv(rows));
    if (parse_report_json(detail::read_file(out.path("report.json").string())).size() != rows.size() ||
        parse_report_csv(detail::read_file(out.path("report.csv").string())).size() != rows.size() ||
        parse_hit_rate_series(detail::read_file(out.path("hit_rate.csv").string())).size() != rows.size() ||
        parse_throughput_series(detail::read_file(out.path("throughput.csv").string())).size() != rows.size())
        throw Error("report files did not read back");
    out.commit();
    log << report_table(rows);
    return rows;
}

inline Diagnostics cmd_diagnose(RunConfig const & cfg, std::ostream & log)
{
    cfg.validate();
    if (cfg.policies.empty())
        throw InvalidConfig("policies", "must not be empty");
    auto trace = load_trace(cfg);
    CompiledTrace ct(trace);
    auto specs = resolve_policies(cfg, trace.header);
    auto const capacity = cfg.capacities.front();

    auto opt = cfg.sim;
    opt.keep_eviction_log = true;
    std::vector<SimReport> runs;
    for (auto const & s : specs)
        runs.push_back(simulate(ct, s, capacity, cfg.cost, opt));

    Diagnostics d;
    d.capacity = capacity;
    d.refetch_window = opt.refetch_window;
    for (auto const & r : runs)
        d.refetch.push_back({r.policy, r.decode_evictions, r.refetches, r.refetch_within_w,
                             refetch_rate_from_log(ct, r.eviction_log, opt.refetch_window)});
    for (auto const & r : runs)
        d.duel_policies.push_back(r.policy);
    d.duel.assign(runs.size(), std::vector<double>(runs.size(), 0.5));
    for (std::size_t a = 0; a < runs.size(); ++a)
        for (std::size_t b = a; b < runs.size(); ++b) {
            auto const res = duel_from_logs(ct, runs[a].eviction_log, runs[b].eviction_log);
            d.duel[a][b] = res.fraction_a_better;
            auto const decided = res.a_better + res.b_better;
            d.duel[b][a] = decided > 0 ? static_cast<double>(res.b_better) / static_cast<double>(decided) : 0.5;
        }

    fs::create_directories(cfg.out_dir);
    StagedOutput out(cfg.out_dir);
    out.write("diagnostics.json", diagnostics_json(d));
    if (!(parse_diagnostics_json(detail::read_file(out.path("diagnostics.json").string())) == d))
        throw Error("diagnostics.json did not read back");
    for (auto const & r : runs) {
        auto const name = "timeline_" + r.policy + ".csv";
        auto rows = build_timeline(trace, r.eviction_log);
        out.write(name, timeline_csv(rows));
        auto back = parse_timeline_csv(detail::read_file(out.path(name).string()));
        if (back.size() != trace.events.size() + r.eviction_log.size())
            throw Error(name + " has the wrong row count");
    }
    out.commit();

    log << "capacity " << capacity << ", window " << d.refetch_window << "\n";
    for (auto const & r : d.refetch)
        log << r.policy << ": refetch_within_w " << r.refetch_within_w << " (" << r.refetches << " of "
            << r.decode_evictions << " decode evictions)\n";
    log << "duel (row better than column):\n";
    for (std::size_t a = 0; a < d.duel.size(); ++a) {
        log << d.duel_policies[a];
        for (auto x : d.duel[a])
            log << ' ' << x;
        log << '\n';
    }
    return d;
}

// ---- cache-size

/*
 * Byte counts such as "15GB", "30GiB", "512MB" or a plain integer. Decimal
 * units are powers of 1000, binary units powers of 1024.
 */
inline std::uint64_t parse_bytes(std::string const & text, std::string const & field)
{
    std::size_t pos = 0;
    double value = 0.0;
    try {
        value = std::stod(text, &pos);
    } catch (std::exception const &) {
        throw InvalidConfig(field, "expected a byte count, got '" + text + "'");
    }
    auto unit = text.substr(pos);
    static std::map<std::string, double> const units = {
        {"", 1.0},      {"B", 1.0},           {"KB", 1e3},          {"MB", 1e6},
        {"GB", 1e9},    {"TB", 1e12},         {"KiB", 1024.0},      {"MiB", 1048576.0},
        {"GiB", 1073741824.0}, {"TiB", 1099511627776.0}};
    auto it = units.find(unit);
    if (it == units.end())
        throw InvalidConfig(field, "unknown unit '" + unit + "'");
    auto const bytes = value * it->second;
    if (!(bytes >= 0.0) || bytes > 1.8e19)
        throw InvalidConfig(field, "out of range");
    return static_cast<std::uint64_t>(std::llround(bytes));
}

inline std::uint64_t cmd_cache_size(HardwareBudget const & b, std::ostream & log)
{
    if (b.experts_per_layer == 0)
        throw InvalidConfig("experts_per_layer", "must be >= 1");
    auto const c = cache_size_calc(b);
    log << c << '\n';
    return c;
}

// ---- validate-trace

inline ValidationReport cmd_validate_trace(std::string const & path, std::ostream & log)
{
    ValidationReport rep;
    auto trace = read_trace(path, &rep);
    auto const & h = trace.header;
    log << path << ": ok, model " << h.model_name << ", L=" << h.num_layers << " E=" << h.num_experts
        << " K=" << h.top_k << ", " << rep.sequences << " sequences, " << rep.prefill_events << " prefill events, "
        << rep.decode_events << " decode events\n";
    for (auto const & w : rep.warnings)
        log << "warning: " << w << '\n';
    return rep;
}

} // namespace moecache

#endif
