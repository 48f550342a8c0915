#ifndef MOECACHE_TRAINING_HPP
#define MOECACHE_TRAINING_HPP

/*
 * Offline training of the eviction nets: replay a trace under Belady's MIN,
 * record features at every decode step together with the clamped distance to
 * each expert's next routing, then fit one net per layer.
 */

#include "moecache/eviction_net.hpp"
#include "moecache/features.hpp"
#include "moecache/policies.hpp"
#include "moecache/stream.hpp"

#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace moecache
{

// belady: loss only on experts the oracle cache holds. all: every expert.
enum class MaskMode
{
    belady,
    all
};

inline std::string to_string(MaskMode m) { return m == MaskMode::belady ? "belady" : "all"; }

inline MaskMode parse_mask_mode(std::string const & s)
{
    if (s == "belady")
        return MaskMode::belady;
    if (s == "all")
        return MaskMode::all;
    throw InvalidConfig("mask", "expected belady or all, got '" + s + "'");
}

struct DatasetOptions
{
    std::size_t capacity = 32;
    double d_max = 64.0;
    bool include_prefill_features = true;
    MaskMode mask = MaskMode::belady;
};

// One decode step of one layer.
struct TrainingSample
{
    std::vector<float> features; // 2E
    std::vector<float> targets;  // E, in [0, 1]
    std::vector<float> mask;     // E, 1 = resident in the oracle cache
};

// Samples of one layer stored column-wise for batching.
struct LayerDataset
{
    std::uint32_t layer = 0;
    std::size_t num_experts = 0;
    Matrix<float> features; // 2E x N
    Matrix<float> targets;  // E x N
    Matrix<float> mask;     // E x N

    std::size_t size() const { return static_cast<std::size_t>(features.cols()); }

    TrainingSample sample(std::size_t i) const
    {
        auto col = [&](Matrix<float> const & m) {
            auto c = m.col(static_cast<Eigen::Index>(i));
            return std::vector<float>(c.data(), c.data() + c.size());
        };
        return {col(features), col(targets), col(mask)};
    }
};

// Normalized next-use distance: min(d, d_max) / d_max, never -> 1.
inline float distance_target(std::uint64_t steps_ahead, double d_max)
{
    if (steps_ahead == never)
        return 1.0f;
    return static_cast<float>(std::min(static_cast<double>(steps_ahead), d_max) / d_max);
}

/*
 * Builds the dataset of one layer stream. For every decode group, in order:
 * the mask is the oracle cache's residency before the step, the features are
 * taken after the step's feature update, and targets[e] is the distance in
 * decode steps to the next routing of e in the same sequence.
 */
inline LayerDataset build_layer_dataset(LayerStream const & stream, std::size_t num_experts,
                                        DatasetOptions const & opt)
{
    if (!(opt.d_max > 0.0))
        throw InvalidConfig("d_max", "must be positive");
    auto const E = num_experts;
    auto const n_groups = stream.groups.size();
    std::size_t n_decode = 0;
    for (auto const & g : stream.groups)
        n_decode += g.phase == Phase::decode;

    LayerDataset ds;
    ds.layer = stream.layer;
    ds.num_experts = E;
    ds.features.resize(static_cast<Eigen::Index>(2 * E), static_cast<Eigen::Index>(n_decode));
    ds.targets.resize(static_cast<Eigen::Index>(E), static_cast<Eigen::Index>(n_decode));
    ds.mask.resize(static_cast<Eigen::Index>(E), static_cast<Eigen::Index>(n_decode));

    // Backward scan for targets.
    {
        std::vector<std::uint64_t> next_step(E, never);
        std::optional<std::uint64_t> seq;
        auto col = static_cast<Eigen::Index>(n_decode);
        for (std::size_t gi = n_groups; gi-- > 0;) {
            auto const & g = stream.groups[gi];
            if (seq != g.seq_id) {
                std::fill(next_step.begin(), next_step.end(), never);
                seq = g.seq_id;
            }
            if (g.phase != Phase::decode)
                continue;
            --col;
            for (std::size_t e = 0; e < E; ++e)
                ds.targets(static_cast<Eigen::Index>(e), col) =
                    distance_target(next_step[e] == never ? never : next_step[e] - g.step, opt.d_max);
            for (ExpertId e : g.experts)
                next_step[e] = g.step;
        }
    }

    OracleIndex oracle(stream, static_cast<std::uint32_t>(E));
    BeladyCache cache(opt.capacity, E, oracle);
    FeatureTracker tracker(E);
    std::optional<std::uint64_t> seq;
    Eigen::Index col = 0;
    for (auto const & g : stream.groups) {
        if (seq != g.seq_id) {
            seq = g.seq_id;
            tracker.reset();
            cache.begin_sequence();
        }
        if (g.phase == Phase::decode) {
            for (std::size_t e = 0; e < E; ++e)
                ds.mask(static_cast<Eigen::Index>(e), col) = opt.mask == MaskMode::all || cache.resident(static_cast<ExpertId>(e)) ? 1.0f : 0.0f;
            tracker.update(g.experts);
            normalize_into<float>(tracker, std::span<float>(ds.features.col(col).data(), 2 * E));
            ++col;
        } else if (opt.include_prefill_features) {
            for (auto const & r : g.routings)
                tracker.update(r);
        }
        cache.begin_event(g.routings, g.phase);
        AccessContext ctx{stream.layer, g.first_position, g.seq_id, g.phase, g.step};
        for (ExpertId e : g.experts) {
            cache.access(e, ctx);
            ++ctx.position;
        }
        cache.end_event();
    }
    return ds;
}

inline std::vector<LayerDataset> build_dataset(RoutingTrace const & trace, DatasetOptions const & opt)
{
    if (opt.capacity < trace.header.top_k)
        throw CapacityTooSmall("capacity " + std::to_string(opt.capacity) + " < top_k " +
                               std::to_string(trace.header.top_k));
    auto streams = compile_streams(trace);
    std::vector<LayerDataset> out;
    out.reserve(streams.size());
    for (auto const & s : streams)
        out.push_back(build_layer_dataset(s, trace.header.num_experts, opt));
    return out;
}

// Concatenates datasets with the same E, e.g. several traces or all layers.
inline LayerDataset concat(std::vector<LayerDataset> const & parts, std::uint32_t layer = 0)
{
    LayerDataset out;
    out.layer = layer;
    if (parts.empty())
        return out;
    out.num_experts = parts.front().num_experts;
    Eigen::Index n = 0;
    for (auto const & p : parts) {
        if (p.num_experts != out.num_experts)
            throw ShapeMismatch("cannot concatenate datasets with different E");
        n += p.features.cols();
    }
    auto const E = static_cast<Eigen::Index>(out.num_experts);
    out.features.resize(2 * E, n);
    out.targets.resize(E, n);
    out.mask.resize(E, n);
    Eigen::Index at = 0;
    for (auto const & p : parts) {
        auto const k = p.features.cols();
        out.features.middleCols(at, k) = p.features;
        out.targets.middleCols(at, k) = p.targets;
        out.mask.middleCols(at, k) = p.mask;
        at += k;
    }
    return out;
}

struct TrainingConfig
{
    std::size_t hidden = EvictionNet<float>::default_hidden;
    AdamWConfig optimizer;
    std::size_t max_epochs = 200;
    std::size_t patience = 10;
    std::size_t batch_size = 256;
    double validation_fraction = 0.1;
    std::uint64_t seed = 0;
};

struct EpochLog
{
    std::size_t epoch = 0; // 0 = before the first update
    double train_mse = 0.0;
    double validation_mse = 0.0;
};

template <typename Scalar = float>
struct TrainingResult
{
    EvictionNet<Scalar> net; // best-validation checkpoint
    std::vector<EpochLog> log;
    std::size_t best_epoch = 0;
    double best_validation_mse = 0.0;
    bool stopped_early = false;
};

namespace detail
{

template <typename Scalar>
struct Batch
{
    Matrix<Scalar> x, t, m;
};

template <typename Scalar>
void gather(LayerDataset const & ds, std::span<std::size_t const> idx, Batch<Scalar> & b)
{
    auto const n = static_cast<Eigen::Index>(idx.size());
    b.x.resize(ds.features.rows(), n);
    b.t.resize(ds.targets.rows(), n);
    b.m.resize(ds.mask.rows(), n);
    for (Eigen::Index j = 0; j < n; ++j) {
        auto const c = static_cast<Eigen::Index>(idx[static_cast<std::size_t>(j)]);
        b.x.col(j) = ds.features.col(c).template cast<Scalar>();
        b.t.col(j) = ds.targets.col(c).template cast<Scalar>();
        b.m.col(j) = ds.mask.col(c).template cast<Scalar>();
    }
}

// Masked MSE over a subset, weighted by masked-position count.
template <typename Scalar>
double evaluate(EvictionNet<Scalar> const & net, LayerDataset const & ds, std::span<std::size_t const> idx,
                std::size_t batch_size)
{
    double se = 0.0, count = 0.0;
    Batch<Scalar> b;
    for (std::size_t at = 0; at < idx.size(); at += batch_size) {
        auto part = idx.subspan(at, std::min(batch_size, idx.size() - at));
        gather(ds, part, b);
        double const k = static_cast<double>(b.m.sum());
        se += static_cast<double>(net.loss(b.x, b.t, b.m)) * std::max(1.0, k);
        count += k;
    }
    return count > 0 ? se / count : 0.0;
}

} // namespace detail

/*
 * Fits one net with AdamW on masked MSE. Samples without any masked position
 * carry no signal and are dropped. The first (1 - validation_fraction) of the
 * remaining samples, in step order, train; the rest validate. Training stops
 * after `patience` epochs without a validation improvement and returns the
 * best checkpoint.
 */
template <typename Scalar = float>
TrainingResult<Scalar> train(LayerDataset const & ds, TrainingConfig const & cfg)
{
    if (cfg.batch_size == 0)
        throw InvalidConfig("batch_size", "must be >= 1");
    if (!(cfg.validation_fraction >= 0.0 && cfg.validation_fraction < 1.0))
        throw InvalidConfig("validation_fraction", "must lie in [0, 1)");

    std::vector<std::size_t> usable;
    for (std::size_t i = 0; i < ds.size(); ++i)
        if (ds.mask.col(static_cast<Eigen::Index>(i)).sum() > 0.0f)
            usable.push_back(i);
    if (usable.empty())
        throw EmptyDataset("layer " + std::to_string(ds.layer) + ": no samples with masked positions");

    auto n_val = static_cast<std::size_t>(std::floor(cfg.validation_fraction * static_cast<double>(usable.size())));
    if (n_val == usable.size())
        n_val = 0;
    std::vector<std::size_t> train_idx(usable.begin(), usable.end() - static_cast<std::ptrdiff_t>(n_val));
    std::vector<std::size_t> val_idx(usable.end() - static_cast<std::ptrdiff_t>(n_val), usable.end());
    // without a validation split, early stopping watches the training loss
    std::span<std::size_t const> watch = val_idx.empty() ? std::span<std::size_t const>(train_idx)
                                                         : std::span<std::size_t const>(val_idx);

    TrainingResult<Scalar> result;
    EvictionNet<Scalar> net = EvictionNet<Scalar>::random(ds.num_experts, cfg.hidden, cfg.seed);
    AdamW<Scalar> opt(net, cfg.optimizer);
    Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);

    double const initial_train = detail::evaluate(net, ds, train_idx, cfg.batch_size);
    double const initial_val = detail::evaluate(net, ds, watch, cfg.batch_size);
    result.log.push_back({0, initial_train, initial_val});
    result.net = net;
    result.best_validation_mse = initial_val;

    NetParams<Scalar> grad = NetParams<Scalar>::zeros(ds.num_experts, cfg.hidden);
    detail::Batch<Scalar> batch;
    std::size_t since_best = 0;
    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        shuffle(rng, train_idx.data(), train_idx.size());
        double se = 0.0, count = 0.0;
        for (std::size_t at = 0; at < train_idx.size(); at += cfg.batch_size) {
            auto part = std::span<std::size_t const>(train_idx).subspan(
                at, std::min(cfg.batch_size, train_idx.size() - at));
            detail::gather(ds, part, batch);
            double const loss = static_cast<double>(net.loss(batch.x, batch.t, batch.m, &grad));
            if (!std::isfinite(loss) || !grad.all_finite())
                throw NonFiniteLoss("layer " + std::to_string(ds.layer) + " epoch " + std::to_string(epoch) +
                                    " batch " + std::to_string(at / cfg.batch_size) + ": loss = " +
                                    std::to_string(loss));
            opt.step(net.params(), grad);
            double const k = static_cast<double>(batch.m.sum());
            se += loss * std::max(1.0, k);
            count += k;
        }
        double const val = detail::evaluate(net, ds, watch, cfg.batch_size);
        if (!std::isfinite(val))
            throw NonFiniteLoss("layer " + std::to_string(ds.layer) + " epoch " + std::to_string(epoch) +
                                ": validation loss is not finite");
        result.log.push_back({epoch, count > 0 ? se / count : 0.0, val});
        if (val < result.best_validation_mse) {
            result.best_validation_mse = val;
            result.best_epoch = epoch;
            result.net = net;
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            result.stopped_early = true;
            break;
        }
    }
    return result;
}

} // namespace moecache

#endif
