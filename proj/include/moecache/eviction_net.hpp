#ifndef MOECACHE_EVICTION_NET_HPP
#define MOECACHE_EVICTION_NET_HPP

/*
 * The eviction scoring network of one layer:
 *
 *   x (2E) -> Linear -> SiLU -> Linear -> SiLU -> Linear -> y (E)
 *
 * y[e] predicts how far in the future expert e is needed next; the cache
 * evicts the resident expert with the largest prediction. Training minimizes
 * the mean squared error over masked positions only.
 */

#include "moecache/errors.hpp"
#include "moecache/random.hpp"

#include <Eigen/Core>

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace moecache
{

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/*
 * Weights and biases of the three linear layers. Also used for gradients and
 * optimizer moments, which share the shape.
 */
template <typename Scalar>
struct NetParams
{
    Matrix<Scalar> w1, w2, w3; // (hidden x 2E), (hidden x hidden), (E x hidden)
    Vector<Scalar> b1, b2, b3;

    static NetParams zeros(std::size_t num_experts, std::size_t hidden)
    {
        auto const in = static_cast<Eigen::Index>(2 * num_experts);
        auto const h = static_cast<Eigen::Index>(hidden);
        auto const out = static_cast<Eigen::Index>(num_experts);
        NetParams p;
        p.w1 = Matrix<Scalar>::Zero(h, in);
        p.b1 = Vector<Scalar>::Zero(h);
        p.w2 = Matrix<Scalar>::Zero(h, h);
        p.b2 = Vector<Scalar>::Zero(h);
        p.w3 = Matrix<Scalar>::Zero(out, h);
        p.b3 = Vector<Scalar>::Zero(out);
        return p;
    }

    // Visits the six tensors in serialization order.
    template <typename F>
    void for_each(F && f)
    {
        f(w1), f(b1), f(w2), f(b2), f(w3), f(b3);
    }

    template <typename F>
    void for_each(F && f) const
    {
        f(w1), f(b1), f(w2), f(b2), f(w3), f(b3);
    }

    std::size_t size() const
    {
        std::size_t n = 0;
        for_each([&](auto const & t) { n += static_cast<std::size_t>(t.size()); });
        return n;
    }

    bool all_finite() const
    {
        bool ok = true;
        for_each([&](auto const & t) { ok = ok && t.allFinite(); });
        return ok;
    }

    friend bool operator==(NetParams const & a, NetParams const & b)
    {
        return a.w1 == b.w1 && a.b1 == b.b1 && a.w2 == b.w2 && a.b2 == b.b2 && a.w3 == b.w3 && a.b3 == b.b3;
    }
};

template <typename Scalar>
inline Scalar sigmoid(Scalar x)
{
    return Scalar(1) / (Scalar(1) + std::exp(-x));
}

template <typename Scalar>
inline Scalar silu(Scalar x)
{
    return x * sigmoid(x);
}

template <typename Scalar>
inline Scalar silu_grad(Scalar x)
{
    Scalar const s = sigmoid(x);
    return s * (Scalar(1) + x * (Scalar(1) - s));
}

template <typename Scalar = float>
class EvictionNet
{
public:
    static constexpr std::uint32_t layer_count = 3;
    static constexpr std::size_t default_hidden = 128;

    EvictionNet() = default;

    // Zero weights and biases.
    EvictionNet(std::size_t num_experts, std::size_t hidden = default_hidden)
        : num_experts_(num_experts)
        , hidden_(hidden)
        , params_(NetParams<Scalar>::zeros(num_experts, hidden))
    {
    }

    // U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias.
    static EvictionNet random(std::size_t num_experts, std::size_t hidden, std::uint64_t seed)
    {
        EvictionNet net(num_experts, hidden);
        Rng rng(seed);
        auto fill = [&](Matrix<Scalar> & w, Vector<Scalar> & b) {
            double const bound = 1.0 / std::sqrt(static_cast<double>(w.cols()));
            for (Eigen::Index i = 0; i < w.rows(); ++i)
                for (Eigen::Index j = 0; j < w.cols(); ++j)
                    w(i, j) = static_cast<Scalar>((2.0 * uniform01(rng) - 1.0) * bound);
            for (Eigen::Index i = 0; i < b.size(); ++i)
                b(i) = static_cast<Scalar>((2.0 * uniform01(rng) - 1.0) * bound);
        };
        fill(net.params_.w1, net.params_.b1);
        fill(net.params_.w2, net.params_.b2);
        fill(net.params_.w3, net.params_.b3);
        return net;
    }

    std::size_t num_experts() const { return num_experts_; }
    std::size_t hidden() const { return hidden_; }
    std::size_t input_size() const { return 2 * num_experts_; }
    std::size_t parameter_count() const { return params_.size(); }

    NetParams<Scalar> & params() { return params_; }
    NetParams<Scalar> const & params() const { return params_; }

    // Forward pass on a batch: one sample per column of x (2E x B).
    Matrix<Scalar> forward(Matrix<Scalar> const & x) const
    {
        check_input(static_cast<std::size_t>(x.rows()));
        Matrix<Scalar> a1 = ((params_.w1 * x).colwise() + params_.b1).unaryExpr(&silu<Scalar>);
        Matrix<Scalar> a2 = ((params_.w2 * a1).colwise() + params_.b2).unaryExpr(&silu<Scalar>);
        return (params_.w3 * a2).colwise() + params_.b3;
    }

    std::vector<Scalar> forward(std::span<Scalar const> x) const
    {
        check_input(x.size());
        Eigen::Map<Vector<Scalar> const> in(x.data(), static_cast<Eigen::Index>(x.size()));
        Vector<Scalar> a1 = (params_.w1 * in + params_.b1).unaryExpr(&silu<Scalar>);
        Vector<Scalar> a2 = (params_.w2 * a1 + params_.b2).unaryExpr(&silu<Scalar>);
        Vector<Scalar> y = params_.w3 * a2 + params_.b3;
        return std::vector<Scalar>(y.data(), y.data() + y.size());
    }

    /*
     * Masked MSE of a batch and, when grad is non-null, its gradient with
     * respect to every parameter:
     *   loss = sum(mask * (y - target)^2) / max(1, sum(mask))
     */
    Scalar loss(Matrix<Scalar> const & x, Matrix<Scalar> const & target, Matrix<Scalar> const & mask,
                NetParams<Scalar> * grad = nullptr) const
    {
        check_input(static_cast<std::size_t>(x.rows()));
        Matrix<Scalar> z1 = (params_.w1 * x).colwise() + params_.b1;
        Matrix<Scalar> a1 = z1.unaryExpr(&silu<Scalar>);
        Matrix<Scalar> z2 = (params_.w2 * a1).colwise() + params_.b2;
        Matrix<Scalar> a2 = z2.unaryExpr(&silu<Scalar>);
        Matrix<Scalar> y = (params_.w3 * a2).colwise() + params_.b3;

        Scalar const count = std::max(Scalar(1), mask.sum());
        Matrix<Scalar> diff = (y - target).cwiseProduct(mask);
        Scalar const value = diff.squaredNorm() / count;
        if (!grad)
            return value;

        Matrix<Scalar> dy = diff * (Scalar(2) / count);
        grad->w3.noalias() = dy * a2.transpose();
        grad->b3 = dy.rowwise().sum();
        Matrix<Scalar> dz2 = (params_.w3.transpose() * dy).cwiseProduct(z2.unaryExpr(&silu_grad<Scalar>));
        grad->w2.noalias() = dz2 * a1.transpose();
        grad->b2 = dz2.rowwise().sum();
        Matrix<Scalar> dz1 = (params_.w2.transpose() * dz2).cwiseProduct(z1.unaryExpr(&silu_grad<Scalar>));
        grad->w1.noalias() = dz1 * x.transpose();
        grad->b1 = dz1.rowwise().sum();
        return value;
    }

    template <typename Other>
    EvictionNet<Other> cast() const
    {
        EvictionNet<Other> out(num_experts_, hidden_);
        auto & p = out.params();
        p.w1 = params_.w1.template cast<Other>();
        p.b1 = params_.b1.template cast<Other>();
        p.w2 = params_.w2.template cast<Other>();
        p.b2 = params_.b2.template cast<Other>();
        p.w3 = params_.w3.template cast<Other>();
        p.b3 = params_.b3.template cast<Other>();
        return out;
    }

    friend bool operator==(EvictionNet const & a, EvictionNet const & b)
    {
        return a.num_experts_ == b.num_experts_ && a.hidden_ == b.hidden_ && a.params_ == b.params_;
    }

private:
    void check_input(std::size_t n) const
    {
        if (n != input_size())
            throw DimensionMismatch("feature length " + std::to_string(n) + " != 2E = " +
                                    std::to_string(input_size()));
    }

    std::size_t num_experts_ = 0;
    std::size_t hidden_ = 0;
    NetParams<Scalar> params_;
};

template <typename Scalar>
std::vector<Scalar> score(EvictionNet<Scalar> const & net, std::span<Scalar const> features)
{
    return net.forward(features);
}

/*
 * AdamW with decoupled weight decay:
 *   p -= lr * wd * p;  m, v moments;  p -= lr * m_hat / (sqrt(v_hat) + eps)
 */
struct AdamWConfig
{
    double learning_rate = 1e-3;
    double weight_decay = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

template <typename Scalar>
class AdamW
{
public:
    AdamW(EvictionNet<Scalar> const & net, AdamWConfig cfg)
        : cfg_(cfg)
        , m_(NetParams<Scalar>::zeros(net.num_experts(), net.hidden()))
        , v_(NetParams<Scalar>::zeros(net.num_experts(), net.hidden()))
    {
    }

    void step(NetParams<Scalar> & params, NetParams<Scalar> const & grad)
    {
        ++t_;
        Scalar const lr = static_cast<Scalar>(cfg_.learning_rate);
        Scalar const decay = static_cast<Scalar>(1.0 - cfg_.learning_rate * cfg_.weight_decay);
        Scalar const b1 = static_cast<Scalar>(cfg_.beta1);
        Scalar const b2 = static_cast<Scalar>(cfg_.beta2);
        Scalar const c1 = static_cast<Scalar>(1.0 - std::pow(cfg_.beta1, static_cast<double>(t_)));
        Scalar const c2 = static_cast<Scalar>(1.0 - std::pow(cfg_.beta2, static_cast<double>(t_)));
        Scalar const eps = static_cast<Scalar>(cfg_.epsilon);

        auto update = [&](auto & p, auto const & g, auto & m, auto & v) {
            p *= decay;
            m = b1 * m + (Scalar(1) - b1) * g;
            v = b2 * v + (Scalar(1) - b2) * g.cwiseProduct(g);
            p.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
        };
        update(params.w1, grad.w1, m_.w1, v_.w1);
        update(params.b1, grad.b1, m_.b1, v_.b1);
        update(params.w2, grad.w2, m_.w2, v_.w2);
        update(params.b2, grad.b2, m_.b2, v_.b2);
        update(params.w3, grad.w3, m_.w3, v_.w3);
        update(params.b3, grad.b3, m_.b3, v_.b3);
    }

    std::uint64_t steps() const { return t_; }

private:
    AdamWConfig cfg_;
    NetParams<Scalar> m_, v_;
    std::uint64_t t_ = 0;
};

/*
 * Checkpoint format, little-endian:
 *   "MOENET\0\0" | u32 version | u32 scalar bytes (4 or 8) | u32 E | u32 hidden
 *   | u32 layers (3) | u32 len + activation tag ("silu") | u64 parameter count
 *   | w1 b1 w2 b2 w3 b3, matrices row-major
 */
inline constexpr char net_magic[8] = {'M', 'O', 'E', 'N', 'E', 'T', 0, 0};
inline constexpr std::uint32_t net_format_version = 1;

namespace detail
{

inline void put_u32(std::ostream & os, std::uint32_t v)
{
    char b[4];
    for (int i = 0; i < 4; ++i)
        b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os.write(b, 4);
}

inline void put_u64(std::ostream & os, std::uint64_t v)
{
    char b[8];
    for (int i = 0; i < 8; ++i)
        b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os.write(b, 8);
}

inline std::uint64_t get_le(std::istream & is, int bytes)
{
    unsigned char b[8] = {};
    if (!is.read(reinterpret_cast<char *>(b), bytes))
        throw Error("checkpoint truncated");
    std::uint64_t v = 0;
    for (int i = bytes - 1; i >= 0; --i)
        v = (v << 8) | b[i];
    return v;
}

template <typename Scalar>
void put_scalar(std::ostream & os, Scalar x)
{
    if constexpr (sizeof(Scalar) == 4)
        put_u32(os, std::bit_cast<std::uint32_t>(x));
    else
        put_u64(os, std::bit_cast<std::uint64_t>(x));
}

} // namespace detail

template <typename Scalar>
void save_net(EvictionNet<Scalar> const & net, std::ostream & os)
{
    static_assert(sizeof(Scalar) == 4 || sizeof(Scalar) == 8);
    os.write(net_magic, sizeof net_magic);
    detail::put_u32(os, net_format_version);
    detail::put_u32(os, sizeof(Scalar));
    detail::put_u32(os, static_cast<std::uint32_t>(net.num_experts()));
    detail::put_u32(os, static_cast<std::uint32_t>(net.hidden()));
    detail::put_u32(os, EvictionNet<Scalar>::layer_count);
    std::string const act = "silu";
    detail::put_u32(os, static_cast<std::uint32_t>(act.size()));
    os.write(act.data(), static_cast<std::streamsize>(act.size()));
    detail::put_u64(os, net.parameter_count());
    net.params().for_each([&](auto const & t) {
        for (Eigen::Index i = 0; i < t.rows(); ++i)
            for (Eigen::Index j = 0; j < t.cols(); ++j)
                detail::put_scalar(os, t(i, j));
    });
}

template <typename Scalar>
void save_net(EvictionNet<Scalar> const & net, std::string const & path)
{
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os)
        throw Error("cannot open " + path + " for writing");
    save_net(net, os);
    if (!os)
        throw Error("write failed: " + path);
}

// expected_experts = 0 accepts any E.
template <typename Scalar = float>
EvictionNet<Scalar> load_net(std::istream & is, std::size_t expected_experts = 0)
{
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, net_magic, 8) != 0)
        throw Error("not an eviction-net checkpoint");
    auto version = detail::get_le(is, 4);
    if (version != net_format_version)
        throw Error("unsupported checkpoint version " + std::to_string(version));
    auto width = detail::get_le(is, 4);
    auto E = detail::get_le(is, 4);
    auto hidden = detail::get_le(is, 4);
    auto layers = detail::get_le(is, 4);
    auto act_len = detail::get_le(is, 4);
    if (act_len > 64)
        throw Error("checkpoint activation tag too long");
    std::string act(act_len, '\0');
    if (!is.read(act.data(), static_cast<std::streamsize>(act_len)))
        throw Error("checkpoint truncated");
    auto count = detail::get_le(is, 8);

    if (width != 4 && width != 8)
        throw ShapeMismatch("checkpoint scalar width " + std::to_string(width));
    if (layers != EvictionNet<Scalar>::layer_count || act != "silu")
        throw ShapeMismatch("checkpoint has " + std::to_string(layers) + " layers with activation " + act);
    if (expected_experts != 0 && E != expected_experts)
        throw ShapeMismatch("checkpoint is for E = " + std::to_string(E) + ", expected E = " +
                            std::to_string(expected_experts));
    EvictionNet<Scalar> net(E, hidden);
    if (count != net.parameter_count())
        throw ShapeMismatch("checkpoint parameter count does not match its shape header");
    net.params().for_each([&](auto & t) {
        for (Eigen::Index i = 0; i < t.rows(); ++i)
            for (Eigen::Index j = 0; j < t.cols(); ++j) {
                auto bits = detail::get_le(is, static_cast<int>(width));
                if (width == 4)
                    t(i, j) = static_cast<Scalar>(std::bit_cast<float>(static_cast<std::uint32_t>(bits)));
                else
                    t(i, j) = static_cast<Scalar>(std::bit_cast<double>(bits));
            }
    });
    if (is.peek() != std::char_traits<char>::eof())
        throw Error("trailing bytes after checkpoint parameters");
    return net;
}

template <typename Scalar = float>
EvictionNet<Scalar> load_net(std::string const & path, std::size_t expected_experts = 0)
{
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw MissingCheckpoint("cannot open checkpoint " + path);
    return load_net<Scalar>(is, expected_experts);
}

template <typename Scalar>
std::size_t serialized_size(EvictionNet<Scalar> const & net)
{
    std::ostringstream os;
    save_net(net, os);
    return os.str().size();
}

} // namespace moecache

#endif
