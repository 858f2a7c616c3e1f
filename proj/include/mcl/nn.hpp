#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "mcl/error.hpp"
#include "mcl/rng.hpp"

namespace mcl {

struct NumericalError : Error {
    using Error::Error;
};

struct Linear {
    int in = 0;
    int out = 0;
    std::vector<double> w;  // row-major [out][in]
    std::vector<double> b;
};

// fixed-topology MLP: tanh on hidden layers, linear output
struct Mlp {
    std::vector<Linear> layers;

    int in_dim() const { return layers.front().in; }
    int out_dim() const { return layers.back().out; }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += l.w.size() + l.b.size();
        return n;
    }
};

// Xavier-uniform init; out_scale shrinks the last layer (small initial logits
// keep the starting policy near uniform)
inline Mlp make_mlp(std::span<const int> dims, Rng& rng, double out_scale = 1.0) {
    if (dims.size() < 2) throw ContractError("make_mlp: need at least in/out dims");
    Mlp net;
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
        Linear l;
        l.in = dims[i];
        l.out = dims[i + 1];
        double limit = std::sqrt(6.0 / static_cast<double>(l.in + l.out));
        if (i + 2 == dims.size()) limit *= out_scale;
        l.w.resize(static_cast<std::size_t>(l.in) * static_cast<std::size_t>(l.out));
        l.b.assign(static_cast<std::size_t>(l.out), 0.0);
        for (auto& w : l.w) w = rng.uniform(-limit, limit);
        net.layers.push_back(std::move(l));
    }
    return net;
}

struct MlpCache {
    // acts[0] = input; acts[i] = post-tanh output of layer i-1 (pre-activation
    // kept for the final layer, which is linear)
    std::vector<std::vector<double>> acts;
};

inline std::vector<double> mlp_forward(const Mlp& net, std::span<const double> x,
                                       MlpCache* cache = nullptr) {
    if (static_cast<int>(x.size()) != net.in_dim())
        throw ContractError("mlp_forward: input dimension mismatch");
    std::vector<double> cur(x.begin(), x.end());
    if (cache) {
        cache->acts.clear();
        cache->acts.push_back(cur);
    }
    for (std::size_t li = 0; li < net.layers.size(); ++li) {
        const Linear& l = net.layers[li];
        std::vector<double> next(static_cast<std::size_t>(l.out));
        for (int o = 0; o < l.out; ++o) {
            double s = l.b[static_cast<std::size_t>(o)];
            const double* row = &l.w[static_cast<std::size_t>(o) * static_cast<std::size_t>(l.in)];
            for (int i = 0; i < l.in; ++i) s += row[i] * cur[static_cast<std::size_t>(i)];
            next[static_cast<std::size_t>(o)] = s;
        }
        if (li + 1 < net.layers.size())
            for (auto& v : next) v = std::tanh(v);
        cur = std::move(next);
        if (cache) cache->acts.push_back(cur);
    }
    return cur;
}

struct MlpGrads {
    std::vector<std::vector<double>> w;
    std::vector<std::vector<double>> b;

    explicit MlpGrads(const Mlp& net) {
        for (const auto& l : net.layers) {
            w.emplace_back(l.w.size(), 0.0);
            b.emplace_back(l.b.size(), 0.0);
        }
    }

    void zero() {
        for (auto& g : w) std::fill(g.begin(), g.end(), 0.0);
        for (auto& g : b) std::fill(g.begin(), g.end(), 0.0);
    }

    double squared_norm() const {
        double s = 0.0;
        for (const auto& g : w)
            for (double v : g) s += v * v;
        for (const auto& g : b)
            for (double v : g) s += v * v;
        return s;
    }

    void scale(double f) {
        for (auto& g : w)
            for (double& v : g) v *= f;
        for (auto& g : b)
            for (double& v : g) v *= f;
    }
};

// accumulate dL/dparams given dL/doutput; cache must come from mlp_forward on
// the same input at the current parameters
inline void mlp_backward(const Mlp& net, const MlpCache& cache,
                         std::span<const double> dout, MlpGrads& grads) {
    std::vector<double> delta(dout.begin(), dout.end());
    for (int li = static_cast<int>(net.layers.size()) - 1; li >= 0; --li) {
        const Linear& l = net.layers[static_cast<std::size_t>(li)];
        const auto& input = cache.acts[static_cast<std::size_t>(li)];
        auto& gw = grads.w[static_cast<std::size_t>(li)];
        auto& gb = grads.b[static_cast<std::size_t>(li)];
        std::vector<double> dprev(static_cast<std::size_t>(l.in), 0.0);
        for (int o = 0; o < l.out; ++o) {
            double d = delta[static_cast<std::size_t>(o)];
            gb[static_cast<std::size_t>(o)] += d;
            double* grow = &gw[static_cast<std::size_t>(o) * static_cast<std::size_t>(l.in)];
            const double* wrow =
                &l.w[static_cast<std::size_t>(o) * static_cast<std::size_t>(l.in)];
            for (int i = 0; i < l.in; ++i) {
                grow[i] += d * input[static_cast<std::size_t>(i)];
                dprev[static_cast<std::size_t>(i)] += d * wrow[i];
            }
        }
        if (li > 0) {
            // input to this layer was tanh(pre-activation); acts holds tanh values
            for (int i = 0; i < l.in; ++i) {
                double a = input[static_cast<std::size_t>(i)];
                dprev[static_cast<std::size_t>(i)] *= (1.0 - a * a);
            }
        }
        delta = std::move(dprev);
    }
}

inline std::vector<double> flatten_params(const Mlp& net) {
    std::vector<double> out;
    out.reserve(net.param_count());
    for (const auto& l : net.layers) {
        out.insert(out.end(), l.w.begin(), l.w.end());
        out.insert(out.end(), l.b.begin(), l.b.end());
    }
    return out;
}

inline void unflatten_params(Mlp& net, std::span<const double> flat) {
    std::size_t pos = 0;
    for (auto& l : net.layers) {
        std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(pos), l.w.size(),
                    l.w.begin());
        pos += l.w.size();
        std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(pos), l.b.size(),
                    l.b.begin());
        pos += l.b.size();
    }
    if (pos != flat.size()) throw ContractError("unflatten_params: size mismatch");
}

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    long long t = 0;

    explicit AdamState(std::size_t n) : m(n, 0.0), v(n, 0.0) {}
};

inline void adam_step(Mlp& net, const MlpGrads& grads, AdamState& st, double lr,
                      double beta1, double beta2, double eps) {
    st.t += 1;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(st.t));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(st.t));
    std::size_t pos = 0;
    auto update = [&](std::vector<double>& params, const std::vector<double>& g) {
        for (std::size_t i = 0; i < params.size(); ++i, ++pos) {
            st.m[pos] = beta1 * st.m[pos] + (1.0 - beta1) * g[i];
            st.v[pos] = beta2 * st.v[pos] + (1.0 - beta2) * g[i] * g[i];
            double mhat = st.m[pos] / bc1;
            double vhat = st.v[pos] / bc2;
            params[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    };
    for (std::size_t li = 0; li < net.layers.size(); ++li) {
        update(net.layers[li].w, grads.w[li]);
        update(net.layers[li].b, grads.b[li]);
    }
}

inline std::vector<double> softmax(std::span<const double> logits) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : logits) {
        if (!std::isfinite(v)) throw NumericalError("softmax: non-finite logit");
        mx = std::max(mx, v);
    }
    std::vector<double> p(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(logits[i] - mx);
        sum += p[i];
    }
    for (auto& v : p) v /= sum;
    return p;
}

// lowest index wins ties
inline int argmax(std::span<const double> v) {
    int best = 0;
    for (int i = 1; i < static_cast<int>(v.size()); ++i)
        if (v[static_cast<std::size_t>(i)] > v[static_cast<std::size_t>(best)]) best = i;
    return best;
}

inline int sample_categorical(std::span<const double> probs, Rng& rng) {
    double u = rng.uniform();
    double acc = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        acc += probs[i];
        if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(probs.size()) - 1;
}

}  // namespace mcl
