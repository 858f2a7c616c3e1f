#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mcl/error.hpp"
#include "mcl/rng.hpp"

namespace mcl {

enum class ParamKind { Continuous, Integer };

struct ParameterSpec {
    std::string name;
    double lower = 0.0;
    double upper = 1.0;
    ParamKind kind = ParamKind::Continuous;

    double range() const { return upper - lower; }
};

// A point in the bounded environment-parameter box. Values are kept in raw
// units; validity is always judged against a ContextSpace.
struct Context {
    std::vector<double> values;

    bool operator==(const Context&) const = default;
};

class ContextSpace {
public:
    ContextSpace() = default;

    explicit ContextSpace(std::vector<ParameterSpec> params)
        : params_(std::move(params)) {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            const auto& p = params_[i];
            if (!(p.lower < p.upper))
                throw ContractError("parameter '" + p.name + "': lower must be < upper");
            if (p.kind == ParamKind::Integer &&
                (p.lower != std::floor(p.lower) || p.upper != std::floor(p.upper)))
                throw ContractError("parameter '" + p.name + "': integer bounds must be integral");
            for (std::size_t j = 0; j < i; ++j)
                if (params_[j].name == p.name)
                    throw ContractError("duplicate parameter name '" + p.name + "'");
        }
    }

    // The nine vehicle-dynamics parameters and their bounds. Order is fixed;
    // everything downstream (prompts, JSON, CSV columns) relies on it.
    static ContextSpace vehicle_parameters() {
        return ContextSpace({
            {"length", 1.0, 10.0, ParamKind::Continuous},
            {"width", 1.0, 5.0, ParamKind::Continuous},
            {"maxPosAcc", 0.5, 5.0, ParamKind::Continuous},
            {"maxNegAcc", 0.5, 5.0, ParamKind::Continuous},
            {"usualPosAcc", 1.0, 5.0, ParamKind::Continuous},
            {"usualNegAcc", 1.0, 5.0, ParamKind::Continuous},
            {"minGap", 1.0, 10.0, ParamKind::Continuous},
            {"maxSpeed", 3.0, 15.0, ParamKind::Continuous},
            {"headwayTime", 1.0, 5.0, ParamKind::Integer},
        });
    }

    std::size_t size() const { return params_.size(); }
    const ParameterSpec& param(std::size_t i) const { return params_[i]; }
    const std::vector<ParameterSpec>& params() const { return params_; }

    std::size_t index_of(const std::string& name) const {
        for (std::size_t i = 0; i < params_.size(); ++i)
            if (params_[i].name == name) return i;
        throw ContractError("unknown parameter '" + name + "'");
    }

    bool contains(const Context& ctx) const {
        if (ctx.values.size() != params_.size()) return false;
        for (std::size_t i = 0; i < params_.size(); ++i) {
            double v = ctx.values[i];
            if (!(v >= params_[i].lower && v <= params_[i].upper)) return false;
            if (params_[i].kind == ParamKind::Integer && v != std::floor(v)) return false;
        }
        return true;
    }

    void check(const Context& ctx) const {
        if (ctx.values.size() != params_.size())
            throw ContractError("context has " + std::to_string(ctx.values.size()) +
                                " values, space has " + std::to_string(params_.size()));
        if (!contains(ctx)) throw OutOfRangeError("context violates space bounds");
    }

    Context midpoint() const;

private:
    std::vector<ParameterSpec> params_;
};

// round-half-to-even; exact .5 detection is fine in binary doubles
inline double round_half_to_even(double x) {
    double f = std::floor(x);
    double frac = x - f;
    if (frac > 0.5) return f + 1.0;
    if (frac < 0.5) return f;
    return (std::fmod(f, 2.0) == 0.0) ? f : f + 1.0;
}

inline std::vector<double> normalize(const Context& ctx, const ContextSpace& space) {
    if (ctx.values.size() != space.size())
        throw ContractError("normalize: dimension mismatch");
    std::vector<double> u(space.size());
    for (std::size_t i = 0; i < space.size(); ++i)
        u[i] = (ctx.values[i] - space.param(i).lower) / space.param(i).range();
    return u;
}

inline Context denormalize(std::span<const double> u, const ContextSpace& space) {
    if (u.size() != space.size())
        throw ContractError("denormalize: dimension mismatch");
    Context ctx;
    ctx.values.resize(space.size());
    for (std::size_t i = 0; i < space.size(); ++i) {
        if (!(u[i] >= 0.0 && u[i] <= 1.0))
            throw OutOfRangeError("denormalize: component " + std::to_string(i) +
                                  " outside [0,1]");
        const auto& p = space.param(i);
        double v = p.lower + u[i] * p.range();
        if (p.kind == ParamKind::Integer)
            v = std::clamp(round_half_to_even(v), p.lower, p.upper);
        ctx.values[i] = v;
    }
    return ctx;
}

inline Context clamp_and_round(std::span<const double> raw, const ContextSpace& space) {
    if (raw.size() != space.size())
        throw ContractError("clamp_and_round: dimension mismatch");
    Context ctx;
    ctx.values.resize(space.size());
    for (std::size_t i = 0; i < space.size(); ++i) {
        if (!std::isfinite(raw[i]))
            throw RejectError("clamp_and_round: non-finite component " + std::to_string(i));
        const auto& p = space.param(i);
        double v = std::clamp(raw[i], p.lower, p.upper);
        if (p.kind == ParamKind::Integer)
            v = std::clamp(round_half_to_even(v), p.lower, p.upper);
        ctx.values[i] = v;
    }
    return ctx;
}

inline Context ContextSpace::midpoint() const {
    std::vector<double> raw(size());
    for (std::size_t i = 0; i < size(); ++i)
        raw[i] = 0.5 * (params_[i].lower + params_[i].upper);
    return clamp_and_round(raw, *this);
}

inline double normalized_distance(const Context& a, const Context& b,
                                  const ContextSpace& space) {
    auto na = normalize(a, space);
    auto nb = normalize(b, space);
    double s = 0.0;
    for (std::size_t i = 0; i < na.size(); ++i) {
        double d = na[i] - nb[i];
        s += d * d;
    }
    return std::sqrt(s) / std::sqrt(static_cast<double>(space.size()));
}

// sigma = max over the window of 1 - ||n(c_i) - n(cand)||_2 / sqrt(d).
// Max (not mean): one near-duplicate in the window is enough to flag
// stagnation.
inline double similarity(std::span<const Context> window, const Context& candidate,
                         const ContextSpace& space) {
    if (window.empty()) throw ContractError("similarity: empty window");
    double best = 0.0;
    for (const auto& c : window)
        best = std::max(best, 1.0 - normalized_distance(c, candidate, space));
    return best;
}

// Convex combination alpha*c_r + (1-alpha)*c_llm in raw units; integer
// components may round. Written so both endpoints and self-blends are exact
// in floating point.
inline Context blend(const Context& c_r, const Context& c_llm, double alpha,
                     const ContextSpace& space) {
    if (!(alpha >= 0.0 && alpha <= 1.0))
        throw ContractError("blend: alpha outside [0,1]");
    space.check(c_r);
    space.check(c_llm);
    std::vector<double> raw(space.size());
    for (std::size_t i = 0; i < space.size(); ++i)
        raw[i] = (alpha == 1.0)
                     ? c_r.values[i]
                     : c_llm.values[i] + alpha * (c_r.values[i] - c_llm.values[i]);
    return clamp_and_round(raw, space);
}

inline Context sample_uniform(const ContextSpace& space, Rng& rng) {
    Context ctx;
    ctx.values.resize(space.size());
    for (std::size_t i = 0; i < space.size(); ++i) {
        const auto& p = space.param(i);
        if (p.kind == ParamKind::Integer)
            ctx.values[i] = static_cast<double>(
                rng.uniform_int(static_cast<long long>(p.lower),
                                static_cast<long long>(p.upper)));
        else
            ctx.values[i] = rng.uniform(p.lower, p.upper);
    }
    return ctx;
}

// Perturb one uniformly chosen component by uniform noise within
// +/- step_fraction of its range, then clamp and round. Clamping (or integer
// rounding) can make the perturbation a no-op; callers that need a guaranteed
// change retry (see accel_step).
inline Context mutate(const Context& ctx, const ContextSpace& space,
                      double step_fraction, Rng& rng) {
    if (!(step_fraction > 0.0 && step_fraction <= 1.0))
        throw ContractError("mutate: step_fraction outside (0,1]");
    space.check(ctx);
    std::size_t i = rng.uniform_index(space.size());
    const auto& p = space.param(i);
    std::vector<double> raw = ctx.values;
    raw[i] += rng.uniform(-step_fraction * p.range(), step_fraction * p.range());
    return clamp_and_round(raw, space);
}

}  // namespace mcl
