#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mcl/context.hpp"
#include "mcl/error.hpp"
#include "mcl/metrics.hpp"
#include "mcl/rng.hpp"

namespace mcl {

struct HistoryEntry {
    Context context;
    PerfMetrics metrics;
    long long step_index = 0;
};

struct CurriculumConfig {
    double alpha = 0.5;             // blend factor
    int window_w = 3;               // sliding window size w (window holds w+1 entries)
    double delta = 0.9;             // similarity threshold under the [0,1] kernel
    int max_similar_k = 3;          // consecutive-similar trigger
    double epsilon = 0.1;           // blend probability for the epsilon variant
    Context initial_context;
    int episodes_per_context = 1;
    double plr_replay_prob = 0.5;
    double plr_temperature = 0.1;
    double plr_staleness_coef = 0.1;
    int accel_population = 8;
    double accel_step_fraction = 0.1;
    double space_converge_tol = 0.01;
    int space_patience = 2;

    void validate() const {
        if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha outside [0,1]");
        if (window_w < 1) throw ConfigError("window_w must be >= 1");
        if (!(delta >= 0.0)) throw ConfigError("delta must be >= 0");
        if (max_similar_k < 1) throw ConfigError("max_similar_k must be >= 1");
        if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ConfigError("epsilon outside [0,1]");
        if (episodes_per_context < 1) throw ConfigError("episodes_per_context must be >= 1");
        if (!(plr_replay_prob >= 0.0 && plr_replay_prob <= 1.0))
            throw ConfigError("plr_replay_prob outside [0,1]");
        if (!(plr_temperature > 0.0)) throw ConfigError("plr_temperature must be > 0");
        if (!(plr_staleness_coef >= 0.0 && plr_staleness_coef <= 1.0))
            throw ConfigError("plr_staleness_coef outside [0,1]");
        if (accel_population < 1) throw ConfigError("accel_population must be >= 1");
        if (!(accel_step_fraction > 0.0 && accel_step_fraction <= 1.0))
            throw ConfigError("accel_step_fraction outside (0,1]");
        if (space_patience < 1) throw ConfigError("space_patience must be >= 1");
    }
};

enum class DecisionSource { Llm, Blend, Uniform, Replay, Mutation, Fixed };

inline const char* to_string(DecisionSource s) {
    switch (s) {
        case DecisionSource::Llm: return "llm";
        case DecisionSource::Blend: return "blend";
        case DecisionSource::Uniform: return "uniform";
        case DecisionSource::Replay: return "replay";
        case DecisionSource::Mutation: return "mutation";
        case DecisionSource::Fixed: return "fixed";
    }
    return "?";
}

struct StepDecision {
    Context next_context;
    Context proposal;  // pre-blend
    double sigma = 0.0;
    bool blended = false;
    bool replayed = false;
    DecisionSource source = DecisionSource::Fixed;
};

// a previously played context plus its latest learning-potential score
struct LevelInfo {
    Context context;
    double score = 0.0;
    long long last_played = 0;
};

struct ValueSnapshot {
    Context context;
    long long step_index = 0;  // step the context first appeared; tie-break key
    double last_value = 0.0;
    bool has_value = false;
};

struct SchedulerState {
    std::vector<HistoryEntry> history;
    int similarity_counter = 0;  // s in the blending state machine
    Rng rng;

    // PLR / ACCEL level buffer
    std::vector<LevelInfo> levels;

    // SPACE bookkeeping
    bool space_active = false;
    Context space_current;
    double space_prev_value = 0.0;
    bool space_has_prev = false;
    int space_below_tol = 0;
    std::vector<ValueSnapshot> space_values;
    long long space_fresh_counter = 0;

    explicit SchedulerState(std::uint64_t seed) : rng(seed) {}
};

struct ProposalResult {
    Context context;
    bool fallback_used = false;
};

using ContextProposer = std::function<ProposalResult(std::span<const HistoryEntry>)>;
using ValueEstimator = std::function<double(const Context&)>;

// Append a completed (context, metrics) pair. td_score is the learning
// potential of the phase (mean |TD error|); NaN means "no signal" and leaves
// the level score untouched.
inline void record(SchedulerState& state, const Context& context,
                   const PerfMetrics& metrics,
                   double td_score = std::numeric_limits<double>::quiet_NaN()) {
    long long idx = state.history.empty() ? 0 : state.history.back().step_index + 1;
    state.history.push_back({context, metrics, idx});

    for (auto& lvl : state.levels) {
        if (lvl.context == context) {
            if (!std::isnan(td_score)) lvl.score = td_score;
            lvl.last_played = idx;
            return;
        }
    }
    state.levels.push_back({context, std::isnan(td_score) ? 0.0 : td_score, idx});
}

// last min(w+1, |H|) entries, oldest first
inline std::span<const HistoryEntry> window(const SchedulerState& state, int w) {
    std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(w) + 1,
                                          state.history.size());
    return {state.history.data() + (state.history.size() - n), n};
}

inline std::vector<Context> window_contexts(std::span<const HistoryEntry> win) {
    std::vector<Context> cs;
    cs.reserve(win.size());
    for (const auto& e : win) cs.push_back(e.context);
    return cs;
}

namespace detail {

inline StepDecision fixed_decision(const Context& ctx) {
    StepDecision d;
    d.next_context = ctx;
    d.proposal = ctx;
    d.sigma = 0.0;
    d.source = DecisionSource::Fixed;
    return d;
}

inline const Context& uniform_history_context(SchedulerState& state) {
    return state.history[state.rng.uniform_index(state.history.size())].context;
}

}  // namespace detail

// Diversity-blended step: query the proposer with the sliding window, track
// consecutive similar proposals, and blend with a random prior context once
// the counter reaches k.
inline StepDecision llm_blend_step(SchedulerState& state, const CurriculumConfig& cfg,
                                const ContextSpace& space,
                                const ContextProposer& proposer) {
    if (state.history.empty()) return detail::fixed_decision(cfg.initial_context);

    auto win = window(state, cfg.window_w);
    ProposalResult out = proposer(win);
    space.check(out.context);

    StepDecision d;
    d.proposal = out.context;
    d.sigma = similarity(window_contexts(win), out.context, space);

    if (d.sigma >= cfg.delta)
        state.similarity_counter += 1;
    else
        state.similarity_counter = 0;

    if (state.similarity_counter >= cfg.max_similar_k) {
        const Context& c_r = detail::uniform_history_context(state);
        d.next_context = blend(c_r, out.context, cfg.alpha, space);
        d.blended = true;
        d.source = DecisionSource::Blend;
        state.similarity_counter = 0;
    } else {
        d.next_context = out.context;
        d.source = out.fallback_used ? DecisionSource::Uniform : DecisionSource::Llm;
    }
    return d;
}

enum class LlmVariant { Plain, Epsilon };

// Ablations: Plain never blends; Epsilon blends with a random prior context
// with probability epsilon. Neither uses the similarity counter.
inline StepDecision llm_variant_step(SchedulerState& state, const CurriculumConfig& cfg,
                                       const ContextSpace& space,
                                       const ContextProposer& proposer,
                                       LlmVariant variant) {
    if (state.history.empty()) return detail::fixed_decision(cfg.initial_context);

    auto win = window(state, cfg.window_w);
    ProposalResult out = proposer(win);
    space.check(out.context);

    StepDecision d;
    d.proposal = out.context;
    d.sigma = similarity(window_contexts(win), out.context, space);

    if (variant == LlmVariant::Epsilon && state.rng.bernoulli(cfg.epsilon)) {
        const Context& c_r = detail::uniform_history_context(state);
        d.next_context = blend(c_r, out.context, cfg.alpha, space);
        d.blended = true;
        d.source = DecisionSource::Blend;
    } else {
        d.next_context = out.context;
        d.source = out.fallback_used ? DecisionSource::Uniform : DecisionSource::Llm;
    }
    return d;
}

inline StepDecision no_curriculum_step(const CurriculumConfig& cfg) {
    return detail::fixed_decision(cfg.initial_context);
}

inline StepDecision domain_randomization_step(SchedulerState& state,
                                              const ContextSpace& space) {
    StepDecision d;
    d.next_context = sample_uniform(space, state.rng);
    d.proposal = d.next_context;
    d.source = DecisionSource::Uniform;
    return d;
}

namespace detail {

// rank-based score priorities mixed with staleness, standard PLR form
inline std::vector<double> plr_probabilities(const std::vector<LevelInfo>& levels,
                                             const CurriculumConfig& cfg,
                                             long long now) {
    std::size_t n = levels.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return levels[a].score > levels[b].score;
    });

    std::vector<double> rank_w(n), stale_w(n);
    double rank_sum = 0.0, stale_sum = 0.0;
    for (std::size_t pos = 0; pos < n; ++pos) {
        double w = std::pow(1.0 / static_cast<double>(pos + 1), 1.0 / cfg.plr_temperature);
        rank_w[order[pos]] = w;
        rank_sum += w;
    }
    for (std::size_t i = 0; i < n; ++i) {
        stale_w[i] = static_cast<double>(now - levels[i].last_played);
        stale_sum += stale_w[i];
    }

    std::vector<double> p(n);
    for (std::size_t i = 0; i < n; ++i) {
        double ps = rank_w[i] / rank_sum;
        double pc = stale_sum > 0.0 ? stale_w[i] / stale_sum : 1.0 / static_cast<double>(n);
        p[i] = (1.0 - cfg.plr_staleness_coef) * ps + cfg.plr_staleness_coef * pc;
    }
    return p;
}

inline std::size_t sample_weighted(const std::vector<double>& p, Rng& rng) {
    double u = rng.uniform();
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        acc += p[i];
        if (u < acc) return i;
    }
    return p.size() - 1;
}

}  // namespace detail

inline StepDecision plr_step(SchedulerState& state, const CurriculumConfig& cfg,
                             const ContextSpace& space) {
    StepDecision d;
    long long now = state.history.empty() ? 0 : state.history.back().step_index + 1;
    if (!state.levels.empty() && state.rng.bernoulli(cfg.plr_replay_prob)) {
        auto p = detail::plr_probabilities(state.levels, cfg, now);
        std::size_t i = detail::sample_weighted(p, state.rng);
        d.next_context = state.levels[i].context;
        d.proposal = d.next_context;
        d.replayed = true;
        d.source = DecisionSource::Replay;
    } else {
        d.next_context = sample_uniform(space, state.rng);
        d.proposal = d.next_context;
        d.source = DecisionSource::Uniform;
    }
    return d;
}

inline StepDecision accel_step(SchedulerState& state, const CurriculumConfig& cfg,
                               const ContextSpace& space) {
    // keep only the top-scoring population
    if (state.levels.size() > static_cast<std::size_t>(cfg.accel_population)) {
        std::stable_sort(state.levels.begin(), state.levels.end(),
                         [](const LevelInfo& a, const LevelInfo& b) {
                             return a.score > b.score;
                         });
        state.levels.resize(static_cast<std::size_t>(cfg.accel_population));
    }

    StepDecision d;
    if (!state.levels.empty() && state.rng.bernoulli(cfg.plr_replay_prob)) {
        const Context& parent =
            state.levels[state.rng.uniform_index(state.levels.size())].context;
        d.proposal = parent;
        // retry until the edit sticks; clamping at a bound or integer rounding
        // can swallow a single draw
        Context mutated = parent;
        for (int attempt = 0; attempt < 64 && mutated == parent; ++attempt)
            mutated = mutate(parent, space, cfg.accel_step_fraction, state.rng);
        if (mutated == parent) {
            // force a one-component change on the widest continuous parameter
            std::size_t pick = 0;
            for (std::size_t i = 0; i < space.size(); ++i)
                if (space.param(i).kind == ParamKind::Continuous) { pick = i; break; }
            std::vector<double> raw = parent.values;
            const auto& p = space.param(pick);
            raw[pick] = (raw[pick] == p.lower) ? p.upper : p.lower;
            mutated = clamp_and_round(raw, space);
        }
        d.next_context = mutated;
        d.source = DecisionSource::Mutation;
    } else {
        d.next_context = sample_uniform(space, state.rng);
        d.proposal = d.next_context;
        d.source = DecisionSource::Uniform;
    }
    return d;
}

namespace detail {

inline ValueSnapshot* find_snapshot(SchedulerState& state, const Context& c) {
    for (auto& s : state.space_values)
        if (s.context == c) return &s;
    return nullptr;
}

// improvement since the last recorded estimate; optimistic (from 0) for
// contexts never valued before
inline double space_pic(SchedulerState& state, const Context& c, double v_now) {
    ValueSnapshot* snap = find_snapshot(state, c);
    return (snap && snap->has_value) ? v_now - snap->last_value : v_now;
}

inline void space_store(SchedulerState& state, const Context& c, long long step_index,
                        double v) {
    if (ValueSnapshot* snap = find_snapshot(state, c)) {
        snap->last_value = v;
        snap->has_value = true;
        return;
    }
    state.space_values.push_back({c, step_index, v, true});
}

}  // namespace detail

// Stay on the current context while its performance improvement capacity is
// above tol; after `patience` consecutive below-tol steps, switch to the
// candidate (history plus 5 fresh uniform samples) with maximal PIC. Ties go
// to the lowest step_index.
inline StepDecision space_step(SchedulerState& state, const CurriculumConfig& cfg,
                               const ContextSpace& space, const ValueEstimator& value_fn) {
    long long now = state.history.empty() ? 0 : state.history.back().step_index + 1;
    if (!state.space_active) {
        state.space_active = true;
        state.space_current = cfg.initial_context;
        state.space_has_prev = false;
        state.space_below_tol = 0;
        return detail::fixed_decision(state.space_current);
    }

    double v_now = value_fn(state.space_current);
    bool converged = false;
    if (state.space_has_prev) {
        double pic = v_now - state.space_prev_value;
        if (pic <= cfg.space_converge_tol)
            state.space_below_tol += 1;
        else
            state.space_below_tol = 0;
        converged = state.space_below_tol >= cfg.space_patience;
    }
    state.space_prev_value = v_now;
    state.space_has_prev = true;

    if (!converged) return detail::fixed_decision(state.space_current);

    // candidate pool: every distinct history context plus 5 fresh samples
    struct Candidate {
        Context ctx;
        long long step_index;
        bool fresh;
    };
    std::vector<Candidate> pool;
    for (const auto& e : state.history) {
        bool dup = false;
        for (const auto& c : pool)
            if (c.ctx == e.context) { dup = true; break; }
        if (!dup) pool.push_back({e.context, e.step_index, false});
    }
    for (int i = 0; i < 5; ++i) {
        Context fresh = sample_uniform(space, state.rng);
        pool.push_back({fresh, now + state.space_fresh_counter++, true});
    }

    std::size_t best = 0;
    double best_pic = -std::numeric_limits<double>::infinity();
    std::vector<double> values(pool.size());
    for (std::size_t i = 0; i < pool.size(); ++i) {
        values[i] = value_fn(pool[i].ctx);
        double pic = detail::space_pic(state, pool[i].ctx, values[i]);
        bool better = pic > best_pic ||
                      (pic == best_pic && pool[i].step_index < pool[best].step_index);
        if (better) {
            best = i;
            best_pic = pic;
        }
    }
    for (std::size_t i = 0; i < pool.size(); ++i)
        detail::space_store(state, pool[i].ctx, pool[i].step_index, values[i]);

    state.space_current = pool[best].ctx;
    state.space_has_prev = false;
    state.space_below_tol = 0;

    StepDecision d;
    d.next_context = pool[best].ctx;
    d.proposal = d.next_context;
    d.replayed = !pool[best].fresh;
    d.source = pool[best].fresh ? DecisionSource::Uniform : DecisionSource::Replay;
    return d;
}

enum class SchedulerKind {
    LlmBlend,
    LlmPlain,
    LlmEpsilon,
    NoCurriculum,
    DomainRandomization,
    Plr,
    Accel,
    Space,
};

inline const char* to_string(SchedulerKind k) {
    switch (k) {
        case SchedulerKind::LlmBlend: return "llm_blend";
        case SchedulerKind::LlmPlain: return "llm_plain";
        case SchedulerKind::LlmEpsilon: return "llm_epsilon";
        case SchedulerKind::NoCurriculum: return "no_curriculum";
        case SchedulerKind::DomainRandomization: return "domain_randomization";
        case SchedulerKind::Plr: return "plr";
        case SchedulerKind::Accel: return "accel";
        case SchedulerKind::Space: return "space";
    }
    return "?";
}

inline SchedulerKind scheduler_from_name(const std::string& name) {
    for (auto k : {SchedulerKind::LlmBlend, SchedulerKind::LlmPlain, SchedulerKind::LlmEpsilon,
                   SchedulerKind::NoCurriculum, SchedulerKind::DomainRandomization,
                   SchedulerKind::Plr, SchedulerKind::Accel, SchedulerKind::Space})
        if (name == to_string(k)) return k;
    throw ConfigError("unknown scheduler '" + name + "'");
}

inline bool scheduler_uses_proposer(SchedulerKind k) {
    return k == SchedulerKind::LlmBlend || k == SchedulerKind::LlmPlain ||
           k == SchedulerKind::LlmEpsilon;
}

struct SchedulerDeps {
    ContextProposer proposer;
    ValueEstimator value_fn;
};

inline StepDecision scheduler_step(SchedulerKind kind, SchedulerState& state,
                                   const CurriculumConfig& cfg, const ContextSpace& space,
                                   const SchedulerDeps& deps) {
    switch (kind) {
        case SchedulerKind::LlmBlend:
            return llm_blend_step(state, cfg, space, deps.proposer);
        case SchedulerKind::LlmPlain:
            return llm_variant_step(state, cfg, space, deps.proposer, LlmVariant::Plain);
        case SchedulerKind::LlmEpsilon:
            return llm_variant_step(state, cfg, space, deps.proposer,
                                      LlmVariant::Epsilon);
        case SchedulerKind::NoCurriculum:
            return no_curriculum_step(cfg);
        case SchedulerKind::DomainRandomization:
            return domain_randomization_step(state, space);
        case SchedulerKind::Plr:
            return plr_step(state, cfg, space);
        case SchedulerKind::Accel:
            return accel_step(state, cfg, space);
        case SchedulerKind::Space:
            return space_step(state, cfg, space, deps.value_fn);
    }
    throw ContractError("unhandled scheduler kind");
}

}  // namespace mcl
