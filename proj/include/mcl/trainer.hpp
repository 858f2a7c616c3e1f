#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "mcl/context.hpp"
#include "mcl/error.hpp"
#include "mcl/metrics.hpp"
#include "mcl/nn.hpp"
#include "mcl/rng.hpp"
#include "mcl/traffic.hpp"

namespace mcl {

struct TrainConfig {
    double clip_eps = 0.2;
    double lr = 0.0003;
    int mini_epochs = 4;
    double entropy_coef = 0.001;
    double gamma = 0.99;
    double gae_lambda = 0.95;
    int buffer_size = 10;  // episodes collected per update
    int batch_size = 1;    // episodes per gradient step
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double grad_clip_norm = 10.0;
    int hidden_dim = 128;
    double reward_scale = 0.01;  // applied to rewards entering GAE/value targets

    void validate() const {
        if (!(clip_eps > 0.0 && clip_eps < 1.0)) throw ConfigError("clip_eps outside (0,1)");
        if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
        if (mini_epochs < 1) throw ConfigError("mini_epochs must be >= 1");
        if (!(gamma >= 0.0 && gamma < 1.0)) throw ConfigError("gamma outside [0,1)");
        if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0))
            throw ConfigError("gae_lambda outside [0,1]");
        if (buffer_size < 1) throw ConfigError("buffer_size must be >= 1");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (hidden_dim < 1) throw ConfigError("hidden_dim must be >= 1");
        if (!(reward_scale > 0.0)) throw ConfigError("reward_scale must be > 0");
    }
};

// one shared actor for all agents, one centralized critic on the joint obs
struct ActorCritic {
    Mlp actor;
    Mlp critic;
};

inline ActorCritic make_actor_critic(int obs_dim, int n_agents, const TrainConfig& cfg,
                                     Rng& rng) {
    std::vector<int> adims = {obs_dim, cfg.hidden_dim, cfg.hidden_dim, kNumPhases};
    std::vector<int> cdims = {obs_dim * n_agents, cfg.hidden_dim, cfg.hidden_dim, 1};
    ActorCritic ac;
    ac.actor = make_mlp(adims, rng, 0.01);
    ac.critic = make_mlp(cdims, rng);
    return ac;
}

// count and queue features enter the network scaled down; speeds, head
// positions and the phase one-hot are already O(1)
inline void preprocess_obs(std::vector<double>& obs) {
    std::size_t lane_feats = obs.size() - static_cast<std::size_t>(kNumPhases);
    for (std::size_t i = 0; i < lane_feats; ++i)
        if (i % 4 < 2) obs[i] *= 0.1;
}

enum class ActMode { Sample, Greedy };

struct ActionSample {
    int action = 0;
    double log_prob = 0.0;
};

inline ActionSample act(const Mlp& actor, std::span<const double> obs, ActMode mode,
                        Rng* rng) {
    std::vector<double> logits = mlp_forward(actor, obs);
    for (double v : logits)
        if (!std::isfinite(v)) throw NumericalError("act: non-finite logits");
    std::vector<double> probs = softmax(logits);
    int a;
    if (mode == ActMode::Greedy) {
        a = argmax(logits);
    } else {
        if (rng == nullptr) throw ContractError("act: sampling requires an rng");
        a = sample_categorical(probs, *rng);
    }
    double mx = logits[static_cast<std::size_t>(argmax(logits))];
    double lse = 0.0;
    for (double v : logits) lse += std::exp(v - mx);
    lse = mx + std::log(lse);
    return {a, logits[static_cast<std::size_t>(a)] - lse};
}

inline double centralized_value(const Mlp& critic, std::span<const double> joint_obs) {
    return mlp_forward(critic, joint_obs)[0];
}

struct GaeResult {
    std::vector<double> advantages;
    std::vector<double> returns;
};

// delta_t = r_t + gamma*v_{t+1} - v_t (terminal bootstrap 0);
// A_t = sum_l (gamma*lambda)^l delta_{t+l}; targets = A_t + v_t
inline GaeResult compute_gae(std::span<const double> rewards,
                             std::span<const double> values, double gamma,
                             double lambda) {
    if (rewards.size() != values.size())
        throw ContractError("compute_gae: rewards/values length mismatch");
    std::size_t n = rewards.size();
    GaeResult out;
    out.advantages.assign(n, 0.0);
    out.returns.assign(n, 0.0);
    double acc = 0.0;
    for (std::size_t i = n; i-- > 0;) {
        double v_next = (i + 1 < n) ? values[i + 1] : 0.0;
        double delta = rewards[i] + gamma * v_next - values[i];
        acc = delta + gamma * lambda * acc;
        out.advantages[i] = acc;
        out.returns[i] = acc + values[i];
    }
    return out;
}

struct Episode {
    std::vector<std::vector<std::vector<double>>> obs;  // [t][agent][dim], preprocessed
    std::vector<std::vector<double>> joint_obs;         // [t][n_agents*dim]
    std::vector<std::vector<int>> actions;              // [t][agent]
    std::vector<std::vector<double>> log_probs;         // [t][agent]
    std::vector<double> rewards;                        // shared, reward_scale applied
    std::vector<double> values;                         // centralized V(s_t)
    std::vector<double> advantages;
    std::vector<double> returns;
    EpisodeMetrics metrics;

    int length() const { return static_cast<int>(rewards.size()); }
    int n_agents() const { return obs.empty() ? 0 : static_cast<int>(obs[0].size()); }
};

struct TrajectoryBatch {
    std::vector<Episode> episodes;
};

inline Episode collect_episode(const ActorCritic& ac, const NetworkSpec& net,
                               const ContextSpace& space, const Context& ctx,
                               std::uint64_t env_seed, const TrainConfig& cfg,
                               ActMode mode, Rng* action_rng,
                               std::string* trace = nullptr) {
    TrafficSim sim(net, ctx, space, env_seed);
    Episode ep;
    int n = sim.num_agents();
    while (!sim.done()) {
        auto raw = sim.observe_all();
        for (auto& o : raw) preprocess_obs(o);
        std::vector<double> joint;
        joint.reserve(static_cast<std::size_t>(n * sim.obs_dim()));
        for (const auto& o : raw) joint.insert(joint.end(), o.begin(), o.end());

        std::vector<int> acts(static_cast<std::size_t>(n));
        std::vector<double> lps(static_cast<std::size_t>(n));
        for (int a = 0; a < n; ++a) {
            auto s = act(ac.actor, raw[static_cast<std::size_t>(a)], mode, action_rng);
            acts[static_cast<std::size_t>(a)] = s.action;
            lps[static_cast<std::size_t>(a)] = s.log_prob;
        }
        double value = centralized_value(ac.critic, joint);
        auto r = sim.step(acts);
        if (trace) sim.write_trace(*trace);

        ep.obs.push_back(std::move(raw));
        ep.joint_obs.push_back(std::move(joint));
        ep.actions.push_back(std::move(acts));
        ep.log_probs.push_back(std::move(lps));
        ep.rewards.push_back(r.reward * cfg.reward_scale);
        ep.values.push_back(value);
    }
    ep.metrics = sim.finalize_metrics();
    auto gae = compute_gae(ep.rewards, ep.values, cfg.gamma, cfg.gae_lambda);
    ep.advantages = std::move(gae.advantages);
    ep.returns = std::move(gae.returns);
    return ep;
}

// mean 0, std 1 across every timestep of every episode; std floor 1e-8
inline void normalize_advantages(TrajectoryBatch& batch) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& ep : batch.episodes)
        for (double a : ep.advantages) {
            sum += a;
            ++n;
        }
    if (n == 0) return;
    double mean = sum / static_cast<double>(n);
    double var = 0.0;
    for (const auto& ep : batch.episodes)
        for (double a : ep.advantages) var += (a - mean) * (a - mean);
    double std = std::sqrt(var / static_cast<double>(n));
    double denom = std::max(std, 1e-8);
    for (auto& ep : batch.episodes)
        for (double& a : ep.advantages) a = (a - mean) / denom;
}

struct LossReport {
    double policy_loss = 0.0;
    double value_loss = 0.0;
    double entropy = 0.0;
    double total = 0.0;
    double grad_norm = 0.0;
    bool aborted = false;
};

// clipped-surrogate PPO loss over a set of episodes:
//   L = -E[min(rho*A, clip(rho, 1 +/- eps)*A)] + E[(v - target)^2]
//       - entropy_coef * E[H]
// Advantages are shared across agents at a timestep (team reward, central
// critic). Gradients accumulate into ga/gc when non-null.
inline LossReport ppo_loss(const ActorCritic& ac, std::span<const Episode> episodes,
                           const TrainConfig& cfg, MlpGrads* ga = nullptr,
                           MlpGrads* gc = nullptr) {
    LossReport rep;
    std::size_t pg_samples = 0, v_samples = 0;
    for (const auto& ep : episodes) {
        pg_samples += static_cast<std::size_t>(ep.length()) *
                      static_cast<std::size_t>(ep.n_agents());
        v_samples += static_cast<std::size_t>(ep.length());
    }
    if (pg_samples == 0) throw ContractError("ppo_loss: empty batch");
    double inv_pg = 1.0 / static_cast<double>(pg_samples);
    double inv_v = 1.0 / static_cast<double>(v_samples);

    MlpCache cache;
    for (const auto& ep : episodes) {
        for (int t = 0; t < ep.length(); ++t) {
            double adv = ep.advantages[static_cast<std::size_t>(t)];
            for (int agent = 0; agent < ep.n_agents(); ++agent) {
                const auto& obs =
                    ep.obs[static_cast<std::size_t>(t)][static_cast<std::size_t>(agent)];
                int action =
                    ep.actions[static_cast<std::size_t>(t)][static_cast<std::size_t>(agent)];
                double old_lp =
                    ep.log_probs[static_cast<std::size_t>(t)][static_cast<std::size_t>(agent)];

                std::vector<double> logits = mlp_forward(ac.actor, obs, ga ? &cache : nullptr);
                std::vector<double> probs = softmax(logits);
                double mx = logits[static_cast<std::size_t>(argmax(logits))];
                double lse = 0.0;
                for (double v : logits) lse += std::exp(v - mx);
                lse = mx + std::log(lse);
                double lp = logits[static_cast<std::size_t>(action)] - lse;

                double rho = std::exp(lp - old_lp);
                double s1 = rho * adv;
                double s2 = std::clamp(rho, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * adv;
                rep.policy_loss += -std::min(s1, s2) * inv_pg;

                double entropy = 0.0;
                for (double p : probs)
                    if (p > 0.0) entropy -= p * std::log(p);
                rep.entropy += entropy * inv_pg;

                if (ga) {
                    // d(-min)/dlp: unclipped branch active iff s1 <= s2;
                    // dH/dz_j = -p_j*(log p_j + H), and the loss carries -coef*H
                    double dlp = (s1 <= s2) ? -rho * adv : 0.0;
                    std::vector<double> dlogits(logits.size());
                    for (std::size_t j = 0; j < logits.size(); ++j) {
                        double ind = (static_cast<int>(j) == action) ? 1.0 : 0.0;
                        double logp = std::log(std::max(probs[j], 1e-300));
                        dlogits[j] = inv_pg * (dlp * (ind - probs[j]) +
                                               cfg.entropy_coef * probs[j] * (logp + entropy));
                    }
                    mlp_backward(ac.actor, cache, dlogits, *ga);
                }
            }

            const auto& joint = ep.joint_obs[static_cast<std::size_t>(t)];
            std::vector<double> vout = mlp_forward(ac.critic, joint, gc ? &cache : nullptr);
            double err = vout[0] - ep.returns[static_cast<std::size_t>(t)];
            rep.value_loss += err * err * inv_v;
            if (gc) {
                std::vector<double> dv = {2.0 * err * inv_v};
                mlp_backward(ac.critic, cache, dv, *gc);
            }
        }
    }
    rep.total = rep.policy_loss + rep.value_loss - cfg.entropy_coef * rep.entropy;
    return rep;
}

// mini_epochs of Adam over batch_size-episode slices; advantages must be
// normalized beforehand. A non-finite loss aborts and restores the entry
// parameters.
inline LossReport ppo_update(ActorCritic& ac, TrajectoryBatch& batch,
                             const TrainConfig& cfg, AdamState& actor_opt,
                             AdamState& critic_opt) {
    if (batch.episodes.empty()) throw ContractError("ppo_update: empty batch");
    std::vector<double> actor_snapshot = flatten_params(ac.actor);
    std::vector<double> critic_snapshot = flatten_params(ac.critic);
    AdamState actor_opt_snapshot = actor_opt;
    AdamState critic_opt_snapshot = critic_opt;

    MlpGrads ga(ac.actor), gc(ac.critic);
    LossReport last;
    for (int epoch = 0; epoch < cfg.mini_epochs; ++epoch) {
        for (std::size_t start = 0; start < batch.episodes.size();
             start += static_cast<std::size_t>(cfg.batch_size)) {
            std::size_t count = std::min(static_cast<std::size_t>(cfg.batch_size),
                                         batch.episodes.size() - start);
            ga.zero();
            gc.zero();
            LossReport rep = ppo_loss(
                ac, {batch.episodes.data() + start, count}, cfg, &ga, &gc);
            if (!std::isfinite(rep.total)) {
                unflatten_params(ac.actor, actor_snapshot);
                unflatten_params(ac.critic, critic_snapshot);
                actor_opt = actor_opt_snapshot;
                critic_opt = critic_opt_snapshot;
                rep.aborted = true;
                return rep;
            }
            double norm = std::sqrt(ga.squared_norm() + gc.squared_norm());
            rep.grad_norm = norm;
            if (cfg.grad_clip_norm > 0.0 && norm > cfg.grad_clip_norm) {
                double f = cfg.grad_clip_norm / norm;
                ga.scale(f);
                gc.scale(f);
            }
            adam_step(ac.actor, ga, actor_opt, cfg.lr, cfg.adam_beta1, cfg.adam_beta2,
                      cfg.adam_eps);
            adam_step(ac.critic, gc, critic_opt, cfg.lr, cfg.adam_beta1, cfg.adam_beta2,
                      cfg.adam_eps);
            last = rep;
        }
    }
    return last;
}

// learning-potential proxy: mean |one-step TD residual| per episode
inline std::vector<double> td_error_scores(const TrajectoryBatch& batch, double gamma) {
    std::vector<double> scores;
    scores.reserve(batch.episodes.size());
    for (const auto& ep : batch.episodes) {
        double acc = 0.0;
        std::size_t n = static_cast<std::size_t>(ep.length());
        for (std::size_t t = 0; t < n; ++t) {
            double v_next = (t + 1 < n) ? ep.values[t + 1] : 0.0;
            acc += std::abs(ep.rewards[t] + gamma * v_next - ep.values[t]);
        }
        scores.push_back(n ? acc / static_cast<double>(n) : 0.0);
    }
    return scores;
}

// greedy rollouts, no parameter updates; one PerfMetrics row per context
inline std::vector<PerfMetrics> evaluate_policy(const ActorCritic& ac,
                                                const NetworkSpec& net,
                                                const ContextSpace& space,
                                                std::span<const Context> contexts,
                                                int episodes_per_context,
                                                std::uint64_t eval_seed) {
    std::vector<PerfMetrics> rows;
    rows.reserve(contexts.size());
    for (std::size_t ci = 0; ci < contexts.size(); ++ci) {
        PerfMetrics acc;
        for (int e = 0; e < episodes_per_context; ++e) {
            std::uint64_t seed = eval_seed + 1000003ULL * ci + static_cast<std::uint64_t>(e);
            TrafficSim sim(net, contexts[ci], space, seed);
            while (!sim.done()) {
                auto obs = sim.observe_all();
                std::vector<int> acts(static_cast<std::size_t>(sim.num_agents()));
                for (int a = 0; a < sim.num_agents(); ++a) {
                    preprocess_obs(obs[static_cast<std::size_t>(a)]);
                    acts[static_cast<std::size_t>(a)] =
                        act(ac.actor, obs[static_cast<std::size_t>(a)], ActMode::Greedy,
                            nullptr)
                            .action;
                }
                sim.step(acts);
            }
            EpisodeMetrics m = sim.finalize_metrics();
            acc.mean_return += m.episode_return;
            acc.avg_travel_time += m.avg_travel_time;
            acc.throughput += m.throughput;
            acc.avg_wait_time += m.avg_wait_time;
            acc.avg_delay += m.avg_delay;
        }
        double inv = 1.0 / static_cast<double>(episodes_per_context);
        acc.mean_return *= inv;
        acc.avg_travel_time *= inv;
        acc.throughput *= inv;
        acc.avg_wait_time *= inv;
        acc.avg_delay *= inv;
        rows.push_back(acc);
    }
    return rows;
}

inline void save_checkpoint(const std::string& path, const ActorCritic& ac) {
    std::ofstream f(path);
    if (!f) throw ConfigError("cannot open checkpoint path '" + path + "'");
    f << "mcl-checkpoint 1\n";
    auto dump = [&f](const Mlp& net) {
        f << net.layers.size() << "\n";
        for (const auto& l : net.layers) {
            f << l.in << " " << l.out << "\n";
            char buf[32];
            for (double v : l.w) {
                std::snprintf(buf, sizeof(buf), "%.17g", v);
                f << buf << " ";
            }
            f << "\n";
            for (double v : l.b) {
                std::snprintf(buf, sizeof(buf), "%.17g", v);
                f << buf << " ";
            }
            f << "\n";
        }
    };
    dump(ac.actor);
    dump(ac.critic);
}

inline ActorCritic load_checkpoint(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open checkpoint '" + path + "'");
    std::string magic;
    int version;
    f >> magic >> version;
    if (magic != "mcl-checkpoint" || version != 1)
        throw ConfigError("unrecognized checkpoint header in '" + path + "'");
    auto read = [&f, &path]() {
        Mlp net;
        std::size_t layers;
        f >> layers;
        for (std::size_t i = 0; i < layers; ++i) {
            Linear l;
            f >> l.in >> l.out;
            l.w.resize(static_cast<std::size_t>(l.in) * static_cast<std::size_t>(l.out));
            l.b.resize(static_cast<std::size_t>(l.out));
            for (auto& v : l.w) f >> v;
            for (auto& v : l.b) f >> v;
            if (!f) throw ConfigError("truncated checkpoint '" + path + "'");
            net.layers.push_back(std::move(l));
        }
        return net;
    };
    ActorCritic ac;
    ac.actor = read();
    ac.critic = read();
    return ac;
}

}  // namespace mcl
