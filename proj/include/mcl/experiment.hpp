#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mcl/context.hpp"
#include "mcl/curriculum.hpp"
#include "mcl/error.hpp"
#include "mcl/llm.hpp"
#include "mcl/metrics.hpp"
#include "mcl/traffic.hpp"
#include "mcl/trainer.hpp"

namespace mcl {

struct ExperimentConfig {
    SchedulerKind scheduler = SchedulerKind::LlmBlend;
    ContextSpace space = ContextSpace::vehicle_parameters();
    CurriculumConfig curriculum;
    NetworkSpec network;
    TrainConfig train;
    LlmConfig llm;

    // offline proposer by default; a non-empty chat_client (e.g. the http
    // transport) takes precedence over the mock policies
    bool mock_llm = true;
    MockPolicy mock_policy = MockPolicy::Constant;
    std::vector<Context> mock_script;
    ChatClient chat_client;

    int total_curriculum_steps = 50;
    int eval_interval = 5;  // episodes between held-out evaluations
    int n_test_contexts = 5;
    int n_generalization_contexts = 10;
    int finetune_episodes = 5;
    std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
    bool export_trace = false;

    void validate() const {
        curriculum.validate();
        network.validate();
        train.validate();
        llm.validate();
        if (total_curriculum_steps < 1) throw ConfigError("total_curriculum_steps < 1");
        if (eval_interval < 1) throw ConfigError("eval_interval < 1");
        if (n_test_contexts < 0) throw ConfigError("n_test_contexts < 0");
        if (n_generalization_contexts < 0) throw ConfigError("n_generalization_contexts < 0");
        if (finetune_episodes < 0) throw ConfigError("finetune_episodes < 0");
        if (seeds.empty()) throw ConfigError("at least one seed required");
        for (std::size_t i = 0; i < seeds.size(); ++i)
            for (std::size_t j = 0; j < i; ++j)
                if (seeds[i] == seeds[j]) throw ConfigError("seeds must be distinct");
        if (!curriculum.initial_context.values.empty())
            space.check(curriculum.initial_context);

        // the geometry must accommodate every samplable context
        auto has = [this](const char* name) {
            for (const auto& p : space.params())
                if (p.name == name) return true;
            return false;
        };
        if (has("length") && has("minGap") && has("maxSpeed")) {
            double worst_body = space.param(space.index_of("length")).upper +
                                space.param(space.index_of("minGap")).upper;
            double worst_step = space.param(space.index_of("maxSpeed")).upper * network.sim_dt;
            if (network.link_length <= worst_body)
                throw ConfigError("link_length must exceed max vehicle length + minGap");
            if (network.link_length <= worst_step)
                throw ConfigError("link_length must exceed maxSpeed * sim_dt");
        }
    }
};

struct StepRecord {
    long long step = 0;
    StepDecision decision;
    PerfMetrics train_metrics;
    double wall_time_s = 0.0;
};

struct EvalPoint {
    long long episode = 0;
    std::vector<PerfMetrics> per_test_context;
};

struct UpdateRecord {
    long long step = 0;  // curriculum step during which the update fired
    long long update = 0;
    LossReport loss;
};

struct RunRecord {
    std::uint64_t seed = 0;
    std::vector<Context> test_contexts;
    std::vector<StepRecord> steps;
    std::vector<UpdateRecord> updates;
    std::vector<EvalPoint> evals;
    std::vector<Context> generalization_contexts;
    std::vector<PerfMetrics> zero_shot;
    std::vector<PerfMetrics> finetuned;
    bool aborted = false;
    std::string abort_reason;
};

struct RunResult {
    RunRecord record;
    ActorCritic params;
    std::string trace;  // per-step queue trace when enabled
};

namespace detail {

inline PerfMetrics to_perf(const EpisodeMetrics& m) {
    PerfMetrics p;
    p.mean_return = m.episode_return;
    p.avg_travel_time = m.avg_travel_time;
    p.throughput = m.throughput;
    p.avg_wait_time = m.avg_wait_time;
    p.avg_delay = m.avg_delay;
    return p;
}

inline PerfMetrics mean_perf(std::span<const PerfMetrics> rows) {
    PerfMetrics out;
    if (rows.empty()) return out;
    for (const auto& r : rows) {
        out.mean_return += r.mean_return;
        out.avg_travel_time += r.avg_travel_time;
        out.throughput += r.throughput;
        out.avg_wait_time += r.avg_wait_time;
        out.avg_delay += r.avg_delay;
    }
    double inv = 1.0 / static_cast<double>(rows.size());
    out.mean_return *= inv;
    out.avg_travel_time *= inv;
    out.throughput *= inv;
    out.avg_wait_time *= inv;
    out.avg_delay *= inv;
    return out;
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (a + 1) + 0xbf58476d1ce4e5b9ULL * (b + 1);
    z ^= z >> 30;
    z *= 0xbf58476d1ce4e5b9ULL;
    z ^= z >> 27;
    z *= 0x94d049bb133111ebULL;
    z ^= z >> 31;
    return z;
}

}  // namespace detail

inline ContextProposer make_proposer(const ExperimentConfig& cfg, std::uint64_t seed,
                                     const ChatClient& client) {
    auto fallback_rng = std::make_shared<Rng>(detail::mix_seed(seed, 3, 0));
    LlmConfig llm = cfg.llm;
    ContextSpace space = cfg.space;
    return [client, llm, space, fallback_rng](
               std::span<const HistoryEntry> window) -> ProposalResult {
        ProposerOutcome out = propose(client, llm, window, space, *fallback_rng);
        return {out.context, out.fallback_used};
    };
}

inline ChatClient make_configured_client(const ExperimentConfig& cfg, std::uint64_t seed);

// zero-shot greedy evaluation plus an optional per-context finetuned pass;
// the base parameters are cloned per context and never touched
inline std::pair<std::vector<PerfMetrics>, std::vector<PerfMetrics>> finetune_and_test(
    const ActorCritic& base, const ExperimentConfig& cfg,
    std::span<const Context> contexts, int finetune_episodes, std::uint64_t seed) {
    std::vector<PerfMetrics> zero_shot =
        evaluate_policy(base, cfg.network, cfg.space, contexts, 1,
                        detail::mix_seed(seed, 40, 0));
    std::vector<PerfMetrics> finetuned;
    finetuned.reserve(contexts.size());
    for (std::size_t ci = 0; ci < contexts.size(); ++ci) {
        if (finetune_episodes == 0) {
            finetuned.push_back(zero_shot[ci]);
            continue;
        }
        ActorCritic clone = base;
        AdamState aopt(clone.actor.param_count()), copt(clone.critic.param_count());
        Rng action_rng(detail::mix_seed(seed, 41, ci));
        TrajectoryBatch batch;
        for (int e = 0; e < finetune_episodes; ++e) {
            batch.episodes.push_back(collect_episode(
                clone, cfg.network, cfg.space, contexts[ci],
                detail::mix_seed(seed, 42 + static_cast<std::uint64_t>(e), ci), cfg.train,
                ActMode::Sample, &action_rng));
        }
        normalize_advantages(batch);
        ppo_update(clone, batch, cfg.train, aopt, copt);
        // same eval seed the zero-shot pass used for this context
        finetuned.push_back(evaluate_policy(clone, cfg.network, cfg.space,
                                            {&contexts[ci], 1}, 1,
                                            detail::mix_seed(seed, 40, 0) + 1000003ULL * ci)[0]);
    }
    return {zero_shot, finetuned};
}

// Alternate scheduler step and training phase for T curriculum steps,
// evaluating greedily on the frozen test contexts every eval_interval
// episodes, then run the generalization protocol.
inline RunResult run_experiment(const ExperimentConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    const ContextSpace& space = cfg.space;

    RunResult result;
    RunRecord& rec = result.record;
    rec.seed = seed;

    Context initial = cfg.curriculum.initial_context.values.empty()
                          ? space.midpoint()
                          : cfg.curriculum.initial_context;
    CurriculumConfig cur_cfg = cfg.curriculum;
    cur_cfg.initial_context = initial;

    Rng test_rng(detail::mix_seed(seed, 1, 0));
    for (int i = 0; i < cfg.n_test_contexts; ++i)
        rec.test_contexts.push_back(sample_uniform(space, test_rng));

    SchedulerState state(detail::mix_seed(seed, 2, 0));

    SchedulerDeps deps;
    if (scheduler_uses_proposer(cfg.scheduler))
        deps.proposer = make_proposer(cfg, seed, make_configured_client(cfg, seed));

    Rng init_rng(detail::mix_seed(seed, 4, 0));
    TrafficSim probe(cfg.network, initial, space, 0);
    ActorCritic ac = make_actor_critic(probe.obs_dim(), probe.num_agents(), cfg.train,
                                       init_rng);
    AdamState actor_opt(ac.actor.param_count()), critic_opt(ac.critic.param_count());

    std::uint64_t value_probe_seed = detail::mix_seed(seed, 9, 0);
    deps.value_fn = [&ac, &cfg, &space, value_probe_seed](const Context& c) {
        TrafficSim sim(cfg.network, c, space, value_probe_seed);
        auto obs = sim.observe_all();
        std::vector<double> joint;
        for (auto& o : obs) {
            preprocess_obs(o);
            joint.insert(joint.end(), o.begin(), o.end());
        }
        return centralized_value(ac.critic, joint);
    };

    Rng action_rng(detail::mix_seed(seed, 5, 0));
    std::uint64_t eval_seed = detail::mix_seed(seed, 6, 0);

    TrajectoryBatch buffer;
    long long episode_count = 0;

    if (cfg.export_trace) {
        result.trace = "t,agent,phase";
        for (int q = 0; q < 4 * cfg.network.lanes_per_approach; ++q)
            result.trace += ",q" + std::to_string(q);
        result.trace += "\n";
    }

    try {
        for (int t = 0; t < cfg.total_curriculum_steps; ++t) {
            auto tic = std::chrono::steady_clock::now();
            StepDecision decision = scheduler_step(cfg.scheduler, state, cur_cfg, space, deps);

            std::vector<PerfMetrics> phase_rows;
            double phase_td = 0.0;
            for (int e = 0; e < cur_cfg.episodes_per_context; ++e) {
                // trace only the first episode of each step to keep files small
                std::string* trace =
                    (cfg.export_trace && e == 0) ? &result.trace : nullptr;
                Episode ep = collect_episode(
                    ac, cfg.network, space, decision.next_context,
                    detail::mix_seed(seed, 100000 + static_cast<std::uint64_t>(t), e),
                    cfg.train, ActMode::Sample, &action_rng, trace);
                phase_rows.push_back(detail::to_perf(ep.metrics));
                TrajectoryBatch single;
                single.episodes.push_back(std::move(ep));
                phase_td += td_error_scores(single, cfg.train.gamma)[0];
                buffer.episodes.push_back(std::move(single.episodes[0]));
                episode_count += 1;

                if (static_cast<int>(buffer.episodes.size()) >= cfg.train.buffer_size) {
                    normalize_advantages(buffer);
                    LossReport lr = ppo_update(ac, buffer, cfg.train, actor_opt, critic_opt);
                    rec.updates.push_back(
                        {t, static_cast<long long>(rec.updates.size()), lr});
                    buffer.episodes.clear();
                }
                if (cfg.n_test_contexts > 0 && episode_count % cfg.eval_interval == 0) {
                    rec.evals.push_back(
                        {episode_count, evaluate_policy(ac, cfg.network, space,
                                                        rec.test_contexts, 1, eval_seed)});
                }
            }
            phase_td /= static_cast<double>(cur_cfg.episodes_per_context);
            PerfMetrics phase_metrics = detail::mean_perf(phase_rows);
            record(state, decision.next_context, phase_metrics, phase_td);

            StepRecord sr;
            sr.step = t;
            sr.decision = decision;
            sr.train_metrics = phase_metrics;
            sr.wall_time_s =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - tic).count();
            rec.steps.push_back(std::move(sr));
        }

        if (!buffer.episodes.empty()) {
            normalize_advantages(buffer);
            LossReport lr = ppo_update(ac, buffer, cfg.train, actor_opt, critic_opt);
            rec.updates.push_back({cfg.total_curriculum_steps - 1,
                                   static_cast<long long>(rec.updates.size()), lr});
            buffer.episodes.clear();
        }

        Rng gen_rng(detail::mix_seed(seed, 8, 0));
        for (int i = 0; i < cfg.n_generalization_contexts; ++i)
            rec.generalization_contexts.push_back(sample_uniform(space, gen_rng));
        if (!rec.generalization_contexts.empty()) {
            auto [zs, ft] = finetune_and_test(ac, cfg, rec.generalization_contexts,
                                              cfg.finetune_episodes, seed);
            rec.zero_shot = std::move(zs);
            rec.finetuned = std::move(ft);
        }
    } catch (const std::exception& e) {
        rec.aborted = true;
        rec.abort_reason = e.what();
    }

    result.params = std::move(ac);
    return result;
}

inline ChatClient make_configured_client(const ExperimentConfig& cfg, std::uint64_t seed) {
    if (cfg.chat_client) return cfg.chat_client;
    if (cfg.mock_llm) {
        std::optional<Context> constant;
        if (cfg.mock_policy == MockPolicy::Constant) {
            constant = cfg.curriculum.initial_context.values.empty()
                           ? cfg.space.midpoint()
                           : cfg.curriculum.initial_context;
        }
        return make_mock_chat_client(cfg.space, cfg.mock_policy,
                                     detail::mix_seed(seed, 10, 0), cfg.mock_script,
                                     constant);
    }
    throw ConfigError("mock_llm=false requires an installed chat client");
}

// ---- analysis exports ----------------------------------------------------

struct TrajectoryTable {
    std::vector<std::string> feature_names;
    std::vector<std::vector<double>> rows;  // [step][feature], normalized units
};

struct CorrelationMatrix {
    std::vector<std::string> feature_names;
    std::vector<std::vector<double>> corr;  // Pearson; constant features zeroed
    std::vector<bool> constant_flag;
};

inline TrajectoryTable feature_trajectories(std::span<const StepRecord> steps,
                                            const ContextSpace& space) {
    TrajectoryTable t;
    for (const auto& p : space.params()) t.feature_names.push_back(p.name);
    for (const auto& s : steps)
        t.rows.push_back(normalize(s.decision.next_context, space));
    return t;
}

inline CorrelationMatrix feature_correlations(const TrajectoryTable& t) {
    std::size_t d = t.feature_names.size();
    std::size_t n = t.rows.size();
    CorrelationMatrix m;
    m.feature_names = t.feature_names;
    m.corr.assign(d, std::vector<double>(d, 0.0));
    m.constant_flag.assign(d, false);

    std::vector<double> mean(d, 0.0), sd(d, 0.0);
    for (const auto& row : t.rows)
        for (std::size_t j = 0; j < d; ++j) mean[j] += row[j];
    for (auto& v : mean) v /= static_cast<double>(std::max<std::size_t>(n, 1));
    for (const auto& row : t.rows)
        for (std::size_t j = 0; j < d; ++j)
            sd[j] += (row[j] - mean[j]) * (row[j] - mean[j]);
    for (std::size_t j = 0; j < d; ++j) {
        sd[j] = std::sqrt(sd[j]);
        if (sd[j] == 0.0) m.constant_flag[j] = true;
    }

    for (std::size_t a = 0; a < d; ++a) {
        for (std::size_t b = 0; b < d; ++b) {
            if (m.constant_flag[a] || m.constant_flag[b]) continue;  // stays 0
            double cov = 0.0;
            for (const auto& row : t.rows)
                cov += (row[a] - mean[a]) * (row[b] - mean[b]);
            m.corr[a][b] = cov / (sd[a] * sd[b]);
        }
    }
    return m;
}

// ---- seed aggregation ------------------------------------------------------

struct SummaryTable {
    std::vector<std::string> metric_names;
    std::vector<double> mean;
    std::vector<double> stddev;  // population std across seeds
    bool single_seed = false;
};

// per-seed scalar = mean over generalization contexts of the finetuned
// metrics; summary = mean +/- population std across seeds
inline SummaryTable aggregate_seeds(std::span<const RunRecord> records) {
    if (records.empty()) throw ContractError("aggregate_seeds: no records");
    SummaryTable s;
    s.metric_names = {"mean_return", "avg_travel_time", "throughput", "avg_wait_time",
                      "avg_delay"};
    s.single_seed = records.size() == 1;

    std::vector<std::vector<double>> per_seed(5);
    for (const auto& r : records) {
        PerfMetrics m = detail::mean_perf(r.finetuned);
        per_seed[0].push_back(m.mean_return);
        per_seed[1].push_back(m.avg_travel_time);
        per_seed[2].push_back(m.throughput);
        per_seed[3].push_back(m.avg_wait_time);
        per_seed[4].push_back(m.avg_delay);
    }
    for (const auto& vals : per_seed) {
        double mean = 0.0;
        for (double v : vals) mean += v;
        mean /= static_cast<double>(vals.size());
        double var = 0.0;
        for (double v : vals) var += (v - mean) * (v - mean);
        var /= static_cast<double>(vals.size());
        s.mean.push_back(mean);
        s.stddev.push_back(std::sqrt(var));
    }
    return s;
}

// ---- file output -----------------------------------------------------------

namespace detail {

inline std::string fmt_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace detail

inline nlohmann::ordered_json context_json(const Context& ctx, const ContextSpace& space) {
    nlohmann::ordered_json j;
    for (std::size_t i = 0; i < space.size(); ++i)
        j[space.param(i).name] = ctx.values[i];
    return j;
}

inline nlohmann::ordered_json metrics_json(const PerfMetrics& m) {
    nlohmann::ordered_json j;
    j["mean_return"] = m.mean_return;
    j["avg_travel_time"] = m.avg_travel_time;
    j["throughput"] = m.throughput;
    j["avg_wait_time"] = m.avg_wait_time;
    j["avg_delay"] = m.avg_delay;
    return j;
}

// step rows carry the pinned keys; loss-report rows are interleaved after the
// step whose training phase produced the update and carry "update" instead
inline std::string run_jsonl(const RunRecord& rec, const ContextSpace& space) {
    std::string out;
    std::size_t next_update = 0;
    for (const auto& s : rec.steps) {
        nlohmann::ordered_json j;
        j["step"] = s.step;
        j["source"] = to_string(s.decision.source);
        j["sigma"] = s.decision.sigma;
        j["blended"] = s.decision.blended;
        j["context"] = context_json(s.decision.next_context, space);
        j["metrics"] = metrics_json(s.train_metrics);
        out += j.dump();
        out += "\n";
        while (next_update < rec.updates.size() &&
               rec.updates[next_update].step <= s.step) {
            const auto& u = rec.updates[next_update++];
            nlohmann::ordered_json lj;
            lj["update"] = u.update;
            lj["policy_loss"] = u.loss.policy_loss;
            lj["value_loss"] = u.loss.value_loss;
            lj["entropy"] = u.loss.entropy;
            lj["grad_norm"] = u.loss.grad_norm;
            lj["aborted"] = u.loss.aborted;
            out += lj.dump();
            out += "\n";
        }
    }
    return out;
}

inline std::string evals_csv(const RunRecord& rec) {
    std::string out =
        "episode,test_context,mean_return,avg_travel_time,throughput,avg_wait_time,avg_delay\n";
    for (const auto& e : rec.evals) {
        for (std::size_t i = 0; i < e.per_test_context.size(); ++i) {
            const auto& m = e.per_test_context[i];
            out += std::to_string(e.episode) + "," + std::to_string(i) + "," +
                   detail::fmt_g17(m.mean_return) + "," + detail::fmt_g17(m.avg_travel_time) +
                   "," + detail::fmt_g17(m.throughput) + "," +
                   detail::fmt_g17(m.avg_wait_time) + "," + detail::fmt_g17(m.avg_delay) +
                   "\n";
        }
    }
    return out;
}

inline std::string generalization_csv(const RunRecord& rec) {
    std::string out =
        "context,phase,mean_return,avg_travel_time,throughput,avg_wait_time,avg_delay\n";
    auto emit = [&out](std::size_t i, const char* phase, const PerfMetrics& m) {
        out += std::to_string(i) + "," + phase + "," + detail::fmt_g17(m.mean_return) + "," +
               detail::fmt_g17(m.avg_travel_time) + "," + detail::fmt_g17(m.throughput) +
               "," + detail::fmt_g17(m.avg_wait_time) + "," + detail::fmt_g17(m.avg_delay) +
               "\n";
    };
    for (std::size_t i = 0; i < rec.zero_shot.size(); ++i)
        emit(i, "zero_shot", rec.zero_shot[i]);
    for (std::size_t i = 0; i < rec.finetuned.size(); ++i)
        emit(i, "finetuned", rec.finetuned[i]);
    return out;
}

inline std::string trajectory_csv(const TrajectoryTable& t) {
    std::string out = "step";
    for (const auto& n : t.feature_names) out += "," + n;
    out += "\n";
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
        out += std::to_string(i);
        for (double v : t.rows[i]) out += "," + detail::fmt_g17(v);
        out += "\n";
    }
    return out;
}

inline std::string correlation_csv(const CorrelationMatrix& m) {
    std::string out = "feature";
    for (const auto& n : m.feature_names) out += "," + n;
    out += ",constant\n";
    for (std::size_t a = 0; a < m.feature_names.size(); ++a) {
        out += m.feature_names[a];
        for (std::size_t b = 0; b < m.feature_names.size(); ++b)
            out += "," + detail::fmt_g17(m.corr[a][b]);
        out += m.constant_flag[a] ? ",1\n" : ",0\n";
    }
    return out;
}

inline std::string summary_csv(const SummaryTable& s) {
    std::string out = "metric,mean,std,single_seed\n";
    for (std::size_t i = 0; i < s.metric_names.size(); ++i)
        out += s.metric_names[i] + "," + detail::fmt_g17(s.mean[i]) + "," +
               detail::fmt_g17(s.stddev[i]) + "," + (s.single_seed ? "1" : "0") + "\n";
    return out;
}

inline void write_file(const std::filesystem::path& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot write '" + path.string() + "'");
    f << content;
}

inline void write_run_outputs(const std::filesystem::path& dir, const RunResult& result,
                              const ContextSpace& space) {
    std::filesystem::create_directories(dir);
    const RunRecord& rec = result.record;
    write_file(dir / "run.jsonl", run_jsonl(rec, space));
    write_file(dir / "evals.csv", evals_csv(rec));
    write_file(dir / "generalization.csv", generalization_csv(rec));
    TrajectoryTable t = feature_trajectories(rec.steps, space);
    write_file(dir / "trajectory.csv", trajectory_csv(t));
    write_file(dir / "correlation.csv", correlation_csv(feature_correlations(t)));
    save_checkpoint((dir / "checkpoint.txt").string(), result.params);
    if (!result.trace.empty()) write_file(dir / "trace.csv", result.trace);
    if (rec.aborted)
        write_file(dir / "ABORTED.txt", rec.abort_reason + "\n");
}

// rebuild the analysis tables from an existing run.jsonl
inline std::pair<TrajectoryTable, CorrelationMatrix> export_analysis_from_jsonl(
    const std::filesystem::path& run_jsonl_path, const ContextSpace& space) {
    std::ifstream f(run_jsonl_path);
    if (!f) throw ConfigError("cannot read '" + run_jsonl_path.string() + "'");
    std::vector<StepRecord> steps;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        if (!j.contains("step")) continue;  // loss-report row
        StepRecord s;
        s.step = j.at("step").get<long long>();
        Context ctx;
        for (std::size_t i = 0; i < space.size(); ++i)
            ctx.values.push_back(j.at("context").at(space.param(i).name).get<double>());
        s.decision.next_context = std::move(ctx);
        steps.push_back(std::move(s));
    }
    TrajectoryTable t = feature_trajectories(steps, space);
    return {t, feature_correlations(t)};
}

}  // namespace mcl
