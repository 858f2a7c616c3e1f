#include <catch2/catch_amalgamated.hpp>

#include "mcl/experiment.hpp"

using namespace mcl;

namespace {

// desk-scale settings so a full run takes well under a second
ExperimentConfig tiny_config() {
    ExperimentConfig cfg;
    cfg.network.rows = 1;
    cfg.network.cols = 1;
    cfg.network.episode_len = 20;
    cfg.network.spawn_rate = 0.05;
    cfg.train.hidden_dim = 16;
    cfg.train.buffer_size = 4;
    cfg.train.mini_epochs = 1;
    cfg.total_curriculum_steps = 10;
    cfg.eval_interval = 5;
    cfg.n_test_contexts = 2;
    cfg.n_generalization_contexts = 2;
    cfg.finetune_episodes = 1;
    cfg.seeds = {1};
    return cfg;
}

}  // namespace

TEST_CASE("eval cadence: T=10, one episode per step, interval 5 -> 2 eval points") {
    ExperimentConfig cfg = tiny_config();
    RunResult r = run_experiment(cfg, 1);
    REQUIRE_FALSE(r.record.aborted);
    CHECK(r.record.steps.size() == 10);
    REQUIRE(r.record.evals.size() == 2);
    CHECK(r.record.evals[0].episode == 5);
    CHECK(r.record.evals[1].episode == 10);
    CHECK(r.record.evals[0].per_test_context.size() == 2);
}

TEST_CASE("no-curriculum trains on one context for the whole run") {
    ExperimentConfig cfg = tiny_config();
    cfg.scheduler = SchedulerKind::NoCurriculum;
    RunResult r = run_experiment(cfg, 2);
    REQUIRE_FALSE(r.record.aborted);
    for (const auto& s : r.record.steps) {
        CHECK(s.decision.next_context == r.record.steps[0].decision.next_context);
        CHECK_FALSE(s.decision.blended);
    }
}

TEST_CASE("constant-mock llm_blend blends at steps 3, 6 and 9") {
    ExperimentConfig cfg = tiny_config();
    cfg.scheduler = SchedulerKind::LlmBlend;
    cfg.mock_policy = MockPolicy::Constant;
    RunResult r = run_experiment(cfg, 3);
    REQUIRE_FALSE(r.record.aborted);
    std::vector<long long> blend_steps;
    for (const auto& s : r.record.steps)
        if (s.decision.blended) blend_steps.push_back(s.step);
    CHECK(blend_steps == std::vector<long long>{3, 6, 9});
}

TEST_CASE("finetune with zero episodes returns the zero-shot rows") {
    ExperimentConfig cfg = tiny_config();
    Rng rng(4);
    ActorCritic probe_params = [&] {
        TrafficSim probe(cfg.network, cfg.space.midpoint(), cfg.space, 0);
        return make_actor_critic(probe.obs_dim(), probe.num_agents(), cfg.train, rng);
    }();

    std::vector<Context> contexts;
    Rng crng(5);
    for (int i = 0; i < 10; ++i) contexts.push_back(sample_uniform(cfg.space, crng));

    auto [zs0, ft0] = finetune_and_test(probe_params, cfg, contexts, 0, 6);
    CHECK(zs0.size() == 10);
    CHECK(ft0.size() == 10);
    for (std::size_t i = 0; i < 10; ++i) CHECK(zs0[i] == ft0[i]);

    std::vector<double> before_a = flatten_params(probe_params.actor);
    auto [zs1, ft1] = finetune_and_test(probe_params, cfg, contexts, 1, 6);
    CHECK(ft1.size() == 10);
    CHECK(flatten_params(probe_params.actor) == before_a);  // base untouched
}

TEST_CASE("seed aggregation") {
    auto rec_with_return = [](double r) {
        RunRecord rec;
        PerfMetrics m;
        m.mean_return = r;
        rec.finetuned = {m};
        return rec;
    };

    std::vector<RunRecord> same = {rec_with_return(7.0), rec_with_return(7.0)};
    SummaryTable s1 = aggregate_seeds(same);
    CHECK(s1.mean[0] == 7.0);
    CHECK(s1.stddev[0] == 0.0);
    CHECK_FALSE(s1.single_seed);

    std::vector<RunRecord> two = {rec_with_return(10.0), rec_with_return(20.0)};
    SummaryTable s2 = aggregate_seeds(two);
    CHECK(s2.mean[0] == 15.0);
    CHECK(s2.stddev[0] == 5.0);

    std::vector<RunRecord> swapped = {two[1], two[0]};
    SummaryTable s3 = aggregate_seeds(swapped);
    CHECK(s3.mean[0] == s2.mean[0]);
    CHECK(s3.stddev[0] == s2.stddev[0]);

    std::vector<RunRecord> one = {rec_with_return(3.0)};
    SummaryTable s4 = aggregate_seeds(one);
    CHECK(s4.stddev[0] == 0.0);
    CHECK(s4.single_seed);
}

TEST_CASE("correlation export conventions") {
    ContextSpace space = ContextSpace::vehicle_parameters();
    auto step_with = [&space](double u_len, double u_width) {
        StepRecord s;
        std::vector<double> coords(space.size(), 0.5);
        coords[space.index_of("length")] = u_len;
        coords[space.index_of("width")] = u_width;
        s.decision.next_context = denormalize(coords, space);
        return s;
    };

    // length and width move in lockstep; everything else constant
    std::vector<StepRecord> steps;
    for (double u : {0.1, 0.3, 0.5, 0.7, 0.9}) steps.push_back(step_with(u, u));
    TrajectoryTable t = feature_trajectories(steps, space);
    CorrelationMatrix m = feature_correlations(t);
    std::size_t li = space.index_of("length"), wi = space.index_of("width");
    CHECK(m.corr[li][wi] == Catch::Approx(1.0).margin(1e-12));
    CHECK(m.corr[li][li] == Catch::Approx(1.0).margin(1e-12));

    // anti-correlated pair
    std::vector<StepRecord> anti;
    for (double u : {0.1, 0.3, 0.5, 0.7, 0.9}) anti.push_back(step_with(u, 1.0 - u));
    CorrelationMatrix m2 = feature_correlations(feature_trajectories(anti, space));
    CHECK(m2.corr[li][wi] == Catch::Approx(-1.0).margin(1e-12));

    // constant features are flagged and zeroed against everything
    std::size_t gi = space.index_of("minGap");
    CHECK(m.constant_flag[gi]);
    for (std::size_t j = 0; j < space.size(); ++j) CHECK(m.corr[gi][j] == 0.0);
    CHECK_FALSE(m.constant_flag[li]);

    // integer rounding keeps headwayTime constant in these rows
    std::string csv = correlation_csv(m);
    CHECK(csv.find("minGap") != std::string::npos);
    CHECK(csv.rfind(",1\n") != std::string::npos);
}

TEST_CASE("identical config and seed reproduce byte-identical outputs") {
    ExperimentConfig cfg = tiny_config();
    cfg.scheduler = SchedulerKind::LlmBlend;
    RunResult a = run_experiment(cfg, 11);
    RunResult b = run_experiment(cfg, 11);
    REQUIRE_FALSE(a.record.aborted);

    CHECK(run_jsonl(a.record, cfg.space) == run_jsonl(b.record, cfg.space));
    TrajectoryTable ta = feature_trajectories(a.record.steps, cfg.space);
    TrajectoryTable tb = feature_trajectories(b.record.steps, cfg.space);
    CHECK(trajectory_csv(ta) == trajectory_csv(tb));
    CHECK(correlation_csv(feature_correlations(ta)) ==
          correlation_csv(feature_correlations(tb)));
    CHECK(evals_csv(a.record) == evals_csv(b.record));
    CHECK(generalization_csv(a.record) == generalization_csv(b.record));
}

TEST_CASE("held-out test contexts never enter the curriculum") {
    ExperimentConfig cfg = tiny_config();
    cfg.scheduler = SchedulerKind::DomainRandomization;
    cfg.total_curriculum_steps = 20;
    RunResult r = run_experiment(cfg, 12);
    REQUIRE_FALSE(r.record.aborted);
    for (const auto& s : r.record.steps)
        for (const auto& test_ctx : r.record.test_contexts)
            CHECK_FALSE(s.decision.next_context == test_ctx);
}

TEST_CASE("run outputs land on disk, including the jsonl round-trip") {
    ExperimentConfig cfg = tiny_config();
    cfg.export_trace = true;
    RunResult r = run_experiment(cfg, 13);
    REQUIRE_FALSE(r.record.aborted);

    std::filesystem::path dir = "/tmp/mcl_test_run_outputs";
    std::filesystem::remove_all(dir);
    write_run_outputs(dir, r, cfg.space);
    for (const char* name : {"run.jsonl", "evals.csv", "generalization.csv",
                             "trajectory.csv", "correlation.csv", "checkpoint.txt",
                             "trace.csv"})
        CHECK(std::filesystem::exists(dir / name));

    auto [traj, corr] = export_analysis_from_jsonl(dir / "run.jsonl", cfg.space);
    CHECK(trajectory_csv(traj) ==
          trajectory_csv(feature_trajectories(r.record.steps, cfg.space)));
}

TEST_CASE("every scheduler drives a full run end to end") {
    for (auto kind : {SchedulerKind::LlmBlend, SchedulerKind::LlmPlain,
                      SchedulerKind::LlmEpsilon, SchedulerKind::NoCurriculum,
                      SchedulerKind::DomainRandomization, SchedulerKind::Plr,
                      SchedulerKind::Accel, SchedulerKind::Space}) {
        ExperimentConfig cfg = tiny_config();
        cfg.scheduler = kind;
        cfg.mock_policy = MockPolicy::ReplayBestPerturbed;
        // schedulers without a proposer must not require a chat client
        if (!scheduler_uses_proposer(kind)) cfg.mock_llm = false;
        RunResult r = run_experiment(cfg, 21);
        INFO(to_string(kind));
        REQUIRE_FALSE(r.record.aborted);
        CHECK(r.record.steps.size() == 10);
        for (const auto& s : r.record.steps)
            CHECK(cfg.space.contains(s.decision.next_context));
    }
}

TEST_CASE("aborting mid-run flushes a partial record") {
    ExperimentConfig cfg = tiny_config();
    cfg.network.link_length = 200.0;
    // a scripted proposer that eventually runs dry aborts the run
    cfg.scheduler = SchedulerKind::LlmBlend;
    cfg.mock_policy = MockPolicy::Scripted;
    Rng gen(14);
    cfg.mock_script = {sample_uniform(cfg.space, gen), sample_uniform(cfg.space, gen)};
    // retries burn one scripted reply per attempt; 10 steps always exhaust it
    RunResult r = run_experiment(cfg, 15);
    CHECK(r.record.aborted);
    CHECK_FALSE(r.record.abort_reason.empty());
    CHECK(r.record.steps.size() < 10);
}
