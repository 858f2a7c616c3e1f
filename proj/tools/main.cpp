#include <cstdio>
#include <filesystem>
#include <iostream>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "mcl/config.hpp"
#include "mcl/experiment.hpp"
#include "mcl/http.hpp"

namespace fs = std::filesystem;

namespace {

struct CommonOpts {
    std::string config_path;
    std::string out_dir = "out";
    long long seed_override = -1;
    std::string scheduler_override;
    std::string mock_llm_override;
    int jobs = 1;
};

mcl::ExperimentConfig load_effective_config(const CommonOpts& opts) {
    mcl::ExperimentConfig cfg = mcl::load_config(opts.config_path);
    if (!opts.scheduler_override.empty())
        cfg.scheduler = mcl::scheduler_from_name(opts.scheduler_override);
    if (opts.seed_override >= 0)
        cfg.seeds = {static_cast<std::uint64_t>(opts.seed_override)};
    if (!opts.mock_llm_override.empty()) {
        cfg.mock_llm = true;
        cfg.mock_policy = mcl::mock_policy_from_name(opts.mock_llm_override);
    }
    if (!cfg.mock_llm) cfg.chat_client = mcl::make_http_chat_client(cfg.llm);
    cfg.validate();
    return cfg;
}

int cmd_run(const CommonOpts& opts) {
    mcl::ExperimentConfig cfg = load_effective_config(opts);
    fs::create_directories(opts.out_dir);

    std::vector<mcl::RunRecord> records(cfg.seeds.size());
    std::vector<std::string> failures(cfg.seeds.size());
    std::mutex io_mutex;

    auto run_one = [&](std::size_t idx) {
        std::uint64_t seed = cfg.seeds[idx];
        try {
            mcl::RunResult result = mcl::run_experiment(cfg, seed);
            fs::path dir = fs::path(opts.out_dir) / ("seed" + std::to_string(seed));
            mcl::write_run_outputs(dir, result, cfg.space);
            records[idx] = std::move(result.record);
            std::lock_guard<std::mutex> lock(io_mutex);
            std::cout << dir.string() << "\n";
            if (records[idx].aborted) {
                failures[idx] = records[idx].abort_reason;
                std::cerr << "seed " << seed << " aborted: " << records[idx].abort_reason
                          << "\n";
            }
        } catch (const std::exception& e) {
            std::lock_guard<std::mutex> lock(io_mutex);
            failures[idx] = e.what();
            std::cerr << "seed " << seed << " failed: " << e.what() << "\n";
        }
    };

    int jobs = std::max(1, opts.jobs);
    for (std::size_t start = 0; start < cfg.seeds.size();
         start += static_cast<std::size_t>(jobs)) {
        std::vector<std::thread> pool;
        for (std::size_t i = start;
             i < std::min(cfg.seeds.size(), start + static_cast<std::size_t>(jobs)); ++i)
            pool.emplace_back(run_one, i);
        for (auto& t : pool) t.join();
    }

    for (const auto& f : failures)
        if (!f.empty()) return 1;

    mcl::SummaryTable summary = mcl::aggregate_seeds(records);
    fs::path summary_path = fs::path(opts.out_dir) / "summary.csv";
    mcl::write_file(summary_path, mcl::summary_csv(summary));
    std::cout << summary_path.string() << "\n";
    return 0;
}

int cmd_validate(const CommonOpts& opts) {
    mcl::ExperimentConfig cfg = load_effective_config(opts);
    std::cout << mcl::config_echo(cfg);
    return 0;
}

int cmd_export(const CommonOpts& opts) {
    mcl::ExperimentConfig cfg;
    if (!opts.config_path.empty()) cfg = mcl::load_config(opts.config_path);
    fs::path dir(opts.out_dir);
    auto [traj, corr] = mcl::export_analysis_from_jsonl(dir / "run.jsonl", cfg.space);
    mcl::write_file(dir / "trajectory.csv", mcl::trajectory_csv(traj));
    mcl::write_file(dir / "correlation.csv", mcl::correlation_csv(corr));
    std::cout << (dir / "trajectory.csv").string() << "\n"
              << (dir / "correlation.csv").string() << "\n";
    return 0;
}

int cmd_evaluate(const CommonOpts& opts) {
    mcl::ExperimentConfig cfg = load_effective_config(opts);
    fs::path ckpt = fs::path(opts.out_dir) / "checkpoint.txt";
    mcl::ActorCritic ac = mcl::load_checkpoint(ckpt.string());

    std::uint64_t seed = cfg.seeds.front();
    mcl::Rng rng(seed);
    std::vector<mcl::Context> contexts;
    for (int i = 0; i < cfg.n_generalization_contexts; ++i)
        contexts.push_back(mcl::sample_uniform(cfg.space, rng));
    auto rows = mcl::evaluate_policy(ac, cfg.network, cfg.space, contexts, 1, seed);

    std::cout << "context,mean_return,avg_travel_time,throughput,avg_wait_time,avg_delay\n";
    char buf[64];
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& m = rows[i];
        std::snprintf(buf, sizeof(buf), "%zu,%.6f,%.6f,%.6f,%.6f,%.6f", i, m.mean_return,
                      m.avg_travel_time, m.throughput, m.avg_wait_time, m.avg_delay);
        std::cout << buf << "\n";
    }
    return 0;
}

int cmd_mock_demo() {
    mcl::ExperimentConfig cfg;
    cfg.scheduler = mcl::SchedulerKind::LlmBlend;
    cfg.mock_llm = true;
    cfg.mock_policy = mcl::MockPolicy::Constant;
    cfg.total_curriculum_steps = 10;
    cfg.n_test_contexts = 0;
    cfg.n_generalization_contexts = 0;
    cfg.network.rows = 1;
    cfg.network.cols = 1;
    cfg.network.episode_len = 60;
    cfg.seeds = {1};

    mcl::RunResult result = mcl::run_experiment(cfg, cfg.seeds[0]);
    if (result.record.aborted) {
        std::cerr << "mock-demo aborted: " << result.record.abort_reason << "\n";
        return 1;
    }
    for (const auto& s : result.record.steps) {
        char line[128];
        std::snprintf(line, sizeof(line), "step %lld: source=%s sigma=%.3f blended=%s",
                      s.step, mcl::to_string(s.decision.source), s.decision.sigma,
                      s.decision.blended ? "true" : "false");
        std::cout << line << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"contextual curriculum learning for grid traffic-signal control"};
    app.require_subcommand(1);

    CommonOpts opts;

    auto add_common = [&opts](CLI::App* sub, bool config_required) {
        auto* c = sub->add_option("--config", opts.config_path, "configuration file");
        if (config_required) c->required();
        sub->add_option("--out", opts.out_dir, "output directory");
        sub->add_option("--seed", opts.seed_override, "override: run only this seed");
        sub->add_option("--scheduler", opts.scheduler_override,
                        "override the configured scheduler");
        sub->add_option("--jobs", opts.jobs, "parallel seed jobs");
        sub->add_option("--mock-llm", opts.mock_llm_override,
                        "force a mock proposer: constant|scripted|replay_best_perturbed");
    };

    CLI::App* run = app.add_subcommand("run", "run the experiment for every seed");
    add_common(run, true);
    CLI::App* evaluate =
        app.add_subcommand("evaluate", "evaluate a saved checkpoint on fresh contexts");
    add_common(evaluate, true);
    CLI::App* exp = app.add_subcommand("export", "rebuild analysis CSVs from run.jsonl");
    add_common(exp, false);
    CLI::App* validate = app.add_subcommand("validate", "check a config and echo it");
    add_common(validate, true);
    CLI::App* demo =
        app.add_subcommand("mock-demo", "10-step blend-trace smoke test, no network");
    (void)demo;

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) return cmd_run(opts);
        if (evaluate->parsed()) return cmd_evaluate(opts);
        if (exp->parsed()) return cmd_export(opts);
        if (validate->parsed()) return cmd_validate(opts);
        if (demo->parsed()) return cmd_mock_demo();
    } catch (const mcl::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
