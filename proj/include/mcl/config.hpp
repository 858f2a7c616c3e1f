#pragma once

#include <cctype>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mcl/error.hpp"
#include "mcl/experiment.hpp"

namespace mcl {

// Minimal INI reader: [section] headers, key = value lines, '#' or ';'
// comments. Keeps line numbers so validation errors can point at the source.
class IniFile {
public:
    struct Entry {
        std::string value;
        int line = 0;
        mutable bool consumed = false;
    };

    static IniFile parse_file(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw ConfigError("cannot open config file '" + path + "'");
        std::stringstream ss;
        ss << f.rdbuf();
        return parse_text(ss.str(), path);
    }

    static IniFile parse_text(const std::string& text, const std::string& origin = "<text>") {
        IniFile ini;
        ini.origin_ = origin;
        std::istringstream in(text);
        std::string line, section;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            std::string s = trim(line);
            if (s.empty() || s[0] == '#' || s[0] == ';') continue;
            if (s.front() == '[') {
                if (s.back() != ']')
                    throw ConfigError(origin + ":" + std::to_string(lineno) +
                                      ": unterminated section header");
                section = trim(s.substr(1, s.size() - 2));
                ini.sections_[section];
                continue;
            }
            std::size_t eq = s.find('=');
            if (eq == std::string::npos)
                throw ConfigError(origin + ":" + std::to_string(lineno) +
                                  ": expected key = value");
            std::string key = trim(s.substr(0, eq));
            std::string value = trim(s.substr(eq + 1));
            if (key.empty())
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
            ini.sections_[section][key] = {value, lineno, false};
        }
        return ini;
    }

    bool has(const std::string& section, const std::string& key) const {
        auto s = sections_.find(section);
        return s != sections_.end() && s->second.count(key) > 0;
    }

    const Entry* find(const std::string& section, const std::string& key) const {
        auto s = sections_.find(section);
        if (s == sections_.end()) return nullptr;
        auto k = s->second.find(key);
        if (k == s->second.end()) return nullptr;
        k->second.consumed = true;
        return &k->second;
    }

    std::string get_string(const std::string& sec, const std::string& key,
                           const std::string& fallback) const {
        const Entry* e = find(sec, key);
        return e ? e->value : fallback;
    }

    double get_double(const std::string& sec, const std::string& key, double fallback) const {
        const Entry* e = find(sec, key);
        if (!e) return fallback;
        try {
            std::size_t pos;
            double v = std::stod(e->value, &pos);
            if (pos != e->value.size()) throw std::invalid_argument("");
            return v;
        } catch (...) {
            throw ConfigError(where(e) + ": '" + e->value + "' is not a number");
        }
    }

    long long get_int(const std::string& sec, const std::string& key, long long fallback) const {
        const Entry* e = find(sec, key);
        if (!e) return fallback;
        try {
            std::size_t pos;
            long long v = std::stoll(e->value, &pos);
            if (pos != e->value.size()) throw std::invalid_argument("");
            return v;
        } catch (...) {
            throw ConfigError(where(e) + ": '" + e->value + "' is not an integer");
        }
    }

    bool get_bool(const std::string& sec, const std::string& key, bool fallback) const {
        const Entry* e = find(sec, key);
        if (!e) return fallback;
        if (e->value == "true" || e->value == "1") return true;
        if (e->value == "false" || e->value == "0") return false;
        throw ConfigError(where(e) + ": expected true/false, got '" + e->value + "'");
    }

    std::vector<double> get_doubles(const std::string& sec, const std::string& key) const {
        const Entry* e = find(sec, key);
        std::vector<double> out;
        if (!e) return out;
        std::istringstream in(e->value);
        std::string tok;
        while (in >> tok) {
            try {
                out.push_back(std::stod(tok));
            } catch (...) {
                throw ConfigError(where(e) + ": '" + tok + "' is not a number");
            }
        }
        return out;
    }

    // unknown keys are almost always typos; surface the first one
    void check_consumed() const {
        for (const auto& [sec, entries] : sections_)
            for (const auto& [key, e] : entries)
                if (!e.consumed)
                    throw ConfigError(where(&e) + ": unknown key '" + key + "' in section [" +
                                      sec + "]");
    }

    const std::map<std::string, std::map<std::string, Entry>>& sections() const {
        return sections_;
    }

private:
    static std::string trim(const std::string& s) {
        std::size_t b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return "";
        std::size_t e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    }

    std::string where(const Entry* e) const {
        return origin_ + ":" + std::to_string(e->line);
    }

    std::string origin_;
    std::map<std::string, std::map<std::string, Entry>> sections_;
};

inline ExperimentConfig config_from_ini(const IniFile& ini) {
    ExperimentConfig cfg;

    // optional per-parameter bound overrides; the nine names are fixed
    {
        std::vector<ParameterSpec> params = cfg.space.params();
        auto it = ini.sections().find("context_space");
        if (it != ini.sections().end()) {
            for (auto& p : params) {
                if (!ini.has("context_space", p.name)) continue;
                std::vector<double> vals = ini.get_doubles("context_space", p.name);
                if (vals.size() != 2)
                    throw ConfigError("context_space." + p.name +
                                      ": expected 'lower upper'");
                p.lower = vals[0];
                p.upper = vals[1];
            }
        }
        cfg.space = ContextSpace(params);
    }

    cfg.scheduler = scheduler_from_name(
        ini.get_string("experiment", "scheduler", to_string(cfg.scheduler)));
    cfg.total_curriculum_steps = static_cast<int>(ini.get_int(
        "experiment", "total_curriculum_steps", cfg.total_curriculum_steps));
    cfg.eval_interval =
        static_cast<int>(ini.get_int("experiment", "eval_interval", cfg.eval_interval));
    cfg.n_test_contexts =
        static_cast<int>(ini.get_int("experiment", "n_test_contexts", cfg.n_test_contexts));
    cfg.n_generalization_contexts = static_cast<int>(ini.get_int(
        "experiment", "n_generalization_contexts", cfg.n_generalization_contexts));
    cfg.finetune_episodes = static_cast<int>(
        ini.get_int("experiment", "finetune_episodes", cfg.finetune_episodes));
    cfg.export_trace = ini.get_bool("experiment", "export_trace", cfg.export_trace);
    {
        std::vector<double> seeds = ini.get_doubles("experiment", "seeds");
        if (!seeds.empty()) {
            cfg.seeds.clear();
            for (double s : seeds) cfg.seeds.push_back(static_cast<std::uint64_t>(s));
        }
    }

    CurriculumConfig& cur = cfg.curriculum;
    cur.alpha = ini.get_double("curriculum", "alpha", cur.alpha);
    cur.window_w = static_cast<int>(ini.get_int("curriculum", "window", cur.window_w));
    cur.delta = ini.get_double("curriculum", "delta", cur.delta);
    cur.max_similar_k =
        static_cast<int>(ini.get_int("curriculum", "max_similar", cur.max_similar_k));
    cur.epsilon = ini.get_double("curriculum", "epsilon", cur.epsilon);
    cur.episodes_per_context = static_cast<int>(
        ini.get_int("curriculum", "episodes_per_context", cur.episodes_per_context));
    cur.plr_replay_prob =
        ini.get_double("curriculum", "plr_replay_prob", cur.plr_replay_prob);
    cur.plr_temperature =
        ini.get_double("curriculum", "plr_temperature", cur.plr_temperature);
    cur.plr_staleness_coef =
        ini.get_double("curriculum", "plr_staleness_coef", cur.plr_staleness_coef);
    cur.accel_population =
        static_cast<int>(ini.get_int("curriculum", "accel_population", cur.accel_population));
    cur.accel_step_fraction =
        ini.get_double("curriculum", "accel_step_fraction", cur.accel_step_fraction);
    cur.space_converge_tol =
        ini.get_double("curriculum", "space_converge_tol", cur.space_converge_tol);
    cur.space_patience =
        static_cast<int>(ini.get_int("curriculum", "space_patience", cur.space_patience));
    {
        std::vector<double> init = ini.get_doubles("curriculum", "initial_context");
        if (!init.empty()) cur.initial_context = clamp_and_round(init, cfg.space);
    }

    NetworkSpec& net = cfg.network;
    net.rows = static_cast<int>(ini.get_int("network", "rows", net.rows));
    net.cols = static_cast<int>(ini.get_int("network", "cols", net.cols));
    net.lanes_per_approach = static_cast<int>(
        ini.get_int("network", "lanes_per_approach", net.lanes_per_approach));
    net.link_length = ini.get_double("network", "link_length", net.link_length);
    net.sim_dt = ini.get_double("network", "sim_dt", net.sim_dt);
    net.spawn_rate = ini.get_double("network", "spawn_rate", net.spawn_rate);
    net.episode_len = static_cast<int>(ini.get_int("network", "episode_len", net.episode_len));
    net.turn_prob = ini.get_double("network", "turn_prob", net.turn_prob);
    net.lambda_f = ini.get_double("network", "lambda_f", net.lambda_f);
    net.lambda_w = ini.get_double("network", "lambda_w", net.lambda_w);

    TrainConfig& tr = cfg.train;
    tr.clip_eps = ini.get_double("train", "clip_eps", tr.clip_eps);
    tr.lr = ini.get_double("train", "lr", tr.lr);
    tr.mini_epochs = static_cast<int>(ini.get_int("train", "mini_epochs", tr.mini_epochs));
    tr.entropy_coef = ini.get_double("train", "entropy_coef", tr.entropy_coef);
    tr.gamma = ini.get_double("train", "gamma", tr.gamma);
    tr.gae_lambda = ini.get_double("train", "gae_lambda", tr.gae_lambda);
    tr.buffer_size = static_cast<int>(ini.get_int("train", "buffer_size", tr.buffer_size));
    tr.batch_size = static_cast<int>(ini.get_int("train", "batch_size", tr.batch_size));
    tr.grad_clip_norm = ini.get_double("train", "grad_clip_norm", tr.grad_clip_norm);
    tr.hidden_dim = static_cast<int>(ini.get_int("train", "hidden_dim", tr.hidden_dim));
    tr.reward_scale = ini.get_double("train", "reward_scale", tr.reward_scale);

    LlmConfig& llm = cfg.llm;
    cfg.mock_llm = ini.get_bool("llm", "mock", cfg.mock_llm);
    cfg.mock_policy = mock_policy_from_name(
        ini.get_string("llm", "mock_policy", "constant"));
    llm.endpoint_url = ini.get_string("llm", "endpoint_url", llm.endpoint_url);
    llm.model_id = ini.get_string("llm", "model_id", llm.model_id);
    llm.temperature = ini.get_double("llm", "temperature", llm.temperature);
    llm.top_p = ini.get_double("llm", "top_p", llm.top_p);
    llm.max_new_tokens =
        static_cast<int>(ini.get_int("llm", "max_new_tokens", llm.max_new_tokens));
    llm.request_timeout = ini.get_double("llm", "request_timeout", llm.request_timeout);
    llm.max_retries = static_cast<int>(ini.get_int("llm", "max_retries", llm.max_retries));
    llm.api_key_env_var = ini.get_string("llm", "api_key_env", llm.api_key_env_var);

    ini.check_consumed();
    cfg.validate();
    return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
    return config_from_ini(IniFile::parse_file(path));
}

// canonical rendering of the effective configuration
inline std::string config_echo(const ExperimentConfig& cfg) {
    std::ostringstream out;
    out << "[experiment]\n";
    out << "scheduler = " << to_string(cfg.scheduler) << "\n";
    out << "total_curriculum_steps = " << cfg.total_curriculum_steps << "\n";
    out << "eval_interval = " << cfg.eval_interval << "\n";
    out << "n_test_contexts = " << cfg.n_test_contexts << "\n";
    out << "n_generalization_contexts = " << cfg.n_generalization_contexts << "\n";
    out << "finetune_episodes = " << cfg.finetune_episodes << "\n";
    out << "seeds =";
    for (auto s : cfg.seeds) out << " " << s;
    out << "\n";
    out << "export_trace = " << (cfg.export_trace ? "true" : "false") << "\n";

    out << "\n[curriculum]\n";
    const auto& cur = cfg.curriculum;
    out << "alpha = " << cur.alpha << "\n";
    out << "window = " << cur.window_w << "\n";
    out << "delta = " << cur.delta << "\n";
    out << "max_similar = " << cur.max_similar_k << "\n";
    out << "epsilon = " << cur.epsilon << "\n";
    out << "episodes_per_context = " << cur.episodes_per_context << "\n";
    out << "initial_context =";
    if (cur.initial_context.values.empty()) {
        out << " (space midpoint)";
    } else {
        for (double v : cur.initial_context.values) out << " " << v;
    }
    out << "\n";
    out << "plr_replay_prob = " << cur.plr_replay_prob << "\n";
    out << "plr_temperature = " << cur.plr_temperature << "\n";
    out << "plr_staleness_coef = " << cur.plr_staleness_coef << "\n";
    out << "accel_population = " << cur.accel_population << "\n";
    out << "accel_step_fraction = " << cur.accel_step_fraction << "\n";
    out << "space_converge_tol = " << cur.space_converge_tol << "\n";
    out << "space_patience = " << cur.space_patience << "\n";

    out << "\n[network]\n";
    const auto& net = cfg.network;
    out << "rows = " << net.rows << "\n";
    out << "cols = " << net.cols << "\n";
    out << "lanes_per_approach = " << net.lanes_per_approach << "\n";
    out << "link_length = " << net.link_length << "\n";
    out << "sim_dt = " << net.sim_dt << "\n";
    out << "spawn_rate = " << net.spawn_rate << "\n";
    out << "episode_len = " << net.episode_len << "\n";
    out << "turn_prob = " << net.turn_prob << "\n";
    out << "lambda_f = " << net.lambda_f << "\n";
    out << "lambda_w = " << net.lambda_w << "\n";

    out << "\n[train]\n";
    const auto& tr = cfg.train;
    out << "clip_eps = " << tr.clip_eps << "\n";
    out << "lr = " << tr.lr << "\n";
    out << "mini_epochs = " << tr.mini_epochs << "\n";
    out << "entropy_coef = " << tr.entropy_coef << "\n";
    out << "gamma = " << tr.gamma << "\n";
    out << "gae_lambda = " << tr.gae_lambda << "\n";
    out << "buffer_size = " << tr.buffer_size << "\n";
    out << "batch_size = " << tr.batch_size << "\n";
    out << "grad_clip_norm = " << tr.grad_clip_norm << "\n";
    out << "hidden_dim = " << tr.hidden_dim << "\n";
    out << "reward_scale = " << tr.reward_scale << "\n";

    out << "\n[llm]\n";
    const auto& llm = cfg.llm;
    out << "mock = " << (cfg.mock_llm ? "true" : "false") << "\n";
    out << "mock_policy = "
        << (cfg.mock_policy == MockPolicy::Constant
                ? "constant"
                : cfg.mock_policy == MockPolicy::Scripted ? "scripted"
                                                          : "replay_best_perturbed")
        << "\n";
    out << "endpoint_url = " << llm.endpoint_url << "\n";
    out << "model_id = " << llm.model_id << "\n";
    out << "temperature = " << llm.temperature << "\n";
    out << "top_p = " << llm.top_p << "\n";
    out << "max_new_tokens = " << llm.max_new_tokens << "\n";
    out << "request_timeout = " << llm.request_timeout << "\n";
    out << "max_retries = " << llm.max_retries << "\n";
    out << "api_key_env = " << llm.api_key_env_var << "\n";

    out << "\n[context_space]\n";
    for (const auto& p : cfg.space.params()) {
        out << p.name << " = " << p.lower << " " << p.upper;
        if (p.kind == ParamKind::Integer) out << "  # integer";
        out << "\n";
    }
    return out.str();
}

}  // namespace mcl
