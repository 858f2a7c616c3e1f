#pragma once

#include <cstdio>
#include <cstdlib>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mcl/context.hpp"
#include "mcl/curriculum.hpp"
#include "mcl/error.hpp"
#include "mcl/metrics.hpp"
#include "mcl/prompts.hpp"
#include "mcl/rng.hpp"

namespace mcl {

struct LlmConfig {
    std::string endpoint_url = "http://localhost:8000/v1";
    std::string model_id = "Qwen2.5-7B-Instruct-AWQ";
    double temperature = 0.7;
    double top_p = 0.9;
    int max_new_tokens = 400;
    double request_timeout = 60.0;  // seconds
    int max_retries = 3;
    std::string api_key_env_var = "MCL_API_KEY";

    void validate() const {
        if (!(temperature >= 0.0)) throw ConfigError("temperature must be >= 0");
        if (!(top_p > 0.0 && top_p <= 1.0)) throw ConfigError("top_p outside (0,1]");
        if (max_new_tokens < 1) throw ConfigError("max_new_tokens must be >= 1");
        if (max_retries < 1) throw ConfigError("max_retries must be >= 1");
    }
};

struct PromptBundle {
    std::string system_text;
    std::string user_text;
};

struct ProposerOutcome {
    Context context;
    std::string raw_text;
    std::string insights;
    int attempts = 0;
    bool fallback_used = false;
};

namespace detail {

inline std::string format_double(const char* fmt, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), fmt, v);
    return buf;
}

inline std::string format_bound(double v) {
    return (v == std::floor(v)) ? format_double("%.1f", v) : format_double("%g", v);
}

inline std::string replace_all(std::string text, const std::string& from,
                               const std::string& to) {
    std::size_t pos = 0;
    while ((pos = text.find(from, pos)) != std::string::npos) {
        text.replace(pos, from.size(), to);
        pos += to.size();
    }
    return text;
}

}  // namespace detail

// "- length: (1.0-10.0)" per line; integer parameters as "(1-5, integer)"
inline std::string render_bounds(const ContextSpace& space) {
    std::string out;
    for (std::size_t i = 0; i < space.size(); ++i) {
        const auto& p = space.param(i);
        out += "- " + p.name + ": (";
        if (p.kind == ParamKind::Integer)
            out += std::to_string(static_cast<long long>(p.lower)) + "-" +
                   std::to_string(static_cast<long long>(p.upper)) + ", integer";
        else
            out += detail::format_bound(p.lower) + "-" + detail::format_bound(p.upper);
        out += ")";
        if (i + 1 < space.size()) out += "\n";
    }
    return out;
}

// canonical wire form: parameter names as keys, space order, integers bare
inline std::string context_to_json_string(const Context& ctx, const ContextSpace& space) {
    std::string out = "{";
    for (std::size_t i = 0; i < space.size(); ++i) {
        const auto& p = space.param(i);
        out += "\"" + p.name + "\": ";
        if (p.kind == ParamKind::Integer)
            out += std::to_string(static_cast<long long>(ctx.values[i]));
        else
            out += detail::format_double("%.4f", ctx.values[i]);
        if (i + 1 < space.size()) out += ", ";
    }
    return out + "}";
}

// fixed key order and 4 decimal places, so prompts are byte-stable
inline std::string metrics_to_json_string(const PerfMetrics& m) {
    std::string out = "{";
    out += "\"mean_return\": " + detail::format_double("%.4f", m.mean_return);
    out += ", \"avg_travel_time\": " + detail::format_double("%.4f", m.avg_travel_time);
    out += ", \"throughput\": " + detail::format_double("%.4f", m.throughput);
    out += ", \"avg_wait_time\": " + detail::format_double("%.4f", m.avg_wait_time);
    out += ", \"avg_delay\": " + detail::format_double("%.4f", m.avg_delay);
    return out + "}";
}

inline std::string trials_to_json_string(std::span<const HistoryEntry> window,
                                         const ContextSpace& space) {
    std::string out = "[\n";
    for (std::size_t i = 0; i < window.size(); ++i) {
        out += "  {\"parameters\": " + context_to_json_string(window[i].context, space) +
               ", \"metrics\": " + metrics_to_json_string(window[i].metrics) + "}";
        if (i + 1 < window.size()) out += ",";
        out += "\n";
    }
    return out + "]";
}

inline PromptBundle build_initial_prompt(const ContextSpace& space) {
    PromptBundle b;
    b.system_text =
        detail::replace_all(prompts::kInitialSystem, "{BOUNDS}", render_bounds(space));
    b.user_text = prompts::kInitialUser;
    return b;
}

inline PromptBundle build_followup_prompt(std::span<const HistoryEntry> window,
                                          const ContextSpace& space) {
    if (window.empty()) throw ContractError("build_followup_prompt: empty window");
    PromptBundle b;
    b.system_text = prompts::kFollowupSystem;
    b.user_text = detail::replace_all(prompts::kFollowupUser, "{TRIALS}",
                                      trials_to_json_string(window, space));
    b.user_text = detail::replace_all(b.user_text, "{BOUNDS}", render_bounds(space));
    return b;
}

namespace detail {

// top-level JSON objects in text order: scan each '{' to its balanced close,
// keep the ones nlohmann accepts, resume after each accepted object
inline std::vector<std::string> top_level_json_objects(const std::string& text) {
    std::vector<std::string> found;
    std::size_t pos = 0;
    while ((pos = text.find('{', pos)) != std::string::npos) {
        int depth = 0;
        bool in_string = false, escaped = false;
        std::size_t end = std::string::npos;
        for (std::size_t i = pos; i < text.size(); ++i) {
            char ch = text[i];
            if (in_string) {
                if (escaped)
                    escaped = false;
                else if (ch == '\\')
                    escaped = true;
                else if (ch == '"')
                    in_string = false;
                continue;
            }
            if (ch == '"')
                in_string = true;
            else if (ch == '{')
                ++depth;
            else if (ch == '}') {
                --depth;
                if (depth == 0) {
                    end = i;
                    break;
                }
            }
        }
        if (end == std::string::npos) break;
        std::string candidate = text.substr(pos, end - pos + 1);
        if (nlohmann::json::accept(candidate)) {
            found.push_back(std::move(candidate));
            pos = end + 1;
        } else {
            pos += 1;
        }
    }
    return found;
}

}  // namespace detail

// text before the last marker occurrence, whitespace-trimmed
inline std::string extract_insights(const std::string& raw_text) {
    std::size_t pos = raw_text.rfind(prompts::kProposalMarker);
    if (pos == std::string::npos) return "";
    std::string head = raw_text.substr(0, pos);
    std::size_t b = head.find_first_not_of(" \t\r\n");
    std::size_t e = head.find_last_not_of(" \t\r\n");
    return b == std::string::npos ? "" : head.substr(b, e - b + 1);
}

// Last syntactically valid JSON object after the last marker occurrence
// (whole text when the marker is absent), mapped through the parameter names
// and sanitized with clamp_and_round.
inline Context parse_proposal(const std::string& raw_text, const ContextSpace& space) {
    std::size_t pos = raw_text.rfind(prompts::kProposalMarker);
    std::string tail = pos == std::string::npos
                           ? raw_text
                           : raw_text.substr(pos + std::string(prompts::kProposalMarker).size());
    auto objects = detail::top_level_json_objects(tail);
    if (objects.empty()) throw ParseError("no JSON object in model reply");

    nlohmann::json j = nlohmann::json::parse(objects.back());
    std::vector<double> raw(space.size());
    for (std::size_t i = 0; i < space.size(); ++i) {
        const auto& name = space.param(i).name;
        if (!j.contains(name)) throw MissingKeyError("missing key '" + name + "'");
        if (!j[name].is_number()) throw ParseError("key '" + name + "' is not a number");
        raw[i] = j[name].get<double>();
    }
    return clamp_and_round(raw, space);
}

// Returns the assistant reply text, the window the prompt was built from in
// hand, or nullopt on transport failure.
using ChatClient =
    std::function<std::optional<std::string>(const PromptBundle&,
                                             std::span<const HistoryEntry>)>;

// Query, parse, retry; after max_retries failures fall back to a uniform
// sample so the curriculum never stalls.
inline ProposerOutcome propose(const ChatClient& client, const LlmConfig& cfg,
                               std::span<const HistoryEntry> window,
                               const ContextSpace& space, Rng& rng) {
    ProposerOutcome out;
    PromptBundle bundle =
        window.empty() ? build_initial_prompt(space) : build_followup_prompt(window, space);
    for (int attempt = 1; attempt <= cfg.max_retries; ++attempt) {
        out.attempts = attempt;
        std::optional<std::string> reply = client(bundle, window);
        if (!reply) {
            out.raw_text = "<transport failure>";
            continue;
        }
        out.raw_text = *reply;
        try {
            out.context = parse_proposal(*reply, space);
            out.insights = extract_insights(*reply);
            return out;
        } catch (const Error&) {
            // parse or sanitation failure; retry
        }
    }
    out.context = sample_uniform(space, rng);
    out.fallback_used = true;
    return out;
}

enum class MockPolicy { ReplayBestPerturbed, Scripted, Constant };

struct MockScript {
    std::vector<Context> items;
    std::size_t next = 0;
};

namespace detail {

inline std::string render_mock_reply(const std::string& insight, const Context& ctx,
                                     const ContextSpace& space) {
    return insight + "\n" + prompts::kProposalMarker + " " +
           context_to_json_string(ctx, space);
}

}  // namespace detail

// Deterministic offline stand-ins for the model, emitting replies in the
// exact follow-up response format so they exercise the real parser.
inline std::string mock_propose(std::span<const HistoryEntry> window,
                                const ContextSpace& space, Rng& rng, MockPolicy policy,
                                MockScript* script = nullptr,
                                const Context* constant = nullptr) {
    switch (policy) {
        case MockPolicy::ReplayBestPerturbed: {
            Context base = space.midpoint();
            if (!window.empty()) {
                double best = -std::numeric_limits<double>::infinity();
                for (const auto& e : window) {
                    if (e.metrics.mean_return > best) {
                        best = e.metrics.mean_return;
                        base = e.context;
                    }
                }
            }
            std::size_t i = rng.uniform_index(space.size());
            std::vector<double> raw = base.values;
            raw[i] += 0.05 * space.param(i).range();
            Context nudged = clamp_and_round(raw, space);
            return detail::render_mock_reply(
                "Recent trials cluster around similar parameters; nudging one dimension "
                "to probe nearby difficulty.",
                nudged, space);
        }
        case MockPolicy::Scripted: {
            if (script == nullptr) throw ContractError("scripted mock without a script");
            if (script->next >= script->items.size())
                throw ContractError("scripted mock exhausted after " +
                                    std::to_string(script->items.size()) + " replies");
            const Context& ctx = script->items[script->next++];
            return detail::render_mock_reply("Following the scripted curriculum.", ctx,
                                             space);
        }
        case MockPolicy::Constant: {
            Context ctx = constant ? *constant : space.midpoint();
            return detail::render_mock_reply(
                "Holding the configuration steady to consolidate recent gains.", ctx,
                space);
        }
    }
    throw ContractError("unhandled mock policy");
}

inline ChatClient make_mock_chat_client(ContextSpace space, MockPolicy policy,
                                        std::uint64_t seed,
                                        std::vector<Context> script_items = {},
                                        std::optional<Context> constant = std::nullopt) {
    auto rng = std::make_shared<Rng>(seed);
    auto script = std::make_shared<MockScript>();
    script->items = std::move(script_items);
    auto constant_ctx =
        std::make_shared<std::optional<Context>>(std::move(constant));
    return [=, space = std::move(space)](const PromptBundle&,
                                         std::span<const HistoryEntry> window)
               -> std::optional<std::string> {
        return mock_propose(window, space, *rng, policy, script.get(),
                            constant_ctx->has_value() ? &**constant_ctx : nullptr);
    };
}

inline MockPolicy mock_policy_from_name(const std::string& name) {
    if (name == "replay_best_perturbed") return MockPolicy::ReplayBestPerturbed;
    if (name == "scripted") return MockPolicy::Scripted;
    if (name == "constant") return MockPolicy::Constant;
    throw ConfigError("unknown mock policy '" + name + "'");
}

}  // namespace mcl
