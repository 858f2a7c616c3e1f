#include <catch2/catch_amalgamated.hpp>

#include <atomic>
#include <cstdlib>
#include <thread>

#include <httplib.h>

#include "mcl/http.hpp"
#include "mcl/llm.hpp"

using namespace mcl;

namespace {

const ContextSpace& space() {
    static ContextSpace s = ContextSpace::vehicle_parameters();
    return s;
}

std::size_t count_occurrences(const std::string& text, const std::string& needle) {
    std::size_t n = 0, pos = 0;
    while ((pos = text.find(needle, pos)) != std::string::npos) {
        ++n;
        pos += needle.size();
    }
    return n;
}

HistoryEntry entry(const Context& c, double ret) {
    PerfMetrics m;
    m.mean_return = ret;
    return {c, m, 0};
}

std::string nine_key_json(double max_speed) {
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "{\"length\": 5.0, \"width\": 2.0, \"maxPosAcc\": 3.0, "
                  "\"maxNegAcc\": 3.0, \"usualPosAcc\": 2.0, \"usualNegAcc\": 2.0, "
                  "\"minGap\": 4.0, \"maxSpeed\": %.1f, \"headwayTime\": 2}",
                  max_speed);
    return buf;
}

}  // namespace

TEST_CASE("initial prompt renders the bounds from the space") {
    PromptBundle b = build_initial_prompt(space());
    CHECK(b.system_text.find("maxSpeed: (3.0-15.0)") != std::string::npos);
    CHECK(b.system_text.find("headwayTime: (1-5, integer)") != std::string::npos);
    CHECK(b.system_text.find("single JSON object") != std::string::npos);
    for (const auto& p : space().params())
        CHECK(count_occurrences(b.system_text, "- " + p.name + ":") == 1);

    auto params = space().params();
    params[space().index_of("maxSpeed")].upper = 20.0;
    PromptBundle altered = build_initial_prompt(ContextSpace(params));
    CHECK(altered.system_text.find("maxSpeed: (3.0-20.0)") != std::string::npos);
}

TEST_CASE("followup prompt carries the trials, the questions and the marker") {
    std::vector<HistoryEntry> window = {entry(space().midpoint(), 12.3456)};
    PromptBundle b = build_followup_prompt(window, space());
    CHECK(count_occurrences(b.user_text, "\"parameters\"") == 1);
    CHECK(b.user_text.find("NEXT TASK SUGGESTION:") != std::string::npos);
    for (const char* key : {"mean_return", "avg_travel_time", "throughput",
                            "avg_wait_time", "avg_delay"})
        CHECK(b.user_text.find(key) != std::string::npos);
    CHECK(b.user_text.find("What parameter combinations were successful?") !=
          std::string::npos);
    for (const auto& p : space().params())
        CHECK(count_occurrences(b.user_text, "- " + p.name + ":") == 1);

    window.push_back(entry(space().midpoint(), 1.0));
    window.push_back(entry(space().midpoint(), 2.0));
    PromptBundle b3 = build_followup_prompt(window, space());
    CHECK(count_occurrences(b3.user_text, "\"parameters\"") == 3);

    CHECK_THROWS_AS(build_followup_prompt({}, space()), ContractError);
}

TEST_CASE("followup prompts are byte-stable") {
    std::vector<HistoryEntry> window = {entry(space().midpoint(), 3.14159)};
    PromptBundle a = build_followup_prompt(window, space());
    PromptBundle b = build_followup_prompt(window, space());
    CHECK(a.system_text == b.system_text);
    CHECK(a.user_text == b.user_text);
    CHECK(a.user_text.find("3.1416") != std::string::npos);  // 4 decimal places
}

TEST_CASE("parse extracts the object after the marker") {
    std::string text = "The agent struggled with dense traffic.\n"
                       "NEXT TASK SUGGESTION: " +
                       nine_key_json(9.0);
    Context c = parse_proposal(text, space());
    CHECK(c.values[space().index_of("maxSpeed")] == 9.0);
    CHECK(c.values[space().index_of("headwayTime")] == 2.0);
    CHECK(extract_insights(text) == "The agent struggled with dense traffic.");
}

TEST_CASE("the last valid object wins") {
    std::string text = "NEXT TASK SUGGESTION: " + nine_key_json(5.0) +
                       "\nOn second thought: " + nine_key_json(7.0);
    Context c = parse_proposal(text, space());
    CHECK(c.values[space().index_of("maxSpeed")] == 7.0);
}

TEST_CASE("out-of-range values are clamped to the table bounds") {
    std::string text = "NEXT TASK SUGGESTION: " + nine_key_json(22.0);
    Context c = parse_proposal(text, space());
    CHECK(c.values[space().index_of("maxSpeed")] == 15.0);
}

TEST_CASE("marker absent falls back to the last object in the text") {
    std::string text = "Here are parameters: " + nine_key_json(6.0);
    Context c = parse_proposal(text, space());
    CHECK(c.values[space().index_of("maxSpeed")] == 6.0);
}

TEST_CASE("parse failures raise typed errors") {
    CHECK_THROWS_AS(parse_proposal("no json here at all", space()), ParseError);
    CHECK_THROWS_AS(parse_proposal("NEXT TASK SUGGESTION: {broken", space()), ParseError);
    CHECK_THROWS_AS(
        parse_proposal("NEXT TASK SUGGESTION: {\"length\": 5.0}", space()),
        MissingKeyError);
    CHECK_THROWS_AS(
        parse_proposal("NEXT TASK SUGGESTION: {\"length\": \"five\"}", space()),
        ParseError);
}

TEST_CASE("parse output always satisfies the context invariants") {
    Rng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        std::string obj = "{";
        for (std::size_t i = 0; i < space().size(); ++i) {
            char buf[64];
            std::snprintf(buf, sizeof(buf), "\"%s\": %.6f",
                          space().param(i).name.c_str(), rng.uniform(-50.0, 50.0));
            obj += buf;
            if (i + 1 < space().size()) obj += ", ";
        }
        obj += "}";
        Context c = parse_proposal("NEXT TASK SUGGESTION: " + obj, space());
        CHECK(space().contains(c));
    }
}

TEST_CASE("propose returns on the first good reply") {
    LlmConfig cfg;
    cfg.max_retries = 3;
    Rng rng(6);
    ChatClient good = [](const PromptBundle&, std::span<const HistoryEntry>) {
        return std::optional<std::string>("NEXT TASK SUGGESTION: " + nine_key_json(9.0));
    };
    ProposerOutcome out = propose(good, cfg, {}, space(), rng);
    CHECK(out.attempts == 1);
    CHECK_FALSE(out.fallback_used);
    CHECK(out.context.values[space().index_of("maxSpeed")] == 9.0);
}

TEST_CASE("propose falls back to a uniform sample after max_retries") {
    LlmConfig cfg;
    cfg.max_retries = 3;
    Rng rng(7);
    int calls = 0;
    ChatClient garbage = [&calls](const PromptBundle&, std::span<const HistoryEntry>) {
        ++calls;
        return std::optional<std::string>("complete nonsense");
    };
    ProposerOutcome out = propose(garbage, cfg, {}, space(), rng);
    CHECK(calls == 3);
    CHECK(out.attempts == 3);
    CHECK(out.fallback_used);
    CHECK(space().contains(out.context));
}

TEST_CASE("propose counts attempts until the reply parses") {
    LlmConfig cfg;
    cfg.max_retries = 5;
    Rng rng(8);
    int calls = 0;
    ChatClient flaky = [&calls](const PromptBundle&, std::span<const HistoryEntry>)
        -> std::optional<std::string> {
        ++calls;
        if (calls == 1) return std::nullopt;  // transport failure
        return "NEXT TASK SUGGESTION: " + nine_key_json(4.0);
    };
    ProposerOutcome out = propose(flaky, cfg, {}, space(), rng);
    CHECK(out.attempts == 2);
    CHECK_FALSE(out.fallback_used);
}

TEST_CASE("mock replies parse back for every policy") {
    Rng rng(9);
    std::vector<HistoryEntry> window = {entry(space().midpoint(), 1.0),
                                        entry(space().midpoint(), 5.0)};

    std::string best = mock_propose(window, space(), rng, MockPolicy::ReplayBestPerturbed);
    Context parsed = parse_proposal(best, space());
    CHECK(space().contains(parsed));

    MockScript script;
    script.items = {space().midpoint()};
    std::string scripted =
        mock_propose(window, space(), rng, MockPolicy::Scripted, &script);
    CHECK(parse_proposal(scripted, space()) == space().midpoint());
    CHECK_THROWS_AS(mock_propose(window, space(), rng, MockPolicy::Scripted, &script),
                    ContractError);

    std::string constant = mock_propose(window, space(), rng, MockPolicy::Constant);
    CHECK(parse_proposal(constant, space()) == space().midpoint());
}

TEST_CASE("replay_best_perturbed nudges one component of the best trial") {
    Rng rng(10);
    Context best_ctx = space().midpoint();
    std::vector<HistoryEntry> window = {entry(sample_uniform(space(), rng), -10.0),
                                        entry(best_ctx, 42.0)};
    for (int trial = 0; trial < 30; ++trial) {
        std::string text =
            mock_propose(window, space(), rng, MockPolicy::ReplayBestPerturbed);
        Context c = parse_proposal(text, space());
        int diffs = 0;
        for (std::size_t i = 0; i < space().size(); ++i) {
            if (c.values[i] == best_ctx.values[i]) continue;
            ++diffs;
            double delta = c.values[i] - best_ctx.values[i];
            CHECK(delta > 0.0);
            CHECK(delta <= 0.05 * space().param(i).range() + 1e-12);
        }
        CHECK(diffs <= 1);
    }
}

TEST_CASE("scripted exhaustion error mentions the reply count") {
    MockScript script;
    script.items = {space().midpoint(), space().midpoint(), space().midpoint()};
    Rng rng(11);
    for (int i = 0; i < 3; ++i)
        mock_propose({}, space(), rng, MockPolicy::Scripted, &script);
    CHECK_THROWS_WITH(mock_propose({}, space(), rng, MockPolicy::Scripted, &script),
                      Catch::Matchers::ContainsSubstring("3"));
}

TEST_CASE("http client speaks the chat-completions wire protocol") {
    setenv("MCL_TEST_KEY", "sk-test-123", 1);

    httplib::Server srv;
    nlohmann::json seen_body;
    std::string seen_auth;
    srv.Post("/v1/chat/completions",
             [&](const httplib::Request& req, httplib::Response& res) {
                 seen_body = nlohmann::json::parse(req.body);
                 if (req.has_header("Authorization"))
                     seen_auth = req.get_header_value("Authorization");
                 nlohmann::json reply = {
                     {"choices",
                      {{{"message",
                         {{"role", "assistant"},
                          {"content",
                           "Looks stable.\nNEXT TASK SUGGESTION: " + nine_key_json(8.0)}}}}}}};
                 res.set_content(reply.dump(), "application/json");
             });
    int port = srv.bind_to_any_port("127.0.0.1");
    REQUIRE(port > 0);
    std::thread server_thread([&srv] { srv.listen_after_bind(); });
    srv.wait_until_ready();

    LlmConfig cfg;
    cfg.endpoint_url = "http://127.0.0.1:" + std::to_string(port) + "/v1";
    cfg.model_id = "test-model";
    cfg.temperature = 0.7;
    cfg.top_p = 0.9;
    cfg.max_new_tokens = 400;
    cfg.api_key_env_var = "MCL_TEST_KEY";
    cfg.max_retries = 1;

    ChatClient client = make_http_chat_client(cfg);
    Rng rng(12);
    std::vector<HistoryEntry> window = {entry(space().midpoint(), 1.0)};
    ProposerOutcome out = propose(client, cfg, window, space(), rng);

    srv.stop();
    server_thread.join();

    CHECK_FALSE(out.fallback_used);
    CHECK(out.context.values[space().index_of("maxSpeed")] == 8.0);
    CHECK(out.insights == "Looks stable.");

    CHECK(seen_body.at("model") == "test-model");
    CHECK(seen_body.at("temperature").get<double>() == 0.7);
    CHECK(seen_body.at("top_p").get<double>() == 0.9);
    CHECK(seen_body.at("max_tokens").get<int>() == 400);
    REQUIRE(seen_body.at("messages").size() == 2);
    CHECK(seen_body.at("messages")[0].at("role") == "system");
    CHECK(seen_body.at("messages")[1].at("role") == "user");
    CHECK(seen_body.at("messages")[1].at("content").get<std::string>().find(
              "NEXT TASK SUGGESTION:") != std::string::npos);
    CHECK(seen_auth == "Bearer sk-test-123");
}

TEST_CASE("http transport failure triggers the uniform fallback") {
    LlmConfig cfg;
    cfg.endpoint_url = "http://127.0.0.1:1/v1";  // nothing listens here
    cfg.request_timeout = 1.0;
    cfg.max_retries = 2;
    ChatClient client = make_http_chat_client(cfg);
    Rng rng(13);
    ProposerOutcome out = propose(client, cfg, {}, space(), rng);
    CHECK(out.attempts == 2);
    CHECK(out.fallback_used);
    CHECK(space().contains(out.context));
}
