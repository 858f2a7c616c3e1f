#pragma once

// HTTP transport for the chat-completions endpoint, kept out of llm.hpp so
// parser/prompt users do not pull in httplib.

#include <cstdlib>
#include <memory>
#include <optional>
#include <string>

#include <httplib.h>
#include <json.hpp>

#include "mcl/llm.hpp"

namespace mcl {

namespace detail {

// split "http://host:port/v1" into base ("http://host:port") and path prefix ("/v1")
inline std::pair<std::string, std::string> split_endpoint(const std::string& url) {
    std::size_t scheme = url.find("://");
    std::size_t path_start =
        url.find('/', scheme == std::string::npos ? 0 : scheme + 3);
    if (path_start == std::string::npos) return {url, ""};
    std::string prefix = url.substr(path_start);
    while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
    return {url.substr(0, path_start), prefix};
}

}  // namespace detail

inline nlohmann::json chat_request_body(const LlmConfig& cfg, const PromptBundle& bundle) {
    return nlohmann::json{
        {"model", cfg.model_id},
        {"messages",
         nlohmann::json::array({
             nlohmann::json{{"role", "system"}, {"content", bundle.system_text}},
             nlohmann::json{{"role", "user"}, {"content", bundle.user_text}},
         })},
        {"temperature", cfg.temperature},
        {"top_p", cfg.top_p},
        {"max_tokens", cfg.max_new_tokens},
    };
}

// POST {endpoint}/chat/completions, bearer token from the configured env var
inline ChatClient make_http_chat_client(const LlmConfig& cfg) {
    auto [base, prefix] = detail::split_endpoint(cfg.endpoint_url);
    auto client = std::make_shared<httplib::Client>(base);
    client->set_connection_timeout(static_cast<int>(cfg.request_timeout), 0);
    client->set_read_timeout(static_cast<int>(cfg.request_timeout), 0);
    client->set_write_timeout(static_cast<int>(cfg.request_timeout), 0);
    if (const char* key = std::getenv(cfg.api_key_env_var.c_str()))
        client->set_default_headers({{"Authorization", std::string("Bearer ") + key}});

    std::string path = prefix + "/chat/completions";
    return [client, cfg, path](const PromptBundle& bundle,
                               std::span<const HistoryEntry>) -> std::optional<std::string> {
        auto res =
            client->Post(path, chat_request_body(cfg, bundle).dump(), "application/json");
        if (!res || res->status != 200) return std::nullopt;
        try {
            auto j = nlohmann::json::parse(res->body);
            return j.at("choices").at(0).at("message").at("content").get<std::string>();
        } catch (const nlohmann::json::exception&) {
            return std::nullopt;
        }
    };
}

}  // namespace mcl
