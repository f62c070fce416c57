#pragma once

#if defined(APG_WITH_OPENSSL) && !defined(CPPHTTPLIB_OPENSSL_SUPPORT)
#define CPPHTTPLIB_OPENSSL_SUPPORT
#endif

#include <httplib.h>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <semaphore>
#include <thread>

#include <json.hpp>

#include "apg/gateway.hpp"

namespace apg {

struct live_config {
    std::string base_url = "https://api.openai.com";
    std::string chat_path = "/v1/chat/completions";
    std::string api_key_env = "OPENAI_API_KEY"; // credentials come from the environment only
    int transport_attempts = 3;                 // max HTTP calls per logical request
    int backoff_initial_ms = 250;
    double backoff_factor = 2.0;
    int timeout_seconds = 120;
    int in_flight_limit = 4;
};

// OpenAI-compatible chat-completion client with bounded retries and
// exponential backoff on transport failures, 429 and 5xx.
class live_executor : public executor {
public:
    explicit live_executor(live_config cfg) : cfg_(std::move(cfg)), gate_(kMaxInFlight) {
        if (cfg_.transport_attempts < 1) throw error(errc::config, "transport_attempts must be >= 1");
        if (cfg_.in_flight_limit < 1 || cfg_.in_flight_limit > kMaxInFlight)
            throw error(errc::config, "in_flight_limit must be in [1, 64]");
#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
        if (cfg_.base_url.rfind("https://", 0) == 0)
            throw error(errc::config,
                        "https endpoint requires a TLS-enabled build (define APG_WITH_OPENSSL)");
#endif
        // shrink the semaphore down to the configured limit
        for (int i = cfg_.in_flight_limit; i < kMaxInFlight; ++i) gate_.acquire();
        if (const char* key = std::getenv(cfg_.api_key_env.c_str())) api_key_ = key;
    }

    prompt_response execute(const prompt_request& request) override {
        nlohmann::json body{{"model", request.model_id},
                            {"messages",
                             {{{"role", "system"}, {"content", request.system_message}},
                              {{"role", "user"}, {"content", request.user_message}}}},
                            {"temperature", request.temperature},
                            {"max_tokens", request.max_tokens}};
        if (request.request_seed) body["seed"] = *request.request_seed;
        const std::string payload = body.dump();

        gate_.acquire();
        struct releaser {
            std::counting_semaphore<kMaxInFlight>& g;
            ~releaser() { g.release(); }
        } release_on_exit{gate_};

        std::string last_failure = "no attempt made";
        for (int attempt = 1; attempt <= cfg_.transport_attempts; ++attempt) {
            if (attempt > 1) {
                auto delay = std::chrono::milliseconds(std::llround(
                    cfg_.backoff_initial_ms * std::pow(cfg_.backoff_factor, attempt - 2)));
                std::this_thread::sleep_for(delay);
            }
            httplib::Client client(cfg_.base_url);
            client.set_connection_timeout(cfg_.timeout_seconds);
            client.set_read_timeout(cfg_.timeout_seconds);
            httplib::Headers headers;
            if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);

            auto start = std::chrono::steady_clock::now();
            auto res = client.Post(cfg_.chat_path, headers, payload, "application/json");
            auto elapsed = std::chrono::duration_cast<std::chrono::milliseconds>(
                               std::chrono::steady_clock::now() - start)
                               .count();

            if (!res) {
                last_failure = "transport error: " + httplib::to_string(res.error());
                continue;
            }
            if (res->status == 429 || res->status >= 500) {
                last_failure = "HTTP " + std::to_string(res->status);
                continue;
            }
            if (res->status != 200)
                throw error(errc::backend, "chat completion failed with HTTP " +
                                               std::to_string(res->status) + ": " + res->body);

            nlohmann::json j = nlohmann::json::parse(res->body, nullptr, false);
            if (j.is_discarded() || !j.contains("choices") || j["choices"].empty() ||
                !j["choices"][0].contains("message"))
                throw error(errc::backend, "chat completion returned an unparseable body");
            prompt_response out;
            out.text = j["choices"][0]["message"].value("content", "");
            if (j.contains("usage")) {
                out.prompt_tokens = j["usage"].value("prompt_tokens", 0);
                out.completion_tokens = j["usage"].value("completion_tokens", 0);
            }
            out.latency_ms = std::size_t(elapsed);
            out.backend = backend_kind::live;
            return out;
        }
        throw error(errc::backend, "transport retry budget exhausted after " +
                                       std::to_string(cfg_.transport_attempts) +
                                       " attempt(s); last failure: " + last_failure);
    }

private:
    static constexpr int kMaxInFlight = 64;
    live_config cfg_;
    std::string api_key_;
    std::counting_semaphore<kMaxInFlight> gate_;
};

} // namespace apg
