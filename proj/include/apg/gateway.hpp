#pragma once

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <shared_mutex>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "apg/core.hpp"
#include "apg/sha256.hpp"

namespace apg {

struct prompt_request {
    std::string model_id;
    std::string system_message;
    std::string user_message;
    double temperature = 0.1;
    int max_tokens = 1024;
    std::optional<std::uint64_t> request_seed;
    std::string tag; // pipeline step label, excluded from the cache key
};

enum class backend_kind { live, scripted, replay };

struct prompt_response {
    std::string text;
    std::size_t prompt_tokens = 0;
    std::size_t completion_tokens = 0;
    std::size_t latency_ms = 0;
    backend_kind backend = backend_kind::scripted;
};

// Collision-resistant request fingerprint. The tag is bookkeeping and stays
// out; request_seed is folded in even when the provider ignores it, so replay
// stays sound.
inline std::string cache_key(const prompt_request& req) {
    nlohmann::json j{{"model_id", req.model_id},
                     {"system", req.system_message},
                     {"user", req.user_message},
                     {"temperature", req.temperature},
                     {"max_tokens", req.max_tokens}};
    if (req.request_seed) j["request_seed"] = *req.request_seed;
    return sha256_hex(j.dump());
}

class executor {
public:
    virtual ~executor() = default;
    virtual prompt_response execute(const prompt_request& request) = 0;
};

namespace detail {

inline std::size_t estimate_tokens(std::string_view text) { return text.size() / 4; }

inline const char* kBase64Chars = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

inline std::string base64_encode(std::string_view in) {
    std::string out;
    out.reserve((in.size() + 2) / 3 * 4);
    std::size_t i = 0;
    while (i + 2 < in.size()) {
        std::uint32_t n = (std::uint8_t(in[i]) << 16) | (std::uint8_t(in[i + 1]) << 8) | std::uint8_t(in[i + 2]);
        out += kBase64Chars[(n >> 18) & 63];
        out += kBase64Chars[(n >> 12) & 63];
        out += kBase64Chars[(n >> 6) & 63];
        out += kBase64Chars[n & 63];
        i += 3;
    }
    if (i + 1 == in.size()) {
        std::uint32_t n = std::uint8_t(in[i]) << 16;
        out += kBase64Chars[(n >> 18) & 63];
        out += kBase64Chars[(n >> 12) & 63];
        out += "==";
    } else if (i + 2 == in.size()) {
        std::uint32_t n = (std::uint8_t(in[i]) << 16) | (std::uint8_t(in[i + 1]) << 8);
        out += kBase64Chars[(n >> 18) & 63];
        out += kBase64Chars[(n >> 12) & 63];
        out += kBase64Chars[(n >> 6) & 63];
        out += '=';
    }
    return out;
}

inline std::string base64_decode(std::string_view in) {
    auto val = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        return -1;
    };
    std::string out;
    int buf = 0, bits = 0;
    for (char c : in) {
        if (c == '=') break;
        int v = val(c);
        if (v < 0) throw error(errc::parse, "invalid base64 payload");
        buf = (buf << 6) | v;
        bits += 6;
        if (bits >= 8) {
            bits -= 8;
            out += char((buf >> bits) & 0xff);
        }
    }
    return out;
}

inline nlohmann::json request_to_json(const prompt_request& r) {
    nlohmann::json j{{"model_id", r.model_id},   {"system_message", r.system_message},
                     {"user_message", r.user_message}, {"temperature", r.temperature},
                     {"max_tokens", r.max_tokens}, {"tag", r.tag}};
    if (r.request_seed) j["request_seed"] = *r.request_seed;
    return j;
}

inline nlohmann::json response_to_json(const prompt_response& r) {
    return {{"text", r.text},
            {"prompt_tokens", r.prompt_tokens},
            {"completion_tokens", r.completion_tokens},
            {"latency_ms", r.latency_ms},
            {"backend", int(r.backend)}};
}

inline prompt_response response_from_json(const nlohmann::json& j) {
    prompt_response r;
    r.text = j.at("text").get<std::string>();
    r.prompt_tokens = j.at("prompt_tokens").get<std::size_t>();
    r.completion_tokens = j.at("completion_tokens").get<std::size_t>();
    r.latency_ms = j.at("latency_ms").get<std::size_t>();
    r.backend = backend_kind(j.at("backend").get<int>());
    return r;
}

} // namespace detail

namespace detail {

// Candidate ids as rendered into task prompts ("id=<token>"), first-seen order.
inline std::vector<std::string> ids_in_prompt(const std::string& text) {
    std::vector<std::string> ids;
    std::set<std::string> seen;
    std::size_t pos = 0;
    while ((pos = text.find("id=", pos)) != std::string::npos) {
        pos += 3;
        std::string id;
        while (pos < text.size() && !std::isspace(static_cast<unsigned char>(text[pos])) && text[pos] != '|')
            id += text[pos++];
        if (!id.empty() && seen.insert(id).second) ids.push_back(id);
    }
    return ids;
}

// Canned responses may carry macros that expand deterministically from the
// request, so one table entry can answer instance-specific task prompts:
//   {{ids_json}}            every candidate id, presentation order
//   {{ids_reversed_json}}   the same ids, reversed
//   {{selection_json}}      the first N ids, N parsed from "Select exactly N"
//   {{first_id}} {{last_id}}
//   {{rating_map_json:R}}   every id mapped to the constant R
inline std::string expand_response_macros(const std::string& resp, const prompt_request& request) {
    if (resp.find("{{") == std::string::npos) return resp;
    auto ids = ids_in_prompt(request.user_message);
    std::string out = resp;
    auto replace_all_tokens = [&out](const std::string& token, const std::string& value) {
        std::size_t pos = 0;
        while ((pos = out.find(token, pos)) != std::string::npos) {
            out.replace(pos, token.size(), value);
            pos += value.size();
        }
    };
    replace_all_tokens("{{ids_json}}", nlohmann::json(ids).dump());
    auto reversed = ids;
    std::reverse(reversed.begin(), reversed.end());
    replace_all_tokens("{{ids_reversed_json}}", nlohmann::json(reversed).dump());
    if (!ids.empty()) {
        replace_all_tokens("{{first_id}}", ids.front());
        replace_all_tokens("{{last_id}}", ids.back());
    }
    if (out.find("{{selection_json}}") != std::string::npos) {
        std::size_t n = 1;
        auto mark = request.user_message.find("Select exactly ");
        if (mark != std::string::npos) n = std::strtoull(request.user_message.c_str() + mark + 15, nullptr, 10);
        n = std::max<std::size_t>(1, std::min(n, ids.size()));
        std::vector<std::string> head(ids.begin(), ids.begin() + n);
        replace_all_tokens("{{selection_json}}", nlohmann::json(head).dump());
    }
    auto rm = out.find("{{rating_map_json:");
    if (rm != std::string::npos) {
        auto end = out.find("}}", rm);
        double value = std::strtod(out.c_str() + rm + 18, nullptr);
        nlohmann::json obj = nlohmann::json::object();
        for (const auto& id : ids) obj[id] = value;
        out.replace(rm, end + 2 - rm, obj.dump());
    }
    return out;
}

} // namespace detail

// --- Scripted backend --------------------------------------------------------
// Deterministic canned responses. Lookup precedence: (tag, digest) exact match,
// then (tag, substring-of-rendered-prompt) rules in registration order, then
// the bare tag default. A fixed table makes the whole gateway a pure function
// of the request; response macros (expand_response_macros) keep it one.

struct scripted_entry {
    std::string tag;
    std::optional<std::string> digest;
    std::optional<std::string> match; // substring of system+user text
    std::string response;
};

class scripted_executor : public executor {
public:
    scripted_executor() = default;
    explicit scripted_executor(std::vector<scripted_entry> entries) : entries_(std::move(entries)) {}

    void add(scripted_entry entry) { entries_.push_back(std::move(entry)); }
    void add_tag_default(const std::string& tag, const std::string& response) {
        entries_.push_back({tag, std::nullopt, std::nullopt, response});
    }

    static scripted_executor from_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw error(errc::io, "cannot open scripted table: " + path);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const std::exception& e) {
            throw error(errc::parse, "scripted table " + path + ": " + e.what());
        }
        std::vector<scripted_entry> entries;
        for (const auto& e : j.at("entries")) {
            scripted_entry entry;
            entry.tag = e.at("tag").get<std::string>();
            if (e.contains("digest")) entry.digest = e["digest"].get<std::string>();
            if (e.contains("match")) entry.match = e["match"].get<std::string>();
            entry.response = e.at("response").get<std::string>();
            entries.push_back(std::move(entry));
        }
        return scripted_executor(std::move(entries));
    }

    prompt_response execute(const prompt_request& request) override {
        const std::string digest = cache_key(request);
        const std::string rendered = request.system_message + "\n" + request.user_message;
        const scripted_entry* tag_default = nullptr;
        const scripted_entry* rule_hit = nullptr;
        for (const auto& e : entries_) {
            if (e.tag != request.tag) continue;
            if (e.digest) {
                if (*e.digest == digest) return make_response(e.response, request);
            } else if (e.match) {
                if (!rule_hit && rendered.find(*e.match) != std::string::npos) rule_hit = &e;
            } else if (!tag_default) {
                tag_default = &e;
            }
        }
        if (rule_hit) return make_response(rule_hit->response, request);
        if (tag_default) return make_response(tag_default->response, request);
        throw error(errc::config,
                    "scripted table has no entry for tag '" + request.tag + "' (digest " + digest + ")");
    }

private:
    static prompt_response make_response(const std::string& text, const prompt_request& request) {
        prompt_response r;
        r.text = detail::expand_response_macros(text, request);
        r.prompt_tokens = detail::estimate_tokens(request.system_message) +
                          detail::estimate_tokens(request.user_message);
        r.completion_tokens = detail::estimate_tokens(text);
        r.latency_ms = 0;
        r.backend = backend_kind::scripted;
        return r;
    }

    std::vector<scripted_entry> entries_;
};

// --- Replay backend ----------------------------------------------------------
// Append-only (digest, request, response) cache. record: read-through, misses
// go to the live executor and are persisted. replay: same, but a missing live
// executor turns misses into errors. strict: misses are always cache-miss
// errors and the live executor is never consulted.

enum class replay_mode { record, replay, strict };

class replay_executor : public executor {
public:
    replay_executor(std::string cache_path, replay_mode mode, std::shared_ptr<executor> live = nullptr)
        : cache_path_(std::move(cache_path)), mode_(mode), live_(std::move(live)) {
        load();
    }

    prompt_response execute(const prompt_request& request) override {
        const std::string key = cache_key(request);
        {
            std::shared_lock lock(mutex_);
            auto it = cache_.find(key);
            if (it != cache_.end()) {
                prompt_response r = it->second;
                r.backend = backend_kind::replay;
                return r;
            }
        }
        if (mode_ == replay_mode::strict) throw cache_miss_error(key);
        if (!live_)
            throw error(errc::config, "replay cache miss with no live backend configured (digest " + key + ")");
        prompt_response r = live_->execute(request);
        ++live_calls_;
        persist(key, request, r);
        return r;
    }

    std::size_t live_calls() const noexcept { return live_calls_; }
    std::size_t size() const {
        std::shared_lock lock(mutex_);
        return cache_.size();
    }

private:
    void load() {
        std::ifstream in(cache_path_);
        if (!in) {
            if (mode_ == replay_mode::strict)
                throw error(errc::io, "replay cache file not found: " + cache_path_);
            return;
        }
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (trim(line).empty()) continue;
            auto fields = split(line, "\t");
            if (fields.size() != 3)
                throw error(errc::parse, "cache file " + cache_path_ + " line " + std::to_string(line_no) +
                                             ": expected 3 tab-separated fields");
            auto resp = nlohmann::json::parse(detail::base64_decode(fields[2]));
            cache_[fields[0]] = detail::response_from_json(resp);
        }
    }

    void persist(const std::string& key, const prompt_request& request, const prompt_response& response) {
        std::unique_lock lock(mutex_);
        cache_[key] = response;
        std::ofstream out(cache_path_, std::ios::app);
        if (!out) throw error(errc::io, "cannot append to replay cache: " + cache_path_);
        out << key << '\t' << detail::base64_encode(detail::request_to_json(request).dump()) << '\t'
            << detail::base64_encode(detail::response_to_json(response).dump()) << '\n';
    }

    std::string cache_path_;
    replay_mode mode_;
    std::shared_ptr<executor> live_;
    mutable std::shared_mutex mutex_;
    std::map<std::string, prompt_response> cache_;
    std::atomic<std::size_t> live_calls_{0};
};

// --- Structured output validation ---------------------------------------------

enum class response_kind { trait_list, profile, decision_path, selection_set, ranking, rating_map, free_text };

struct response_schema {
    response_kind kind = response_kind::free_text;
    std::vector<std::string> candidates; // allowed ids, in presentation order
    std::pair<double, double> scale{1.0, 5.0};
    std::size_t min_items = 1;
    std::size_t max_items = std::size_t(-1);
    std::vector<std::string> role_set; // closed role vocabulary for profile kind
    bool allow_repair = false;
};

struct structured_value {
    response_kind kind = response_kind::free_text;
    std::vector<std::string> items;          // trait_list / selection_set / ranking
    std::map<std::string, double> ratings;   // rating_map
    nlohmann::json object;                   // profile / decision_path
    std::string raw_text;
    bool repair_applied = false;
    std::size_t list_duplicates = 0; // exact-string dups collapsed out of a trait list
};

namespace detail {

// Models wrap JSON in prose often enough that we scan for the outermost
// bracketed payload before giving up.
inline std::optional<nlohmann::json> extract_json(const std::string& text, char open, char close) {
    auto direct = nlohmann::json::parse(text, nullptr, false);
    if (!direct.is_discarded()) return direct;
    auto start = text.find(open);
    auto end = text.rfind(close);
    if (start == std::string::npos || end == std::string::npos || end <= start) return std::nullopt;
    auto inner = nlohmann::json::parse(text.substr(start, end - start + 1), nullptr, false);
    if (inner.is_discarded()) return std::nullopt;
    return inner;
}

inline std::vector<std::string> parse_string_list(const std::string& text) {
    if (auto j = extract_json(text, '[', ']'); j && j->is_array()) {
        std::vector<std::string> out;
        for (const auto& v : *j) {
            if (v.is_string())
                out.push_back(std::string(trim(v.get<std::string>())));
            else if (v.is_number_integer())
                out.push_back(std::to_string(v.get<std::int64_t>()));
        }
        if (!out.empty()) return out;
    }
    // fallback: comma- or line-separated ids / phrases, optional bullets
    std::vector<std::string> out;
    for (auto& line : split(text, "\n")) {
        for (auto& piece : split(line, ",")) {
            auto t = std::string(trim(piece));
            while (!t.empty() && (t.front() == '-' || t.front() == '*' || t.front() == '"')) t.erase(t.begin());
            while (!t.empty() && (t.back() == '"' || t.back() == '.')) t.pop_back();
            t = std::string(trim(t));
            if (!t.empty()) out.push_back(t);
        }
    }
    return out;
}

struct parse_outcome {
    bool ok = false;
    std::string reason;
    structured_value value;
};

inline parse_outcome parse_structured(const std::string& text, const response_schema& schema) {
    parse_outcome out;
    out.value.kind = schema.kind;
    out.value.raw_text = text;

    auto fail = [&](std::string why) {
        out.ok = false;
        out.reason = std::move(why);
        return out;
    };

    switch (schema.kind) {
    case response_kind::free_text: {
        if (trim(text).empty()) return fail("empty response");
        out.ok = true;
        return out;
    }
    case response_kind::trait_list: {
        // free-form prose is not a trait list; insist on an array or bullets
        std::vector<std::string> items;
        if (auto j = extract_json(text, '[', ']'); j && j->is_array()) {
            for (const auto& v : *j)
                if (v.is_string() && !trim(v.get<std::string>()).empty())
                    items.push_back(std::string(trim(v.get<std::string>())));
        } else {
            for (auto& line : split(text, "\n")) {
                auto t = trim(line);
                if (t.size() > 2 && (t.front() == '-' || t.front() == '*'))
                    items.push_back(std::string(trim(t.substr(1))));
            }
        }
        if (items.empty()) return fail("expected a JSON array of trait strings");
        std::vector<std::string> deduped;
        for (auto& s : items) {
            bool seen = false;
            for (const auto& d : deduped)
                if (to_lower(d) == to_lower(s)) seen = true;
            if (seen)
                ++out.value.list_duplicates; // collapsed, surfaced for the caller's log
            else
                deduped.push_back(s);
        }
        if (deduped.size() < schema.min_items) return fail("expected at least " +
                                                           std::to_string(schema.min_items) + " traits");
        if (deduped.size() > schema.max_items)
            return fail("expected at most " + std::to_string(schema.max_items) + " traits, got " +
                        std::to_string(deduped.size()));
        out.value.items = std::move(deduped);
        out.ok = true;
        return out;
    }
    case response_kind::selection_set: {
        auto items = parse_string_list(text);
        std::vector<std::string> kept;
        bool repaired = false;
        for (auto& id : items) {
            bool allowed =
                std::find(schema.candidates.begin(), schema.candidates.end(), id) != schema.candidates.end();
            bool dup = std::find(kept.begin(), kept.end(), id) != kept.end();
            if (!allowed || dup) {
                if (!schema.allow_repair) return fail("selection contains invalid or duplicate id '" + id + "'");
                repaired = true;
                continue;
            }
            kept.push_back(id);
        }
        if (kept.empty()) return fail("response contains no valid candidate ids");
        out.value.items = std::move(kept);
        out.value.repair_applied = repaired;
        out.ok = true;
        return out;
    }
    case response_kind::ranking: {
        auto items = parse_string_list(text);
        std::vector<std::string> kept;
        bool repaired = false;
        for (auto& id : items) {
            bool allowed =
                std::find(schema.candidates.begin(), schema.candidates.end(), id) != schema.candidates.end();
            bool dup = std::find(kept.begin(), kept.end(), id) != kept.end();
            if (!allowed || dup) {
                if (!schema.allow_repair) return fail("ranking contains invalid or duplicate id '" + id + "'");
                repaired = true; // dedupe keeps the first occurrence
                continue;
            }
            kept.push_back(id);
        }
        if (kept.empty()) return fail("response contains no valid candidate ids");
        if (kept.size() != schema.candidates.size()) {
            if (!schema.allow_repair) return fail("ranking omits " +
                                                  std::to_string(schema.candidates.size() - kept.size()) +
                                                  " candidate id(s)");
            // append missing ids in presentation order
            for (const auto& id : schema.candidates)
                if (std::find(kept.begin(), kept.end(), id) == kept.end()) {
                    kept.push_back(id);
                    repaired = true;
                }
        }
        out.value.items = std::move(kept);
        out.value.repair_applied = repaired;
        out.ok = true;
        return out;
    }
    case response_kind::rating_map: {
        auto j = extract_json(text, '{', '}');
        if (!j || !j->is_object()) return fail("expected a JSON object mapping item id to score");
        std::map<std::string, double> ratings;
        bool repaired = false;
        for (auto& [key, val] : j->items()) {
            if (!val.is_number()) return fail("score for '" + key + "' is not a number");
            bool allowed =
                std::find(schema.candidates.begin(), schema.candidates.end(), key) != schema.candidates.end();
            if (!allowed) {
                if (!schema.allow_repair) return fail("unknown item id '" + key + "'");
                repaired = true;
                continue;
            }
            double v = val.get<double>();
            if (v < schema.scale.first || v > schema.scale.second) {
                if (!schema.allow_repair)
                    return fail("score " + std::to_string(v) + " outside the rating scale");
                v = std::min(std::max(v, schema.scale.first), schema.scale.second);
                repaired = true;
            }
            ratings[key] = v;
        }
        for (const auto& id : schema.candidates)
            if (!ratings.count(id)) return fail("missing score for item '" + id + "'");
        out.value.ratings = std::move(ratings);
        out.value.repair_applied = repaired;
        out.ok = true;
        return out;
    }
    case response_kind::decision_path: {
        auto j = extract_json(text, '[', ']');
        if (j && j->is_object() && j->contains("steps")) j = (*j)["steps"];
        if (!j || !j->is_array()) {
            auto obj = extract_json(text, '{', '}');
            if (obj && obj->is_object() && obj->contains("steps")) j = (*obj)["steps"];
        }
        if (!j || !j->is_array()) return fail("expected a JSON array of decision steps");
        nlohmann::json steps = nlohmann::json::array();
        for (const auto& s : *j) {
            if (s.is_string()) {
                steps.push_back({{"name", s.get<std::string>()}, {"description", ""}});
            } else if (s.is_object() && s.contains("name")) {
                steps.push_back({{"name", s["name"].get<std::string>()},
                                 {"description", s.value("description", "")}});
            } else {
                return fail("decision step must be a name or an object with a name");
            }
        }
        if (steps.size() < 2 || steps.size() > 6)
            return fail("decision path must have 2 to 6 steps, got " + std::to_string(steps.size()));
        out.value.object = std::move(steps);
        out.ok = true;
        return out;
    }
    case response_kind::profile: {
        auto j = extract_json(text, '{', '}');
        if (!j || !j->is_object()) return fail("expected a JSON object");
        if (!schema.role_set.empty()) {
            if (!j->contains("role") || !(*j)["role"].is_string()) return fail("missing role field");
            auto role = to_lower((*j)["role"].get<std::string>());
            if (std::find(schema.role_set.begin(), schema.role_set.end(), role) == schema.role_set.end())
                return fail("role '" + role + "' is not in the allowed set");
            (*j)["role"] = role;
        }
        out.value.object = std::move(*j);
        out.ok = true;
        return out;
    }
    }
    return fail("unhandled schema kind");
}

} // namespace detail

// Executes the request and validates the completion against the schema.
// Invalid completions trigger a re-prompt with an appended corrective
// instruction, up to r_parse attempts total.
inline structured_value execute_structured(executor& exec, const prompt_request& request,
                                           const response_schema& schema, int r_parse = 3) {
    if (r_parse < 1) throw error(errc::config, "r_parse must be >= 1");
    std::vector<std::string> attempts;
    prompt_request req = request;
    std::string last_reason;
    for (int attempt = 1; attempt <= r_parse; ++attempt) {
        prompt_response resp = exec.execute(req);
        attempts.push_back(resp.text);
        auto outcome = detail::parse_structured(resp.text, schema);
        if (outcome.ok) return std::move(outcome.value);
        last_reason = outcome.reason;
        req.user_message = request.user_message +
                           "\n\n[Retry " + std::to_string(attempt) + "] The previous response was invalid: " +
                           outcome.reason + ". Respond again following the required output format exactly.";
    }
    throw malformed_output_error("structured output invalid after " + std::to_string(r_parse) +
                                     " attempt(s) for tag '" + request.tag + "': " + last_reason,
                                 std::move(attempts));
}

} // namespace apg
