#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace apg {

using user_id = std::string;
using item_id = std::string;

// Error taxonomy. CLI exit codes: config -> 1, backend-ish -> 3, the rest -> 2.
enum class errc {
    config,
    io,
    parse,
    validation,
    data,
    sampling,
    insufficient_history,
    backend,
    cache_miss,
    malformed_output,
};

class error : public std::runtime_error {
public:
    error(errc kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    errc kind() const noexcept { return kind_; }

    int exit_code() const noexcept {
        switch (kind_) {
        case errc::config: return 1;
        case errc::backend:
        case errc::cache_miss:
        case errc::malformed_output: return 3;
        default: return 2;
        }
    }

private:
    errc kind_;
};

// Thrown when structured-output validation exhausts its retry budget; keeps
// every raw model response so the failure can be audited.
class malformed_output_error : public error {
public:
    malformed_output_error(const std::string& what, std::vector<std::string> attempts)
        : error(errc::malformed_output, what), attempts_(std::move(attempts)) {}
    const std::vector<std::string>& attempts() const noexcept { return attempts_; }

private:
    std::vector<std::string> attempts_;
};

class cache_miss_error : public error {
public:
    explicit cache_miss_error(const std::string& digest)
        : error(errc::cache_miss, "replay cache miss for request digest " + digest), digest_(digest) {}
    const std::string& digest() const noexcept { return digest_; }

private:
    std::string digest_;
};

inline std::string to_lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

inline std::vector<std::string> split(std::string_view s, std::string_view delim) {
    std::vector<std::string> parts;
    std::size_t pos = 0;
    while (true) {
        std::size_t next = s.find(delim, pos);
        if (next == std::string_view::npos) {
            parts.emplace_back(s.substr(pos));
            return parts;
        }
        parts.emplace_back(s.substr(pos, next - pos));
        pos = next + delim.size();
    }
}

inline std::string join(const std::vector<std::string>& parts, std::string_view sep) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i) out += sep;
        out += parts[i];
    }
    return out;
}

// Tokens of length >= 3 after case-folding, minus a few function words.
// Used by trait-perturbation validation to check subject overlap.
inline std::vector<std::string> content_words(std::string_view text) {
    static const std::vector<std::string> kStop = {
        "the", "and", "for", "with", "very", "who", "that", "this", "has", "have",
        "not", "but", "its", "are", "was", "were", "their", "them", "they",
        "prefers", "likes", "enjoys", "loves", "dislikes", "avoids", "hates",
        "mildly", "strongly", "slightly", "often", "rarely", "sometimes", "tends",
    };
    std::vector<std::string> words;
    std::string cur;
    auto flush = [&] {
        if (cur.size() >= 3 && std::find(kStop.begin(), kStop.end(), cur) == kStop.end())
            words.push_back(cur);
        cur.clear();
    };
    for (char ch : text) {
        if (std::isalnum(static_cast<unsigned char>(ch)))
            cur += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
        else
            flush();
    }
    flush();
    return words;
}

} // namespace apg
