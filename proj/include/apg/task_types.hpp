#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "apg/core.hpp"
#include "apg/sha256.hpp"

namespace apg {

enum class task_family { discrimination, ranking, rating };

inline std::string to_string(task_family f) {
    switch (f) {
    case task_family::discrimination: return "discrimination";
    case task_family::ranking: return "ranking";
    case task_family::rating: return "rating";
    }
    return "?";
}

inline task_family task_family_from_string(std::string_view s) {
    if (s == "discrimination") return task_family::discrimination;
    if (s == "ranking") return task_family::ranking;
    if (s == "rating") return task_family::rating;
    throw error(errc::config, "unknown task family: " + std::string(s));
}

// The four metadata fields the attribute mask can expose.
inline const std::set<std::string>& all_attribute_fields() {
    static const std::set<std::string> fields{"title", "genre", "rating", "popularity"};
    return fields;
}

struct task_instance {
    task_family kind = task_family::discrimination;
    user_id user;
    std::vector<item_id> candidates;      // construction order
    std::set<item_id> positives;
    std::vector<item_id> presentation;    // permutation of candidates shown to the agent
    std::map<item_id, double> truths;     // ground-truth ratings (rating kind)
    std::set<std::string> attribute_mask{"title", "genre"};
    std::uint64_t instance_seed = 0;

    nlohmann::json to_json() const {
        return {{"kind", to_string(kind)},
                {"user", user},
                {"candidates", candidates},
                {"positives", positives},
                {"presentation", presentation},
                {"truths", truths},
                {"attribute_mask", attribute_mask},
                {"instance_seed", instance_seed}};
    }

    static task_instance from_json(const nlohmann::json& j) {
        task_instance t;
        t.kind = task_family_from_string(j.at("kind").get<std::string>());
        t.user = j.at("user").get<user_id>();
        t.candidates = j.at("candidates").get<std::vector<item_id>>();
        t.positives = j.at("positives").get<std::set<item_id>>();
        t.presentation = j.at("presentation").get<std::vector<item_id>>();
        t.truths = j.at("truths").get<std::map<item_id, double>>();
        t.attribute_mask = j.at("attribute_mask").get<std::set<std::string>>();
        t.instance_seed = j.at("instance_seed").get<std::uint64_t>();
        return t;
    }

    std::string digest() const { return sha256_hex(to_json().dump()); }
};

// Checked after every build: candidate-set size, containment, and that the
// presentation really is a permutation.
inline void validate_instance(const task_instance& t, std::size_t expected_candidates) {
    if (t.candidates.size() != expected_candidates)
        throw error(errc::validation, "instance has " + std::to_string(t.candidates.size()) +
                                          " candidates, expected " + std::to_string(expected_candidates));
    std::multiset<item_id> a(t.candidates.begin(), t.candidates.end());
    std::multiset<item_id> b(t.presentation.begin(), t.presentation.end());
    if (a != b) throw error(errc::validation, "presentation is not a permutation of the candidates");
    if (a.size() != std::set<item_id>(t.candidates.begin(), t.candidates.end()).size())
        throw error(errc::validation, "duplicate candidate ids");
    for (const auto& p : t.positives)
        if (!std::count(t.candidates.begin(), t.candidates.end(), p))
            throw error(errc::validation, "positive " + p + " is not a candidate");
    for (const auto& f : t.attribute_mask)
        if (!all_attribute_fields().count(f))
            throw error(errc::validation, "unknown attribute mask field: " + f);
    if (t.kind == task_family::rating)
        for (const auto& c : t.candidates)
            if (!t.truths.count(c))
                throw error(errc::validation, "rating instance lacks a ground truth for " + c);
}

struct agent_decision {
    task_family kind = task_family::discrimination;
    std::set<item_id> selected;          // discrimination
    std::vector<item_id> permutation;    // ranking
    std::map<item_id, double> ratings;   // rating
    std::string raw_response;
    bool repair_applied = false;

    nlohmann::json to_json() const {
        return {{"kind", to_string(kind)},
                {"selected", selected},
                {"permutation", permutation},
                {"ratings", ratings},
                {"raw_response", raw_response},
                {"repair_applied", repair_applied}};
    }
};

} // namespace apg
