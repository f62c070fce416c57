#pragma once

#include <cstdio>
#include <functional>
#include <optional>
#include <sstream>

#include "apg/dataset.hpp"
#include "apg/profile.hpp"
#include "apg/task_types.hpp"

namespace apg {

// Negative sampler contract: k uninteracted items drawn from the universe.
// Implementations live in the sampling module; builders only call through.
using negative_sampler = std::function<std::vector<item_id>(
    const std::set<item_id>& positives, const std::vector<item_id>& universe, const item_stats& stats,
    std::size_t k, rng_stream& rng)>;

namespace detail {

inline std::set<item_id> interacted_items(const split_dataset& split, const user_id& user) {
    std::set<item_id> out;
    if (auto it = split.train_by_user.find(user); it != split.train_by_user.end())
        for (const auto& ev : it->second) out.insert(ev.item);
    if (auto it = split.test_by_user.find(user); it != split.test_by_user.end())
        for (const auto& ev : it->second) out.insert(ev.item);
    return out;
}

inline std::vector<item_id> sampling_universe(const item_stats& stats, const std::set<item_id>& interacted) {
    std::vector<item_id> out;
    out.reserve(stats.popularity.size());
    for (const auto& [id, pop] : stats.popularity)
        if (!interacted.count(id)) out.push_back(id);
    return out; // map order: already sorted, deterministic
}

// distinct items of a portion in time order, keeping the first-seen rating
inline std::vector<std::pair<item_id, double>> distinct_portion_items(const std::vector<interaction>& events) {
    std::vector<std::pair<item_id, double>> out;
    std::set<item_id> seen;
    for (const auto& ev : events)
        if (seen.insert(ev.item).second) out.emplace_back(ev.item, ev.rating);
    return out;
}

enum class portion { train, test };

// The positive draw and the negative draw run on separate seeded streams so a
// probe can vary the sampling strategy while holding the positives fixed.
inline std::optional<task_instance> build_candidate_instance(
    task_family kind, const user_id& user, const split_dataset& split, const item_stats& stats,
    std::size_t p, std::size_t c, const negative_sampler& sampler, std::uint64_t instance_seed,
    portion positives_from, std::optional<std::uint64_t> negatives_seed = std::nullopt) {
    if (c <= p) throw error(errc::config, "candidate pool must exceed the positive count");

    const auto& by_user =
        positives_from == portion::test ? split.test_by_user : split.train_by_user;
    auto it = by_user.find(user);
    if (it == by_user.end()) return std::nullopt;
    auto pool = distinct_portion_items(it->second);
    if (pool.size() < p) return std::nullopt; // instance-skip signal

    rng_stream pos_rng(instance_seed);
    std::vector<item_id> pool_ids;
    for (const auto& [id, r] : pool) pool_ids.push_back(id);
    auto positives = pos_rng.sample_without_replacement(pool_ids, p);

    task_instance inst;
    inst.kind = kind;
    inst.user = user;
    inst.instance_seed = instance_seed;
    inst.positives = {positives.begin(), positives.end()};

    auto universe = sampling_universe(stats, interacted_items(split, user));
    rng_stream neg_rng(negatives_seed.value_or(derive_seed(instance_seed, "negatives")));
    auto negatives = sampler(inst.positives, universe, stats, c - p, neg_rng);

    inst.candidates = positives;
    inst.candidates.insert(inst.candidates.end(), negatives.begin(), negatives.end());
    inst.presentation = inst.candidates;
    neg_rng.shuffle(inst.presentation);
    validate_instance(inst, c);
    return inst;
}

} // namespace detail

inline std::optional<task_instance> build_discrimination_instance(const user_id& user,
                                                                  const split_dataset& split,
                                                                  const item_stats& stats, std::size_t p,
                                                                  std::size_t c, const negative_sampler& sampler,
                                                                  std::uint64_t instance_seed) {
    return detail::build_candidate_instance(task_family::discrimination, user, split, stats, p, c, sampler,
                                            instance_seed, detail::portion::test);
}

inline std::optional<task_instance> build_ranking_instance(const user_id& user, const split_dataset& split,
                                                           const item_stats& stats, std::size_t c,
                                                           const negative_sampler& sampler,
                                                           std::uint64_t instance_seed) {
    return detail::build_candidate_instance(task_family::ranking, user, split, stats, 1, c, sampler,
                                            instance_seed, detail::portion::test);
}

inline std::optional<task_instance> build_rating_instance(const user_id& user, const split_dataset& split,
                                                          std::size_t n, std::uint64_t instance_seed) {
    auto it = split.test_by_user.find(user);
    if (it == split.test_by_user.end()) return std::nullopt;
    auto pool = detail::distinct_portion_items(it->second);
    if (pool.empty()) return std::nullopt;

    rng_stream rng(instance_seed);
    std::vector<std::size_t> indices(pool.size());
    std::iota(indices.begin(), indices.end(), 0);
    auto chosen = rng.sample_without_replacement(indices, std::min(n, pool.size()));

    task_instance inst;
    inst.kind = task_family::rating;
    inst.user = user;
    inst.instance_seed = instance_seed;
    for (auto idx : chosen) {
        inst.candidates.push_back(pool[idx].first);
        inst.truths[pool[idx].first] = pool[idx].second;
        inst.positives.insert(pool[idx].first);
    }
    inst.presentation = inst.candidates;
    rng.shuffle(inst.presentation);
    validate_instance(inst, inst.candidates.size());
    return inst;
}

// Stage-3 probes draw their positives from the train portion so evaluation
// data never leaks into profile construction.
inline std::optional<task_instance> build_probe_instance(task_family kind, const user_id& user,
                                                         const split_dataset& split, const item_stats& stats,
                                                         std::size_t p, std::size_t c,
                                                         const negative_sampler& sampler,
                                                         std::uint64_t instance_seed) {
    if (kind == task_family::rating) {
        auto it = split.train_by_user.find(user);
        if (it == split.train_by_user.end()) return std::nullopt;
        auto pool = detail::distinct_portion_items(it->second);
        if (pool.empty()) return std::nullopt;
        rng_stream rng(instance_seed);
        std::vector<std::size_t> indices(pool.size());
        std::iota(indices.begin(), indices.end(), 0);
        auto chosen = rng.sample_without_replacement(indices, std::min(c, pool.size()));
        task_instance inst;
        inst.kind = kind;
        inst.user = user;
        inst.instance_seed = instance_seed;
        for (auto idx : chosen) {
            inst.candidates.push_back(pool[idx].first);
            inst.truths[pool[idx].first] = pool[idx].second;
            inst.positives.insert(pool[idx].first);
        }
        inst.presentation = inst.candidates;
        rng.shuffle(inst.presentation);
        validate_instance(inst, inst.candidates.size());
        return inst;
    }
    return detail::build_candidate_instance(kind, user, split, stats, p, c, sampler, instance_seed,
                                            detail::portion::train);
}

// --- Prompt rendering ----------------------------------------------------------

namespace detail {

inline std::string format_mean_rating(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

inline std::string render_candidate_line(const item_id& id, const std::map<item_id, item>& catalog,
                                         const item_stats& stats, const std::set<std::string>& mask,
                                         bool popularity_as_quantile = false) {
    std::ostringstream out;
    out << "- id=" << id;
    auto it = catalog.find(id);
    if (mask.count("title")) out << " | title: " << (it != catalog.end() ? it->second.title : "unknown:" + id);
    if (mask.count("genre")) {
        out << " | genres: ";
        out << (it != catalog.end() && !it->second.genres.empty() ? join(it->second.genres, ", ") : "none");
    }
    if (mask.count("rating")) {
        auto mr = stats.mean_rating.find(id);
        out << " | rating: " << (mr != stats.mean_rating.end() ? format_mean_rating(mr->second) : "unrated");
    }
    if (mask.count("popularity")) {
        if (popularity_as_quantile) {
            auto q = stats.popularity_quantile.find(id);
            out << " | popularity: quantile "
                << format_mean_rating(q != stats.popularity_quantile.end() ? q->second : 0.0);
        } else {
            auto pop = stats.popularity.find(id);
            out << " | popularity: " << (pop != stats.popularity.end() ? pop->second : 0) << " interactions";
        }
    }
    return out.str();
}

inline std::string render_profile_section(const task_aligned_profile& profile,
                                          const std::map<item_id, item>& catalog, const item_stats& stats) {
    std::ostringstream out;
    if (profile.generator == generator_kind::recent_interaction && !profile.context_items.empty()) {
        out << "\n\nThe user recently interacted with these items, oldest first:\n";
        std::set<std::string> full_mask{"title", "genre"};
        for (const auto& id : profile.context_items)
            out << render_candidate_line(id, catalog, stats, full_mask) << "\n";
    }

    if (auto role = profile.meta.tags.find("role"); role != profile.meta.tags.end())
        out << "\n\nUser role: " << role->second << ".";
    if (auto pers = profile.meta.tags.find("personality"); pers != profile.meta.tags.end())
        out << "\nPersonality: " << pers->second;
    if (auto beh = profile.meta.tags.find("behaviour"); beh != profile.meta.tags.end())
        out << "\nBehaviour: " << beh->second;

    if (!profile.traits.empty()) {
        std::vector<std::string> lines;
        for (const auto& t : profile.traits) {
            std::string line = t.text;
            if (!t.rationale.empty()) line += " (" + t.rationale + ")";
            lines.push_back(line);
        }
        std::sort(lines.begin(), lines.end());
        out << "\n\nUser traits:\n";
        for (const auto& line : lines) out << "- " << line << "\n";
    }

    if (!profile.policies.empty() && !profile.path.steps.empty()) {
        out << "\nDecision process, in order:\n";
        for (const auto& step : profile.path.steps) {
            std::vector<std::string> texts;
            for (const auto& b : profile.policies)
                if (b.step_ids.count(step.id)) texts.push_back(b.trait.text);
            if (texts.empty()) continue;
            std::sort(texts.begin(), texts.end());
            out << "- while doing '" << step.name << "' (" << step.description
                << "), apply: " << join(texts, "; ") << "\n";
        }
    }
    return out.str();
}

inline std::string answer_instructions(const task_instance& inst) {
    std::ostringstream out;
    switch (inst.kind) {
    case task_family::discrimination:
        out << "Select exactly " << inst.positives.size()
            << " item id(s) this user actually interacted with. Answer with a JSON array of the chosen ids "
               "and nothing else.";
        break;
    case task_family::ranking:
        out << "Order all " << inst.presentation.size()
            << " candidate ids from most to least appealing for this user. Answer with a JSON array "
               "containing every id exactly once and nothing else.";
        break;
    case task_family::rating:
        out << "Give the score this user would assign each item, on the " << "1-5"
            << " scale. Answer with a JSON object mapping every id to a number and nothing else.";
        break;
    }
    return out.str();
}

} // namespace detail

struct request_defaults {
    std::string model_id = "gpt-4o-mini";
    double temperature = 0.1;
    int max_tokens = 1024;
    bool popularity_as_quantile = false; // render the popularity field as a quantile
};

// Deterministic rendering: traits sorted lexicographically, policies grouped
// by step in path order, candidates in presentation order with only the
// masked metadata fields.
inline prompt_request render_agent_prompt(const task_aligned_profile& profile, const task_instance& inst,
                                          const std::map<item_id, item>& catalog, const item_stats& stats,
                                          const request_defaults& defaults = {}) {
    prompt_request req;
    req.model_id = defaults.model_id;
    req.temperature = defaults.temperature;
    req.max_tokens = defaults.max_tokens;
    req.tag = "task-" + to_string(inst.kind);
    req.request_seed = derive_seed(inst.instance_seed, "request");

    req.system_message =
        std::string(prompts::kRolePlaySystem) + detail::render_profile_section(profile, catalog, stats);

    std::ostringstream user;
    user << (inst.kind == task_family::rating ? "Items to judge:" : "Candidate items:") << "\n";
    for (const auto& id : inst.presentation)
        user << detail::render_candidate_line(id, catalog, stats, inst.attribute_mask,
                                              defaults.popularity_as_quantile)
             << "\n";
    user << "\n" << detail::answer_instructions(inst);
    req.user_message = user.str();
    return req;
}

// --- Agent execution -------------------------------------------------------------

struct run_options {
    bool allow_repair = true; // strict mode rejects near-valid outputs instead
    int r_parse = 3;
    rating_scale scale{1.0, 5.0};
    bool rating_single_prompt = true; // false: one request per item, answers merged
};

inline agent_decision run_task(const task_aligned_profile& profile, const task_instance& inst,
                               const std::map<item_id, item>& catalog, const item_stats& stats,
                               executor& exec, const request_defaults& defaults = {},
                               const run_options& opts = {});

namespace detail {

// per-item rating variant: one single-candidate request per presented item
inline agent_decision run_rating_per_item(const task_aligned_profile& profile, const task_instance& inst,
                                          const std::map<item_id, item>& catalog, const item_stats& stats,
                                          executor& exec, const request_defaults& defaults,
                                          const run_options& opts) {
    agent_decision merged;
    merged.kind = task_family::rating;
    run_options sub_opts = opts;
    sub_opts.rating_single_prompt = true;
    for (const auto& id : inst.presentation) {
        task_instance sub = inst;
        sub.candidates = {id};
        sub.positives = {id};
        sub.presentation = {id};
        sub.truths = {{id, inst.truths.at(id)}};
        auto d = run_task(profile, sub, catalog, stats, exec, defaults, sub_opts);
        merged.ratings[id] = d.ratings.at(id);
        merged.repair_applied = merged.repair_applied || d.repair_applied;
        if (!merged.raw_response.empty()) merged.raw_response += "\n";
        merged.raw_response += d.raw_response;
    }
    return merged;
}

} // namespace detail

inline agent_decision run_task(const task_aligned_profile& profile, const task_instance& inst,
                               const std::map<item_id, item>& catalog, const item_stats& stats,
                               executor& exec, const request_defaults& defaults,
                               const run_options& opts) {
    if (inst.kind == task_family::rating && !opts.rating_single_prompt)
        return detail::run_rating_per_item(profile, inst, catalog, stats, exec, defaults, opts);

    auto req = render_agent_prompt(profile, inst, catalog, stats, defaults);

    response_schema schema;
    schema.candidates = inst.presentation;
    schema.scale = opts.scale;
    schema.allow_repair = opts.allow_repair;
    switch (inst.kind) {
    case task_family::discrimination:
        schema.kind = response_kind::selection_set;
        break;
    case task_family::ranking:
        schema.kind = response_kind::ranking;
        break;
    case task_family::rating:
        schema.kind = response_kind::rating_map;
        break;
    }

    auto value = execute_structured(exec, req, schema, opts.r_parse);

    agent_decision decision;
    decision.kind = inst.kind;
    decision.raw_response = value.raw_text;
    decision.repair_applied = value.repair_applied;
    switch (inst.kind) {
    case task_family::discrimination:
        decision.selected = {value.items.begin(), value.items.end()};
        break;
    case task_family::ranking:
        decision.permutation = value.items;
        break;
    case task_family::rating:
        decision.ratings = value.ratings;
        break;
    }
    return decision;
}

// Decision log record: everything needed to recompute metrics offline.
inline nlohmann::json decision_log_record(const task_instance& inst, const agent_decision& decision) {
    return {{"user", inst.user},
            {"instance_digest", inst.digest()},
            {"kind", to_string(inst.kind)},
            {"decision", decision.to_json()},
            {"raw_response", decision.raw_response},
            {"repair_applied", decision.repair_applied}};
}

} // namespace apg
