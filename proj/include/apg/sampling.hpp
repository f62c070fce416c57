#pragma once

#include <atomic>
#include <memory>
#include <optional>

#include "apg/dataset.hpp"
#include "apg/rng.hpp"
#include "apg/tasks.hpp"

namespace apg {

enum class sampler_kind { uniform, debias, popularity_stratified };

struct sampler_spec {
    sampler_kind kind = sampler_kind::uniform;
    double popularity_tolerance = 0.10; // relative band around the positives' mean popularity
    double rating_tolerance = 0.25;     // absolute band on a 1-5 scale
    std::size_t max_resamples = 200;
    double quantile_lo = 0.0; // popularity-stratified band (head/tail strategies)
    double quantile_hi = 1.0;
    bool strict = false; // unmet tolerance -> error instead of a warning flag

    std::string label() const {
        switch (kind) {
        case sampler_kind::uniform: return "uniform";
        case sampler_kind::debias: return "debias";
        case sampler_kind::popularity_stratified:
            return quantile_lo >= 0.5 ? "pop_head" : "pop_tail";
        }
        return "?";
    }

    static sampler_spec uniform() { return {}; }
    static sampler_spec debias() {
        sampler_spec s;
        s.kind = sampler_kind::debias;
        return s;
    }
    static sampler_spec head(double lo = 0.8) {
        sampler_spec s;
        s.kind = sampler_kind::popularity_stratified;
        s.quantile_lo = lo;
        s.quantile_hi = 1.0;
        return s;
    }
    static sampler_spec tail(double hi = 0.2) {
        sampler_spec s;
        s.kind = sampler_kind::popularity_stratified;
        s.quantile_lo = 0.0;
        s.quantile_hi = hi;
        return s;
    }
};

inline std::vector<item_id> uniform_negatives(const std::vector<item_id>& universe, std::size_t k,
                                              rng_stream& rng) {
    if (k == 0) return {};
    if (universe.size() < k)
        throw error(errc::sampling, "universe of " + std::to_string(universe.size()) +
                                        " items cannot supply " + std::to_string(k) + " negatives");
    return rng.sample_without_replacement(universe, k);
}

struct debias_result {
    std::vector<item_id> items;
    bool tolerance_met = true; // false marks the best-effort warning path
};

namespace detail {

struct debias_targets {
    double popularity = 0.0;
    double rating = 0.0;
};

inline debias_targets positive_means(const std::set<item_id>& positives, const item_stats& stats) {
    debias_targets t;
    for (const auto& id : positives) {
        auto pop = stats.popularity.find(id);
        auto rat = stats.mean_rating.find(id);
        t.popularity += pop != stats.popularity.end() ? double(pop->second) : 0.0;
        t.rating += rat != stats.mean_rating.end() ? rat->second : stats.global_mean_rating;
    }
    t.popularity /= double(positives.size());
    t.rating /= double(positives.size());
    return t;
}

// violations normalised so 1.0 sits on the tolerance boundary
struct debias_violation {
    double pop = 0.0;
    double rating = 0.0;
    double worst() const { return std::max(pop, rating); }
};

inline debias_violation measure_debias(const std::vector<item_id>& chosen, const item_stats& stats,
                                       const debias_targets& target, const sampler_spec& spec,
                                       double* mean_pop_out = nullptr, double* mean_rating_out = nullptr) {
    double pop = 0.0, rating = 0.0;
    for (const auto& id : chosen) {
        pop += double(stats.popularity.at(id));
        rating += stats.mean_rating.at(id);
    }
    pop /= double(chosen.size());
    rating /= double(chosen.size());
    if (mean_pop_out) *mean_pop_out = pop;
    if (mean_rating_out) *mean_rating_out = rating;
    debias_violation v;
    double pop_band = spec.popularity_tolerance * std::max(target.popularity, 1e-9);
    v.pop = std::abs(pop - target.popularity) / pop_band;
    v.rating = std::abs(rating - target.rating) / spec.rating_tolerance;
    return v;
}

} // namespace detail

// Popularity/rating matched negatives: bucket the universe by popularity
// decile x half-star rating bin, seed each slot from the bucket of a randomly
// chosen positive, then greedily swap items until both means sit inside the
// tolerance bands. Runs out of budget -> best seen set with a warning flag
// (error in strict mode).
inline debias_result debias_negatives(const std::set<item_id>& positives, const std::vector<item_id>& universe,
                                      const item_stats& stats, std::size_t k, const sampler_spec& spec,
                                      rng_stream& rng) {
    if (k == 0) return {{}, true};
    if (positives.empty()) throw error(errc::sampling, "debias sampling requires at least one positive");
    if (universe.size() < k)
        throw error(errc::sampling, "universe of " + std::to_string(universe.size()) +
                                        " items cannot supply " + std::to_string(k) + " negatives");

    const auto target = detail::positive_means(positives, stats);

    auto bucket_of = [&](const item_id& id) {
        auto q = stats.popularity_quantile.count(id) ? stats.popularity_quantile.at(id) : 0.0;
        int pop_decile = std::min(9, int(q * 10.0));
        double r = stats.mean_rating.count(id) ? stats.mean_rating.at(id) : stats.global_mean_rating;
        int rating_bin = std::min(8, std::max(0, int((r - 1.0) * 2.0)));
        return std::pair<int, int>(pop_decile, rating_bin);
    };

    std::map<std::pair<int, int>, std::vector<item_id>> buckets;
    for (const auto& id : universe) buckets[bucket_of(id)].push_back(id);

    std::vector<item_id> positive_list(positives.begin(), positives.end());
    std::set<item_id> used;
    std::vector<item_id> chosen;

    auto draw_near = [&](std::pair<int, int> want) -> std::optional<item_id> {
        for (int radius = 0; radius < 24; ++radius) {
            std::vector<item_id> frontier;
            for (const auto& [key, ids] : buckets) {
                if (std::abs(key.first - want.first) + std::abs(key.second - want.second) != radius) continue;
                for (const auto& id : ids)
                    if (!used.count(id)) frontier.push_back(id);
            }
            if (!frontier.empty()) return frontier[rng.below(frontier.size())];
        }
        return std::nullopt;
    };

    for (std::size_t i = 0; i < k; ++i) {
        const auto& anchor = positive_list[rng.below(positive_list.size())];
        auto pick = draw_near(bucket_of(anchor));
        if (!pick) throw error(errc::sampling, "debias sampling exhausted the universe");
        used.insert(*pick);
        chosen.push_back(*pick);
    }

    // value-sorted views for directed repair swaps
    auto value_of = [&](const item_id& id, bool pop_dim) {
        return pop_dim ? double(stats.popularity.at(id)) : stats.mean_rating.at(id);
    };
    std::vector<std::pair<double, item_id>> by_pop, by_rating;
    by_pop.reserve(universe.size());
    by_rating.reserve(universe.size());
    for (const auto& id : universe) {
        by_pop.emplace_back(value_of(id, true), id);
        by_rating.emplace_back(value_of(id, false), id);
    }
    std::sort(by_pop.begin(), by_pop.end());
    std::sort(by_rating.begin(), by_rating.end());

    // Each iteration swaps the worst-offending chosen item for an unused item
    // whose value would pull the offending mean back onto its target.
    auto score = detail::measure_debias(chosen, stats, target, spec);
    auto best = chosen;
    double best_worst = score.worst();
    for (std::size_t iter = 0; iter < spec.max_resamples && best_worst > 1.0; ++iter) {
        const bool pop_dim = score.pop >= score.rating;
        const auto& sorted = pop_dim ? by_pop : by_rating;
        double mean_now = 0.0;
        for (const auto& id : chosen) mean_now += value_of(id, pop_dim);
        mean_now /= double(chosen.size());
        double target_value = pop_dim ? target.popularity : target.rating;
        double excess = mean_now - target_value;

        // victim: among the 3 most extreme items on the wrong side, at random
        std::vector<std::size_t> order(chosen.size());
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            double va = value_of(chosen[a], pop_dim), vb = value_of(chosen[b], pop_dim);
            return excess > 0 ? va > vb : va < vb;
        });
        std::size_t slot = order[rng.below(std::min<std::size_t>(3, order.size()))];
        double victim_value = value_of(chosen[slot], pop_dim);
        double ideal = victim_value - excess * double(chosen.size());

        // nearest unused candidates around the zeroing value
        auto mid = std::lower_bound(sorted.begin(), sorted.end(), std::pair<double, item_id>{ideal, ""});
        std::vector<item_id> candidates;
        for (auto lo = mid, hi = mid; candidates.size() < 8;) {
            bool advanced = false;
            if (lo != sorted.begin()) {
                --lo;
                advanced = true;
                if (!used.count(lo->second)) candidates.push_back(lo->second);
            }
            if (hi != sorted.end()) {
                if (!used.count(hi->second)) candidates.push_back(hi->second);
                ++hi;
                advanced = true;
            }
            if (!advanced) break;
        }
        if (candidates.empty()) continue;

        const item_id replacement = candidates[rng.below(candidates.size())];
        item_id removed = chosen[slot];
        used.erase(removed);
        used.insert(replacement);
        chosen[slot] = replacement;
        auto trial = detail::measure_debias(chosen, stats, target, spec);
        if (trial.worst() <= score.worst() || trial.pop + trial.rating < score.pop + score.rating) {
            score = trial;
            if (score.worst() < best_worst) {
                best_worst = score.worst();
                best = chosen;
            }
        } else { // revert
            used.erase(replacement);
            used.insert(removed);
            chosen[slot] = removed;
        }
    }

    debias_result result;
    result.items = best;
    result.tolerance_met = best_worst <= 1.0;
    if (!result.tolerance_met && spec.strict)
        throw error(errc::sampling, "debias sampling could not satisfy tolerances within the resample budget");
    return result;
}

inline std::vector<item_id> stratified_negatives(const std::vector<item_id>& universe, const item_stats& stats,
                                                 std::size_t k, const sampler_spec& spec, rng_stream& rng) {
    if (k == 0) return {};
    if (universe.size() < k)
        throw error(errc::sampling, "universe of " + std::to_string(universe.size()) +
                                        " items cannot supply " + std::to_string(k) + " negatives");
    std::vector<item_id> in_band;
    for (const auto& id : universe) {
        double q = stats.popularity_quantile.count(id) ? stats.popularity_quantile.at(id) : 0.0;
        if (q >= spec.quantile_lo && q <= spec.quantile_hi) in_band.push_back(id);
    }
    if (in_band.size() >= k) return rng.sample_without_replacement(in_band, k);

    // thin band: fill up with the nearest-by-quantile outsiders
    std::vector<std::pair<double, item_id>> outside;
    std::set<item_id> taken(in_band.begin(), in_band.end());
    for (const auto& id : universe) {
        if (taken.count(id)) continue;
        double q = stats.popularity_quantile.count(id) ? stats.popularity_quantile.at(id) : 0.0;
        double dist = q < spec.quantile_lo ? spec.quantile_lo - q : q - spec.quantile_hi;
        outside.emplace_back(dist, id);
    }
    std::sort(outside.begin(), outside.end());
    auto result = in_band;
    for (std::size_t i = 0; result.size() < k && i < outside.size(); ++i) result.push_back(outside[i].second);
    rng.shuffle(result);
    result.resize(k);
    return result;
}

// Sampler closure plus the warning counter its debias path feeds.
struct sampler_handle {
    negative_sampler fn;
    std::shared_ptr<std::atomic<std::size_t>> tolerance_warnings;
};

inline sampler_handle make_sampler(const sampler_spec& spec) {
    auto warnings = std::make_shared<std::atomic<std::size_t>>(0);
    negative_sampler fn = [spec, warnings](const std::set<item_id>& positives,
                                           const std::vector<item_id>& universe, const item_stats& stats,
                                           std::size_t k, rng_stream& rng) {
        switch (spec.kind) {
        case sampler_kind::uniform: return uniform_negatives(universe, k, rng);
        case sampler_kind::debias: {
            auto result = debias_negatives(positives, universe, stats, k, spec, rng);
            if (!result.tolerance_met) ++*warnings;
            return result.items;
        }
        case sampler_kind::popularity_stratified:
            return stratified_negatives(universe, stats, k, spec, rng);
        }
        throw error(errc::config, "unknown sampler kind");
    };
    return {std::move(fn), warnings};
}

// --- Position-bias probe ----------------------------------------------------------

// One variant per requested 1-based position: identical candidate set, the
// positive pinned to that slot, distractor relative order untouched.
inline std::vector<task_instance> position_probe(const task_instance& source,
                                                 const std::vector<std::size_t>& positions) {
    if (source.kind != task_family::ranking || source.positives.size() != 1)
        throw error(errc::config, "position probe requires a ranking instance with exactly one positive");
    const item_id positive = *source.positives.begin();
    const std::size_t c = source.candidates.size();

    std::vector<item_id> distractors;
    for (const auto& id : source.presentation)
        if (id != positive) distractors.push_back(id);

    std::vector<task_instance> variants;
    for (auto pos : positions) {
        if (pos < 1 || pos > c)
            throw error(errc::config, "position " + std::to_string(pos) + " outside [1, " +
                                          std::to_string(c) + "]");
        task_instance variant = source;
        variant.presentation = distractors;
        variant.presentation.insert(variant.presentation.begin() + (pos - 1), positive);
        validate_instance(variant, c);
        variants.push_back(std::move(variant));
    }
    return variants;
}

// --- Popularity-bias probe ----------------------------------------------------------

struct strategy_instances {
    std::string label;
    sampler_spec spec;
    std::vector<task_instance> instances;
};

struct popularity_probe_config {
    task_family family = task_family::discrimination;
    std::size_t p = 3;
    std::size_t c = 10;
    std::size_t instances_per_user = 1;
};

// Same positives across every strategy (the positive draw is seeded
// independently of the strategy label); only the negative sampling varies.
inline std::vector<strategy_instances> popularity_probe(const user_id& user, const split_dataset& split,
                                                        const item_stats& stats,
                                                        const std::vector<sampler_spec>& strategies,
                                                        const popularity_probe_config& cfg,
                                                        std::uint64_t user_seed) {
    std::vector<strategy_instances> out;
    for (const auto& spec : strategies) {
        strategy_instances labeled;
        labeled.label = spec.label();
        labeled.spec = spec;
        auto handle = make_sampler(spec);
        for (std::size_t i = 0; i < cfg.instances_per_user; ++i) {
            std::uint64_t instance_seed = derive_seed(user_seed, "instance", i);
            std::uint64_t negatives_seed = derive_seed(instance_seed, "strategy", spec.label());
            std::optional<task_instance> inst;
            if (cfg.family == task_family::ranking)
                inst = detail::build_candidate_instance(task_family::ranking, user, split, stats, 1, cfg.c,
                                                        handle.fn, instance_seed, detail::portion::test,
                                                        negatives_seed);
            else
                inst = detail::build_candidate_instance(task_family::discrimination, user, split, stats, cfg.p,
                                                        cfg.c, handle.fn, instance_seed, detail::portion::test,
                                                        negatives_seed);
            if (inst) labeled.instances.push_back(std::move(*inst));
        }
        out.push_back(std::move(labeled));
    }
    return out;
}

inline std::vector<sampler_spec> default_popularity_strategies() {
    return {sampler_spec::uniform(), sampler_spec::debias(), sampler_spec::head(), sampler_spec::tail()};
}

// --- Attribute-isolation probe ----------------------------------------------------------

struct attribute_probe_cell {
    std::set<std::string> mask;
    sampler_kind sampling = sampler_kind::uniform;
    std::size_t p = 3;
    std::size_t c = 10;

    std::string sampling_label() const { return sampling == sampler_kind::uniform ? "random" : "debias"; }
    std::string mask_label() const {
        return mask.empty() ? "none" : join({mask.begin(), mask.end()}, "+");
    }
};

struct attribute_probe_plan {
    generator_kind generator = generator_kind::empty; // parametric-prior probe runs profile-free
    std::vector<attribute_probe_cell> cells;
};

// The 7 mask rows of the attribute-isolation study.
inline std::vector<std::set<std::string>> standard_attribute_masks() {
    return {{"title"},
            {"genre"},
            {"rating"},
            {"popularity"},
            {"title", "genre"},
            {"rating", "popularity"},
            {"title", "genre", "rating", "popularity"}};
}

inline attribute_probe_plan attribute_probe_config(const std::vector<std::set<std::string>>& masks,
                                                   const std::vector<sampler_kind>& samplings) {
    if (masks.empty()) throw error(errc::config, "attribute probe requires at least one mask");
    for (const auto& mask : masks) {
        if (mask.empty()) throw error(errc::config, "attribute probe mask may not be empty");
        for (const auto& field : mask)
            if (!all_attribute_fields().count(field))
                throw error(errc::config, "unknown attribute field: " + field);
    }
    if (samplings.empty()) throw error(errc::config, "attribute probe requires at least one sampling strategy");

    attribute_probe_plan plan;
    for (const auto& mask : masks)
        for (auto sampling : samplings)
            for (auto [p, c] : {std::pair<std::size_t, std::size_t>{3, 10}, {3, 6}})
                plan.cells.push_back({mask, sampling, p, c});
    return plan;
}

} // namespace apg
