#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "apg/sampling.hpp"
#include "test_support.hpp"

using namespace apg;

namespace {

// Zipf-popularity synthetic stats over a catalog, no dataset needed.
item_stats zipf_stats(std::size_t items_n, double exponent, std::uint64_t seed) {
    item_stats stats;
    rng_stream rng(seed);
    std::vector<std::pair<std::size_t, item_id>> by_pop;
    for (std::size_t i = 0; i < items_n; ++i) {
        item_id id = "z" + std::to_string(i);
        auto pop = std::max<std::size_t>(1, std::size_t(std::floor(2000.0 / std::pow(double(i + 1), exponent))));
        stats.popularity[id] = pop;
        stats.mean_rating[id] = 1.0 + 4.0 * rng.next_double();
        by_pop.emplace_back(pop, id);
    }
    std::sort(by_pop.begin(), by_pop.end());
    std::size_t group_start = 0;
    for (std::size_t i = 0; i < by_pop.size(); ++i) {
        if (i > 0 && by_pop[i].first != by_pop[i - 1].first) group_start = i;
        stats.popularity_quantile[by_pop[i].second] =
            by_pop.size() > 1 ? double(group_start) / double(by_pop.size() - 1) : 0.0;
    }
    stats.global_mean_rating = 3.0;
    return stats;
}

std::vector<item_id> universe_of(const item_stats& stats) {
    std::vector<item_id> out;
    for (const auto& [id, pop] : stats.popularity) out.push_back(id);
    return out;
}

double mean_pop(const std::vector<item_id>& ids, const item_stats& stats) {
    double acc = 0;
    for (const auto& id : ids) acc += double(stats.popularity.at(id));
    return acc / double(ids.size());
}

double mean_rating(const std::vector<item_id>& ids, const item_stats& stats) {
    double acc = 0;
    for (const auto& id : ids) acc += stats.mean_rating.at(id);
    return acc / double(ids.size());
}

} // namespace

TEST_CASE("uniform negatives") {
    auto stats = zipf_stats(1000, 1.1, 1);
    auto universe = universe_of(stats);
    rng_stream rng(2);

    auto picked = uniform_negatives(universe, 9, rng);
    CHECK(picked.size() == 9);
    CHECK(std::set<item_id>(picked.begin(), picked.end()).size() == 9);

    CHECK(uniform_negatives(universe, 0, rng).empty());
    CHECK_THROWS_AS(uniform_negatives({"only"}, 2, rng), error);
}

TEST_CASE("debias negatives match the positives' statistics") {
    auto stats = zipf_stats(5000, 1.1, 3);
    auto universe = universe_of(stats);
    sampler_spec spec = sampler_spec::debias();

    rng_stream rng(7);
    std::size_t met = 0;
    const int trials = 60;
    for (int t = 0; t < trials; ++t) {
        auto positives_vec = rng.sample_without_replacement(universe, 3);
        std::set<item_id> positives(positives_vec.begin(), positives_vec.end());
        std::vector<item_id> neg_universe;
        for (const auto& id : universe)
            if (!positives.count(id)) neg_universe.push_back(id);

        auto result = debias_negatives(positives, neg_universe, stats, 7, spec, rng);
        CHECK(result.items.size() == 7);
        for (const auto& id : result.items) CHECK_FALSE(positives.count(id));

        if (result.tolerance_met) {
            ++met;
            double target_pop = mean_pop(positives_vec, stats);
            double target_rating = mean_rating(positives_vec, stats);
            // the accepted-output contract, asserted exactly as stated
            CHECK(std::abs(mean_pop(result.items, stats) - target_pop) <=
                  spec.popularity_tolerance * target_pop + 1e-9);
            CHECK(std::abs(mean_rating(result.items, stats) - target_rating) <= spec.rating_tolerance + 1e-9);
        }
    }
    CHECK(met >= std::size_t(trials * 0.95));

    SECTION("k=0 and degenerate universes") {
        rng_stream r2(1);
        CHECK(debias_negatives({"z0"}, universe, stats, 0, spec, r2).items.empty());
        CHECK_THROWS_AS(debias_negatives({"z0"}, {"z1"}, stats, 2, spec, r2), error);
    }

    SECTION("adversarial tiny universe takes the warning path") {
        // two items with wildly different popularity; positives sit far away
        item_stats tiny;
        tiny.popularity = {{"pop", 1000}, {"a", 1}, {"b", 2}};
        tiny.mean_rating = {{"pop", 5.0}, {"a", 1.0}, {"b", 1.1}};
        tiny.popularity_quantile = {{"pop", 1.0}, {"a", 0.0}, {"b", 0.5}};
        tiny.global_mean_rating = 2.0;
        rng_stream r3(5);
        auto res = debias_negatives({"pop"}, {"a", "b"}, tiny, 2, spec, r3);
        CHECK_FALSE(res.tolerance_met);

        sampler_spec strict = spec;
        strict.strict = true;
        rng_stream r4(5);
        CHECK_THROWS_AS(debias_negatives({"pop"}, {"a", "b"}, tiny, 2, strict, r4), error);
    }
}

TEST_CASE("popularity-stratified sampling stays in its band") {
    auto stats = zipf_stats(1000, 1.1, 4);
    auto universe = universe_of(stats);
    rng_stream rng(9);

    auto head = stratified_negatives(universe, stats, 20, sampler_spec::head(), rng);
    for (const auto& id : head) CHECK(stats.popularity_quantile.at(id) >= 0.8);

    auto tail = stratified_negatives(universe, stats, 20, sampler_spec::tail(), rng);
    for (const auto& id : tail) CHECK(stats.popularity_quantile.at(id) <= 0.2);
}

TEST_CASE("position probe") {
    auto ds = testsupport::synthetic_dataset(21, 6, 40, 15, 25);
    auto split = chronological_split(ds, 0.8);
    auto stats = compute_item_stats(split, ds.items);
    auto uniform = make_sampler(sampler_spec::uniform());

    auto inst = build_ranking_instance("user0", split, stats, 10, uniform.fn, 13);
    REQUIRE(inst.has_value());
    const item_id positive = *inst->positives.begin();

    auto variants = position_probe(*inst, {1, 5, 10});
    REQUIRE(variants.size() == 3);
    CHECK(variants[0].presentation[0] == positive);
    CHECK(variants[1].presentation[4] == positive);
    CHECK(variants[2].presentation[9] == positive);

    SECTION("distractor relative order is preserved, candidate multiset conserved") {
        std::vector<item_id> source_distractors;
        for (const auto& id : inst->presentation)
            if (id != positive) source_distractors.push_back(id);
        for (const auto& v : variants) {
            std::vector<item_id> got;
            for (const auto& id : v.presentation)
                if (id != positive) got.push_back(id);
            CHECK(got == source_distractors);
            CHECK(std::multiset<item_id>(v.presentation.begin(), v.presentation.end()) ==
                  std::multiset<item_id>(inst->presentation.begin(), inst->presentation.end()));
        }
    }

    SECTION("requesting the current position reproduces the source") {
        auto pos = std::find(inst->presentation.begin(), inst->presentation.end(), positive) -
                   inst->presentation.begin() + 1;
        auto same = position_probe(*inst, {std::size_t(pos)});
        CHECK(same[0].presentation == inst->presentation);
    }

    SECTION("out-of-range position is a config error") {
        CHECK_THROWS_AS(position_probe(*inst, {11}), error);
        CHECK_THROWS_AS(position_probe(*inst, {0}), error);
    }
}

TEST_CASE("popularity probe holds positives fixed across strategies") {
    auto ds = testsupport::synthetic_dataset(22, 8, 80, 15, 25);
    auto split = chronological_split(ds, 0.8);
    auto stats = compute_item_stats(split, ds.items);

    popularity_probe_config cfg;
    cfg.instances_per_user = 2;
    auto sets = popularity_probe("user1", split, stats, default_popularity_strategies(), cfg, 555);
    REQUIRE(sets.size() == 4);
    CHECK(sets[0].label == "uniform");
    CHECK(sets[1].label == "debias");
    CHECK(sets[2].label == "pop_head");
    CHECK(sets[3].label == "pop_tail");

    for (std::size_t s = 1; s < sets.size(); ++s) {
        REQUIRE(sets[s].instances.size() == sets[0].instances.size());
        for (std::size_t i = 0; i < sets[s].instances.size(); ++i)
            CHECK(sets[s].instances[i].positives == sets[0].instances[i].positives);
    }

    SECTION("empty strategy list yields empty output") {
        CHECK(popularity_probe("user1", split, stats, {}, cfg, 555).empty());
    }
}

TEST_CASE("attribute probe plan") {
    auto plan = attribute_probe_config(standard_attribute_masks(),
                                       {sampler_kind::uniform, sampler_kind::debias});
    CHECK(plan.generator == generator_kind::empty);
    CHECK(plan.cells.size() == 7 * 2 * 2);

    std::set<std::string> labels;
    for (const auto& cell : plan.cells) {
        CHECK((cell.p == 3 && (cell.c == 10 || cell.c == 6)));
        labels.insert(cell.mask_label() + "/" + cell.sampling_label() + "/" + std::to_string(cell.c));
    }
    CHECK(labels.size() == 28);
    CHECK(labels.count("popularity/random/10"));
    CHECK(labels.count("genre+title/debias/6"));

    CHECK_THROWS_AS(attribute_probe_config({}, {sampler_kind::uniform}), error);
    CHECK_THROWS_AS(attribute_probe_config({{}}, {sampler_kind::uniform}), error);
}
