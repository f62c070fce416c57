#include <catch2/catch_amalgamated.hpp>

#include "apg/pipeline.hpp"
#include "apg/sampling.hpp"
#include "apg/tasks.hpp"
#include "test_support.hpp"

using namespace apg;
using testsupport::fn_executor;

namespace {

struct env {
    dataset ds;
    split_dataset split;
    item_stats stats;
    sampler_handle uniform = make_sampler(sampler_spec::uniform());

    explicit env(std::uint64_t seed = 11, std::size_t users = 12, std::size_t items = 60) {
        ds = testsupport::synthetic_dataset(seed, users, items, 15, 25);
        split = chronological_split(ds, 0.8);
        stats = compute_item_stats(split, ds.items);
    }
};

std::set<item_id> interacted(const split_dataset& split, const user_id& u) {
    std::set<item_id> out;
    for (const auto& ev : split.train_by_user.at(u)) out.insert(ev.item);
    for (const auto& ev : split.test_by_user.at(u)) out.insert(ev.item);
    return out;
}

// run_task with an empty profile via the env bundle
agent_decision run_task(const task_instance& inst, executor& exec, const env& e) {
    return apg::run_task(empty_profile(inst.user), inst, e.ds.items, e.stats, exec);
}

} // namespace

TEST_CASE("discrimination instance construction") {
    env e;
    const user_id u = "user0";

    auto inst = build_discrimination_instance(u, e.split, e.stats, 3, 10, e.uniform.fn, 42);
    REQUIRE(inst.has_value());
    CHECK(inst->candidates.size() == 10);
    CHECK(inst->positives.size() == 3);
    CHECK(inst->kind == task_family::discrimination);

    auto test_items = interacted(e.split, u);
    std::set<item_id> test_only;
    for (const auto& ev : e.split.test_by_user.at(u)) test_only.insert(ev.item);
    for (const auto& p : inst->positives) CHECK(test_only.count(p) == 1);

    // distractors never touch the user's interacted set
    for (const auto& c : inst->candidates)
        if (!inst->positives.count(c)) CHECK(test_items.count(c) == 0);

    SECTION("p=1 leaves nine distractors") {
        auto one = build_discrimination_instance(u, e.split, e.stats, 1, 10, e.uniform.fn, 43);
        REQUIRE(one.has_value());
        CHECK(one->positives.size() == 1);
        CHECK(one->candidates.size() == 10);
    }

    SECTION("too few test items is a skip signal") {
        env tiny(7, 4, 40);
        // craft a user with exactly 2 test items: 10 interactions -> 8/2
        dataset ds2;
        ds2.items = tiny.ds.items;
        for (int i = 0; i < 10; ++i)
            ds2.interactions_by_user["sparse"].push_back(
                {"sparse", "m" + std::to_string(i), 4.0, 1000 + i, ""});
        auto split2 = chronological_split(ds2, 0.8);
        auto stats2 = compute_item_stats(split2, ds2.items);
        CHECK_FALSE(build_discrimination_instance("sparse", split2, stats2, 3, 10, tiny.uniform.fn, 1));
    }

    SECTION("deterministic given the instance seed") {
        auto again = build_discrimination_instance(u, e.split, e.stats, 3, 10, e.uniform.fn, 42);
        REQUIRE(again.has_value());
        CHECK(again->to_json() == inst->to_json());
    }
}

TEST_CASE("ranking and rating instance construction") {
    env e;
    const user_id u = "user1";

    auto rank = build_ranking_instance(u, e.split, e.stats, 10, e.uniform.fn, 7);
    REQUIRE(rank.has_value());
    CHECK(rank->positives.size() == 1);
    CHECK(rank->candidates.size() == 10);

    auto rank6 = build_ranking_instance(u, e.split, e.stats, 6, e.uniform.fn, 8);
    REQUIRE(rank6.has_value());
    CHECK(rank6->candidates.size() == 6);

    auto rating = build_rating_instance(u, e.split, 10, 9);
    REQUIRE(rating.has_value());
    CHECK(rating->kind == task_family::rating);
    CHECK(rating->candidates.size() == std::min<std::size_t>(10, rating->truths.size()));
    for (const auto& c : rating->candidates) CHECK(rating->truths.count(c) == 1);

    SECTION("rating clamps to the available test items") {
        dataset ds2;
        ds2.items = e.ds.items;
        for (int i = 0; i < 20; ++i)
            ds2.interactions_by_user["u"].push_back({"u", "m" + std::to_string(i), 3.0, 1000 + i, ""});
        auto split2 = chronological_split(ds2, 0.8); // 16 train / 4 test
        auto r = build_rating_instance("u", split2, 10, 3);
        REQUIRE(r.has_value());
        CHECK(r->candidates.size() == 4);
    }
}

TEST_CASE("prompt rendering") {
    env e;
    const user_id u = "user2";
    auto inst = build_discrimination_instance(u, e.split, e.stats, 3, 10, e.uniform.fn, 5);
    REQUIRE(inst.has_value());

    auto profile = empty_profile(u);
    profile.traits.push_back({"zeta trait", trait_source::consolidated, trait_status::active, ""});
    profile.traits.push_back({"alpha trait", trait_source::consolidated, trait_status::active, ""});

    SECTION("mask soundness: a field label appears iff masked") {
        for (const auto& mask : standard_attribute_masks()) {
            auto masked = *inst;
            masked.attribute_mask = mask;
            auto req = render_agent_prompt(profile, masked, e.ds.items, e.stats);
            CHECK((req.user_message.find("title:") != std::string::npos) == bool(mask.count("title")));
            CHECK((req.user_message.find("genres:") != std::string::npos) == bool(mask.count("genre")));
            CHECK((req.user_message.find("rating:") != std::string::npos) == bool(mask.count("rating")));
            CHECK((req.user_message.find("popularity:") != std::string::npos) == bool(mask.count("popularity")));
        }
    }

    SECTION("popularity renders as a train interaction count") {
        auto masked = *inst;
        masked.attribute_mask = {"popularity"};
        auto req = render_agent_prompt(profile, masked, e.ds.items, e.stats);
        CHECK(req.user_message.find(" interactions") != std::string::npos);
        CHECK(req.user_message.find("title:") == std::string::npos);
    }

    SECTION("traits are sorted lexicographically") {
        auto req = render_agent_prompt(profile, *inst, e.ds.items, e.stats);
        auto alpha = req.system_message.find("alpha trait");
        auto zeta = req.system_message.find("zeta trait");
        REQUIRE(alpha != std::string::npos);
        REQUIRE(zeta != std::string::npos);
        CHECK(alpha < zeta);
    }

    SECTION("empty profile renders no trait section") {
        auto req = render_agent_prompt(empty_profile(u), *inst, e.ds.items, e.stats);
        CHECK(req.system_message.find("User traits") == std::string::npos);
    }

    SECTION("rendering is deterministic") {
        auto a = render_agent_prompt(profile, *inst, e.ds.items, e.stats);
        auto b = render_agent_prompt(profile, *inst, e.ds.items, e.stats);
        CHECK(a.system_message == b.system_message);
        CHECK(a.user_message == b.user_message);
        CHECK(cache_key(a) == cache_key(b));
    }

    SECTION("candidates appear in presentation order") {
        auto req = render_agent_prompt(profile, *inst, e.ds.items, e.stats);
        std::size_t prev = 0;
        for (const auto& id : inst->presentation) {
            auto pos = req.user_message.find("id=" + id + " ");
            if (pos == std::string::npos) pos = req.user_message.find("id=" + id + "\n");
            REQUIRE(pos != std::string::npos);
            CHECK(pos > prev);
            prev = pos;
        }
    }

    SECTION("policies render grouped by step in path order") {
        auto p = profile;
        p.path = heuristic_decision_path(task_family::discrimination);
        p.policies.push_back({p.traits[0], {"preference_match"}, {{"d", "x", "s"}}});
        p.policies.push_back({p.traits[1], {"hard_filter"}, {{"d", "x", "s"}}});
        auto req = render_agent_prompt(p, *inst, e.ds.items, e.stats);
        auto filter_pos = req.system_message.find("hard-filter");
        auto match_pos = req.system_message.find("preference-match");
        REQUIRE(filter_pos != std::string::npos);
        REQUIRE(match_pos != std::string::npos);
        CHECK(filter_pos < match_pos);
    }
}

TEST_CASE("run_task decision handling") {
    env e;
    const user_id u = "user3";

    SECTION("exact ranking permutation needs no repair") {
        auto inst = build_ranking_instance(u, e.split, e.stats, 10, e.uniform.fn, 21);
        REQUIRE(inst.has_value());
        nlohmann::json ids = inst->presentation;
        fn_executor exec([&](const prompt_request&) { return testsupport::canned(ids.dump()); });
        auto d = run_task(*inst, exec, e);
        CHECK(d.permutation == inst->presentation);
        CHECK_FALSE(d.repair_applied);
    }

    SECTION("omitted id is appended with the repair flag set") {
        auto inst = build_ranking_instance(u, e.split, e.stats, 10, e.uniform.fn, 22);
        REQUIRE(inst.has_value());
        auto partial = inst->presentation;
        partial.pop_back();
        nlohmann::json ids = partial;
        fn_executor exec([&](const prompt_request&) { return testsupport::canned(ids.dump()); });
        auto d = run_task(*inst, exec, e);
        CHECK(d.repair_applied);
        CHECK(d.permutation.size() == 10);
        CHECK(d.permutation.back() == inst->presentation.back());
    }

    SECTION("out-of-scale rating clamps with the repair flag set") {
        auto inst = build_rating_instance(u, e.split, 4, 23);
        REQUIRE(inst.has_value());
        nlohmann::json obj;
        for (const auto& id : inst->candidates) obj[id] = 6;
        fn_executor exec([&](const prompt_request&) { return testsupport::canned(obj.dump()); });
        auto d = run_task(*inst, exec, e);
        CHECK(d.repair_applied);
        for (const auto& [id, r] : d.ratings) CHECK(r == 5.0);
    }

    SECTION("selections outside the candidate set are dropped and flagged") {
        auto inst = build_discrimination_instance(u, e.split, e.stats, 3, 10, e.uniform.fn, 24);
        REQUIRE(inst.has_value());
        nlohmann::json arr = {*inst->positives.begin(), "bogus-item"};
        fn_executor exec([&](const prompt_request&) { return testsupport::canned(arr.dump()); });
        auto d = run_task(*inst, exec, e);
        CHECK(d.repair_applied);
        CHECK(d.selected == std::set<item_id>{*inst->positives.begin()});
    }

    SECTION("malformed output surfaces as a decision error, never dropped") {
        auto inst = build_ranking_instance(u, e.split, e.stats, 10, e.uniform.fn, 25);
        REQUIRE(inst.has_value());
        fn_executor exec([&](const prompt_request&) { return testsupport::canned("no ids here"); });
        CHECK_THROWS_AS(run_task(*inst, exec, e), malformed_output_error);
    }

    SECTION("decision log record carries enough to rescore offline") {
        auto inst = build_ranking_instance(u, e.split, e.stats, 10, e.uniform.fn, 26);
        REQUIRE(inst.has_value());
        nlohmann::json ids = inst->presentation;
        fn_executor exec([&](const prompt_request&) { return testsupport::canned(ids.dump()); });
        auto d = run_task(*inst, exec, e);
        auto rec = decision_log_record(*inst, d);
        CHECK(rec.at("user") == u);
        CHECK(rec.at("instance_digest") == inst->digest());
        CHECK(rec.at("decision").at("permutation").get<std::vector<item_id>>() == d.permutation);
    }
}
