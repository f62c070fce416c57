// Acceptance suite: one line per criterion, nonzero exit on any failure.
// Each check is self-contained; reference kernels are reimplemented here,
// independent of the production code paths they verify.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <vector>

#include "apg/experiment.hpp"
#include "apg/live_backend.hpp"

using namespace apg;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(int criterion, bool pass, const std::string& what, const std::string& detail = "") {
    std::cout << "criterion " << criterion << ": " << (pass ? "PASS" : "FAIL") << " — " << what;
    if (!detail.empty()) std::cout << " (" << detail << ")";
    std::cout << "\n";
    if (!pass) ++g_failures;
}

void report_skip(int criterion, const std::string& what, const std::string& why) {
    std::cout << "criterion " << criterion << ": SKIP — " << what << " (" << why << ")\n";
}

double elapsed_s(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

// ---- independent reference kernels ------------------------------------------------

double ref_overlap(const std::set<item_id>& sel, const std::set<item_id>& pos) {
    int hit = 0;
    for (const auto& p : pos)
        if (sel.count(p)) ++hit;
    return double(hit) / double(pos.size());
}

double ref_ndcg(const std::vector<item_id>& perm, const item_id& positive, int k) {
    auto log2_of = [](double x) { return std::log(x) / std::log(2.0); };
    double dcg = 0.0, idcg = 0.0;
    for (std::size_t i = 0; i < perm.size() && i < std::size_t(k); ++i)
        if (perm[i] == positive) dcg += 1.0 / log2_of(double(i) + 2.0);
    idcg = 1.0 / log2_of(2.0);
    return dcg / idcg;
}

int ref_hit(const std::vector<item_id>& perm, const item_id& positive, int k) {
    for (int i = 0; i < int(perm.size()) && i < k; ++i)
        if (perm[i] == positive) return 1;
    return 0;
}

double ref_rmse(const std::map<item_id, double>& pred, const std::map<item_id, double>& truth) {
    double acc = 0.0;
    for (const auto& [id, t] : truth) acc += (pred.at(id) - t) * (pred.at(id) - t);
    return std::sqrt(acc / double(truth.size()));
}

double ref_jsd(const std::vector<double>& p, const std::vector<double>& q) {
    auto kl = [](const std::vector<double>& a, const std::vector<double>& b) {
        double acc = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i)
            if (a[i] > 0.0) acc += a[i] * std::log(a[i] / b[i]);
        return acc;
    };
    std::vector<double> m(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) m[i] = 0.5 * (p[i] + q[i]);
    return (0.5 * kl(p, m) + 0.5 * kl(q, m)) / std::log(2.0);
}

std::vector<double> random_simplex(rng_stream& rng, std::size_t n) {
    std::vector<double> v(n);
    double sum = 0.0;
    for (auto& x : v) {
        x = rng.next_double() + 1e-6;
        sum += x;
    }
    for (auto& x : v) x /= sum;
    return v;
}

// ---- shared fixtures ---------------------------------------------------------------

fs::path repo_root() {
    for (auto dir = fs::current_path(); !dir.empty() && dir != dir.parent_path(); dir = dir.parent_path())
        if (fs::exists(dir / "configs" / "synthetic_scripted.json")) return dir;
    throw std::runtime_error("repository root with configs/ not found");
}

fs::path fresh_dir(const std::string& name) {
    auto dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::map<std::string, std::string> snapshot_tree(const fs::path& root) {
    std::map<std::string, std::string> files;
    for (const auto& entry : fs::recursive_directory_iterator(root)) {
        if (!entry.is_regular_file()) continue;
        std::ifstream in(entry.path(), std::ios::binary);
        files[fs::relative(entry.path(), root).string()] =
            std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    }
    return files;
}

// ---- criteria ------------------------------------------------------------------------

void criterion_1_oracle_equivalence() {
    auto start = std::chrono::steady_clock::now();
    rng_stream rng(0xACC1);
    std::vector<item_id> catalog;
    for (int i = 0; i < 10; ++i) catalog.push_back("i" + std::to_string(i));

    std::size_t mismatches = 0;
    for (int t = 0; t < 1000; ++t) {
        std::size_t c = 2 + rng.below(9); // C <= 10
        auto perm = rng.sample_without_replacement(catalog, c);
        const item_id positive = perm[rng.below(perm.size())];
        int k = 1 + int(rng.below(10));
        if (std::abs(ndcg_at_k(perm, positive, k) - ref_ndcg(perm, positive, k)) > 1e-9) ++mismatches;
        if (hit_rate_at_k(perm, positive, k) != ref_hit(perm, positive, k)) ++mismatches;

        auto sel_v = rng.sample_without_replacement(catalog, 1 + rng.below(c));
        auto pos_v = rng.sample_without_replacement(catalog, 1 + rng.below(c));
        std::set<item_id> sel(sel_v.begin(), sel_v.end()), pos(pos_v.begin(), pos_v.end());
        if (std::abs(overlap_ratio(sel, pos) - ref_overlap(sel, pos)) > 1e-9) ++mismatches;

        std::map<item_id, double> pred, truth;
        std::size_t n = 1 + rng.below(10);
        for (std::size_t i = 0; i < n; ++i) {
            pred["r" + std::to_string(i)] = 1.0 + 4.0 * rng.next_double(); // 1-5 scale
            truth["r" + std::to_string(i)] = 1.0 + 4.0 * rng.next_double();
        }
        if (std::abs(rmse(pred, truth) - ref_rmse(pred, truth)) > 1e-9) ++mismatches;

        std::size_t dim = 2 + rng.below(7);
        auto p = random_simplex(rng, dim), q = random_simplex(rng, dim);
        if (std::abs(jsd(p, q) - ref_jsd(p, q)) > 1e-9) ++mismatches;
    }
    double secs = elapsed_s(start);
    report(1, mismatches == 0 && secs < 10.0,
           "five metric kernels match brute-force references on 1000 randomized instances each",
           "mismatches=" + std::to_string(mismatches) + ", " + std::to_string(secs) + "s");
}

void criterion_2_ndcg_closed_form() {
    std::size_t bad = 0;
    std::vector<item_id> base;
    for (int i = 0; i < 10; ++i) base.push_back("x" + std::to_string(i));
    for (int r = 1; r <= 10; ++r) {
        std::vector<item_id> perm = base;
        std::swap(perm[0], perm[r - 1]); // positive base[0] lands at rank r
        for (int k : {5, 10}) {
            double expected = r <= k ? 1.0 / std::log2(double(r) + 1.0) : 0.0;
            if (std::abs(ndcg_at_k(perm, base[0], k) - expected) > 1e-12) ++bad;
        }
    }
    report(2, bad == 0, "nDCG equals 1/log2(r+1)·[r<=k] for every rank r in 1..10, k in {5,10}",
           "violations=" + std::to_string(bad));
}

void criterion_3_jsd_boundary() {
    bool ok = true;
    std::string detail;
    rng_stream rng(0xACC3);
    if (jsd({0.3, 0.7}, {0.3, 0.7}) != 0.0) {
        ok = false;
        detail = "identical distributions not exactly 0";
    }
    if (std::abs(jsd({1.0, 0.0}, {0.0, 1.0}) - 1.0) > 1e-12) {
        ok = false;
        detail = "disjoint point masses not 1.0";
    }
    for (int t = 0; t < 1000 && ok; ++t) {
        std::size_t dim = 2 + rng.below(8);
        auto p = random_simplex(rng, dim), q = random_simplex(rng, dim);
        if (std::abs(jsd(p, q) - jsd(q, p)) > 1e-12) {
            ok = false;
            detail = "symmetry violated at trial " + std::to_string(t);
        }
    }
    report(3, ok, "JSD boundary values and symmetry on 1000 random vector pairs", detail);
}

void criterion_4_deterministic_end_to_end() {
    auto start = std::chrono::steady_clock::now();
    auto root = repo_root();
    auto out_a = fresh_dir("apg_acc4_a"), out_b = fresh_dir("apg_acc4_b");

    for (const auto& out : {out_a, out_b}) {
        auto cfg = experiment_config::from_file((root / "configs" / "synthetic_scripted.json").string());
        cfg.backend.scripted_table = (root / "configs" / "scripted_demo.json").string();
        cfg.generator.kinds = {"apg4recsim"};
        cfg.out_dir = out.string();
        cfg.refresh_digest();
        auto data = prepare_data(cfg);
        auto backend = make_backend(cfg);
        cmd_ingest(cfg);
        cmd_generate_profiles(cfg, data, *backend);
        auto store =
            load_profile_store((fs::path(cfg.out_dir) / "profiles" / "apg4recsim.jsonl").string());
        for (auto family : {task_family::discrimination, task_family::ranking, task_family::rating})
            cmd_eval(cfg, data, *backend, family, "apg4recsim", store);
        cmd_report(cfg.out_dir);
    }

    auto tree_a = snapshot_tree(out_a), tree_b = snapshot_tree(out_b);
    double secs = elapsed_s(start);
    bool identical = tree_a == tree_b && !tree_a.empty();
    report(4, identical && secs < 60.0,
           "full scripted pipeline on 20 synthetic users is byte-identical across two runs",
           std::to_string(tree_a.size()) + " files, " + std::to_string(secs) + "s");
}

// scripted counterfactual suite: flip / inert / sub-threshold traits
void criterion_5_counterfactual_suite() {
    auto ds = make_synthetic_dataset(40, 10, 80, 18, 28);
    auto split = chronological_split(ds, 0.8);
    auto stats = compute_item_stats(split, ds.items);
    auto uniform = make_sampler(sampler_spec::uniform());
    const user_id u = "user1";

    auto perturber = std::make_shared<scripted_executor>();
    perturber->add({"stage3-perturb", std::nullopt, "trait-A", "negated trait-A"});
    perturber->add({"stage3-perturb", std::nullopt, "trait-B", "negated trait-B"});

    auto has_negated = [](const task_aligned_profile& p, const std::string& needle) {
        for (const auto& t : p.traits)
            if (t.text.find("negated " + needle) != std::string::npos) return true;
        return false;
    };

    auto make_profile = [&](task_family family, std::vector<std::string> traits) {
        task_aligned_profile p;
        p.meta.user = u;
        p.generator = generator_kind::apg4recsim;
        p.path = heuristic_decision_path(family);
        for (const auto& t : traits) p.traits.push_back({t, trait_source::consolidated, trait_status::active, ""});
        return p;
    };

    int passed = 0, total = 0;
    auto run_case = [&](const std::string& name, bool expectation) {
        ++total;
        if (expectation)
            ++passed;
        else
            std::cout << "  counterfactual case failed: " << name << "\n";
    };

    // cases 1-3: discrimination flip bound to its designated step; inert demoted
    for (const auto& step : {"hard_filter", "preference_match", "final_select"}) {
        auto probe = build_probe_instance(task_family::discrimination, u, split, stats, 2, 8, uniform.fn,
                                          derive_seed(1, "case", step));
        agent_runner runner = [&](const task_aligned_profile& p, const task_instance& inst) {
            agent_decision d;
            d.kind = task_family::discrimination;
            d.selected = has_negated(p, "trait-A") ? std::set<item_id>{inst.presentation.back()}
                                                   : std::set<item_id>{inst.presentation.front()};
            return d;
        };
        auto base = make_profile(task_family::discrimination, {"trait-A", "trait-B"});
        auto outcome = counterfactual_map(base, {{*probe, step}}, runner, *perturber);
        bool ok = outcome.policies.size() == 1 && outcome.policies[0].trait.text == "trait-A" &&
                  outcome.policies[0].step_ids == std::set<std::string>{step} &&
                  outcome.background.size() == 1 && outcome.background[0].text == "trait-B" &&
                  outcome.background[0].status == trait_status::background;
        run_case(std::string("discrimination flip at ") + step, ok);
    }

    // case 4: ranking permutation flip binds
    {
        auto probe = build_probe_instance(task_family::ranking, u, split, stats, 1, 8, uniform.fn, 77);
        agent_runner runner = [&](const task_aligned_profile& p, const task_instance& inst) {
            agent_decision d;
            d.kind = task_family::ranking;
            d.permutation = inst.presentation;
            if (has_negated(p, "trait-A")) std::reverse(d.permutation.begin(), d.permutation.end());
            return d;
        };
        auto base = make_profile(task_family::ranking, {"trait-A"});
        auto outcome = counterfactual_map(base, {{*probe, "order"}}, runner, *perturber);
        run_case("ranking flip at order",
                 outcome.policies.size() == 1 && outcome.policies[0].step_ids.count("order") == 1);
    }

    // case 5: ranking inert trait demoted
    {
        auto probe = build_probe_instance(task_family::ranking, u, split, stats, 1, 8, uniform.fn, 78);
        agent_runner runner = [&](const task_aligned_profile&, const task_instance& inst) {
            agent_decision d;
            d.kind = task_family::ranking;
            d.permutation = inst.presentation;
            return d;
        };
        auto base = make_profile(task_family::ranking, {"trait-B"});
        auto outcome = counterfactual_map(base, {{*probe, "order"}}, runner, *perturber);
        run_case("ranking inert trait demoted",
                 outcome.policies.empty() && outcome.background.size() == 1);
    }

    // cases 6-8: rating deltas 1.0 (binds), 0.4 (below threshold), 0.6 (just above)
    {
        auto probe = build_probe_instance(task_family::rating, u, split, stats, 3, 6, uniform.fn, 79);
        for (auto [delta, should_bind] :
             {std::pair<double, bool>{1.0, true}, {0.4, false}, {0.6, true}}) {
            agent_runner runner = [&, delta = delta](const task_aligned_profile& p, const task_instance& inst) {
                agent_decision d;
                d.kind = task_family::rating;
                double base_rating = 3.0;
                for (const auto& id : inst.candidates)
                    d.ratings[id] = has_negated(p, "trait-A") ? base_rating + delta : base_rating;
                return d;
            };
            auto base = make_profile(task_family::rating, {"trait-A"});
            auto outcome = counterfactual_map(base, {{*probe, "trait_adjustment"}}, runner, *perturber);
            bool bound = outcome.policies.size() == 1;
            run_case("rating delta " + std::to_string(delta), bound == should_bind &&
                     (bound || outcome.background.size() == 1));
        }
    }

    // case 9: one trait can bind to two steps via two designated probes
    {
        auto p1 = build_probe_instance(task_family::discrimination, u, split, stats, 2, 8, uniform.fn, 80);
        auto p2 = build_probe_instance(task_family::discrimination, u, split, stats, 2, 8, uniform.fn, 81);
        agent_runner runner = [&](const task_aligned_profile& p, const task_instance& inst) {
            agent_decision d;
            d.kind = task_family::discrimination;
            d.selected = has_negated(p, "trait-A") ? std::set<item_id>{inst.presentation.back()}
                                                   : std::set<item_id>{inst.presentation.front()};
            return d;
        };
        auto base = make_profile(task_family::discrimination, {"trait-A"});
        auto outcome = counterfactual_map(
            base, {{*p1, "hard_filter"}, {*p2, "final_select"}}, runner, *perturber);
        run_case("one trait binds two designated steps",
                 outcome.policies.size() == 1 &&
                     outcome.policies[0].step_ids ==
                         std::set<std::string>{"hard_filter", "final_select"} &&
                     outcome.policies[0].evidence.size() == 2);
    }

    // case 10: evidence records replay back to the probe and perturbation
    {
        auto probe = build_probe_instance(task_family::discrimination, u, split, stats, 2, 8, uniform.fn, 82);
        agent_runner runner = [&](const task_aligned_profile& p, const task_instance& inst) {
            agent_decision d;
            d.kind = task_family::discrimination;
            d.selected = has_negated(p, "trait-A") ? std::set<item_id>{inst.presentation.back()}
                                                   : std::set<item_id>{inst.presentation.front()};
            return d;
        };
        auto base = make_profile(task_family::discrimination, {"trait-A"});
        auto outcome = counterfactual_map(base, {{*probe, "hard_filter"}}, runner, *perturber);
        bool ok = outcome.policies.size() == 1 && !outcome.policies[0].evidence.empty() &&
                  outcome.policies[0].evidence[0].instance_digest == probe->digest() &&
                  outcome.policies[0].evidence[0].perturbed_text == "negated trait-A" &&
                  !outcome.policies[0].evidence[0].change_summary.empty();
        run_case("evidence records are replayable", ok);
    }

    report(5, passed == total, "counterfactual mapping suite", std::to_string(passed) + "/" +
                                                                   std::to_string(total) + " cases");
}

void criterion_6_split_fidelity() {
    auto start = std::chrono::steady_clock::now();
    dataset ds;
    std::string source;

    std::vector<std::pair<std::string, std::string>> candidates;
    if (const char* env = std::getenv("ML1M_DIR"))
        candidates.push_back({std::string(env) + "/ratings.dat", std::string(env) + "/movies.dat"});
    candidates.push_back({"data/ml-1m/ratings.dat", "data/ml-1m/movies.dat"});
    candidates.push_back({(repo_root() / "data/ml-1m/ratings.dat").string(),
                          (repo_root() / "data/ml-1m/movies.dat").string()});
    for (const auto& [ratings, movies] : candidates)
        if (fs::exists(ratings) && fs::exists(movies)) {
            ds = parse_movielens(ratings, movies);
            source = "ML-1M";
            break;
        }
    if (source.empty()) {
        // tie-heavy synthetic fallback covering the same assertions
        rng_stream rng(0xACC6);
        for (std::size_t i = 0; i < 200; ++i) {
            item it;
            it.id = "i" + std::to_string(i);
            it.title = "t";
            ds.items[it.id] = it;
        }
        for (std::size_t u = 0; u < 3000; ++u) {
            user_id uid = "u" + std::to_string(u);
            std::size_t n = rng.below(40);
            for (std::size_t k = 0; k < n; ++k)
                ds.interactions_by_user[uid].push_back(
                    {uid, "i" + std::to_string(rng.below(200)), 1.0 + double(rng.below(5)),
                     std::int64_t(1000 + rng.below(12)), ""});
        }
        detail::sort_interactions(ds);
        source = "synthetic (3000 users, heavy timestamp ties)";
    }

    auto split = chronological_split(ds, 0.8);
    std::size_t violations = 0, checked = 0;
    for (const auto& [user, full] : ds.interactions_by_user) {
        if (full.size() < 2) continue;
        ++checked;
        const auto& train = split.train_by_user.at(user);
        const auto& test = split.test_by_user.at(user);
        std::size_t expected = std::max<std::size_t>(1, std::size_t(std::floor(0.8 * double(full.size()) + 1e-9)));
        if (train.size() != expected) ++violations;
        std::vector<interaction> joined = train;
        joined.insert(joined.end(), test.begin(), test.end());
        if (joined != full) ++violations; // prefix under the stable order
        if (train.back().timestamp > test.front().timestamp) ++violations;
    }
    double secs = elapsed_s(start);
    report(6, violations == 0 && secs < 30.0,
           "split fidelity over all users on " + source,
           std::to_string(checked) + " users, " + std::to_string(secs) + "s");
}

void criterion_7_debias_contract() {
    item_stats stats;
    rng_stream setup(0xACC7);
    std::vector<std::pair<std::size_t, item_id>> by_pop;
    for (std::size_t i = 0; i < 5000; ++i) {
        item_id id = "z" + std::to_string(i);
        auto pop = std::max<std::size_t>(1, std::size_t(std::floor(2000.0 / std::pow(double(i + 1), 1.1))));
        stats.popularity[id] = pop;
        stats.mean_rating[id] = 1.0 + 4.0 * setup.next_double();
        by_pop.emplace_back(pop, id);
    }
    std::sort(by_pop.begin(), by_pop.end());
    std::size_t group_start = 0;
    for (std::size_t i = 0; i < by_pop.size(); ++i) {
        if (i > 0 && by_pop[i].first != by_pop[i - 1].first) group_start = i;
        stats.popularity_quantile[by_pop[i].second] = double(group_start) / double(by_pop.size() - 1);
    }
    stats.global_mean_rating = 3.0;
    std::vector<item_id> universe;
    for (const auto& [id, pop] : stats.popularity) universe.push_back(id);

    sampler_spec spec = sampler_spec::debias();
    rng_stream rng(0xACC7F);
    std::size_t satisfied = 0;
    const int trials = 500;
    for (int t = 0; t < trials; ++t) {
        auto pv = rng.sample_without_replacement(universe, 3);
        std::set<item_id> positives(pv.begin(), pv.end());
        std::vector<item_id> neg_universe;
        for (const auto& id : universe)
            if (!positives.count(id)) neg_universe.push_back(id);
        auto result = debias_negatives(positives, neg_universe, stats, 7, spec, rng);
        if (!result.tolerance_met) continue;

        double tp = 0, tr = 0, mp = 0, mr = 0;
        for (const auto& id : pv) {
            tp += double(stats.popularity.at(id));
            tr += stats.mean_rating.at(id);
        }
        tp /= 3.0;
        tr /= 3.0;
        for (const auto& id : result.items) {
            mp += double(stats.popularity.at(id));
            mr += stats.mean_rating.at(id);
        }
        mp /= double(result.items.size());
        mr /= double(result.items.size());
        if (std::abs(mp - tp) <= 0.10 * tp + 1e-9 && std::abs(mr - tr) <= 0.25 + 1e-9) ++satisfied;
    }

    // adversarial tiny universe exercises the warning path
    item_stats tiny;
    tiny.popularity = {{"pop", 1000}, {"a", 1}, {"b", 2}};
    tiny.mean_rating = {{"pop", 5.0}, {"a", 1.0}, {"b", 1.1}};
    tiny.popularity_quantile = {{"pop", 1.0}, {"a", 0.0}, {"b", 0.5}};
    tiny.global_mean_rating = 2.0;
    rng_stream tiny_rng(5);
    bool warning_path = !debias_negatives({"pop"}, {"a", "b"}, tiny, 2, spec, tiny_rng).tolerance_met;

    report(7, satisfied >= std::size_t(trials * 0.95) && warning_path,
           "de-bias sampler meets both tolerances on a Zipf(1.1) universe",
           std::to_string(satisfied) + "/" + std::to_string(trials) + " trials, warning path " +
               (warning_path ? "exercised" : "NOT exercised"));
}

void criterion_8_attribute_grid() {
    auto plan = attribute_probe_config(standard_attribute_masks(),
                                       {sampler_kind::uniform, sampler_kind::debias});
    std::set<std::string> cells;
    for (const auto& cell : plan.cells)
        cells.insert(cell.mask_label() + "|" + cell.sampling_label() + "|" + std::to_string(cell.p) + ":" +
                     std::to_string(cell.c));

    std::set<std::string> expected;
    for (const auto& mask : {"title", "genre", "rating", "popularity", "genre+title",
                             "popularity+rating", "genre+popularity+rating+title"})
        for (const auto& sampling : {"random", "debias"})
            for (const auto& shape : {"3:10", "3:6"})
                expected.insert(std::string(mask) + "|" + sampling + "|" + shape);

    bool ok = plan.generator == generator_kind::empty && plan.cells.size() == 28 && cells == expected;
    report(8, ok, "attribute probe emits the 7-mask x {random,debias} x {3:10,3:6} grid with empty profiles",
           std::to_string(plan.cells.size()) + " cells");
}

void criterion_9_degenerate_rating() {
    // ten items, ground truths uniform over {1..5}, agent always answers 4
    dataset ds;
    task_instance inst;
    inst.kind = task_family::rating;
    inst.user = "u";
    for (int i = 0; i < 10; ++i) {
        item_id id = "r" + std::to_string(i);
        item it;
        it.id = id;
        it.title = "Item " + std::to_string(i);
        ds.items[id] = it;
        inst.candidates.push_back(id);
        inst.positives.insert(id);
        inst.truths[id] = double(1 + i / 2); // 1,1,2,2,3,3,4,4,5,5
    }
    inst.presentation = inst.candidates;
    item_stats stats = compute_item_stats(split_dataset{}, ds.items);

    scripted_executor exec;
    exec.add_tag_default("task-rating", "{{rating_map_json:4}}");
    auto decision = run_task(empty_profile("u"), inst, ds.items, stats, exec);

    double micro = rmse(decision.ratings, inst.truths);
    double macro = macro_rating_jsd(decision.ratings, inst.truths, {1.0, 5.0}, macro_jsd_mode::per_group);
    bool ok = std::abs(micro - std::sqrt(3.0)) <= 1e-9 && std::abs(macro - 0.8) <= 1e-9;
    report(9, ok, "constant-4 agent vs uniform truths: RMSE sqrt(3), per-group macro JSD 0.8",
           "rmse=" + std::to_string(micro) + ", macro=" + std::to_string(macro));
}

void criterion_10_replay_closure() {
    auto root = repo_root();
    auto out = fresh_dir("apg_acc10");
    auto cache = (out / "cache.jsonl").string();

    auto base_cfg = experiment_config::from_file((root / "configs" / "synthetic_scripted.json").string());
    base_cfg.backend.scripted_table = (root / "configs" / "scripted_demo.json").string();
    base_cfg.generator.kinds = {"apg4recsim"};
    base_cfg.runs = 2;
    base_cfg.user_limit = 10;

    // recorded run: scripted table stands in for the live endpoint
    auto cfg_rec = base_cfg;
    cfg_rec.out_dir = (out / "record").string();
    cfg_rec.refresh_digest();
    auto data = prepare_data(cfg_rec);
    std::size_t recorded_calls = 0;
    {
        auto inner = std::make_shared<scripted_executor>(
            scripted_executor::from_file(cfg_rec.backend.scripted_table));
        replay_executor recorder(cache, replay_mode::record, inner);
        cmd_generate_profiles(cfg_rec, data, recorder);
        auto store =
            load_profile_store((fs::path(cfg_rec.out_dir) / "profiles" / "apg4recsim.jsonl").string());
        cmd_eval(cfg_rec, data, recorder, task_family::discrimination, "apg4recsim", store);
        recorded_calls = recorder.live_calls();
    }

    // strict replay: no live executor exists, outputs must match byte for byte
    auto cfg_strict = base_cfg;
    cfg_strict.out_dir = (out / "strict").string();
    cfg_strict.refresh_digest();
    std::size_t strict_live_calls = 1;
    {
        replay_executor strict(cache, replay_mode::strict);
        cmd_generate_profiles(cfg_strict, data, strict);
        auto store =
            load_profile_store((fs::path(cfg_strict.out_dir) / "profiles" / "apg4recsim.jsonl").string());
        cmd_eval(cfg_strict, data, strict, task_family::discrimination, "apg4recsim", store);
        strict_live_calls = strict.live_calls();
    }

    bool identical = snapshot_tree(fs::path(cfg_rec.out_dir) / "reports") ==
                         snapshot_tree(fs::path(cfg_strict.out_dir) / "reports") &&
                     snapshot_tree(fs::path(cfg_rec.out_dir) / "profiles") ==
                         snapshot_tree(fs::path(cfg_strict.out_dir) / "profiles");
    report(10, identical && strict_live_calls == 0 && recorded_calls > 0,
           "recorded run replays strictly with zero live calls and identical outputs",
           std::to_string(recorded_calls) + " recorded calls");
}

void criterion_11_live_smoke() {
    const char* url = std::getenv("APG_LIVE_SMOKE_URL");
    const char* key = std::getenv("OPENAI_API_KEY");
    if (!url && !key) {
        report_skip(11, "live smoke test", "no APG_LIVE_SMOKE_URL or OPENAI_API_KEY in the environment");
        return;
    }
    try {
        auto root = repo_root();
        auto out = fresh_dir("apg_acc11");
        auto cfg = experiment_config::from_file((root / "configs" / "synthetic_scripted.json").string());
        cfg.backend.kind = "live";
        if (url) cfg.backend.base_url = url;
        if (const char* model = std::getenv("APG_LIVE_SMOKE_MODEL")) cfg.backend.model_id = model;
        cfg.generator.kinds = {"empty"};
        cfg.tasks.discrimination_p = {3};
        cfg.runs = 1;
        cfg.user_limit = 5;
        cfg.out_dir = out.string();
        cfg.refresh_digest();

        auto data = prepare_data(cfg);
        auto backend = make_backend(cfg);
        cmd_generate_profiles(cfg, data, *backend);
        auto store = load_profile_store((fs::path(cfg.out_dir) / "profiles" / "empty.jsonl").string());
        auto cells = cmd_eval(cfg, data, *backend, task_family::discrimination, "empty", store);
        std::size_t failures = cells.empty() ? 1 : cells.front().report.failure_count;
        std::size_t instances = cells.empty() ? 1 : cells.front().instances;
        bool ok = instances > 0 && double(failures) < 0.2 * double(instances);
        report(11, ok, "live discrimination 3:10 smoke over 5 users",
               std::to_string(failures) + "/" + std::to_string(instances) + " decision errors");
    } catch (const std::exception& e) {
        report(11, false, "live smoke test", e.what());
    }
}

} // namespace

int main() {
    try {
        criterion_1_oracle_equivalence();
        criterion_2_ndcg_closed_form();
        criterion_3_jsd_boundary();
        criterion_4_deterministic_end_to_end();
        criterion_5_counterfactual_suite();
        criterion_6_split_fidelity();
        criterion_7_debias_contract();
        criterion_8_attribute_grid();
        criterion_9_degenerate_rating();
        criterion_10_replay_closure();
        criterion_11_live_smoke();
    } catch (const std::exception& e) {
        std::cerr << "acceptance suite aborted: " << e.what() << "\n";
        return 1;
    }
    if (g_failures) {
        std::cout << g_failures << " criterion(s) FAILED\n";
        return 1;
    }
    std::cout << "all criteria passed\n";
    return 0;
}
