#pragma once

#include <fstream>

#include "apg/profile.hpp"
#include "apg/sampling.hpp"
#include "apg/tasks.hpp"

namespace apg {

struct pipeline_config {
    task_family family = task_family::discrimination;
    std::size_t history_window = 15;
    std::size_t n_init = 3;
    stage1_diversify diversify = stage1_diversify::request_seed;
    bool skip_stage3 = false; // semantic-merge ablation switch
    path_mode path = path_mode::heuristic;
    double rating_delta = 0.5;
    perturb_mode perturb = perturb_mode::negate;
    std::size_t probes_per_step = 1;
    std::size_t probe_positives = 3; // clamped to the user's train size
    std::size_t probe_candidates = 10;
    llm_options llm;
    request_defaults agent_defaults;
    run_options agent_run;
    std::string config_digest;
    std::uint64_t user_seed = 0;
};

// The staged generator: recent window -> raw pool -> consolidated traits ->
// decision policies. Every stage error is rethrown carrying its stage label;
// all seeds land in provenance.
inline task_aligned_profile generate_profile(const user_id& user, const split_dataset& split,
                                             const item_stats& stats, const dataset& ds,
                                             const pipeline_config& cfg, executor& exec,
                                             const agent_runner* runner_override = nullptr) {
    auto train_it = split.train_by_user.find(user);
    if (train_it == split.train_by_user.end() || train_it->second.empty())
        throw error(errc::insufficient_history, "no train interactions for user " + user);

    const std::uint64_t stage1_seed = derive_seed(cfg.user_seed, "stage1");
    const std::uint64_t context_seed = derive_seed(cfg.user_seed, "context");

    task_aligned_profile profile;
    profile.meta.user = user;
    profile.provenance.config_digest = cfg.config_digest;
    profile.provenance.seeds["user"] = cfg.user_seed;
    profile.provenance.seeds["stage1"] = stage1_seed;
    profile.provenance.seeds["context"] = context_seed;

    auto window = recent_window(train_it->second, cfg.history_window);
    auto pool = extract_raw_attributes(window, ds.items, exec, cfg.n_init, stage1_seed, cfg.llm, cfg.diversify);
    auto ctx = build_context(split, ds, cfg.family, user, context_seed);
    auto consolidated = consolidate(pool, ctx, exec, cfg.llm);

    if (cfg.skip_stage3) {
        profile.generator = generator_kind::semantic_merge;
        profile.traits = consolidated.traits;
        validate_profile(profile);
        return profile;
    }

    profile.generator = generator_kind::apg4recsim;
    profile.traits = consolidated.traits;
    profile.path = instantiate_decision_path(cfg.family, cfg.path, &exec, &ctx, cfg.llm);

    // one designated probe set per decision step, positives from train only
    auto uniform = make_sampler(sampler_spec::uniform());
    std::vector<probe_instance> probes;
    std::size_t train_items = detail::distinct_portion_items(train_it->second).size();
    std::size_t p_eff = std::min(cfg.probe_positives, std::max<std::size_t>(1, train_items));
    for (const auto& step : profile.path.steps) {
        for (std::size_t i = 0; i < cfg.probes_per_step; ++i) {
            auto seed = derive_seed(cfg.user_seed, "probe:" + step.id, i);
            auto inst = build_probe_instance(cfg.family, user, split, stats, p_eff, cfg.probe_candidates,
                                             uniform.fn, seed);
            if (inst) probes.push_back({std::move(*inst), step.id});
        }
    }
    if (probes.empty())
        throw error(errc::data, "stage3: no usable probe instances for user " + user);

    agent_runner default_runner = [&](const task_aligned_profile& p, const task_instance& inst) {
        return run_task(p, inst, ds.items, stats, exec, cfg.agent_defaults, cfg.agent_run);
    };
    const agent_runner& runner = runner_override ? *runner_override : default_runner;

    counterfactual_options cf_opts;
    cf_opts.rating_delta = cfg.rating_delta;
    cf_opts.mode = cfg.perturb;
    cf_opts.llm = cfg.llm;
    auto outcome = counterfactual_map(profile, probes, runner, exec, cf_opts);

    // keep the consolidated order: bound or perturbation-skipped traits stay
    // active, the rest demote to background
    std::set<std::string> bound, skipped;
    for (const auto& t : outcome.bound) bound.insert(t.text);
    for (const auto& t : outcome.skipped_traits) skipped.insert(t);
    std::vector<trait_descriptor> active;
    for (const auto& t : consolidated.traits)
        if (bound.count(t.text) || skipped.count(t.text)) active.push_back(t);
    profile.traits = std::move(active);
    profile.background_traits = outcome.background;
    profile.policies = outcome.policies;

    validate_profile(profile);
    return profile;
}

// --- Profile store -----------------------------------------------------------
// Newline-delimited: one header record, then one serialized profile per line.

struct profile_store {
    std::string config_digest;
    std::string prompt_version = std::string(prompts::kVersion);
    std::map<user_id, task_aligned_profile> profiles;
};

inline void save_profile_store(const std::string& path, const profile_store& store) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw error(errc::io, "cannot write profile store: " + path);
    nlohmann::json header{{"kind", "profile_store_header"},
                          {"config_digest", store.config_digest},
                          {"prompt_version", store.prompt_version}};
    out << header.dump() << '\n';
    for (const auto& [user, profile] : store.profiles) out << profile_to_json(profile).dump() << '\n';
}

inline profile_store load_profile_store(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw error(errc::io, "cannot open profile store: " + path);
    profile_store store;
    std::string line;
    bool saw_header = false;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded())
            throw error(errc::parse, "profile store " + path + " line " + std::to_string(line_no) +
                                         ": invalid JSON");
        if (!saw_header) {
            if (j.value("kind", "") != "profile_store_header")
                throw error(errc::parse, "profile store " + path + ": missing header record");
            store.config_digest = j.at("config_digest").get<std::string>();
            store.prompt_version = j.at("prompt_version").get<std::string>();
            saw_header = true;
            continue;
        }
        auto profile = profile_from_json(j);
        store.profiles[profile.meta.user] = std::move(profile);
    }
    if (!saw_header) throw error(errc::parse, "profile store " + path + ": empty file");
    return store;
}

} // namespace apg
