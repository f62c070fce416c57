#pragma once

#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "apg/core.hpp"
#include "apg/dataset.hpp"
#include "apg/gateway.hpp"
#include "apg/prompts.hpp"
#include "apg/rng.hpp"
#include "apg/task_types.hpp"

namespace apg {

// --- Profile domain types -----------------------------------------------------

enum class trait_source { extracted, consolidated, baseline };
enum class trait_status { active, background };

struct trait_descriptor {
    std::string text;
    trait_source source = trait_source::extracted;
    trait_status status = trait_status::active;
    std::string rationale; // taste/rationale baseline pairs

    friend bool operator==(const trait_descriptor&, const trait_descriptor&) = default;
};

struct raw_attribute_pool {
    std::vector<std::vector<std::string>> pools; // one per initialisation
    std::vector<std::string> union_traits;       // case-folded exact-string union
};

struct generation_context {
    std::string dataset_info; // schema and admissible metadata fields
    std::string task_desc;    // task family and granularity
    std::string exemplar;     // one rendered instance with its expected output
};

struct decision_step {
    std::string id;
    std::string name;
    std::string description;

    friend bool operator==(const decision_step&, const decision_step&) = default;
};

enum class path_origin { heuristic_template, llm_generated };

struct decision_path {
    task_family family = task_family::discrimination;
    std::vector<decision_step> steps;
    path_origin origin = path_origin::heuristic_template;

    bool empty() const { return steps.empty(); }
    friend bool operator==(const decision_path&, const decision_path&) = default;
};

struct counterfactual_evidence {
    std::string instance_digest;
    std::string perturbed_text;
    std::string change_summary;
};

struct policy_binding {
    trait_descriptor trait;
    std::set<std::string> step_ids;
    std::vector<counterfactual_evidence> evidence; // nonempty for every binding
};

enum class generator_kind { apg4recsim, semantic_merge, recent_interaction, recagent_style, agent4rec_style, empty };

inline std::string to_string(generator_kind g) {
    switch (g) {
    case generator_kind::apg4recsim: return "apg4recsim";
    case generator_kind::semantic_merge: return "semantic_merge";
    case generator_kind::recent_interaction: return "recent_interaction";
    case generator_kind::recagent_style: return "recagent_style";
    case generator_kind::agent4rec_style: return "agent4rec_style";
    case generator_kind::empty: return "empty";
    }
    return "?";
}

inline generator_kind generator_kind_from_string(std::string_view s) {
    for (auto g : {generator_kind::apg4recsim, generator_kind::semantic_merge, generator_kind::recent_interaction,
                   generator_kind::recagent_style, generator_kind::agent4rec_style, generator_kind::empty})
        if (to_string(g) == s) return g;
    throw error(errc::config, "unknown generator: " + std::string(s));
}

struct profile_meta {
    user_id user;
    std::map<std::string, std::string> tags; // non-demographic only
};

struct provenance_info {
    std::string config_digest;
    std::map<std::string, std::uint64_t> seeds;
    std::string prompt_version = std::string(prompts::kVersion);
};

struct task_aligned_profile {
    profile_meta meta;
    std::vector<trait_descriptor> traits;            // active (A_dom)
    std::vector<trait_descriptor> background_traits; // demoted, never deleted
    decision_path path;                              // empty when no policy stage ran
    std::vector<policy_binding> policies;
    generator_kind generator = generator_kind::empty;
    std::vector<item_id> context_items; // raw recent items for the interaction baseline
    provenance_info provenance;
};

inline const std::set<std::string>& banned_demographic_keys() {
    static const std::set<std::string> keys{"gender", "age", "location", "occupation"};
    return keys;
}

inline void validate_profile(const task_aligned_profile& p) {
    for (const auto& [key, value] : p.meta.tags)
        if (banned_demographic_keys().count(to_lower(key)))
            throw error(errc::validation, "profile carries banned demographic attribute key: " + key);
    std::set<std::string> step_ids;
    for (const auto& s : p.path.steps) {
        if (!step_ids.insert(s.id).second) throw error(errc::validation, "duplicate decision step id: " + s.id);
    }
    if (!p.path.steps.empty() && p.path.steps.size() > 6)
        throw error(errc::validation, "decision path exceeds 6 steps");
    std::set<std::string> active_texts;
    for (const auto& t : p.traits) active_texts.insert(to_lower(t.text));
    for (const auto& b : p.policies) {
        if (b.evidence.empty())
            throw error(errc::validation, "policy binding without evidence for trait: " + b.trait.text);
        if (b.step_ids.empty())
            throw error(errc::validation, "policy binding without steps for trait: " + b.trait.text);
        if (!active_texts.count(to_lower(b.trait.text)))
            throw error(errc::validation, "policy references non-active trait: " + b.trait.text);
        for (const auto& sid : b.step_ids)
            if (!step_ids.count(sid))
                throw error(errc::validation, "policy references unknown step id: " + sid);
    }
}

// --- Serialization ------------------------------------------------------------

namespace detail {

inline nlohmann::json trait_to_json(const trait_descriptor& t) {
    return {{"text", t.text},
            {"source", int(t.source)},
            {"status", t.status == trait_status::active ? "active" : "background"},
            {"rationale", t.rationale}};
}

inline trait_descriptor trait_from_json(const nlohmann::json& j) {
    trait_descriptor t;
    t.text = j.at("text").get<std::string>();
    t.source = trait_source(j.at("source").get<int>());
    t.status = j.at("status").get<std::string>() == "active" ? trait_status::active : trait_status::background;
    t.rationale = j.at("rationale").get<std::string>();
    return t;
}

} // namespace detail

inline nlohmann::json profile_to_json(const task_aligned_profile& p) {
    nlohmann::json traits = nlohmann::json::array(), background = nlohmann::json::array();
    for (const auto& t : p.traits) traits.push_back(detail::trait_to_json(t));
    for (const auto& t : p.background_traits) background.push_back(detail::trait_to_json(t));
    nlohmann::json steps = nlohmann::json::array();
    for (const auto& s : p.path.steps)
        steps.push_back({{"id", s.id}, {"name", s.name}, {"description", s.description}});
    nlohmann::json policies = nlohmann::json::array();
    for (const auto& b : p.policies) {
        nlohmann::json evidence = nlohmann::json::array();
        for (const auto& e : b.evidence)
            evidence.push_back({{"instance_digest", e.instance_digest},
                                {"perturbed_text", e.perturbed_text},
                                {"change_summary", e.change_summary}});
        policies.push_back({{"trait", detail::trait_to_json(b.trait)},
                            {"step_ids", b.step_ids},
                            {"evidence", evidence}});
    }
    return {{"user", p.meta.user},
            {"tags", p.meta.tags},
            {"traits", traits},
            {"background_traits", background},
            {"path",
             {{"family", to_string(p.path.family)},
              {"steps", steps},
              {"origin", p.path.origin == path_origin::heuristic_template ? "heuristic_template" : "llm_generated"}}},
            {"policies", policies},
            {"generator", to_string(p.generator)},
            {"context_items", p.context_items},
            {"provenance",
             {{"config_digest", p.provenance.config_digest},
              {"seeds", p.provenance.seeds},
              {"prompt_version", p.provenance.prompt_version}}}};
}

inline task_aligned_profile profile_from_json(const nlohmann::json& j) {
    task_aligned_profile p;
    p.meta.user = j.at("user").get<user_id>();
    p.meta.tags = j.at("tags").get<std::map<std::string, std::string>>();
    for (const auto& t : j.at("traits")) p.traits.push_back(detail::trait_from_json(t));
    for (const auto& t : j.at("background_traits")) p.background_traits.push_back(detail::trait_from_json(t));
    const auto& path = j.at("path");
    p.path.family = task_family_from_string(path.at("family").get<std::string>());
    p.path.origin = path.at("origin").get<std::string>() == "llm_generated" ? path_origin::llm_generated
                                                                            : path_origin::heuristic_template;
    for (const auto& s : path.at("steps"))
        p.path.steps.push_back({s.at("id").get<std::string>(), s.at("name").get<std::string>(),
                                s.at("description").get<std::string>()});
    for (const auto& b : j.at("policies")) {
        policy_binding pb;
        pb.trait = detail::trait_from_json(b.at("trait"));
        pb.step_ids = b.at("step_ids").get<std::set<std::string>>();
        for (const auto& e : b.at("evidence"))
            pb.evidence.push_back({e.at("instance_digest").get<std::string>(),
                                   e.at("perturbed_text").get<std::string>(),
                                   e.at("change_summary").get<std::string>()});
        p.policies.push_back(std::move(pb));
    }
    p.generator = generator_kind_from_string(j.at("generator").get<std::string>());
    p.context_items = j.at("context_items").get<std::vector<item_id>>();
    p.provenance.config_digest = j.at("provenance").at("config_digest").get<std::string>();
    p.provenance.seeds = j.at("provenance").at("seeds").get<std::map<std::string, std::uint64_t>>();
    p.provenance.prompt_version = j.at("provenance").at("prompt_version").get<std::string>();
    return p;
}

// --- Shared LLM knobs -----------------------------------------------------------

struct llm_options {
    std::string model_id = "gpt-4o-mini";
    double temperature = 0.1;
    int max_tokens = 1024;
    int r_parse = 3;
};

namespace detail {

inline prompt_request make_prompt(const llm_options& llm, std::string tag, std::string system,
                                  std::string user, std::optional<std::uint64_t> seed = std::nullopt) {
    prompt_request req;
    req.model_id = llm.model_id;
    req.temperature = llm.temperature;
    req.max_tokens = llm.max_tokens;
    req.tag = std::move(tag);
    req.system_message = std::move(system);
    req.user_message = std::move(user);
    req.request_seed = seed;
    return req;
}

inline std::string render_history(const std::vector<interaction>& window,
                                  const std::map<item_id, item>& catalog) {
    std::ostringstream out;
    out << "Interaction history, oldest first:\n";
    for (const auto& ev : window) {
        auto it = catalog.find(ev.item);
        out << "- " << (it != catalog.end() ? it->second.title : "unknown:" + ev.item);
        if (it != catalog.end() && !it->second.genres.empty()) out << " [" << join(it->second.genres, ", ") << "]";
        out << " | user feedback " << ev.rating;
        if (!ev.review_text.empty()) out << " | review: " << ev.review_text;
        out << "\n";
    }
    return out.str();
}

inline std::string fold_trait(std::string_view text) { return to_lower(trim(text)); }

} // namespace detail

// --- Stage 1: initialisation and extraction -------------------------------------

// How the n extraction passes are kept distinct: by sampling seed alone, or by
// additionally rewording each pass's focus instruction.
enum class stage1_diversify { request_seed, prompt_paraphrase };

// n independent extraction passes over the same window, unioned with
// case-folded exact-string dedup. The pool deliberately over-covers; semantic
// cleanup is stage 2's job.
inline raw_attribute_pool extract_raw_attributes(const std::vector<interaction>& window,
                                                 const std::map<item_id, item>& catalog, executor& exec,
                                                 std::size_t n, std::uint64_t stage_seed,
                                                 const llm_options& llm = {},
                                                 stage1_diversify diversify = stage1_diversify::request_seed) {
    if (window.empty()) throw error(errc::insufficient_history, "stage1: empty interaction window");
    if (n < 1) throw error(errc::config, "stage1: n must be >= 1");

    static const char* kParaphraseAngles[] = {
        "Concentrate on content preferences: genres, topics, styles.",
        "Concentrate on quality and feedback patterns: which items score high or low and why.",
        "Concentrate on habits and context: cadence, variety, recurring situations.",
    };

    raw_attribute_pool pool;
    const std::string history = detail::render_history(window, catalog);
    for (std::size_t j = 0; j < n; ++j) {
        std::string user = history;
        if (diversify == stage1_diversify::prompt_paraphrase)
            user += "\n" + std::string(kParaphraseAngles[j % 3]);
        auto req = detail::make_prompt(llm, "stage1-extract", std::string(prompts::kStage1ExtractSystem),
                                       user, derive_seed(stage_seed, "request", j));
        response_schema schema;
        schema.kind = response_kind::trait_list;
        try {
            auto value = execute_structured(exec, req, schema, llm.r_parse);
            pool.pools.push_back(value.items);
        } catch (const error& e) {
            throw error(e.kind(), "stage1: extraction " + std::to_string(j + 1) + "/" +
                                      std::to_string(n) + " failed: " + e.what());
        }
    }
    std::set<std::string> seen;
    for (const auto& generation : pool.pools)
        for (const auto& trait : generation)
            if (seen.insert(detail::fold_trait(trait)).second) pool.union_traits.push_back(trait);
    return pool;
}

// --- Stage 2: context-aware consolidation ---------------------------------------

inline generation_context build_context(const split_dataset& split, const dataset& ds, task_family family,
                                        const user_id& user, std::uint64_t seed) {
    generation_context ctx;

    // dataset_info: schema fields, rating scale, a slice of the label vocabulary
    std::map<std::string, std::size_t> label_freq;
    std::set<std::string> extra_keys;
    for (const auto& [id, it] : ds.items) {
        for (const auto& g : it.genres) ++label_freq[g];
        for (const auto& [k, v] : it.extra) extra_keys.insert(k);
    }
    std::vector<std::pair<std::size_t, std::string>> by_freq;
    for (const auto& [label, freq] : label_freq) by_freq.emplace_back(freq, label);
    std::sort(by_freq.begin(), by_freq.end(), [](const auto& a, const auto& b) {
        return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    std::vector<std::string> labels;
    for (std::size_t i = 0; i < by_freq.size() && i < 30; ++i) labels.push_back(by_freq[i].second);

    std::ostringstream info;
    info << "Items carry these metadata fields: title; genre/category labels; user ratings on a "
         << ds.scale.first << "-" << ds.scale.second << " scale";
    if (!extra_keys.empty()) info << "; extra fields: " << join({extra_keys.begin(), extra_keys.end()}, ", ");
    info << ".";
    if (!labels.empty()) info << " Common category labels: " << join(labels, ", ") << ".";
    ctx.dataset_info = info.str();

    switch (family) {
    case task_family::discrimination:
        ctx.task_desc = "Task family: discrimination. The simulated user must pick, from a candidate list, "
                        "exactly the items they actually interacted with. Traits must be concrete enough to "
                        "accept or reject an individual item.";
        break;
    case task_family::ranking:
        ctx.task_desc = "Task family: ranking. The simulated user must order a candidate list from most to "
                        "least appealing. Traits must support fine-grained comparisons between items.";
        break;
    case task_family::rating:
        ctx.task_desc = "Task family: rating. The simulated user must score items on the dataset's rating "
                        "scale. Traits must indicate both direction and strength of preference.";
        break;
    }

    // exemplar: one deterministic instance rendered from the user's train portion
    auto train_it = split.train_by_user.find(user);
    if (train_it == split.train_by_user.end() || train_it->second.empty())
        throw error(errc::insufficient_history, "no train portion for user " + user);
    const auto& train = train_it->second;
    rng_stream rng(derive_seed(seed, "exemplar"));
    const interaction& chosen = train[rng.below(train.size())];
    auto chosen_item = ds.items.find(chosen.item);
    std::string chosen_title = chosen_item != ds.items.end() ? chosen_item->second.title : chosen.item;

    std::vector<item_id> fillers;
    for (const auto& [id, it] : ds.items)
        if (id != chosen.item) fillers.push_back(id);
    fillers = rng.sample_without_replacement(fillers, std::min<std::size_t>(fillers.size(), 4));

    std::ostringstream ex;
    switch (family) {
    case task_family::discrimination: {
        ex << "Example instance: among candidates {";
        std::vector<std::string> titles{chosen_title};
        for (const auto& f : fillers) titles.push_back(ds.items.at(f).title);
        std::sort(titles.begin(), titles.end());
        ex << join(titles, "; ") << "}, this user interacted with: " << chosen_title << ".";
        break;
    }
    case task_family::ranking: {
        ex << "Example instance: asked to rank {";
        std::vector<std::string> titles{chosen_title};
        for (const auto& f : fillers) titles.push_back(ds.items.at(f).title);
        std::sort(titles.begin(), titles.end());
        ex << join(titles, "; ") << "}, this user places " << chosen_title << " first.";
        break;
    }
    case task_family::rating:
        ex << "Example instance: asked to score " << chosen_title << ", this user gives " << chosen.rating
           << ".";
        break;
    }
    ctx.exemplar = ex.str();
    return ctx;
}

struct consolidation_result {
    std::vector<trait_descriptor> traits;
    std::size_t duplicates_collapsed = 0;
    double vocab_overlap = 0.0; // diagnostic only, logged not enforced
};

// One structured merge pass under the explicit context: dedup to canonical
// descriptors and reword into dataset-native vocabulary. Output may never
// exceed the pool it consolidates.
inline consolidation_result consolidate(const raw_attribute_pool& pool, const generation_context& ctx,
                                        executor& exec, const llm_options& llm = {}) {
    if (pool.union_traits.empty()) throw error(errc::data, "stage2: empty raw attribute pool");

    std::ostringstream user;
    user << "Candidate trait pool:\n";
    for (const auto& t : pool.union_traits) user << "- " << t << "\n";
    user << "\nDataset description: " << ctx.dataset_info << "\n" << ctx.task_desc << "\n" << ctx.exemplar
         << "\n\nConsolidate the pool into at most " << pool.union_traits.size() << " canonical traits.";

    auto req = detail::make_prompt(llm, "stage2-consolidate", std::string(prompts::kStage2ConsolidateSystem),
                                   user.str());
    response_schema schema;
    schema.kind = response_kind::trait_list;
    schema.min_items = 1;
    schema.max_items = pool.union_traits.size();

    structured_value value;
    try {
        value = execute_structured(exec, req, schema, llm.r_parse);
    } catch (const error& e) {
        throw error(e.kind(), std::string("stage2: consolidation failed: ") + e.what());
    }

    consolidation_result result;
    result.duplicates_collapsed = value.list_duplicates;
    for (const auto& text : value.items) {
        trait_descriptor t;
        t.text = text;
        t.source = trait_source::consolidated;
        t.status = trait_status::active;
        result.traits.push_back(std::move(t));
    }
    if (result.traits.empty()) throw error(errc::validation, "stage2: consolidation produced no traits");

    // vocabulary-overlap diagnostic against the context's dataset description
    auto info_words = content_words(ctx.dataset_info);
    std::set<std::string> info_set(info_words.begin(), info_words.end());
    std::size_t overlapping = 0, total = 0;
    for (const auto& t : result.traits)
        for (const auto& w : content_words(t.text)) {
            ++total;
            if (info_set.count(w)) ++overlapping;
        }
    result.vocab_overlap = total ? double(overlapping) / double(total) : 0.0;
    return result;
}

// --- Stage 3: decision path + counterfactual mapping -----------------------------

enum class path_mode { heuristic, llm };

inline decision_path heuristic_decision_path(task_family family) {
    decision_path path;
    path.family = family;
    path.origin = path_origin::heuristic_template;
    switch (family) {
    case task_family::discrimination:
        path.steps = {{"hard_filter", "hard-filter", "discard items the user would never pick"},
                      {"preference_match", "preference-match", "weigh remaining items against the user's traits"},
                      {"final_select", "final-select", "commit to the selected set"}};
        break;
    case task_family::ranking:
        path.steps = {{"hard_filter", "hard-filter", "push unacceptable items to the bottom"},
                      {"pairwise_tradeoff", "pairwise trade-off", "compare remaining items pair by pair"},
                      {"order", "order", "produce the final ordering"}};
        break;
    case task_family::rating:
        path.steps = {{"anchor_baseline", "anchor-baseline", "start from the user's typical rating level"},
                      {"trait_adjustment", "trait-adjustment", "adjust for traits the item triggers"},
                      {"final_rating", "final-rating", "commit to a score on the scale"}};
        break;
    }
    return path;
}

namespace detail {

inline std::string slugify(const std::string& name, std::set<std::string>& used) {
    std::string slug;
    for (char c : to_lower(name))
        slug += std::isalnum(static_cast<unsigned char>(c)) ? c : '_';
    while (!slug.empty() && slug.back() == '_') slug.pop_back();
    if (slug.empty()) slug = "step";
    std::string candidate = slug;
    int suffix = 2;
    while (!used.insert(candidate).second) candidate = slug + "_" + std::to_string(suffix++);
    return candidate;
}

} // namespace detail

// llm mode asks the model for 2-6 named steps conditioned on the task
// description and exemplar; a validation-exhausted request falls back to the
// heuristic template (visible via path.origin).
inline decision_path instantiate_decision_path(task_family family, path_mode mode, executor* exec = nullptr,
                                               const generation_context* ctx = nullptr,
                                               const llm_options& llm = {}) {
    if (mode == path_mode::heuristic) return heuristic_decision_path(family);
    if (!exec) throw error(errc::config, "llm path mode requires an executor");

    std::ostringstream user;
    user << (ctx ? ctx->task_desc : "Task family: " + to_string(family) + ".");
    if (ctx) user << "\n" << ctx->exemplar;

    auto req = detail::make_prompt(llm, "stage3-path", std::string(prompts::kDecisionPathSystem), user.str());
    response_schema schema;
    schema.kind = response_kind::decision_path;
    try {
        auto value = execute_structured(*exec, req, schema, llm.r_parse);
        decision_path path;
        path.family = family;
        path.origin = path_origin::llm_generated;
        std::set<std::string> used;
        for (const auto& s : value.object)
            path.steps.push_back({detail::slugify(s.at("name").get<std::string>(), used),
                                  s.at("name").get<std::string>(), s.value("description", "")});
        return path;
    } catch (const malformed_output_error&) {
        return heuristic_decision_path(family); // fallback, origin says heuristic
    }
}

enum class perturb_mode { negate, weaken };

// Minimal counterfactual edit of one trait. The variant must differ from the
// original and keep at least one content word, otherwise we re-prompt.
inline trait_descriptor perturb_trait(const trait_descriptor& trait, executor& exec, perturb_mode mode,
                                      const llm_options& llm = {}) {
    const auto original_words = content_words(trait.text);
    const std::string system = std::string(mode == perturb_mode::negate ? prompts::kPerturbNegateSystem
                                                                        : prompts::kPerturbWeakenSystem);
    const std::string base_user = "Trait: " + trait.text;

    std::string user = base_user;
    std::string last_reason = "no attempt";
    for (int attempt = 1; attempt <= llm.r_parse; ++attempt) {
        auto req = detail::make_prompt(llm, "stage3-perturb", system, user);
        auto resp = exec.execute(req);
        std::string text = std::string(trim(resp.text));
        if (!text.empty() && text.front() == '"' && text.back() == '"' && text.size() > 1)
            text = text.substr(1, text.size() - 2);

        if (detail::fold_trait(text) == detail::fold_trait(trait.text)) {
            last_reason = "perturbation identical to the original";
        } else if (text.empty()) {
            last_reason = "empty perturbation";
        } else {
            bool shares = false;
            auto words = content_words(text);
            for (const auto& w : words)
                if (std::find(original_words.begin(), original_words.end(), w) != original_words.end())
                    shares = true;
            if (shares || original_words.empty()) {
                trait_descriptor out = trait;
                out.text = text;
                return out;
            }
            last_reason = "perturbation shares no content word with the original";
        }
        user = base_user + "\n\n[Retry " + std::to_string(attempt) + "] The previous rewrite was invalid: " +
               last_reason + ". Keep the same subject and change only the stance.";
    }
    throw error(errc::validation, "stage3: perturbation failed for trait '" + trait.text + "': " + last_reason);
}

struct probe_instance {
    task_instance instance;
    std::string step_id; // the decision step this probe is designated to
};

using agent_runner = std::function<agent_decision(const task_aligned_profile&, const task_instance&)>;

struct counterfactual_options {
    double rating_delta = 0.5; // |Δrating| must exceed this to count as a change
    perturb_mode mode = perturb_mode::negate;
    llm_options llm;
};

struct counterfactual_outcome {
    std::vector<policy_binding> policies;
    std::vector<trait_descriptor> bound;          // traits that earned >= 1 binding
    std::vector<trait_descriptor> background;     // demoted: no triggered change anywhere
    std::vector<std::string> skipped_traits;      // perturbation failed; kept active, unbound
    std::size_t probe_failures = 0;
};

namespace detail {

inline bool decision_changed(const agent_decision& base, const agent_decision& variant, task_family kind,
                             double delta, std::string& summary) {
    switch (kind) {
    case task_family::discrimination:
        if (base.selected != variant.selected) {
            summary = "selection set changed (" + std::to_string(base.selected.size()) + " -> " +
                      std::to_string(variant.selected.size()) + " items)";
            return true;
        }
        return false;
    case task_family::ranking:
        if (base.permutation != variant.permutation) {
            summary = "ranking order changed";
            return true;
        }
        return false;
    case task_family::rating: {
        double max_delta = 0.0;
        item_id max_item;
        for (const auto& [id, r] : base.ratings) {
            auto it = variant.ratings.find(id);
            if (it == variant.ratings.end()) continue;
            double d = std::abs(it->second - r);
            if (d > max_delta) {
                max_delta = d;
                max_item = id;
            }
        }
        if (max_delta > delta) {
            summary = "rating of " + max_item + " moved by " + std::to_string(max_delta);
            return true;
        }
        return false;
    }
    }
    return false;
}

} // namespace detail

// For every active trait: build the counterfactual profile (that trait alone
// perturbed), replay the designated probes, and bind the trait to every step
// whose probe's change predicate fires. Traits that never fire are demoted to
// background rather than deleted.
inline counterfactual_outcome counterfactual_map(const task_aligned_profile& base_profile,
                                                 const std::vector<probe_instance>& probes,
                                                 const agent_runner& runner, executor& exec,
                                                 const counterfactual_options& opts = {}) {
    if (probes.empty()) throw error(errc::config, "stage3: at least one probe instance is required");

    counterfactual_outcome out;

    // baseline decisions, one per usable probe
    std::vector<std::pair<const probe_instance*, agent_decision>> baselines;
    for (const auto& probe : probes) {
        try {
            baselines.emplace_back(&probe, runner(base_profile, probe.instance));
        } catch (const error&) {
            ++out.probe_failures; // skipped and logged; the probe is unusable
        }
    }
    if (baselines.empty()) throw error(errc::data, "stage3: every probe instance failed to execute");

    for (const auto& trait : base_profile.traits) {
        trait_descriptor perturbed;
        try {
            perturbed = perturb_trait(trait, exec, opts.mode, opts.llm);
        } catch (const error&) {
            out.skipped_traits.push_back(trait.text); // kept active, just unbound
            continue;
        }

        task_aligned_profile variant = base_profile;
        for (auto& t : variant.traits)
            if (t.text == trait.text) t = perturbed;

        policy_binding binding;
        binding.trait = trait;
        for (const auto& [probe, base_decision] : baselines) {
            agent_decision cf;
            try {
                cf = runner(variant, probe->instance);
            } catch (const error&) {
                ++out.probe_failures;
                continue;
            }
            std::string summary;
            if (detail::decision_changed(base_decision, cf, probe->instance.kind, opts.rating_delta, summary)) {
                binding.step_ids.insert(probe->step_id);
                binding.evidence.push_back({probe->instance.digest(), perturbed.text, summary});
            }
        }

        if (!binding.step_ids.empty()) {
            out.bound.push_back(trait);
            out.policies.push_back(std::move(binding));
        } else {
            trait_descriptor demoted = trait;
            demoted.status = trait_status::background;
            out.background.push_back(std::move(demoted));
        }
    }
    return out;
}

// --- Baseline generators ----------------------------------------------------------

inline task_aligned_profile empty_profile(const user_id& user) {
    task_aligned_profile p;
    p.meta.user = user;
    p.generator = generator_kind::empty;
    return p;
}

inline task_aligned_profile baseline_recent_interaction(const user_id& user, const split_dataset& split,
                                                        std::size_t k) {
    auto it = split.train_by_user.find(user);
    if (it == split.train_by_user.end() || it->second.empty())
        throw error(errc::insufficient_history, "no train interactions for user " + user);
    task_aligned_profile p;
    p.meta.user = user;
    p.generator = generator_kind::recent_interaction;
    for (const auto& ev : recent_window(it->second, k)) p.context_items.push_back(ev.item);
    return p;
}

inline const std::vector<std::string>& recagent_roles() {
    static const std::vector<std::string> roles{"watcher", "explorer", "critic", "chatter", "poster"};
    return roles;
}

inline task_aligned_profile baseline_recagent_style(const user_id& user, const split_dataset& split,
                                                    const std::map<item_id, item>& catalog, executor& exec,
                                                    std::size_t window_k = 15, const llm_options& llm = {}) {
    auto it = split.train_by_user.find(user);
    if (it == split.train_by_user.end() || it->second.empty())
        throw error(errc::insufficient_history, "no train interactions for user " + user);

    auto req = detail::make_prompt(llm, "baseline-recagent", std::string(prompts::kRecAgentBaselineSystem),
                                   detail::render_history(recent_window(it->second, window_k), catalog));
    response_schema schema;
    schema.kind = response_kind::profile;
    schema.role_set = recagent_roles();
    auto value = execute_structured(exec, req, schema, llm.r_parse);

    task_aligned_profile p;
    p.meta.user = user;
    p.generator = generator_kind::recagent_style;
    p.meta.tags["role"] = value.object.at("role").get<std::string>();
    if (value.object.contains("personality") && value.object["personality"].is_string())
        p.meta.tags["personality"] = value.object["personality"].get<std::string>();
    if (value.object.contains("behaviour") && value.object["behaviour"].is_string())
        p.meta.tags["behaviour"] = value.object["behaviour"].get<std::string>();
    if (value.object.contains("interests") && value.object["interests"].is_array())
        for (const auto& i : value.object["interests"])
            if (i.is_string()) {
                trait_descriptor t;
                t.text = i.get<std::string>();
                t.source = trait_source::baseline;
                p.traits.push_back(std::move(t));
            }
    validate_profile(p);
    return p;
}

inline task_aligned_profile baseline_agent4rec_style(const user_id& user, const split_dataset& split,
                                                     const std::map<item_id, item>& catalog, executor& exec,
                                                     std::size_t window_k = 15, const llm_options& llm = {}) {
    auto it = split.train_by_user.find(user);
    if (it == split.train_by_user.end() || it->second.empty())
        throw error(errc::insufficient_history, "no train interactions for user " + user);

    const std::string history = detail::render_history(recent_window(it->second, window_k), catalog);
    std::string user_msg = history;
    std::vector<std::string> attempts;
    for (int attempt = 1; attempt <= llm.r_parse; ++attempt) {
        auto req = detail::make_prompt(llm, "baseline-agent4rec", std::string(prompts::kAgent4RecBaselineSystem),
                                       user_msg);
        auto resp = exec.execute(req);
        attempts.push_back(resp.text);
        auto j = detail::extract_json(resp.text, '[', ']');
        std::vector<std::pair<std::string, std::string>> pairs;
        bool ok = j && j->is_array();
        if (ok)
            for (const auto& e : *j) {
                if (!e.is_object() || !e.contains("taste") || !e.contains("rationale") ||
                    !e["taste"].is_string() || !e["rationale"].is_string() ||
                    trim(e["taste"].get<std::string>()).empty() ||
                    trim(e["rationale"].get<std::string>()).empty()) {
                    ok = false;
                    break;
                }
                pairs.emplace_back(e["taste"].get<std::string>(), e["rationale"].get<std::string>());
            }
        if (ok && !pairs.empty()) {
            task_aligned_profile p;
            p.meta.user = user;
            p.generator = generator_kind::agent4rec_style;
            for (auto& [taste, rationale] : pairs) {
                trait_descriptor t;
                t.text = taste;
                t.rationale = rationale;
                t.source = trait_source::baseline;
                p.traits.push_back(std::move(t));
            }
            validate_profile(p);
            return p;
        }
        user_msg = history + "\n\n[Retry " + std::to_string(attempt) +
                   "] The previous response was invalid: every entry needs non-empty \"taste\" and "
                   "\"rationale\" strings, and at least one pair is required.";
    }
    throw malformed_output_error("baseline-agent4rec produced no valid taste/rationale pairs", std::move(attempts));
}

} // namespace apg
