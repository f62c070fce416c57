#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include "apg/live_backend.hpp"
#include "apg/metrics.hpp"
#include "apg/pipeline.hpp"
#include "apg/sampling.hpp"
#include "apg/synthetic.hpp"
#include "apg/tasks.hpp"

namespace apg {

// --- Configuration -----------------------------------------------------------

struct dataset_spec {
    std::string name = "synthetic";
    std::string kind = "synthetic"; // movielens | amazon | canonical | synthetic
    std::string ratings_path, movies_path;       // movielens
    std::string reviews_path, metadata_path;     // amazon
    std::string items_path, interactions_path;   // canonical
    std::size_t synthetic_users = 20;
    std::size_t synthetic_items = 120;
    std::uint64_t synthetic_seed = 7;
    bool strict_parse = true;
    double split_ratio = 0.8;
    std::size_t min_user_interactions = 2; // users below this are excluded before splitting
};

struct backend_spec {
    std::string kind = "scripted"; // scripted | live | replay
    std::string model_id = "gpt-4o-mini";
    double temperature = 0.1;
    int max_tokens = 1024;
    int in_flight = 1;
    std::string scripted_table;       // scripted: table file (optional for replay)
    std::string cache_path;           // replay: cache file
    std::string mode = "record";      // replay: record | replay | strict
    std::string base_url = "https://api.openai.com";
    std::string api_key_env = "OPENAI_API_KEY";
    int transport_attempts = 3;
    int backoff_initial_ms = 250;
};

struct generator_spec {
    std::vector<std::string> kinds = {"apg4recsim"};
    std::size_t history_window = 15;
    std::size_t n_init = 3;
    double rating_delta = 0.5;
    std::string path_mode = "heuristic"; // heuristic | llm
    std::string perturb = "negate";      // negate | weaken
    std::size_t probes_per_step = 1;
    std::size_t probe_positives = 3;
    std::size_t probe_candidates = 10;
};

struct task_spec {
    std::vector<std::size_t> discrimination_p = {1, 3, 5};
    std::size_t candidate_count = 10;
    std::size_t rating_items = 10;
    std::string sampler = "uniform"; // uniform | debias
    std::set<std::string> attribute_mask = {"title", "genre"};
    std::size_t instances_per_user = 1;
    bool allow_repair = true;
    int r_parse = 3;
    std::vector<std::size_t> positions;                       // position probe; empty -> 1..C
    std::vector<std::string> popularity_strategies = {"uniform", "debias", "pop_head", "pop_tail"};
    std::vector<std::size_t> history_grid = {5, 10, 15, 20, 25};
};

struct experiment_config {
    dataset_spec dataset;
    backend_spec backend;
    generator_spec generator;
    task_spec tasks;
    std::size_t runs = 5;
    std::uint64_t root_seed = 1;
    std::string out_dir = "out";
    std::size_t user_limit = 0; // 0 = every eligible user
    double failure_ceiling = 0.20;
    std::string digest; // computed from the canonical json

    nlohmann::json to_json() const {
        return {{"dataset",
                 {{"name", dataset.name},
                  {"kind", dataset.kind},
                  {"ratings_path", dataset.ratings_path},
                  {"movies_path", dataset.movies_path},
                  {"reviews_path", dataset.reviews_path},
                  {"metadata_path", dataset.metadata_path},
                  {"items_path", dataset.items_path},
                  {"interactions_path", dataset.interactions_path},
                  {"synthetic_users", dataset.synthetic_users},
                  {"synthetic_items", dataset.synthetic_items},
                  {"synthetic_seed", dataset.synthetic_seed},
                  {"strict_parse", dataset.strict_parse},
                  {"split_ratio", dataset.split_ratio}}},
                {"backend",
                 {{"kind", backend.kind},
                  {"model_id", backend.model_id},
                  {"temperature", backend.temperature},
                  {"max_tokens", backend.max_tokens},
                  {"in_flight", backend.in_flight},
                  {"scripted_table", backend.scripted_table},
                  {"cache_path", backend.cache_path},
                  {"mode", backend.mode},
                  {"base_url", backend.base_url},
                  {"api_key_env", backend.api_key_env},
                  {"transport_attempts", backend.transport_attempts},
                  {"backoff_initial_ms", backend.backoff_initial_ms}}},
                {"generator",
                 {{"kinds", generator.kinds},
                  {"history_window", generator.history_window},
                  {"n_init", generator.n_init},
                  {"rating_delta", generator.rating_delta},
                  {"path_mode", generator.path_mode},
                  {"perturb", generator.perturb},
                  {"probes_per_step", generator.probes_per_step},
                  {"probe_positives", generator.probe_positives},
                  {"probe_candidates", generator.probe_candidates}}},
                {"tasks",
                 {{"discrimination_p", tasks.discrimination_p},
                  {"candidate_count", tasks.candidate_count},
                  {"rating_items", tasks.rating_items},
                  {"sampler", tasks.sampler},
                  {"attribute_mask", tasks.attribute_mask},
                  {"instances_per_user", tasks.instances_per_user},
                  {"allow_repair", tasks.allow_repair},
                  {"r_parse", tasks.r_parse},
                  {"positions", tasks.positions},
                  {"popularity_strategies", tasks.popularity_strategies},
                  {"history_grid", tasks.history_grid}}},
                {"runs", runs},
                {"root_seed", root_seed},
                {"out_dir", out_dir},
                {"user_limit", user_limit},
                {"failure_ceiling", failure_ceiling}};
    }

    static experiment_config from_json(const nlohmann::json& j) {
        experiment_config c;
        auto get = [](const nlohmann::json& obj, const char* key, auto fallback) {
            using T = decltype(fallback);
            return obj.contains(key) ? obj.at(key).get<T>() : fallback;
        };
        if (j.contains("dataset")) {
            const auto& d = j["dataset"];
            c.dataset.name = get(d, "name", c.dataset.name);
            c.dataset.kind = get(d, "kind", c.dataset.kind);
            c.dataset.ratings_path = get(d, "ratings_path", c.dataset.ratings_path);
            c.dataset.movies_path = get(d, "movies_path", c.dataset.movies_path);
            c.dataset.reviews_path = get(d, "reviews_path", c.dataset.reviews_path);
            c.dataset.metadata_path = get(d, "metadata_path", c.dataset.metadata_path);
            c.dataset.items_path = get(d, "items_path", c.dataset.items_path);
            c.dataset.interactions_path = get(d, "interactions_path", c.dataset.interactions_path);
            c.dataset.synthetic_users = get(d, "synthetic_users", c.dataset.synthetic_users);
            c.dataset.synthetic_items = get(d, "synthetic_items", c.dataset.synthetic_items);
            c.dataset.synthetic_seed = get(d, "synthetic_seed", c.dataset.synthetic_seed);
            c.dataset.strict_parse = get(d, "strict_parse", c.dataset.strict_parse);
            c.dataset.split_ratio = get(d, "split_ratio", c.dataset.split_ratio);
        }
        if (j.contains("backend")) {
            const auto& b = j["backend"];
            c.backend.kind = get(b, "kind", c.backend.kind);
            c.backend.model_id = get(b, "model_id", c.backend.model_id);
            c.backend.temperature = get(b, "temperature", c.backend.temperature);
            c.backend.max_tokens = get(b, "max_tokens", c.backend.max_tokens);
            c.backend.in_flight = get(b, "in_flight", c.backend.in_flight);
            c.backend.scripted_table = get(b, "scripted_table", c.backend.scripted_table);
            c.backend.cache_path = get(b, "cache_path", c.backend.cache_path);
            c.backend.mode = get(b, "mode", c.backend.mode);
            c.backend.base_url = get(b, "base_url", c.backend.base_url);
            c.backend.api_key_env = get(b, "api_key_env", c.backend.api_key_env);
            c.backend.transport_attempts = get(b, "transport_attempts", c.backend.transport_attempts);
            c.backend.backoff_initial_ms = get(b, "backoff_initial_ms", c.backend.backoff_initial_ms);
        }
        if (j.contains("generator")) {
            const auto& g = j["generator"];
            c.generator.kinds = get(g, "kinds", c.generator.kinds);
            c.generator.history_window = get(g, "history_window", c.generator.history_window);
            c.generator.n_init = get(g, "n_init", c.generator.n_init);
            c.generator.rating_delta = get(g, "rating_delta", c.generator.rating_delta);
            c.generator.path_mode = get(g, "path_mode", c.generator.path_mode);
            c.generator.perturb = get(g, "perturb", c.generator.perturb);
            c.generator.probes_per_step = get(g, "probes_per_step", c.generator.probes_per_step);
            c.generator.probe_positives = get(g, "probe_positives", c.generator.probe_positives);
            c.generator.probe_candidates = get(g, "probe_candidates", c.generator.probe_candidates);
        }
        if (j.contains("tasks")) {
            const auto& t = j["tasks"];
            c.tasks.discrimination_p = get(t, "discrimination_p", c.tasks.discrimination_p);
            c.tasks.candidate_count = get(t, "candidate_count", c.tasks.candidate_count);
            c.tasks.rating_items = get(t, "rating_items", c.tasks.rating_items);
            c.tasks.sampler = get(t, "sampler", c.tasks.sampler);
            c.tasks.attribute_mask = get(t, "attribute_mask", c.tasks.attribute_mask);
            c.tasks.instances_per_user = get(t, "instances_per_user", c.tasks.instances_per_user);
            c.tasks.allow_repair = get(t, "allow_repair", c.tasks.allow_repair);
            c.tasks.r_parse = get(t, "r_parse", c.tasks.r_parse);
            c.tasks.positions = get(t, "positions", c.tasks.positions);
            c.tasks.popularity_strategies = get(t, "popularity_strategies", c.tasks.popularity_strategies);
            c.tasks.history_grid = get(t, "history_grid", c.tasks.history_grid);
        }
        c.runs = get(j, "runs", c.runs);
        c.root_seed = get(j, "root_seed", c.root_seed);
        c.out_dir = get(j, "out_dir", c.out_dir);
        c.user_limit = get(j, "user_limit", c.user_limit);
        c.failure_ceiling = get(j, "failure_ceiling", c.failure_ceiling);
        if (c.runs < 1) throw error(errc::config, "runs must be >= 1");
        c.refresh_digest();
        return c;
    }

    static experiment_config from_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw error(errc::config, "cannot open config file: " + path);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const std::exception& e) {
            throw error(errc::config, "config " + path + ": " + e.what());
        }
        return from_json(j);
    }

    // The digest fingerprints the experiment definition; where the outputs
    // land on disk is not part of it.
    void refresh_digest() {
        auto j = to_json();
        j.erase("out_dir");
        digest = sha256_hex(j.dump());
    }
};

// --- Backend construction ------------------------------------------------------

inline std::shared_ptr<executor> make_backend(const experiment_config& cfg) {
    const auto& b = cfg.backend;
    if (b.kind == "scripted") {
        if (b.scripted_table.empty())
            throw error(errc::config, "scripted backend requires backend.scripted_table");
        return std::make_shared<scripted_executor>(scripted_executor::from_file(b.scripted_table));
    }
    if (b.kind == "live") {
        live_config lc;
        lc.base_url = b.base_url;
        lc.api_key_env = b.api_key_env;
        lc.transport_attempts = b.transport_attempts;
        lc.backoff_initial_ms = b.backoff_initial_ms;
        lc.in_flight_limit = b.in_flight;
        return std::make_shared<live_executor>(lc);
    }
    if (b.kind == "replay") {
        if (b.cache_path.empty()) throw error(errc::config, "replay backend requires backend.cache_path");
        replay_mode mode;
        if (b.mode == "record")
            mode = replay_mode::record;
        else if (b.mode == "replay")
            mode = replay_mode::replay;
        else if (b.mode == "strict")
            mode = replay_mode::strict;
        else
            throw error(errc::config, "unknown replay mode: " + b.mode);
        std::shared_ptr<executor> inner;
        if (mode != replay_mode::strict) {
            if (!b.scripted_table.empty())
                inner = std::make_shared<scripted_executor>(scripted_executor::from_file(b.scripted_table));
            else {
                live_config lc;
                lc.base_url = b.base_url;
                lc.api_key_env = b.api_key_env;
                lc.transport_attempts = b.transport_attempts;
                lc.backoff_initial_ms = b.backoff_initial_ms;
                lc.in_flight_limit = b.in_flight;
                inner = std::make_shared<live_executor>(lc);
            }
        }
        return std::make_shared<replay_executor>(b.cache_path, mode, inner);
    }
    throw error(errc::config, "unknown backend kind: " + b.kind);
}

// --- Data preparation ------------------------------------------------------------

struct experiment_data {
    dataset ds;
    split_dataset split;
    item_stats stats;
    std::vector<user_id> users; // eligible, sorted, user_limit applied
};

inline dataset load_source_dataset(const experiment_config& cfg) {
    const auto& d = cfg.dataset;
    parse_options opts{d.strict_parse};
    if (d.kind == "movielens") return parse_movielens(d.ratings_path, d.movies_path, opts);
    if (d.kind == "amazon") return parse_amazon_reviews(d.reviews_path, d.metadata_path, opts);
    if (d.kind == "canonical") {
        auto items_in = detail::open_or_throw(d.items_path);
        auto inter_in = detail::open_or_throw(d.interactions_path);
        return parse_canonical(items_in, inter_in);
    }
    if (d.kind == "synthetic")
        return make_synthetic_dataset(d.synthetic_seed, d.synthetic_users, d.synthetic_items, 15, 30);
    throw error(errc::config, "unknown dataset kind: " + d.kind);
}

inline experiment_data prepare_data(const experiment_config& cfg) {
    experiment_data data;
    data.ds = load_source_dataset(cfg);
    data.split = chronological_split(data.ds, cfg.dataset.split_ratio);
    data.stats = compute_item_stats(data.split, data.ds.items);
    for (const auto& [user, train] : data.split.train_by_user) data.users.push_back(user);
    if (cfg.user_limit > 0 && data.users.size() > cfg.user_limit) data.users.resize(cfg.user_limit);
    return data;
}

// --- Small helpers -----------------------------------------------------------------

namespace detail {

inline void ensure_dir(const std::filesystem::path& p) { std::filesystem::create_directories(p); }

inline void write_text(const std::filesystem::path& p, const std::string& content) {
    ensure_dir(p.parent_path());
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw error(errc::io, "cannot write " + p.string());
    out << content;
}

// index-sharded parallel map with deterministic result placement
template <typename Fn>
void parallel_for(std::size_t n, int workers, Fn&& fn) {
    if (workers <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    int spawn = std::min<std::size_t>(std::size_t(workers), n);
    for (int w = 0; w < spawn; ++w)
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) fn(i);
        });
    for (auto& t : pool) t.join();
}

} // namespace detail

// --- Report records -----------------------------------------------------------------

struct report_cell {
    std::string dataset;
    std::string task;     // discrimination | ranking | rating | probe name
    std::string generator;
    std::string metric;   // overlap_ratio | ndcg@5 | ... | rmse | macro_jsd_per_group | ...
    std::map<std::string, std::string> cell; // extra labels: p, position, strategy, mask, window...
    metric_report report;
    std::size_t instances = 0;
    std::size_t skips = 0;

    nlohmann::json to_json() const {
        return {{"dataset", dataset},
                {"task", task},
                {"generator", generator},
                {"metric", metric},
                {"cell", cell},
                {"per_run", report.per_run},
                {"mean", report.mean},
                {"stddev", report.stddev},
                {"n_runs", report.n_runs},
                {"failures", report.failure_count},
                {"instances", instances},
                {"skips", skips},
                {"config_digest", report.config_digest}};
    }

    static report_cell from_json(const nlohmann::json& j) {
        report_cell r;
        r.dataset = j.at("dataset").get<std::string>();
        r.task = j.at("task").get<std::string>();
        r.generator = j.at("generator").get<std::string>();
        r.metric = j.at("metric").get<std::string>();
        r.cell = j.at("cell").get<std::map<std::string, std::string>>();
        r.report.per_run = j.at("per_run").get<std::vector<double>>();
        r.report.mean = j.at("mean").get<double>();
        r.report.stddev = j.at("stddev").get<double>();
        r.report.n_runs = j.at("n_runs").get<std::size_t>();
        r.report.failure_count = j.at("failures").get<std::size_t>();
        r.report.config_digest = j.at("config_digest").get<std::string>();
        r.instances = j.at("instances").get<std::size_t>();
        r.skips = j.at("skips").get<std::size_t>();
        return r;
    }
};

inline void append_report_cells(const std::filesystem::path& path, const std::vector<report_cell>& cells) {
    detail::ensure_dir(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::app);
    if (!out) throw error(errc::io, "cannot write report file " + path.string());
    for (const auto& c : cells) out << c.to_json().dump() << '\n';
}

// --- ingest -----------------------------------------------------------------------

// Parses the configured dataset, persists the canonical files, the split
// manifest, the stats and the exclusion report. Idempotent: a matching
// content digest short-circuits the rewrite.
inline std::filesystem::path cmd_ingest(const experiment_config& cfg) {
    auto data_dir = std::filesystem::path(cfg.out_dir) / "ingest";
    auto ds = load_source_dataset(cfg); // parse before any write
    auto split = chronological_split(ds, cfg.dataset.split_ratio);
    auto stats = compute_item_stats(split, ds.items);

    std::ostringstream items_s, inter_s;
    serialize_canonical(ds, items_s, inter_s);
    std::string content_digest =
        sha256_hex(items_s.str() + inter_s.str() + std::to_string(cfg.dataset.split_ratio));

    auto digest_path = data_dir / "digest";
    if (std::filesystem::exists(digest_path)) {
        std::ifstream in(digest_path);
        std::string existing((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        if (std::string(trim(existing)) == content_digest) return data_dir; // no-op
    }

    detail::ensure_dir(data_dir);
    detail::write_text(data_dir / "items.jsonl", items_s.str());
    detail::write_text(data_dir / "interactions.jsonl", inter_s.str());

    auto portion_lines = [](const std::map<user_id, std::vector<interaction>>& by_user) {
        std::ostringstream out;
        for (const auto& [user, list] : by_user)
            for (const auto& ev : list) {
                nlohmann::json j{{"user_id", ev.user}, {"item_id", ev.item}, {"rating", ev.rating},
                                 {"timestamp", ev.timestamp}, {"review_text", ev.review_text}};
                out << j.dump() << '\n';
            }
        return out.str();
    };
    detail::write_text(data_dir / "train.jsonl", portion_lines(split.train_by_user));
    detail::write_text(data_dir / "test.jsonl", portion_lines(split.test_by_user));

    nlohmann::json exclusions{{"excluded_users", split.excluded_users},
                              {"split_ratio", split.split_ratio},
                              {"parse_warnings", ds.parse_warnings}};
    detail::write_text(data_dir / "exclusions.json", exclusions.dump(2) + "\n");

    nlohmann::json stats_json{{"popularity", stats.popularity},
                              {"mean_rating", stats.mean_rating},
                              {"popularity_quantile", stats.popularity_quantile},
                              {"flagged", stats.flagged},
                              {"global_mean_rating", stats.global_mean_rating}};
    detail::write_text(data_dir / "stats.json", stats_json.dump(2) + "\n");
    detail::write_text(data_dir / "digest", content_digest + "\n");
    return data_dir;
}

// --- profiles ------------------------------------------------------------------------

inline generator_kind parse_generator_kind(const std::string& s) { return generator_kind_from_string(s); }

inline pipeline_config pipeline_config_from(const experiment_config& cfg, const user_id& user,
                                            task_family family) {
    pipeline_config pc;
    pc.family = family;
    pc.history_window = cfg.generator.history_window;
    pc.n_init = cfg.generator.n_init;
    pc.rating_delta = cfg.generator.rating_delta;
    pc.path = cfg.generator.path_mode == "llm" ? path_mode::llm : path_mode::heuristic;
    pc.perturb = cfg.generator.perturb == "weaken" ? perturb_mode::weaken : perturb_mode::negate;
    pc.probes_per_step = cfg.generator.probes_per_step;
    pc.probe_positives = cfg.generator.probe_positives;
    pc.probe_candidates = cfg.generator.probe_candidates;
    pc.llm.model_id = cfg.backend.model_id;
    pc.llm.temperature = cfg.backend.temperature;
    pc.llm.max_tokens = cfg.backend.max_tokens;
    pc.llm.r_parse = cfg.tasks.r_parse;
    pc.agent_defaults = {cfg.backend.model_id, cfg.backend.temperature, cfg.backend.max_tokens};
    pc.agent_run.allow_repair = cfg.tasks.allow_repair;
    pc.agent_run.r_parse = cfg.tasks.r_parse;
    pc.config_digest = cfg.digest;
    pc.user_seed = derive_seed(cfg.root_seed, "profile-user", user);
    return pc;
}

struct profile_generation_summary {
    std::size_t generated = 0;
    std::size_t reused = 0;
    std::size_t failures = 0;
    std::vector<std::string> failure_log;
};

inline task_aligned_profile build_profile_for(const std::string& kind, const user_id& user,
                                              const experiment_data& data, const experiment_config& cfg,
                                              executor& exec, task_family family) {
    auto g = parse_generator_kind(kind);
    auto pc = pipeline_config_from(cfg, user, family);
    switch (g) {
    case generator_kind::apg4recsim:
        return generate_profile(user, data.split, data.stats, data.ds, pc, exec);
    case generator_kind::semantic_merge: {
        pc.skip_stage3 = true;
        return generate_profile(user, data.split, data.stats, data.ds, pc, exec);
    }
    case generator_kind::recent_interaction:
        return baseline_recent_interaction(user, data.split, cfg.generator.history_window);
    case generator_kind::recagent_style:
        return baseline_recagent_style(user, data.split, data.ds.items, exec, cfg.generator.history_window,
                                       pc.llm);
    case generator_kind::agent4rec_style:
        return baseline_agent4rec_style(user, data.split, data.ds.items, exec, cfg.generator.history_window,
                                        pc.llm);
    case generator_kind::empty:
        return empty_profile(user);
    }
    throw error(errc::config, "unknown generator: " + kind);
}

// One store per generator under <out>/profiles. Resumable: users already in a
// digest-matching store are reused; the run aborts only when the failure rate
// crosses the configured ceiling.
inline std::map<std::string, profile_generation_summary>
cmd_generate_profiles(const experiment_config& cfg, const experiment_data& data, executor& exec,
                      task_family family = task_family::discrimination) {
    auto dir = std::filesystem::path(cfg.out_dir) / "profiles";
    detail::ensure_dir(dir);
    std::map<std::string, profile_generation_summary> summaries;

    for (const auto& kind : cfg.generator.kinds) {
        auto path = dir / (kind + ".jsonl");
        profile_store store;
        store.config_digest = cfg.digest;
        if (std::filesystem::exists(path)) {
            auto existing = load_profile_store(path.string());
            if (existing.config_digest == cfg.digest && existing.prompt_version == prompts::kVersion)
                store = std::move(existing); // resume
        }

        auto& summary = summaries[kind];
        for (const auto& user : data.users) {
            if (store.profiles.count(user)) {
                ++summary.reused;
                continue;
            }
            try {
                store.profiles[user] = build_profile_for(kind, user, data, cfg, exec, family);
                ++summary.generated;
            } catch (const error& e) {
                ++summary.failures;
                summary.failure_log.push_back(user + ": " + e.what());
            }
            std::size_t processed = summary.generated + summary.reused + summary.failures;
            if (processed >= 5 && double(summary.failures) > cfg.failure_ceiling * double(processed))
                throw error(errc::backend, "profile generation aborted for " + kind + ": failure rate " +
                                               std::to_string(summary.failures) + "/" +
                                               std::to_string(processed) + " exceeds the ceiling");
        }
        save_profile_store(path.string(), store);
        if (!summary.failure_log.empty())
            detail::write_text(dir / (kind + ".errors.log"), join(summary.failure_log, "\n") + "\n");
    }
    return summaries;
}

// --- eval ------------------------------------------------------------------------------

namespace detail {

struct built_instance {
    task_instance instance;
    std::string cell_p; // discrimination p label, empty otherwise
};

struct run_outcome {
    std::map<std::string, std::vector<double>> values; // metric/cell key -> per-instance values
    std::map<item_id, double> rating_predictions;      // pooled across users
    std::map<item_id, double> rating_truths;
    std::size_t failures = 0;
    std::size_t skips = 0;
    std::size_t instances = 0;
    std::vector<nlohmann::json> decision_log;
};

} // namespace detail

// Executes one task family for one generator's profile store across all runs
// and aggregates into report cells; decision logs land next to the reports.
inline std::vector<report_cell> cmd_eval(const experiment_config& cfg, const experiment_data& data,
                                         executor& exec, task_family family, const std::string& generator,
                                         const profile_store& store) {
    auto handle = make_sampler(cfg.tasks.sampler == "debias" ? sampler_spec::debias()
                                                             : sampler_spec::uniform());
    const rating_scale scale = data.ds.scale;
    run_options ropts;
    ropts.allow_repair = cfg.tasks.allow_repair;
    ropts.r_parse = cfg.tasks.r_parse;
    ropts.scale = scale;
    request_defaults defaults{cfg.backend.model_id, cfg.backend.temperature, cfg.backend.max_tokens};

    std::map<std::string, std::vector<double>> per_run_values; // key -> one value per run
    std::size_t total_failures = 0, total_skips = 0, total_instances = 0;

    auto eval_dir = std::filesystem::path(cfg.out_dir) / "eval" / to_string(family);
    detail::ensure_dir(eval_dir);

    for (std::size_t run = 1; run <= cfg.runs; ++run) {
        std::uint64_t run_seed = derive_seed(cfg.root_seed, "run", run);
        detail::run_outcome outcome;

        // build every instance for this run up front (pure, sequential)
        std::vector<detail::built_instance> built;
        for (const auto& user : data.users) {
            if (!store.profiles.count(user)) continue;
            std::uint64_t user_seed = derive_seed(run_seed, "user", user);
            for (std::size_t i = 0; i < cfg.tasks.instances_per_user; ++i) {
                switch (family) {
                case task_family::discrimination:
                    for (auto p : cfg.tasks.discrimination_p) {
                        auto seed = derive_seed(user_seed, "instance:p" + std::to_string(p), i);
                        auto inst = build_discrimination_instance(user, data.split, data.stats, p,
                                                                  cfg.tasks.candidate_count, handle.fn, seed);
                        if (!inst) {
                            ++outcome.skips;
                            continue;
                        }
                        inst->attribute_mask = cfg.tasks.attribute_mask;
                        built.push_back({std::move(*inst), std::to_string(p)});
                    }
                    break;
                case task_family::ranking: {
                    auto seed = derive_seed(user_seed, "instance", i);
                    auto inst = build_ranking_instance(user, data.split, data.stats,
                                                       cfg.tasks.candidate_count, handle.fn, seed);
                    if (!inst) {
                        ++outcome.skips;
                        break;
                    }
                    inst->attribute_mask = cfg.tasks.attribute_mask;
                    built.push_back({std::move(*inst), ""});
                    break;
                }
                case task_family::rating: {
                    auto seed = derive_seed(user_seed, "instance", i);
                    auto inst = build_rating_instance(user, data.split, cfg.tasks.rating_items, seed);
                    if (!inst) {
                        ++outcome.skips;
                        break;
                    }
                    inst->attribute_mask = cfg.tasks.attribute_mask;
                    built.push_back({std::move(*inst), ""});
                    break;
                }
                }
            }
        }
        outcome.instances = built.size();

        // execute, fanning out to the backend's in-flight limit
        std::vector<std::optional<agent_decision>> decisions(built.size());
        std::vector<std::string> errors(built.size());
        detail::parallel_for(built.size(), cfg.backend.in_flight, [&](std::size_t i) {
            try {
                decisions[i] = run_task(store.profiles.at(built[i].instance.user), built[i].instance,
                                        data.ds.items, data.stats, exec, defaults, ropts);
            } catch (const error& e) {
                errors[i] = e.what();
            }
        });

        // score in deterministic (user, instance) order
        for (std::size_t i = 0; i < built.size(); ++i) {
            const auto& inst = built[i].instance;
            if (!decisions[i]) {
                ++outcome.failures;
                outcome.decision_log.push_back({{"user", inst.user},
                                                {"instance_digest", inst.digest()},
                                                {"kind", to_string(inst.kind)},
                                                {"error", errors[i]}});
                continue;
            }
            const auto& d = *decisions[i];
            outcome.decision_log.push_back(decision_log_record(inst, d));
            switch (family) {
            case task_family::discrimination:
                outcome.values["overlap_ratio|p=" + built[i].cell_p].push_back(
                    overlap_ratio(d.selected, inst.positives));
                break;
            case task_family::ranking: {
                const item_id& positive = *inst.positives.begin();
                outcome.values["ndcg@5|"].push_back(ndcg_at_k(d.permutation, positive, 5));
                outcome.values["ndcg@10|"].push_back(ndcg_at_k(d.permutation, positive, 10));
                outcome.values["hr@3|"].push_back(double(hit_rate_at_k(d.permutation, positive, 3)));
                break;
            }
            case task_family::rating:
                for (const auto& [id, truth] : inst.truths) {
                    // pooled micro/macro evaluation keys are instance-scoped
                    auto key = inst.digest().substr(0, 12) + ":" + id;
                    outcome.rating_predictions[key] = d.ratings.at(id);
                    outcome.rating_truths[key] = truth;
                }
                break;
            }
        }

        if (family == task_family::rating && !outcome.rating_truths.empty()) {
            outcome.values["rmse|"].push_back(rmse(outcome.rating_predictions, outcome.rating_truths));
            outcome.values["macro_jsd_per_group|"].push_back(macro_rating_jsd(
                outcome.rating_predictions, outcome.rating_truths, scale, macro_jsd_mode::per_group));
            outcome.values["macro_jsd_global|"].push_back(macro_rating_jsd(
                outcome.rating_predictions, outcome.rating_truths, scale, macro_jsd_mode::global));
        }

        // instance means per run; the rating kernels pushed one pooled value
        for (auto& [key, vals] : outcome.values) {
            double sum = 0.0;
            for (double v : vals) sum += v;
            per_run_values[key].push_back(vals.empty() ? 0.0 : sum / double(vals.size()));
        }

        total_failures += outcome.failures;
        total_skips += outcome.skips;
        total_instances += outcome.instances;

        std::ostringstream log;
        for (const auto& rec : outcome.decision_log) log << rec.dump() << '\n';
        detail::write_text(eval_dir / (generator + "_run" + std::to_string(run) + ".decisions.jsonl"),
                           log.str());
    }

    std::vector<report_cell> cells;
    for (const auto& [key, values] : per_run_values) {
        auto parts = split(key, "|");
        report_cell cell;
        cell.dataset = cfg.dataset.name;
        cell.task = to_string(family);
        cell.generator = generator;
        cell.metric = parts[0];
        if (parts.size() > 1 && !parts[1].empty()) {
            auto kv = split(parts[1], "=");
            cell.cell[kv[0]] = kv.size() > 1 ? kv[1] : "";
        }
        cell.report = aggregate_runs(values);
        cell.report.name = cell.metric;
        cell.report.config_digest = cfg.digest;
        cell.report.failure_count = total_failures;
        cell.instances = total_instances;
        cell.skips = total_skips;
        cells.push_back(std::move(cell));
    }
    append_report_cells(std::filesystem::path(cfg.out_dir) / "reports" /
                            (to_string(family) + "_" + generator + ".jsonl"),
                        cells);
    return cells;
}

// --- probes --------------------------------------------------------------------------

enum class probe_kind { position, popularity, attributes, history_sweep };

inline probe_kind probe_kind_from_string(std::string_view s) {
    if (s == "position") return probe_kind::position;
    if (s == "popularity") return probe_kind::popularity;
    if (s == "attributes") return probe_kind::attributes;
    if (s == "history-sweep" || s == "history_sweep") return probe_kind::history_sweep;
    throw error(errc::config, "unknown probe: " + std::string(s));
}

namespace detail {

struct probe_scoreboard {
    std::map<std::string, std::vector<double>> per_run; // cell key -> per-run means
    std::size_t failures = 0, skips = 0, instances = 0;
    std::vector<std::string> csv_rows; // long format: cell,run,value
};

// run one labeled instance batch, returning the run-mean overlap/ndcg value
template <typename Metric>
void score_batch(probe_scoreboard& board, const std::string& cell_key, std::size_t run,
                 const std::vector<task_instance>& batch, const task_aligned_profile* fixed_profile,
                 const profile_store* store, const experiment_data& data, executor& exec,
                 const request_defaults& defaults, const run_options& ropts, int in_flight,
                 Metric&& metric) {
    std::vector<std::optional<double>> scores(batch.size());
    std::vector<char> failed(batch.size(), 0);
    parallel_for(batch.size(), in_flight, [&](std::size_t i) {
        const auto& inst = batch[i];
        const task_aligned_profile& profile =
            fixed_profile ? *fixed_profile : store->profiles.at(inst.user);
        try {
            auto d = run_task(profile, inst, data.ds.items, data.stats, exec, defaults, ropts);
            scores[i] = metric(inst, d);
        } catch (const error&) {
            failed[i] = 1;
        }
    });
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        if (failed[i]) {
            ++board.failures;
            continue;
        }
        if (scores[i]) {
            sum += *scores[i];
            ++n;
        }
    }
    board.instances += batch.size();
    double mean = n ? sum / double(n) : 0.0;
    board.per_run[cell_key].push_back(mean);
    board.csv_rows.push_back(cell_key + "," + std::to_string(run) + "," + std::to_string(mean));
}

inline std::vector<report_cell> finalize_probe(const experiment_config& cfg, const std::string& probe_name,
                                               const std::string& generator, const std::string& metric_name,
                                               const std::string& cell_label, probe_scoreboard& board) {
    std::vector<report_cell> cells;
    for (const auto& [key, values] : board.per_run) {
        report_cell cell;
        cell.dataset = cfg.dataset.name;
        cell.task = probe_name;
        cell.generator = generator;
        cell.metric = metric_name;
        cell.cell[cell_label] = key;
        cell.report = aggregate_runs(values);
        cell.report.name = metric_name;
        cell.report.config_digest = cfg.digest;
        cell.report.failure_count = board.failures;
        cell.instances = board.instances;
        cell.skips = board.skips;
        cells.push_back(std::move(cell));
    }
    append_report_cells(std::filesystem::path(cfg.out_dir) / "reports" /
                            ("probe_" + probe_name + "_" + generator + ".jsonl"),
                        cells);
    std::ostringstream csv;
    csv << cell_label << ",run,value\n";
    for (const auto& row : board.csv_rows) csv << row << '\n';
    detail::write_text(std::filesystem::path(cfg.out_dir) / "plots" /
                           (probe_name + "_" + generator + ".csv"),
                       csv.str());
    return cells;
}

} // namespace detail

// Bias probes and the history-window sensitivity sweep. Each emits per-cell
// report records plus a long-format CSV for box plots / curves.
inline std::vector<report_cell> cmd_probe(const experiment_config& cfg, const experiment_data& data,
                                          executor& exec, probe_kind kind) {
    request_defaults defaults{cfg.backend.model_id, cfg.backend.temperature, cfg.backend.max_tokens};
    run_options ropts;
    ropts.allow_repair = cfg.tasks.allow_repair;
    ropts.r_parse = cfg.tasks.r_parse;
    ropts.scale = data.ds.scale;
    auto profiles_dir = std::filesystem::path(cfg.out_dir) / "profiles";

    std::vector<report_cell> all_cells;
    switch (kind) {
    case probe_kind::position: {
        std::vector<std::size_t> positions = cfg.tasks.positions;
        if (positions.empty())
            for (std::size_t pos = 1; pos <= cfg.tasks.candidate_count; ++pos) positions.push_back(pos);
        auto handle = make_sampler(sampler_spec::uniform());

        for (const auto& generator : cfg.generator.kinds) {
            auto store = load_profile_store((profiles_dir / (generator + ".jsonl")).string());
            detail::probe_scoreboard board;
            for (std::size_t run = 1; run <= cfg.runs; ++run) {
                std::uint64_t run_seed = derive_seed(cfg.root_seed, "run", run);
                std::map<std::size_t, std::vector<task_instance>> by_position;
                for (const auto& user : data.users) {
                    if (!store.profiles.count(user)) continue;
                    auto seed = derive_seed(run_seed, "user", user);
                    auto inst = build_ranking_instance(user, data.split, data.stats,
                                                       cfg.tasks.candidate_count, handle.fn, seed);
                    if (!inst) {
                        ++board.skips;
                        continue;
                    }
                    inst->attribute_mask = cfg.tasks.attribute_mask;
                    auto variants = position_probe(*inst, positions);
                    for (std::size_t v = 0; v < variants.size(); ++v)
                        by_position[positions[v]].push_back(variants[v]);
                }
                for (auto& [pos, batch] : by_position)
                    detail::score_batch(board, std::to_string(pos), run, batch, nullptr, &store, data, exec,
                                        defaults, ropts, cfg.backend.in_flight,
                                        [](const task_instance& inst, const agent_decision& d) {
                                            return ndcg_at_k(d.permutation, *inst.positives.begin(), 5);
                                        });
            }
            auto cells = detail::finalize_probe(cfg, "position", generator, "ndcg@5", "position", board);
            all_cells.insert(all_cells.end(), cells.begin(), cells.end());
        }
        break;
    }
    case probe_kind::popularity: {
        std::vector<sampler_spec> strategies;
        for (const auto& name : cfg.tasks.popularity_strategies) {
            if (name == "uniform")
                strategies.push_back(sampler_spec::uniform());
            else if (name == "debias")
                strategies.push_back(sampler_spec::debias());
            else if (name == "pop_head")
                strategies.push_back(sampler_spec::head());
            else if (name == "pop_tail")
                strategies.push_back(sampler_spec::tail());
            else
                throw error(errc::config, "unknown popularity strategy: " + name);
        }
        popularity_probe_config pcfg;
        pcfg.family = task_family::discrimination;
        pcfg.p = 3;
        pcfg.c = cfg.tasks.candidate_count;
        pcfg.instances_per_user = cfg.tasks.instances_per_user;

        for (const auto& generator : cfg.generator.kinds) {
            auto store = load_profile_store((profiles_dir / (generator + ".jsonl")).string());
            detail::probe_scoreboard board;
            for (std::size_t run = 1; run <= cfg.runs; ++run) {
                std::uint64_t run_seed = derive_seed(cfg.root_seed, "run", run);
                std::map<std::string, std::vector<task_instance>> by_strategy;
                for (const auto& user : data.users) {
                    if (!store.profiles.count(user)) continue;
                    auto sets = popularity_probe(user, data.split, data.stats, strategies, pcfg,
                                                 derive_seed(run_seed, "user", user));
                    for (auto& labeled : sets)
                        for (auto& inst : labeled.instances) {
                            inst.attribute_mask = cfg.tasks.attribute_mask;
                            by_strategy[labeled.label].push_back(inst);
                        }
                }
                for (auto& [label, batch] : by_strategy)
                    detail::score_batch(board, label, run, batch, nullptr, &store, data, exec, defaults,
                                        ropts, cfg.backend.in_flight,
                                        [](const task_instance& inst, const agent_decision& d) {
                                            return overlap_ratio(d.selected, inst.positives);
                                        });
            }
            auto cells = detail::finalize_probe(cfg, "popularity", generator, "overlap_ratio", "strategy",
                                                board);
            all_cells.insert(all_cells.end(), cells.begin(), cells.end());
        }
        break;
    }
    case probe_kind::attributes: {
        auto plan = attribute_probe_config(standard_attribute_masks(),
                                           {sampler_kind::uniform, sampler_kind::debias});
        auto profile = empty_profile("probe"); // parametric-prior probe is profile-free
        detail::probe_scoreboard board;
        for (std::size_t run = 1; run <= cfg.runs; ++run) {
            std::uint64_t run_seed = derive_seed(cfg.root_seed, "run", run);
            for (const auto& cell : plan.cells) {
                sampler_spec spec =
                    cell.sampling == sampler_kind::debias ? sampler_spec::debias() : sampler_spec::uniform();
                auto handle = make_sampler(spec);
                std::vector<task_instance> batch;
                for (const auto& user : data.users) {
                    auto seed = derive_seed(run_seed, "user:" + user + ":c" + std::to_string(cell.c),
                                            cell.p);
                    auto inst = build_discrimination_instance(user, data.split, data.stats, cell.p, cell.c,
                                                              handle.fn, seed);
                    if (!inst) {
                        ++board.skips;
                        continue;
                    }
                    inst->attribute_mask = cell.mask;
                    batch.push_back(std::move(*inst));
                }
                std::string key = cell.mask_label() + "/" + cell.sampling_label() + "/" +
                                  std::to_string(cell.p) + ":" + std::to_string(cell.c);
                detail::score_batch(board, key, run, batch, &profile, nullptr, data, exec, defaults, ropts,
                                    cfg.backend.in_flight,
                                    [](const task_instance& inst, const agent_decision& d) {
                                        return overlap_ratio(d.selected, inst.positives);
                                    });
            }
        }
        all_cells = detail::finalize_probe(cfg, "attributes", "empty", "overlap_ratio", "mask", board);
        break;
    }
    case probe_kind::history_sweep: {
        // regenerate profiles per window size, then score discrimination
        for (const auto& generator : cfg.generator.kinds) {
            detail::probe_scoreboard board;
            for (auto window : cfg.tasks.history_grid) {
                experiment_config sweep_cfg = cfg;
                sweep_cfg.generator.history_window = window;
                sweep_cfg.generator.kinds = {generator};
                sweep_cfg.out_dir =
                    (std::filesystem::path(cfg.out_dir) / "sweep" / ("w" + std::to_string(window))).string();
                cmd_generate_profiles(sweep_cfg, data, exec);
                auto store = load_profile_store((std::filesystem::path(sweep_cfg.out_dir) / "profiles" /
                                                 (generator + ".jsonl"))
                                                    .string());
                auto handle = make_sampler(sampler_spec::uniform());
                for (std::size_t run = 1; run <= cfg.runs; ++run) {
                    std::uint64_t run_seed = derive_seed(cfg.root_seed, "run", run);
                    std::vector<task_instance> batch;
                    for (const auto& user : data.users) {
                        if (!store.profiles.count(user)) continue;
                        auto seed = derive_seed(run_seed, "user:" + user, 3);
                        auto inst = build_discrimination_instance(user, data.split, data.stats, 3,
                                                                  cfg.tasks.candidate_count, handle.fn, seed);
                        if (!inst) {
                            ++board.skips;
                            continue;
                        }
                        inst->attribute_mask = cfg.tasks.attribute_mask;
                        batch.push_back(std::move(*inst));
                    }
                    detail::score_batch(board, std::to_string(window), run, batch, nullptr, &store, data,
                                        exec, defaults, ropts, cfg.backend.in_flight,
                                        [](const task_instance& inst, const agent_decision& d) {
                                            return overlap_ratio(d.selected, inst.positives);
                                        });
                }
            }
            auto cells = detail::finalize_probe(cfg, "history_sweep", generator, "overlap_ratio", "window",
                                                board);
            all_cells.insert(all_cells.end(), cells.begin(), cells.end());
        }
        break;
    }
    }
    return all_cells;
}

// --- report --------------------------------------------------------------------------

// Merges every report record under <out>/reports into per-(dataset, task)
// tables, marking best (*) and second-best (_) per metric column, and emits
// both plain text and CSV.
inline std::string cmd_report(const std::string& out_dir) {
    namespace fs = std::filesystem;
    auto reports_dir = fs::path(out_dir) / "reports";
    if (!fs::exists(reports_dir)) throw error(errc::data, "no reports found under " + reports_dir.string());

    std::vector<report_cell> cells;
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(reports_dir))
        if (entry.path().extension() == ".jsonl") files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    for (const auto& file : files) {
        std::ifstream in(file);
        std::string line;
        while (std::getline(in, line)) {
            if (trim(line).empty()) continue;
            cells.push_back(report_cell::from_json(nlohmann::json::parse(line)));
        }
    }
    if (cells.empty()) throw error(errc::data, "no report records found under " + reports_dir.string());

    // group: (dataset, task) -> column = metric+cell, row = generator
    std::map<std::pair<std::string, std::string>, std::map<std::string, std::map<std::string, double>>> tables;
    for (const auto& c : cells) {
        std::string column = c.metric;
        for (const auto& [k, v] : c.cell) column += " " + k + "=" + v;
        tables[{c.dataset, c.task}][column][c.generator] = c.report.mean;
    }

    // lower is better for error/divergence metrics
    auto lower_better = [](const std::string& column) {
        return column.rfind("rmse", 0) == 0 || column.rfind("macro_jsd", 0) == 0;
    };

    std::ostringstream text, csv;
    csv << "dataset,task,metric,generator,mean,flag\n";
    for (const auto& [key, columns] : tables) {
        text << "== dataset " << key.first << " | task " << key.second << "\n";
        std::set<std::string> generators;
        for (const auto& [column, rows] : columns)
            for (const auto& [g, v] : rows) generators.insert(g);

        for (const auto& [column, rows] : columns) {
            // rank for best / second-best flags
            std::vector<std::pair<double, std::string>> ranked;
            for (const auto& [g, v] : rows) ranked.emplace_back(v, g);
            std::sort(ranked.begin(), ranked.end(), [&](const auto& a, const auto& b) {
                return lower_better(column) ? a.first < b.first : a.first > b.first;
            });
            text << "  " << column << ":\n";
            for (const auto& g : generators) {
                auto it = rows.find(g);
                std::string flag, value = "—";
                if (it != rows.end()) {
                    char buf[32];
                    std::snprintf(buf, sizeof buf, "%.4f", it->second);
                    value = buf;
                    if (!ranked.empty() && ranked[0].second == g) flag = "*";
                    else if (ranked.size() > 1 && ranked[1].second == g) flag = "_";
                }
                text << "    " << g << ": " << value;
                if (!flag.empty()) text << " " << flag;
                text << "\n";
                csv << key.first << "," << key.second << ",\"" << column << "\"," << g << ","
                    << (it == rows.end() ? "" : value) << "," << flag << "\n";
            }
        }
        text << "\n";
    }

    detail::write_text(fs::path(out_dir) / "summary" / "summary.txt", text.str());
    detail::write_text(fs::path(out_dir) / "summary" / "summary.csv", csv.str());
    return text.str();
}

} // namespace apg
