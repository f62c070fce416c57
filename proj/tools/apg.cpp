#include <CLI11.hpp>

#include <iostream>

#include "apg/experiment.hpp"

namespace {

struct cli_options {
    std::string config_path;
    std::string out_override;
    std::string backend_override;
    std::optional<std::uint64_t> seed_override;
};

apg::experiment_config load_config(const cli_options& opts) {
    if (opts.config_path.empty()) throw apg::error(apg::errc::config, "--config is required");
    auto cfg = apg::experiment_config::from_file(opts.config_path);
    if (!opts.out_override.empty()) cfg.out_dir = opts.out_override;
    if (!opts.backend_override.empty()) cfg.backend.kind = opts.backend_override;
    if (opts.seed_override) cfg.root_seed = *opts.seed_override;
    cfg.refresh_digest();
    return cfg;
}

void add_common(CLI::App* cmd, cli_options& opts) {
    cmd->add_option("--config", opts.config_path, "experiment config file (JSON)");
    cmd->add_option("--out", opts.out_override, "output directory override");
    cmd->add_option("--backend-override", opts.backend_override, "backend kind override");
    cmd->add_option("--seed", opts.seed_override, "root seed override");
}

void print_cells(const std::vector<apg::report_cell>& cells) {
    for (const auto& c : cells) {
        std::cout << c.task << " " << c.generator << " " << c.metric;
        for (const auto& [k, v] : c.cell) std::cout << " " << k << "=" << v;
        std::cout << ": mean=" << c.report.mean << " std=" << c.report.stddev
                  << " runs=" << c.report.n_runs << " failures=" << c.report.failure_count
                  << " instances=" << c.instances << " skips=" << c.skips << "\n";
    }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"profile-generation and simulation-evaluation harness"};
    app.require_subcommand(1);
    cli_options opts;

    auto* ingest = app.add_subcommand("ingest", "parse the dataset, split it, persist canonical files");
    add_common(ingest, opts);

    auto* profiles = app.add_subcommand("profiles", "profile-store operations");
    auto* generate = profiles->add_subcommand("generate", "generate one store per configured generator");
    add_common(generate, opts);

    auto* eval = app.add_subcommand("eval", "run a task family and aggregate metric reports");
    std::string family_arg;
    eval->add_option("family", family_arg, "discrimination | ranking | rating")->required();
    add_common(eval, opts);

    auto* probe = app.add_subcommand("probe", "bias probes and the history sweep");
    std::string probe_arg;
    probe->add_option("kind", probe_arg, "position | popularity | attributes | history-sweep")->required();
    add_common(probe, opts);

    auto* report = app.add_subcommand("report", "merge report cells into summary tables");
    add_common(report, opts);

    CLI11_PARSE(app, argc, argv);

    try {
        if (ingest->parsed()) {
            auto cfg = load_config(opts);
            auto dir = apg::cmd_ingest(cfg);
            std::cout << "canonical dataset written to " << dir.string() << "\n";
        } else if (generate->parsed()) {
            auto cfg = load_config(opts);
            auto data = apg::prepare_data(cfg);
            auto backend = apg::make_backend(cfg);
            auto summaries = apg::cmd_generate_profiles(cfg, data, *backend);
            for (const auto& [kind, s] : summaries)
                std::cout << kind << ": generated=" << s.generated << " reused=" << s.reused
                          << " failures=" << s.failures << "\n";
        } else if (eval->parsed()) {
            auto cfg = load_config(opts);
            auto family = apg::task_family_from_string(family_arg);
            auto data = apg::prepare_data(cfg);
            auto backend = apg::make_backend(cfg);
            auto profiles_dir = std::filesystem::path(cfg.out_dir) / "profiles";
            for (const auto& generator : cfg.generator.kinds) {
                auto store_path = profiles_dir / (generator + ".jsonl");
                if (!std::filesystem::exists(store_path))
                    throw apg::error(apg::errc::data, "no profile store at " + store_path.string() +
                                                          "; run `apg profiles generate` first");
                auto store = apg::load_profile_store(store_path.string());
                auto cells = apg::cmd_eval(cfg, data, *backend, family, generator, store);
                print_cells(cells);
            }
        } else if (probe->parsed()) {
            auto cfg = load_config(opts);
            auto kind = apg::probe_kind_from_string(probe_arg);
            auto data = apg::prepare_data(cfg);
            auto backend = apg::make_backend(cfg);
            auto cells = apg::cmd_probe(cfg, data, *backend, kind);
            print_cells(cells);
        } else if (report->parsed()) {
            std::string out_dir = opts.out_override;
            if (out_dir.empty() && !opts.config_path.empty())
                out_dir = apg::experiment_config::from_file(opts.config_path).out_dir;
            if (out_dir.empty()) throw apg::error(apg::errc::config, "report needs --out or --config");
            std::cout << apg::cmd_report(out_dir);
        }
    } catch (const apg::error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.exit_code();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
