#include "kvrelay/simulate.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <exception>
#include <memory>
#include <set>
#include <sstream>
#include <thread>

#include "kvrelay/error.hpp"
#include "kvrelay/fixtures.hpp"
#include "kvrelay/report.hpp"

namespace kvrelay {

using nlohmann::json;

namespace {

void reject_unknown_keys(const json& obj, const std::set<std::string>& known, const std::string& where) {
    if (!obj.is_object()) throw Error(ErrorCode::ConfigError, where + " must be an object");
    for (const auto& [key, value] : obj.items()) {
        if (!known.contains(key)) throw Error(ErrorCode::ConfigError, "unknown key '" + key + "' in " + where);
    }
}

template <typename T>
void read_into(const json& obj, const char* key, T& out, const std::string& where) {
    if (!obj.contains(key)) return;
    try {
        out = obj.at(key).get<T>();
    } catch (const json::exception& e) {
        throw Error(ErrorCode::ConfigError, where + "." + key + ": " + e.what());
    }
}

template <typename T>
void read_optional(const json& obj, const char* key, std::optional<T>& out, const std::string& where) {
    if (!obj.contains(key)) return;
    if (obj.at(key).is_null()) {
        out.reset();
        return;
    }
    T value{};
    read_into(obj, key, value, where);
    out = value;
}

}  // namespace

RunConfig parse_run_config(const json& doc, const std::filesystem::path& base_dir) {
    RunConfig cfg;
    reject_unknown_keys(doc, {"chain", "compression", "episodes", "methods", "output", "verbosity", "jobs"}, "config");

    if (doc.contains("chain")) {
        const auto& c = doc["chain"];
        reject_unknown_keys(c, {"num_agents", "latent_steps", "seed"}, "chain");
        read_into(c, "num_agents", cfg.chain.num_agents, "chain");
        read_into(c, "latent_steps", cfg.chain.latent_steps, "chain");
        read_into(c, "seed", cfg.chain.seed, "chain");
    }
    if (doc.contains("compression")) {
        const auto& c = doc["compression"];
        reject_unknown_keys(c, {"budget_k", "budget_ratio", "pca_rank", "epsilon", "sink_size"}, "compression");
        read_optional(c, "budget_k", cfg.chain.compression.budget_k, "compression");
        read_optional(c, "budget_ratio", cfg.chain.compression.budget_ratio, "compression");
        // A ratio on its own replaces the default fixed budget.
        if (c.contains("budget_ratio") && !c["budget_ratio"].is_null() && !c.contains("budget_k")) {
            cfg.chain.compression.budget_k.reset();
        }
        read_into(c, "pca_rank", cfg.chain.compression.pca_rank, "compression");
        read_into(c, "epsilon", cfg.chain.compression.epsilon, "compression");
        read_into(c, "sink_size", cfg.chain.compression.sink_size, "compression");
    }
    if (doc.contains("episodes")) {
        const auto& e = doc["episodes"];
        reject_unknown_keys(e,
                            {"count", "num_layers", "num_kv_heads", "kv_group_size", "key_dim", "value_dim",
                             "prompt_lens", "pad_lens", "value_structure", "structure_rank", "fixtures"},
                            "episodes");
        read_into(e, "count", cfg.episode_count, "episodes");
        read_into(e, "num_layers", cfg.episode.num_layers, "episodes");
        read_into(e, "num_kv_heads", cfg.episode.num_kv_heads, "episodes");
        read_into(e, "kv_group_size", cfg.episode.kv_group_size, "episodes");
        read_into(e, "key_dim", cfg.episode.key_dim, "episodes");
        read_into(e, "value_dim", cfg.episode.value_dim, "episodes");
        read_into(e, "prompt_lens", cfg.episode.prompt_lens, "episodes");
        read_into(e, "pad_lens", cfg.episode.pad_lens, "episodes");
        read_into(e, "structure_rank", cfg.episode.structure_rank, "episodes");
        if (e.contains("value_structure")) {
            std::string name;
            read_into(e, "value_structure", name, "episodes");
            cfg.episode.value_structure = parse_value_structure(name);
        }
        if (e.contains("fixtures")) {
            std::vector<std::string> dirs;
            read_into(e, "fixtures", dirs, "episodes");
            for (const auto& d : dirs) {
                std::filesystem::path p(d);
                cfg.fixture_dirs.push_back(p.is_absolute() ? p : base_dir / p);
            }
        }
    }
    read_into(doc, "methods", cfg.methods, "config");
    if (doc.contains("output")) {
        std::string out;
        read_into(doc, "output", out, "config");
        cfg.output = out;
    }
    read_into(doc, "verbosity", cfg.verbosity, "config");
    read_into(doc, "jobs", cfg.jobs, "config");
    return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    if (!std::filesystem::is_regular_file(path)) {
        throw Error(ErrorCode::ConfigError, "config file not found: " + path.string());
    }
    return parse_run_config(read_json_file(path), path.parent_path());
}

EpisodeSpec episode_spec(const RunConfig& config, std::size_t index) {
    EpisodeSpec spec = config.episode;
    spec.gen_len = config.chain.latent_steps;
    spec.seed = CounterRng::stream(config.chain.seed, {index}).key();
    return spec;
}

namespace {

struct Task {
    std::size_t method = 0;
    std::size_t episode = 0;
};

std::string episode_stem(std::size_t e) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "episode_%03zu", e);
    return buf;
}

void validate_config(const RunConfig& config, std::vector<MethodSpec>& specs, std::vector<std::string>& names) {
    if (config.methods.empty()) throw Error(ErrorCode::ConfigError, "no methods selected");
    std::set<std::string> seen;
    for (const auto& m : config.methods) {
        const MethodSpec spec = parse_method_name(m);
        const std::string canonical = method_name(spec.method, spec.granularity);
        if (!seen.insert(canonical).second) throw Error(ErrorCode::ConfigError, "method listed twice: " + m);
        specs.push_back(spec);
        names.push_back(canonical);
        ChainConfig chain = config.chain;
        chain.compression.method = spec.method;
        chain.compression.granularity = spec.granularity;
        try {
            chain.validate();
        } catch (const Error& e) {
            throw Error(ErrorCode::ConfigError, e.what());
        }
    }
    if (config.fixture_dirs.empty()) {
        if (config.episode_count == 0) throw Error(ErrorCode::ConfigError, "episodes.count must be >= 1");
        if (config.episode.prompt_lens.size() < config.chain.num_agents) {
            throw Error(ErrorCode::ConfigError, "episodes.prompt_lens shorter than chain.num_agents");
        }
        try {
            episode_spec(config, 0).validate();
        } catch (const Error& e) {
            throw Error(ErrorCode::ConfigError, e.what());
        }
    }
}

}  // namespace

std::vector<MethodSummary> run_simulation(const RunConfig& config) {
    std::vector<MethodSpec> specs;
    std::vector<std::string> names;
    validate_config(config, specs, names);

    std::vector<std::unique_ptr<EpisodeSource>> episodes;
    if (!config.fixture_dirs.empty()) {
        for (const auto& dir : config.fixture_dirs) episodes.push_back(std::make_unique<FixtureEpisode>(dir));
    } else {
        for (std::size_t e = 0; e < config.episode_count; ++e) {
            episodes.push_back(std::make_unique<SyntheticEpisode>(episode_spec(config, e)));
        }
    }

    std::vector<Task> tasks;
    for (std::size_t m = 0; m < specs.size(); ++m)
        for (std::size_t e = 0; e < episodes.size(); ++e) tasks.push_back({m, e});

    std::vector<std::optional<RelayReport>> reports(tasks.size());
    std::vector<std::exception_ptr> failures(tasks.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < tasks.size(); i = next++) {
            try {
                ChainConfig chain = config.chain;
                chain.compression.method = specs[tasks[i].method].method;
                chain.compression.granularity = specs[tasks[i].method].granularity;
                reports[i] = run_chain(*episodes[tasks[i].episode], chain).report;
            } catch (...) {
                failures[i] = std::current_exception();
            }
        }
    };
    unsigned threads = config.jobs != 0 ? config.jobs : std::max(1u, std::thread::hardware_concurrency());
    threads = static_cast<unsigned>(std::min<std::size_t>(threads, tasks.size()));
    {
        std::vector<std::jthread> pool;
        for (unsigned t = 1; t < threads; ++t) pool.emplace_back(worker);
        worker();
    }
    for (const auto& f : failures) {
        if (f) std::rethrow_exception(f);
    }

    // Every chain succeeded; write outputs in (method, episode) order.
    std::error_code ec;
    std::filesystem::create_directories(config.output, ec);
    if (ec) throw Error(ErrorCode::IoError, "cannot create " + config.output.string() + ": " + ec.message());

    std::vector<MethodSummary> summary;
    for (std::size_t m = 0; m < specs.size(); ++m) {
        const auto dir = config.output / names[m];
        std::filesystem::create_directories(dir, ec);
        if (ec) throw Error(ErrorCode::IoError, "cannot create " + dir.string() + ": " + ec.message());
        MethodSummary row{names[m]};
        for (std::size_t e = 0; e < episodes.size(); ++e) {
            const RelayReport& report = *reports[m * episodes.size() + e];
            write_text_file(dir / (episode_stem(e) + ".json"), report_to_json(report, e, config.verbosity > 0));
            write_text_file(dir / (episode_stem(e) + ".csv"), report_to_csv(report));
            row.rho_achieved += report.totals.rho_achieved;
            row.r_eff += report.totals.r_eff;
            row.mean_final_message_len += static_cast<double>(report.totals.final_message_len);
            row.obf_skip_rate += report.obf.skip_rate;
        }
        const auto n = static_cast<double>(episodes.size());
        row.rho_achieved /= n;
        row.r_eff /= n;
        row.mean_final_message_len /= n;
        row.obf_skip_rate /= n;
        summary.push_back(row);
    }

    write_text_file(config.output / "summary.csv", summary_to_csv(summary));
    nlohmann::ordered_json doc = nlohmann::ordered_json::array();
    for (const auto& row : summary) {
        nlohmann::ordered_json entry;
        entry["method"] = row.method;
        entry["rho_achieved"] = row.rho_achieved;
        entry["r_eff"] = row.r_eff;
        entry["mean_final_message_len"] = row.mean_final_message_len;
        entry["obf_skip_rate"] = row.obf_skip_rate;
        doc.push_back(std::move(entry));
    }
    write_text_file(config.output / "summary.json", doc.dump(2) + "\n");

    if (config.emit_fixtures) {
        for (std::size_t e = 0; e < episodes.size(); ++e) {
            write_episode_fixtures(config.output / "fixtures" / episode_stem(e), *episodes[e]);
        }
    }
    return summary;
}

std::string summary_to_csv(const std::vector<MethodSummary>& rows) {
    std::ostringstream out;
    out << "method,rho_achieved,r_eff,mean_message_len,obf_skip_rate\n";
    for (const auto& r : rows) {
        out << r.method << ',' << format_real(r.rho_achieved) << ',' << format_real(r.r_eff) << ','
            << format_real(r.mean_final_message_len) << ',' << format_real(r.obf_skip_rate) << '\n';
    }
    return out.str();
}

const std::vector<BenchmarkLength>& reference_benchmarks() {
    static const std::vector<BenchmarkLength> table = {
        {"GSM8K", 524}, {"AIME24", 663},     {"AIME25", 819}, {"GPQA", 942},  {"ARC-E", 496},
        {"ARC-C", 524}, {"MBPP+", 778},      {"HumanEval+", 828}, {"MedQA", 888},
    };
    return table;
}

std::string ratio_table() {
    constexpr std::size_t k = 32;
    constexpr std::size_t rounds = 3;
    std::ostringstream out;
    char line[128];
    std::snprintf(line, sizeof line, "%-12s %5s %3s %6s  %s\n", "benchmark", "L", "k", "rounds", "L -> rho(%)");
    out << line;
    double sum = 0.0;
    for (const auto& b : reference_benchmarks()) {
        const double rho = compression_ratio(b.total_prompt_len, k, rounds);
        sum += rho;
        std::snprintf(line, sizeof line, "%-12s %5zu %3zu %6zu  %zu → %.1f\n", b.name, b.total_prompt_len, k,
                      rounds, b.total_prompt_len, rho);
        out << line;
    }
    std::snprintf(line, sizeof line, "mean rho(%%): %.2f\n",
                  sum / static_cast<double>(reference_benchmarks().size()));
    out << line;
    return out.str();
}

}  // namespace kvrelay
