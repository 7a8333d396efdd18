#pragma once

// Experiment orchestration: one trace CSV per seed plus summary.json.
//
// Linear trace columns:
//   t,avg_err_gt,avg_err_opt,frob_to_opt,in_R,in_Rs,inv_snr,d_spec,q_norm,q_tilde_norm
// General trace columns:
//   t,acc,global_nc2,local_nc2
// Reals are printed with 17 significant digits; flags as 0/1; an undefined
// inverse SNR (sigma_k(Theta_k) = 0) as the token `inf`.

#include "flute/config.hpp"

#include <json.hpp>

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace flute {

inline constexpr const char* kLinearCsvHeader =
    "t,avg_err_gt,avg_err_opt,frob_to_opt,in_R,in_Rs,inv_snr,d_spec,q_norm,q_tilde_norm";
inline constexpr const char* kGeneralCsvHeader = "t,acc,global_nc2,local_nc2";

inline std::string linear_trace_csv(const std::vector<RoundRecord>& trace) {
    using detail::format_double;
    std::string out = std::string(kLinearCsvHeader) + "\n";
    for (const auto& r : trace) {
        out += std::to_string(r.t) + ',' + format_double(r.avg_err_gt) + ',' + format_double(r.avg_err_opt) + ',' +
               format_double(r.frob_to_opt) + ',' + (r.in_r ? '1' : '0') + ',' + (r.in_rs ? '1' : '0') + ',' +
               (r.inv_snr ? format_double(*r.inv_snr) : std::string("inf")) + ',' + format_double(r.d_spec) + ',' +
               format_double(r.q_norm) + ',' + format_double(r.q_tilde_norm) + '\n';
    }
    return out;
}

inline std::string general_trace_csv(const std::vector<GeneralRecord>& trace) {
    using detail::format_double;
    std::string out = std::string(kGeneralCsvHeader) + "\n";
    for (const auto& r : trace) {
        out += std::to_string(r.t) + ',' + format_double(r.acc) + ',' + format_double(r.global_nc2) + ',' +
               format_double(r.local_nc2) + '\n';
    }
    return out;
}

struct SeriesStats {
    double median = 0.0;
    double mean = 0.0;
    double std_dev = 0.0;  // sample standard deviation, 0 for a single value
};

inline SeriesStats series_stats(std::vector<double> values) {
    SeriesStats s;
    if (values.empty()) {
        return s;
    }
    double sum = 0.0;
    for (const double v : values) {
        sum += v;
    }
    s.mean = sum / static_cast<double>(values.size());
    if (values.size() > 1) {
        double sq = 0.0;
        for (const double v : values) {
            sq += (v - s.mean) * (v - s.mean);
        }
        s.std_dev = std::sqrt(sq / static_cast<double>(values.size() - 1));
    }
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    s.median = n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
    return s;
}

/// Output of one seed: the trace as named numeric columns plus the CSV text.
struct SeedRun {
    std::uint64_t seed = 0;
    std::string csv;
    std::vector<std::size_t> rounds;
    std::vector<std::pair<std::string, std::vector<double>>> columns;
    bool diverged = false;
    std::size_t diverged_at = 0;
    nlohmann::ordered_json extra = nlohmann::ordered_json::object();
    std::string shards_csv;
};

namespace detail {

inline SeedRun linear_seed_run(std::uint64_t seed, const std::vector<RoundRecord>& trace) {
    SeedRun run;
    run.seed = seed;
    run.csv = linear_trace_csv(trace);
    std::vector<double> gt, opt, frob, dspec, q, qt;
    for (const auto& r : trace) {
        run.rounds.push_back(r.t);
        gt.push_back(r.avg_err_gt);
        opt.push_back(r.avg_err_opt);
        frob.push_back(r.frob_to_opt);
        dspec.push_back(r.d_spec);
        q.push_back(r.q_norm);
        qt.push_back(r.q_tilde_norm);
    }
    run.columns = {{"avg_err_gt", gt}, {"avg_err_opt", opt}, {"frob_to_opt", frob},
                   {"d_spec", dspec},  {"q_norm", q},        {"q_tilde_norm", qt}};
    if (!trace.empty()) {
        const auto& last = trace.back();
        run.extra["final_in_R"] = last.in_r;
        run.extra["final_in_Rs"] = last.in_rs;
        if (last.inv_snr) {
            run.extra["final_inv_snr"] = *last.inv_snr;
        } else {
            run.extra["final_inv_snr"] = "inf";
        }
        run.extra["delta_zero_warning"] = last.delta_zero_warning;
    }
    return run;
}

}  // namespace detail

inline SeedRun run_seed(const ExperimentConfig& cfg, std::uint64_t seed, const Execution& exec) {
    if (cfg.method == Method::kGeneralFlute) {
        const auto shards = make_classification_tasks(cfg.classification, seed, exec);
        GeneralConfig g = cfg.general;
        g.seed = seed;
        const auto result = general_flute_train(g, shards, exec);
        SeedRun run;
        run.seed = seed;
        run.csv = general_trace_csv(result.trace);
        std::vector<double> acc, gnc, lnc;
        for (const auto& r : result.trace) {
            run.rounds.push_back(r.t);
            acc.push_back(r.acc);
            gnc.push_back(r.global_nc2);
            lnc.push_back(r.local_nc2);
        }
        run.columns = {{"acc", acc}, {"global_nc2", gnc}, {"local_nc2", lnc}};
        run.diverged = result.diverged;
        run.diverged_at = result.diverged_at;
        nlohmann::ordered_json sampled = nlohmann::ordered_json::array();
        for (const auto& r : result.trace) {
            if (r.t > 0) {
                sampled.push_back({{"t", r.t}, {"clients", r.sampled}});
            }
        }
        run.extra["sampled_clients"] = std::move(sampled);
        return run;
    }

    const auto& p = cfg.problem;
    const GroundTruth gt = make_ground_truth(p.d, p.clients, seed);
    const bool needs_shards = !(cfg.method == Method::kFlute && cfg.flute.mode == GradientMode::kPopulation);
    std::vector<ClientShard> shards;
    if (needs_shards || cfg.dump_shards) {
        shards = make_client_shards(gt, p.samples, p.sigma2, seed, exec);
    }
    SeedRun run;
    if (cfg.method == Method::kFlute) {
        FluteConfig f = cfg.flute;
        f.seed = seed;
        const auto result = flute_train(f, gt, shards, exec);
        run = detail::linear_seed_run(seed, result.trace);
        run.diverged = result.diverged;
        run.diverged_at = result.diverged_at;
    } else {
        FedRepConfig f = cfg.fedrep;
        f.seed = seed;
        const auto result = fedrep_train(f, gt, shards, exec);
        run = detail::linear_seed_run(seed, result.trace);
        run.diverged = result.diverged;
        run.diverged_at = result.diverged_at;
        run.extra["rank_deficient_heads"] = result.rank_deficient_heads;
        run.extra["degenerate_spectral_init"] = result.degenerate_init;
    }
    run.extra["delta_k"] = gt.delta_k(p.k);
    if (cfg.dump_shards) {
        std::ostringstream os;
        write_shards_csv(os, shards);
        run.shards_csv = os.str();
    }
    return run;
}

/// summary.json contents for a set of seed runs.
inline nlohmann::ordered_json build_summary(const ExperimentConfig& cfg, const std::vector<SeedRun>& runs) {
    using json = nlohmann::ordered_json;
    json summary;
    summary["method"] = method_name(cfg.method);
    summary["seeds"] = cfg.seeds;
    bool any_diverged = false;
    json per_seed = json::array();
    for (const auto& run : runs) {
        json entry;
        entry["seed"] = run.seed;
        entry["trace_file"] = "trace_seed" + std::to_string(run.seed) + ".csv";
        entry["diverged"] = run.diverged;
        if (run.diverged) {
            entry["diverged_at_round"] = run.diverged_at;
            any_diverged = true;
        }
        json final_row;
        if (!run.rounds.empty()) {
            final_row["t"] = run.rounds.back();
            for (const auto& [name, values] : run.columns) {
                final_row[name] = values.back();
            }
        }
        entry["final"] = std::move(final_row);
        for (const auto& [key, value] : run.extra.items()) {
            entry[key] = value;
        }
        per_seed.push_back(std::move(entry));
    }
    summary["status"] = any_diverged ? "non_finite" : "ok";
    summary["warnings"] = cfg.warnings;
    summary["per_seed"] = std::move(per_seed);

    // Across-seed statistics at every round recorded by all seeds.
    json across = json::array();
    if (!runs.empty()) {
        std::size_t rows = runs.front().rounds.size();
        for (const auto& run : runs) {
            rows = std::min(rows, run.rounds.size());
        }
        for (std::size_t r = 0; r < rows; ++r) {
            json row;
            row["t"] = runs.front().rounds[r];
            for (std::size_t c = 0; c < runs.front().columns.size(); ++c) {
                std::vector<double> values;
                for (const auto& run : runs) {
                    values.push_back(run.columns[c].second[r]);
                }
                const SeriesStats s = series_stats(values);
                row[runs.front().columns[c].first] = {{"median", s.median}, {"mean", s.mean}, {"std", s.std_dev}};
            }
            across.push_back(std::move(row));
        }
    }
    summary["across_seeds"] = std::move(across);
    return summary;
}

struct RunOptions {
    std::optional<std::filesystem::path> output_dir;  // overrides the config's `output`
    Execution exec;
};

struct RunReport {
    int exit_code = 0;
    std::string message;
    std::vector<std::filesystem::path> files;
};

namespace detail {

inline void write_file(const std::filesystem::path& path, const std::string& contents) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot open " + path.string() + " for writing");
    }
    out << contents;
    out.close();
    if (!out) {
        throw std::runtime_error("failed writing " + path.string());
    }
}

}  // namespace detail

/// Runs every seed in order and writes trace_seed<S>.csv and summary.json.
/// Exit code 0 on success, 2 on IO failure or a non-finite iterate (the
/// affected trace stops at the last finite round).
inline RunReport run_experiment(const ExperimentConfig& cfg, const RunOptions& opts = {}) {
    RunReport report;
    const std::filesystem::path dir = opts.output_dir.value_or(cfg.output_dir);
    try {
        std::filesystem::create_directories(dir);
        std::vector<SeedRun> runs;
        for (const auto seed : cfg.seeds) {
            runs.push_back(run_seed(cfg, seed, opts.exec));
            const auto& run = runs.back();
            const auto trace_path = dir / ("trace_seed" + std::to_string(seed) + ".csv");
            detail::write_file(trace_path, run.csv);
            report.files.push_back(trace_path);
            if (cfg.dump_shards) {
                const auto shard_path = dir / ("shards_seed" + std::to_string(seed) + ".csv");
                detail::write_file(shard_path, run.shards_csv);
                report.files.push_back(shard_path);
            }
        }
        const auto summary = build_summary(cfg, runs);
        const auto summary_path = dir / "summary.json";
        detail::write_file(summary_path, summary.dump(2) + "\n");
        report.files.push_back(summary_path);
        if (summary["status"] != "ok") {
            report.exit_code = 2;
            report.message = "non-finite iterate encountered; traces truncated (see summary.json)";
        }
    } catch (const std::exception& e) {
        report.exit_code = 2;
        report.message = e.what();
    }
    return report;
}

}  // namespace flute
