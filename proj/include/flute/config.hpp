#pragma once

// Experiment configuration: a small YAML document, validated up front.
//
//   method: flute | fedrep | fedrep_ri | general_flute
//   seeds: [1, 2, 3]
//   record_stride: 10          # default 1
//   output: runs/fig2          # default "."
//   dump_shards: false         # linear methods: write shards_seed<S>.csv
//   problem:                   # linear methods
//     d: 10
//     k: 2
//     M: 15
//     N: 12
//     sigma2: 0.3
//   classification:            # general_flute
//     m: 6
//     m_prime: 2
//     M: 12
//     n_per_class: 20
//     dim: 8
//     separation: 4.0
//   training:
//     T: 1000
//     ...                      # method-specific keys, see below
//
// Keys of `problem`, `classification` and `training` may also be written at
// the top level. Unknown keys, and keys the chosen method does not use, are
// rejected.
//
// training keys:
//   flute:         T, eta, eta_l, eta_r, gamma1, gamma2, alpha, mode (empirical|population)
//   fedrep:        T, eta, head_mode (exact_ls|grad_steps), head_steps, head_step, init (spectral|random), alpha
//   fedrep_ri:     as fedrep; init is forced to random
//   general_flute: T, hidden, lambda1, lambda2, lambda3, local_epochs, sample_ratio, eta_l, eta_r,
//                  realized_average, head_init_std

#include "flute/fedrep.hpp"
#include "flute/flute_linear.hpp"
#include "flute/general_flute.hpp"

#include <yaml-cpp/yaml.h>

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace flute {

class ConfigError : public std::runtime_error {
  public:
    ConfigError(const std::string& path, const std::string& message)
        : std::runtime_error(path.empty() ? message : path + ": " + message), path_(path) {}

    const std::string& path() const { return path_; }

  private:
    std::string path_;
};

enum class Method { kFlute, kFedRep, kFedRepRandomInit, kGeneralFlute };

inline std::string method_name(Method m) {
    switch (m) {
        case Method::kFlute: return "flute";
        case Method::kFedRep: return "fedrep";
        case Method::kFedRepRandomInit: return "fedrep_ri";
        case Method::kGeneralFlute: return "general_flute";
    }
    return "unknown";
}

inline bool is_linear(Method m) { return m != Method::kGeneralFlute; }

struct LinearProblem {
    Index d = 10;
    Index k = 2;
    Index clients = 15;
    Index samples = 12;
    double sigma2 = 0.3;
};

struct ExperimentConfig {
    Method method = Method::kFlute;
    LinearProblem problem;
    ClassificationSpec classification;
    FluteConfig flute;
    FedRepConfig fedrep;
    GeneralConfig general;
    std::vector<std::uint64_t> seeds;
    std::size_t record_stride = 1;
    std::filesystem::path output_dir = ".";
    bool dump_shards = false;
    bool over_parameterized = false;
    std::vector<std::string> warnings;
};

namespace detail {

class ConfigReader {
  public:
    // Merges block `name` with top-level keys listed in `keys`.
    std::map<std::string, std::pair<std::string, YAML::Node>> collect(const YAML::Node& root, const std::string& block,
                                                                      const std::set<std::string>& keys) {
        std::map<std::string, std::pair<std::string, YAML::Node>> out;
        if (const YAML::Node node = root[block]) {
            if (!node.IsMap()) {
                throw ConfigError(block, "expected a mapping");
            }
            for (const auto& kv : node) {
                const auto key = kv.first.as<std::string>();
                if (!keys.contains(key)) {
                    throw ConfigError(block + "." + key, "unknown key");
                }
                out[key] = {block + "." + key, kv.second};
            }
        }
        for (const auto& key : keys) {
            if (const YAML::Node node = root[key]) {
                if (out.contains(key)) {
                    throw ConfigError(key, "given both at top level and in " + block);
                }
                out[key] = {key, node};
            }
        }
        return out;
    }
};

template <typename T>
T scalar(const std::pair<std::string, YAML::Node>& entry) {
    const auto& [path, node] = entry;
    if (!node.IsScalar()) {
        throw ConfigError(path, "expected a scalar");
    }
    try {
        return node.as<T>();
    } catch (const YAML::Exception&) {
        throw ConfigError(path, "cannot parse '" + node.Scalar() + "'");
    }
}

inline Index count_value(const std::pair<std::string, YAML::Node>& entry, Index min_value) {
    const auto v = scalar<long long>(entry);
    if (v < min_value) {
        throw ConfigError(entry.first, "must be >= " + std::to_string(min_value));
    }
    return static_cast<Index>(v);
}

inline double real_value(const std::pair<std::string, YAML::Node>& entry, double lower, bool strict) {
    const auto v = scalar<double>(entry);
    if (!std::isfinite(v) || (strict ? !(v > lower) : !(v >= lower))) {
        throw ConfigError(entry.first, std::string("must be ") + (strict ? "> " : ">= ") + detail::format_double(lower));
    }
    return v;
}

inline const std::set<std::string>& top_level_keys() {
    static const std::set<std::string> keys{"method", "seeds", "record_stride", "output", "dump_shards",
                                            "problem", "classification", "training"};
    return keys;
}

inline const std::set<std::string>& problem_keys() {
    static const std::set<std::string> keys{"d", "k", "M", "N", "sigma2"};
    return keys;
}

inline const std::set<std::string>& classification_keys() {
    static const std::set<std::string> keys{"m", "m_prime", "M", "n_per_class", "dim", "separation"};
    return keys;
}

inline std::set<std::string> training_keys(Method m) {
    switch (m) {
        case Method::kFlute: return {"T", "eta", "eta_l", "eta_r", "gamma1", "gamma2", "alpha", "mode"};
        case Method::kFedRep:
        case Method::kFedRepRandomInit:
            return {"T", "eta", "head_mode", "head_steps", "head_step", "init", "alpha"};
        case Method::kGeneralFlute:
            return {"T",           "hidden", "lambda1", "lambda2",          "lambda3",      "local_epochs",
                    "sample_ratio", "eta_l",  "eta_r",   "realized_average", "head_init_std"};
    }
    return {};
}

}  // namespace detail

/// Parses and validates a configuration document. Defaults: gamma1 = 1/4,
/// gamma2 = 1/8, eta = 0.03, alpha = 1/(10 d), record_stride = 1.
inline ExperimentConfig parse_config(const std::string& text) {
    YAML::Node loaded;
    try {
        loaded = YAML::Load(text);
    } catch (const YAML::Exception& e) {
        throw ConfigError("", std::string("malformed document: ") + e.what());
    }
    const YAML::Node& root = loaded;
    if (!root.IsMap()) {
        throw ConfigError("", "malformed document: expected a mapping at top level");
    }

    ExperimentConfig cfg;
    const YAML::Node method = root["method"];
    if (!method) {
        throw ConfigError("method", "required");
    }
    const auto method_str = detail::scalar<std::string>({"method", method});
    if (method_str == "flute") cfg.method = Method::kFlute;
    else if (method_str == "fedrep") cfg.method = Method::kFedRep;
    else if (method_str == "fedrep_ri") cfg.method = Method::kFedRepRandomInit;
    else if (method_str == "general_flute") cfg.method = Method::kGeneralFlute;
    else throw ConfigError("method", "unknown method '" + method_str + "'");

    const auto train_keys = detail::training_keys(cfg.method);
    std::set<std::string> allowed = detail::top_level_keys();
    const auto& block_keys = is_linear(cfg.method) ? detail::problem_keys() : detail::classification_keys();
    allowed.insert(block_keys.begin(), block_keys.end());
    allowed.insert(train_keys.begin(), train_keys.end());
    for (const auto& kv : root) {
        const auto key = kv.first.as<std::string>();
        if (!allowed.contains(key)) {
            const bool other_block = detail::problem_keys().contains(key) ||
                                     detail::classification_keys().contains(key) || key == "problem" ||
                                     key == "classification";
            throw ConfigError(key, other_block ? "not used by method " + method_str : "unknown key");
        }
    }
    if (is_linear(cfg.method) && root["classification"]) {
        throw ConfigError("classification", "not used by method " + method_str);
    }
    if (!is_linear(cfg.method) && root["problem"]) {
        throw ConfigError("problem", "not used by method " + method_str);
    }

    // seeds
    const YAML::Node seeds = root["seeds"];
    if (!seeds) {
        throw ConfigError("seeds", "required");
    }
    if (seeds.IsScalar()) {
        cfg.seeds.push_back(detail::scalar<std::uint64_t>({"seeds", seeds}));
    } else if (seeds.IsSequence() && seeds.size() > 0) {
        for (std::size_t i = 0; i < seeds.size(); ++i) {
            cfg.seeds.push_back(detail::scalar<std::uint64_t>({"seeds[" + std::to_string(i) + "]", seeds[i]}));
        }
    } else {
        throw ConfigError("seeds", "expected a nonempty list of integers");
    }
    if (const YAML::Node n = root["record_stride"]) {
        cfg.record_stride = static_cast<std::size_t>(detail::count_value({"record_stride", n}, 1));
    }
    if (const YAML::Node n = root["output"]) {
        cfg.output_dir = detail::scalar<std::string>({"output", n});
    }
    if (const YAML::Node n = root["dump_shards"]) {
        if (!is_linear(cfg.method)) {
            throw ConfigError("dump_shards", "only available for linear methods");
        }
        cfg.dump_shards = detail::scalar<bool>({"dump_shards", n});
    }

    detail::ConfigReader reader;
    const auto train = reader.collect(root, "training", train_keys);
    auto get = [&](const std::string& key) -> const std::pair<std::string, YAML::Node>* {
        const auto it = train.find(key);
        return it == train.end() ? nullptr : &it->second;
    };
    const std::size_t rounds = get("T") ? static_cast<std::size_t>(detail::count_value(*get("T"), 1)) : 1000;

    if (is_linear(cfg.method)) {
        const auto prob = reader.collect(root, "problem", detail::problem_keys());
        for (const auto& key : {"d", "k", "M", "N"}) {
            if (!prob.contains(key)) {
                throw ConfigError(std::string("problem.") + key, "required");
            }
        }
        cfg.problem.d = detail::count_value(prob.at("d"), 1);
        cfg.problem.k = detail::count_value(prob.at("k"), 1);
        cfg.problem.clients = detail::count_value(prob.at("M"), 1);
        cfg.problem.samples = detail::count_value(prob.at("N"), 1);
        cfg.problem.sigma2 = prob.contains("sigma2") ? detail::real_value(prob.at("sigma2"), 0.0, false) : 0.3;
        const auto& p = cfg.problem;
        if (p.k > p.d) {
            throw ConfigError(prob.at("k").first, "k=" + std::to_string(p.k) + " exceeds d=" + std::to_string(p.d));
        }
        if (p.k > std::min(p.d, p.clients)) {
            cfg.over_parameterized = true;
            cfg.warnings.push_back("k exceeds min(d, M): over-parameterized setting");
        }
    }

    switch (cfg.method) {
        case Method::kFlute: {
            auto& f = cfg.flute;
            f.k = cfg.problem.k;
            f.rounds = rounds;
            f.record_stride = cfg.record_stride;
            if (const auto* e = get("eta")) {
                f.eta_l = f.eta_r = detail::real_value(*e, 0.0, true);
            }
            if (const auto* e = get("eta_l")) f.eta_l = detail::real_value(*e, 0.0, true);
            if (const auto* e = get("eta_r")) f.eta_r = detail::real_value(*e, 0.0, true);
            if (const auto* e = get("gamma1")) f.gamma1 = detail::real_value(*e, 0.0, false);
            if (const auto* e = get("gamma2")) f.gamma2 = detail::real_value(*e, 0.0, false);
            if (const auto* e = get("alpha")) f.alpha = detail::real_value(*e, 0.0, false);
            if (const auto* e = get("mode")) {
                const auto mode = detail::scalar<std::string>(*e);
                if (mode == "empirical") f.mode = GradientMode::kEmpirical;
                else if (mode == "population") f.mode = GradientMode::kPopulation;
                else throw ConfigError(e->first, "expected 'empirical' or 'population'");
            }
            break;
        }
        case Method::kFedRep:
        case Method::kFedRepRandomInit: {
            auto& f = cfg.fedrep;
            f.k = cfg.problem.k;
            f.rounds = rounds;
            f.record_stride = cfg.record_stride;
            if (const auto* e = get("eta")) f.eta = detail::real_value(*e, 0.0, true);
            std::string head = "exact_ls";
            if (const auto* e = get("head_mode")) head = detail::scalar<std::string>(*e);
            if (head == "exact_ls") {
                if (get("head_steps") || get("head_step")) {
                    throw ConfigError(get("head_steps") ? get("head_steps")->first : get("head_step")->first,
                                      "only valid with head_mode: grad_steps");
                }
                f.head_mode = ExactLeastSquares{};
            } else if (head == "grad_steps") {
                HeadGradientSteps steps;
                if (const auto* e = get("head_steps")) steps.count = static_cast<std::size_t>(detail::count_value(*e, 1));
                if (const auto* e = get("head_step")) steps.step = detail::real_value(*e, 0.0, true);
                f.head_mode = steps;
            } else {
                throw ConfigError(get("head_mode")->first, "expected 'exact_ls' or 'grad_steps'");
            }
            std::string init = cfg.method == Method::kFedRepRandomInit ? "random" : "spectral";
            if (const auto* e = get("init")) {
                init = detail::scalar<std::string>(*e);
                if (cfg.method == Method::kFedRepRandomInit && init != "random") {
                    throw ConfigError(e->first, "fedrep_ri always uses random initialization");
                }
            }
            if (init == "random") {
                RandomInitMode r;
                if (const auto* e = get("alpha")) r.alpha = detail::real_value(*e, 0.0, false);
                f.init_mode = r;
            } else if (init == "spectral") {
                if (const auto* e = get("alpha")) {
                    throw ConfigError(e->first, "only valid with init: random");
                }
                f.init_mode = SpectralInitMode{};
            } else {
                throw ConfigError(get("init")->first, "expected 'spectral' or 'random'");
            }
            break;
        }
        case Method::kGeneralFlute: {
            const auto cls = reader.collect(root, "classification", detail::classification_keys());
            auto& c = cfg.classification;
            if (cls.contains("m")) c.classes = detail::count_value(cls.at("m"), 2);
            if (cls.contains("m_prime")) c.classes_per_client = detail::count_value(cls.at("m_prime"), 1);
            if (cls.contains("M")) c.clients = detail::count_value(cls.at("M"), 1);
            if (cls.contains("n_per_class")) c.samples_per_class = detail::count_value(cls.at("n_per_class"), 1);
            if (cls.contains("dim")) c.dim = detail::count_value(cls.at("dim"), 1);
            if (cls.contains("separation")) c.separation = detail::real_value(cls.at("separation"), 0.0, false);
            if (c.classes_per_client > c.classes) {
                throw ConfigError("classification.m_prime", "must not exceed m");
            }
            if (c.classes_per_client < 2) {
                throw ConfigError("classification.m_prime", "must be >= 2 for the local NC2 metric");
            }
            if (c.classes_per_client * c.clients < c.classes) {
                throw ConfigError("classification", "infeasible partition (m_prime * M < m)");
            }
            auto& g = cfg.general;
            g.rounds = rounds;
            g.record_stride = cfg.record_stride;
            if (const auto* e = get("hidden")) g.hidden = detail::count_value(*e, 1);
            if (const auto* e = get("lambda1")) g.lambda1 = detail::real_value(*e, 0.0, false);
            if (const auto* e = get("lambda2")) g.lambda2 = detail::real_value(*e, 0.0, false);
            if (const auto* e = get("lambda3")) g.lambda3 = detail::real_value(*e, 0.0, false);
            if (const auto* e = get("local_epochs")) g.local_epochs = static_cast<std::size_t>(detail::count_value(*e, 1));
            if (const auto* e = get("sample_ratio")) {
                g.sample_ratio = detail::real_value(*e, 0.0, true);
                if (g.sample_ratio > 1.0) {
                    throw ConfigError(e->first, "must be <= 1");
                }
            }
            if (const auto* e = get("eta_l")) g.eta_l = detail::real_value(*e, 0.0, false);
            if (const auto* e = get("eta_r")) g.eta_r = detail::real_value(*e, 0.0, false);
            if (const auto* e = get("realized_average")) g.realized_average = detail::scalar<bool>(*e);
            if (const auto* e = get("head_init_std")) g.head_init_std = detail::real_value(*e, 0.0, true);
            break;
        }
    }
    return cfg;
}

}  // namespace flute
