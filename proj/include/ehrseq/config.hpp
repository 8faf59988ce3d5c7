#pragma once

// Flat `key = value` configuration covering training and synthetic-cohort
// generation. Unknown keys are rejected; serialization is canonical (fixed
// key order, round-trip-exact doubles) so configs can double as fingerprints.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ehrseq/encoders.hpp"
#include "ehrseq/objectives.hpp"
#include "ehrseq/synthetic.hpp"

namespace ehrseq {

enum class LossRegime {
    kCe,
    kIntermodal,
    kCeIntermodal,
    kGlobal,
    kCeGlobal,
    kCeGlobalAugmented,
};

inline LossRegime regime_from_string(const std::string& s) {
    if (s == "ce") return LossRegime::kCe;
    if (s == "intermodal") return LossRegime::kIntermodal;
    if (s == "ce+intermodal") return LossRegime::kCeIntermodal;
    if (s == "global") return LossRegime::kGlobal;
    if (s == "ce+global") return LossRegime::kCeGlobal;
    if (s == "ce+global-augmented") return LossRegime::kCeGlobalAugmented;
    throw std::invalid_argument("unknown loss regime '" + s + "'");
}

inline const char* to_string(LossRegime r) {
    switch (r) {
        case LossRegime::kCe: return "ce";
        case LossRegime::kIntermodal: return "intermodal";
        case LossRegime::kCeIntermodal: return "ce+intermodal";
        case LossRegime::kGlobal: return "global";
        case LossRegime::kCeGlobal: return "ce+global";
        default: return "ce+global-augmented";
    }
}

struct TrainConfig {
    LossRegime regime = LossRegime::kCe;
    std::size_t epochs = 30;
    std::size_t batch_size = 32;
    double lr = 1e-4;
    double weight_decay = 1e-4;
    double dropout = 0.2;
    double alpha = 0.2;
    double beta = 1.0;
    double tau = 0.07;
    DenominatorMode denominator_mode = DenominatorMode::kIncludePositive;
    std::size_t window = 8;
    std::size_t d = 32;
    std::size_t d_t = 8;
    std::size_t d_f = 32;
    std::size_t d_c = 32;
    std::size_t n_heads = 1;
    std::size_t n_layers = 1;
    std::size_t rel_clip = 8;
    std::size_t max_events = 512;
    std::size_t max_positions = 512;
    double lambda_augment = 0.25;
    std::uint64_t seed = 1;
    double train_frac = 0.7;
    double val_frac = 0.15;
    double test_frac = 0.15;

    void validate() const {
        if (lr <= 0.0) throw std::invalid_argument("lr must be positive");
        if (epochs == 0 || batch_size == 0)
            throw std::invalid_argument("epochs and batch_size must be positive");
        if (tau <= 0.0) throw std::invalid_argument("tau must be positive");
        if (alpha < 0.0 || beta < 0.0)
            throw std::invalid_argument("loss weights must be nonnegative");
        if (dropout < 0.0 || dropout >= 1.0)
            throw std::invalid_argument("dropout must lie in [0, 1)");
        if (d_t < 2) throw std::invalid_argument("d_t must be at least 2");
        if (std::abs(train_frac + val_frac + test_frac - 1.0) > 1e-9)
            throw std::invalid_argument("split fractions must sum to 1");
        AttentionConfig attn;
        attn.window = window;
        attn.n_heads = n_heads;
        attn.n_layers = n_layers;
        attn.validate(d);
    }
};

struct FullConfig {
    TrainConfig train;
    SyntheticConfig synth;
};

/// Per-regime effective loss plan. Pure contrastive regimes train the
/// outcome heads as a concurrent probe: head inputs are detached, so the
/// probe never steers the encoder.
struct RegimePlan {
    double alpha = 0.0;
    double beta = 1.0;
    bool use_intermodal = false;
    bool use_global = false;
    bool use_augmented = false;
    bool probe_heads = false;  // CE trains heads only, through detached inputs
};

inline RegimePlan plan_for(const TrainConfig& cfg) {
    RegimePlan plan;
    switch (cfg.regime) {
        case LossRegime::kCe:
            plan.alpha = 0.0;
            plan.beta = cfg.beta;
            break;
        case LossRegime::kIntermodal:
            plan.alpha = 1.0;
            plan.beta = 0.0;
            plan.use_intermodal = true;
            plan.probe_heads = true;
            break;
        case LossRegime::kCeIntermodal:
            plan.alpha = cfg.alpha;
            plan.beta = cfg.beta;
            plan.use_intermodal = true;
            break;
        case LossRegime::kGlobal:
            plan.alpha = 1.0;
            plan.beta = 0.0;
            plan.use_global = true;
            plan.probe_heads = true;
            break;
        case LossRegime::kCeGlobal:
            plan.alpha = cfg.alpha;
            plan.beta = cfg.beta;
            plan.use_global = true;
            break;
        case LossRegime::kCeGlobalAugmented:
            plan.alpha = cfg.alpha;
            plan.beta = cfg.beta;
            plan.use_global = true;
            plan.use_augmented = true;
            break;
    }
    return plan;
}

namespace detail {

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

struct ConfigBinding {
    std::function<std::string(const FullConfig&)> get;
    std::function<void(FullConfig&, const std::string&)> set;
};

inline std::uint64_t parse_u64(const std::string& s) {
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("trailing characters in integer '" + s + "'");
    return v;
}

inline double parse_double(const std::string& s) {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("trailing characters in number '" + s + "'");
    return v;
}

inline const std::vector<std::pair<std::string, ConfigBinding>>& config_bindings() {
    static const std::vector<std::pair<std::string, ConfigBinding>> bindings = [] {
        std::vector<std::pair<std::string, ConfigBinding>> b;
        auto add_u64 = [&](const std::string& key, auto getter) {
            b.push_back({key,
                         {[getter](const FullConfig& c) { return std::to_string(*getter(const_cast<FullConfig&>(c))); },
                          [getter](FullConfig& c, const std::string& v) { *getter(c) = parse_u64(v); }}});
        };
        auto add_size = [&](const std::string& key, auto getter) {
            b.push_back({key,
                         {[getter](const FullConfig& c) { return std::to_string(*getter(const_cast<FullConfig&>(c))); },
                          [getter](FullConfig& c, const std::string& v) {
                              *getter(c) = static_cast<std::size_t>(parse_u64(v));
                          }}});
        };
        auto add_double = [&](const std::string& key, auto getter) {
            b.push_back({key,
                         {[getter](const FullConfig& c) { return format_double(*getter(const_cast<FullConfig&>(c))); },
                          [getter](FullConfig& c, const std::string& v) { *getter(c) = parse_double(v); }}});
        };

        b.push_back({"regime",
                     {[](const FullConfig& c) { return std::string(to_string(c.train.regime)); },
                      [](FullConfig& c, const std::string& v) { c.train.regime = regime_from_string(v); }}});
        add_size("epochs", [](FullConfig& c) { return &c.train.epochs; });
        add_size("batch_size", [](FullConfig& c) { return &c.train.batch_size; });
        add_double("lr", [](FullConfig& c) { return &c.train.lr; });
        add_double("weight_decay", [](FullConfig& c) { return &c.train.weight_decay; });
        add_double("dropout", [](FullConfig& c) { return &c.train.dropout; });
        add_double("alpha", [](FullConfig& c) { return &c.train.alpha; });
        add_double("beta", [](FullConfig& c) { return &c.train.beta; });
        add_double("tau", [](FullConfig& c) { return &c.train.tau; });
        b.push_back({"denominator_mode",
                     {[](const FullConfig& c) { return std::string(to_string(c.train.denominator_mode)); },
                      [](FullConfig& c, const std::string& v) {
                          c.train.denominator_mode = denominator_mode_from_string(v);
                      }}});
        add_size("window", [](FullConfig& c) { return &c.train.window; });
        add_size("d", [](FullConfig& c) { return &c.train.d; });
        add_size("d_t", [](FullConfig& c) { return &c.train.d_t; });
        add_size("d_f", [](FullConfig& c) { return &c.train.d_f; });
        add_size("d_c", [](FullConfig& c) { return &c.train.d_c; });
        add_size("n_heads", [](FullConfig& c) { return &c.train.n_heads; });
        add_size("n_layers", [](FullConfig& c) { return &c.train.n_layers; });
        add_size("rel_clip", [](FullConfig& c) { return &c.train.rel_clip; });
        add_size("max_events", [](FullConfig& c) { return &c.train.max_events; });
        add_size("max_positions", [](FullConfig& c) { return &c.train.max_positions; });
        add_double("lambda_augment", [](FullConfig& c) { return &c.train.lambda_augment; });
        add_u64("seed", [](FullConfig& c) { return &c.train.seed; });
        add_double("train_frac", [](FullConfig& c) { return &c.train.train_frac; });
        add_double("val_frac", [](FullConfig& c) { return &c.train.val_frac; });
        add_double("test_frac", [](FullConfig& c) { return &c.train.test_frac; });

        add_size("n_patients", [](FullConfig& c) { return &c.synth.n_patients; });
        add_size("n_variables", [](FullConfig& c) { return &c.synth.n_variables; });
        add_double("mean_seq_len", [](FullConfig& c) { return &c.synth.mean_seq_len; });
        add_size("n_outcomes", [](FullConfig& c) { return &c.synth.n_outcomes; });
        add_size("latent_dim_time", [](FullConfig& c) { return &c.synth.latent_dim_time; });
        add_size("latent_dim_note", [](FullConfig& c) { return &c.synth.latent_dim_note; });
        add_double("shared_info", [](FullConfig& c) { return &c.synth.shared_info; });
        add_double("label_noise", [](FullConfig& c) { return &c.synth.label_noise; });
        add_size("embed_dim", [](FullConfig& c) { return &c.synth.embed_dim; });
        add_size("n_static", [](FullConfig& c) { return &c.synth.n_static; });
        add_u64("cohort_seed", [](FullConfig& c) { return &c.synth.seed; });
        return b;
    }();
    return bindings;
}

inline std::string trim(const std::string& s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string::npos) return "";
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

}  // namespace detail

/// Canonical text form: every key, fixed order, exact doubles.
inline std::string serialize_config(const FullConfig& cfg) {
    std::ostringstream os;
    for (const auto& [key, binding] : detail::config_bindings())
        os << key << " = " << binding.get(cfg) << "\n";
    return os.str();
}

inline FullConfig parse_config_text(const std::string& text) {
    FullConfig cfg;
    std::map<std::string, const detail::ConfigBinding*> by_key;
    for (const auto& [key, binding] : detail::config_bindings()) by_key[key] = &binding;
    std::istringstream is(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config line " + std::to_string(line_no) +
                                        ": expected 'key = value'");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        auto it = by_key.find(key);
        if (it == by_key.end())
            throw std::invalid_argument("config line " + std::to_string(line_no) +
                                        ": unknown key '" + key + "'");
        try {
            it->second->set(cfg, value);
        } catch (const std::exception& e) {
            throw std::invalid_argument("config line " + std::to_string(line_no) + ": key '" +
                                        key + "': " + e.what());
        }
    }
    return cfg;
}

inline FullConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file '" + path + "'");
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return parse_config_text(buffer.str());
}

}  // namespace ehrseq
