#pragma once

// Synthetic cohort generation. Each patient carries two latent factors with
// correlation controlled by shared_info: the event stream reflects only the
// time factor, note chunks only the note factor, and the discharge embedding
// and outcome labels depend on both. Low shared_info therefore yields
// complementary modalities whose union, not intersection, predicts outcomes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "ehrseq/cohort.hpp"
#include "ehrseq/rng.hpp"

namespace ehrseq {

struct SyntheticConfig {
    std::size_t n_patients = 2000;
    std::size_t n_variables = 6;
    double mean_seq_len = 64.0;
    std::size_t n_outcomes = 3;
    std::size_t latent_dim_time = 4;
    std::size_t latent_dim_note = 4;
    double shared_info = 0.2;  // correlation between matching latent coordinates
    double label_noise = 0.02;
    std::size_t embed_dim = 16;
    std::size_t n_static = 5;
    std::uint64_t seed = 1;

    void validate() const {
        if (shared_info < 0.0 || shared_info > 1.0)
            throw std::invalid_argument("shared_info must lie in [0, 1]");
        if (n_patients == 0 || n_variables == 0 || n_outcomes == 0 || latent_dim_time == 0 ||
            latent_dim_note == 0 || embed_dim == 0 || mean_seq_len < 1.0)
            throw std::invalid_argument("synthetic config counts must be positive");
        if (label_noise < 0.0 || label_noise > 0.5)
            throw std::invalid_argument("label_noise must lie in [0, 0.5]");
    }
};

namespace detail {

struct CohortWeights {
    // per-variable event model
    std::vector<std::vector<double>> var_loading;  // V x k_t
    std::vector<double> var_bias, var_amp, var_freq, var_phase;
    std::vector<std::vector<double>> note_map;       // e x k_n
    std::vector<std::vector<double>> discharge_map;  // e x (k_t + k_n)
    std::vector<std::vector<double>> outcome_time;   // O x k_t
    std::vector<std::vector<double>> outcome_note;   // O x k_n
};

inline CohortWeights make_cohort_weights(const SyntheticConfig& cfg, Rng& rng) {
    CohortWeights w;
    const double lt = std::sqrt(static_cast<double>(cfg.latent_dim_time));
    const double ln = std::sqrt(static_cast<double>(cfg.latent_dim_note));
    const double lb = std::sqrt(static_cast<double>(cfg.latent_dim_time + cfg.latent_dim_note));
    for (std::size_t v = 0; v < cfg.n_variables; ++v) {
        std::vector<double> loading(cfg.latent_dim_time);
        for (auto& x : loading) x = rng.normal() / lt;
        w.var_loading.push_back(std::move(loading));
        w.var_bias.push_back(rng.normal() * 0.5);
        w.var_amp.push_back(0.1 + 0.2 * rng.uniform());
        w.var_freq.push_back(0.5 + 1.5 * rng.uniform());
        w.var_phase.push_back(2.0 * 3.141592653589793 * rng.uniform());
    }
    for (std::size_t i = 0; i < cfg.embed_dim; ++i) {
        std::vector<double> row(cfg.latent_dim_note);
        for (auto& x : row) x = rng.normal() / ln;
        w.note_map.push_back(std::move(row));
    }
    for (std::size_t i = 0; i < cfg.embed_dim; ++i) {
        std::vector<double> row(cfg.latent_dim_time + cfg.latent_dim_note);
        for (auto& x : row) x = rng.normal() / lb;
        w.discharge_map.push_back(std::move(row));
    }
    for (std::size_t o = 0; o < cfg.n_outcomes; ++o) {
        std::vector<double> gt(cfg.latent_dim_time), gn(cfg.latent_dim_note);
        for (auto& x : gt) x = rng.normal();
        for (auto& x : gn) x = rng.normal();
        w.outcome_time.push_back(std::move(gt));
        w.outcome_note.push_back(std::move(gn));
    }
    return w;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

constexpr double kEventNoise = 0.25;
constexpr double kChunkNoise = 0.3;
constexpr double kDischargeNoise = 0.3;
constexpr double kReadoutNoise = 0.25;
constexpr double kDuplicateProb = 0.25;
constexpr double kMissingStaticProb = 0.1;

// Prevalence targets cycled across outcomes; all inside [0.05, 0.5].
inline double prevalence_target(std::size_t outcome) {
    static constexpr double targets[] = {0.25, 0.15, 0.35, 0.20, 0.30, 0.10, 0.40, 0.12, 0.22};
    return targets[outcome % (sizeof(targets) / sizeof(targets[0]))];
}

}  // namespace detail

/// Per-patient latent factors, exposed for diagnostics.
struct SyntheticLatents {
    std::vector<std::vector<double>> z_time;
    std::vector<std::vector<double>> z_note;
};

inline Cohort generate_synthetic_cohort(const SyntheticConfig& cfg,
                                        SyntheticLatents* latents_out = nullptr) {
    cfg.validate();
    Rng weight_rng = Rng::derived(cfg.seed, 0);
    const detail::CohortWeights weights = detail::make_cohort_weights(cfg, weight_rng);
    const std::size_t shared_dims = std::min(cfg.latent_dim_time, cfg.latent_dim_note);
    const double rho = cfg.shared_info;
    const double rho_comp = std::sqrt(std::max(0.0, 1.0 - rho * rho));

    // First pass: draw latents and readout noises per patient so outcome
    // thresholds can be set at empirical quantiles matching the prevalence
    // targets. Each patient keeps its own stream; the saved Rng continues
    // where the first pass stopped.
    struct PatientLatents {
        std::vector<double> z_time, z_note, readout;
        Rng rng{0};
    };
    std::vector<PatientLatents> latents(cfg.n_patients);
    for (std::size_t i = 0; i < cfg.n_patients; ++i) {
        PatientLatents& p = latents[i];
        p.rng = Rng::derived(cfg.seed, i + 1);
        p.z_time.resize(cfg.latent_dim_time);
        for (auto& z : p.z_time) z = p.rng.normal();
        p.z_note.resize(cfg.latent_dim_note);
        for (std::size_t j = 0; j < cfg.latent_dim_note; ++j) {
            const double eps = p.rng.normal();
            p.z_note[j] = j < shared_dims ? rho * p.z_time[j] + rho_comp * eps : eps;
        }
        p.readout.resize(cfg.n_outcomes);
        for (std::size_t o = 0; o < cfg.n_outcomes; ++o)
            p.readout[o] = detail::dot(weights.outcome_time[o], p.z_time) +
                           detail::dot(weights.outcome_note[o], p.z_note) +
                           detail::kReadoutNoise * p.rng.normal();
    }
    std::vector<double> thresholds(cfg.n_outcomes);
    for (std::size_t o = 0; o < cfg.n_outcomes; ++o) {
        std::vector<double> readouts(cfg.n_patients);
        for (std::size_t i = 0; i < cfg.n_patients; ++i) readouts[i] = latents[i].readout[o];
        const auto cut = static_cast<std::size_t>(
            std::min<double>(static_cast<double>(cfg.n_patients - 1),
                             (1.0 - detail::prevalence_target(o)) *
                                 static_cast<double>(cfg.n_patients)));
        std::nth_element(readouts.begin(), readouts.begin() + static_cast<std::ptrdiff_t>(cut),
                         readouts.end());
        thresholds[o] = readouts[cut];
    }

    if (latents_out) {
        latents_out->z_time.clear();
        latents_out->z_note.clear();
        for (const auto& p : latents) {
            latents_out->z_time.push_back(p.z_time);
            latents_out->z_note.push_back(p.z_note);
        }
    }

    Cohort cohort(cfg.n_patients);
    bool any_duplicate = false;
    for (std::size_t i = 0; i < cfg.n_patients; ++i) {
        PatientLatents& p = latents[i];
        Rng& rng = p.rng;
        CohortRecord& r = cohort[i];
        r.patient_id = "p" + std::to_string(i);

        const double sigma = 0.35;
        const double mu = std::log(cfg.mean_seq_len) - 0.5 * sigma * sigma;
        const auto n_events =
            static_cast<std::size_t>(std::max(2.0, std::round(std::exp(rng.normal(mu, sigma)))));
        const double t0 = 1.6e9 + 86400.0 * rng.uniform();
        double t = t0;
        for (std::size_t k = 0; k < n_events; ++k) {
            if (k > 0) {
                if (rng.uniform() < detail::kDuplicateProb) {
                    any_duplicate = true;  // simultaneous measurement
                } else {
                    t += std::exp(rng.normal(std::log(60.0), 1.0));
                }
            }
            TimeSeriesEvent ev;
            ev.variable_id = static_cast<int>(rng.below(cfg.n_variables));
            ev.timestamp = t;
            const auto v = static_cast<std::size_t>(ev.variable_id);
            ev.value = detail::dot(weights.var_loading[v], p.z_time) + weights.var_bias[v] +
                       weights.var_amp[v] *
                           std::sin(weights.var_freq[v] * (t - t0) / 3600.0 +
                                    weights.var_phase[v]) +
                       detail::kEventNoise * rng.normal();
            r.events.push_back(ev);
        }

        r.static_features.resize(cfg.n_static);
        for (auto& s : r.static_features) {
            const double value = rng.normal();
            s = rng.uniform() < detail::kMissingStaticProb
                    ? std::numeric_limits<double>::quiet_NaN()
                    : value;
        }

        const std::size_t n_chunks = 1 + rng.below(4);
        for (std::size_t c = 0; c < n_chunks; ++c) {
            std::vector<double> chunk(cfg.embed_dim);
            for (std::size_t d = 0; d < cfg.embed_dim; ++d)
                chunk[d] = detail::dot(weights.note_map[d], p.z_note) +
                           detail::kChunkNoise * rng.normal();
            r.note_chunks.push_back(std::move(chunk));
        }

        std::vector<double> both(p.z_time);
        both.insert(both.end(), p.z_note.begin(), p.z_note.end());
        r.discharge_embedding.resize(cfg.embed_dim);
        for (std::size_t d = 0; d < cfg.embed_dim; ++d)
            r.discharge_embedding[d] =
                detail::dot(weights.discharge_map[d], both) + detail::kDischargeNoise * rng.normal();

        r.labels.resize(cfg.n_outcomes);
        for (std::size_t o = 0; o < cfg.n_outcomes; ++o) {
            int label = p.readout[o] > thresholds[o] ? 1 : 0;
            if (rng.uniform() < cfg.label_noise) label = 1 - label;
            r.labels[o] = label;
        }
    }

    // The tokenizer's tie handling must always be exercised: if no duplicate
    // timestamp was sampled anywhere, force one into the last record.
    if (!any_duplicate) {
        for (auto it = cohort.rbegin(); it != cohort.rend(); ++it) {
            if (it->events.size() >= 2) {
                it->events[1].timestamp = it->events[0].timestamp;
                break;
            }
        }
    }
    return cohort;
}

}  // namespace ehrseq
