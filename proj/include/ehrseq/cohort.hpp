#pragma once

// Patient-encounter data model: static features, an irregular multivariate
// event stream, note-chunk embeddings, a discharge-summary embedding, and
// binary outcome labels. Includes JSONL persistence, normalization statistics
// fitted on a training split, and the deterministic discharge augmentation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ehrseq/binio.hpp"
#include "ehrseq/rng.hpp"

namespace ehrseq {

struct TimeSeriesEvent {
    int variable_id = 0;
    double timestamp = 0.0;  // unix seconds (raw) or z-scored (normalized)
    double value = 0.0;

    bool operator==(const TimeSeriesEvent&) const = default;
};

struct CohortRecord {
    std::string patient_id;
    std::vector<double> static_features;  // NaN marks a missing entry
    std::vector<TimeSeriesEvent> events;  // kept sorted ascending by timestamp
    std::vector<std::vector<double>> note_chunks;
    std::vector<double> discharge_embedding;
    std::vector<double> augmented_discharge;  // empty until augmentation runs
    std::vector<int> labels;

    std::size_t embedding_dim() const { return discharge_embedding.size(); }
};

using Cohort = std::vector<CohortRecord>;

inline bool records_equal(const CohortRecord& a, const CohortRecord& b, double tol = 0.0) {
    auto close = [tol](double x, double y) {
        if (std::isnan(x) && std::isnan(y)) return true;
        return tol == 0.0 ? x == y : std::abs(x - y) <= tol;
    };
    if (a.patient_id != b.patient_id || a.labels != b.labels) return false;
    if (a.static_features.size() != b.static_features.size()) return false;
    for (std::size_t i = 0; i < a.static_features.size(); ++i)
        if (!close(a.static_features[i], b.static_features[i])) return false;
    if (a.events.size() != b.events.size()) return false;
    for (std::size_t i = 0; i < a.events.size(); ++i) {
        if (a.events[i].variable_id != b.events[i].variable_id) return false;
        if (!close(a.events[i].timestamp, b.events[i].timestamp)) return false;
        if (!close(a.events[i].value, b.events[i].value)) return false;
    }
    if (a.note_chunks.size() != b.note_chunks.size()) return false;
    for (std::size_t c = 0; c < a.note_chunks.size(); ++c) {
        if (a.note_chunks[c].size() != b.note_chunks[c].size()) return false;
        for (std::size_t i = 0; i < a.note_chunks[c].size(); ++i)
            if (!close(a.note_chunks[c][i], b.note_chunks[c][i])) return false;
    }
    if (a.discharge_embedding.size() != b.discharge_embedding.size()) return false;
    for (std::size_t i = 0; i < a.discharge_embedding.size(); ++i)
        if (!close(a.discharge_embedding[i], b.discharge_embedding[i])) return false;
    return true;
}

// ---------------------------------------------------------------------------
// JSONL persistence (one record object per line)
// ---------------------------------------------------------------------------

namespace detail {

inline nlohmann::json record_to_json(const CohortRecord& r) {
    nlohmann::json j;
    j["patient_id"] = r.patient_id;
    nlohmann::json statics = nlohmann::json::array();
    for (double v : r.static_features) {
        if (std::isnan(v))
            statics.push_back(nullptr);
        else
            statics.push_back(v);
    }
    j["static"] = std::move(statics);
    nlohmann::json events = nlohmann::json::array();
    for (const auto& e : r.events)
        events.push_back(nlohmann::json::array({e.variable_id, e.timestamp, e.value}));
    j["events"] = std::move(events);
    j["note_chunks"] = r.note_chunks;
    j["discharge"] = r.discharge_embedding;
    j["labels"] = r.labels;
    return j;
}

inline CohortRecord record_from_json(const nlohmann::json& j) {
    CohortRecord r;
    r.patient_id = j.at("patient_id").get<std::string>();
    for (const auto& v : j.at("static")) {
        if (v.is_null())
            r.static_features.push_back(std::numeric_limits<double>::quiet_NaN());
        else
            r.static_features.push_back(v.get<double>());
    }
    for (const auto& e : j.at("events")) {
        if (!e.is_array() || e.size() != 3)
            throw std::invalid_argument("event must be a [variable_id, timestamp, value] triple");
        TimeSeriesEvent ev;
        ev.variable_id = e[0].get<int>();
        ev.timestamp = e[1].get<double>();
        ev.value = e[2].get<double>();
        if (ev.variable_id < 0) throw std::invalid_argument("negative variable_id");
        if (!std::isfinite(ev.timestamp)) throw std::invalid_argument("non-finite timestamp");
        r.events.push_back(ev);
    }
    r.note_chunks = j.at("note_chunks").get<std::vector<std::vector<double>>>();
    r.discharge_embedding = j.at("discharge").get<std::vector<double>>();
    for (const auto& v : j.at("labels")) {
        const int label = v.get<int>();
        if (label != 0 && label != 1)
            throw std::invalid_argument("label outside {0,1}: " + std::to_string(label));
        r.labels.push_back(label);
    }
    const std::size_t e_dim = r.discharge_embedding.size();
    for (const auto& chunk : r.note_chunks)
        if (chunk.size() != e_dim)
            throw std::invalid_argument("note chunk dimension " + std::to_string(chunk.size()) +
                                        " disagrees with discharge dimension " +
                                        std::to_string(e_dim));
    std::stable_sort(r.events.begin(), r.events.end(),
                     [](const auto& a, const auto& b) { return a.timestamp < b.timestamp; });
    return r;
}

}  // namespace detail

inline void save_cohort(const std::string& path, const Cohort& cohort) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    for (const auto& r : cohort) out << detail::record_to_json(r).dump() << '\n';
}

inline Cohort load_cohort(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open cohort file '" + path + "'");
    Cohort cohort;
    std::string line;
    std::size_t line_no = 0;
    std::optional<std::size_t> e_dim;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            cohort.push_back(detail::record_from_json(nlohmann::json::parse(line)));
        } catch (const std::exception& e) {
            throw std::runtime_error(path + ":" + std::to_string(line_no) +
                                     ": malformed record: " + e.what());
        }
        const std::size_t dim = cohort.back().embedding_dim();
        if (e_dim && dim != *e_dim)
            throw std::runtime_error(path + ":" + std::to_string(line_no) +
                                     ": embedding dimension " + std::to_string(dim) +
                                     " disagrees with earlier records (" +
                                     std::to_string(*e_dim) + ")");
        e_dim = dim;
    }
    return cohort;
}

inline std::string cohort_summary(const Cohort& cohort) {
    std::size_t events = 0, chunks = 0;
    for (const auto& r : cohort) {
        events += r.events.size();
        chunks += r.note_chunks.size();
    }
    std::ostringstream os;
    os << cohort.size() << " records, " << events << " events, " << chunks << " note chunks";
    return os.str();
}

// ---------------------------------------------------------------------------
// normalization statistics (fitted on the training split only)
// ---------------------------------------------------------------------------

struct NormalizationStats {
    std::vector<double> variable_mean;
    std::vector<double> variable_std;  // population std, floored
    std::vector<double> static_median;
    double time_mean = 0.0;
    double time_std = 1.0;

    std::size_t n_variables() const { return variable_mean.size(); }

    std::uint64_t fingerprint() const {
        std::uint64_t h = binio::fnv1a(variable_mean.data(), variable_mean.size() * 8);
        h = binio::fnv1a(variable_std.data(), variable_std.size() * 8, h);
        h = binio::fnv1a(static_median.data(), static_median.size() * 8, h);
        h = binio::fnv1a(&time_mean, 8, h);
        h = binio::fnv1a(&time_std, 8, h);
        return h;
    }
};

namespace detail {
// Values indistinguishable from constant are floored to unit scale so
// normalization maps them to zero.
inline double floored_std(double variance) {
    const double std = std::sqrt(std::max(variance, 0.0));
    return std <= 1e-6 ? 1.0 : std;
}

inline double median_of(std::vector<double>& v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    if (n % 2 == 1) return v[n / 2];
    return 0.5 * (v[n / 2 - 1] + v[n / 2]);
}
}  // namespace detail

inline NormalizationStats fit_stats(const Cohort& train) {
    if (train.empty()) throw std::invalid_argument("fit_stats: empty training split");
    int max_var = -1;
    for (const auto& r : train)
        for (const auto& e : r.events) max_var = std::max(max_var, e.variable_id);
    const std::size_t n_vars = static_cast<std::size_t>(max_var + 1);

    NormalizationStats stats;
    stats.variable_mean.assign(n_vars, 0.0);
    stats.variable_std.assign(n_vars, 1.0);
    std::vector<double> sum(n_vars, 0.0), sum_sq(n_vars, 0.0);
    std::vector<std::size_t> count(n_vars, 0);
    double t_sum = 0.0, t_sum_sq = 0.0;
    std::size_t t_count = 0;
    for (const auto& r : train) {
        for (const auto& e : r.events) {
            const auto v = static_cast<std::size_t>(e.variable_id);
            sum[v] += e.value;
            sum_sq[v] += e.value * e.value;
            ++count[v];
            t_sum += e.timestamp;
            t_sum_sq += e.timestamp * e.timestamp;
            ++t_count;
        }
    }
    for (std::size_t v = 0; v < n_vars; ++v) {
        if (count[v] == 0) continue;  // unseen id in [0, V): keep (0, 1)
        const double mean = sum[v] / static_cast<double>(count[v]);
        stats.variable_mean[v] = mean;
        stats.variable_std[v] =
            detail::floored_std(sum_sq[v] / static_cast<double>(count[v]) - mean * mean);
    }
    if (t_count > 0) {
        stats.time_mean = t_sum / static_cast<double>(t_count);
        stats.time_std = detail::floored_std(
            t_sum_sq / static_cast<double>(t_count) - stats.time_mean * stats.time_mean);
    }

    const std::size_t n_static = train.front().static_features.size();
    stats.static_median.assign(n_static, 0.0);
    for (std::size_t f = 0; f < n_static; ++f) {
        std::vector<double> observed;
        for (const auto& r : train) {
            if (r.static_features.size() != n_static)
                throw std::invalid_argument("inconsistent static feature count across records");
            if (!std::isnan(r.static_features[f])) observed.push_back(r.static_features[f]);
        }
        stats.static_median[f] = detail::median_of(observed);
    }
    return stats;
}

/// Z-scores event values and timestamps and imputes missing statics with the
/// training medians. The input record is left untouched.
inline CohortRecord apply_stats(const CohortRecord& record, const NormalizationStats& stats) {
    CohortRecord out = record;
    for (auto& e : out.events) {
        if (e.variable_id < 0 || static_cast<std::size_t>(e.variable_id) >= stats.n_variables())
            throw std::out_of_range("apply_stats: variable_id " + std::to_string(e.variable_id) +
                                    " outside fitted range [0, " +
                                    std::to_string(stats.n_variables()) + ")");
        const auto v = static_cast<std::size_t>(e.variable_id);
        e.value = (e.value - stats.variable_mean[v]) / stats.variable_std[v];
        e.timestamp = (e.timestamp - stats.time_mean) / stats.time_std;
    }
    if (out.static_features.size() != stats.static_median.size())
        throw std::invalid_argument("apply_stats: static feature count mismatch");
    for (std::size_t f = 0; f < out.static_features.size(); ++f)
        if (std::isnan(out.static_features[f])) out.static_features[f] = stats.static_median[f];
    return out;
}

// ---------------------------------------------------------------------------
// discharge augmentation
// ---------------------------------------------------------------------------

/// Enriches the discharge embedding with per-variable event descriptors
/// (count, min, max, last value, trend sign) pushed through a fixed seeded
/// random projection. Deterministic and content-only: identical event streams
/// produce identical descriptors.
class DischargeAugmenter {
public:
    DischargeAugmenter(std::size_t n_variables, std::size_t embed_dim, double lambda = 0.25)
        : n_variables_(n_variables), embed_dim_(embed_dim), lambda_(lambda) {
        const std::size_t raw_dim = n_variables_ * kStatsPerVariable;
        projection_.resize(embed_dim_ * raw_dim);
        Rng rng = Rng::derived(0x44455343u /* fixed projection seed */,
                               n_variables_ * 1000003ULL + embed_dim_);
        const double scale = 1.0 / std::sqrt(static_cast<double>(raw_dim));
        for (auto& p : projection_) p = rng.normal() * scale;
    }

    std::vector<double> descriptor(const CohortRecord& record) const {
        std::vector<double> raw(n_variables_ * kStatsPerVariable, 0.0);
        for (std::size_t v = 0; v < n_variables_; ++v) {
            double mn = 0.0, mx = 0.0, last = 0.0;
            std::size_t count = 0;
            double t_sum = 0.0, v_sum = 0.0;
            std::vector<std::pair<double, double>> points;
            for (const auto& e : record.events) {
                if (static_cast<std::size_t>(e.variable_id) != v) continue;
                if (count == 0) {
                    mn = mx = e.value;
                } else {
                    mn = std::min(mn, e.value);
                    mx = std::max(mx, e.value);
                }
                last = e.value;
                t_sum += e.timestamp;
                v_sum += e.value;
                points.emplace_back(e.timestamp, e.value);
                ++count;
            }
            double slope_sign = 0.0;
            if (count >= 2) {
                const double t_bar = t_sum / static_cast<double>(count);
                const double v_bar = v_sum / static_cast<double>(count);
                double num = 0.0, den = 0.0;
                for (const auto& [t, val] : points) {
                    num += (t - t_bar) * (val - v_bar);
                    den += (t - t_bar) * (t - t_bar);
                }
                if (den > 0.0 && num != 0.0) slope_sign = num > 0.0 ? 1.0 : -1.0;
            }
            double* block = &raw[v * kStatsPerVariable];
            block[0] = std::log1p(static_cast<double>(count));
            block[1] = mn;
            block[2] = mx;
            block[3] = last;
            block[4] = slope_sign;
        }
        std::vector<double> out(embed_dim_, 0.0);
        for (std::size_t i = 0; i < embed_dim_; ++i)
            for (std::size_t j = 0; j < raw.size(); ++j)
                out[i] += projection_[i * raw.size() + j] * raw[j];
        return out;
    }

    /// Returns a copy with augmented_discharge = normalize(discharge + lambda * descriptor).
    CohortRecord apply(const CohortRecord& record) const {
        if (record.discharge_embedding.size() != embed_dim_)
            throw std::invalid_argument("discharge dimension " +
                                        std::to_string(record.discharge_embedding.size()) +
                                        " does not match augmenter dimension " +
                                        std::to_string(embed_dim_));
        CohortRecord out = record;
        const std::vector<double> desc = descriptor(record);
        std::vector<double> combined(embed_dim_);
        double norm_sq = 0.0;
        for (std::size_t i = 0; i < embed_dim_; ++i) {
            combined[i] = record.discharge_embedding[i] + lambda_ * desc[i];
            norm_sq += combined[i] * combined[i];
        }
        const double norm = std::sqrt(norm_sq);
        if (norm < 1e-12) {
            out.augmented_discharge = record.discharge_embedding;  // degenerate input
            return out;
        }
        for (auto& v : combined) v /= norm;
        out.augmented_discharge = std::move(combined);
        return out;
    }

    double lambda() const { return lambda_; }

private:
    static constexpr std::size_t kStatsPerVariable = 5;
    std::size_t n_variables_;
    std::size_t embed_dim_;
    double lambda_;
    std::vector<double> projection_;
};

inline CohortRecord augment_discharge(const CohortRecord& record, std::size_t n_variables,
                                      double lambda = 0.25) {
    return DischargeAugmenter(n_variables, record.embedding_dim(), lambda).apply(record);
}

}  // namespace ehrseq
