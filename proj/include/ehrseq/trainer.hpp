#pragma once

// Training loop, patient-level splitting with train-only normalization,
// multitask evaluation, and the loss-regime experiment harness.
//
// Regimes without a cross-entropy term still fit the outcome heads every
// step as a concurrent linear probe: the probe's inputs are detached, so it
// reads the learned representation without steering it. That keeps AUROC
// comparable across purely contrastive and supervised regimes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ehrseq/checkpoint.hpp"
#include "ehrseq/cohort.hpp"
#include "ehrseq/config.hpp"
#include "ehrseq/metrics.hpp"
#include "ehrseq/model.hpp"
#include "ehrseq/objectives.hpp"

namespace ehrseq {

// ---------------------------------------------------------------------------
// splitting
// ---------------------------------------------------------------------------

struct SplitResult {
    Cohort train, val, test;  // normalized with train-split statistics
    NormalizationStats stats;
    std::vector<std::size_t> outcomes_without_train_positives;
};

inline SplitResult split_cohort(const Cohort& cohort, double train_frac, double val_frac,
                                double test_frac, std::uint64_t seed) {
    if (std::abs(train_frac + val_frac + test_frac - 1.0) > 1e-9)
        throw std::invalid_argument("split fractions must sum to 1");
    if (cohort.empty()) throw std::invalid_argument("cannot split an empty cohort");
    const std::size_t n = cohort.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng = Rng::derived(seed, 0x511F);
    rng.shuffle(order);
    auto n_train = static_cast<std::size_t>(std::llround(train_frac * static_cast<double>(n)));
    auto n_val = static_cast<std::size_t>(std::llround(val_frac * static_cast<double>(n)));
    n_train = std::min(n_train, n);
    n_val = std::min(n_val, n - n_train);

    Cohort raw_train, raw_val, raw_test;
    for (std::size_t i = 0; i < n; ++i) {
        const CohortRecord& r = cohort[order[i]];
        if (i < n_train)
            raw_train.push_back(r);
        else if (i < n_train + n_val)
            raw_val.push_back(r);
        else
            raw_test.push_back(r);
    }
    if (raw_train.empty()) throw std::invalid_argument("split leaves the training set empty");

    SplitResult result;
    result.stats = fit_stats(raw_train);
    auto normalize_all = [&](const Cohort& src, Cohort& dst) {
        dst.reserve(src.size());
        for (const auto& r : src) dst.push_back(apply_stats(r, result.stats));
    };
    normalize_all(raw_train, result.train);
    normalize_all(raw_val, result.val);
    normalize_all(raw_test, result.test);

    const std::size_t n_outcomes = cohort.front().labels.size();
    for (std::size_t o = 0; o < n_outcomes; ++o) {
        bool any_positive = false;
        for (const auto& r : raw_train)
            if (r.labels[o] == 1) any_positive = true;
        if (!any_positive) result.outcomes_without_train_positives.push_back(o);
    }
    return result;
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

inline EvalReport evaluate_split(const EhrModel& model, const Cohort& split) {
    if (split.empty()) throw std::invalid_argument("evaluate: empty split");
    const std::size_t n_outcomes = model.dims().n_outcomes;
    std::vector<std::vector<double>> scores(n_outcomes);
    std::vector<std::vector<int>> labels(n_outcomes);
    NoTapeScope eval;
    Rng unused(0);  // eval mode consumes no randomness
    ForwardOptions opts;
    for (const auto& record : split) {
        EhrModel::Output out = model.forward(record, unused, opts);
        for (std::size_t o = 0; o < n_outcomes; ++o) {
            scores[o].push_back(out.logits.at(0, o));
            labels[o].push_back(record.labels[o]);
        }
    }
    return make_eval_report(scores, labels);
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

struct EpochStats {
    std::size_t epoch = 0;
    double train_total = 0.0;
    double train_ce = 0.0;
    double train_alignment = 0.0;
    double val_mean_auroc = std::nan("");
};

struct TrainResult {
    Checkpoint best;         // state at the best validation epoch
    Checkpoint final_state;  // state after the last epoch
    std::vector<EpochStats> history;
    double best_val_auroc = -1.0;
    std::size_t best_epoch = 0;
};

namespace detail {

inline Tensor stack_outputs(const std::vector<Tensor>& rows) { return stack_rows(rows); }

inline Tensor labels_tensor(const Cohort& split, const std::vector<std::size_t>& batch,
                            std::size_t n_outcomes) {
    Tensor labels({batch.size(), n_outcomes});
    for (std::size_t b = 0; b < batch.size(); ++b)
        for (std::size_t o = 0; o < n_outcomes; ++o)
            labels.data()[b * n_outcomes + o] = static_cast<double>(split[batch[b]].labels[o]);
    return labels;
}

}  // namespace detail

/// Trains on pre-normalized splits. When `resume` is given, parameters,
/// optimizer moments, the RNG, and the epoch counter continue bitwise from
/// the snapshot.
inline TrainResult train(const FullConfig& cfg, const SplitResult& split,
                         std::ostream* log = nullptr, const Checkpoint* resume = nullptr) {
    cfg.train.validate();
    const RegimePlan plan = plan_for(cfg.train);
    if (split.train.size() < 2) throw std::invalid_argument("training split needs >= 2 records");

    for (std::size_t o : split.outcomes_without_train_positives) {
        if (log)
            *log << "warning: outcome " << o << " has no positive training examples\n";
    }

    ModelDims dims = dims_from_cohort(split.train, split.stats);
    EhrModel model(cfg.train, dims, cfg.train.seed);

    // regimes contrasting against the augmented discharge get it precomputed
    Cohort train_split = split.train;
    if (plan.use_augmented) {
        DischargeAugmenter augmenter(dims.n_variables, dims.embed_dim, cfg.train.lambda_augment);
        for (auto& r : train_split) r = augmenter.apply(r);
    }

    AdamState adam;
    adam.reset(model.params());
    AdamConfig adam_cfg;
    adam_cfg.lr = cfg.train.lr;
    adam_cfg.weight_decay = cfg.train.weight_decay;

    const std::string config_text = serialize_config(cfg);
    Rng train_rng = Rng::derived(cfg.train.seed, 0x7EA1);
    std::size_t start_epoch = 0;
    if (resume) start_epoch = restore_checkpoint(*resume, model.params(), adam, train_rng);

    TrainResult result;
    const std::size_t n_outcomes = dims.n_outcomes;
    std::vector<std::size_t> order(train_split.size());
    std::iota(order.begin(), order.end(), 0);

    for (std::size_t epoch = start_epoch; epoch < cfg.train.epochs; ++epoch) {
        train_rng.shuffle(order);
        EpochStats stats;
        stats.epoch = epoch;
        std::size_t n_batches = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += cfg.train.batch_size) {
            const std::size_t end = std::min(order.size(), begin + cfg.train.batch_size);
            std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                           order.begin() + static_cast<std::ptrdiff_t>(end));
            if (batch.size() < 2) continue;  // contrastive terms need pairs

            TapeScope tape;
            ForwardOptions opts;
            opts.train = true;
            opts.detach_heads = plan.probe_heads;
            opts.want_discharge = plan.use_global;
            opts.want_intermodal = plan.use_intermodal;
            opts.use_augmented = plan.use_augmented;

            std::vector<Tensor> logit_rows, hm_rows, hd_rows, ht_rows, hn_rows;
            for (std::size_t idx : batch) {
                EhrModel::Output out = model.forward(train_split[idx], train_rng, opts);
                logit_rows.push_back(out.logits);
                if (plan.use_global) {
                    hm_rows.push_back(out.h_m);
                    hd_rows.push_back(out.h_d);
                }
                if (plan.use_intermodal) {
                    ht_rows.push_back(out.h_time);
                    hn_rows.push_back(out.h_note);
                }
            }
            Tensor logits = detail::stack_outputs(logit_rows);
            Tensor labels = detail::labels_tensor(train_split, batch, n_outcomes);
            Tensor ce = multilabel_ce(logits, labels);

            AlignmentLoss align;
            if (plan.use_global || plan.use_intermodal) {
                ContrastiveBatch cb;
                cb.h_m = detail::stack_outputs(plan.use_global ? hm_rows : ht_rows);
                cb.h_d = detail::stack_outputs(plan.use_global ? hd_rows : hn_rows);
                cb.tau = cfg.train.tau;
                cb.mode = cfg.train.denominator_mode;
                align = alignment_loss(cb);
            } else {
                align.l_md = Tensor::scalar(0.0);
                align.l_dm = Tensor::scalar(0.0);
                align.l_alignment = Tensor::scalar(0.0);
            }

            LossReport report = total_loss(align, ce, {plan.alpha, plan.beta});
            // the concurrent probe trains heads through their detached inputs
            Tensor objective =
                plan.probe_heads ? add(report.l_total, report.l_ce) : report.l_total;
            if (!std::isfinite(objective.value()))
                throw std::runtime_error("non-finite loss at epoch " + std::to_string(epoch) +
                                         ", batch " + std::to_string(n_batches));
            backward(objective);
            adam_step(model.params(), adam, adam_cfg);
            model.params().zero_grads();

            stats.train_total += report.total();
            stats.train_ce += report.ce();
            stats.train_alignment += report.alignment();
            ++n_batches;
        }
        if (n_batches == 0) throw std::runtime_error("no trainable batches in epoch");
        stats.train_total /= static_cast<double>(n_batches);
        stats.train_ce /= static_cast<double>(n_batches);
        stats.train_alignment /= static_cast<double>(n_batches);

        if (!split.val.empty()) {
            EvalReport val_report = evaluate_split(model, split.val);
            stats.val_mean_auroc = val_report.mean_auroc();
        }
        result.history.push_back(stats);
        if (log) {
            *log << "epoch " << epoch << " total " << stats.train_total << " ce "
                 << stats.train_ce << " align " << stats.train_alignment;
            if (!std::isnan(stats.val_mean_auroc)) *log << " val_auroc " << stats.val_mean_auroc;
            *log << "\n";
        }

        const double score = std::isnan(stats.val_mean_auroc) ? -stats.train_total
                                                              : stats.val_mean_auroc;
        if (score > result.best_val_auroc) {
            result.best_val_auroc = score;
            result.best_epoch = epoch;
            result.best =
                make_checkpoint(config_text, model.params(), adam, epoch + 1, train_rng);
        }
    }
    result.final_state =
        make_checkpoint(config_text, model.params(), adam, cfg.train.epochs, train_rng);
    if (result.best.tensors.empty()) result.best = result.final_state;
    return result;
}

/// Builds a model from a checkpoint and the cohort it was trained on.
inline EhrModel model_from_checkpoint(const Checkpoint& ckpt, const SplitResult& split,
                                      FullConfig* cfg_out = nullptr) {
    FullConfig cfg = parse_config_text(ckpt.config_text);
    if (cfg_out) *cfg_out = cfg;
    ModelDims dims = dims_from_cohort(split.train, split.stats);
    EhrModel model(cfg.train, dims, cfg.train.seed);
    AdamState adam;
    Rng rng(0);
    restore_checkpoint(ckpt, model.params(), adam, rng);
    return model;
}

// ---------------------------------------------------------------------------
// experiment harness
// ---------------------------------------------------------------------------

struct ExperimentRow {
    std::string regime;
    std::uint64_t seed = 0;
    double mean_auroc = std::nan("");
    std::vector<double> per_outcome;
};

struct ExperimentVerdict {
    std::string better, worse;
    double better_mean = 0.0, worse_mean = 0.0;
    bool holds = false;
};

struct ExperimentResult {
    std::vector<ExperimentRow> rows;          // one per (regime, seed)
    std::vector<std::string> regimes;
    std::vector<double> regime_means;         // seed-averaged mean AUROC
    std::vector<double> regime_stds;
    std::vector<ExperimentVerdict> verdicts;  // pairwise orderings

    double mean_for(const std::string& regime) const {
        for (std::size_t i = 0; i < regimes.size(); ++i)
            if (regimes[i] == regime) return regime_means[i];
        throw std::out_of_range("regime '" + regime + "' not part of the experiment");
    }
};

/// Runs each regime over n_seeds seeds. Seed s uses one shared cohort and
/// split across regimes so comparisons are paired.
inline ExperimentResult run_experiment(const FullConfig& base,
                                       const std::vector<std::string>& regimes,
                                       std::size_t n_seeds, std::ostream* log = nullptr) {
    if (regimes.empty()) throw std::invalid_argument("experiment needs at least one regime");
    if (n_seeds == 0) throw std::invalid_argument("experiment needs at least one seed");
    ExperimentResult result;
    result.regimes = regimes;
    std::vector<std::vector<double>> per_regime_means(regimes.size());

    for (std::size_t s = 0; s < n_seeds; ++s) {
        SyntheticConfig synth = base.synth;
        synth.seed = base.synth.seed + s;
        Cohort cohort = generate_synthetic_cohort(synth);
        FullConfig cfg = base;
        cfg.synth = synth;
        cfg.train.seed = base.train.seed + s;
        SplitResult split = split_cohort(cohort, cfg.train.train_frac, cfg.train.val_frac,
                                         cfg.train.test_frac, cfg.train.seed);
        for (std::size_t r = 0; r < regimes.size(); ++r) {
            FullConfig run_cfg = cfg;
            run_cfg.train.regime = regime_from_string(regimes[r]);
            TrainResult trained = train(run_cfg, split, nullptr);
            SplitResult eval_split = split;
            EhrModel model = model_from_checkpoint(trained.best, eval_split);
            EvalReport report = evaluate_split(model, split.test);

            ExperimentRow row;
            row.regime = regimes[r];
            row.seed = run_cfg.train.seed;
            row.mean_auroc = report.mean_auroc();
            for (const auto& m : report.per_outcome) row.per_outcome.push_back(m.auroc_value);
            result.rows.push_back(row);
            per_regime_means[r].push_back(row.mean_auroc);
            if (log)
                *log << regimes[r] << " seed " << row.seed << " test mean AUROC "
                     << row.mean_auroc << "\n";
        }
    }

    for (std::size_t r = 0; r < regimes.size(); ++r) {
        const auto& means = per_regime_means[r];
        const double mean =
            std::accumulate(means.begin(), means.end(), 0.0) / static_cast<double>(means.size());
        double var = 0.0;
        for (double m : means) var += (m - mean) * (m - mean);
        var /= static_cast<double>(means.size());
        result.regime_means.push_back(mean);
        result.regime_stds.push_back(std::sqrt(var));
    }
    for (std::size_t a = 0; a < regimes.size(); ++a) {
        for (std::size_t b = a + 1; b < regimes.size(); ++b) {
            ExperimentVerdict verdict;
            const bool a_better = result.regime_means[a] >= result.regime_means[b];
            verdict.better = regimes[a_better ? a : b];
            verdict.worse = regimes[a_better ? b : a];
            verdict.better_mean = result.regime_means[a_better ? a : b];
            verdict.worse_mean = result.regime_means[a_better ? b : a];
            verdict.holds = true;
            result.verdicts.push_back(verdict);
        }
    }
    return result;
}

inline std::string experiment_csv(const ExperimentResult& result) {
    std::ostringstream os;
    std::size_t n_outcomes = 0;
    for (const auto& row : result.rows) n_outcomes = std::max(n_outcomes, row.per_outcome.size());
    os << "regime,seed,mean_auroc";
    for (std::size_t o = 0; o < n_outcomes; ++o) os << ",outcome" << o;
    os << "\n";
    char buf[32];
    auto fmt = [&](double v) {
        std::snprintf(buf, sizeof(buf), "%.6f", v);
        return std::string(buf);
    };
    for (const auto& row : result.rows) {
        os << row.regime << "," << row.seed << "," << fmt(row.mean_auroc);
        for (double v : row.per_outcome) os << "," << fmt(v);
        os << "\n";
    }
    for (std::size_t r = 0; r < result.regimes.size(); ++r) {
        os << result.regimes[r] << ",aggregate," << fmt(result.regime_means[r]);
        os << ",std=" << fmt(result.regime_stds[r]) << "\n";
    }
    return os.str();
}

}  // namespace ehrseq
