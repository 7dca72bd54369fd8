#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "adam.hpp"
#include "autodiff.hpp"
#include "config.hpp"
#include "contrastive.hpp"
#include "data.hpp"
#include "errors.hpp"
#include "eval.hpp"
#include "model.hpp"
#include "rng.hpp"
#include "session_graph.hpp"

namespace simcgnn {

/// Mean over the batch of -log p[label]; p clamped below at 1e-12.
/// Labels are item indices, so column label-1.
inline ad::var prediction_loss(ad::var probs, const std::vector<item_index>& labels, std::size_t* clamped = nullptr) {
    const tensor& p = probs.value();
    if (p.rank() != 2 || p.dim(0) != labels.size())
        throw dimension_error("prediction_loss: probabilities " + detail::shape_string(p.shape()) + " for " +
                              std::to_string(labels.size()) + " labels");
    std::vector<std::size_t> cols(labels.size());
    for (std::size_t b = 0; b < labels.size(); ++b) {
        if (labels[b] == padding_index || labels[b] > p.dim(1))
            throw contract_error("prediction_loss: label " + std::to_string(labels[b]) + " outside 1.." +
                                 std::to_string(p.dim(1)));
        cols[b] = labels[b] - 1;
    }
    return ad::scale(ad::mean(ad::log(ad::pick(probs, cols), 1e-12, clamped)), -1.0);
}

/// Sum of squares over every trainable tensor, padding row excluded.
inline ad::var squared_norm(const bound_parameters& p) {
    const std::size_t rows = p.item_embeddings.value().dim(0);
    ad::var emb = ad::slice_rows(p.item_embeddings, 1, rows);
    ad::var total = ad::sum(emb * emb);
    for (const ad::var& v : p.all()) {
        if (v.id() == p.item_embeddings.id()) continue;
        total = total + ad::sum(v * v);
    }
    return total;
}

/// L = L_pred + beta L_con + lambda ||Theta||^2. Terms with a zero weight are
/// not recorded at all; `con` may be empty when beta is 0.
inline ad::var total_loss(ad::var pred, std::optional<ad::var> con, double beta, double lambda,
                          const bound_parameters& p) {
    if (beta < 0.0 || lambda < 0.0) throw contract_error("total_loss: beta and lambda must be >= 0");
    ad::var out = pred;
    if (beta > 0.0) {
        if (!con) throw contract_error("total_loss: beta > 0 without a contrastive term");
        out = out + ad::scale(*con, beta);
    }
    if (lambda > 0.0) out = out + ad::scale(squared_norm(p), lambda);
    return out;
}

// lr for a 1-based epoch: base * decay^floor((epoch-1)/every).
inline double learning_rate(const train_config& c, std::size_t epoch) {
    detail::require(epoch >= 1, "learning_rate: epochs are 1-based");
    // dividing by (1/decay)^k keeps 1e-3 -> 1e-4 -> 1e-5 on the decimal grid
    return c.lr / std::pow(1.0 / c.lr_decay, static_cast<double>((epoch - 1) / c.lr_decay_every));
}

/// Counts of code paths taken during training; tests use them to check that
/// each ablation flag switches exactly one path.
struct path_markers {
    std::size_t forward_passes = 0;
    std::size_t contrastive_terms = 0;
    std::size_t cosine_scoring = 0;
    std::size_t inner_product_scoring = 0;
    std::size_t positional_terms = 0;
    std::size_t same_last_item_draws = 0;
    std::size_t random_draws = 0;

    friend bool operator==(const path_markers&, const path_markers&) = default;
};

struct epoch_record {
    std::size_t epoch = 0;
    double lr = 0.0;
    double loss = 0.0;             // example-weighted mean of batch totals
    double loss_pred = 0.0;
    double loss_con = 0.0;
    double loss_median = 0.0;      // median batch total
    std::optional<double> valid_recall;
    std::optional<double> valid_mrr;
    std::size_t steps = 0;
    std::size_t fallback_draws = 0; // anchors whose same-last-item pool was empty
    std::size_t skipped_anchors = 0; // anchors with no negative at all
    std::size_t clamped_probs = 0;
    double seconds = 0.0;

    // wall clock is excluded: it is the only non-deterministic field
    friend bool operator==(const epoch_record& a, const epoch_record& b) {
        return a.epoch == b.epoch && a.lr == b.lr && a.loss == b.loss && a.loss_pred == b.loss_pred &&
               a.loss_con == b.loss_con && a.loss_median == b.loss_median && a.valid_recall == b.valid_recall && a.valid_mrr == b.valid_mrr &&
               a.steps == b.steps && a.fallback_draws == b.fallback_draws &&
               a.skipped_anchors == b.skipped_anchors && a.clamped_probs == b.clamped_probs;
    }
};

struct train_report {
    std::vector<epoch_record> epochs;
    std::size_t train_sessions = 0;
    std::size_t valid_sessions = 0;
    std::size_t steps = 0;
    std::size_t eval_k = 20;
    bool diverged = false;
    std::string divergence;
    path_markers paths;

    friend bool operator==(const train_report&, const train_report&) = default;
};

struct train_result {
    parameter_store params;
    train_report report;
};

/// Training/validation partition of the training sessions. The holdout is a
/// seeded random subset of size floor(fraction * n).
struct train_split {
    std::vector<session> train;
    std::vector<session> valid;
};

inline train_split split_validation(const std::vector<session>& sessions, double fraction, rng r) {
    std::vector<std::size_t> order(sessions.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    r.shuffle(order);
    const auto n_valid = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(sessions.size())));
    train_split out;
    std::vector<char> is_valid(sessions.size(), 0);
    for (std::size_t i = 0; i < n_valid; ++i) is_valid[order[i]] = 1;
    for (std::size_t i = 0; i < sessions.size(); ++i) (is_valid[i] ? out.valid : out.train).push_back(sessions[i]);
    return out;
}

using epoch_observer = std::function<void(const epoch_record&, const parameter_store&)>;

namespace detail {
inline bool finite_params(const parameter_store& p) {
    for (const auto& [n, t] : p.named())
        if (!t->all_finite()) return false;
    return true;
}
} // namespace detail

/// Trains on `training` (already prefix-augmented) over items 1..num_items.
///
/// All randomness derives from cfg.train.seed through named substreams:
/// "init", "split", "shuffle", "dropout", "negatives". A non-finite loss or
/// parameter stops training; the returned parameters are the last finite
/// ones and the report is flagged diverged.
inline train_result train(const std::vector<session>& training, std::size_t num_items, const config& cfg,
                          const epoch_observer& observer = {}) {
    cfg.validate();
    if (training.empty()) throw empty_dataset_error("train: empty training set");
    const rng root(cfg.train.seed);
    const model_config& mc = cfg.model;
    const contrastive_config& cc = cfg.contrastive;
    const bool contrast = cc.active();

    train_split split = split_validation(training, cfg.train.valid_fraction, root.split("split"));
    if (split.train.empty()) throw empty_dataset_error("train: validation holdout consumed the training set");

    train_result result;
    result.params = parameter_store::initialize(num_items, mc, root.split("init"));
    train_report& rep = result.report;
    rep.train_sessions = split.train.size();
    rep.valid_sessions = split.valid.size();
    rep.eval_k = cfg.train.eval_k;

    rng shuffle_rng = root.split("shuffle");
    rng dropout_rng = root.split("dropout");
    rng negative_rng = root.split("negatives");
    memory_bank bank;
    if (contrast) bank = memory_bank(split.train, mc.d);
    adam_state opt(adam_options{.lr = cfg.train.lr});

    std::vector<std::size_t> order(split.train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::size_t bs = cfg.train.batch_size;

    for (std::size_t epoch = 1; epoch <= cfg.train.epochs; ++epoch) {
        const auto started = std::chrono::steady_clock::now();
        epoch_record er;
        er.epoch = epoch;
        er.lr = learning_rate(cfg.train, epoch);
        opt.options().lr = er.lr;
        shuffle_rng.shuffle(order);

        double sum_total = 0.0, sum_pred = 0.0, sum_con = 0.0;
        std::vector<double> batch_losses;
        std::size_t seen = 0;
        for (std::size_t begin = 0; begin < order.size() && !rep.diverged; begin += bs) {
            const std::size_t end = std::min(order.size(), begin + bs);
            std::vector<std::size_t> ids(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                         order.begin() + static_cast<std::ptrdiff_t>(end));
            std::vector<session> batch;
            std::vector<item_index> labels;
            for (std::size_t id : ids) {
                batch.push_back(split.train[id]);
                labels.push_back(split.train[id].label);
            }
            const graph_batch g = batch_graphs(batch);

            ad::tape t;
            t.set_training(true);
            t.set_dropout_rng(dropout_rng);
            const bound_parameters bp = bound_parameters::bind(t, result.params);

            forward_result f1, f2;
            if (contrast) {
                std::tie(f1, f2) = twin_forward(bp, mc, g);
                rep.paths.forward_passes += 2;
            } else {
                f1 = encode_sessions(bp, mc, g);
                rep.paths.forward_passes += 1;
            }
            if (mc.pe) ++rep.paths.positional_terms;
            ++(mc.norm ? rep.paths.cosine_scoring : rep.paths.inner_product_scoring);

            ad::var logits = score(f1.s_hybrid, bp.item_embeddings, mc.r, mc.norm);
            ad::var pred = prediction_loss(softmax_probs(logits), labels, &er.clamped_probs);

            std::optional<ad::var> con;
            if (contrast) {
                std::vector<tensor> negatives;
                negatives.reserve(ids.size());
                for (std::size_t id : ids) {
                    negative_sample ns =
                        sample_negatives(id, split.train[id].last(), bank, cc.negatives, cc.strategy, negative_rng);
                    er.fallback_draws += ns.fallback ? 1 : 0;
                    er.skipped_anchors += ns.skipped ? 1 : 0;
                    negatives.push_back(std::move(ns.vectors));
                }
                ++(cc.strategy == negative_strategy::same_last_item ? rep.paths.same_last_item_draws
                                                                    : rep.paths.random_draws);
                con = contrastive_loss(f1.s_hybrid, f2.s_hybrid, negatives, cc.tau, cc.literal_denominator);
                ++rep.paths.contrastive_terms;
            }
            ad::var loss = total_loss(pred, con, contrast ? cc.beta : 0.0, cfg.train.weight_decay, bp);
            dropout_rng = t.dropout_rng();

            const double lv = loss.value().item();
            if (!std::isfinite(lv)) {
                rep.diverged = true;
                rep.divergence = "non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                                 std::to_string(rep.steps + 1);
                break;
            }
            t.backward(loss);
            std::vector<tensor> grads;
            for (const ad::var& v : bp.all()) grads.push_back(t.grad(v));
            parameter_store before = result.params;
            opt.step(result.params.tensors(), grads);
            if (!detail::finite_params(result.params)) {
                result.params = std::move(before);
                rep.diverged = true;
                rep.divergence = "non-finite parameters at epoch " + std::to_string(epoch) + ", step " +
                                 std::to_string(rep.steps + 1);
                break;
            }
            if (contrast) bank_update(bank, ids, f1.s_hybrid.value(), f2.s_hybrid.value());

            const auto n = static_cast<double>(ids.size());
            sum_total += lv * n;
            batch_losses.push_back(lv);
            sum_pred += pred.value().item() * n;
            if (con) sum_con += con->value().item() * n;
            seen += ids.size();
            ++er.steps;
            ++rep.steps;
        }
        if (seen > 0) {
            er.loss = sum_total / static_cast<double>(seen);
            er.loss_pred = sum_pred / static_cast<double>(seen);
            er.loss_con = sum_con / static_cast<double>(seen);
            std::sort(batch_losses.begin(), batch_losses.end());
            const std::size_t h = batch_losses.size() / 2;
            er.loss_median = batch_losses.size() % 2 ? batch_losses[h] : 0.5 * (batch_losses[h - 1] + batch_losses[h]);
        }
        if (!split.valid.empty() && !rep.diverged) {
            const auto lists = model_rankings(result.params, mc, split.valid, cfg.train.eval_k);
            const auto labels = labels_of(split.valid);
            er.valid_recall = recall_at_k(lists, labels, cfg.train.eval_k);
            er.valid_mrr = mrr_at_k(lists, labels, cfg.train.eval_k);
        }
        er.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        rep.epochs.push_back(er);
        if (observer) observer(er, result.params);
        if (rep.diverged) break;
    }
    return result;
}

inline train_result train(const dataset& ds, const config& cfg, const epoch_observer& observer = {}) {
    return train(ds.train, ds.vocab.size(), cfg, observer);
}

} // namespace simcgnn
