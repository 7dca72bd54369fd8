#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "autodiff.hpp"
#include "config.hpp"
#include "data.hpp"
#include "errors.hpp"
#include "model.hpp"
#include "rng.hpp"

namespace simcgnn {

/// Cached twin embeddings for every training session, plus an inverted index
/// from last item to the sessions ending in it. Entries start invalid and
/// become valid at their first update. Stored vectors are plain values, so
/// no gradient can flow through them.
class memory_bank {
public:
    memory_bank() = default;

    memory_bank(const std::vector<session>& training, std::size_t dim)
        : dim_(dim), first_({training.size(), dim}), second_({training.size(), dim}), valid_(training.size(), 0) {
        last_.reserve(training.size());
        for (std::size_t i = 0; i < training.size(); ++i) {
            detail::require(!training[i].items.empty(), "memory_bank: empty training session");
            last_.push_back(training[i].last());
            by_last_[training[i].last()].push_back(i);
        }
    }

    std::size_t size() const { return valid_.size(); }
    std::size_t dim() const { return dim_; }
    std::size_t valid_count() const { return valid_ids_.size(); }
    bool valid(std::size_t id) const { return valid_.at(id) != 0; }
    item_index last_item(std::size_t id) const { return last_.at(id); }

    std::span<const double> first(std::size_t id) const { return first_.row(id); }
    std::span<const double> second(std::size_t id) const { return second_.row(id); }

    const std::vector<std::size_t>& sessions_ending_in(item_index item) const {
        static const std::vector<std::size_t> none;
        auto it = by_last_.find(item);
        return it == by_last_.end() ? none : it->second;
    }

    const std::vector<std::size_t>& valid_ids() const { return valid_ids_; }

    void update(std::size_t id, std::span<const double> f1, std::span<const double> f2) {
        if (id >= valid_.size())
            throw contract_error("bank_update: unknown session id " + std::to_string(id) + " (bank holds " +
                                 std::to_string(valid_.size()) + ")");
        if (f1.size() != dim_ || f2.size() != dim_) throw dimension_error("bank_update: vector width mismatch");
        std::copy(f1.begin(), f1.end(), first_.row(id).begin());
        std::copy(f2.begin(), f2.end(), second_.row(id).begin());
        if (!valid_[id]) {
            valid_[id] = 1;
            valid_ids_.push_back(id);
        }
    }

private:
    std::size_t dim_ = 0;
    tensor first_;
    tensor second_;
    std::vector<char> valid_;
    std::vector<std::size_t> valid_ids_;
    std::vector<item_index> last_;
    std::unordered_map<item_index, std::vector<std::size_t>> by_last_;
};

// Writes row b of s1 and s2 to the bank entries of the given session ids.
inline void bank_update(memory_bank& bank, const std::vector<std::size_t>& session_ids, const tensor& s1,
                        const tensor& s2) {
    for (std::size_t b = 0; b < session_ids.size(); ++b) bank.update(session_ids[b], s1.row(b), s2.row(b));
}

struct negative_sample {
    std::vector<std::size_t> sessions; // sampled bank entries
    tensor vectors;                    // (2 * sessions.size(), d): f1 and f2 of each
    bool fallback = false;             // same-last-item pool was empty
    bool skipped = false;              // no valid entry at all besides the anchor
};

namespace detail {

// Up to n distinct members of pool that are valid and differ from `self`.
inline std::vector<std::size_t> sample_distinct(const std::vector<std::size_t>& pool, std::size_t self,
                                                const memory_bank& bank, std::size_t n, rng& r, bool pool_all_valid) {
    std::vector<std::size_t> eligible;
    const bool small = pool.size() <= 4 * n + 8;
    if (small || !pool_all_valid) {
        for (std::size_t id : pool)
            if (id != self && bank.valid(id)) eligible.push_back(id);
        if (eligible.size() <= n) return eligible;
        for (std::size_t i = 0; i < n; ++i) std::swap(eligible[i], eligible[i + r.below(eligible.size() - i)]);
        eligible.resize(n);
        return eligible;
    }
    // large pool of valid ids: rejection sampling
    std::unordered_set<std::size_t> seen;
    std::vector<std::size_t> out;
    while (out.size() < n) {
        const std::size_t id = pool[r.below(pool.size())];
        if (id == self || !seen.insert(id).second) continue;
        out.push_back(id);
    }
    return out;
}

} // namespace detail

/// Negatives for one anchor.
///
/// same_last_item: up to n sessions drawn uniformly from those sharing the
/// anchor's last item (anchor excluded, invalid entries never used); if none
/// qualifies, falls back to uniform valid entries. random: uniform over all
/// valid entries except the anchor. Each sampled session contributes both
/// cached twins.
inline negative_sample sample_negatives(std::size_t session_id, item_index last_item, const memory_bank& bank,
                                        std::size_t n, negative_strategy strategy, rng& r) {
    negative_sample out;
    if (strategy == negative_strategy::same_last_item) {
        out.sessions = detail::sample_distinct(bank.sessions_ending_in(last_item), session_id, bank, n, r, false);
        if (out.sessions.empty()) out.fallback = true;
    }
    if (strategy == negative_strategy::random || out.fallback)
        out.sessions = detail::sample_distinct(bank.valid_ids(), session_id, bank, n, r, true);
    if (out.sessions.empty()) out.skipped = true;

    out.vectors = tensor({2 * out.sessions.size(), bank.dim()});
    for (std::size_t k = 0; k < out.sessions.size(); ++k) {
        auto f1 = bank.first(out.sessions[k]);
        auto f2 = bank.second(out.sessions[k]);
        std::copy(f1.begin(), f1.end(), out.vectors.row(2 * k).begin());
        std::copy(f2.begin(), f2.end(), out.vectors.row(2 * k + 1).begin());
    }
    return out;
}

/// Batch-mean InfoNCE with cosine similarity:
///   L_b = -log( e^{sim(s1,s2)/tau} / (e^{sim(s1,s2)/tau} + sum_j e^{sim(s1,n_j)/tau}) )
/// `negatives[b]` holds the (k_b, d) negatives of anchor b; anchors with no
/// negatives contribute exactly 0. With `literal_denominator` the positive
/// term is counted once per negative inside the denominator instead.
inline ad::var contrastive_loss(ad::var s1, ad::var s2, const std::vector<tensor>& negatives, double tau,
                                bool literal_denominator = false) {
    ad::tape& t = s1.owner();
    if (!(tau > 0.0)) throw contract_error("contrastive_loss: tau must be > 0");
    const tensor& a = s1.value();
    if (a.rank() != 2 || s2.shape() != a.shape())
        throw dimension_error("contrastive_loss: anchors " + detail::shape_string(a.shape()) + " vs positives " +
                              detail::shape_string(s2.shape()));
    const std::size_t B = a.dim(0), d = a.dim(1);
    if (negatives.size() != B) throw dimension_error("contrastive_loss: one negative set per anchor required");

    std::size_t total = 0;
    for (const auto& n : negatives) {
        if (!n.empty() && n.cols() != d) throw dimension_error("contrastive_loss: negative width mismatch");
        total += n.empty() ? 0 : n.rows();
    }
    if (total == 0) return t.constant(tensor::scalar(0.0));

    // Negatives are bank constants: normalize outside the tape.
    tensor neg({total, d});
    std::vector<char> mask(B * (total + 1), 0);
    std::vector<double> offsets(B, 0.0);
    std::size_t at = 0;
    for (std::size_t b = 0; b < B; ++b) {
        mask[b * (total + 1)] = 1;
        const std::size_t k = negatives[b].empty() ? 0 : negatives[b].rows();
        for (std::size_t j = 0; j < k; ++j, ++at) {
            auto src = negatives[b].row(j);
            const double nn = norm2(src);
            auto dst = neg.row(at);
            for (std::size_t c = 0; c < d; ++c) dst[c] = nn < ad::normalize_epsilon ? 0.0 : src[c] / nn;
            mask[b * (total + 1) + 1 + at] = 1;
        }
        if (literal_denominator && k > 0) offsets[b] = std::log(static_cast<double>(k));
    }

    ad::var u1 = ad::l2_normalize(s1);
    ad::var u2 = ad::l2_normalize(s2);
    ad::var pos = ad::reshape(ad::sum_last(u1 * u2), {B, 1});
    ad::var sims = ad::matmul_t(u1, t.constant(std::move(neg)));
    ad::var logits = ad::scale(ad::concat(pos, sims), 1.0 / tau);
    if (literal_denominator) {
        tensor shift({B, total + 1});
        for (std::size_t b = 0; b < B; ++b) shift.at(b, 0) = offsets[b];
        logits = logits + t.constant(std::move(shift));
    }
    ad::var probs = ad::softmax(logits, &mask);
    ad::var per_anchor = ad::scale(ad::log(ad::pick(probs, std::vector<std::size_t>(B, 0))), -1.0);
    if (literal_denominator) {
        // -log(e^p / (k e^p + S)) = -log(k e^p / (k e^p + S)) + log k
        per_anchor = per_anchor + t.constant(tensor::vector(offsets));
    }
    return ad::mean(per_anchor);
}

/// Two training-mode forward passes of the same batch; independent dropout
/// masks make the pair differ.
inline std::pair<forward_result, forward_result> twin_forward(const bound_parameters& p, const model_config& cfg,
                                                              const graph_batch& g) {
    if (!p.q.owner().training()) throw contract_error("twin_forward: requires training mode (dropout active)");
    forward_result first = encode_sessions(p, cfg, g);
    forward_result second = encode_sessions(p, cfg, g);
    return {first, second};
}

} // namespace simcgnn
