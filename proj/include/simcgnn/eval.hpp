#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "config.hpp"
#include "data.hpp"
#include "errors.hpp"
#include "model.hpp"
#include "tensor.hpp"

namespace simcgnn {

/// Item indices in descending score order; ties by ascending index.
using ranked_list = std::vector<item_index>;

/// Top-k of a score row where column j is item j+1.
inline ranked_list top_k(std::span<const double> scores, std::size_t k) {
    std::vector<item_index> idx(scores.size());
    std::iota(idx.begin(), idx.end(), item_index{1});
    const std::size_t n = std::min(k, idx.size());
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n), idx.end(),
                      [&](item_index a, item_index b) {
                          const double sa = scores[a - 1], sb = scores[b - 1];
                          if (sa != sb) return sa > sb;
                          return a < b;
                      });
    idx.resize(n);
    return idx;
}

inline std::vector<ranked_list> top_k_rows(const tensor& scores, std::size_t k) {
    std::vector<ranked_list> out;
    out.reserve(scores.rows());
    for (std::size_t r = 0; r < scores.rows(); ++r) out.push_back(top_k(scores.row(r), k));
    return out;
}

namespace detail {
inline void check_metric_args(std::size_t lists, std::size_t labels, std::size_t k, const char* op) {
    if (k < 1) throw contract_error(std::string(op) + ": k must be >= 1");
    if (lists != labels)
        throw contract_error(std::string(op) + ": " + std::to_string(lists) + " lists for " + std::to_string(labels) +
                             " labels");
}

// 1-based rank of label within the first k entries, 0 when absent.
inline std::size_t rank_within(const ranked_list& list, item_index label, std::size_t k) {
    const std::size_t n = std::min(k, list.size());
    for (std::size_t i = 0; i < n; ++i)
        if (list[i] == label) return i + 1;
    return 0;
}
} // namespace detail

inline double recall_at_k(const std::vector<ranked_list>& lists, const std::vector<item_index>& labels,
                          std::size_t k) {
    detail::check_metric_args(lists.size(), labels.size(), k, "recall_at_k");
    if (lists.empty()) return 0.0;
    std::size_t hits = 0;
    for (std::size_t s = 0; s < lists.size(); ++s) hits += detail::rank_within(lists[s], labels[s], k) ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(lists.size());
}

inline double mrr_at_k(const std::vector<ranked_list>& lists, const std::vector<item_index>& labels, std::size_t k) {
    detail::check_metric_args(lists.size(), labels.size(), k, "mrr_at_k");
    if (lists.empty()) return 0.0;
    double total = 0.0;
    for (std::size_t s = 0; s < lists.size(); ++s) {
        const std::size_t r = detail::rank_within(lists[s], labels[s], k);
        if (r) total += 1.0 / static_cast<double>(r);
    }
    return total / static_cast<double>(lists.size());
}

/// Item occurrence counts in a training set (prefix items and labels),
/// indexed by item; entry 0 is unused.
inline std::vector<double> item_popularity(const std::vector<session>& training, std::size_t num_items) {
    std::vector<double> phi(num_items + 1, 0.0);
    auto bump = [&](item_index i) {
        if (i < phi.size()) phi[i] += 1.0;
    };
    for (const auto& s : training) {
        for (item_index i : s.items) bump(i);
        bump(s.label);
    }
    return phi;
}

/// Average recommendation popularity: mean over lists of sum(phi)/K.
/// Items outside phi count as 0 and increment `missing`.
inline double arp(const std::vector<ranked_list>& lists, const std::vector<double>& phi, std::size_t k,
                  std::size_t* missing = nullptr) {
    if (k < 1) throw contract_error("arp: K must be >= 1");
    if (lists.empty()) return 0.0;
    double total = 0.0;
    for (const auto& list : lists) {
        double s = 0.0;
        for (item_index i : list) {
            if (i < phi.size() && i != padding_index)
                s += phi[i];
            else if (missing)
                ++*missing;
        }
        total += s / static_cast<double>(k);
    }
    return total / static_cast<double>(lists.size());
}

inline std::vector<item_index> labels_of(const std::vector<session>& sessions) {
    std::vector<item_index> out;
    out.reserve(sessions.size());
    for (const auto& s : sessions) out.push_back(s.label);
    return out;
}

struct metrics_report {
    std::string method;
    std::size_t k = 20;
    double recall = 0.0;
    double mrr = 0.0;
    double arp = 0.0;
    std::size_t sessions = 0;

    friend bool operator==(const metrics_report&, const metrics_report&) = default;
};

inline metrics_report summarize(std::string method, const std::vector<ranked_list>& lists,
                                const std::vector<session>& sessions, const std::vector<double>& phi,
                                std::size_t k) {
    metrics_report r;
    r.method = std::move(method);
    r.k = k;
    const auto labels = labels_of(sessions);
    r.recall = recall_at_k(lists, labels, k);
    r.mrr = mrr_at_k(lists, labels, k);
    r.arp = arp(lists, phi, k);
    r.sessions = sessions.size();
    return r;
}

/// Drops the session's own items from a ranking and truncates to k. Callers
/// rank k + |distinct items| candidates first so the result stays k long.
inline ranked_list without_seen(const ranked_list& list, const session& s, std::size_t k) {
    ranked_list out;
    for (item_index i : list) {
        if (out.size() == k) break;
        if (std::find(s.items.begin(), s.items.end(), i) == s.items.end()) out.push_back(i);
    }
    return out;
}

inline std::vector<ranked_list> model_rankings(const parameter_store& params, const model_config& cfg,
                                               const std::vector<session>& sessions, std::size_t k,
                                               bool exclude_seen = false) {
    if (sessions.empty()) return {};
    const tensor logits = predict_logits(params, cfg, sessions);
    if (!exclude_seen) return top_k_rows(logits, k);
    std::vector<ranked_list> out;
    out.reserve(sessions.size());
    for (std::size_t r = 0; r < sessions.size(); ++r)
        out.push_back(without_seen(top_k(logits.row(r), k + sessions[r].items.size()), sessions[r], k));
    return out;
}

// ------------------------------------------------------------------ baselines

enum class baseline_kind { pop, spop, itemknn };

inline std::string baseline_name(baseline_kind k) {
    switch (k) {
    case baseline_kind::pop: return "POP";
    case baseline_kind::spop: return "S-POP";
    case baseline_kind::itemknn: return "Item-KNN";
    }
    return "?";
}

/// Training statistics shared by the classical baselines.
class baseline_stats {
public:
    baseline_stats(const std::vector<session>& training, std::size_t num_items)
        : m_(num_items), popularity_(item_popularity(training, num_items)), occurrences_(num_items + 1, 0.0),
          cooccur_(num_items + 1) {
        std::vector<item_index> uniq;
        for (const auto& s : training) {
            uniq = s.items;
            uniq.push_back(s.label);
            std::sort(uniq.begin(), uniq.end());
            uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
            std::erase_if(uniq, [&](item_index i) { return i == padding_index || i > m_; });
            for (item_index i : uniq) occurrences_[i] += 1.0;
            for (std::size_t a = 0; a < uniq.size(); ++a)
                for (std::size_t b = a + 1; b < uniq.size(); ++b) {
                    cooccur_[uniq[a]][uniq[b]] += 1.0;
                    cooccur_[uniq[b]][uniq[a]] += 1.0;
                }
        }
        pop_order_.resize(m_);
        std::iota(pop_order_.begin(), pop_order_.end(), item_index{1});
        std::stable_sort(pop_order_.begin(), pop_order_.end(),
                         [&](item_index a, item_index b) { return popularity_[a] > popularity_[b]; });
    }

    std::size_t num_items() const { return m_; }
    const std::vector<double>& popularity() const { return popularity_; }

    /// Cosine similarity of binary item-session incidence vectors. Items never
    /// seen in training have similarity 0 to everything.
    double similarity(item_index a, item_index b) const {
        if (a == padding_index || b == padding_index || a > m_ || b > m_) return 0.0;
        const double na = occurrences_[a], nb = occurrences_[b];
        if (na == 0.0 || nb == 0.0) return 0.0;
        if (a == b) return 1.0;
        auto it = cooccur_[a].find(b);
        if (it == cooccur_[a].end()) return 0.0;
        return it->second / std::sqrt(na * nb);
    }

    ranked_list pop(std::size_t k) const {
        return ranked_list(pop_order_.begin(), pop_order_.begin() + static_cast<std::ptrdiff_t>(std::min(k, m_)));
    }

    // In-session frequency first, then global popularity, then index.
    ranked_list spop(const session& s, std::size_t k) const {
        std::unordered_map<item_index, double> in_session;
        for (item_index i : s.items)
            if (i != padding_index && i <= m_) in_session[i] += 1.0;
        std::vector<item_index> head;
        for (const auto& [i, c] : in_session) head.push_back(i);
        std::sort(head.begin(), head.end(), [&](item_index a, item_index b) {
            if (in_session[a] != in_session[b]) return in_session[a] > in_session[b];
            if (popularity_[a] != popularity_[b]) return popularity_[a] > popularity_[b];
            return a < b;
        });
        ranked_list out;
        for (item_index i : head) {
            if (out.size() == k) return out;
            out.push_back(i);
        }
        for (item_index i : pop_order_) {
            if (out.size() == k) break;
            if (!in_session.count(i)) out.push_back(i);
        }
        return out;
    }

    // score(c) = sum over session positions of similarity(item, c).
    ranked_list itemknn(const session& s, std::size_t k) const {
        std::vector<double> scores(m_, 0.0);
        for (item_index i : s.items) {
            if (i == padding_index || i > m_ || occurrences_[i] == 0.0) continue;
            scores[i - 1] += 1.0;
            for (const auto& [j, c] : cooccur_[i]) scores[j - 1] += c / std::sqrt(occurrences_[i] * occurrences_[j]);
        }
        return top_k(scores, k);
    }

    ranked_list rank(baseline_kind kind, const session& s, std::size_t k) const {
        switch (kind) {
        case baseline_kind::pop: return pop(k);
        case baseline_kind::spop: return spop(s, k);
        case baseline_kind::itemknn: return itemknn(s, k);
        }
        return {};
    }

    std::vector<ranked_list> rank_all(baseline_kind kind, const std::vector<session>& sessions, std::size_t k,
                                      bool exclude_seen = false) const {
        std::vector<ranked_list> out;
        out.reserve(sessions.size());
        for (const auto& s : sessions)
            out.push_back(exclude_seen ? without_seen(rank(kind, s, k + s.items.size()), s, k) : rank(kind, s, k));
        return out;
    }

private:
    std::size_t m_;
    std::vector<double> popularity_;
    std::vector<double> occurrences_;
    std::vector<std::unordered_map<item_index, double>> cooccur_;
    std::vector<item_index> pop_order_;
};

// ------------------------------------------------------- confusion analysis

struct confusion_row {
    item_index item = 0;
    std::size_t count = 0;
    std::size_t rank = 0; // 1-based, by descending count then ascending item

    friend bool operator==(const confusion_row&, const confusion_row&) = default;
};

struct confusion_report {
    std::size_t sessions = 0;
    std::size_t k = 0;
    std::size_t distinct_items = 0;
    std::vector<confusion_row> rows; // rank-frequency curve
};

/// How often each item appears across the cohort's top-k lists.
inline confusion_report confusion_analysis(const std::vector<ranked_list>& lists, std::size_t k) {
    if (lists.size() < 2)
        throw contract_error("confusion_analysis: need at least 2 sessions sharing a last item, got " +
                             std::to_string(lists.size()));
    std::map<item_index, std::size_t> counts;
    for (const auto& l : lists)
        for (std::size_t i = 0; i < std::min(k, l.size()); ++i) ++counts[l[i]];
    confusion_report rep;
    rep.sessions = lists.size();
    rep.k = k;
    rep.distinct_items = counts.size();
    for (const auto& [item, c] : counts) rep.rows.push_back({item, c, 0});
    std::stable_sort(rep.rows.begin(), rep.rows.end(),
                     [](const confusion_row& a, const confusion_row& b) { return a.count > b.count; });
    for (std::size_t r = 0; r < rep.rows.size(); ++r) rep.rows[r].rank = r + 1;
    return rep;
}

inline confusion_report confusion_analysis(const parameter_store& params, const model_config& cfg,
                                           const std::vector<session>& cohort, std::size_t k) {
    if (cohort.size() < 2)
        throw contract_error("confusion_analysis: need at least 2 sessions sharing a last item, got " +
                             std::to_string(cohort.size()));
    return confusion_analysis(model_rankings(params, cfg, cohort, k), k);
}

inline std::vector<session> sessions_ending_in(const std::vector<session>& sessions, item_index item) {
    std::vector<session> out;
    for (const auto& s : sessions)
        if (!s.items.empty() && s.last() == item) out.push_back(s);
    return out;
}

// Most frequent last item; ties go to the smaller index.
inline item_index most_frequent_last_item(const std::vector<session>& sessions) {
    detail::require(!sessions.empty(), "most_frequent_last_item: no sessions");
    std::map<item_index, std::size_t> counts;
    for (const auto& s : sessions) ++counts[s.last()];
    item_index best = counts.begin()->first;
    for (const auto& [i, c] : counts)
        if (c > counts[best]) best = i;
    return best;
}

} // namespace simcgnn
