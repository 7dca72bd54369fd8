#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"

namespace simcgnn {

using item_index = std::size_t; // internal index, 0 is padding
using raw_id = long long;

inline constexpr item_index padding_index = 0;

/// One prediction unit: a prefix of internal item indices and the next item.
struct session {
    std::vector<item_index> items;
    item_index label = padding_index;

    item_index last() const { return items.back(); }
    friend bool operator==(const session&, const session&) = default;
};

/// Bidirectional raw-id <-> internal-index map. Index 0 is reserved.
class vocabulary {
public:
    vocabulary() : raw_(1, 0) {}

    // Dense indices 1..m assigned in ascending raw-id order.
    template <typename Range>
    static vocabulary from_ids(const Range& ids) {
        std::vector<raw_id> sorted(ids.begin(), ids.end());
        std::sort(sorted.begin(), sorted.end());
        sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
        vocabulary v;
        for (raw_id id : sorted) v.add(id);
        return v;
    }

    item_index add(raw_id id) {
        auto it = index_.find(id);
        if (it != index_.end()) return it->second;
        raw_.push_back(id);
        index_.emplace(id, raw_.size() - 1);
        return raw_.size() - 1;
    }

    bool contains(raw_id id) const { return index_.count(id) != 0; }

    std::optional<item_index> find(raw_id id) const {
        auto it = index_.find(id);
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }

    item_index encode(raw_id id) const {
        auto it = index_.find(id);
        if (it == index_.end()) throw contract_error("vocabulary: unknown item id " + std::to_string(id));
        return it->second;
    }

    raw_id decode(item_index idx) const {
        if (idx == padding_index || idx >= raw_.size())
            throw contract_error("vocabulary: index " + std::to_string(idx) + " out of range");
        return raw_[idx];
    }

    // Number of real items m (excludes padding).
    std::size_t size() const { return raw_.size() - 1; }

    const std::vector<raw_id>& raw_ids() const { return raw_; }

    std::uint64_t fingerprint() const {
        std::uint64_t h = fnv1a("vocabulary");
        for (std::size_t i = 1; i < raw_.size(); ++i) h = fnv1a(std::to_string(raw_[i]) + ";", h);
        return h;
    }

    friend bool operator==(const vocabulary& a, const vocabulary& b) { return a.raw_ == b.raw_; }

private:
    std::vector<raw_id> raw_;
    std::unordered_map<raw_id, item_index> index_;
};

// ------------------------------------------------------------------ raw logs

struct raw_session {
    raw_id id = 0;
    std::vector<raw_id> items;
    long long last_key = 0; // order key of the final event

    friend bool operator==(const raw_session&, const raw_session&) = default;
};

/// Sessions in first-appearance order, items sorted by order key.
struct raw_session_log {
    std::vector<raw_session> sessions;

    std::size_t clicks() const {
        std::size_t n = 0;
        for (const auto& s : sessions) n += s.items.size();
        return n;
    }
    friend bool operator==(const raw_session_log&, const raw_session_log&) = default;
};

/// Column mapping for delimited session logs. Columns are 0-based. Without an
/// order column, file order is used.
struct format_descriptor {
    char delimiter = ',';
    bool header = false;
    std::size_t session_column = 0;
    std::size_t item_column = 1;
    std::optional<std::size_t> order_column = 2;

    // SessionId,Timestamp,ItemId,Category (yoochoose-clicks.dat)
    static format_descriptor yoochoose() { return {',', false, 0, 2, 1}; }
    // sessionId;userId;itemId;timeframe;eventdate (train-item-views.csv)
    static format_descriptor diginetica() { return {';', true, 0, 2, 3}; }
};

namespace detail {

inline std::vector<std::string> split_fields(const std::string& line, char delim) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == delim) {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

inline std::optional<long long> parse_integer(const std::string& s) {
    if (s.empty()) return std::nullopt;
    std::size_t pos = 0;
    try {
        long long v = std::stoll(s, &pos);
        if (pos != s.size()) return std::nullopt;
        return v;
    } catch (...) {
        return std::nullopt;
    }
}

// Days since 1970-01-01 for a proleptic Gregorian date.
inline long long days_from_civil(long long y, unsigned m, unsigned d) {
    y -= m <= 2;
    const long long era = (y >= 0 ? y : y - 399) / 400;
    const unsigned yoe = static_cast<unsigned>(y - era * 400);
    const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + static_cast<long long>(doe) - 719468;
}

/// Integer order key: a plain integer, or an ISO-8601 date / date-time
/// ("2014-04-07", "2014-04-07T10:51:09.277Z") converted to milliseconds.
inline std::optional<long long> parse_order_key(const std::string& s) {
    if (auto v = parse_integer(s)) return v;
    int y = 0, mo = 0, d = 0, h = 0, mi = 0, ms = 0;
    double sec = 0.0;
    char sep = 0;
    const int n = std::sscanf(s.c_str(), "%d-%d-%d%c%d:%d:%lf", &y, &mo, &d, &sep, &h, &mi, &sec);
    if (n == 3 || (n == 7 && (sep == 'T' || sep == ' '))) {
        if (mo < 1 || mo > 12 || d < 1 || d > 31) return std::nullopt;
        ms = static_cast<int>(std::llround(sec * 1000.0));
        const long long days = days_from_civil(y, static_cast<unsigned>(mo), static_cast<unsigned>(d));
        return ((days * 24 + h) * 60 + mi) * 60'000LL + ms;
    }
    return std::nullopt;
}

} // namespace detail

/// Parses a delimited log and groups records by session id. Items inside a
/// session are ordered by order key, ties by file order.
inline raw_session_log load_sessions(std::istream& in, const format_descriptor& fmt) {
    struct record {
        raw_id item;
        long long key;
        std::size_t seq;
    };
    std::vector<raw_id> order;
    std::unordered_map<raw_id, std::vector<record>> grouped;
    std::string line;
    std::size_t lineno = 0, seq = 0;
    const std::size_t needed =
        std::max({fmt.session_column, fmt.item_column, fmt.order_column.value_or(0)}) + 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (lineno == 1 && fmt.header) continue;
        if (line.empty() || line == "\r") continue;
        const auto fields = detail::split_fields(line, fmt.delimiter);
        if (fields.size() < needed)
            throw parse_error(lineno, "expected at least " + std::to_string(needed) + " fields, got " +
                                          std::to_string(fields.size()));
        const auto sid = detail::parse_integer(fields[fmt.session_column]);
        if (!sid) throw parse_error(lineno, "bad session id '" + fields[fmt.session_column] + "'");
        const auto iid = detail::parse_integer(fields[fmt.item_column]);
        if (!iid) throw parse_error(lineno, "bad item id '" + fields[fmt.item_column] + "'");
        long long key = static_cast<long long>(seq);
        if (fmt.order_column) {
            const auto k = detail::parse_order_key(fields[*fmt.order_column]);
            if (!k) throw parse_error(lineno, "bad order key '" + fields[*fmt.order_column] + "'");
            key = *k;
        }
        auto [it, inserted] = grouped.try_emplace(*sid);
        if (inserted) order.push_back(*sid);
        it->second.push_back({*iid, key, seq++});
    }
    if (order.empty()) throw empty_input_error("session log contains no records");

    raw_session_log log;
    log.sessions.reserve(order.size());
    for (raw_id sid : order) {
        auto& recs = grouped[sid];
        std::stable_sort(recs.begin(), recs.end(), [](const record& a, const record& b) { return a.key < b.key; });
        raw_session s;
        s.id = sid;
        for (const auto& r : recs) s.items.push_back(r.item);
        s.last_key = recs.back().key;
        log.sessions.push_back(std::move(s));
    }
    return log;
}

inline raw_session_log load_sessions(const std::string& path, const format_descriptor& fmt) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    return load_sessions(in, fmt);
}

struct preprocess_options {
    std::size_t min_item_count = 5;
    std::size_t min_session_len = 2;
};

struct preprocess_result {
    raw_session_log log;
    vocabulary vocab;
};

/// Alternates the item-frequency and session-length filters until neither
/// removes anything, then indexes the surviving items.
inline preprocess_result preprocess(const raw_session_log& log, const preprocess_options& opts = {}) {
    if (log.sessions.empty()) throw empty_input_error("preprocess: empty log");
    raw_session_log cur = log;
    for (;;) {
        std::unordered_map<raw_id, std::size_t> counts;
        for (const auto& s : cur.sessions)
            for (raw_id i : s.items) ++counts[i];
        bool changed = false;
        for (auto& s : cur.sessions) {
            const auto before = s.items.size();
            std::erase_if(s.items, [&](raw_id i) { return counts[i] < opts.min_item_count; });
            changed |= s.items.size() != before;
        }
        const auto before = cur.sessions.size();
        std::erase_if(cur.sessions, [&](const raw_session& s) { return s.items.size() < opts.min_session_len; });
        changed |= cur.sessions.size() != before;
        if (!changed) break;
    }
    if (cur.sessions.empty()) throw empty_dataset_error("preprocess: every session was filtered out");
    std::vector<raw_id> ids;
    for (const auto& s : cur.sessions) ids.insert(ids.end(), s.items.begin(), s.items.end());
    vocabulary vocab = vocabulary::from_ids(ids);
    return {std::move(cur), std::move(vocab)};
}

/// Prefix augmentation: [v1..vn] -> ([v1],v2), ..., ([v1..v(n-1)],vn).
/// With max_len > 0 each prefix keeps only its most recent max_len items.
inline std::vector<session> augment(const std::vector<item_index>& items, std::size_t max_len = 0) {
    if (items.size() < 2) throw contract_error("augment: session length " + std::to_string(items.size()) + " < 2");
    std::vector<session> out;
    out.reserve(items.size() - 1);
    for (std::size_t n = 1; n < items.size(); ++n) {
        const std::size_t start = (max_len > 0 && n > max_len) ? n - max_len : 0;
        out.push_back(session{{items.begin() + static_cast<std::ptrdiff_t>(start),
                               items.begin() + static_cast<std::ptrdiff_t>(n)},
                              items[n]});
    }
    return out;
}

// Augments every session's full sequence (items followed by label).
inline std::vector<session> augment_all(const std::vector<session>& sessions, std::size_t max_len = 0) {
    std::vector<session> out;
    for (const auto& s : sessions) {
        std::vector<item_index> seq = s.items;
        seq.push_back(s.label);
        auto part = augment(seq, max_len);
        out.insert(out.end(), part.begin(), part.end());
    }
    return out;
}

struct dataset_stats {
    std::size_t clicks = 0;
    std::size_t train_sessions = 0;
    std::size_t test_sessions = 0;
    std::size_t items = 0;
    double avg_length = 0.0;
    std::size_t dropped_test_sessions = 0; // contained items unseen in training
};

struct dataset {
    std::vector<session> train;
    std::vector<session> test;
    vocabulary vocab;
    dataset_stats stats;
};

struct split_options {
    double test_fraction = 0.2;                      // most recent sessions go to test
    std::optional<double> test_days;                 // overrides test_fraction; keys in ms
    double recent_train_fraction = 1.0;              // e.g. 1/64 for Yoochoose
    std::size_t max_session_len = 50;
};

/// Time-ordered train/test split, training vocabulary, and prefix
/// augmentation of both sides. Test sessions with items unseen in training
/// are dropped and counted.
inline dataset build_dataset(const raw_session_log& log, const split_options& opts = {}) {
    if (log.sessions.empty()) throw empty_dataset_error("build_dataset: no sessions");
    if (opts.test_fraction < 0.0 || opts.test_fraction >= 1.0)
        throw contract_error("build_dataset: test_fraction must be in [0,1)");
    if (opts.recent_train_fraction <= 0.0 || opts.recent_train_fraction > 1.0)
        throw contract_error("build_dataset: recent_train_fraction must be in (0,1]");

    std::vector<const raw_session*> by_time;
    for (const auto& s : log.sessions) by_time.push_back(&s);
    std::stable_sort(by_time.begin(), by_time.end(),
                     [](const raw_session* a, const raw_session* b) { return a->last_key < b->last_key; });

    std::size_t n_test = 0;
    if (opts.test_days) {
        const long long cutoff =
            by_time.back()->last_key - static_cast<long long>(*opts.test_days * 86'400'000.0);
        n_test = static_cast<std::size_t>(
            std::count_if(by_time.begin(), by_time.end(), [&](const raw_session* s) { return s->last_key > cutoff; }));
    } else {
        n_test = static_cast<std::size_t>(std::floor(opts.test_fraction * static_cast<double>(by_time.size())));
    }
    if (n_test >= by_time.size()) throw empty_dataset_error("build_dataset: split leaves no training sessions");
    std::vector<const raw_session*> train(by_time.begin(), by_time.end() - static_cast<std::ptrdiff_t>(n_test));
    std::vector<const raw_session*> test(by_time.end() - static_cast<std::ptrdiff_t>(n_test), by_time.end());
    if (opts.recent_train_fraction < 1.0) {
        const auto keep = std::max<std::size_t>(
            1, static_cast<std::size_t>(std::ceil(opts.recent_train_fraction * static_cast<double>(train.size()))));
        train.erase(train.begin(), train.end() - static_cast<std::ptrdiff_t>(keep));
    }

    dataset ds;
    std::vector<raw_id> ids;
    for (const auto* s : train) ids.insert(ids.end(), s->items.begin(), s->items.end());
    ds.vocab = vocabulary::from_ids(ids);

    std::size_t kept_sessions = 0;
    auto encode_all = [&](const raw_session& s) {
        std::vector<item_index> out;
        for (raw_id i : s.items) out.push_back(ds.vocab.encode(i));
        return out;
    };
    for (const auto* s : train) {
        if (s->items.size() < 2) continue;
        auto part = augment(encode_all(*s), opts.max_session_len);
        ds.train.insert(ds.train.end(), part.begin(), part.end());
        ds.stats.clicks += s->items.size();
        ++kept_sessions;
    }
    for (const auto* s : test) {
        const bool known = std::all_of(s->items.begin(), s->items.end(), [&](raw_id i) { return ds.vocab.contains(i); });
        if (!known || s->items.size() < 2) {
            ++ds.stats.dropped_test_sessions;
            continue;
        }
        auto part = augment(encode_all(*s), opts.max_session_len);
        ds.test.insert(ds.test.end(), part.begin(), part.end());
        ds.stats.clicks += s->items.size();
        ++kept_sessions;
    }
    if (ds.train.empty()) throw empty_dataset_error("build_dataset: no training sessions");
    ds.stats.train_sessions = ds.train.size();
    ds.stats.test_sessions = ds.test.size();
    ds.stats.items = ds.vocab.size();
    ds.stats.avg_length = kept_sessions ? static_cast<double>(ds.stats.clicks) / static_cast<double>(kept_sessions) : 0.0;
    return ds;
}

// ------------------------------------------------------------ synthetic data

/// Knobs for the synthetic generator beyond the headline parameters.
struct synthetic_options {
    std::size_t min_len = 2;          // prefix length range, inclusive
    std::size_t max_len = 8;
    std::size_t successors = 3;       // Markov successors per item per cluster
    double markov_strength = 0.7;     // P(next item is a cluster successor)
    double cluster_affinity = 3.0;    // weight multiplier for a cluster's own half of the catalog
    std::size_t label_set_size = 10;  // labels per cluster after the designated last item
    double repeat_probability = 0.0;  // P(next item repeats one already in the session)
    double test_fraction = 0.2;
    item_index designated_item = 1;   // forced last item of colliding sessions
};

/// Zipf-popular catalog with two latent session clusters. Each cluster walks
/// its own circulant successor structure, so the prefix reveals the cluster.
/// A fraction of sessions is forced to end in the designated item; their
/// labels come from cluster-specific, disjoint label sets.
///
/// Sessions are returned whole (not prefix-augmented); vocabulary raw ids
/// equal internal indices.
inline dataset generate_synthetic(std::size_t num_items, std::size_t num_sessions, double popularity_exponent,
                                  double last_item_collision_rate, std::uint64_t seed,
                                  const synthetic_options& opts = {}) {
    detail::require(num_items >= 5, "generate_synthetic: num_items must be >= 5");
    detail::require(num_sessions >= 10, "generate_synthetic: num_sessions must be >= 10");
    detail::require(last_item_collision_rate >= 0.0 && last_item_collision_rate <= 1.0,
                    "generate_synthetic: collision rate outside [0,1]");
    detail::require(opts.repeat_probability >= 0.0 && opts.repeat_probability <= 1.0,
                    "generate_synthetic: repeat probability outside [0,1]");
    detail::require(opts.markov_strength >= 0.0 && opts.markov_strength <= 1.0,
                    "generate_synthetic: markov strength outside [0,1]");
    detail::require(opts.test_fraction >= 0.0 && opts.test_fraction < 1.0,
                    "generate_synthetic: test fraction outside [0,1)");
    detail::require(popularity_exponent >= 0.0, "generate_synthetic: negative popularity exponent");
    detail::require(opts.min_len >= 1 && opts.min_len <= opts.max_len, "generate_synthetic: bad length range");
    detail::require(opts.designated_item >= 1 && opts.designated_item <= num_items,
                    "generate_synthetic: designated item out of range");
    detail::require(opts.label_set_size >= 1, "generate_synthetic: label_set_size must be >= 1");

    const rng root(seed);
    rng structure = root.split("synthetic/structure");
    rng draws = root.split("synthetic/sessions");

    const std::size_t m = num_items;
    std::vector<double> popularity(m + 1, 0.0);
    for (std::size_t i = 1; i <= m; ++i) popularity[i] = std::pow(static_cast<double>(i), -popularity_exponent);

    std::array<std::vector<double>, 2> base;
    for (std::size_t c = 0; c < 2; ++c) {
        base[c] = popularity;
        for (std::size_t i = 1; i <= m; ++i)
            if (i % 2 == c) base[c][i] *= opts.cluster_affinity;
    }

    // Circulant successors over a cluster-specific permutation: every item is
    // the successor of exactly `successors` items, keeping the chain's
    // stationary law equal to the base law when that law is uniform.
    std::array<std::vector<item_index>, 2> perm, position;
    for (std::size_t c = 0; c < 2; ++c) {
        perm[c].resize(m);
        std::iota(perm[c].begin(), perm[c].end(), item_index{1});
        structure.shuffle(perm[c]);
        position[c].assign(m + 1, 0);
        for (std::size_t p = 0; p < m; ++p) position[c][perm[c][p]] = p;
    }
    auto successor = [&](std::size_t c, item_index cur, std::size_t j) {
        return perm[c][(position[c][cur] + j + 1) % m];
    };

    std::vector<item_index> pool;
    for (item_index i = 1; i <= m; ++i)
        if (i != opts.designated_item) pool.push_back(i);
    structure.shuffle(pool);
    // small catalogs shrink the label sets so the two stay disjoint
    const std::size_t label_n = std::min(opts.label_set_size, pool.size() / 2);
    std::array<std::vector<item_index>, 2> label_sets;
    for (std::size_t c = 0; c < 2; ++c)
        label_sets[c].assign(pool.begin() + static_cast<std::ptrdiff_t>(c * label_n),
                             pool.begin() + static_cast<std::ptrdiff_t>((c + 1) * label_n));

    auto next_item = [&](std::size_t c, const std::vector<item_index>& seq) -> item_index {
        if (!seq.empty() && opts.repeat_probability > 0.0 && draws.bernoulli(opts.repeat_probability))
            return seq[draws.below(seq.size())];
        if (!seq.empty() && draws.bernoulli(opts.markov_strength))
            return successor(c, seq.back(), draws.below(opts.successors));
        return draws.categorical(base[c]);
    };

    std::vector<session> all;
    all.reserve(num_sessions);
    for (std::size_t s = 0; s < num_sessions; ++s) {
        const std::size_t c = draws.below(2);
        const std::size_t len = opts.min_len + draws.below(opts.max_len - opts.min_len + 1);
        std::vector<item_index> seq;
        for (std::size_t k = 0; k < len; ++k) seq.push_back(next_item(c, seq));
        session out;
        if (draws.bernoulli(last_item_collision_rate)) {
            seq.back() = opts.designated_item;
            out.label = label_sets[c][draws.below(label_sets[c].size())];
        } else {
            out.label = next_item(c, seq);
        }
        out.items = std::move(seq);
        all.push_back(std::move(out));
    }

    dataset ds;
    for (item_index i = 1; i <= m; ++i) ds.vocab.add(static_cast<raw_id>(i));
    const auto n_test = static_cast<std::size_t>(std::floor(opts.test_fraction * static_cast<double>(num_sessions)));
    ds.train.assign(all.begin(), all.end() - static_cast<std::ptrdiff_t>(n_test));
    ds.test.assign(all.end() - static_cast<std::ptrdiff_t>(n_test), all.end());
    for (const auto& s : all) ds.stats.clicks += s.items.size() + 1;
    ds.stats.train_sessions = ds.train.size();
    ds.stats.test_sessions = ds.test.size();
    ds.stats.items = m;
    ds.stats.avg_length = static_cast<double>(ds.stats.clicks) / static_cast<double>(num_sessions);
    return ds;
}

} // namespace simcgnn
