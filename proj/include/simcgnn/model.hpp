#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "autodiff.hpp"
#include "config.hpp"
#include "data.hpp"
#include "errors.hpp"
#include "rng.hpp"
#include "session_graph.hpp"
#include "tensor.hpp"

namespace simcgnn {

/// Every trainable tensor of the recommender.
///
/// Weight matrices are stored in the (out, in) orientation of the
/// column-vector formulas: a gate computes W a + U v, the aggregation is
/// H [agg_out; agg_in] + b. The hybrid map W_3 is (2d, d) and is applied as
/// [s_long, s_short] W_3 on row vectors.
struct parameter_store {
    tensor item_embeddings; // (m+1, d), row 0 is padding
    tensor h;               // (d, 2d)
    tensor b_agg;           // (d)
    tensor w_z, u_z, w_r, u_r, w_o, u_o; // (d, d)
    tensor w_1, w_2;        // (d, d)
    tensor q;               // (d)
    tensor b_att;           // (d)
    tensor w_3;             // (2d, d)
    tensor positional;      // (max_len, d)

    std::size_t num_items() const { return item_embeddings.dim(0) - 1; }
    std::size_t dim() const { return item_embeddings.dim(1); }

    std::vector<std::pair<std::string, tensor*>> named() {
        return {{"item_embeddings", &item_embeddings},
                {"H", &h},
                {"b_agg", &b_agg},
                {"W_z", &w_z},
                {"U_z", &u_z},
                {"W_r", &w_r},
                {"U_r", &u_r},
                {"W_o", &w_o},
                {"U_o", &u_o},
                {"W_1", &w_1},
                {"W_2", &w_2},
                {"q", &q},
                {"b_att", &b_att},
                {"W_3", &w_3},
                {"positional", &positional}};
    }

    std::vector<std::pair<std::string, const tensor*>> named() const {
        std::vector<std::pair<std::string, const tensor*>> out;
        for (auto& [n, t] : const_cast<parameter_store*>(this)->named()) out.emplace_back(n, t);
        return out;
    }

    std::vector<tensor*> tensors() {
        std::vector<tensor*> out;
        for (auto& [n, t] : named()) out.push_back(t);
        return out;
    }

    friend bool operator==(const parameter_store& a, const parameter_store& b) {
        auto na = a.named();
        auto nb = b.named();
        for (std::size_t i = 0; i < na.size(); ++i)
            if (!(*na[i].second == *nb[i].second)) return false;
        return true;
    }

    /// Gaussian(0, init_std) for everything except the zeroed padding row.
    /// Each tensor draws from its own named substream.
    static parameter_store initialize(std::size_t num_items, const model_config& cfg, const rng& init) {
        const std::size_t d = cfg.d;
        parameter_store p;
        p.item_embeddings = tensor({num_items + 1, d});
        p.h = tensor({d, 2 * d});
        p.b_agg = tensor({d});
        for (tensor* t : {&p.w_z, &p.u_z, &p.w_r, &p.u_r, &p.w_o, &p.u_o, &p.w_1, &p.w_2}) *t = tensor({d, d});
        p.q = tensor({d});
        p.b_att = tensor({d});
        p.w_3 = tensor({2 * d, d});
        p.positional = tensor({cfg.max_len, d});
        for (auto& [name, t] : p.named()) {
            rng r = init.split(name);
            for (double& v : t->data()) v = r.normal(0.0, cfg.init_std);
        }
        for (double& v : p.item_embeddings.row(padding_index)) v = 0.0;
        return p;
    }
};

/// Parameters bound to a tape as trainable leaves.
struct bound_parameters {
    ad::var item_embeddings, h, b_agg, w_z, u_z, w_r, u_r, w_o, u_o, w_1, w_2, q, b_att, w_3, positional;

    static bound_parameters bind(ad::tape& t, const parameter_store& p) {
        return {t.leaf(p.item_embeddings), t.leaf(p.h),   t.leaf(p.b_agg), t.leaf(p.w_z), t.leaf(p.u_z),
                t.leaf(p.w_r),             t.leaf(p.u_r), t.leaf(p.w_o),   t.leaf(p.u_o), t.leaf(p.w_1),
                t.leaf(p.w_2),             t.leaf(p.q),   t.leaf(p.b_att), t.leaf(p.w_3), t.leaf(p.positional)};
    }

    std::vector<ad::var> all() const {
        return {item_embeddings, h, b_agg, w_z, u_z, w_r, u_r, w_o, u_o, w_1, w_2, q, b_att, w_3, positional};
    }
};

// ------------------------------------------------------------------ stages

/// Row i is dropout(normalize(v_item[i])); item 0 yields a zero row.
inline ad::var embed_items(ad::var embeddings, const std::vector<long>& items, double p) {
    const std::size_t rows = embeddings.value().dim(0);
    std::vector<long> index(items.size());
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (items[i] < 0 || static_cast<std::size_t>(items[i]) >= rows)
            throw contract_error("embed_items: item index " + std::to_string(items[i]) + " outside vocabulary of " +
                                 std::to_string(rows - 1));
        index[i] = items[i] == static_cast<long>(padding_index) ? -1 : items[i];
    }
    return ad::dropout(ad::l2_normalize(ad::gather_rows(embeddings, std::move(index))), p);
}

/// One gated propagation step over node states (B*N, d):
///   a = H [A_out X ; A_in X] + b
///   z = sigmoid(W_z a + U_z x),  r = sigmoid(W_r a + U_r x)
///   c = tanh(W_o a + U_o (r . x))
///   x' = (1 - z) . x + z . c
inline ad::var ggnn_step(const bound_parameters& p, const graph_batch& g, ad::var states) {
    ad::tape& t = states.owner();
    const std::size_t B = g.batch, N = g.max_nodes, d = p.b_agg.value().size();
    if (states.shape() != shape_t{B * N, d})
        throw dimension_error("ggnn_step: node states " + detail::shape_string(states.shape()) + ", expected " +
                              detail::shape_string({B * N, d}));
    ad::var x3 = ad::reshape(states, {B, N, d});
    ad::var agg_out = ad::bmm(t.constant(g.a_out), x3);
    ad::var agg_in = ad::bmm(t.constant(g.a_in), x3);
    ad::var joined = ad::reshape(ad::concat(agg_out, agg_in), {B * N, 2 * d});
    ad::var a = ad::add_rowvec(ad::matmul_t(joined, p.h), p.b_agg);
    ad::var z = ad::sigmoid(ad::matmul_t(a, p.w_z) + ad::matmul_t(states, p.u_z));
    ad::var r = ad::sigmoid(ad::matmul_t(a, p.w_r) + ad::matmul_t(states, p.u_r));
    ad::var cand = ad::tanh(ad::matmul_t(a, p.w_o) + ad::matmul_t(r * states, p.u_o));
    return states + z * (cand - states);
}

inline ad::var propagate(const bound_parameters& p, const graph_batch& g, ad::var initial, std::size_t layers) {
    detail::require(layers >= 1, "ggnn_forward: layers must be >= 1");
    ad::var x = initial;
    for (std::size_t l = 0; l < layers; ++l) x = ggnn_step(p, g, x);
    return x;
}

/// Per session position: v~ = w_pos(position) + dropout(x_alias(position)).
/// Positions are 0-based from the session start. Output is (B*L, d);
/// padded positions are zero rows.
inline ad::var position_vectors(const bound_parameters& p, const graph_batch& g, ad::var node_states,
                                double dropout_p, bool positional) {
    const std::size_t max_len = p.positional.value().dim(0);
    for (std::size_t len : g.lengths)
        if (len > max_len)
            throw contract_error("position_vectors: session length " + std::to_string(len) +
                                 " exceeds positional table " + std::to_string(max_len));
    ad::var x = ad::dropout(node_states, dropout_p);
    const std::size_t B = g.batch, N = g.max_nodes, L = g.max_len;
    std::vector<long> node_index(B * L, -1), pos_index(B * L, -1);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t l = 0; l < L; ++l) {
            const long a = g.alias[b * L + l];
            if (a < 0) continue;
            node_index[b * L + l] = static_cast<long>(b * N) + a;
            pos_index[b * L + l] = static_cast<long>(l);
        }
    ad::var out = ad::gather_rows(x, std::move(node_index));
    if (positional) out = out + ad::gather_rows(p.positional, std::move(pos_index));
    return out;
}

// `layers` propagation steps followed by position_vectors.
inline ad::var ggnn_forward(const bound_parameters& p, const graph_batch& g, ad::var initial, std::size_t layers,
                            double dropout_p, bool positional) {
    return position_vectors(p, g, propagate(p, g, initial, layers), dropout_p, positional);
}

// Row b*L + len_b - 1 of the position vectors, one per session: (B, d).
inline ad::var last_positions(const graph_batch& g, ad::var positions) {
    std::vector<long> idx(g.batch);
    for (std::size_t b = 0; b < g.batch; ++b) {
        detail::require(g.lengths[b] >= 1, "last_positions: empty session");
        idx[b] = static_cast<long>(b * g.max_len + g.lengths[b] - 1);
    }
    return ad::gather_rows(positions, std::move(idx));
}

struct readout {
    ad::var s_long; // (B, d)
    ad::var alpha;  // (B, L), zero on padding
};

/// alpha_i = softmax_i q^T sigmoid(W_1 v~_n + W_2 v~_i + b) over real
/// positions; s_long = sum_i alpha_i v~_i.
inline readout attention_readout(const bound_parameters& p, ad::var positions, ad::var last,
                                 const std::vector<char>& position_mask, std::size_t batch, std::size_t max_len) {
    const std::size_t B = batch, L = max_len, d = p.q.value().size();
    if (positions.shape() != shape_t{B * L, d} || last.shape() != shape_t{B, d})
        throw dimension_error("attention_readout: positions " + detail::shape_string(positions.shape()) + ", last " +
                              detail::shape_string(last.shape()));
    std::vector<long> owner(B * L);
    for (std::size_t i = 0; i < B * L; ++i) owner[i] = static_cast<long>(i / L);
    ad::var from_last = ad::gather_rows(ad::matmul_t(last, p.w_1), std::move(owner));
    ad::var gate = ad::sigmoid(ad::add_rowvec(from_last + ad::matmul_t(positions, p.w_2), p.b_att));
    ad::var q_col = ad::reshape(p.q, {d, 1});
    ad::var scores = ad::reshape(ad::matmul(gate, q_col), {B, L});
    ad::var alpha = ad::softmax(scores, &position_mask);
    ad::var pooled = ad::bmm(ad::reshape(alpha, {B, 1, L}), ad::reshape(positions, {B, L, d}));
    return {ad::reshape(pooled, {B, d}), alpha};
}

// [s_long, s_short] W_3.
inline ad::var hybrid(const bound_parameters& p, ad::var s_long, ad::var s_short) {
    return ad::matmul(ad::concat(s_long, s_short), p.w_3);
}

/// Logits over items 1..m (column j is item j+1).
/// Normalized: r * cos(s_h, v_n) on raw embedding rows. Otherwise s_h . v_n.
inline ad::var score(ad::var s_hybrid, ad::var item_embeddings, double r, bool normalized) {
    const std::size_t rows = item_embeddings.value().dim(0);
    ad::var items = ad::slice_rows(item_embeddings, 1, rows);
    if (!normalized) return ad::matmul_t(s_hybrid, items);
    detail::require(r > 1.0, "score: scale r must exceed 1");
    for (std::size_t b = 0; b < s_hybrid.value().rows(); ++b)
        if (norm2(s_hybrid.value().row(b)) < ad::normalize_epsilon)
            throw contract_error("score: zero session embedding cannot be normalized");
    return ad::scale(ad::matmul_t(ad::l2_normalize(s_hybrid), ad::l2_normalize(items)), r);
}

inline ad::var softmax_probs(ad::var logits) { return ad::softmax(logits); }

struct forward_result {
    ad::var node_states; // after GGNN, before dropout: (B*N, d)
    ad::var positions;   // v~, (B*L, d)
    ad::var s_short;     // (B, d)
    ad::var s_long;      // (B, d)
    ad::var alpha;       // (B, L)
    ad::var s_hybrid;    // (B, d)
};

/// Session encoder: embedding, GGNN, positions, readout, hybrid. Dropout is
/// active iff the tape is in training mode.
inline forward_result encode_sessions(const bound_parameters& p, const model_config& cfg, const graph_batch& g) {
    const std::size_t B = g.batch, N = g.max_nodes;
    const std::size_t d = p.q.value().size();
    ad::var init = embed_items(p.item_embeddings, g.node_items, cfg.dropout);
    if (init.shape() != shape_t{B * N, d}) throw dimension_error("encode_sessions: embedding shape mismatch");
    forward_result out;
    out.node_states = propagate(p, g, init, cfg.layers);
    out.positions = position_vectors(p, g, out.node_states, cfg.dropout, cfg.pe);
    out.s_short = last_positions(g, out.positions);
    readout ro = attention_readout(p, out.positions, out.s_short, g.position_mask, B, g.max_len);
    out.s_long = ro.s_long;
    out.alpha = ro.alpha;
    out.s_hybrid = hybrid(p, out.s_long, out.s_short);
    return out;
}

/// Eval-mode logits for a list of sessions, (B, m). Processes `chunk`
/// sessions per tape.
inline tensor predict_logits(const parameter_store& params, const model_config& cfg,
                             const std::vector<session>& sessions, std::size_t chunk = 256) {
    const std::size_t m = params.num_items();
    tensor out({sessions.size(), m});
    for (std::size_t begin = 0; begin < sessions.size(); begin += chunk) {
        const std::size_t end = std::min(sessions.size(), begin + chunk);
        std::vector<session> part(sessions.begin() + static_cast<std::ptrdiff_t>(begin),
                                  sessions.begin() + static_cast<std::ptrdiff_t>(end));
        ad::tape t;
        t.set_training(false);
        // constants: no gradient bookkeeping needed at evaluation
        bound_parameters bp{t.constant(params.item_embeddings), t.constant(params.h),   t.constant(params.b_agg),
                            t.constant(params.w_z),             t.constant(params.u_z), t.constant(params.w_r),
                            t.constant(params.u_r),             t.constant(params.w_o), t.constant(params.u_o),
                            t.constant(params.w_1),             t.constant(params.w_2), t.constant(params.q),
                            t.constant(params.b_att),           t.constant(params.w_3), t.constant(params.positional)};
        const graph_batch g = batch_graphs(part);
        forward_result f = encode_sessions(bp, cfg, g);
        ad::var logits = score(f.s_hybrid, bp.item_embeddings, cfg.r, cfg.norm);
        const tensor& lv = logits.value();
        std::copy(lv.data().begin(), lv.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(begin * m));
    }
    return out;
}

} // namespace simcgnn
