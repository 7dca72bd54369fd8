#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

#include "data.hpp"
#include "errors.hpp"
#include "tensor.hpp"

namespace simcgnn {

/// Directed transition graph of one session over its unique items.
///
/// Edge weights are transition counts divided by the source node's total
/// outgoing transition count (with multiplicity). `a_in` applies the same
/// normalization to the reversed transitions. Repeated consecutive items
/// produce self-loops.
struct session_graph {
    std::vector<item_index> nodes;  // unique items, first-occurrence order
    std::vector<std::size_t> alias; // per session position, index into nodes
    tensor a_out;                   // n x n
    tensor a_in;                    // n x n
    std::size_t last_node = 0;

    std::size_t node_count() const { return nodes.size(); }

    // Connection matrix [A_out A_in], n x 2n; row i drives node i's update.
    tensor connection() const {
        const std::size_t n = nodes.size();
        tensor out({n, 2 * n});
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < n; ++c) {
                out.at(r, c) = a_out.at(r, c);
                out.at(r, n + c) = a_in.at(r, c);
            }
        return out;
    }
};

namespace detail {
inline void row_normalize(tensor& m) {
    for (std::size_t r = 0; r < m.rows(); ++r) {
        auto row = m.row(r);
        double s = 0.0;
        for (double v : row) s += v;
        if (s > 0.0)
            for (double& v : row) v /= s;
    }
}
} // namespace detail

inline session_graph build_graph(const std::vector<item_index>& items) {
    detail::require(!items.empty(), "build_graph: empty session");
    session_graph g;
    g.alias.reserve(items.size());
    for (item_index it : items) {
        auto pos = std::find(g.nodes.begin(), g.nodes.end(), it);
        if (pos == g.nodes.end()) {
            g.alias.push_back(g.nodes.size());
            g.nodes.push_back(it);
        } else {
            g.alias.push_back(static_cast<std::size_t>(pos - g.nodes.begin()));
        }
    }
    const std::size_t n = g.nodes.size();
    g.a_out = tensor({n, n});
    g.a_in = tensor({n, n});
    for (std::size_t k = 0; k + 1 < g.alias.size(); ++k) {
        const std::size_t u = g.alias[k], v = g.alias[k + 1];
        g.a_out.at(u, v) += 1.0;
        g.a_in.at(v, u) += 1.0;
    }
    detail::row_normalize(g.a_out);
    detail::row_normalize(g.a_in);
    g.last_node = g.alias.back();
    return g;
}

inline session_graph build_graph(const session& s) { return build_graph(s.items); }

/// Zero-padded batch of session graphs.
///
/// Node axis is padded to the largest node count and the position axis to
/// the longest session. Padded nodes carry item 0 and all-zero adjacency
/// rows and columns; padded positions have alias -1.
struct graph_batch {
    std::size_t batch = 0;
    std::size_t max_nodes = 0;
    std::size_t max_len = 0;
    tensor a_out;                        // (B, N, N)
    tensor a_in;                         // (B, N, N)
    std::vector<long> node_items;        // B*N, padding_index on padded nodes
    std::vector<char> node_mask;         // B*N
    std::vector<long> alias;             // B*L, node index within the session or -1
    std::vector<char> position_mask;     // B*L
    std::vector<std::size_t> lengths;    // real positions per session
    std::vector<std::size_t> node_counts;

    std::size_t mask_sum(std::size_t b) const {
        std::size_t s = 0;
        for (std::size_t k = 0; k < max_nodes; ++k) s += node_mask[b * max_nodes + k] ? 1 : 0;
        return s;
    }
};

inline graph_batch batch_graphs(const std::vector<session_graph>& graphs) {
    detail::require(!graphs.empty(), "batch_graphs: empty batch");
    graph_batch gb;
    gb.batch = graphs.size();
    for (const auto& g : graphs) {
        gb.max_nodes = std::max(gb.max_nodes, g.node_count());
        gb.max_len = std::max(gb.max_len, g.alias.size());
    }
    const std::size_t B = gb.batch, N = gb.max_nodes, L = gb.max_len;
    gb.a_out = tensor({B, N, N});
    gb.a_in = tensor({B, N, N});
    gb.node_items.assign(B * N, static_cast<long>(padding_index));
    gb.node_mask.assign(B * N, 0);
    gb.alias.assign(B * L, -1);
    gb.position_mask.assign(B * L, 0);
    for (std::size_t b = 0; b < B; ++b) {
        const auto& g = graphs[b];
        const std::size_t n = g.node_count();
        for (std::size_t r = 0; r < n; ++r) {
            gb.node_items[b * N + r] = static_cast<long>(g.nodes[r]);
            gb.node_mask[b * N + r] = 1;
            for (std::size_t c = 0; c < n; ++c) {
                gb.a_out[(b * N + r) * N + c] = g.a_out.at(r, c);
                gb.a_in[(b * N + r) * N + c] = g.a_in.at(r, c);
            }
        }
        for (std::size_t p = 0; p < g.alias.size(); ++p) {
            gb.alias[b * L + p] = static_cast<long>(g.alias[p]);
            gb.position_mask[b * L + p] = 1;
        }
        gb.lengths.push_back(g.alias.size());
        gb.node_counts.push_back(n);
    }
    return gb;
}

inline graph_batch batch_graphs(const std::vector<session>& sessions) {
    std::vector<session_graph> graphs;
    graphs.reserve(sessions.size());
    for (const auto& s : sessions) graphs.push_back(build_graph(s.items));
    return batch_graphs(graphs);
}

} // namespace simcgnn
