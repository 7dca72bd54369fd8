#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"

using namespace simcgnn;
using testing_support::random_tensor;

namespace {

parameter_store toy_params(std::size_t m = 5, std::size_t d = 4, std::uint64_t seed = 3) {
    return parameter_store::initialize(m, testing_support::toy_model(d), rng(seed));
}

bound_parameters constants(ad::tape& t, const parameter_store& p) {
    std::vector<ad::var> v;
    for (const auto& [n, x] : p.named()) v.push_back(t.constant(*x));
    return testing_support::bind_leaves(v);
}

double sigm(double x) { return 1.0 / (1.0 + std::exp(-x)); }

using mat = std::vector<std::vector<double>>;

mat to_mat(const tensor& t) {
    mat out(t.dim(0), std::vector<double>(t.dim(1)));
    for (std::size_t r = 0; r < t.dim(0); ++r)
        for (std::size_t c = 0; c < t.dim(1); ++c) out[r][c] = t.at(r, c);
    return out;
}

// Straight-line scalar evaluation of one gated update for one session:
// a_i = H [sum_j Aout_ij x_j ; sum_j Ain_ij x_j] + b, then the GRU gates.
mat scalar_ggnn(const mat& a_out, const mat& a_in, const mat& x, const parameter_store& p) {
    const std::size_t n = x.size(), d = x[0].size();
    const mat H = to_mat(p.h), Wz = to_mat(p.w_z), Uz = to_mat(p.u_z), Wr = to_mat(p.w_r), Ur = to_mat(p.u_r),
              Wo = to_mat(p.w_o), Uo = to_mat(p.u_o);
    mat out(n, std::vector<double>(d));
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> cat(2 * d, 0.0);
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t k = 0; k < d; ++k) {
                cat[k] += a_out[i][j] * x[j][k];
                cat[d + k] += a_in[i][j] * x[j][k];
            }
        std::vector<double> a(d), z(d), r(d), rx(d);
        for (std::size_t k = 0; k < d; ++k) {
            a[k] = p.b_agg[k];
            for (std::size_t q = 0; q < 2 * d; ++q) a[k] += H[k][q] * cat[q];
        }
        for (std::size_t k = 0; k < d; ++k) {
            double sz = 0.0, sr = 0.0;
            for (std::size_t q = 0; q < d; ++q) {
                sz += Wz[k][q] * a[q] + Uz[k][q] * x[i][q];
                sr += Wr[k][q] * a[q] + Ur[k][q] * x[i][q];
            }
            z[k] = sigm(sz);
            r[k] = sigm(sr);
        }
        for (std::size_t k = 0; k < d; ++k) rx[k] = r[k] * x[i][k];
        for (std::size_t k = 0; k < d; ++k) {
            double sc = 0.0;
            for (std::size_t q = 0; q < d; ++q) sc += Wo[k][q] * a[q] + Uo[k][q] * rx[q];
            const double c = std::tanh(sc);
            out[i][k] = (1.0 - z[k]) * x[i][k] + z[k] * c;
        }
    }
    return out;
}

} // namespace

TEST(EmbedItems, EvalRowsAreUnitAndPaddingIsZero) {
    auto p = toy_params();
    ad::tape t;
    auto e = embed_items(t.constant(p.item_embeddings), {1, 0, 5, 3}, 0.1).value();
    for (std::size_t r : {0u, 2u, 3u}) EXPECT_NEAR(norm2(e.row(r)), 1.0, 1e-9);
    EXPECT_EQ(norm2(e.row(1)), 0.0);
    EXPECT_THROW(embed_items(t.constant(p.item_embeddings), {6}, 0.1), contract_error);
    EXPECT_THROW(embed_items(t.constant(p.item_embeddings), {-2}, 0.1), contract_error);
}

TEST(Ggnn, MatchesScalarOracle) {
    // n = 3 nodes, d = 2
    auto p = toy_params(6, 2, 8);
    const session s{{4, 2, 4, 6}, 1};
    const auto graph = build_graph(s);
    ASSERT_EQ(graph.node_count(), 3u);
    rng r(5);
    const tensor x = random_tensor({3, 2}, r);

    ad::tape t;
    const auto bp = constants(t, p);
    const auto g = batch_graphs(std::vector<session>{s});
    const tensor got = ggnn_step(bp, g, t.constant(x)).value();
    const mat want = scalar_ggnn(to_mat(graph.a_out), to_mat(graph.a_in), to_mat(x), p);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(got.at(i, k), want[i][k], 1e-12);
}

TEST(Ggnn, ZeroWeightsHalveTheState) {
    auto p = toy_params(5, 3);
    for (auto& [n, x] : p.named()) x->fill(0.0);
    ad::tape t;
    const auto bp = constants(t, p);
    const auto g = batch_graphs(std::vector<session>{{{1, 2, 3}, 4}});
    rng r(1);
    const tensor x = random_tensor({3, 3}, r);
    const tensor y = ggnn_step(bp, g, t.constant(x)).value();
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], 0.5 * x[i], 1e-15);
}

TEST(Ggnn, SingleNodeDependsOnlyOnOwnState) {
    auto p = toy_params(5, 3);
    const session s{{2}, 3};
    ad::tape t;
    const auto bp = constants(t, p);
    const auto g = batch_graphs(std::vector<session>{s});
    rng r(2);
    const tensor x = random_tensor({1, 3}, r);
    const tensor got = ggnn_step(bp, g, t.constant(x)).value();
    const mat zero(1, std::vector<double>(1, 0.0));
    const mat want = scalar_ggnn(zero, zero, to_mat(x), p);
    for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(got[k], want[0][k], 1e-12);
}

TEST(Ggnn, WrongStateShapeIsDimensionError) {
    auto p = toy_params();
    ad::tape t;
    const auto bp = constants(t, p);
    const auto g = batch_graphs(std::vector<session>{{{1, 2}, 3}});
    EXPECT_THROW(ggnn_step(bp, g, t.constant(tensor({2, 5}))), dimension_error);
}

TEST(Positions, OneLayerIsStepThenPositions) {
    auto p = toy_params();
    ad::tape t;
    const auto bp = constants(t, p);
    const auto g = batch_graphs(testing_support::toy_sessions());
    auto init = embed_items(bp.item_embeddings, g.node_items, 0.1);
    const tensor a = ggnn_forward(bp, g, init, 1, 0.1, true).value();
    const tensor b = position_vectors(bp, g, ggnn_step(bp, g, init), 0.1, true).value();
    EXPECT_EQ(a, b);
}

TEST(Positions, ZeroTableGivesGgnnOutput) {
    auto p = toy_params();
    p.positional.fill(0.0);
    ad::tape t;
    const auto bp = constants(t, p);
    const session s{{1, 2, 3}, 4};
    const auto g = batch_graphs(std::vector<session>{s});
    auto states = ggnn_step(bp, g, embed_items(bp.item_embeddings, g.node_items, 0.1));
    const tensor v = position_vectors(bp, g, states, 0.1, true).value();
    EXPECT_EQ(v, states.value());
}

TEST(Positions, RepeatedItemDiffersByPositionalRows) {
    auto p = toy_params();
    ad::tape t;
    const auto bp = constants(t, p);
    const auto g = batch_graphs(std::vector<session>{{{2, 3, 2}, 4}});
    auto states = ggnn_step(bp, g, embed_items(bp.item_embeddings, g.node_items, 0.1));
    const tensor v = position_vectors(bp, g, states, 0.1, true).value();
    for (std::size_t k = 0; k < 4; ++k)
        EXPECT_NEAR(v.at(2, k) - v.at(0, k), p.positional.at(2, k) - p.positional.at(0, k), 1e-15);
    const tensor off = position_vectors(bp, g, states, 0.1, false).value();
    for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(off.at(2, k), off.at(0, k));
}

TEST(Positions, SessionLongerThanTableIsContractError) {
    auto cfg = testing_support::toy_model();
    cfg.max_len = 2;
    auto p = parameter_store::initialize(5, cfg, rng(1));
    ad::tape t;
    const auto bp = constants(t, p);
    const auto g = batch_graphs(std::vector<session>{{{1, 2, 3}, 4}});
    auto states = ggnn_step(bp, g, embed_items(bp.item_embeddings, g.node_items, 0.1));
    EXPECT_THROW(position_vectors(bp, g, states, 0.1, true), contract_error);
}

TEST(Attention, SinglePositionTakesAllWeight) {
    auto p = toy_params();
    ad::tape t;
    const auto bp = constants(t, p);
    rng r(3);
    auto v = t.constant(random_tensor({1, 4}, r));
    auto ro = attention_readout(bp, v, v, {1}, 1, 1);
    EXPECT_DOUBLE_EQ(ro.alpha.value()[0], 1.0);
    EXPECT_EQ(ro.s_long.value(), v.value());
}

TEST(Attention, IdenticalPositionsGetUniformWeight) {
    auto p = toy_params();
    ad::tape t;
    const auto bp = constants(t, p);
    rng r(4);
    const tensor row = random_tensor({4}, r);
    tensor pos({3, 4});
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t k = 0; k < 4; ++k) pos.at(i, k) = row[k];
    auto ro = attention_readout(bp, t.constant(pos), t.constant(row.reshaped({1, 4})), {1, 1, 1}, 1, 3);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(ro.alpha.value()[i], 1.0 / 3.0, 1e-15);
}

TEST(Attention, WeightsSumToOneAndVanishOnPadding) {
    auto p = toy_params();
    ad::tape t;
    const auto bp = constants(t, p);
    const auto g = batch_graphs(testing_support::toy_sessions());
    forward_result f = encode_sessions(bp, testing_support::toy_model(), g);
    const tensor a = f.alpha.value();
    for (std::size_t b = 0; b < g.batch; ++b) {
        double s = 0.0;
        for (std::size_t l = 0; l < g.max_len; ++l) {
            if (!g.position_mask[b * g.max_len + l]) EXPECT_EQ(a.at(b, l), 0.0);
            s += a.at(b, l);
        }
        EXPECT_NEAR(s, 1.0, 1e-9);
    }
    EXPECT_THROW(attention_readout(bp, f.positions, f.s_short, std::vector<char>(g.batch * g.max_len, 0), g.batch,
                                   g.max_len),
                 contract_error);
}

TEST(Hybrid, BlockIdentitiesSelectHalves) {
    auto p = toy_params();
    const std::size_t d = 4;
    rng r(6);
    const tensor sl = random_tensor({2, d}, r), ss = random_tensor({2, d}, r);
    for (int half = 0; half < 2; ++half) {
        p.w_3.fill(0.0);
        for (std::size_t k = 0; k < d; ++k) p.w_3.at(half * d + k, k) = 1.0;
        ad::tape t;
        const auto bp = constants(t, p);
        const tensor h = hybrid(bp, t.constant(sl), t.constant(ss)).value();
        EXPECT_EQ(h, half == 0 ? sl : ss);
    }
}

TEST(Hybrid, IsLinear) {
    auto p = toy_params();
    rng r(7);
    const tensor a = random_tensor({1, 4}, r), b = random_tensor({1, 4}, r), c = random_tensor({1, 4}, r);
    ad::tape t;
    const auto bp = constants(t, p);
    auto ab = ad::add(t.constant(a), t.constant(b));
    const tensor lhs = hybrid(bp, ab, t.constant(c)).value();
    const tensor rhs = ad::add(hybrid(bp, t.constant(a), t.constant(c)), hybrid(bp, t.constant(b), t.constant(tensor({1, 4})))).value();
    for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(lhs[k], rhs[k], 1e-14);
}

TEST(Score, LogitsBoundedByScaleAndParallelItemAttainsIt) {
    auto p = toy_params();
    ad::tape t;
    const auto bp = constants(t, p);
    tensor sh({1, 4});
    for (std::size_t k = 0; k < 4; ++k) sh[k] = 3.0 * p.item_embeddings.at(2, k);
    const tensor logits = score(t.constant(sh), bp.item_embeddings, 12.0, true).value();
    for (double v : logits.data()) EXPECT_LE(std::abs(v), 12.0 + 1e-12);
    EXPECT_NEAR(logits[1], 12.0, 1e-12); // column 1 is item 2
}

TEST(Score, RowRescalingLeavesProbabilitiesUnchanged) {
    auto p = toy_params();
    rng r(8);
    const tensor sh = random_tensor({2, 4}, r);
    ad::tape t;
    const tensor base = softmax_probs(score(t.constant(sh), t.constant(p.item_embeddings), 12.0, true)).value();
    tensor doubled = p.item_embeddings;
    for (double& v : doubled.data()) v *= 2.0;
    const tensor again = softmax_probs(score(t.constant(sh), t.constant(doubled), 12.0, true)).value();
    for (std::size_t i = 0; i < base.size(); ++i) EXPECT_NEAR(base[i], again[i], 1e-15);
}

TEST(Score, NormOffIsRawInnerProduct) {
    auto p = toy_params();
    rng r(9);
    const tensor sh = random_tensor({1, 4}, r);
    ad::tape t;
    const tensor logits = score(t.constant(sh), t.constant(p.item_embeddings), 12.0, false).value();
    for (std::size_t j = 1; j <= 5; ++j) EXPECT_NEAR(logits[j - 1], dot(sh.row(0), p.item_embeddings.row(j)), 1e-15);
}

TEST(Score, ZeroSessionEmbeddingAndSmallScaleAreContractErrors) {
    auto p = toy_params();
    ad::tape t;
    EXPECT_THROW(score(t.constant(tensor({1, 4})), t.constant(p.item_embeddings), 12.0, true), contract_error);
    rng r(1);
    EXPECT_THROW(score(t.constant(random_tensor({1, 4}, r)), t.constant(p.item_embeddings), 1.0, true),
                 contract_error);
}

TEST(Model, EvalModeIsDeterministic) {
    auto p = toy_params();
    const auto a = predict_logits(p, testing_support::toy_model(), testing_support::toy_sessions());
    const auto b = predict_logits(p, testing_support::toy_model(), testing_support::toy_sessions());
    EXPECT_EQ(a, b);
    const auto one = predict_logits(p, testing_support::toy_model(), {testing_support::toy_sessions()[1]});
    for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(one[j], a.at(1, j), 1e-14);
}

TEST(Model, InitializationShapesAndPaddingRow) {
    model_config cfg;
    cfg.d = 20;
    auto p = parameter_store::initialize(300, cfg, rng(2));
    EXPECT_EQ(p.item_embeddings.shape(), (shape_t{301, 20}));
    EXPECT_EQ(p.h.shape(), (shape_t{20, 40}));
    EXPECT_EQ(p.w_3.shape(), (shape_t{40, 20}));
    EXPECT_EQ(p.positional.shape(), (shape_t{50, 20}));
    EXPECT_EQ(norm2(p.item_embeddings.row(0)), 0.0);
    double s2 = 0.0;
    for (std::size_t r = 1; r <= 300; ++r)
        for (double v : p.item_embeddings.row(r)) s2 += v * v;
    EXPECT_NEAR(std::sqrt(s2 / 6000.0), 0.1, 0.005);
}

TEST(Model, FullLossGradientsMatchFiniteDifferences) {
    config cfg;
    cfg.model = testing_support::toy_model(4);
    cfg.contrastive.tau = 1.0;
    cfg.contrastive.beta = 0.5;
    cfg.train.weight_decay = 1e-2;
    auto p = parameter_store::initialize(5, cfg.model, rng(4));
    const auto sessions = testing_support::toy_sessions();
    rng r(5);
    const std::vector<tensor> negatives = {random_tensor({2, 4}, r), tensor(), random_tensor({4, 4}, r)};
    const auto res = testing_support::check_gradients(
        [&](ad::tape& t, const std::vector<ad::var>& v) {
            return testing_support::full_model_loss(t, v, cfg, sessions, negatives);
        },
        testing_support::store_tensors(p), 1e-3, true);
    const auto names = testing_support::store_names(p);
    for (std::size_t k = 0; k < names.size(); ++k)
        EXPECT_LT(res.relative_error[k], 1e-4) << names[k];
}
