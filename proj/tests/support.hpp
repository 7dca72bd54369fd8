#pragma once

// Shared oracles for the test suite.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "simcgnn/simcgnn.hpp"

namespace testing_support {

using simcgnn::tensor;
namespace ad = simcgnn::ad;

// Builds a scalar loss from leaves bound on the given tape.
using loss_builder = std::function<ad::var(ad::tape&, const std::vector<ad::var>&)>;

struct gradient_check {
    std::vector<double> relative_error; // per input tensor
    std::vector<double> absolute_error;

    double worst_relative() const {
        return relative_error.empty() ? 0.0 : *std::max_element(relative_error.begin(), relative_error.end());
    }
};

// Runs the builder on a fresh tape. The dropout stream is reset to the same
// seed each time so masks repeat across evaluations.
inline double evaluate(const loss_builder& f, const std::vector<tensor>& inputs, bool training) {
    ad::tape t;
    t.set_training(training);
    t.set_dropout_rng(simcgnn::rng(99));
    std::vector<ad::var> leaves;
    for (const auto& x : inputs) leaves.push_back(t.leaf(x));
    return f(t, leaves).value().item();
}

/// Autodiff gradients against central differences. Relative error per
/// tensor is |a - n|_2 / max(|a|_2, |n|_2), 0 when both vanish.
inline gradient_check check_gradients(const loss_builder& f, std::vector<tensor> inputs, double h = 1e-3,
                                      bool training = false) {
    ad::tape t;
    t.set_training(training);
    t.set_dropout_rng(simcgnn::rng(99));
    std::vector<ad::var> leaves;
    for (const auto& x : inputs) leaves.push_back(t.leaf(x));
    ad::var loss = f(t, leaves);
    t.backward(loss);

    gradient_check out;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        const tensor analytic = t.grad(leaves[k]);
        double diff2 = 0.0, a2 = 0.0, n2 = 0.0, worst = 0.0;
        for (std::size_t i = 0; i < inputs[k].size(); ++i) {
            const double saved = inputs[k][i];
            inputs[k][i] = saved + h;
            const double up = evaluate(f, inputs, training);
            inputs[k][i] = saved - h;
            const double down = evaluate(f, inputs, training);
            inputs[k][i] = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double a = analytic[i];
            diff2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
            worst = std::max(worst, std::abs(a - numeric));
        }
        const double denom = std::max(std::sqrt(a2), std::sqrt(n2));
        out.relative_error.push_back(denom < 1e-12 ? 0.0 : std::sqrt(diff2) / denom);
        out.absolute_error.push_back(worst);
    }
    return out;
}

inline tensor random_tensor(simcgnn::shape_t shape, simcgnn::rng& r, double sd = 1.0) {
    tensor t(std::move(shape));
    for (double& v : t.data()) v = r.normal(0.0, sd);
    return t;
}

// A small fixed set of sessions over items 1..5 used by model-level checks.
inline std::vector<simcgnn::session> toy_sessions() {
    return {{{1, 2, 3, 2}, 4}, {{5, 1}, 3}, {{3, 3, 4}, 5}};
}

inline simcgnn::model_config toy_model(std::size_t d = 4) {
    simcgnn::model_config c;
    c.d = d;
    c.max_len = 8;
    c.init_std = 0.5;
    return c;
}

inline simcgnn::bound_parameters bind_leaves(const std::vector<ad::var>& v) {
    return {v.at(0), v.at(1), v.at(2),  v.at(3),  v.at(4),  v.at(5),  v.at(6), v.at(7),
            v.at(8), v.at(9), v.at(10), v.at(11), v.at(12), v.at(13), v.at(14)};
}

inline std::vector<tensor> store_tensors(const simcgnn::parameter_store& p) {
    std::vector<tensor> out;
    for (const auto& [name, t] : p.named()) out.push_back(*t);
    return out;
}

inline std::vector<std::string> store_names(const simcgnn::parameter_store& p) {
    std::vector<std::string> out;
    for (const auto& [name, t] : p.named()) out.push_back(name);
    return out;
}

// Prediction loss + contrastive term against fixed negatives + weight decay,
// all on one tape. Exercises every parameter tensor.
inline ad::var full_model_loss(ad::tape& t, const std::vector<ad::var>& leaves, const simcgnn::config& cfg,
                               const std::vector<simcgnn::session>& sessions,
                               const std::vector<tensor>& negatives) {
    using namespace simcgnn;
    const bound_parameters bp = bind_leaves(leaves);
    const graph_batch g = batch_graphs(sessions);
    forward_result f1 = encode_sessions(bp, cfg.model, g);
    forward_result f2 = encode_sessions(bp, cfg.model, g);
    ad::var logits = score(f1.s_hybrid, bp.item_embeddings, cfg.model.r, cfg.model.norm);
    ad::var pred = prediction_loss(softmax_probs(logits), labels_of(sessions));
    ad::var con = contrastive_loss(f1.s_hybrid, f2.s_hybrid, negatives, cfg.contrastive.tau);
    return total_loss(pred, con, cfg.contrastive.beta, cfg.train.weight_decay, bp);
}

} // namespace testing_support
