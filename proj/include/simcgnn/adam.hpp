#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "errors.hpp"
#include "tensor.hpp"

namespace simcgnn {

struct adam_options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// Per-parameter moments for bias-corrected Adam. Parameters and gradients
/// are passed positionally; the i-th moment pair belongs to the i-th tensor.
class adam_state {
public:
    adam_state() = default;
    explicit adam_state(adam_options opts) : opts_(opts) {}

    adam_options& options() { return opts_; }
    const adam_options& options() const { return opts_; }
    std::uint64_t step_count() const { return step_; }

    void step(std::vector<tensor*> params, const std::vector<tensor>& grads) {
        if (params.size() != grads.size())
            throw dimension_error("adam_step: " + std::to_string(params.size()) + " params, " +
                                  std::to_string(grads.size()) + " grads");
        if (first_.empty()) {
            for (tensor* p : params) {
                first_.emplace_back(p->shape());
                second_.emplace_back(p->shape());
            }
        }
        if (first_.size() != params.size()) throw dimension_error("adam_step: parameter count changed");
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (params[i]->shape() != grads[i].shape() || params[i]->shape() != first_[i].shape())
                throw dimension_error("adam_step: parameter " + std::to_string(i) + " shape " +
                                      detail::shape_string(params[i]->shape()) + " vs grad " +
                                      detail::shape_string(grads[i].shape()));
        }

        ++step_;
        const double b1 = opts_.beta1, b2 = opts_.beta2;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto p = params[i]->data();
            auto g = grads[i].data();
            auto m = first_[i].data();
            auto v = second_[i].data();
            for (std::size_t k = 0; k < p.size(); ++k) {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                const double m_hat = m[k] / c1;
                const double v_hat = v[k] / c2;
                p[k] -= opts_.lr * m_hat / (std::sqrt(v_hat) + opts_.epsilon);
            }
        }
    }

    const std::vector<tensor>& first_moments() const { return first_; }
    const std::vector<tensor>& second_moments() const { return second_; }

private:
    adam_options opts_;
    std::uint64_t step_ = 0;
    std::vector<tensor> first_;
    std::vector<tensor> second_;
};

} // namespace simcgnn
