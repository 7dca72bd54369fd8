#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"
#include "tensor.hpp"

// Define-by-run reverse-mode differentiation over dense f64 tensors.
//
// A tape owns every intermediate value of one forward pass. Each primitive
// appends a node holding its output and, when any input needs a gradient, a
// closure that pushes the output adjoint back to the inputs. backward() walks
// the nodes in reverse creation order.

namespace simcgnn::ad {

using row_matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using matrix_map = Eigen::Map<row_matrix>;
using const_matrix_map = Eigen::Map<const row_matrix>;

class tape;

/// Handle to a node on a tape. Cheap to copy; only valid while the tape lives
/// and has not been cleared.
class var {
public:
    var() = default;
    var(tape* t, std::size_t id) : tape_(t), id_(id) {}

    tape& owner() const { return *tape_; }
    std::size_t id() const { return id_; }
    const tensor& value() const;
    const shape_t& shape() const { return value().shape(); }
    bool requires_grad() const;

private:
    tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

class tape {
public:
    tape() = default;
    tape(const tape&) = delete;
    tape& operator=(const tape&) = delete;

    var constant(tensor value) { return push(std::move(value), false, {}); }

    // Trainable leaf. Its gradient is available after backward().
    var leaf(tensor value) { return push(std::move(value), true, {}); }

    const tensor& value(var v) const { return nodes_.at(v.id()).value; }
    bool requires_grad(var v) const { return nodes_.at(v.id()).requires_grad; }

    // Gradient of the last backward() target with respect to v; zeros when v
    // was unreachable from the loss.
    tensor grad(var v) const {
        const node& n = nodes_.at(v.id());
        if (n.grad) return *n.grad;
        return tensor(n.value.shape());
    }

    void backward(var loss) {
        if (&loss.owner() != this) throw contract_error("backward: loss belongs to another tape");
        const tensor& lv = value(loss);
        if (lv.size() != 1 || lv.rank() > 1)
            throw contract_error("backward: loss must be a scalar, got shape " + simcgnn::detail::shape_string(lv.shape()));
        for (auto& n : nodes_) n.grad.reset();
        grad_ref(loss.id()).fill(1.0);
        for (std::size_t i = loss.id() + 1; i-- > 0;) {
            node& n = nodes_[i];
            if (!n.backward || !n.grad) continue;
            // closures only touch grads of earlier nodes
            n.backward(*n.grad);
        }
    }

    void clear() { nodes_.clear(); }
    std::size_t size() const { return nodes_.size(); }

    // Dropout is the identity unless training mode is on.
    void set_training(bool on) { training_ = on; }
    bool training() const { return training_; }
    void set_dropout_rng(rng r) { dropout_rng_ = r; }
    rng& dropout_rng() { return dropout_rng_; }

    // Internal: used by primitives.
    var push(tensor value, bool requires_grad, std::function<void(const tensor&)> backward) {
        nodes_.push_back(node{std::move(value), std::nullopt, requires_grad, std::move(backward)});
        return var(this, nodes_.size() - 1);
    }

    tensor& grad_ref(std::size_t id) {
        node& n = nodes_.at(id);
        if (!n.grad) n.grad.emplace(n.value.shape());
        return *n.grad;
    }

private:
    struct node {
        tensor value;
        std::optional<tensor> grad;
        bool requires_grad = false;
        std::function<void(const tensor&)> backward;
    };

    std::vector<node> nodes_;
    bool training_ = false;
    rng dropout_rng_;
};

inline const tensor& var::value() const { return tape_->value(*this); }
inline bool var::requires_grad() const { return tape_->requires_grad(*this); }

namespace detail {

inline tape& same_tape(var a, var b, const char* op) {
    if (&a.owner() != &b.owner()) throw contract_error(std::string(op) + ": operands on different tapes");
    return a.owner();
}

inline void same_shape(var a, var b, const char* op) {
    if (a.shape() != b.shape())
        throw dimension_error(std::string(op) + ": shapes " + simcgnn::detail::shape_string(a.shape()) + " and " +
                              simcgnn::detail::shape_string(b.shape()) + " differ");
}

inline void require_rank(var a, std::size_t rank, const char* op) {
    if (a.shape().size() != rank)
        throw dimension_error(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                              simcgnn::detail::shape_string(a.shape()));
}

inline const_matrix_map as_matrix(const tensor& t) { return const_matrix_map(t.data().data(), t.rows(), t.cols()); }
inline matrix_map as_matrix(tensor& t) { return matrix_map(t.data().data(), t.rows(), t.cols()); }

// Appends a node whose backward closure is only kept when an input needs it.
template <typename Backward>
var record(tape& t, tensor out, bool needs, Backward&& backward) {
    if (!needs) return t.push(std::move(out), false, {});
    return t.push(std::move(out), true, std::forward<Backward>(backward));
}

} // namespace detail

// ---------------------------------------------------------------- elementwise

inline var add(var a, var b) {
    tape& t = detail::same_tape(a, b, "add");
    detail::same_shape(a, b, "add");
    tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
    const bool ga = a.requires_grad(), gb = b.requires_grad();
    return detail::record(t, std::move(out), ga || gb, [&t, a, b, ga, gb](const tensor& g) {
        if (ga) detail::as_matrix(t.grad_ref(a.id())) += detail::as_matrix(g);
        if (gb) detail::as_matrix(t.grad_ref(b.id())) += detail::as_matrix(g);
    });
}

inline var sub(var a, var b) {
    tape& t = detail::same_tape(a, b, "sub");
    detail::same_shape(a, b, "sub");
    tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
    const bool ga = a.requires_grad(), gb = b.requires_grad();
    return detail::record(t, std::move(out), ga || gb, [&t, a, b, ga, gb](const tensor& g) {
        if (ga) detail::as_matrix(t.grad_ref(a.id())) += detail::as_matrix(g);
        if (gb) detail::as_matrix(t.grad_ref(b.id())) -= detail::as_matrix(g);
    });
}

// Hadamard product.
inline var mul(var a, var b) {
    tape& t = detail::same_tape(a, b, "hadamard");
    detail::same_shape(a, b, "hadamard");
    tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    const bool ga = a.requires_grad(), gb = b.requires_grad();
    return detail::record(t, std::move(out), ga || gb, [&t, a, b, ga, gb](const tensor& g) {
        if (ga) {
            tensor& da = t.grad_ref(a.id());
            for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * b.value()[i];
        }
        if (gb) {
            tensor& db = t.grad_ref(b.id());
            for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * a.value()[i];
        }
    });
}

inline var operator+(var a, var b) { return add(a, b); }
inline var operator-(var a, var b) { return sub(a, b); }
inline var operator*(var a, var b) { return mul(a, b); }

inline var scale(var a, double s) {
    tape& t = a.owner();
    tensor out = a.value();
    for (double& x : out.data()) x *= s;
    return detail::record(t, std::move(out), a.requires_grad(), [&t, a, s](const tensor& g) {
        detail::as_matrix(t.grad_ref(a.id())) += s * detail::as_matrix(g);
    });
}

inline var sigmoid(var a) {
    tape& t = a.owner();
    tensor out = a.value();
    for (double& x : out.data()) x = 1.0 / (1.0 + std::exp(-x));
    const std::size_t out_id = t.size();
    return detail::record(t, std::move(out), a.requires_grad(), [&t, a, out_id](const tensor& g) {
        const tensor& y = t.value(var(&t, out_id));
        tensor& da = t.grad_ref(a.id());
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * y[i] * (1.0 - y[i]);
    });
}

inline var tanh(var a) {
    tape& t = a.owner();
    tensor out = a.value();
    for (double& x : out.data()) x = std::tanh(x);
    const std::size_t out_id = t.size();
    return detail::record(t, std::move(out), a.requires_grad(), [&t, a, out_id](const tensor& g) {
        const tensor& y = t.value(var(&t, out_id));
        tensor& da = t.grad_ref(a.id());
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * (1.0 - y[i] * y[i]);
    });
}

/// Natural log. With floor > 0, inputs below floor are clamped to it and pass
/// no gradient; `clamped` (if given) counts how many entries were clamped.
inline var log(var a, double floor = 0.0, std::size_t* clamped = nullptr) {
    tape& t = a.owner();
    tensor out = a.value();
    std::vector<char> hit(out.size(), 0);
    for (std::size_t i = 0; i < out.size(); ++i) {
        double x = out[i];
        if (floor > 0.0 && x < floor) {
            x = floor;
            hit[i] = 1;
            if (clamped) ++*clamped;
        }
        out[i] = std::log(x);
    }
    return detail::record(t, std::move(out), a.requires_grad(), [&t, a, hit = std::move(hit)](const tensor& g) {
        tensor& da = t.grad_ref(a.id());
        const tensor& x = a.value();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (!hit[i]) da[i] += g[i] / x[i];
    });
}

// ----------------------------------------------------------------- reductions

inline var sum(var a) {
    tape& t = a.owner();
    double s = 0.0;
    for (double x : a.value().data()) s += x;
    return detail::record(t, tensor::scalar(s), a.requires_grad(), [&t, a](const tensor& g) {
        tensor& da = t.grad_ref(a.id());
        for (double& x : da.data()) x += g[0];
    });
}

inline var mean(var a) {
    const std::size_t n = a.value().size();
    if (n == 0) throw dimension_error("mean: empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(n));
}

// Sum over the last axis; output drops that axis.
inline var sum_last(var a) {
    tape& t = a.owner();
    const tensor& x = a.value();
    shape_t shape = x.shape();
    if (shape.empty()) throw dimension_error("sum_last: scalar input");
    shape.pop_back();
    tensor out(shape);
    for (std::size_t r = 0; r < x.rows(); ++r)
        for (double v : x.row(r)) out[r] += v;
    return detail::record(t, std::move(out), a.requires_grad(), [&t, a](const tensor& g) {
        tensor& da = t.grad_ref(a.id());
        for (std::size_t r = 0; r < da.rows(); ++r)
            for (double& v : da.row(r)) v += g[r];
    });
}

// ------------------------------------------------------------- linear algebra

inline var matmul(var a, var b) {
    tape& t = detail::same_tape(a, b, "matmul");
    detail::require_rank(a, 2, "matmul");
    detail::require_rank(b, 2, "matmul");
    if (a.shape()[1] != b.shape()[0])
        throw dimension_error("matmul: inner dimensions differ, " + simcgnn::detail::shape_string(a.shape()) +
                              " x " + simcgnn::detail::shape_string(b.shape()));
    tensor out({a.shape()[0], b.shape()[1]});
    detail::as_matrix(out).noalias() = detail::as_matrix(a.value()) * detail::as_matrix(b.value());
    const bool ga = a.requires_grad(), gb = b.requires_grad();
    return detail::record(t, std::move(out), ga || gb, [&t, a, b, ga, gb](const tensor& g) {
        if (ga)
            detail::as_matrix(t.grad_ref(a.id())).noalias() +=
                detail::as_matrix(g) * detail::as_matrix(b.value()).transpose();
        if (gb)
            detail::as_matrix(t.grad_ref(b.id())).noalias() +=
                detail::as_matrix(a.value()).transpose() * detail::as_matrix(g);
    });
}

/// a * b^T for a (n x k), b (m x k). Lets weights be stored in the
/// (out, in) orientation of column-vector formulas while activations stay
/// row-major.
inline var matmul_t(var a, var b) {
    tape& t = detail::same_tape(a, b, "matmul_t");
    detail::require_rank(a, 2, "matmul_t");
    detail::require_rank(b, 2, "matmul_t");
    if (a.shape()[1] != b.shape()[1])
        throw dimension_error("matmul_t: inner dimensions differ, " + simcgnn::detail::shape_string(a.shape()) +
                              " x " + simcgnn::detail::shape_string(b.shape()) + "^T");
    tensor out({a.shape()[0], b.shape()[0]});
    detail::as_matrix(out).noalias() = detail::as_matrix(a.value()) * detail::as_matrix(b.value()).transpose();
    const bool ga = a.requires_grad(), gb = b.requires_grad();
    return detail::record(t, std::move(out), ga || gb, [&t, a, b, ga, gb](const tensor& g) {
        if (ga)
            detail::as_matrix(t.grad_ref(a.id())).noalias() += detail::as_matrix(g) * detail::as_matrix(b.value());
        if (gb)
            detail::as_matrix(t.grad_ref(b.id())).noalias() +=
                detail::as_matrix(g).transpose() * detail::as_matrix(a.value());
    });
}

// Batched matmul: (B, n, k) x (B, k, m) -> (B, n, m).
inline var bmm(var a, var b) {
    tape& t = detail::same_tape(a, b, "bmm");
    detail::require_rank(a, 3, "bmm");
    detail::require_rank(b, 3, "bmm");
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa[0] != sb[0] || sa[2] != sb[1])
        throw dimension_error("bmm: shapes " + simcgnn::detail::shape_string(sa) + " and " +
                              simcgnn::detail::shape_string(sb) + " do not conform");
    const std::size_t B = sa[0], n = sa[1], k = sa[2], m = sb[2];
    tensor out({B, n, m});
    for (std::size_t i = 0; i < B; ++i) {
        const_matrix_map ai(a.value().data().data() + i * n * k, n, k);
        const_matrix_map bi(b.value().data().data() + i * k * m, k, m);
        matrix_map oi(out.data().data() + i * n * m, n, m);
        oi.noalias() = ai * bi;
    }
    const bool ga = a.requires_grad(), gb = b.requires_grad();
    return detail::record(t, std::move(out), ga || gb, [&t, a, b, ga, gb, B, n, k, m](const tensor& g) {
        for (std::size_t i = 0; i < B; ++i) {
            const_matrix_map gi(g.data().data() + i * n * m, n, m);
            if (ga) {
                const_matrix_map bi(b.value().data().data() + i * k * m, k, m);
                matrix_map dai(t.grad_ref(a.id()).data().data() + i * n * k, n, k);
                dai.noalias() += gi * bi.transpose();
            }
            if (gb) {
                const_matrix_map ai(a.value().data().data() + i * n * k, n, k);
                matrix_map dbi(t.grad_ref(b.id()).data().data() + i * k * m, k, m);
                dbi.noalias() += ai.transpose() * gi;
            }
        }
    });
}

// Adds a vector of width cols() to every row of a.
inline var add_rowvec(var a, var bias) {
    tape& t = detail::same_tape(a, bias, "add_rowvec");
    if (bias.value().size() != a.value().cols())
        throw dimension_error("add_rowvec: bias " + simcgnn::detail::shape_string(bias.shape()) +
                              " does not match rows of " + simcgnn::detail::shape_string(a.shape()));
    tensor out = a.value();
    for (std::size_t r = 0; r < out.rows(); ++r) {
        auto row = out.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) row[c] += bias.value()[c];
    }
    const bool ga = a.requires_grad(), gb = bias.requires_grad();
    return detail::record(t, std::move(out), ga || gb, [&t, a, bias, ga, gb](const tensor& g) {
        if (ga) detail::as_matrix(t.grad_ref(a.id())) += detail::as_matrix(g);
        if (gb) {
            tensor& db = t.grad_ref(bias.id());
            for (std::size_t r = 0; r < g.rows(); ++r) {
                auto row = g.row(r);
                for (std::size_t c = 0; c < row.size(); ++c) db[c] += row[c];
            }
        }
    });
}

// ------------------------------------------------------------ shape plumbing

inline var reshape(var a, shape_t shape) {
    tape& t = a.owner();
    tensor out = a.value().reshaped(std::move(shape));
    return detail::record(t, std::move(out), a.requires_grad(), [&t, a](const tensor& g) {
        tensor& da = t.grad_ref(a.id());
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
    });
}

// Concatenation along the last axis. Leading axes must agree.
inline var concat(var a, var b) {
    tape& t = detail::same_tape(a, b, "concat");
    const tensor& x = a.value();
    const tensor& y = b.value();
    shape_t sa = x.shape(), sb = y.shape();
    if (sa.empty() || sa.size() != sb.size() || !std::equal(sa.begin(), sa.end() - 1, sb.begin()))
        throw dimension_error("concat: shapes " + simcgnn::detail::shape_string(sa) + " and " +
                              simcgnn::detail::shape_string(sb) + " do not conform");
    const std::size_t ca = x.cols(), cb = y.cols();
    shape_t so = sa;
    so.back() = ca + cb;
    tensor out(so);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto o = out.row(r);
        std::copy(x.row(r).begin(), x.row(r).end(), o.begin());
        std::copy(y.row(r).begin(), y.row(r).end(), o.begin() + static_cast<std::ptrdiff_t>(ca));
    }
    const bool ga = a.requires_grad(), gb = b.requires_grad();
    return detail::record(t, std::move(out), ga || gb, [&t, a, b, ga, gb, ca, cb](const tensor& g) {
        for (std::size_t r = 0; r < g.rows(); ++r) {
            auto gr = g.row(r);
            if (ga) {
                auto d = t.grad_ref(a.id()).row(r);
                for (std::size_t c = 0; c < ca; ++c) d[c] += gr[c];
            }
            if (gb) {
                auto d = t.grad_ref(b.id()).row(r);
                for (std::size_t c = 0; c < cb; ++c) d[c] += gr[ca + c];
            }
        }
    });
}

// Rows [begin, end) of a rank-2 tensor.
inline var slice_rows(var a, std::size_t begin, std::size_t end) {
    tape& t = a.owner();
    detail::require_rank(a, 2, "slice_rows");
    const tensor& x = a.value();
    if (begin > end || end > x.dim(0))
        throw dimension_error("slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) + ") out of " +
                              simcgnn::detail::shape_string(x.shape()));
    const std::size_t c = x.cols();
    tensor out({end - begin, c});
    std::copy(x.data().begin() + static_cast<std::ptrdiff_t>(begin * c),
              x.data().begin() + static_cast<std::ptrdiff_t>(end * c), out.data().begin());
    return detail::record(t, std::move(out), a.requires_grad(), [&t, a, begin, c](const tensor& g) {
        tensor& da = t.grad_ref(a.id());
        for (std::size_t i = 0; i < g.size(); ++i) da[begin * c + i] += g[i];
    });
}

// Columns [begin, end) along the last axis.
inline var slice_cols(var a, std::size_t begin, std::size_t end) {
    tape& t = a.owner();
    const tensor& x = a.value();
    if (x.rank() == 0 || begin > end || end > x.cols())
        throw dimension_error("slice_cols: [" + std::to_string(begin) + "," + std::to_string(end) + ") out of " +
                              simcgnn::detail::shape_string(x.shape()));
    shape_t so = x.shape();
    so.back() = end - begin;
    tensor out(so);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto src = x.row(r);
        std::copy(src.begin() + static_cast<std::ptrdiff_t>(begin), src.begin() + static_cast<std::ptrdiff_t>(end),
                  out.row(r).begin());
    }
    return detail::record(t, std::move(out), a.requires_grad(), [&t, a, begin](const tensor& g) {
        tensor& da = t.grad_ref(a.id());
        for (std::size_t r = 0; r < g.rows(); ++r) {
            auto d = da.row(r);
            auto gr = g.row(r);
            for (std::size_t c = 0; c < gr.size(); ++c) d[begin + c] += gr[c];
        }
    });
}

/// Row gather: out[i] = a.row(index[i]); a negative index yields a zero row
/// that passes no gradient. Output is (index.size(), cols).
inline var gather_rows(var a, std::vector<long> index) {
    tape& t = a.owner();
    const tensor& x = a.value();
    const std::size_t c = x.cols();
    tensor out({index.size(), c});
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] < 0) continue;
        if (static_cast<std::size_t>(index[i]) >= x.rows())
            throw dimension_error("gather_rows: index " + std::to_string(index[i]) + " out of " +
                                  std::to_string(x.rows()) + " rows");
        auto src = x.row(static_cast<std::size_t>(index[i]));
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return detail::record(t, std::move(out), a.requires_grad(), [&t, a, index = std::move(index)](const tensor& g) {
        tensor& da = t.grad_ref(a.id());
        for (std::size_t i = 0; i < index.size(); ++i) {
            if (index[i] < 0) continue;
            auto d = da.row(static_cast<std::size_t>(index[i]));
            auto gr = g.row(i);
            for (std::size_t k = 0; k < gr.size(); ++k) d[k] += gr[k];
        }
    });
}

// One entry per row: out[r] = a.at(r, column[r]).
inline var pick(var a, std::vector<std::size_t> column) {
    tape& t = a.owner();
    const tensor& x = a.value();
    if (column.size() != x.rows())
        throw dimension_error("pick: " + std::to_string(column.size()) + " indices for " + std::to_string(x.rows()) +
                              " rows");
    tensor out({column.size()});
    for (std::size_t r = 0; r < column.size(); ++r) {
        if (column[r] >= x.cols()) throw dimension_error("pick: column " + std::to_string(column[r]) + " out of range");
        out[r] = x.at(r, column[r]);
    }
    return detail::record(t, std::move(out), a.requires_grad(), [&t, a, column = std::move(column)](const tensor& g) {
        tensor& da = t.grad_ref(a.id());
        for (std::size_t r = 0; r < column.size(); ++r) da.at(r, column[r]) += g[r];
    });
}

// ------------------------------------------------------------- normalization

inline constexpr double normalize_epsilon = 1e-12;

/// Row-wise L2 normalization. Rows with norm below 1e-12 map to zero and pass
/// no gradient.
inline var l2_normalize(var a) {
    tape& t = a.owner();
    const tensor& x = a.value();
    tensor out = x;
    std::vector<double> norms(x.rows());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const double n = norm2(x.row(r));
        norms[r] = n;
        auto o = out.row(r);
        if (n < normalize_epsilon)
            std::fill(o.begin(), o.end(), 0.0);
        else
            for (double& v : o) v /= n;
    }
    const std::size_t out_id = t.size();
    return detail::record(t, std::move(out), a.requires_grad(),
                          [&t, a, out_id, norms = std::move(norms)](const tensor& g) {
                              const tensor& y = t.value(var(&t, out_id));
                              tensor& da = t.grad_ref(a.id());
                              for (std::size_t r = 0; r < g.rows(); ++r) {
                                  if (norms[r] < normalize_epsilon) continue;
                                  auto yr = y.row(r);
                                  auto gr = g.row(r);
                                  const double yg = dot(yr, gr);
                                  auto d = da.row(r);
                                  for (std::size_t c = 0; c < d.size(); ++c) d[c] += (gr[c] - yr[c] * yg) / norms[r];
                              }
                          });
}

/// Row-wise softmax. When `mask` is given (one flag per element), masked
/// entries are excluded and output exactly 0. A row with no unmasked entry is
/// a contract error.
inline var softmax(var a, const std::vector<char>* mask = nullptr) {
    tape& t = a.owner();
    const tensor& x = a.value();
    if (mask && mask->size() != x.size())
        throw dimension_error("softmax: mask has " + std::to_string(mask->size()) + " entries for " +
                              std::to_string(x.size()));
    tensor out(x.shape());
    const std::size_t c = x.cols();
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto xr = x.row(r);
        auto o = out.row(r);
        double mx = -std::numeric_limits<double>::infinity();
        bool any = false;
        for (std::size_t k = 0; k < c; ++k)
            if (!mask || (*mask)[r * c + k]) {
                // NaN must reach the result so callers can detect divergence
                mx = std::isnan(xr[k]) || std::isnan(mx) ? std::numeric_limits<double>::quiet_NaN()
                                                         : std::max(mx, xr[k]);
                any = true;
            }
        if (!any) throw contract_error("softmax: row fully masked");
        double s = 0.0;
        for (std::size_t k = 0; k < c; ++k) {
            if (mask && !(*mask)[r * c + k]) continue;
            o[k] = std::exp(xr[k] - mx);
            s += o[k];
        }
        for (double& v : o) v /= s;
    }
    const std::size_t out_id = t.size();
    return detail::record(t, std::move(out), a.requires_grad(), [&t, a, out_id](const tensor& g) {
        const tensor& y = t.value(var(&t, out_id));
        tensor& da = t.grad_ref(a.id());
        for (std::size_t r = 0; r < g.rows(); ++r) {
            auto yr = y.row(r);
            auto gr = g.row(r);
            const double yg = dot(yr, gr);
            auto d = da.row(r);
            for (std::size_t k = 0; k < d.size(); ++k) d[k] += yr[k] * (gr[k] - yg);
        }
    });
}

/// Inverted dropout: kept entries are scaled by 1/(1-p) so evaluation needs
/// no rescaling. Identity when the tape is not in training mode or p == 0.
inline var dropout(var a, double p) {
    tape& t = a.owner();
    if (p < 0.0 || p >= 1.0) throw contract_error("dropout: p must be in [0,1), got " + std::to_string(p));
    if (!t.training() || p == 0.0) return a;
    const double keep_scale = 1.0 / (1.0 - p);
    tensor mask(a.shape());
    rng& r = t.dropout_rng();
    for (double& m : mask.data()) m = r.uniform() < p ? 0.0 : keep_scale;
    tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
    return detail::record(t, std::move(out), a.requires_grad(), [&t, a, mask = std::move(mask)](const tensor& g) {
        tensor& da = t.grad_ref(a.id());
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * mask[i];
    });
}

} // namespace simcgnn::ad
