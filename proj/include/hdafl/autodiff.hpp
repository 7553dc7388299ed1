#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <vector>

#include "hdafl/common.hpp"
#include "hdafl/tensor.hpp"

// Reverse-mode automatic differentiation over small dense tensors.
// A tape records nodes in creation order (which is a topological order);
// backward() walks the tape in reverse, accumulating gradients into inputs.

namespace hdafl::ad {

struct node {
    tensor value;
    tensor grad;  // allocated lazily on first accumulation
    bool needs_grad = false;
    std::vector<std::shared_ptr<node>> inputs;
    std::function<void(node&)> backward;
};

using node_ptr = std::shared_ptr<node>;

class tape;

/// Lightweight handle to a tape node.
class var {
public:
    var() = default;
    var(tape* t, node_ptr n) : tape_(t), node_(std::move(n)) {}

    const tensor& value() const { return node_->value; }
    const tensor& grad() const { return node_->grad; }
    bool has_grad() const { return node_ && !node_->grad.empty(); }

    double scalar() const {
        if (node_->value.size() != 1) throw validation_error("var::scalar: not a scalar node");
        return node_->value[0];
    }

    tape* owner() const { return tape_; }
    const node_ptr& ptr() const { return node_; }
    bool valid() const { return node_ != nullptr; }

private:
    tape* tape_ = nullptr;
    node_ptr node_;
};

inline void accumulate(node& target, const tensor& g) {
    if (target.grad.empty()) target.grad = tensor(target.value.shape());
    for (std::size_t i = 0; i < g.size(); ++i) target.grad[i] += g[i];
}

class tape {
public:
    var constant(tensor v) { return make(std::move(v), false); }

    var param(tensor v) { return make(std::move(v), true); }

    var record(tensor value, std::vector<var> inputs, std::function<void(node&)> backward) {
        auto n = std::make_shared<node>();
        n->value = std::move(value);
        for (const auto& in : inputs) {
            n->inputs.push_back(in.ptr());
            n->needs_grad = n->needs_grad || in.ptr()->needs_grad;
        }
        if (n->needs_grad) n->backward = std::move(backward);
        nodes_.push_back(n);
        return var(this, n);
    }

    /// Backpropagate from a scalar root: seeds d(root) = 1 and walks the tape
    /// in reverse creation order. Prior gradients are cleared.
    void backward(const var& root) {
        if (root.value().size() != 1)
            throw validation_error("tape::backward: root must be scalar");
        for (auto& n : nodes_) n->grad = tensor();
        root.ptr()->grad = tensor(root.value().shape(), 1.0);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            node& n = **it;
            if (n.backward && !n.grad.empty()) n.backward(n);
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    var make(tensor v, bool needs_grad) {
        auto n = std::make_shared<node>();
        n->value = std::move(v);
        n->needs_grad = needs_grad;
        nodes_.push_back(n);
        return var(this, n);
    }

    std::vector<node_ptr> nodes_;
};

namespace detail {
inline void check_same_shape(const var& a, const var& b, const char* op) {
    if (!a.value().same_shape(b.value()))
        throw validation_error(std::string(op) + ": shape mismatch " + a.value().shape_str() +
                               " vs " + b.value().shape_str());
}
}  // namespace detail

inline var add(const var& a, const var& b) {
    detail::check_same_shape(a, b, "add");
    tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
    return a.owner()->record(std::move(out), {a, b}, [](node& n) {
        if (n.inputs[0]->needs_grad) accumulate(*n.inputs[0], n.grad);
        if (n.inputs[1]->needs_grad) accumulate(*n.inputs[1], n.grad);
    });
}

inline var sub(const var& a, const var& b) {
    detail::check_same_shape(a, b, "sub");
    tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
    return a.owner()->record(std::move(out), {a, b}, [](node& n) {
        if (n.inputs[0]->needs_grad) accumulate(*n.inputs[0], n.grad);
        if (n.inputs[1]->needs_grad) {
            tensor g = n.grad;
            for (auto& v : g.storage()) v = -v;
            accumulate(*n.inputs[1], g);
        }
    });
}

inline var scale(const var& a, double c) {
    tensor out = a.value();
    for (auto& v : out.storage()) v *= c;
    return a.owner()->record(std::move(out), {a}, [c](node& n) {
        tensor g = n.grad;
        for (auto& v : g.storage()) v *= c;
        accumulate(*n.inputs[0], g);
    });
}

inline var neg(const var& a) { return scale(a, -1.0); }

inline var hadamard(const var& a, const var& b) {
    detail::check_same_shape(a, b, "hadamard");
    tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    return a.owner()->record(std::move(out), {a, b}, [](node& n) {
        if (n.inputs[0]->needs_grad) {
            tensor g = n.grad;
            for (std::size_t i = 0; i < g.size(); ++i) g[i] *= n.inputs[1]->value[i];
            accumulate(*n.inputs[0], g);
        }
        if (n.inputs[1]->needs_grad) {
            tensor g = n.grad;
            for (std::size_t i = 0; i < g.size(); ++i) g[i] *= n.inputs[0]->value[i];
            accumulate(*n.inputs[1], g);
        }
    });
}

inline var matmul(const var& a, const var& b) {
    tensor out = hdafl::matmul(a.value(), b.value());
    return a.owner()->record(std::move(out), {a, b}, [](node& n) {
        if (n.inputs[0]->needs_grad)
            accumulate(*n.inputs[0], hdafl::matmul(n.grad, transposed(n.inputs[1]->value)));
        if (n.inputs[1]->needs_grad)
            accumulate(*n.inputs[1], hdafl::matmul(transposed(n.inputs[0]->value), n.grad));
    });
}

inline var transpose(const var& a) {
    return a.owner()->record(transposed(a.value()), {a},
                             [](node& n) { accumulate(*n.inputs[0], transposed(n.grad)); });
}

inline var reshape(const var& a, std::vector<std::size_t> shape) {
    return a.owner()->record(a.value().reshaped(std::move(shape)), {a}, [](node& n) {
        accumulate(*n.inputs[0], n.grad.reshaped(n.inputs[0]->value.shape()));
    });
}

inline var relu(const var& a) {
    tensor out = a.value();
    for (auto& v : out.storage()) v = v > 0.0 ? v : 0.0;
    return a.owner()->record(std::move(out), {a}, [](node& n) {
        tensor g = n.grad;
        for (std::size_t i = 0; i < g.size(); ++i)
            if (n.inputs[0]->value[i] <= 0.0) g[i] = 0.0;
        accumulate(*n.inputs[0], g);
    });
}

/// Row-wise L2 normalization with the norm floored at `floor_val`. Rows whose
/// norm falls below the floor are divided by the floor instead, with a warning.
inline var l2_normalize_rows(const var& a, double floor_val = 1e-12) {
    const tensor& x = a.value();
    if (x.rank() != 2) throw validation_error("l2_normalize_rows: rank-2 required");
    const std::size_t n = x.rows(), m = x.cols();
    tensor out({n, m});
    std::vector<double> norms(n);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < m; ++j) s += x(i, j) * x(i, j);
        double nv = std::sqrt(s);
        if (nv < floor_val) {
            warn("l2_normalize_rows: zero-norm vector, denominator floored");
            nv = floor_val;
        }
        norms[i] = nv;
        for (std::size_t j = 0; j < m; ++j) out(i, j) = x(i, j) / nv;
    }
    return a.owner()->record(std::move(out), {a}, [norms](node& n) {
        const tensor& y = n.value;
        const std::size_t rows = y.rows(), cols = y.cols();
        tensor g({rows, cols});
        for (std::size_t i = 0; i < rows; ++i) {
            double yg = 0.0;
            for (std::size_t j = 0; j < cols; ++j) yg += y(i, j) * n.grad(i, j);
            // when the floor engaged, y != x/|x| and the map is linear: dx = g/floor
            const tensor& x0 = n.inputs[0]->value;
            double xn = 0.0;
            for (std::size_t j = 0; j < cols; ++j) xn += x0(i, j) * x0(i, j);
            const bool floored = std::sqrt(xn) < norms[i];
            for (std::size_t j = 0; j < cols; ++j) {
                const double base = floored ? n.grad(i, j) : (n.grad(i, j) - y(i, j) * yg);
                g(i, j) = base / norms[i];
            }
        }
        accumulate(*n.inputs[0], g);
    });
}

inline var softmax_rows(const var& a) {
    const tensor& x = a.value();
    if (x.rank() != 2) throw validation_error("softmax_rows: rank-2 required");
    const std::size_t n = x.rows(), m = x.cols();
    tensor out({n, m});
    for (std::size_t i = 0; i < n; ++i) {
        double mx = x(i, 0);
        for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, x(i, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            out(i, j) = std::exp(x(i, j) - mx);
            sum += out(i, j);
        }
        for (std::size_t j = 0; j < m; ++j) out(i, j) /= sum;
    }
    return a.owner()->record(std::move(out), {a}, [](node& n) {
        const tensor& y = n.value;
        const std::size_t rows = y.rows(), cols = y.cols();
        tensor g({rows, cols});
        for (std::size_t i = 0; i < rows; ++i) {
            double gy = 0.0;
            for (std::size_t j = 0; j < cols; ++j) gy += n.grad(i, j) * y(i, j);
            for (std::size_t j = 0; j < cols; ++j) g(i, j) = y(i, j) * (n.grad(i, j) - gy);
        }
        accumulate(*n.inputs[0], g);
    });
}

/// log(sum(exp(row))) per row, computed stably. Result is n x 1.
inline var logsumexp_rows(const var& a) {
    const tensor& x = a.value();
    if (x.rank() != 2) throw validation_error("logsumexp_rows: rank-2 required");
    const std::size_t n = x.rows(), m = x.cols();
    tensor out({n, 1});
    for (std::size_t i = 0; i < n; ++i) {
        double mx = x(i, 0);
        for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, x(i, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < m; ++j) sum += std::exp(x(i, j) - mx);
        out(i, 0) = mx + std::log(sum);
    }
    return a.owner()->record(std::move(out), {a}, [](node& n) {
        const tensor& x0 = n.inputs[0]->value;
        const std::size_t rows = x0.rows(), cols = x0.cols();
        tensor g({rows, cols});
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j)
                g(i, j) = std::exp(x0(i, j) - n.value(i, 0)) * n.grad(i, 0);
        accumulate(*n.inputs[0], g);
    });
}

inline var sum_all(const var& a) {
    double s = 0.0;
    for (double v : a.value().storage()) s += v;
    return a.owner()->record(tensor::from({1, 1}, {s}), {a}, [](node& n) {
        tensor g(n.inputs[0]->value.shape(), n.grad[0]);
        accumulate(*n.inputs[0], g);
    });
}

inline var mean_all(const var& a) {
    if (a.value().size() == 0) throw validation_error("mean_all: empty tensor");
    return scale(sum_all(a), 1.0 / static_cast<double>(a.value().size()));
}

inline var sum_axis0(const var& a) {
    const tensor& x = a.value();
    const std::size_t n = x.rows(), m = x.cols();
    tensor out({1, m});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out(0, j) += x(i, j);
    return a.owner()->record(std::move(out), {a}, [](node& n) {
        const std::size_t rows = n.inputs[0]->value.rows(), cols = n.inputs[0]->value.cols();
        tensor g({rows, cols});
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) g(i, j) = n.grad(0, j);
        accumulate(*n.inputs[0], g);
    });
}

inline var mean_axis0(const var& a) {
    return scale(sum_axis0(a), 1.0 / static_cast<double>(a.value().rows()));
}

/// Column-wise max over rows; ties resolve to the lowest row index.
inline var max_axis0(const var& a) {
    const tensor& x = a.value();
    const std::size_t n = x.rows(), m = x.cols();
    if (n == 0) throw validation_error("max_axis0: empty input");
    tensor out({1, m});
    std::vector<std::size_t> arg(m, 0);
    for (std::size_t j = 0; j < m; ++j) {
        double best = x(0, j);
        for (std::size_t i = 1; i < n; ++i) {
            if (x(i, j) > best) {
                best = x(i, j);
                arg[j] = i;
            }
        }
        out(0, j) = best;
    }
    return a.owner()->record(std::move(out), {a}, [arg](node& n) {
        tensor g(n.inputs[0]->value.shape());
        for (std::size_t j = 0; j < arg.size(); ++j) g(arg[j], j) = n.grad(0, j);
        accumulate(*n.inputs[0], g);
    });
}

inline var max_all(const var& a) {
    const tensor& x = a.value();
    if (x.size() == 0) throw validation_error("max_all: empty input");
    std::size_t arg = 0;
    for (std::size_t i = 1; i < x.size(); ++i)
        if (x[i] > x[arg]) arg = i;
    return a.owner()->record(tensor::from({1, 1}, {x[arg]}), {a}, [arg](node& n) {
        tensor g(n.inputs[0]->value.shape());
        g[arg] = n.grad[0];
        accumulate(*n.inputs[0], g);
    });
}

inline var min_all(const var& a) { return neg(max_all(neg(a))); }

inline var gather_rows(const var& a, std::vector<std::size_t> idx) {
    const tensor& x = a.value();
    const std::size_t m = x.cols();
    tensor out({idx.size(), m});
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] >= x.rows()) throw validation_error("gather_rows: index out of range");
        for (std::size_t j = 0; j < m; ++j) out(r, j) = x(idx[r], j);
    }
    return a.owner()->record(std::move(out), {a}, [idx](node& n) {
        tensor g(n.inputs[0]->value.shape());
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (std::size_t j = 0; j < g.cols(); ++j) g(idx[r], j) += n.grad(r, j);
        accumulate(*n.inputs[0], g);
    });
}

/// Picks x[rows[i], cols[i]] into a 1 x len row.
inline var gather_elements(const var& a, std::vector<std::size_t> rows,
                           std::vector<std::size_t> cols) {
    if (rows.size() != cols.size()) throw validation_error("gather_elements: index size mismatch");
    const tensor& x = a.value();
    tensor out({1, rows.size()});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= x.rows() || cols[i] >= x.cols())
            throw validation_error("gather_elements: index out of range");
        out(0, i) = x(rows[i], cols[i]);
    }
    return a.owner()->record(std::move(out), {a}, [rows, cols](node& n) {
        tensor g(n.inputs[0]->value.shape());
        for (std::size_t i = 0; i < rows.size(); ++i) g(rows[i], cols[i]) += n.grad(0, i);
        accumulate(*n.inputs[0], g);
    });
}

inline var concat_rows(const std::vector<var>& parts) {
    if (parts.empty()) throw validation_error("concat_rows: no parts");
    const std::size_t m = parts[0].value().cols();
    std::size_t n = 0;
    for (const auto& p : parts) {
        if (p.value().cols() != m) throw validation_error("concat_rows: column mismatch");
        n += p.value().rows();
    }
    tensor out({n, m});
    std::size_t r0 = 0;
    for (const auto& p : parts) {
        for (std::size_t i = 0; i < p.value().rows(); ++i)
            for (std::size_t j = 0; j < m; ++j) out(r0 + i, j) = p.value()(i, j);
        r0 += p.value().rows();
    }
    return parts[0].owner()->record(std::move(out), parts, [](node& n) {
        std::size_t r0 = 0;
        for (auto& in : n.inputs) {
            const std::size_t rows = in->value.rows(), cols = in->value.cols();
            if (in->needs_grad) {
                tensor g({rows, cols});
                for (std::size_t i = 0; i < rows; ++i)
                    for (std::size_t j = 0; j < cols; ++j) g(i, j) = n.grad(r0 + i, j);
                accumulate(*in, g);
            }
            r0 += rows;
        }
    });
}

inline var concat_cols(const std::vector<var>& parts) {
    if (parts.empty()) throw validation_error("concat_cols: no parts");
    const std::size_t n = parts[0].value().rows();
    std::size_t m = 0;
    for (const auto& p : parts) {
        if (p.value().rows() != n) throw validation_error("concat_cols: row mismatch");
        m += p.value().cols();
    }
    tensor out({n, m});
    std::size_t c0 = 0;
    for (const auto& p : parts) {
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < p.value().cols(); ++j) out(i, c0 + j) = p.value()(i, j);
        c0 += p.value().cols();
    }
    return parts[0].owner()->record(std::move(out), parts, [](node& n) {
        std::size_t c0 = 0;
        for (auto& in : n.inputs) {
            const std::size_t rows = in->value.rows(), cols = in->value.cols();
            if (in->needs_grad) {
                tensor g({rows, cols});
                for (std::size_t i = 0; i < rows; ++i)
                    for (std::size_t j = 0; j < cols; ++j) g(i, j) = n.grad(i, c0 + j);
                accumulate(*in, g);
            }
            c0 += cols;
        }
    });
}

inline var slice_cols(const var& a, std::size_t c0, std::size_t c1) {
    const tensor& x = a.value();
    if (c0 >= c1 || c1 > x.cols()) throw validation_error("slice_cols: bad range");
    tensor out({x.rows(), c1 - c0});
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = c0; j < c1; ++j) out(i, j - c0) = x(i, j);
    return a.owner()->record(std::move(out), {a}, [c0](node& n) {
        tensor g(n.inputs[0]->value.shape());
        for (std::size_t i = 0; i < n.grad.rows(); ++i)
            for (std::size_t j = 0; j < n.grad.cols(); ++j) g(i, c0 + j) = n.grad(i, j);
        accumulate(*n.inputs[0], g);
    });
}

/// X + 1 b^T for a 1 x m bias row.
inline var add_bias_row(const var& x, const var& b) {
    const tensor& xv = x.value();
    const tensor& bv = b.value();
    if (bv.rows() != 1 || bv.cols() != xv.cols())
        throw validation_error("add_bias_row: bias shape mismatch");
    tensor out = xv;
    for (std::size_t i = 0; i < xv.rows(); ++i)
        for (std::size_t j = 0; j < xv.cols(); ++j) out(i, j) += bv(0, j);
    return x.owner()->record(std::move(out), {x, b}, [](node& n) {
        if (n.inputs[0]->needs_grad) accumulate(*n.inputs[0], n.grad);
        if (n.inputs[1]->needs_grad) {
            tensor g({1, n.grad.cols()});
            for (std::size_t i = 0; i < n.grad.rows(); ++i)
                for (std::size_t j = 0; j < n.grad.cols(); ++j) g(0, j) += n.grad(i, j);
            accumulate(*n.inputs[1], g);
        }
    });
}

/// Row-normalized cosine similarity matrix: rows of a vs rows of b, n x m.
inline var cosine_matrix(const var& a, const var& b, double floor_val = 1e-12) {
    return matmul(l2_normalize_rows(a, floor_val), transpose(l2_normalize_rows(b, floor_val)));
}

}  // namespace hdafl::ad
