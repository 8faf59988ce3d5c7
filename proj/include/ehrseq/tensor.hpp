#pragma once

// Dense 64-bit tensors with reverse-mode automatic differentiation.
//
// Ops executed while a Tape is active record a backward closure whenever any
// input requires gradients. backward(loss) replays the tape in reverse; each
// entry is visited exactly once. A consumed tape rejects a second backward
// call (grads are not silently zeroed); build a fresh tape per step instead.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ehrseq/rng.hpp"

namespace ehrseq {

struct TensorNode {
    std::vector<std::size_t> shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until backward touches this node
    bool requires_grad = false;

    std::size_t size() const { return data.size(); }

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
    }
};

using NodePtr = std::shared_ptr<TensorNode>;

namespace detail {

inline std::string shape_str(const std::vector<std::size_t>& s) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ')';
    return os.str();
}

[[noreturn]] inline void shape_error(const char* op, const std::vector<std::size_t>& a,
                                     const std::vector<std::size_t>& b) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) +
                                " vs " + shape_str(b));
}

inline std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) {
        if (e == 0) throw std::invalid_argument("tensor extents must be positive");
        n *= e;
    }
    return n;
}

// Sums addends in value order so the result is invariant to input permutation.
inline double permutation_invariant_sum(std::vector<double>& terms) {
    std::sort(terms.begin(), terms.end());
    double acc = 0.0;
    for (double t : terms) acc += t;
    return acc;
}

}  // namespace detail

class Tape;

/// Value-semantics handle onto a shared tensor node.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0, bool requires_grad = false) {
        const std::size_t n = detail::shape_numel(shape);
        node_ = std::make_shared<TensorNode>();
        node_->shape = std::move(shape);
        node_->data.assign(n, fill);
        node_->requires_grad = requires_grad;
    }

    Tensor(std::vector<std::size_t> shape, std::vector<double> data, bool requires_grad = false) {
        if (detail::shape_numel(shape) != data.size())
            throw std::invalid_argument("tensor data length does not match shape " +
                                        detail::shape_str(shape));
        node_ = std::make_shared<TensorNode>();
        node_->shape = std::move(shape);
        node_->data = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return Tensor({1}, std::vector<double>{v}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const std::vector<std::size_t>& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t size() const { return node_->data.size(); }
    std::size_t rows() const { return node_->shape.at(0); }
    std::size_t cols() const { return node_->shape.at(1); }

    std::vector<double>& data() { return node_->data; }
    const std::vector<double>& data() const { return node_->data; }

    double value() const {
        if (size() != 1) throw std::invalid_argument("value(): tensor is not scalar, shape " +
                                                     detail::shape_str(shape()));
        return node_->data[0];
    }

    double at(std::size_t i) const { return node_->data.at(i); }
    double at(std::size_t r, std::size_t c) const {
        if (rank() != 2) throw std::invalid_argument("at(r,c) on non-matrix");
        return node_->data.at(r * cols() + c);
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }

    /// Gradient accumulated by the last backward pass (zeros if untouched).
    std::vector<double> grad() const {
        if (node_->grad.empty()) return std::vector<double>(node_->data.size(), 0.0);
        return node_->grad;
    }
    bool has_grad() const { return !node_->grad.empty(); }
    void zero_grad() { node_->grad.clear(); }

    /// Same data, detached from gradient flow.
    Tensor detach() const {
        Tensor t;
        t.node_ = std::make_shared<TensorNode>();
        t.node_->shape = node_->shape;
        t.node_->data = node_->data;
        t.node_->requires_grad = false;
        return t;
    }

    NodePtr node() const { return node_; }

private:
    NodePtr node_;
};

/// Execution-ordered op record; parents always precede children.
class Tape {
public:
    struct Entry {
        NodePtr out;
        std::function<void()> pull;  // accumulates out->grad into parents
    };

    void record(NodePtr out, std::function<void()> pull) {
        entries_.push_back({std::move(out), std::move(pull)});
    }

    std::size_t size() const { return entries_.size(); }
    bool consumed() const { return consumed_; }

    void run_backward(const Tensor& loss) {
        if (loss.size() != 1)
            throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                        detail::shape_str(loss.shape()));
        if (entries_.empty()) throw std::invalid_argument("backward: tape is empty");
        if (consumed_)
            throw std::logic_error("backward: tape already consumed; build a new tape");
        consumed_ = true;
        loss.node()->ensure_grad();
        loss.node()->grad[0] += 1.0;
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
            if (!it->out->grad.empty()) it->pull();
        }
    }

    static Tape*& current() {
        thread_local Tape* active = nullptr;
        return active;
    }

private:
    std::vector<Entry> entries_;
    bool consumed_ = false;
};

/// RAII activation of a tape for the enclosing scope.
class TapeScope {
public:
    TapeScope() : prev_(Tape::current()) { Tape::current() = &tape_; }
    ~TapeScope() { Tape::current() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;
    Tape& tape() { return tape_; }

private:
    Tape tape_;
    Tape* prev_;
};

/// Suppresses recording (eval mode) within the enclosing scope.
class NoTapeScope {
public:
    NoTapeScope() : prev_(Tape::current()) { Tape::current() = nullptr; }
    ~NoTapeScope() { Tape::current() = prev_; }
    NoTapeScope(const NoTapeScope&) = delete;
    NoTapeScope& operator=(const NoTapeScope&) = delete;

private:
    Tape* prev_;
};

inline void backward(const Tensor& loss) {
    Tape* t = Tape::current();
    if (!t) throw std::logic_error("backward: no active tape");
    t->run_backward(loss);
}

namespace detail {

inline bool wants_tape(std::initializer_list<Tensor> inputs) {
    if (!Tape::current()) return false;
    for (const auto& t : inputs)
        if (t.requires_grad()) return true;
    return false;
}

// Finishes an op: sets requires_grad and records the pull closure if needed.
inline Tensor make_result(std::vector<std::size_t> shape, std::vector<double> data,
                          std::initializer_list<Tensor> inputs,
                          const std::function<std::function<void()>(NodePtr)>& make_pull) {
    Tensor out(std::move(shape), std::move(data));
    if (wants_tape(inputs)) {
        out.set_requires_grad(true);
        Tape::current()->record(out.node(), make_pull(out.node()));
    }
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) detail::shape_error("add", a.shape(), b.shape());
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    NodePtr an = a.node(), bn = b.node();
    return detail::make_result(a.shape(), std::move(out), {a, b}, [an, bn](NodePtr o) {
        return [an, bn, o]() {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < o->grad.size(); ++i) an->grad[i] += o->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < o->grad.size(); ++i) bn->grad[i] += o->grad[i];
            }
        };
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) detail::shape_error("sub", a.shape(), b.shape());
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    NodePtr an = a.node(), bn = b.node();
    return detail::make_result(a.shape(), std::move(out), {a, b}, [an, bn](NodePtr o) {
        return [an, bn, o]() {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < o->grad.size(); ++i) an->grad[i] += o->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < o->grad.size(); ++i) bn->grad[i] -= o->grad[i];
            }
        };
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) detail::shape_error("mul", a.shape(), b.shape());
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    NodePtr an = a.node(), bn = b.node();
    return detail::make_result(a.shape(), std::move(out), {a, b}, [an, bn](NodePtr o) {
        return [an, bn, o]() {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < o->grad.size(); ++i)
                    an->grad[i] += o->grad[i] * bn->data[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < o->grad.size(); ++i)
                    bn->grad[i] += o->grad[i] * an->data[i];
            }
        };
    });
}

inline Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
    NodePtr an = a.node();
    return detail::make_result(a.shape(), std::move(out), {a}, [an, c](NodePtr o) {
        return [an, c, o]() {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (std::size_t i = 0; i < o->grad.size(); ++i) an->grad[i] += o->grad[i] * c;
        };
    });
}

namespace detail {
inline void check_finite(const char* op, const std::vector<double>& v) {
    for (double x : v)
        if (!std::isfinite(x))
            throw std::domain_error(std::string(op) + ": non-finite value encountered");
}
}  // namespace detail

inline Tensor exp_(const Tensor& a) {
    detail::check_finite("exp input", a.data());
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.data()[i]);
    detail::check_finite("exp output", out);
    NodePtr an = a.node();
    return detail::make_result(a.shape(), std::move(out), {a}, [an](NodePtr o) {
        return [an, o]() {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (std::size_t i = 0; i < o->grad.size(); ++i)
                an->grad[i] += o->grad[i] * o->data[i];
        };
    });
}

inline Tensor log_(const Tensor& a) {
    detail::check_finite("log input", a.data());
    for (double x : a.data())
        if (x <= 0.0) throw std::domain_error("log: input must be positive");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(a.data()[i]);
    NodePtr an = a.node();
    return detail::make_result(a.shape(), std::move(out), {a}, [an](NodePtr o) {
        return [an, o]() {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (std::size_t i = 0; i < o->grad.size(); ++i)
                an->grad[i] += o->grad[i] / an->data[i];
        };
    });
}

inline Tensor sin_(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sin(a.data()[i]);
    NodePtr an = a.node();
    return detail::make_result(a.shape(), std::move(out), {a}, [an](NodePtr o) {
        return [an, o]() {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (std::size_t i = 0; i < o->grad.size(); ++i)
                an->grad[i] += o->grad[i] * std::cos(an->data[i]);
        };
    });
}

inline Tensor relu(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
    NodePtr an = a.node();
    return detail::make_result(a.shape(), std::move(out), {a}, [an](NodePtr o) {
        return [an, o]() {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (std::size_t i = 0; i < o->grad.size(); ++i)
                if (an->data[i] > 0.0) an->grad[i] += o->grad[i];
        };
    });
}

// ---------------------------------------------------------------------------
// matrix ops (rank-2)
// ---------------------------------------------------------------------------

namespace detail {
inline void require_matrix(const char* op, const Tensor& t) {
    if (t.rank() != 2)
        throw std::invalid_argument(std::string(op) + ": expected rank-2 tensor, got " +
                                    shape_str(t.shape()));
}

inline void matmul_accum(const std::vector<double>& a, const std::vector<double>& b,
                         std::vector<double>& c, std::size_t m, std::size_t k, std::size_t n,
                         bool transpose_a, bool transpose_b) {
    // c (m x n) += op(a) * op(b); row-major ikj loops
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double av = transpose_a ? a[p * m + i] : a[i * k + p];
            if (av == 0.0) continue;
            const double* brow = transpose_b ? nullptr : &b[p * n];
            double* crow = &c[i * n];
            if (!transpose_b) {
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            } else {
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * b[j * k + p];
            }
        }
    }
}
}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_matrix("matmul", a);
    detail::require_matrix("matmul", b);
    if (a.cols() != b.rows()) detail::shape_error("matmul", a.shape(), b.shape());
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    std::vector<double> out(m * n, 0.0);
    detail::matmul_accum(a.data(), b.data(), out, m, k, n, false, false);
    NodePtr an = a.node(), bn = b.node();
    return detail::make_result({m, n}, std::move(out), {a, b}, [an, bn, m, k, n](NodePtr o) {
        return [an, bn, m, k, n, o]() {
            if (an->requires_grad) {
                an->ensure_grad();  // dA += dC * B^T
                detail::matmul_accum(o->grad, bn->data, an->grad, m, n, k, false, true);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();  // dB += A^T * dC
                detail::matmul_accum(an->data, o->grad, bn->grad, k, m, n, true, false);
            }
        };
    });
}

inline Tensor transpose(const Tensor& a) {
    detail::require_matrix("transpose", a);
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
    NodePtr an = a.node();
    return detail::make_result({n, m}, std::move(out), {a}, [an, m, n](NodePtr o) {
        return [an, m, n, o]() {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) an->grad[i * n + j] += o->grad[j * m + i];
        };
    });
}

/// weights (m x n) @ values (n x d) with permutation-invariant accumulation:
/// reordering the n source rows (and weights columns consistently) yields a
/// bitwise-identical result.
inline Tensor weighted_sum_rows(const Tensor& weights, const Tensor& values) {
    detail::require_matrix("weighted_sum_rows", weights);
    detail::require_matrix("weighted_sum_rows", values);
    if (weights.cols() != values.rows())
        detail::shape_error("weighted_sum_rows", weights.shape(), values.shape());
    const std::size_t m = weights.rows(), n = weights.cols(), d = values.cols();
    std::vector<double> out(m * d, 0.0);
    std::vector<double> terms(n);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t c = 0; c < d; ++c) {
            for (std::size_t j = 0; j < n; ++j)
                terms[j] = weights.data()[i * n + j] * values.data()[j * d + c];
            out[i * d + c] = detail::permutation_invariant_sum(terms);
        }
    }
    NodePtr wn = weights.node(), vn = values.node();
    return detail::make_result({m, d}, std::move(out), {weights, values},
                               [wn, vn, m, n, d](NodePtr o) {
        return [wn, vn, m, n, d, o]() {
            if (wn->requires_grad) {
                wn->ensure_grad();
                detail::matmul_accum(o->grad, vn->data, wn->grad, m, d, n, false, true);
            }
            if (vn->requires_grad) {
                vn->ensure_grad();
                detail::matmul_accum(wn->data, o->grad, vn->grad, n, m, d, true, false);
            }
        };
    });
}

// ---------------------------------------------------------------------------
// shape / gather ops
// ---------------------------------------------------------------------------

inline Tensor concat_lastdim(const Tensor& a, const Tensor& b) {
    detail::require_matrix("concat_lastdim", a);
    detail::require_matrix("concat_lastdim", b);
    if (a.rows() != b.rows()) detail::shape_error("concat_lastdim", a.shape(), b.shape());
    const std::size_t m = a.rows(), ca = a.cols(), cb = b.cols();
    std::vector<double> out(m * (ca + cb));
    for (std::size_t i = 0; i < m; ++i) {
        std::copy_n(&a.data()[i * ca], ca, &out[i * (ca + cb)]);
        std::copy_n(&b.data()[i * cb], cb, &out[i * (ca + cb) + ca]);
    }
    NodePtr an = a.node(), bn = b.node();
    return detail::make_result({m, ca + cb}, std::move(out), {a, b},
                               [an, bn, m, ca, cb](NodePtr o) {
        return [an, bn, m, ca, cb, o]() {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < ca; ++j)
                        an->grad[i * ca + j] += o->grad[i * (ca + cb) + j];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < cb; ++j)
                        bn->grad[i * cb + j] += o->grad[i * (ca + cb) + ca + j];
            }
        };
    });
}

inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
    detail::require_matrix("concat_rows", a);
    detail::require_matrix("concat_rows", b);
    if (a.cols() != b.cols()) detail::shape_error("concat_rows", a.shape(), b.shape());
    const std::size_t ra = a.rows(), rb = b.rows(), c = a.cols();
    std::vector<double> out;
    out.reserve((ra + rb) * c);
    out.insert(out.end(), a.data().begin(), a.data().end());
    out.insert(out.end(), b.data().begin(), b.data().end());
    NodePtr an = a.node(), bn = b.node();
    return detail::make_result({ra + rb, c}, std::move(out), {a, b},
                               [an, bn, ra, rb, c](NodePtr o) {
        return [an, bn, ra, rb, c, o]() {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < ra * c; ++i) an->grad[i] += o->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < rb * c; ++i) bn->grad[i] += o->grad[ra * c + i];
            }
        };
    });
}

/// Stacks row vectors (each (1,c) or (c)) into an (n, c) matrix.
inline Tensor stack_rows(const std::vector<Tensor>& rows) {
    if (rows.empty()) throw std::invalid_argument("stack_rows: no rows");
    const std::size_t c = rows.front().size();
    for (const auto& r : rows) {
        if (r.rank() > 2 || (r.rank() == 2 && r.rows() != 1) || r.size() != c)
            throw std::invalid_argument("stack_rows: rows must be length-" + std::to_string(c) +
                                        " vectors, got " + detail::shape_str(r.shape()));
    }
    const std::size_t n = rows.size();
    std::vector<double> out;
    out.reserve(n * c);
    for (const auto& r : rows) out.insert(out.end(), r.data().begin(), r.data().end());

    bool wants = false;
    if (Tape::current())
        for (const auto& r : rows)
            if (r.requires_grad()) wants = true;
    Tensor result({n, c}, std::move(out));
    if (wants) {
        result.set_requires_grad(true);
        std::vector<NodePtr> parents;
        parents.reserve(n);
        for (const auto& r : rows) parents.push_back(r.node());
        NodePtr o = result.node();
        Tape::current()->record(o, [parents, o, c]() {
            for (std::size_t i = 0; i < parents.size(); ++i) {
                if (!parents[i]->requires_grad) continue;
                parents[i]->ensure_grad();
                for (std::size_t j = 0; j < c; ++j)
                    parents[i]->grad[j] += o->grad[i * c + j];
            }
        });
    }
    return result;
}

/// Same data under a new shape; gradient passes through unchanged.
inline Tensor reshape(const Tensor& a, std::vector<std::size_t> shape) {
    if (detail::shape_numel(shape) != a.size())
        detail::shape_error("reshape", a.shape(), shape);
    std::vector<double> out = a.data();
    NodePtr an = a.node();
    return detail::make_result(std::move(shape), std::move(out), {a}, [an](NodePtr o) {
        return [an, o]() {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (std::size_t i = 0; i < o->grad.size(); ++i) an->grad[i] += o->grad[i];
        };
    });
}

inline Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count) {
    detail::require_matrix("slice_rows", a);
    if (start + count > a.rows() || count == 0)
        throw std::invalid_argument("slice_rows: range [" + std::to_string(start) + ", " +
                                    std::to_string(start + count) + ") out of " +
                                    std::to_string(a.rows()) + " rows");
    const std::size_t c = a.cols();
    std::vector<double> out(a.data().begin() + start * c, a.data().begin() + (start + count) * c);
    NodePtr an = a.node();
    return detail::make_result({count, c}, std::move(out), {a}, [an, start, count, c](NodePtr o) {
        return [an, start, count, c, o]() {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (std::size_t i = 0; i < count * c; ++i) an->grad[start * c + i] += o->grad[i];
        };
    });
}

/// Row gather: out[i] = table[indices[i]]; backward scatter-adds into table.
inline Tensor embedding_lookup(const Tensor& table, const std::vector<std::size_t>& indices) {
    detail::require_matrix("embedding_lookup", table);
    const std::size_t rows = table.rows(), d = table.cols();
    for (std::size_t idx : indices)
        if (idx >= rows)
            throw std::out_of_range("embedding_lookup: index " + std::to_string(idx) +
                                    " out of table with " + std::to_string(rows) + " rows");
    if (indices.empty()) throw std::invalid_argument("embedding_lookup: empty index list");
    std::vector<double> out(indices.size() * d);
    for (std::size_t i = 0; i < indices.size(); ++i)
        std::copy_n(&table.data()[indices[i] * d], d, &out[i * d]);
    NodePtr tn = table.node();
    auto idx = indices;
    return detail::make_result({indices.size(), d}, std::move(out), {table},
                               [tn, idx, d](NodePtr o) {
        return [tn, idx, d, o]() {
            if (!tn->requires_grad) return;
            tn->ensure_grad();
            for (std::size_t i = 0; i < idx.size(); ++i)
                for (std::size_t j = 0; j < d; ++j)
                    tn->grad[idx[i] * d + j] += o->grad[i * d + j];
        };
    });
}

// ---------------------------------------------------------------------------
// reductions / broadcasts
// ---------------------------------------------------------------------------

/// Mean over one axis of a matrix; axis 0 -> (cols), axis 1 -> (rows).
inline Tensor mean_axis(const Tensor& a, int axis) {
    detail::require_matrix("mean_axis", a);
    const std::size_t m = a.rows(), n = a.cols();
    if (axis != 0 && axis != 1) throw std::invalid_argument("mean_axis: axis must be 0 or 1");
    std::vector<double> out(axis == 0 ? n : m, 0.0);
    if (axis == 0) {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) out[j] += a.data()[i * n + j];
        for (double& v : out) v /= static_cast<double>(m);
    } else {
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) out[i] += a.data()[i * n + j];
            out[i] /= static_cast<double>(n);
        }
    }
    NodePtr an = a.node();
    std::vector<std::size_t> oshape{axis == 0 ? n : m};
    return detail::make_result(std::move(oshape), std::move(out), {a}, [an, m, n, axis](NodePtr o) {
        return [an, m, n, axis, o]() {
            if (!an->requires_grad) return;
            an->ensure_grad();
            if (axis == 0) {
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j)
                        an->grad[i * n + j] += o->grad[j] / static_cast<double>(m);
            } else {
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j)
                        an->grad[i * n + j] += o->grad[i] / static_cast<double>(n);
            }
        };
    });
}

inline Tensor sum_axis(const Tensor& a, int axis) {
    detail::require_matrix("sum_axis", a);
    const std::size_t m = a.rows(), n = a.cols();
    if (axis != 0 && axis != 1) throw std::invalid_argument("sum_axis: axis must be 0 or 1");
    std::vector<double> out(axis == 0 ? n : m, 0.0);
    if (axis == 0) {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) out[j] += a.data()[i * n + j];
    } else {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) out[i] += a.data()[i * n + j];
    }
    NodePtr an = a.node();
    std::vector<std::size_t> oshape{axis == 0 ? n : m};
    return detail::make_result(std::move(oshape), std::move(out), {a}, [an, m, n, axis](NodePtr o) {
        return [an, m, n, axis, o]() {
            if (!an->requires_grad) return;
            an->ensure_grad();
            if (axis == 0) {
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) an->grad[i * n + j] += o->grad[j];
            } else {
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) an->grad[i * n + j] += o->grad[i];
            }
        };
    });
}

inline Tensor mean_all(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    const double inv = 1.0 / static_cast<double>(a.size());
    NodePtr an = a.node();
    return detail::make_result({1}, {s * inv}, {a}, [an, inv](NodePtr o) {
        return [an, inv, o]() {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (double& g : an->grad) g += o->grad[0] * inv;
        };
    });
}

inline Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    NodePtr an = a.node();
    return detail::make_result({1}, {s}, {a}, [an](NodePtr o) {
        return [an, o]() {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (double& g : an->grad) g += o->grad[0];
        };
    });
}

/// Sum of all entries with value-ordered accumulation, so the result is
/// invariant to any permutation of the entries.
inline Tensor sum_all_invariant(const Tensor& a) {
    std::vector<double> terms = a.data();
    const double s = detail::permutation_invariant_sum(terms);
    NodePtr an = a.node();
    return detail::make_result({1}, {s}, {a}, [an](NodePtr o) {
        return [an, o]() {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (double& g : an->grad) g += o->grad[0];
        };
    });
}

/// Row-wise log(sum_j exp(x_ij)) with max subtraction; the inner sum is
/// value-ordered, so rows are invariant to column permutations.
inline Tensor logsumexp_rows(const Tensor& a) {
    detail::require_matrix("logsumexp_rows", a);
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m);
    std::vector<double> terms(n);
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = &a.data()[i * n];
        const double mx = *std::max_element(row, row + n);
        for (std::size_t j = 0; j < n; ++j) terms[j] = std::exp(row[j] - mx);
        const double denom = detail::permutation_invariant_sum(terms);
        out[i] = mx + std::log(denom);
    }
    NodePtr an = a.node();
    return detail::make_result({m}, std::move(out), {a}, [an, m, n](NodePtr o) {
        return [an, m, n, o]() {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j)
                    an->grad[i * n + j] +=
                        o->grad[i] * std::exp(an->data[i * n + j] - o->data[i]);
        };
    });
}

/// X (m x n) + v broadcast over rows; v has shape (n) or (1, n).
inline Tensor add_rowvec(const Tensor& x, const Tensor& v) {
    detail::require_matrix("add_rowvec", x);
    if (v.size() != x.cols()) detail::shape_error("add_rowvec", x.shape(), v.shape());
    const std::size_t m = x.rows(), n = x.cols();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x.data()[i * n + j] + v.data()[j];
    NodePtr xn = x.node(), vn = v.node();
    return detail::make_result({m, n}, std::move(out), {x, v}, [xn, vn, m, n](NodePtr o) {
        return [xn, vn, m, n, o]() {
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (std::size_t i = 0; i < m * n; ++i) xn->grad[i] += o->grad[i];
            }
            if (vn->requires_grad) {
                vn->ensure_grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) vn->grad[j] += o->grad[i * n + j];
            }
        };
    });
}

/// X (m x n) - c broadcast over columns; c has shape (m) or (m, 1).
inline Tensor sub_colvec(const Tensor& x, const Tensor& c) {
    detail::require_matrix("sub_colvec", x);
    if (c.size() != x.rows()) detail::shape_error("sub_colvec", x.shape(), c.shape());
    const std::size_t m = x.rows(), n = x.cols();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x.data()[i * n + j] - c.data()[i];
    NodePtr xn = x.node(), cn = c.node();
    return detail::make_result({m, n}, std::move(out), {x, c}, [xn, cn, m, n](NodePtr o) {
        return [xn, cn, m, n, o]() {
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (std::size_t i = 0; i < m * n; ++i) xn->grad[i] += o->grad[i];
            }
            if (cn->requires_grad) {
                cn->ensure_grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) cn->grad[i] -= o->grad[i * n + j];
            }
        };
    });
}

/// Row i of X scaled by s[i]; s has shape (m) or (m, 1).
inline Tensor row_scale(const Tensor& x, const Tensor& s) {
    detail::require_matrix("row_scale", x);
    if (s.size() != x.rows()) detail::shape_error("row_scale", x.shape(), s.shape());
    const std::size_t m = x.rows(), n = x.cols();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x.data()[i * n + j] * s.data()[i];
    NodePtr xn = x.node(), sn = s.node();
    return detail::make_result({m, n}, std::move(out), {x, s}, [xn, sn, m, n](NodePtr o) {
        return [xn, sn, m, n, o]() {
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j)
                        xn->grad[i * n + j] += o->grad[i * n + j] * sn->data[i];
            }
            if (sn->requires_grad) {
                sn->ensure_grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j)
                        sn->grad[i] += o->grad[i * n + j] * xn->data[i * n + j];
            }
        };
    });
}

inline Tensor take_diag(const Tensor& a) {
    detail::require_matrix("take_diag", a);
    if (a.rows() != a.cols()) detail::shape_error("take_diag", a.shape(), a.shape());
    const std::size_t n = a.rows();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i * n + i];
    NodePtr an = a.node();
    return detail::make_result({n}, std::move(out), {a}, [an, n](NodePtr o) {
        return [an, n, o]() {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) an->grad[i * n + i] += o->grad[i];
        };
    });
}

/// Per-row max as a constant (no gradient); stabilizer for log-sum-exp.
inline Tensor row_max_detached(const Tensor& a) {
    detail::require_matrix("row_max_detached", a);
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m);
    for (std::size_t i = 0; i < m; ++i)
        out[i] = *std::max_element(a.data().begin() + i * n, a.data().begin() + (i + 1) * n);
    return Tensor({m}, std::move(out));
}

// ---------------------------------------------------------------------------
// masking / normalization / stochastic
// ---------------------------------------------------------------------------

/// Replaces entries where mask != 0 with `value`. Mask shape must equal x, or
/// be a length-cols row mask / length-rows column mask (broadcast).
inline Tensor masked_fill(const Tensor& x, const Tensor& mask, double value) {
    detail::require_matrix("masked_fill", x);
    const std::size_t m = x.rows(), n = x.cols();
    enum class Mode { Full, Row, Col } mode;
    if (mask.size() == m * n && mask.rank() == 2)
        mode = Mode::Full;
    else if (mask.size() == n && mask.rank() == 1)
        mode = Mode::Row;
    else if (mask.size() == m && mask.rank() == 1)
        mode = Mode::Col;
    else
        detail::shape_error("masked_fill", x.shape(), mask.shape());
    auto masked = [&](std::size_t i, std::size_t j) {
        switch (mode) {
            case Mode::Full: return mask.data()[i * n + j] != 0.0;
            case Mode::Row: return mask.data()[j] != 0.0;
            default: return mask.data()[i] != 0.0;
        }
    };
    std::vector<double> out(m * n);
    std::vector<std::uint8_t> hit(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            const bool h = masked(i, j);
            hit[i * n + j] = h;
            out[i * n + j] = h ? value : x.data()[i * n + j];
        }
    NodePtr xn = x.node();
    return detail::make_result({m, n}, std::move(out), {x}, [xn, hit](NodePtr o) {
        return [xn, hit, o]() {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t i = 0; i < o->grad.size(); ++i)
                if (!hit[i]) xn->grad[i] += o->grad[i];
        };
    });
}

/// Row-wise softmax with max subtraction. Row sums use value-ordered
/// accumulation so the result is invariant to column permutations.
inline Tensor softmax_lastdim(const Tensor& a) {
    detail::require_matrix("softmax_lastdim", a);
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m * n);
    std::vector<double> terms(n);
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = &a.data()[i * n];
        const double mx = *std::max_element(row, row + n);
        for (std::size_t j = 0; j < n; ++j) terms[j] = std::exp(row[j] - mx);
        std::vector<double> copy(terms);
        const double denom = detail::permutation_invariant_sum(copy);
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = terms[j] / denom;
    }
    NodePtr an = a.node();
    return detail::make_result({m, n}, std::move(out), {a}, [an, m, n](NodePtr o) {
        return [an, m, n, o]() {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (std::size_t i = 0; i < m; ++i) {
                const double* y = &o->data[i * n];
                const double* g = &o->grad[i * n];
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += y[j] * g[j];
                for (std::size_t j = 0; j < n; ++j)
                    an->grad[i * n + j] += y[j] * (g[j] - dot);
            }
        };
    });
}

/// Rows scaled to unit L2 norm; rejects (numerically) zero rows.
inline Tensor l2_normalize_rows(const Tensor& a) {
    detail::require_matrix("l2_normalize_rows", a);
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m * n);
    std::vector<double> norms(m);
    for (std::size_t i = 0; i < m; ++i) {
        double ss = 0.0;
        for (std::size_t j = 0; j < n; ++j) ss += a.data()[i * n + j] * a.data()[i * n + j];
        const double norm = std::sqrt(ss);
        if (norm < 1e-12)
            throw std::domain_error("l2_normalize_rows: row " + std::to_string(i) +
                                    " has (near-)zero norm");
        norms[i] = norm;
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.data()[i * n + j] / norm;
    }
    NodePtr an = a.node();
    return detail::make_result({m, n}, std::move(out), {a}, [an, m, n, norms](NodePtr o) {
        return [an, m, n, norms, o]() {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (std::size_t i = 0; i < m; ++i) {
                const double* y = &o->data[i * n];
                const double* g = &o->grad[i * n];
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += y[j] * g[j];
                for (std::size_t j = 0; j < n; ++j)
                    an->grad[i * n + j] += (g[j] - y[j] * dot) / norms[i];
            }
        };
    });
}

/// Per-row layer normalization with learnable gain/bias (each shape (n)).
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
    detail::require_matrix("layer_norm", x);
    const std::size_t m = x.rows(), n = x.cols();
    if (gain.size() != n) detail::shape_error("layer_norm gain", x.shape(), gain.shape());
    if (bias.size() != n) detail::shape_error("layer_norm bias", x.shape(), bias.shape());
    std::vector<double> out(m * n), xhat(m * n), inv_std(m);
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = &x.data()[i * n];
        double mean = 0.0;
        for (std::size_t j = 0; j < n; ++j) mean += row[j];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= static_cast<double>(n);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[i] = is;
        for (std::size_t j = 0; j < n; ++j) {
            xhat[i * n + j] = (row[j] - mean) * is;
            out[i * n + j] = xhat[i * n + j] * gain.data()[j] + bias.data()[j];
        }
    }
    NodePtr xn = x.node(), gn = gain.node(), bn = bias.node();
    return detail::make_result({m, n}, std::move(out), {x, gain, bias},
                               [xn, gn, bn, m, n, xhat, inv_std](NodePtr o) {
        return [xn, gn, bn, m, n, xhat, inv_std, o]() {
            const double dn = static_cast<double>(n);
            for (std::size_t i = 0; i < m; ++i) {
                const double* g = &o->grad[i * n];
                const double* xh = &xhat[i * n];
                if (gn->requires_grad) {
                    gn->ensure_grad();
                    for (std::size_t j = 0; j < n; ++j) gn->grad[j] += g[j] * xh[j];
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    for (std::size_t j = 0; j < n; ++j) bn->grad[j] += g[j];
                }
                if (xn->requires_grad) {
                    xn->ensure_grad();
                    double sum_gg = 0.0, sum_ggx = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        const double gg = g[j] * gn->data[j];
                        sum_gg += gg;
                        sum_ggx += gg * xh[j];
                    }
                    for (std::size_t j = 0; j < n; ++j) {
                        const double gg = g[j] * gn->data[j];
                        xn->grad[i * n + j] +=
                            inv_std[i] * (gg - sum_gg / dn - xh[j] * sum_ggx / dn);
                    }
                }
            }
        };
    });
}

/// Inverted dropout: train mode masks entries with probability p and rescales
/// survivors by 1/(1-p); eval mode (or p == 0) is the identity and consumes
/// no randomness.
inline Tensor dropout(const Tensor& x, double p, Rng& rng, bool train) {
    if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must be in [0, 1)");
    if (!train || p == 0.0) return x;
    const double keep_scale = 1.0 / (1.0 - p);
    std::vector<double> mask(x.size());
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        mask[i] = rng.uniform() < p ? 0.0 : keep_scale;
        out[i] = x.data()[i] * mask[i];
    }
    NodePtr xn = x.node();
    return detail::make_result(x.shape(), std::move(out), {x}, [xn, mask](NodePtr o) {
        return [xn, mask, o]() {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t i = 0; i < o->grad.size(); ++i)
                xn->grad[i] += o->grad[i] * mask[i];
        };
    });
}

/// Numerically stable mean binary cross-entropy on logits; labels must be
/// exactly 0 or 1.
inline Tensor bce_with_logits(const Tensor& logits, const Tensor& labels) {
    if (logits.shape() != labels.shape())
        detail::shape_error("bce_with_logits", logits.shape(), labels.shape());
    for (double y : labels.data())
        if (y != 0.0 && y != 1.0)
            throw std::invalid_argument("bce_with_logits: labels must be 0 or 1");
    const std::size_t count = logits.size();
    double total = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
        const double z = logits.data()[i];
        const double y = labels.data()[i];
        total += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    }
    const double inv = 1.0 / static_cast<double>(count);
    NodePtr zn = logits.node(), yn = labels.node();
    return detail::make_result({1}, {total * inv}, {logits, labels}, [zn, yn, inv](NodePtr o) {
        return [zn, yn, inv, o]() {
            if (!zn->requires_grad) return;
            zn->ensure_grad();
            for (std::size_t i = 0; i < zn->data.size(); ++i) {
                const double sig = 1.0 / (1.0 + std::exp(-zn->data[i]));
                zn->grad[i] += o->grad[0] * (sig - yn->data[i]) * inv;
            }
        };
    });
}

}  // namespace ehrseq
