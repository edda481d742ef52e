// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensor with reverse-mode differentiation on an explicit
// per-step tape. Ops record backward closures onto the active Tape; the tape
// is consumed by a single backward() call and then discarded.

#pragma once

#include <algorithm>
#include <cblas.h>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "glam/rng.hpp"

namespace glam {

using Shape = std::vector<int64_t>;

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

inline int64_t numel_of(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}

/// Strict-numerics switch: when on, every op validates that its output is
/// finite and throws NumericError otherwise.
inline bool& strict_numerics() {
    static thread_local bool flag = false;
    return flag;
}

template <class Real>
struct Storage {
    Shape shape;
    std::vector<Real> data;
};

template <class Real>
class Tape;

/// Thread-local toggle: when false, ops do not record onto the active tape.
inline bool& grad_enabled() {
    static thread_local bool flag = true;
    return flag;
}

struct NoGradGuard {
    NoGradGuard() : prev_(grad_enabled()) { grad_enabled() = false; }
    ~NoGradGuard() { grad_enabled() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;

private:
    bool prev_;
};

template <class Real>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape) { return full(std::move(shape), Real(0)); }
    static Tensor ones(Shape shape) { return full(std::move(shape), Real(1)); }
    static Tensor full(Shape shape, Real value) {
        Tensor t;
        t.st_ = std::make_shared<Storage<Real>>();
        t.st_->shape = std::move(shape);
        t.st_->data.assign(static_cast<size_t>(numel_of(t.st_->shape)), value);
        return t;
    }
    static Tensor scalar(Real value) { return full(Shape{}, value); }
    static Tensor from(Shape shape, std::vector<Real> values) {
        Tensor t;
        t.st_ = std::make_shared<Storage<Real>>();
        require(numel_of(shape) == static_cast<int64_t>(values.size()),
                "Tensor::from: " + shape_str(shape) + " does not hold " +
                    std::to_string(values.size()) + " values");
        t.st_->shape = std::move(shape);
        t.st_->data = std::move(values);
        return t;
    }
    static Tensor randn(Shape shape, Rng& rng, Real stddev = Real(1)) {
        Tensor t = zeros(std::move(shape));
        for (Real& v : t.st_->data) v = static_cast<Real>(rng.normal()) * stddev;
        return t;
    }
    static Tensor rand_uniform(Shape shape, Rng& rng, Real lo, Real hi) {
        Tensor t = zeros(std::move(shape));
        for (Real& v : t.st_->data) v = static_cast<Real>(rng.uniform(lo, hi));
        return t;
    }

    bool defined() const { return st_ != nullptr; }
    const Shape& shape() const { return st_->shape; }
    int64_t ndim() const { return static_cast<int64_t>(st_->shape.size()); }
    int64_t dim(int64_t i) const { return st_->shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(st_->data.size()); }
    const Real* data() const { return st_->data.data(); }
    Real* mutable_data() { return st_->data.data(); }
    const std::vector<Real>& vec() const { return st_->data; }

    Real item() const {
        require(numel() == 1, "Tensor::item: tensor has " + std::to_string(numel()) + " elements");
        return st_->data[0];
    }

    bool requires_grad() const { return requires_grad_; }
    /// Mark this handle as a differentiable leaf (shares storage).
    Tensor with_grad() const {
        Tensor t = *this;
        t.requires_grad_ = true;
        return t;
    }
    /// Same values, no gradient flow. The result carries no tape node.
    Tensor detached() const {
        Tensor t = *this;
        t.requires_grad_ = false;
        return t;
    }
    Tensor clone() const {
        Tensor t = from(shape(), st_->data);
        t.requires_grad_ = requires_grad_;
        return t;
    }

    const std::shared_ptr<Storage<Real>>& storage() const { return st_; }

private:
    std::shared_ptr<Storage<Real>> st_;
    bool requires_grad_ = false;
};

template <class Real>
Tensor<Real> stop_gradient(const Tensor<Real>& x) {
    return x.detached();
}

template <class To, class From>
Tensor<To> cast(const Tensor<From>& x) {
    std::vector<To> out(x.vec().begin(), x.vec().end());
    return Tensor<To>::from(x.shape(), std::move(out));
}

// ---------------------------------------------------------------------------
// Tape

template <class Real>
class Tape {
public:
    Tape() : prev_(active_slot()) { active_slot() = this; }
    ~Tape() { active_slot() = prev_; }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() { return active_slot(); }

    void record(std::shared_ptr<Storage<Real>> out, std::function<void(Tape&)> backward) {
        nodes_.push_back(Node{std::move(out), std::move(backward)});
    }

    /// Gradient buffer for a storage, or nullptr if nothing has flowed to it.
    std::vector<Real>* grad_of(const Storage<Real>* s) {
        auto it = grads_.find(s);
        return it == grads_.end() ? nullptr : &it->second;
    }

    std::vector<Real>& grad_accum(const Storage<Real>* s) {
        auto it = grads_.find(s);
        if (it == grads_.end())
            it = grads_.emplace(s, std::vector<Real>(s->data.size(), Real(0))).first;
        return it->second;
    }

    /// Reverse sweep from a scalar loss. Consumes the tape: a second call
    /// throws. Gradients stay queryable via grad_of / grad_tensor.
    void backward(const Tensor<Real>& loss) {
        if (consumed_) throw std::runtime_error("Tape::backward called twice on one tape");
        if (loss.numel() != 1)
            throw ShapeError("Tape::backward: loss must be scalar, got " + shape_str(loss.shape()));
        if (!loss.requires_grad())
            throw std::runtime_error("Tape::backward: loss was not produced under this tape");
        consumed_ = true;
        grads_.emplace(loss.storage().get(), std::vector<Real>{Real(1)});
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (grads_.count(it->out.get())) it->back(*this);
        }
        nodes_.clear();
    }

    Tensor<Real> grad_tensor(const Tensor<Real>& leaf) {
        auto* g = grad_of(leaf.storage().get());
        if (!g) return Tensor<Real>::zeros(leaf.shape());
        return Tensor<Real>::from(leaf.shape(), *g);
    }

    bool consumed() const { return consumed_; }
    size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        std::shared_ptr<Storage<Real>> out;
        std::function<void(Tape&)> back;
    };

    static Tape*& active_slot() {
        static thread_local Tape* t = nullptr;
        return t;
    }

    std::vector<Node> nodes_;
    std::unordered_map<const Storage<Real>*, std::vector<Real>> grads_;
    bool consumed_ = false;
    Tape* prev_ = nullptr;
};

// ---------------------------------------------------------------------------
// Op plumbing

namespace detail {

template <class Real>
bool should_record(std::initializer_list<const Tensor<Real>*> inputs) {
    if (!grad_enabled() || Tape<Real>::active() == nullptr) return false;
    for (const Tensor<Real>* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

template <class Real>
void finish_op(Tensor<Real>& out, const char* opname) {
    if (strict_numerics()) {
        for (Real v : out.vec())
            if (!std::isfinite(static_cast<double>(v)))
                throw NumericError(std::string(opname) + ": non-finite output under strict numerics");
    }
}

/// Out-shape and stride tables for trailing-axis broadcasting.
struct BroadcastPlan {
    Shape out;
    std::vector<int64_t> stride_a, stride_b;  // aligned to out, 0 on broadcast dims
};

inline BroadcastPlan broadcast_plan(const Shape& a, const Shape& b, const char* opname) {
    BroadcastPlan p;
    size_t nd = std::max(a.size(), b.size());
    p.out.resize(nd);
    p.stride_a.assign(nd, 0);
    p.stride_b.assign(nd, 0);
    // Natural row-major strides.
    std::vector<int64_t> sa(a.size()), sb(b.size());
    int64_t acc = 1;
    for (size_t i = a.size(); i-- > 0;) sa[i] = acc, acc *= a[i];
    acc = 1;
    for (size_t i = b.size(); i-- > 0;) sb[i] = acc, acc *= b[i];
    for (size_t i = 0; i < nd; ++i) {
        size_t oi = nd - 1 - i;
        int64_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
        int64_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
        if (da != db && da != 1 && db != 1)
            throw ShapeError(std::string(opname) + ": shapes " + shape_str(a) + " and " +
                             shape_str(b) + " do not broadcast");
        p.out[oi] = std::max(da, db);
        p.stride_a[oi] = (da == 1 && p.out[oi] != 1) ? 0 : (i < a.size() ? sa[a.size() - 1 - i] : 0);
        p.stride_b[oi] = (db == 1 && p.out[oi] != 1) ? 0 : (i < b.size() ? sb[b.size() - 1 - i] : 0);
    }
    return p;
}

/// Walk every output index of `plan.out`, calling f(i_out, i_a, i_b).
/// Pure counter arithmetic; the visit order is the row-major output order.
template <class F>
void for_each_broadcast(const BroadcastPlan& p, F&& f) {
    size_t nd = p.out.size();
    if (nd == 0) {
        f(int64_t(0), int64_t(0), int64_t(0));
        return;
    }
    std::vector<int64_t> idx(nd, 0);
    int64_t n = numel_of(p.out);
    int64_t ia = 0, ib = 0;
    for (int64_t i = 0; i < n; ++i) {
        f(i, ia, ib);
        for (size_t d = nd; d-- > 0;) {
            idx[d]++;
            ia += p.stride_a[d];
            ib += p.stride_b[d];
            if (idx[d] < p.out[d]) break;
            ia -= p.stride_a[d] * p.out[d];
            ib -= p.stride_b[d] * p.out[d];
            idx[d] = 0;
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops with broadcasting

namespace detail {

/// Generic broadcasting binary op. DA/DB give d(out)/d(a|b) as functions of
/// the two operand values, evaluated during the backward sweep.
template <class Real, class F, class DA, class DB>
Tensor<Real> binary_op(const Tensor<Real>& a, const Tensor<Real>& b, F f, DA da, DB db,
                       const char* opname) {
    Tensor<Real> out;
    bool same = a.shape() == b.shape();
    if (same) {
        out = Tensor<Real>::zeros(a.shape());
        const Real* pa = a.data();
        const Real* pb = b.data();
        Real* po = out.mutable_data();
        int64_t n = a.numel();
        for (int64_t i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
    } else {
        auto plan = broadcast_plan(a.shape(), b.shape(), opname);
        out = Tensor<Real>::zeros(plan.out);
        const Real* pa = a.data();
        const Real* pb = b.data();
        Real* po = out.mutable_data();
        for_each_broadcast(plan, [&](int64_t i, int64_t ia, int64_t ib) { po[i] = f(pa[ia], pb[ib]); });
    }
    finish_op(out, opname);

    if (should_record<Real>({&a, &b})) {
        out = out.with_grad();
        auto sa = a.storage();
        auto sb = b.storage();
        auto so = out.storage();
        bool ga = a.requires_grad(), gb = b.requires_grad();
        Tape<Real>::active()->record(so, [=](Tape<Real>& tape) {
            const std::vector<Real>& gout = *tape.grad_of(so.get());
            std::vector<Real>* gva = ga ? &tape.grad_accum(sa.get()) : nullptr;
            std::vector<Real>* gvb = gb ? &tape.grad_accum(sb.get()) : nullptr;
            const Real* pa = sa->data.data();
            const Real* pb = sb->data.data();
            if (sa->shape == sb->shape) {
                int64_t n = static_cast<int64_t>(gout.size());
                for (int64_t i = 0; i < n; ++i) {
                    if (gva) (*gva)[i] += gout[i] * da(pa[i], pb[i]);
                    if (gvb) (*gvb)[i] += gout[i] * db(pa[i], pb[i]);
                }
            } else {
                auto plan = broadcast_plan(sa->shape, sb->shape, opname);
                for_each_broadcast(plan, [&](int64_t i, int64_t ia, int64_t ib) {
                    if (gva) (*gva)[ia] += gout[i] * da(pa[ia], pb[ib]);
                    if (gvb) (*gvb)[ib] += gout[i] * db(pa[ia], pb[ib]);
                });
            }
        });
    }
    return out;
}

/// Generic unary op; D gives d(out)/d(in) from (x, y).
template <class Real, class F, class D>
Tensor<Real> unary_op(const Tensor<Real>& x, F f, D dfdx, const char* opname) {
    Tensor<Real> out = Tensor<Real>::zeros(x.shape());
    const Real* px = x.data();
    Real* po = out.mutable_data();
    int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = f(px[i]);
    finish_op(out, opname);
    if (should_record<Real>({&x})) {
        out = out.with_grad();
        auto sx = x.storage();
        auto so = out.storage();
        Tape<Real>::active()->record(so, [=](Tape<Real>& tape) {
            const std::vector<Real>& gout = *tape.grad_of(so.get());
            std::vector<Real>& gx = tape.grad_accum(sx.get());
            const Real* px = sx->data.data();
            const Real* py = so->data.data();
            for (size_t i = 0; i < gout.size(); ++i) gx[i] += gout[i] * dfdx(px[i], py[i]);
        });
    }
    return out;
}

}  // namespace detail

template <class Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
    return detail::binary_op(
        a, b, [](Real x, Real y) { return x + y; }, [](Real, Real) { return Real(1); },
        [](Real, Real) { return Real(1); }, "add");
}
template <class Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
    return detail::binary_op(
        a, b, [](Real x, Real y) { return x - y; }, [](Real, Real) { return Real(1); },
        [](Real, Real) { return Real(-1); }, "sub");
}
template <class Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
    return detail::binary_op(
        a, b, [](Real x, Real y) { return x * y; }, [](Real, Real y) { return y; },
        [](Real x, Real) { return x; }, "mul");
}
template <class Real>
Tensor<Real> div(const Tensor<Real>& a, const Tensor<Real>& b) {
    return detail::binary_op(
        a, b, [](Real x, Real y) { return x / y; }, [](Real, Real y) { return Real(1) / y; },
        [](Real x, Real y) { return -x / (y * y); }, "div");
}

template <class Real>
Tensor<Real> operator+(const Tensor<Real>& a, const Tensor<Real>& b) { return add(a, b); }
template <class Real>
Tensor<Real> operator-(const Tensor<Real>& a, const Tensor<Real>& b) { return sub(a, b); }
template <class Real>
Tensor<Real> operator*(const Tensor<Real>& a, const Tensor<Real>& b) { return mul(a, b); }
template <class Real>
Tensor<Real> operator/(const Tensor<Real>& a, const Tensor<Real>& b) { return div(a, b); }

template <class Real>
Tensor<Real> operator+(const Tensor<Real>& a, Real s) { return add(a, Tensor<Real>::scalar(s)); }
template <class Real>
Tensor<Real> operator-(const Tensor<Real>& a, Real s) { return sub(a, Tensor<Real>::scalar(s)); }
template <class Real>
Tensor<Real> operator*(const Tensor<Real>& a, Real s) { return mul(a, Tensor<Real>::scalar(s)); }
template <class Real>
Tensor<Real> operator/(const Tensor<Real>& a, Real s) { return div(a, Tensor<Real>::scalar(s)); }
template <class Real>
Tensor<Real> operator-(Real s, const Tensor<Real>& a) { return sub(Tensor<Real>::scalar(s), a); }
template <class Real>
Tensor<Real> operator*(Real s, const Tensor<Real>& a) { return mul(a, Tensor<Real>::scalar(s)); }

// ---------------------------------------------------------------------------
// Elementwise unary ops

template <class Real>
Tensor<Real> neg(const Tensor<Real>& x) {
    return detail::unary_op(
        x, [](Real v) { return -v; }, [](Real, Real) { return Real(-1); }, "neg");
}
template <class Real>
Tensor<Real> operator-(const Tensor<Real>& x) { return neg(x); }

template <class Real>
Tensor<Real> exp(const Tensor<Real>& x) {
    return detail::unary_op(
        x, [](Real v) { return std::exp(v); }, [](Real, Real y) { return y; }, "exp");
}
template <class Real>
Tensor<Real> log(const Tensor<Real>& x) {
    return detail::unary_op(
        x, [](Real v) { return std::log(v); }, [](Real v, Real) { return Real(1) / v; }, "log");
}
template <class Real>
Tensor<Real> sqrt(const Tensor<Real>& x) {
    return detail::unary_op(
        x, [](Real v) { return std::sqrt(v); },
        [](Real, Real y) { return Real(0.5) / y; }, "sqrt");
}
template <class Real>
Tensor<Real> square(const Tensor<Real>& x) {
    return detail::unary_op(
        x, [](Real v) { return v * v; }, [](Real v, Real) { return Real(2) * v; }, "square");
}

namespace detail {
template <class Real>
Real sigmoid_scalar(Real v) {
    return v >= Real(0) ? Real(1) / (Real(1) + std::exp(-v))
                        : std::exp(v) / (Real(1) + std::exp(v));
}
template <class Real>
Real softplus_scalar(Real v) {
    // log(1 + e^v), stable on both tails
    if (v > Real(30)) return v;
    if (v < Real(-30)) return std::exp(v);
    return std::log1p(std::exp(v));
}
}  // namespace detail

template <class Real>
Tensor<Real> sigmoid(const Tensor<Real>& x) {
    return detail::unary_op(
        x, [](Real v) { return detail::sigmoid_scalar(v); },
        [](Real, Real y) { return y * (Real(1) - y); }, "sigmoid");
}
template <class Real>
Tensor<Real> softplus(const Tensor<Real>& x) {
    return detail::unary_op(
        x, [](Real v) { return detail::softplus_scalar(v); },
        [](Real v, Real) { return detail::sigmoid_scalar(v); }, "softplus");
}
template <class Real>
Tensor<Real> silu(const Tensor<Real>& x) {
    return detail::unary_op(
        x, [](Real v) { return v * detail::sigmoid_scalar(v); },
        [](Real v, Real) {
            Real s = detail::sigmoid_scalar(v);
            return s * (Real(1) + v * (Real(1) - s));
        },
        "silu");
}

/// max(x, floor) with pass-through gradient for x >= floor and zero below —
/// the free-bits clamp used by the KL losses.
template <class Real>
Tensor<Real> clamp_min(const Tensor<Real>& x, Real floor) {
    return detail::unary_op(
        x, [floor](Real v) { return v < floor ? floor : v; },
        [floor](Real v, Real) { return v >= floor ? Real(1) : Real(0); }, "clamp_min");
}

// ---------------------------------------------------------------------------
// Matrix multiply (2-D), backed by BLAS gemm

namespace detail {
inline void gemm(bool ta, bool tb, int64_t m, int64_t n, int64_t k, float alpha, const float* a,
                 int64_t lda, const float* b, int64_t ldb, float beta, float* c, int64_t ldc) {
    cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
                static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a,
                static_cast<int>(lda), b, static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}
inline void gemm(bool ta, bool tb, int64_t m, int64_t n, int64_t k, double alpha, const double* a,
                 int64_t lda, const double* b, int64_t ldb, double beta, double* c, int64_t ldc) {
    cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
                static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a,
                static_cast<int>(lda), b, static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}

/// C(m×n) += op(A)·op(B) where op transposes per flag; raw row-major buffers.
template <class Real>
void gemm_acc(bool ta, bool tb, int64_t m, int64_t n, int64_t k, const Real* a, const Real* b,
              Real* c, Real beta) {
    int64_t lda = ta ? m : k;
    int64_t ldb = tb ? k : n;
    gemm(ta, tb, m, n, k, Real(1), a, lda, b, ldb, beta, c, n);
}
}  // namespace detail

/// 2-D matrix product with optional operand transposes:
/// matmul(a, b, ta, tb) = op(a) · op(b).
template <class Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b, bool ta = false, bool tb = false) {
    require(a.ndim() == 2 && b.ndim() == 2,
            "matmul: expects 2-D operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    int64_t m = ta ? a.dim(1) : a.dim(0);
    int64_t ka = ta ? a.dim(0) : a.dim(1);
    int64_t kb = tb ? b.dim(1) : b.dim(0);
    int64_t n = tb ? b.dim(0) : b.dim(1);
    require(ka == kb, "matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                          (ta ? "^T" : "") + " x " + shape_str(b.shape()) + (tb ? "^T" : ""));
    Tensor<Real> out = Tensor<Real>::zeros({m, n});
    detail::gemm_acc<Real>(ta, tb, m, n, ka, a.data(), b.data(), out.mutable_data(), Real(0));
    detail::finish_op(out, "matmul");

    if (detail::should_record<Real>({&a, &b})) {
        out = out.with_grad();
        auto sa = a.storage();
        auto sb = b.storage();
        auto so = out.storage();
        bool need_a = a.requires_grad(), need_b = b.requires_grad();
        int64_t k = ka;
        Tape<Real>::active()->record(so, [=](Tape<Real>& tape) {
            const Real* g = tape.grad_of(so.get())->data();
            const Real* pa = sa->data.data();
            const Real* pb = sb->data.data();
            if (need_a) {
                Real* gva = tape.grad_accum(sa.get()).data();
                if (!ta) {
                    // gA = g · op(B)^T
                    if (!tb) detail::gemm_acc<Real>(false, true, m, k, n, g, pb, gva, Real(1));
                    else detail::gemm_acc<Real>(false, false, m, k, n, g, pb, gva, Real(1));
                } else {
                    // gA = op(B) · g^T
                    if (!tb) detail::gemm_acc<Real>(false, true, k, m, n, pb, g, gva, Real(1));
                    else detail::gemm_acc<Real>(true, true, k, m, n, pb, g, gva, Real(1));
                }
            }
            if (need_b) {
                Real* gvb = tape.grad_accum(sb.get()).data();
                if (!tb) {
                    // gB = op(A)^T · g
                    if (!ta) detail::gemm_acc<Real>(true, false, k, n, m, pa, g, gvb, Real(1));
                    else detail::gemm_acc<Real>(false, false, k, n, m, pa, g, gvb, Real(1));
                } else {
                    // gB = g^T · op(A)
                    if (!ta) detail::gemm_acc<Real>(true, false, n, k, m, g, pa, gvb, Real(1));
                    else detail::gemm_acc<Real>(true, true, n, k, m, g, pa, gvb, Real(1));
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shape ops

template <class Real>
Tensor<Real> reshape(const Tensor<Real>& x, Shape shape) {
    require(numel_of(shape) == x.numel(),
            "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    Tensor<Real> out = Tensor<Real>::from(std::move(shape), x.vec());
    if (detail::should_record<Real>({&x})) {
        out = out.with_grad();
        auto sx = x.storage();
        auto so = out.storage();
        Tape<Real>::active()->record(so, [=](Tape<Real>& tape) {
            const std::vector<Real>& gout = *tape.grad_of(so.get());
            std::vector<Real>& gx = tape.grad_accum(sx.get());
            for (size_t i = 0; i < gout.size(); ++i) gx[i] += gout[i];
        });
    }
    return out;
}

namespace detail {
// Splits a shape at `axis` into (outer, mid, inner) extents.
inline void axis_split(const Shape& s, int64_t axis, int64_t& outer, int64_t& mid, int64_t& inner) {
    outer = 1;
    inner = 1;
    for (int64_t i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
    mid = s[static_cast<size_t>(axis)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
}
}  // namespace detail

template <class Real>
Tensor<Real> slice_axis(const Tensor<Real>& x, int64_t axis, int64_t start, int64_t len) {
    require(axis >= 0 && axis < x.ndim(), "slice_axis: axis out of range");
    require(start >= 0 && len >= 0 && start + len <= x.dim(axis),
            "slice_axis: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                ") exceeds axis extent " + std::to_string(x.dim(axis)));
    int64_t outer, mid, inner;
    detail::axis_split(x.shape(), axis, outer, mid, inner);
    Shape oshape = x.shape();
    oshape[static_cast<size_t>(axis)] = len;
    Tensor<Real> out = Tensor<Real>::zeros(oshape);
    const Real* px = x.data();
    Real* po = out.mutable_data();
    for (int64_t o = 0; o < outer; ++o)
        std::copy_n(px + (o * mid + start) * inner, len * inner, po + o * len * inner);
    if (detail::should_record<Real>({&x})) {
        out = out.with_grad();
        auto sx = x.storage();
        auto so = out.storage();
        Tape<Real>::active()->record(so, [=](Tape<Real>& tape) {
            const std::vector<Real>& gout = *tape.grad_of(so.get());
            std::vector<Real>& gx = tape.grad_accum(sx.get());
            for (int64_t o = 0; o < outer; ++o) {
                const Real* gsrc = gout.data() + o * len * inner;
                Real* gdst = gx.data() + (o * mid + start) * inner;
                for (int64_t i = 0; i < len * inner; ++i) gdst[i] += gsrc[i];
            }
        });
    }
    return out;
}

template <class Real>
Tensor<Real> concat_axis(const std::vector<Tensor<Real>>& parts, int64_t axis) {
    require(!parts.empty(), "concat_axis: no inputs");
    Shape oshape = parts[0].shape();
    require(axis >= 0 && axis < static_cast<int64_t>(oshape.size()), "concat_axis: axis out of range");
    int64_t total = 0;
    for (const auto& p : parts) {
        Shape s = p.shape();
        require(s.size() == oshape.size(), "concat_axis: rank mismatch");
        for (size_t d = 0; d < s.size(); ++d)
            require(static_cast<int64_t>(d) == axis || s[d] == oshape[d],
                    "concat_axis: shapes " + shape_str(oshape) + " vs " + shape_str(s));
        total += p.dim(axis);
    }
    oshape[static_cast<size_t>(axis)] = total;
    Tensor<Real> out = Tensor<Real>::zeros(oshape);
    int64_t outer, mid, inner;
    detail::axis_split(oshape, axis, outer, mid, inner);
    Real* po = out.mutable_data();
    int64_t offset = 0;
    for (const auto& p : parts) {
        int64_t plen = p.dim(axis);
        const Real* pp = p.data();
        for (int64_t o = 0; o < outer; ++o)
            std::copy_n(pp + o * plen * inner, plen * inner, po + (o * mid + offset) * inner);
        offset += plen;
    }
    bool rec = false;
    for (const auto& p : parts)
        if (p.requires_grad()) rec = true;
    if (rec && grad_enabled() && Tape<Real>::active()) {
        out = out.with_grad();
        auto so = out.storage();
        std::vector<std::shared_ptr<Storage<Real>>> srcs;
        std::vector<bool> needs;
        std::vector<int64_t> lens;
        for (const auto& p : parts) {
            srcs.push_back(p.storage());
            needs.push_back(p.requires_grad());
            lens.push_back(p.dim(axis));
        }
        Tape<Real>::active()->record(so, [=](Tape<Real>& tape) {
            const std::vector<Real>& gout = *tape.grad_of(so.get());
            int64_t off = 0;
            for (size_t pi = 0; pi < srcs.size(); ++pi) {
                if (needs[pi]) {
                    std::vector<Real>& gx = tape.grad_accum(srcs[pi].get());
                    for (int64_t o = 0; o < outer; ++o) {
                        const Real* gsrc = gout.data() + (o * mid + off) * inner;
                        Real* gdst = gx.data() + o * lens[pi] * inner;
                        for (int64_t i = 0; i < lens[pi] * inner; ++i) gdst[i] += gsrc[i];
                    }
                }
                off += lens[pi];
            }
        });
    }
    return out;
}

/// All length-w windows along axis 1 of a [B, L, D] tensor: [B, L-w+1, w, D].
template <class Real>
Tensor<Real> sliding_windows(const Tensor<Real>& x, int64_t w) {
    require(x.ndim() == 3, "sliding_windows: expects [B,L,D], got " + shape_str(x.shape()));
    int64_t b = x.dim(0), l = x.dim(1), d = x.dim(2);
    require(w >= 1 && w <= l, "sliding_windows: window " + std::to_string(w) +
                                  " exceeds sequence length " + std::to_string(l));
    int64_t nw = l - w + 1;
    Tensor<Real> out = Tensor<Real>::zeros({b, nw, w, d});
    const Real* px = x.data();
    Real* po = out.mutable_data();
    for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t s = 0; s < nw; ++s)
            std::copy_n(px + (bi * l + s) * d, w * d, po + ((bi * nw + s) * w) * d);
    if (detail::should_record<Real>({&x})) {
        out = out.with_grad();
        auto sx = x.storage();
        auto so = out.storage();
        Tape<Real>::active()->record(so, [=](Tape<Real>& tape) {
            const std::vector<Real>& gout = *tape.grad_of(so.get());
            std::vector<Real>& gx = tape.grad_accum(sx.get());
            for (int64_t bi = 0; bi < b; ++bi)
                for (int64_t s = 0; s < nw; ++s) {
                    const Real* gsrc = gout.data() + ((bi * nw + s) * w) * d;
                    Real* gdst = gx.data() + (bi * l + s) * d;
                    for (int64_t i = 0; i < w * d; ++i) gdst[i] += gsrc[i];
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions

template <class Real>
Tensor<Real> sum_all(const Tensor<Real>& x) {
    double acc = 0.0;
    for (Real v : x.vec()) acc += static_cast<double>(v);
    Tensor<Real> out = Tensor<Real>::scalar(static_cast<Real>(acc));
    if (detail::should_record<Real>({&x})) {
        out = out.with_grad();
        auto sx = x.storage();
        auto so = out.storage();
        Tape<Real>::active()->record(so, [=](Tape<Real>& tape) {
            Real g = (*tape.grad_of(so.get()))[0];
            std::vector<Real>& gx = tape.grad_accum(sx.get());
            for (Real& v : gx) v += g;
        });
    }
    return out;
}

template <class Real>
Tensor<Real> mean_all(const Tensor<Real>& x) {
    require(x.numel() > 0, "mean_all: empty tensor");
    return sum_all(x) * (Real(1) / static_cast<Real>(x.numel()));
}

/// Sum over the trailing axis: [..., D] -> [...].
template <class Real>
Tensor<Real> sum_last(const Tensor<Real>& x) {
    require(x.ndim() >= 1, "sum_last: needs at least one axis");
    int64_t d = x.dim(x.ndim() - 1);
    int64_t rows = x.numel() / d;
    Shape oshape(x.shape().begin(), x.shape().end() - 1);
    Tensor<Real> out = Tensor<Real>::zeros(oshape);
    const Real* px = x.data();
    Real* po = out.mutable_data();
    for (int64_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (int64_t i = 0; i < d; ++i) acc += static_cast<double>(px[r * d + i]);
        po[r] = static_cast<Real>(acc);
    }
    if (detail::should_record<Real>({&x})) {
        out = out.with_grad();
        auto sx = x.storage();
        auto so = out.storage();
        Tape<Real>::active()->record(so, [=](Tape<Real>& tape) {
            const std::vector<Real>& gout = *tape.grad_of(so.get());
            std::vector<Real>& gx = tape.grad_accum(sx.get());
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t i = 0; i < d; ++i) gx[r * d + i] += gout[r];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Softmax family (over the trailing axis)

template <class Real>
Tensor<Real> softmax_last(const Tensor<Real>& x) {
    require(x.ndim() >= 1, "softmax_last: needs at least one axis");
    int64_t d = x.dim(x.ndim() - 1);
    int64_t rows = x.numel() / d;
    Tensor<Real> out = Tensor<Real>::zeros(x.shape());
    const Real* px = x.data();
    Real* po = out.mutable_data();
    for (int64_t r = 0; r < rows; ++r) {
        const Real* row = px + r * d;
        Real m = row[0];
        for (int64_t i = 1; i < d; ++i) m = std::max(m, row[i]);
        double z = 0.0;
        for (int64_t i = 0; i < d; ++i) z += std::exp(static_cast<double>(row[i] - m));
        for (int64_t i = 0; i < d; ++i)
            po[r * d + i] = static_cast<Real>(std::exp(static_cast<double>(row[i] - m)) / z);
    }
    detail::finish_op(out, "softmax_last");
    if (detail::should_record<Real>({&x})) {
        out = out.with_grad();
        auto sx = x.storage();
        auto so = out.storage();
        Tape<Real>::active()->record(so, [=](Tape<Real>& tape) {
            const std::vector<Real>& gout = *tape.grad_of(so.get());
            std::vector<Real>& gx = tape.grad_accum(sx.get());
            const Real* ps = so->data.data();
            for (int64_t r = 0; r < rows; ++r) {
                double dot = 0.0;
                for (int64_t i = 0; i < d; ++i)
                    dot += static_cast<double>(gout[r * d + i]) * static_cast<double>(ps[r * d + i]);
                for (int64_t i = 0; i < d; ++i)
                    gx[r * d + i] += ps[r * d + i] * (gout[r * d + i] - static_cast<Real>(dot));
            }
        });
    }
    return out;
}

template <class Real>
Tensor<Real> log_softmax_last(const Tensor<Real>& x) {
    require(x.ndim() >= 1, "log_softmax_last: needs at least one axis");
    int64_t d = x.dim(x.ndim() - 1);
    int64_t rows = x.numel() / d;
    Tensor<Real> out = Tensor<Real>::zeros(x.shape());
    const Real* px = x.data();
    Real* po = out.mutable_data();
    for (int64_t r = 0; r < rows; ++r) {
        const Real* row = px + r * d;
        Real m = row[0];
        for (int64_t i = 1; i < d; ++i) m = std::max(m, row[i]);
        double z = 0.0;
        for (int64_t i = 0; i < d; ++i) z += std::exp(static_cast<double>(row[i] - m));
        Real lz = static_cast<Real>(std::log(z)) + m;
        for (int64_t i = 0; i < d; ++i) po[r * d + i] = row[i] - lz;
    }
    detail::finish_op(out, "log_softmax_last");
    if (detail::should_record<Real>({&x})) {
        out = out.with_grad();
        auto sx = x.storage();
        auto so = out.storage();
        Tape<Real>::active()->record(so, [=](Tape<Real>& tape) {
            const std::vector<Real>& gout = *tape.grad_of(so.get());
            std::vector<Real>& gx = tape.grad_accum(sx.get());
            const Real* plog = so->data.data();
            for (int64_t r = 0; r < rows; ++r) {
                double gsum = 0.0;
                for (int64_t i = 0; i < d; ++i) gsum += static_cast<double>(gout[r * d + i]);
                for (int64_t i = 0; i < d; ++i)
                    gx[r * d + i] += gout[r * d + i] -
                                     static_cast<Real>(std::exp(static_cast<double>(plog[r * d + i])) * gsum);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Layer normalization over the trailing axis.
// out = normalized(x) * (1 + gain_offset) + bias, so zero-initialized
// parameters give an identity-scaled normalization.

template <class Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const Tensor<Real>& gain_offset,
                        const Tensor<Real>& bias, Real eps = Real(1e-5)) {
    require(x.ndim() >= 1, "layer_norm: needs at least one axis");
    int64_t d = x.dim(x.ndim() - 1);
    require(gain_offset.numel() == d && bias.numel() == d,
            "layer_norm: parameter size " + std::to_string(gain_offset.numel()) +
                " does not match feature dim " + std::to_string(d));
    int64_t rows = x.numel() / d;
    Tensor<Real> out = Tensor<Real>::zeros(x.shape());
    std::vector<Real> inv_std(static_cast<size_t>(rows));
    std::vector<Real> xhat(static_cast<size_t>(x.numel()));
    const Real* px = x.data();
    const Real* pg = gain_offset.data();
    const Real* pb = bias.data();
    Real* po = out.mutable_data();
    for (int64_t r = 0; r < rows; ++r) {
        const Real* row = px + r * d;
        double mean = 0.0;
        for (int64_t i = 0; i < d; ++i) mean += static_cast<double>(row[i]);
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (int64_t i = 0; i < d; ++i) {
            double c = static_cast<double>(row[i]) - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        Real istd = static_cast<Real>(1.0 / std::sqrt(var + static_cast<double>(eps)));
        inv_std[static_cast<size_t>(r)] = istd;
        for (int64_t i = 0; i < d; ++i) {
            Real h = (row[i] - static_cast<Real>(mean)) * istd;
            xhat[static_cast<size_t>(r * d + i)] = h;
            po[r * d + i] = h * (Real(1) + pg[i]) + pb[i];
        }
    }
    detail::finish_op(out, "layer_norm");
    if (detail::should_record<Real>({&x, &gain_offset, &bias})) {
        out = out.with_grad();
        auto sx = x.storage();
        auto sg = gain_offset.storage();
        auto sb = bias.storage();
        auto so = out.storage();
        bool nx = x.requires_grad(), ng = gain_offset.requires_grad(), nb = bias.requires_grad();
        auto xhat_cache = std::make_shared<std::vector<Real>>(std::move(xhat));
        auto istd_cache = std::make_shared<std::vector<Real>>(std::move(inv_std));
        Tape<Real>::active()->record(so, [=](Tape<Real>& tape) {
            const std::vector<Real>& gout = *tape.grad_of(so.get());
            const Real* ph = xhat_cache->data();
            const Real* pg2 = sg->data.data();
            std::vector<Real>* gx = nx ? &tape.grad_accum(sx.get()) : nullptr;
            std::vector<Real>* gg = ng ? &tape.grad_accum(sg.get()) : nullptr;
            std::vector<Real>* gb = nb ? &tape.grad_accum(sb.get()) : nullptr;
            for (int64_t r = 0; r < rows; ++r) {
                double sum_gh = 0.0, sum_gh_h = 0.0;
                for (int64_t i = 0; i < d; ++i) {
                    Real ghat = gout[r * d + i] * (Real(1) + pg2[i]);
                    sum_gh += static_cast<double>(ghat);
                    sum_gh_h += static_cast<double>(ghat) * static_cast<double>(ph[r * d + i]);
                    if (gg) (*gg)[i] += gout[r * d + i] * ph[r * d + i];
                    if (gb) (*gb)[i] += gout[r * d + i];
                }
                if (gx) {
                    Real istd = (*istd_cache)[static_cast<size_t>(r)];
                    Real mg = static_cast<Real>(sum_gh / static_cast<double>(d));
                    Real mgh = static_cast<Real>(sum_gh_h / static_cast<double>(d));
                    for (int64_t i = 0; i < d; ++i) {
                        Real ghat = gout[r * d + i] * (Real(1) + pg2[i]);
                        (*gx)[r * d + i] += istd * (ghat - mg - ph[r * d + i] * mgh);
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Constants and indexing helpers

template <class Real>
Tensor<Real> one_hot(const std::vector<int64_t>& indices, int64_t classes) {
    Tensor<Real> out = Tensor<Real>::zeros({static_cast<int64_t>(indices.size()), classes});
    Real* po = out.mutable_data();
    for (size_t i = 0; i < indices.size(); ++i) {
        require(indices[i] >= 0 && indices[i] < classes,
                "one_hot: index " + std::to_string(indices[i]) + " out of range [0," +
                    std::to_string(classes) + ")");
        po[static_cast<int64_t>(i) * classes + indices[i]] = Real(1);
    }
    return out;
}

template <class Real>
std::vector<int64_t> argmax_last(const Tensor<Real>& x) {
    int64_t d = x.dim(x.ndim() - 1);
    int64_t rows = x.numel() / d;
    std::vector<int64_t> out(static_cast<size_t>(rows));
    const Real* px = x.data();
    for (int64_t r = 0; r < rows; ++r) {
        int64_t best = 0;
        for (int64_t i = 1; i < d; ++i)
            if (px[r * d + i] > px[r * d + best]) best = i;
        out[static_cast<size_t>(r)] = best;
    }
    return out;
}

}  // namespace glam
