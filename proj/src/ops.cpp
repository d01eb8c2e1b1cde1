#include "gradleak/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace gradleak {
namespace {

constexpr double kL2FlatNorm = 1e-12;
constexpr double kGeluC = 0.7978845608028653979; // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

std::vector<double>& grad_buf(TensorImpl* t) {
    if (t->grad.empty()) t->grad.assign(t->value.size(), 0.0);
    return t->grad;
}

bool tape_on(std::initializer_list<const Tensor*> ins) {
    if (!Tape::active()) return false;
    for (const Tensor* t : ins)
        if (t->requires_grad()) return true;
    return false;
}

std::vector<int64_t> natural_strides(const Shape& s) {
    std::vector<int64_t> st(s.size());
    int64_t acc = 1;
    for (int d = static_cast<int>(s.size()) - 1; d >= 0; --d) {
        st[static_cast<size_t>(d)] = acc;
        acc *= s[static_cast<size_t>(d)];
    }
    return st;
}

// element strides of `in` aligned to `out` (trailing alignment, 0 on
// broadcast axes)
std::vector<int64_t> aligned_strides(const Shape& in, const Shape& out) {
    int ri = static_cast<int>(in.size());
    int ro = static_cast<int>(out.size());
    std::vector<int64_t> st(static_cast<size_t>(ro), 0);
    int64_t acc = 1;
    for (int d = ri - 1; d >= 0; --d) {
        int od = d + (ro - ri);
        st[static_cast<size_t>(od)] =
            (in[static_cast<size_t>(d)] == 1 && out[static_cast<size_t>(od)] != 1) ? 0 : acc;
        acc *= in[static_cast<size_t>(d)];
    }
    return st;
}

Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
    int ra = static_cast<int>(a.size()), rb = static_cast<int>(b.size());
    int r = std::max(ra, rb);
    Shape out(static_cast<size_t>(r));
    for (int d = r - 1; d >= 0; --d) {
        int64_t da = (d - (r - ra) >= 0) ? a[static_cast<size_t>(d - (r - ra))] : 1;
        int64_t db = (d - (r - rb) >= 0) ? b[static_cast<size_t>(d - (r - rb))] : 1;
        if (da != db && da != 1 && db != 1)
            throw ContractViolation(std::string(op) + ": shapes " + shape_str(a) + " and " +
                                    shape_str(b) + " are not broadcast-compatible");
        out[static_cast<size_t>(d)] = std::max(da, db);
    }
    return out;
}

// odometer over `shape`, calling f(flat, off_a, off_b)
template <class F>
void iter2(const Shape& shape, const std::vector<int64_t>& sa, const std::vector<int64_t>& sb,
           F&& f) {
    int r = static_cast<int>(shape.size());
    int64_t n = shape_numel(shape);
    if (r == 0) {
        f(int64_t{0}, int64_t{0}, int64_t{0});
        return;
    }
    std::vector<int64_t> idx(static_cast<size_t>(r), 0);
    int64_t oa = 0, ob = 0;
    for (int64_t i = 0;;) {
        f(i, oa, ob);
        if (++i == n) break;
        for (int d = r - 1; d >= 0; --d) {
            auto ud = static_cast<size_t>(d);
            oa += sa[ud];
            ob += sb[ud];
            if (++idx[ud] < shape[ud]) break;
            oa -= sa[ud] * shape[ud];
            ob -= sb[ud] * shape[ud];
            idx[ud] = 0;
        }
    }
}

template <class F>
void iter1(const Shape& shape, const std::vector<int64_t>& sa, F&& f) {
    std::vector<int64_t> sb(shape.size(), 0);
    iter2(shape, sa, sb, [&](int64_t i, int64_t oa, int64_t) { f(i, oa); });
}

using BinVal = double (*)(double, double);
using BinGrad = void (*)(double a, double b, double g, double& da, double& db);

Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, BinVal fv, BinGrad fg) {
    Shape os = broadcast_shape(name, a.shape(), b.shape());
    auto sa = aligned_strides(a.shape(), os);
    auto sb = aligned_strides(b.shape(), os);
    std::vector<double> out(static_cast<size_t>(shape_numel(os)));
    const double* av = a.values().data();
    const double* bv = b.values().data();
    if (a.shape() == b.shape()) {
        for (size_t i = 0; i < out.size(); ++i) out[i] = fv(av[i], bv[i]);
    } else {
        iter2(os, sa, sb,
              [&](int64_t i, int64_t oa, int64_t ob) { out[static_cast<size_t>(i)] = fv(av[oa], bv[ob]); });
    }
    ensure_finite(name, out);
    Tensor o = make_tensor(os, std::move(out));
    if (tape_on({&a, &b})) {
        o.set_requires_grad(true);
        Tape::active()->record([pa = a.ptr(), pb = b.ptr(), po = o.ptr(), sa, sb, fg]() {
            if (po->grad.empty()) return;
            const bool na = pa->requires_grad, nb = pb->requires_grad;
            if (!na && !nb) return;
            double* ga = na ? grad_buf(pa.get()).data() : nullptr;
            double* gb = nb ? grad_buf(pb.get()).data() : nullptr;
            const double* av = pa->value.data();
            const double* bv = pb->value.data();
            const double* g = po->grad.data();
            iter2(po->shape, sa, sb, [&](int64_t i, int64_t oa, int64_t ob) {
                double da, db;
                fg(av[oa], bv[ob], g[i], da, db);
                if (ga) ga[oa] += da;
                if (gb) gb[ob] += db;
            });
        });
    }
    return o;
}

using UnVal = double (*)(double);
using UnGrad = double (*)(double x, double y, double g); // y = forward output

Tensor unary_op(const char* name, const Tensor& a, UnVal fv, UnGrad fg) {
    std::vector<double> out(static_cast<size_t>(a.numel()));
    const double* av = a.values().data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = fv(av[i]);
    ensure_finite(name, out);
    Tensor o = make_tensor(a.shape(), std::move(out));
    if (tape_on({&a})) {
        o.set_requires_grad(true);
        Tape::active()->record([pa = a.ptr(), po = o.ptr(), fg]() {
            if (po->grad.empty() || !pa->requires_grad) return;
            double* ga = grad_buf(pa.get()).data();
            const double* g = po->grad.data();
            const double* av = pa->value.data();
            const double* yv = po->value.data();
            for (size_t i = 0; i < po->grad.size(); ++i) ga[i] += fg(av[i], yv[i], g[i]);
        });
    }
    return o;
}

std::vector<int> normalize_axes(const char* op, const std::vector<int>& axes, int rank) {
    std::vector<int> out;
    if (axes.empty()) {
        out.resize(static_cast<size_t>(rank));
        std::iota(out.begin(), out.end(), 0);
        return out;
    }
    for (int ax : axes) {
        if (ax < 0) ax += rank;
        require(ax >= 0 && ax < rank, std::string(op) + ": axis out of range");
        require(std::find(out.begin(), out.end(), ax) == out.end(),
                std::string(op) + ": duplicate reduction axis");
        out.push_back(ax);
    }
    std::sort(out.begin(), out.end());
    return out;
}

struct ReducePlan {
    Shape out_shape;              // final (possibly squeezed) shape
    std::vector<int64_t> ostride; // input-aligned strides into the out buffer
    int64_t count = 1;            // elements folded into each out cell
};

ReducePlan reduce_plan(const char* op, const Shape& in, const std::vector<int>& axes_in,
                       bool keepdims) {
    int rank = static_cast<int>(in.size());
    auto axes = normalize_axes(op, axes_in, rank);
    Shape kshape = in;
    ReducePlan plan;
    for (int ax : axes) {
        plan.count *= in[static_cast<size_t>(ax)];
        kshape[static_cast<size_t>(ax)] = 1;
    }
    plan.ostride = aligned_strides(kshape, in);
    if (keepdims) {
        plan.out_shape = kshape;
    } else {
        for (int d = 0; d < rank; ++d)
            if (std::find(axes.begin(), axes.end(), d) == axes.end())
                plan.out_shape.push_back(in[static_cast<size_t>(d)]);
    }
    return plan;
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(
        "add", a, b, +[](double x, double y) { return x + y; },
        +[](double, double, double g, double& da, double& db) {
            da = g;
            db = g;
        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(
        "sub", a, b, +[](double x, double y) { return x - y; },
        +[](double, double, double g, double& da, double& db) {
            da = g;
            db = -g;
        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(
        "mul", a, b, +[](double x, double y) { return x * y; },
        +[](double x, double y, double g, double& da, double& db) {
            da = g * y;
            db = g * x;
        });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary_op(
        "div", a, b, +[](double x, double y) { return x / y; },
        +[](double x, double y, double g, double& da, double& db) {
            da = g / y;
            db = -g * x / (y * y);
        });
}

Tensor add(const Tensor& a, double c) {
    std::vector<double> out(a.values().begin(), a.values().end());
    for (double& v : out) v += c;
    ensure_finite("add", out);
    Tensor o = make_tensor(a.shape(), std::move(out));
    if (tape_on({&a})) {
        o.set_requires_grad(true);
        Tape::active()->record([pa = a.ptr(), po = o.ptr()]() {
            if (po->grad.empty() || !pa->requires_grad) return;
            double* ga = grad_buf(pa.get()).data();
            for (size_t i = 0; i < po->grad.size(); ++i) ga[i] += po->grad[i];
        });
    }
    return o;
}

Tensor mul(const Tensor& a, double c) {
    std::vector<double> out(a.values().begin(), a.values().end());
    for (double& v : out) v *= c;
    ensure_finite("mul", out);
    Tensor o = make_tensor(a.shape(), std::move(out));
    if (tape_on({&a})) {
        o.set_requires_grad(true);
        Tape::active()->record([pa = a.ptr(), po = o.ptr(), c]() {
            if (po->grad.empty() || !pa->requires_grad) return;
            double* ga = grad_buf(pa.get()).data();
            for (size_t i = 0; i < po->grad.size(); ++i) ga[i] += po->grad[i] * c;
        });
    }
    return o;
}

namespace {

struct MatPlan {
    Shape bshape;
    std::vector<int64_t> sa, sb; // batch strides (elements)
    int64_t M = 0, K = 0, N = 0;
};

MatPlan matmul_plan(const Tensor& a, const Tensor& b) {
    require(a.rank() >= 2 && b.rank() >= 2,
            "matmul: operands must have rank >= 2, got " + shape_str(a.shape()) + " x " +
                shape_str(b.shape()));
    MatPlan p;
    p.M = a.dim(-2);
    p.K = a.dim(-1);
    p.N = b.dim(-1);
    require(b.dim(-2) == p.K, "matmul: inner dimensions disagree: " + shape_str(a.shape()) +
                                  " x " + shape_str(b.shape()));
    Shape ba(a.shape().begin(), a.shape().end() - 2);
    Shape bb(b.shape().begin(), b.shape().end() - 2);
    p.bshape = broadcast_shape("matmul", ba, bb);
    auto sa = aligned_strides(ba, p.bshape);
    auto sb = aligned_strides(bb, p.bshape);
    // scale batch strides to element units
    for (auto& s : sa) s *= p.M * p.K;
    for (auto& s : sb) s *= p.K * p.N;
    p.sa = std::move(sa);
    p.sb = std::move(sb);
    return p;
}

} // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    MatPlan p = matmul_plan(a, b);
    Shape os = p.bshape;
    os.push_back(p.M);
    os.push_back(p.N);
    std::vector<double> out(static_cast<size_t>(shape_numel(os)), 0.0);
    const double* av = a.values().data();
    const double* bv = b.values().data();
    const int64_t M = p.M, K = p.K, N = p.N;
    iter2(p.bshape, p.sa, p.sb, [&](int64_t bi, int64_t oa, int64_t ob) {
        const double* A = av + oa;
        const double* B = bv + ob;
        double* C = out.data() + bi * M * N;
        for (int64_t m = 0; m < M; ++m) {
            const double* arow = A + m * K;
            double* crow = C + m * N;
            for (int64_t k = 0; k < K; ++k) {
                const double amk = arow[k];
                const double* brow = B + k * N;
                for (int64_t n = 0; n < N; ++n) crow[n] += amk * brow[n];
            }
        }
    });
    ensure_finite("matmul", out);
    Tensor o = make_tensor(os, std::move(out));
    if (tape_on({&a, &b})) {
        o.set_requires_grad(true);
        Tape::active()->record([pa = a.ptr(), pb = b.ptr(), po = o.ptr(), p]() {
            if (po->grad.empty()) return;
            const bool na = pa->requires_grad, nb = pb->requires_grad;
            if (!na && !nb) return;
            double* ga = na ? grad_buf(pa.get()).data() : nullptr;
            double* gb = nb ? grad_buf(pb.get()).data() : nullptr;
            const double* av = pa->value.data();
            const double* bv = pb->value.data();
            const double* g = po->grad.data();
            const int64_t M = p.M, K = p.K, N = p.N;
            iter2(p.bshape, p.sa, p.sb, [&](int64_t bi, int64_t oa, int64_t ob) {
                const double* G = g + bi * M * N;
                if (ga) { // dA = G * B^T
                    const double* B = bv + ob;
                    double* dA = ga + oa;
                    for (int64_t m = 0; m < M; ++m) {
                        const double* grow = G + m * N;
                        double* darow = dA + m * K;
                        for (int64_t k = 0; k < K; ++k) {
                            const double* brow = B + k * N;
                            double s = 0.0;
                            for (int64_t n = 0; n < N; ++n) s += grow[n] * brow[n];
                            darow[k] += s;
                        }
                    }
                }
                if (gb) { // dB = A^T * G
                    const double* A = av + oa;
                    double* dB = gb + ob;
                    for (int64_t m = 0; m < M; ++m) {
                        const double* arow = A + m * K;
                        const double* grow = G + m * N;
                        for (int64_t k = 0; k < K; ++k) {
                            const double amk = arow[k];
                            double* dbrow = dB + k * N;
                            for (int64_t n = 0; n < N; ++n) dbrow[n] += amk * grow[n];
                        }
                    }
                }
            });
        });
    }
    return o;
}

Tensor transpose(const Tensor& x, std::vector<int> perm) {
    int r = x.rank();
    if (perm.empty()) {
        require(r >= 2, "transpose: default perm needs rank >= 2");
        perm.resize(static_cast<size_t>(r));
        std::iota(perm.begin(), perm.end(), 0);
        std::swap(perm[static_cast<size_t>(r - 2)], perm[static_cast<size_t>(r - 1)]);
    }
    require(static_cast<int>(perm.size()) == r, "transpose: perm rank mismatch");
    std::vector<bool> seen(static_cast<size_t>(r), false);
    for (int pd : perm) {
        require(pd >= 0 && pd < r && !seen[static_cast<size_t>(pd)],
                "transpose: perm is not a permutation");
        seen[static_cast<size_t>(pd)] = true;
    }
    auto nat = natural_strides(x.shape());
    Shape os(static_cast<size_t>(r));
    std::vector<int64_t> st(static_cast<size_t>(r));
    for (int d = 0; d < r; ++d) {
        os[static_cast<size_t>(d)] = x.shape()[static_cast<size_t>(perm[static_cast<size_t>(d)])];
        st[static_cast<size_t>(d)] = nat[static_cast<size_t>(perm[static_cast<size_t>(d)])];
    }
    std::vector<double> out(static_cast<size_t>(x.numel()));
    const double* xv = x.values().data();
    iter1(os, st, [&](int64_t i, int64_t oa) { out[static_cast<size_t>(i)] = xv[oa]; });
    Tensor o = make_tensor(os, std::move(out));
    if (tape_on({&x})) {
        o.set_requires_grad(true);
        Tape::active()->record([pa = x.ptr(), po = o.ptr(), st]() {
            if (po->grad.empty() || !pa->requires_grad) return;
            double* ga = grad_buf(pa.get()).data();
            const double* g = po->grad.data();
            iter1(po->shape, st, [&](int64_t i, int64_t oa) { ga[oa] += g[i]; });
        });
    }
    return o;
}

Tensor reshape(const Tensor& x, Shape shape) {
    require(shape_numel(shape) == x.numel(), "reshape: " + shape_str(x.shape()) + " -> " +
                                                 shape_str(shape) + " changes element count");
    std::vector<double> out(x.values().begin(), x.values().end());
    Tensor o = make_tensor(std::move(shape), std::move(out));
    if (tape_on({&x})) {
        o.set_requires_grad(true);
        Tape::active()->record([pa = x.ptr(), po = o.ptr()]() {
            if (po->grad.empty() || !pa->requires_grad) return;
            double* ga = grad_buf(pa.get()).data();
            for (size_t i = 0; i < po->grad.size(); ++i) ga[i] += po->grad[i];
        });
    }
    return o;
}

Tensor slice(const Tensor& x, const std::vector<int64_t>& starts,
             const std::vector<int64_t>& stops) {
    int r = x.rank();
    require(static_cast<int>(starts.size()) == r && static_cast<int>(stops.size()) == r,
            "slice: starts/stops must cover every axis");
    Shape os(static_cast<size_t>(r));
    int64_t base = 0;
    auto nat = natural_strides(x.shape());
    for (int d = 0; d < r; ++d) {
        auto ud = static_cast<size_t>(d);
        require(starts[ud] >= 0 && starts[ud] < stops[ud] && stops[ud] <= x.shape()[ud],
                "slice: bounds out of range on axis " + std::to_string(d));
        os[ud] = stops[ud] - starts[ud];
        base += starts[ud] * nat[ud];
    }
    std::vector<double> out(static_cast<size_t>(shape_numel(os)));
    const double* xv = x.values().data();
    iter1(os, nat, [&](int64_t i, int64_t oa) { out[static_cast<size_t>(i)] = xv[base + oa]; });
    Tensor o = make_tensor(os, std::move(out));
    if (tape_on({&x})) {
        o.set_requires_grad(true);
        Tape::active()->record([pa = x.ptr(), po = o.ptr(), nat, base]() {
            if (po->grad.empty() || !pa->requires_grad) return;
            double* ga = grad_buf(pa.get()).data();
            const double* g = po->grad.data();
            iter1(po->shape, nat, [&](int64_t i, int64_t oa) { ga[base + oa] += g[i]; });
        });
    }
    return o;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    require(!parts.empty(), "concat: no inputs");
    int r = parts[0].rank();
    if (axis < 0) axis += r;
    require(axis >= 0 && axis < r, "concat: axis out of range");
    int64_t axis_total = 0;
    for (const Tensor& t : parts) {
        require(t.rank() == r, "concat: rank mismatch");
        for (int d = 0; d < r; ++d)
            require(d == axis || t.shape()[static_cast<size_t>(d)] ==
                                     parts[0].shape()[static_cast<size_t>(d)],
                    "concat: non-axis dimensions must agree");
        axis_total += t.dim(axis);
    }
    Shape os = parts[0].shape();
    os[static_cast<size_t>(axis)] = axis_total;
    int64_t inner = 1;
    for (int d = axis + 1; d < r; ++d) inner *= os[static_cast<size_t>(d)];
    int64_t outer = 1;
    for (int d = 0; d < axis; ++d) outer *= os[static_cast<size_t>(d)];
    std::vector<double> out(static_cast<size_t>(shape_numel(os)));
    int64_t axis_off = 0;
    for (const Tensor& t : parts) {
        const int64_t rows = t.dim(axis) * inner;
        const double* tv = t.values().data();
        for (int64_t o = 0; o < outer; ++o) {
            double* dst = out.data() + (o * axis_total + axis_off) * inner;
            const double* src = tv + o * rows;
            std::copy(src, src + rows, dst);
        }
        axis_off += t.dim(axis);
    }
    Tensor o = make_tensor(os, std::move(out));
    bool any_grad = false;
    for (const Tensor& t : parts)
        if (t.requires_grad()) any_grad = true;
    if (Tape::active() && any_grad) {
        o.set_requires_grad(true);
        std::vector<std::shared_ptr<TensorImpl>> ps;
        std::vector<int64_t> offs;
        int64_t off = 0;
        for (const Tensor& t : parts) {
            ps.push_back(t.ptr());
            offs.push_back(off);
            off += t.dim(axis);
        }
        Tape::active()->record([ps, offs, po = o.ptr(), outer, inner, axis_total, axis]() {
            if (po->grad.empty()) return;
            const double* g = po->grad.data();
            for (size_t pi = 0; pi < ps.size(); ++pi) {
                if (!ps[pi]->requires_grad) continue;
                double* ga = grad_buf(ps[pi].get()).data();
                const int64_t adim = ps[pi]->shape[static_cast<size_t>(axis)];
                const int64_t rows = adim * inner;
                for (int64_t o2 = 0; o2 < outer; ++o2) {
                    const double* src = g + (o2 * axis_total + offs[pi]) * inner;
                    double* dst = ga + o2 * rows;
                    for (int64_t i = 0; i < rows; ++i) dst[i] += src[i];
                }
            }
        });
    }
    return o;
}

Tensor broadcast_to(const Tensor& x, const Shape& shape) {
    Shape check = broadcast_shape("broadcast_to", x.shape(), shape);
    require(check == shape, "broadcast_to: " + shape_str(x.shape()) + " does not broadcast to " +
                                shape_str(shape));
    auto st = aligned_strides(x.shape(), shape);
    std::vector<double> out(static_cast<size_t>(shape_numel(shape)));
    const double* xv = x.values().data();
    iter1(shape, st, [&](int64_t i, int64_t oa) { out[static_cast<size_t>(i)] = xv[oa]; });
    Tensor o = make_tensor(shape, std::move(out));
    if (tape_on({&x})) {
        o.set_requires_grad(true);
        Tape::active()->record([pa = x.ptr(), po = o.ptr(), st]() {
            if (po->grad.empty() || !pa->requires_grad) return;
            double* ga = grad_buf(pa.get()).data();
            const double* g = po->grad.data();
            iter1(po->shape, st, [&](int64_t i, int64_t oa) { ga[oa] += g[i]; });
        });
    }
    return o;
}

Tensor sum(const Tensor& x, const std::vector<int>& axes, bool keepdims) {
    ReducePlan p = reduce_plan("sum", x.shape(), axes, keepdims);
    std::vector<double> out(static_cast<size_t>(shape_numel(p.out_shape)), 0.0);
    const double* xv = x.values().data();
    iter1(x.shape(), p.ostride, [&](int64_t i, int64_t ob) { out[static_cast<size_t>(ob)] += xv[i]; });
    ensure_finite("sum", out);
    Tensor o = make_tensor(p.out_shape, std::move(out));
    if (tape_on({&x})) {
        o.set_requires_grad(true);
        Tape::active()->record([pa = x.ptr(), po = o.ptr(), st = p.ostride]() {
            if (po->grad.empty() || !pa->requires_grad) return;
            double* ga = grad_buf(pa.get()).data();
            const double* g = po->grad.data();
            iter1(pa->shape, st, [&](int64_t i, int64_t ob) { ga[i] += g[ob]; });
        });
    }
    return o;
}

Tensor mean(const Tensor& x, const std::vector<int>& axes, bool keepdims) {
    ReducePlan p = reduce_plan("mean", x.shape(), axes, keepdims);
    std::vector<double> out(static_cast<size_t>(shape_numel(p.out_shape)), 0.0);
    const double* xv = x.values().data();
    const double inv = 1.0 / static_cast<double>(p.count);
    iter1(x.shape(), p.ostride, [&](int64_t i, int64_t ob) { out[static_cast<size_t>(ob)] += xv[i]; });
    for (double& v : out) v *= inv;
    ensure_finite("mean", out);
    Tensor o = make_tensor(p.out_shape, std::move(out));
    if (tape_on({&x})) {
        o.set_requires_grad(true);
        Tape::active()->record([pa = x.ptr(), po = o.ptr(), st = p.ostride, inv]() {
            if (po->grad.empty() || !pa->requires_grad) return;
            double* ga = grad_buf(pa.get()).data();
            const double* g = po->grad.data();
            iter1(pa->shape, st, [&](int64_t i, int64_t ob) { ga[i] += g[ob] * inv; });
        });
    }
    return o;
}

Tensor variance(const Tensor& x, const std::vector<int>& axes, bool keepdims) {
    ReducePlan p = reduce_plan("variance", x.shape(), axes, keepdims);
    const auto ocount = static_cast<size_t>(shape_numel(p.out_shape));
    std::vector<double> mu(ocount, 0.0);
    std::vector<double> out(ocount, 0.0);
    const double* xv = x.values().data();
    const double inv = 1.0 / static_cast<double>(p.count);
    iter1(x.shape(), p.ostride, [&](int64_t i, int64_t ob) { mu[static_cast<size_t>(ob)] += xv[i]; });
    for (double& v : mu) v *= inv;
    iter1(x.shape(), p.ostride, [&](int64_t i, int64_t ob) {
        const double d = xv[i] - mu[static_cast<size_t>(ob)];
        out[static_cast<size_t>(ob)] += d * d;
    });
    for (double& v : out) v *= inv;
    ensure_finite("variance", out);
    Tensor o = make_tensor(p.out_shape, std::move(out));
    if (tape_on({&x})) {
        o.set_requires_grad(true);
        Tape::active()->record([pa = x.ptr(), po = o.ptr(), st = p.ostride, mu, inv]() {
            if (po->grad.empty() || !pa->requires_grad) return;
            double* ga = grad_buf(pa.get()).data();
            const double* g = po->grad.data();
            const double* xv = pa->value.data();
            iter1(pa->shape, st, [&](int64_t i, int64_t ob) {
                ga[i] += g[ob] * 2.0 * (xv[i] - mu[static_cast<size_t>(ob)]) * inv;
            });
        });
    }
    return o;
}

Tensor max(const Tensor& x, const std::vector<int>& axes, bool keepdims) {
    ReducePlan p = reduce_plan("max", x.shape(), axes, keepdims);
    const auto ocount = static_cast<size_t>(shape_numel(p.out_shape));
    std::vector<double> out(ocount, -std::numeric_limits<double>::infinity());
    std::vector<int64_t> arg(ocount, -1);
    const double* xv = x.values().data();
    iter1(x.shape(), p.ostride, [&](int64_t i, int64_t ob) {
        auto ub = static_cast<size_t>(ob);
        if (xv[i] > out[ub]) {
            out[ub] = xv[i];
            arg[ub] = i;
        }
    });
    ensure_finite("max", out);
    Tensor o = make_tensor(p.out_shape, std::move(out));
    if (tape_on({&x})) {
        o.set_requires_grad(true);
        Tape::active()->record([pa = x.ptr(), po = o.ptr(), arg]() {
            if (po->grad.empty() || !pa->requires_grad) return;
            double* ga = grad_buf(pa.get()).data();
            const double* g = po->grad.data();
            for (size_t ob = 0; ob < arg.size(); ++ob) ga[arg[ob]] += g[ob];
        });
    }
    return o;
}

Tensor l2_norm(const Tensor& x) {
    double s = 0.0;
    for (double v : x.values()) s += v * v;
    const double n = std::sqrt(s);
    std::vector<double> out{n};
    ensure_finite("l2_norm", out);
    Tensor o = make_tensor(Shape{}, std::move(out));
    if (tape_on({&x})) {
        o.set_requires_grad(true);
        Tape::active()->record([pa = x.ptr(), po = o.ptr(), n]() {
            if (po->grad.empty() || !pa->requires_grad) return;
            if (n <= kL2FlatNorm) return;
            const double scale = po->grad[0] / n;
            double* ga = grad_buf(pa.get()).data();
            const double* xv = pa->value.data();
            for (size_t i = 0; i < pa->value.size(); ++i) ga[i] += scale * xv[i];
        });
    }
    return o;
}

Tensor sqrt(const Tensor& x) {
    return unary_op(
        "sqrt", x, +[](double v) { return std::sqrt(v); },
        +[](double, double y, double g) { return 0.5 * g / y; });
}

Tensor exp(const Tensor& x) {
    return unary_op(
        "exp", x, +[](double v) { return std::exp(v); },
        +[](double, double y, double g) { return g * y; });
}

Tensor log(const Tensor& x) {
    return unary_op(
        "log", x, +[](double v) { return std::log(v); },
        +[](double v, double, double g) { return g / v; });
}

Tensor tanh(const Tensor& x) {
    return unary_op(
        "tanh", x, +[](double v) { return std::tanh(v); },
        +[](double, double y, double g) { return g * (1.0 - y * y); });
}

Tensor relu(const Tensor& x) {
    return unary_op(
        "relu", x, +[](double v) { return v > 0.0 ? v : 0.0; },
        +[](double v, double, double g) { return v > 0.0 ? g : 0.0; });
}

Tensor gelu(const Tensor& x) {
    return unary_op(
        "gelu", x,
        +[](double v) {
            const double u = kGeluC * (v + kGeluA * v * v * v);
            return 0.5 * v * (1.0 + std::tanh(u));
        },
        +[](double v, double, double g) {
            const double u = kGeluC * (v + kGeluA * v * v * v);
            const double t = std::tanh(u);
            const double du = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
            return g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
        });
}

namespace {

struct LinePlan {
    int64_t outer = 1, len = 1, inner = 1;
};

LinePlan line_plan(const char* op, const Shape& s, int axis) {
    int r = static_cast<int>(s.size());
    if (axis < 0) axis += r;
    require(axis >= 0 && axis < r, std::string(op) + ": axis out of range");
    LinePlan p;
    for (int d = 0; d < axis; ++d) p.outer *= s[static_cast<size_t>(d)];
    p.len = s[static_cast<size_t>(axis)];
    for (int d = axis + 1; d < r; ++d) p.inner *= s[static_cast<size_t>(d)];
    return p;
}

template <class F>
void for_each_line(const LinePlan& p, F&& f) {
    for (int64_t o = 0; o < p.outer; ++o)
        for (int64_t i = 0; i < p.inner; ++i) f(o * p.len * p.inner + i, p.inner);
}

} // namespace

Tensor softmax(const Tensor& x, int axis) {
    LinePlan lp = line_plan("softmax", x.shape(), axis);
    std::vector<double> out(static_cast<size_t>(x.numel()));
    const double* xv = x.values().data();
    for_each_line(lp, [&](int64_t base, int64_t stride) {
        double m = -std::numeric_limits<double>::infinity();
        for (int64_t k = 0; k < lp.len; ++k) m = std::max(m, xv[base + k * stride]);
        double s = 0.0;
        for (int64_t k = 0; k < lp.len; ++k) {
            const double e = std::exp(xv[base + k * stride] - m);
            out[static_cast<size_t>(base + k * stride)] = e;
            s += e;
        }
        const double inv = 1.0 / s;
        for (int64_t k = 0; k < lp.len; ++k) out[static_cast<size_t>(base + k * stride)] *= inv;
    });
    ensure_finite("softmax", out);
    Tensor o = make_tensor(x.shape(), std::move(out));
    if (tape_on({&x})) {
        o.set_requires_grad(true);
        Tape::active()->record([pa = x.ptr(), po = o.ptr(), lp]() {
            if (po->grad.empty() || !pa->requires_grad) return;
            double* ga = grad_buf(pa.get()).data();
            const double* g = po->grad.data();
            const double* y = po->value.data();
            for_each_line(lp, [&](int64_t base, int64_t stride) {
                double dot = 0.0;
                for (int64_t k = 0; k < lp.len; ++k) {
                    const int64_t ix = base + k * stride;
                    dot += g[ix] * y[ix];
                }
                for (int64_t k = 0; k < lp.len; ++k) {
                    const int64_t ix = base + k * stride;
                    ga[ix] += y[ix] * (g[ix] - dot);
                }
            });
        });
    }
    return o;
}

Tensor layer_norm(const Tensor& x, int axis, double eps) {
    require(eps > 0.0, "layer_norm: eps must be positive");
    LinePlan lp = line_plan("layer_norm", x.shape(), axis);
    std::vector<double> out(static_cast<size_t>(x.numel()));
    const double* xv = x.values().data();
    const double invn = 1.0 / static_cast<double>(lp.len);
    for_each_line(lp, [&](int64_t base, int64_t stride) {
        double mu = 0.0;
        for (int64_t k = 0; k < lp.len; ++k) mu += xv[base + k * stride];
        mu *= invn;
        double var = 0.0;
        for (int64_t k = 0; k < lp.len; ++k) {
            const double d = xv[base + k * stride] - mu;
            var += d * d;
        }
        var *= invn;
        const double rstd = 1.0 / std::sqrt(var + eps);
        for (int64_t k = 0; k < lp.len; ++k) {
            const int64_t ix = base + k * stride;
            out[static_cast<size_t>(ix)] = (xv[ix] - mu) * rstd;
        }
    });
    ensure_finite("layer_norm", out);
    Tensor o = make_tensor(x.shape(), std::move(out));
    if (tape_on({&x})) {
        o.set_requires_grad(true);
        Tape::active()->record([pa = x.ptr(), po = o.ptr(), lp, eps, invn]() {
            if (po->grad.empty() || !pa->requires_grad) return;
            double* ga = grad_buf(pa.get()).data();
            const double* g = po->grad.data();
            const double* y = po->value.data();
            const double* xv = pa->value.data();
            for_each_line(lp, [&](int64_t base, int64_t stride) {
                double mu = 0.0;
                for (int64_t k = 0; k < lp.len; ++k) mu += xv[base + k * stride];
                mu *= invn;
                double var = 0.0;
                for (int64_t k = 0; k < lp.len; ++k) {
                    const double d = xv[base + k * stride] - mu;
                    var += d * d;
                }
                var *= invn;
                const double rstd = 1.0 / std::sqrt(var + eps);
                double mg = 0.0, mgy = 0.0;
                for (int64_t k = 0; k < lp.len; ++k) {
                    const int64_t ix = base + k * stride;
                    mg += g[ix];
                    mgy += g[ix] * y[ix];
                }
                mg *= invn;
                mgy *= invn;
                for (int64_t k = 0; k < lp.len; ++k) {
                    const int64_t ix = base + k * stride;
                    ga[ix] += (g[ix] - mg - y[ix] * mgy) * rstd;
                }
            });
        });
    }
    return o;
}

namespace {

struct ConvDims {
    int64_t n, h, w, ci, kh, kw, co, ho, wo;
    int stride, pad;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int padding) {
    require(x.rank() == 4, "conv2d: input must be NHWC");
    require(w.rank() == 4, "conv2d: weight must be [kh,kw,Cin,Cout]");
    require(stride >= 1, "conv2d: stride must be >= 1");
    require(padding >= 0, "conv2d: padding must be >= 0");
    ConvDims d{};
    d.n = x.dim(0);
    d.h = x.dim(1);
    d.w = x.dim(2);
    d.ci = x.dim(3);
    d.kh = w.dim(0);
    d.kw = w.dim(1);
    require(w.dim(2) == d.ci, "conv2d: channel mismatch between input and weight");
    d.co = w.dim(3);
    d.stride = stride;
    d.pad = padding;
    require(d.h + 2 * padding >= d.kh && d.w + 2 * padding >= d.kw,
            "conv2d: kernel larger than padded input");
    d.ho = (d.h + 2 * padding - d.kh) / stride + 1;
    d.wo = (d.w + 2 * padding - d.kw) / stride + 1;
    return d;
}

} // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int padding) {
    ConvDims d = conv_dims(x, w, stride, padding);
    std::vector<double> out(static_cast<size_t>(d.n * d.ho * d.wo * d.co), 0.0);
    const double* xv = x.values().data();
    const double* wv = w.values().data();
    for (int64_t n = 0; n < d.n; ++n)
        for (int64_t ho = 0; ho < d.ho; ++ho)
            for (int64_t wo = 0; wo < d.wo; ++wo) {
                double* orow = out.data() + ((n * d.ho + ho) * d.wo + wo) * d.co;
                for (int64_t kh = 0; kh < d.kh; ++kh) {
                    const int64_t hi = ho * d.stride + kh - d.pad;
                    if (hi < 0 || hi >= d.h) continue;
                    for (int64_t kw = 0; kw < d.kw; ++kw) {
                        const int64_t wi = wo * d.stride + kw - d.pad;
                        if (wi < 0 || wi >= d.w) continue;
                        const double* xp = xv + ((n * d.h + hi) * d.w + wi) * d.ci;
                        const double* wp = wv + (kh * d.kw + kw) * d.ci * d.co;
                        for (int64_t ci = 0; ci < d.ci; ++ci) {
                            const double xvv = xp[ci];
                            const double* wrow = wp + ci * d.co;
                            for (int64_t co = 0; co < d.co; ++co) orow[co] += xvv * wrow[co];
                        }
                    }
                }
            }
    ensure_finite("conv2d", out);
    Tensor o = make_tensor(Shape{d.n, d.ho, d.wo, d.co}, std::move(out));
    if (tape_on({&x, &w})) {
        o.set_requires_grad(true);
        Tape::active()->record([px = x.ptr(), pw = w.ptr(), po = o.ptr(), d]() {
            if (po->grad.empty()) return;
            const bool nx = px->requires_grad, nw = pw->requires_grad;
            if (!nx && !nw) return;
            double* gx = nx ? grad_buf(px.get()).data() : nullptr;
            double* gw = nw ? grad_buf(pw.get()).data() : nullptr;
            const double* xv = px->value.data();
            const double* wv = pw->value.data();
            const double* g = po->grad.data();
            for (int64_t n = 0; n < d.n; ++n)
                for (int64_t ho = 0; ho < d.ho; ++ho)
                    for (int64_t wo = 0; wo < d.wo; ++wo) {
                        const double* grow = g + ((n * d.ho + ho) * d.wo + wo) * d.co;
                        for (int64_t kh = 0; kh < d.kh; ++kh) {
                            const int64_t hi = ho * d.stride + kh - d.pad;
                            if (hi < 0 || hi >= d.h) continue;
                            for (int64_t kw = 0; kw < d.kw; ++kw) {
                                const int64_t wi = wo * d.stride + kw - d.pad;
                                if (wi < 0 || wi >= d.w) continue;
                                const int64_t xoff = ((n * d.h + hi) * d.w + wi) * d.ci;
                                const int64_t woff = (kh * d.kw + kw) * d.ci * d.co;
                                for (int64_t ci = 0; ci < d.ci; ++ci) {
                                    if (gx) {
                                        const double* wrow = wv + woff + ci * d.co;
                                        double s = 0.0;
                                        for (int64_t co = 0; co < d.co; ++co)
                                            s += wrow[co] * grow[co];
                                        gx[xoff + ci] += s;
                                    }
                                    if (gw) {
                                        const double xvv = xv[xoff + ci];
                                        double* gwrow = gw + woff + ci * d.co;
                                        for (int64_t co = 0; co < d.co; ++co)
                                            gwrow[co] += xvv * grow[co];
                                    }
                                }
                            }
                        }
                    }
        });
    }
    return o;
}

std::pair<Tensor, Tensor> batch_stats(const Tensor& x) {
    require(x.rank() == 4, "batch_stats: input must be NHWC");
    const int64_t c = x.dim(3);
    const int64_t m = x.numel() / c;
    const double inv = 1.0 / static_cast<double>(m);
    std::vector<double> mu(static_cast<size_t>(c), 0.0);
    std::vector<double> var(static_cast<size_t>(c), 0.0);
    const double* xv = x.values().data();
    for (int64_t i = 0; i < m; ++i) {
        const double* row = xv + i * c;
        for (int64_t ch = 0; ch < c; ++ch) mu[static_cast<size_t>(ch)] += row[ch];
    }
    for (double& v : mu) v *= inv;
    for (int64_t i = 0; i < m; ++i) {
        const double* row = xv + i * c;
        for (int64_t ch = 0; ch < c; ++ch) {
            const double d = row[ch] - mu[static_cast<size_t>(ch)];
            var[static_cast<size_t>(ch)] += d * d;
        }
    }
    for (double& v : var) v *= inv;
    ensure_finite("batch_stats", mu);
    ensure_finite("batch_stats", var);
    Tensor tm = make_tensor(Shape{c}, std::vector<double>(mu));
    Tensor tv = make_tensor(Shape{c}, std::move(var));
    if (tape_on({&x})) {
        tm.set_requires_grad(true);
        tv.set_requires_grad(true);
        Tape::active()->record([px = x.ptr(), pm = tm.ptr(), pv = tv.ptr(), mu, inv, m, c]() {
            if (!px->requires_grad) return;
            const bool hm = !pm->grad.empty(), hv = !pv->grad.empty();
            if (!hm && !hv) return;
            double* gx = grad_buf(px.get()).data();
            const double* xv = px->value.data();
            for (int64_t i = 0; i < m; ++i) {
                const double* row = xv + i * c;
                double* grow = gx + i * c;
                for (int64_t ch = 0; ch < c; ++ch) {
                    auto uc = static_cast<size_t>(ch);
                    double g = 0.0;
                    if (hm) g += pm->grad[uc] * inv;
                    if (hv) g += pv->grad[uc] * 2.0 * (row[ch] - mu[uc]) * inv;
                    grow[ch] += g;
                }
            }
        });
    }
    return {tm, tv};
}

Tensor extract_patches(const Tensor& x, int64_t patch) {
    require(x.rank() == 4, "extract_patches: input must be NHWC");
    const int64_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    require(patch > 0 && h % patch == 0 && w % patch == 0,
            "extract_patches: patch size must divide height and width");
    const int64_t gh = h / patch, gw = w / patch;
    const int64_t t = gh * gw, plen = patch * patch * c;
    std::vector<double> out(static_cast<size_t>(n * t * plen));
    const double* xv = x.values().data();
    // forward gathers; backward scatter-adds along the same index map
    auto run = [n, h, w, c, gh, gw, t, plen, patch](const double* src, double* dst, bool forward) {
        for (int64_t ni = 0; ni < n; ++ni)
            for (int64_t gy = 0; gy < gh; ++gy)
                for (int64_t gx = 0; gx < gw; ++gx) {
                    const int64_t tok = gy * gw + gx;
                    for (int64_t py = 0; py < patch; ++py) {
                        const int64_t hi = gy * patch + py;
                        const int64_t xoff = ((ni * h + hi) * w + gx * patch) * c;
                        const int64_t poff = (ni * t + tok) * plen + py * patch * c;
                        if (forward)
                            std::copy(src + xoff, src + xoff + patch * c, dst + poff);
                        else
                            for (int64_t k = 0; k < patch * c; ++k) dst[xoff + k] += src[poff + k];
                    }
                }
    };
    run(xv, out.data(), true);
    Tensor o = make_tensor(Shape{n, t, plen}, std::move(out));
    if (tape_on({&x})) {
        o.set_requires_grad(true);
        Tape::active()->record([px = x.ptr(), po = o.ptr(), run]() {
            if (po->grad.empty() || !px->requires_grad) return;
            run(po->grad.data(), grad_buf(px.get()).data(), false);
        });
    }
    return o;
}

Tensor resize_nearest(const Tensor& x, int64_t out_h, int64_t out_w) {
    require(x.rank() == 4, "resize_nearest: input must be NHWC");
    require(out_h > 0 && out_w > 0, "resize_nearest: target size must be positive");
    const int64_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    std::vector<double> out(static_cast<size_t>(n * out_h * out_w * c));
    std::vector<int64_t> src_row(static_cast<size_t>(out_h)), src_col(static_cast<size_t>(out_w));
    for (int64_t i = 0; i < out_h; ++i) src_row[static_cast<size_t>(i)] = i * h / out_h;
    for (int64_t j = 0; j < out_w; ++j) src_col[static_cast<size_t>(j)] = j * w / out_w;
    const double* xv = x.values().data();
    for (int64_t ni = 0; ni < n; ++ni)
        for (int64_t i = 0; i < out_h; ++i)
            for (int64_t j = 0; j < out_w; ++j) {
                const double* src =
                    xv + ((ni * h + src_row[static_cast<size_t>(i)]) * w + src_col[static_cast<size_t>(j)]) * c;
                double* dst = out.data() + ((ni * out_h + i) * out_w + j) * c;
                std::copy(src, src + c, dst);
            }
    Tensor o = make_tensor(Shape{n, out_h, out_w, c}, std::move(out));
    if (tape_on({&x})) {
        o.set_requires_grad(true);
        Tape::active()->record([px = x.ptr(), po = o.ptr(), src_row, src_col, n, h, w, c, out_h,
                                out_w]() {
            if (po->grad.empty() || !px->requires_grad) return;
            double* gx = grad_buf(px.get()).data();
            const double* g = po->grad.data();
            for (int64_t ni = 0; ni < n; ++ni)
                for (int64_t i = 0; i < out_h; ++i)
                    for (int64_t j = 0; j < out_w; ++j) {
                        double* dst = gx + ((ni * h + src_row[static_cast<size_t>(i)]) * w +
                                            src_col[static_cast<size_t>(j)]) *
                                               c;
                        const double* src = g + ((ni * out_h + i) * out_w + j) * c;
                        for (int64_t ch = 0; ch < c; ++ch) dst[ch] += src[ch];
                    }
        });
    }
    return o;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int64_t>& labels) {
    require(logits.rank() == 2, "cross_entropy: logits must be [N,K]");
    const int64_t n = logits.dim(0), k = logits.dim(1);
    require(static_cast<int64_t>(labels.size()) == n, "cross_entropy: label count mismatch");
    for (int64_t y : labels)
        require(y >= 0 && y < k, "cross_entropy: label " + std::to_string(y) + " outside [0," +
                                     std::to_string(k) + ")");
    const double* zv = logits.values().data();
    double loss = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double* row = zv + i * k;
        double m = row[0];
        for (int64_t j = 1; j < k; ++j) m = std::max(m, row[j]);
        double s = 0.0;
        for (int64_t j = 0; j < k; ++j) s += std::exp(row[j] - m);
        loss += m + std::log(s) - row[labels[static_cast<size_t>(i)]];
    }
    loss /= static_cast<double>(n);
    std::vector<double> out{loss};
    ensure_finite("cross_entropy", out);
    Tensor o = make_tensor(Shape{}, std::move(out));
    if (tape_on({&logits})) {
        o.set_requires_grad(true);
        Tape::active()->record([pz = logits.ptr(), po = o.ptr(), labels, n, k]() {
            if (po->grad.empty() || !pz->requires_grad) return;
            const double g = po->grad[0] / static_cast<double>(n);
            double* gz = grad_buf(pz.get()).data();
            const double* zv = pz->value.data();
            for (int64_t i = 0; i < n; ++i) {
                const double* row = zv + i * k;
                double m = row[0];
                for (int64_t j = 1; j < k; ++j) m = std::max(m, row[j]);
                double s = 0.0;
                for (int64_t j = 0; j < k; ++j) s += std::exp(row[j] - m);
                const double inv = 1.0 / s;
                double* grow = gz + i * k;
                for (int64_t j = 0; j < k; ++j) {
                    double p = std::exp(row[j] - m) * inv;
                    if (j == labels[static_cast<size_t>(i)]) p -= 1.0;
                    grow[j] += g * p;
                }
            }
        });
    }
    return o;
}

std::vector<int64_t> argsort(const Tensor& x) {
    std::vector<int64_t> idx(static_cast<size_t>(x.numel()));
    std::iota(idx.begin(), idx.end(), 0);
    const double* xv = x.values().data();
    std::stable_sort(idx.begin(), idx.end(),
                     [&](int64_t a, int64_t b) { return xv[a] < xv[b]; });
    return idx;
}

} // namespace gradleak
