#include "csipred/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

namespace csipred {

namespace {

using EMat = Eigen::Matrix<real_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Map = Eigen::Map<EMat>;
using CMap = Eigen::Map<const EMat>;

bool any_requires(std::initializer_list<const Tensor*> ts) {
    if (!grad_enabled()) return false;
    for (const Tensor* t : ts)
        if (t->requires_grad()) return true;
    return false;
}

void record(std::vector<Tensor> inputs, Tensor& out, std::function<void()> vjp) {
    out.set_requires_grad(true);
    tape().record(std::move(inputs), out, std::move(vjp));
}

// Accumulate g into t's gradient if t participates in differentiation.
void accum(Tensor t, const real_t* g) {
    if (t.requires_grad()) t.accumulate_grad(g);
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

using EArr = Eigen::Array<real_t, Eigen::Dynamic, 1>;
using AMap = Eigen::Map<EArr>;
using CAMap = Eigen::Map<const EArr>;

template <typename Fwd, typename Bwd>
Tensor elementwise_binary(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, Bwd bwd) {
    check_same_shape(a, b, name);
    Tensor out = Tensor::zeros(a.shape());
    const std::int64_t n = a.numel();
    const real_t* pa = a.ptr();
    const real_t* pb = b.ptr();
    real_t* po = out.ptr();
    for (std::int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
    if (any_requires({&a, &b})) {
        record({a, b}, out, [a, b, out, n, bwd]() mutable {
            const real_t* go = out.grad().data();
            const real_t* pa = a.ptr();
            const real_t* pb = b.ptr();
            if (a.requires_grad()) {
                real_t* ga = a.grad_ptr();
                for (std::int64_t i = 0; i < n; ++i) ga[i] += bwd.dx(pa[i], pb[i], go[i]);
            }
            if (b.requires_grad()) {
                real_t* gb = b.grad_ptr();
                for (std::int64_t i = 0; i < n; ++i) gb[i] += bwd.dy(pa[i], pb[i], go[i]);
            }
        });
    }
    return out;
}

template <typename Bwd>
Tensor elementwise_unary_eigen(const Tensor& x, const std::function<void(const CAMap&, AMap&)>& fwd,
                               Bwd bwd) {
    Tensor out = Tensor::zeros(x.shape());
    const std::int64_t n = x.numel();
    CAMap xin(x.ptr(), n);
    AMap xout(out.ptr(), n);
    fwd(xin, xout);
    if (any_requires({&x})) {
        record({x}, out, [x, out, n, bwd]() mutable {
            const real_t* go = out.grad().data();
            const real_t* px = x.ptr();
            const real_t* py = out.ptr();
            real_t* gx = x.grad_ptr();
            for (std::int64_t i = 0; i < n; ++i) gx[i] += go[i] * bwd(px[i], py[i]);
        });
    }
    return out;
}

// Flattens [..., k] into rows of length k; returns row count.
std::int64_t rows_of_last(const Tensor& x) {
    const int k = x.dim(x.rank() - 1);
    return x.numel() / k;
}

}  // namespace

namespace {
struct AddBwd {
    real_t dx(real_t, real_t, real_t go) const { return go; }
    real_t dy(real_t, real_t, real_t go) const { return go; }
};
struct SubBwd {
    real_t dx(real_t, real_t, real_t go) const { return go; }
    real_t dy(real_t, real_t, real_t go) const { return -go; }
};
struct MulBwd {
    real_t dx(real_t, real_t y, real_t go) const { return go * y; }
    real_t dy(real_t x, real_t, real_t go) const { return go * x; }
};
struct DivBwd {
    real_t dx(real_t, real_t y, real_t go) const { return go / y; }
    real_t dy(real_t x, real_t y, real_t go) const { return -go * x / (y * y); }
};
}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return elementwise_binary(a, b, "add", [](real_t x, real_t y) { return x + y; }, AddBwd{});
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return elementwise_binary(a, b, "sub", [](real_t x, real_t y) { return x - y; }, SubBwd{});
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return elementwise_binary(a, b, "mul", [](real_t x, real_t y) { return x * y; }, MulBwd{});
}

Tensor div(const Tensor& a, const Tensor& b) {
    return elementwise_binary(a, b, "div", [](real_t x, real_t y) { return x / y; }, DivBwd{});
}

Tensor add_scalar(const Tensor& a, real_t c) {
    Tensor out = Tensor::zeros(a.shape());
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) out.ptr()[i] = a.ptr()[i] + c;
    if (any_requires({&a})) {
        record({a}, out, [a, out]() mutable { accum(a, out.grad().data()); });
    }
    return out;
}

Tensor mul_scalar(const Tensor& a, real_t c) {
    Tensor out = Tensor::zeros(a.shape());
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) out.ptr()[i] = a.ptr()[i] * c;
    if (any_requires({&a})) {
        record({a}, out, [a, out, n, c]() mutable {
            const real_t* go = out.grad().data();
            real_t* ga = a.grad_ptr();
            for (std::int64_t i = 0; i < n; ++i) ga[i] += go[i] * c;
        });
    }
    return out;
}

Tensor sigmoid(const Tensor& x) {
    return elementwise_unary_eigen(
        x, [](const CAMap& in, AMap& out) { out = real_t(1) / (real_t(1) + (-in).exp()); },
        [](real_t, real_t y) { return y * (real_t(1) - y); });
}

Tensor tanh(const Tensor& x) {
    return elementwise_unary_eigen(
        x, [](const CAMap& in, AMap& out) { out = in.tanh(); },
        [](real_t, real_t y) { return real_t(1) - y * y; });
}

namespace {
constexpr real_t kGeluC = real_t(0.7978845608028654);  // sqrt(2/pi)
constexpr real_t kGeluK = real_t(0.044715);
}  // namespace

Tensor gelu(const Tensor& x) {
    // tanh approximation (GPT-2 convention).
    Tensor out = Tensor::zeros(x.shape());
    const std::int64_t n = x.numel();
    {
        CAMap in(x.ptr(), n);
        AMap o(out.ptr(), n);
        o = real_t(0.5) * in * (real_t(1) + (kGeluC * (in + kGeluK * in.cube())).tanh());
    }
    if (any_requires({&x})) {
        record({x}, out, [x, out, n]() mutable {
            const real_t* go = out.grad().data();
            real_t* gx = x.grad_ptr();
            CAMap in(x.ptr(), n);
            // Recompute tanh(u) vectorized; cheaper than caching it.
            EArr t = (kGeluC * (in + kGeluK * in.cube())).tanh();
            EArr du = kGeluC * (real_t(1) + real_t(3) * kGeluK * in.square());
            AMap g(gx, n);
            CAMap gom(go, n);
            g += gom * (real_t(0.5) * (real_t(1) + t) +
                        real_t(0.5) * in * (real_t(1) - t.square()) * du);
        });
    }
    return out;
}

Tensor sqrt(const Tensor& x) {
    return elementwise_unary_eigen(
        x, [](const CAMap& in, AMap& out) { out = in.sqrt(); },
        [](real_t, real_t y) { return real_t(0.5) / y; });
}

Tensor sum_all(const Tensor& x) {
    real_t s = 0;
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) s += x.ptr()[i];
    Tensor out = Tensor::scalar(s);
    if (any_requires({&x})) {
        record({x}, out, [x, out, n]() mutable {
            const real_t go = out.grad()[0];
            real_t* gx = x.grad_ptr();
            for (std::int64_t i = 0; i < n; ++i) gx[i] += go;
        });
    }
    return out;
}

Tensor mean_all(const Tensor& x) {
    const std::int64_t n = x.numel();
    real_t s = 0;
    for (std::int64_t i = 0; i < n; ++i) s += x.ptr()[i];
    Tensor out = Tensor::scalar(s / static_cast<real_t>(n));
    if (any_requires({&x})) {
        record({x}, out, [x, out, n]() mutable {
            const real_t go = out.grad()[0] / static_cast<real_t>(n);
            real_t* gx = x.grad_ptr();
            for (std::int64_t i = 0; i < n; ++i) gx[i] += go;
        });
    }
    return out;
}

Tensor sum_last(const Tensor& x) {
    const int k = x.dim(x.rank() - 1);
    const std::int64_t rows = rows_of_last(x);
    Shape os(x.shape().begin(), x.shape().end() - 1);
    if (os.empty()) os = {1};
    Tensor out = Tensor::zeros(os);
    for (std::int64_t r = 0; r < rows; ++r) {
        real_t s = 0;
        for (int j = 0; j < k; ++j) s += x.ptr()[r * k + j];
        out.ptr()[r] = s;
    }
    if (any_requires({&x})) {
        record({x}, out, [x, out, rows, k]() mutable {
            const real_t* go = out.grad().data();
            real_t* gx = x.grad_ptr();
            for (std::int64_t r = 0; r < rows; ++r)
                for (int j = 0; j < k; ++j) gx[r * k + j] += go[r];
        });
    }
    return out;
}

Tensor mean_last(const Tensor& x) {
    const int k = x.dim(x.rank() - 1);
    return mul_scalar(sum_last(x), real_t(1) / static_cast<real_t>(k));
}

Tensor dot(const Tensor& a, const Tensor& b) {
    if (a.rank() != 1 || b.rank() != 1) throw ShapeError("dot: expects rank-1 operands");
    check_same_shape(a, b, "dot");
    return sum_all(mul(a, b));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (b.rank() != 2) throw ShapeError("matmul: right operand must be rank-2, got " + shape_str(b.shape()));
    const int k = b.dim(0);
    const int n = b.dim(1);
    if (a.rank() == 2) {
        if (a.dim(1) != k)
            throw ShapeError("matmul: inner extents differ " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
        const int m = a.dim(0);
        Tensor out = Tensor::zeros({m, n});
        CMap A(a.ptr(), m, k), B(b.ptr(), k, n);
        Map O(out.ptr(), m, n);
        O.noalias() = A * B;
        if (any_requires({&a, &b})) {
            record({a, b}, out, [a, b, out, m, k, n]() mutable {
                CMap A(a.ptr(), m, k), B(b.ptr(), k, n), GO(out.grad().data(), m, n);
                if (a.requires_grad()) {
                    Map GA(a.grad_ptr(), m, k);
                    GA.noalias() += GO * B.transpose();
                }
                if (b.requires_grad()) {
                    Map GB(b.grad_ptr(), k, n);
                    GB.noalias() += A.transpose() * GO;
                }
            });
        }
        return out;
    }
    if (a.rank() == 3) {
        if (a.dim(2) != k)
            throw ShapeError("matmul: inner extents differ " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
        const int bs = a.dim(0);
        const int m = a.dim(1);
        Tensor out = Tensor::zeros({bs, m, n});
        for (int i = 0; i < bs; ++i) {
            CMap A(a.ptr() + std::int64_t(i) * m * k, m, k);
            CMap B(b.ptr(), k, n);
            Map O(out.ptr() + std::int64_t(i) * m * n, m, n);
            O.noalias() = A * B;
        }
        if (any_requires({&a, &b})) {
            record({a, b}, out, [a, b, out, bs, m, k, n]() mutable {
                CMap B(b.ptr(), k, n);
                real_t* ga = a.requires_grad() ? a.grad_ptr() : nullptr;
                real_t* gb = b.requires_grad() ? b.grad_ptr() : nullptr;
                for (int i = 0; i < bs; ++i) {
                    CMap A(a.ptr() + std::int64_t(i) * m * k, m, k);
                    CMap GO(out.grad().data() + std::int64_t(i) * m * n, m, n);
                    if (ga) {
                        Map GA(ga + std::int64_t(i) * m * k, m, k);
                        GA.noalias() += GO * B.transpose();
                    }
                    if (gb) {
                        Map GB(gb, k, n);
                        GB.noalias() += A.transpose() * GO;
                    }
                }
            });
        }
        return out;
    }
    throw ShapeError("matmul: unsupported left rank " + shape_str(a.shape()));
}

Tensor bmm(const Tensor& a, const Tensor& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
        throw ShapeError("bmm: incompatible " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const int bs = a.dim(0), n = a.dim(1), k = a.dim(2), m = b.dim(2);
    Tensor out = Tensor::zeros({bs, n, m});
    for (int i = 0; i < bs; ++i) {
        CMap A(a.ptr() + std::int64_t(i) * n * k, n, k);
        CMap B(b.ptr() + std::int64_t(i) * k * m, k, m);
        Map O(out.ptr() + std::int64_t(i) * n * m, n, m);
        O.noalias() = A * B;
    }
    if (any_requires({&a, &b})) {
        record({a, b}, out, [a, b, out, bs, n, k, m]() mutable {
            real_t* ga = a.requires_grad() ? a.grad_ptr() : nullptr;
            real_t* gb = b.requires_grad() ? b.grad_ptr() : nullptr;
            for (int i = 0; i < bs; ++i) {
                CMap A(a.ptr() + std::int64_t(i) * n * k, n, k);
                CMap B(b.ptr() + std::int64_t(i) * k * m, k, m);
                CMap GO(out.grad().data() + std::int64_t(i) * n * m, n, m);
                if (ga) {
                    Map GA(ga + std::int64_t(i) * n * k, n, k);
                    GA.noalias() += GO * B.transpose();
                }
                if (gb) {
                    Map GB(gb + std::int64_t(i) * k * m, k, m);
                    GB.noalias() += A.transpose() * GO;
                }
            }
        });
    }
    return out;
}

Tensor bmm_nt(const Tensor& a, const Tensor& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2))
        throw ShapeError("bmm_nt: incompatible " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const int bs = a.dim(0), n = a.dim(1), k = a.dim(2), m = b.dim(1);
    Tensor out = Tensor::zeros({bs, n, m});
    for (int i = 0; i < bs; ++i) {
        CMap A(a.ptr() + std::int64_t(i) * n * k, n, k);
        CMap B(b.ptr() + std::int64_t(i) * m * k, m, k);
        Map O(out.ptr() + std::int64_t(i) * n * m, n, m);
        O.noalias() = A * B.transpose();
    }
    if (any_requires({&a, &b})) {
        record({a, b}, out, [a, b, out, bs, n, k, m]() mutable {
            real_t* ga = a.requires_grad() ? a.grad_ptr() : nullptr;
            real_t* gb = b.requires_grad() ? b.grad_ptr() : nullptr;
            for (int i = 0; i < bs; ++i) {
                CMap A(a.ptr() + std::int64_t(i) * n * k, n, k);
                CMap B(b.ptr() + std::int64_t(i) * m * k, m, k);
                CMap GO(out.grad().data() + std::int64_t(i) * n * m, n, m);
                if (ga) {
                    Map GA(ga + std::int64_t(i) * n * k, n, k);
                    GA.noalias() += GO * B;
                }
                if (gb) {
                    Map GB(gb + std::int64_t(i) * m * k, m, k);
                    GB.noalias() += GO.transpose() * A;
                }
            }
        });
    }
    return out;
}

Tensor transpose(const Tensor& x) {
    if (x.rank() != 2) throw ShapeError("transpose: expects rank-2, got " + shape_str(x.shape()));
    const int r = x.dim(0), c = x.dim(1);
    Tensor out = Tensor::zeros({c, r});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out.ptr()[std::int64_t(j) * r + i] = x.ptr()[std::int64_t(i) * c + j];
    if (any_requires({&x})) {
        record({x}, out, [x, out, r, c]() mutable {
            const real_t* go = out.grad().data();
            real_t* gx = x.grad_ptr();
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) gx[std::int64_t(i) * c + j] += go[std::int64_t(j) * r + i];
        });
    }
    return out;
}

Tensor softmax_last(const Tensor& x) {
    const int k = x.dim(x.rank() - 1);
    const std::int64_t rows = rows_of_last(x);
    Tensor out = Tensor::zeros(x.shape());
    for (std::int64_t r = 0; r < rows; ++r) {
        CAMap in(x.ptr() + r * k, k);
        AMap po(out.ptr() + r * k, k);
        const real_t mx = in.maxCoeff();
        if (std::isnan(static_cast<double>(mx))) throw NumericError("softmax: NaN input");
        po = (in - mx).exp();
        po /= po.sum();
    }
    if (any_requires({&x})) {
        record({x}, out, [x, out, rows, k]() mutable {
            const real_t* go = out.grad().data();
            const real_t* py = out.ptr();
            real_t* gx = x.grad_ptr();
            for (std::int64_t r = 0; r < rows; ++r) {
                real_t acc = 0;
                for (int j = 0; j < k; ++j) acc += go[r * k + j] * py[r * k + j];
                for (int j = 0; j < k; ++j)
                    gx[r * k + j] += py[r * k + j] * (go[r * k + j] - acc);
            }
        });
    }
    return out;
}

Tensor softmax(const Tensor& x, int axis) {
    if (x.rank() != 2) throw ShapeError("softmax: axis form expects rank-2, got " + shape_str(x.shape()));
    if (axis == 1) return softmax_last(x);
    if (axis == 0) return transpose(softmax_last(transpose(x)));
    throw ParamError("softmax: axis must be 0 or 1");
}

namespace {

constexpr real_t kLayerNormEps = real_t(1e-5);

}  // namespace

Tensor layer_norm_last(const Tensor& x, const Tensor& gain, const Tensor& bias) {
    const int k = x.dim(x.rank() - 1);
    if (k < 2) throw ShapeError("layer_norm: normalized extent must be >= 2");
    if (gain.numel() != k || bias.numel() != k)
        throw ShapeError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                         " do not match extent " + std::to_string(k));
    const std::int64_t rows = rows_of_last(x);
    Tensor out = Tensor::zeros(x.shape());
    for (std::int64_t r = 0; r < rows; ++r) {
        const real_t* px = x.ptr() + r * k;
        real_t* po = out.ptr() + r * k;
        real_t mu = 0;
        for (int j = 0; j < k; ++j) mu += px[j];
        mu /= static_cast<real_t>(k);
        real_t var = 0;
        for (int j = 0; j < k; ++j) var += (px[j] - mu) * (px[j] - mu);
        var /= static_cast<real_t>(k);
        const real_t inv = real_t(1) / std::sqrt(var + kLayerNormEps);
        for (int j = 0; j < k; ++j) po[j] = (px[j] - mu) * inv * gain.ptr()[j] + bias.ptr()[j];
    }
    if (any_requires({&x, &gain, &bias})) {
        record({x, gain, bias}, out, [x, gain, bias, out, rows, k]() mutable {
            const real_t* go = out.grad().data();
            real_t* gx = x.requires_grad() ? x.grad_ptr() : nullptr;
            std::vector<real_t> gg(static_cast<size_t>(k), 0), gb(static_cast<size_t>(k), 0);
            for (std::int64_t r = 0; r < rows; ++r) {
                const real_t* px = x.ptr() + r * k;
                const real_t* pg = go + r * k;
                real_t mu = 0;
                for (int j = 0; j < k; ++j) mu += px[j];
                mu /= static_cast<real_t>(k);
                real_t var = 0;
                for (int j = 0; j < k; ++j) var += (px[j] - mu) * (px[j] - mu);
                var /= static_cast<real_t>(k);
                const real_t inv = real_t(1) / std::sqrt(var + kLayerNormEps);
                real_t m1 = 0, m2 = 0;  // mean(dy*g), mean(dy*g*xhat)
                for (int j = 0; j < k; ++j) {
                    const real_t xh = (px[j] - mu) * inv;
                    const real_t d = pg[j] * gain.ptr()[j];
                    m1 += d;
                    m2 += d * xh;
                    gg[j] += pg[j] * xh;
                    gb[j] += pg[j];
                }
                m1 /= static_cast<real_t>(k);
                m2 /= static_cast<real_t>(k);
                if (gx)
                    for (int j = 0; j < k; ++j) {
                        const real_t xh = (px[j] - mu) * inv;
                        gx[r * k + j] += inv * (pg[j] * gain.ptr()[j] - m1 - xh * m2);
                    }
            }
            accum(gain, gg.data());
            accum(bias, gb.data());
        });
    }
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, int axis) {
    if (x.rank() != 2) throw ShapeError("layer_norm: axis form expects rank-2");
    if (axis == 1) return layer_norm_last(x, gain, bias);
    if (axis == 0) return transpose(layer_norm_last(transpose(x), gain, bias));
    throw ParamError("layer_norm: axis must be 0 or 1");
}

namespace {

struct AxisView {
    std::int64_t outer;   // product of extents before axis
    std::int64_t extent;  // extent along axis
    std::int64_t inner;   // product of extents after axis
};

AxisView axis_view(const Shape& s, int axis) {
    AxisView v{1, s[static_cast<size_t>(axis)], 1};
    for (int i = 0; i < axis; ++i) v.outer *= s[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) v.inner *= s[i];
    return v;
}

void check_cat_axis(const Tensor& t, int axis) {
    const int r = t.rank();
    const bool ok = (r == 2 && (axis == 0 || axis == 1)) || (r == 3 && (axis == 1 || axis == 2));
    if (!ok)
        throw ParamError("axis " + std::to_string(axis) + " unsupported for rank " + std::to_string(r));
}

}  // namespace

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ParamError("concat: empty input");
    check_cat_axis(parts[0], axis);
    Shape os = parts[0].shape();
    int total = 0;
    for (const auto& p : parts) {
        if (p.rank() != parts[0].rank()) throw ShapeError("concat: rank mismatch");
        for (int i = 0; i < p.rank(); ++i)
            if (i != axis && p.dim(i) != parts[0].dim(i))
                throw ShapeError("concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                                 shape_str(parts[0].shape()));
        total += p.dim(axis);
    }
    os[static_cast<size_t>(axis)] = total;
    Tensor out = Tensor::zeros(os);
    const AxisView ov = axis_view(os, axis);
    std::int64_t off = 0;
    for (const auto& p : parts) {
        const AxisView pv = axis_view(p.shape(), axis);
        for (std::int64_t o = 0; o < pv.outer; ++o)
            std::memcpy(out.ptr() + (o * ov.extent + off) * ov.inner, p.ptr() + o * pv.extent * pv.inner,
                        static_cast<size_t>(pv.extent * pv.inner) * sizeof(real_t));
        off += pv.extent;
    }
    bool needs = false;
    for (const auto& p : parts)
        if (p.requires_grad()) needs = true;
    if (grad_enabled() && needs) {
        std::vector<Tensor> ins = parts;
        record(ins, out, [parts, out, axis, ov]() mutable {
            const real_t* go = out.grad().data();
            std::int64_t off = 0;
            for (auto& p : parts) {
                const AxisView pv = axis_view(p.shape(), axis);
                if (p.requires_grad()) {
                    real_t* gp = p.grad_ptr();
                    for (std::int64_t o = 0; o < pv.outer; ++o) {
                        const real_t* srcg = go + (o * ov.extent + off) * ov.inner;
                        real_t* dst = gp + o * pv.extent * pv.inner;
                        for (std::int64_t i = 0; i < pv.extent * pv.inner; ++i) dst[i] += srcg[i];
                    }
                }
                off += pv.extent;
            }
        });
    }
    return out;
}

Tensor slice(const Tensor& x, int axis, int start, int len) {
    check_cat_axis(x, axis);
    if (start < 0 || len < 1 || start + len > x.dim(axis))
        throw ParamError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") out of extent " + std::to_string(x.dim(axis)));
    Shape os = x.shape();
    os[static_cast<size_t>(axis)] = len;
    Tensor out = Tensor::zeros(os);
    const AxisView xv = axis_view(x.shape(), axis);
    for (std::int64_t o = 0; o < xv.outer; ++o)
        std::memcpy(out.ptr() + o * len * xv.inner, x.ptr() + (o * xv.extent + start) * xv.inner,
                    static_cast<size_t>(len * xv.inner) * sizeof(real_t));
    if (any_requires({&x})) {
        record({x}, out, [x, out, start, len, xv]() mutable {
            const real_t* go = out.grad().data();
            real_t* gx = x.grad_ptr();
            for (std::int64_t o = 0; o < xv.outer; ++o) {
                real_t* dst = gx + (o * xv.extent + start) * xv.inner;
                const real_t* srcg = go + o * len * xv.inner;
                for (std::int64_t i = 0; i < len * xv.inner; ++i) dst[i] += srcg[i];
            }
        });
    }
    return out;
}

std::vector<Tensor> split(const Tensor& x, int n_parts, int axis) {
    check_cat_axis(x, axis);
    const int ext = x.dim(axis);
    if (n_parts < 1 || ext % n_parts != 0)
        throw ParamError("split: extent " + std::to_string(ext) + " not divisible by " +
                         std::to_string(n_parts));
    const int step = ext / n_parts;
    std::vector<Tensor> parts;
    parts.reserve(static_cast<size_t>(n_parts));
    for (int i = 0; i < n_parts; ++i) parts.push_back(slice(x, axis, i * step, step));
    return parts;
}

Tensor stack_rows(const std::vector<Tensor>& mats) {
    if (mats.empty()) throw ParamError("stack_rows: empty input");
    const int n = mats[0].dim(0), c = mats[0].dim(1);
    for (const auto& m : mats) {
        if (m.rank() != 2 || m.dim(0) != n || m.dim(1) != c)
            throw ShapeError("stack_rows: inconsistent shapes");
    }
    const int bs = static_cast<int>(mats.size());
    Tensor out = Tensor::zeros({bs, n, c});
    const std::int64_t sz = std::int64_t(n) * c;
    for (int i = 0; i < bs; ++i)
        std::memcpy(out.ptr() + i * sz, mats[static_cast<size_t>(i)].ptr(),
                    static_cast<size_t>(sz) * sizeof(real_t));
    bool needs = false;
    for (const auto& m : mats)
        if (m.requires_grad()) needs = true;
    if (grad_enabled() && needs) {
        record(mats, out, [mats, out, sz]() mutable {
            const real_t* go = out.grad().data();
            for (size_t i = 0; i < mats.size(); ++i) accum(mats[i], go + std::int64_t(i) * sz);
        });
    }
    return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (numel_of(shape) != x.numel())
        throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) +
                         " changes element count");
    Tensor out = Tensor::from_data(shape, std::vector<real_t>(x.data().begin(), x.data().end()));
    if (any_requires({&x})) {
        record({x}, out, [x, out]() mutable { accum(x, out.grad().data()); });
    }
    return out;
}

Tensor add_bias(const Tensor& x, const Tensor& b) {
    const int k = x.dim(x.rank() - 1);
    if (b.rank() != 1 || b.dim(0) != k)
        throw ShapeError("add_bias: bias " + shape_str(b.shape()) + " does not match last extent " +
                         std::to_string(k));
    const std::int64_t rows = rows_of_last(x);
    Tensor out = Tensor::zeros(x.shape());
    for (std::int64_t r = 0; r < rows; ++r)
        for (int j = 0; j < k; ++j) out.ptr()[r * k + j] = x.ptr()[r * k + j] + b.ptr()[j];
    if (any_requires({&x, &b})) {
        record({x, b}, out, [x, b, out, rows, k]() mutable {
            const real_t* go = out.grad().data();
            accum(x, go);
            if (b.requires_grad()) {
                real_t* gb = b.grad_ptr();
                for (std::int64_t r = 0; r < rows; ++r)
                    for (int j = 0; j < k; ++j) gb[j] += go[r * k + j];
            }
        });
    }
    return out;
}

Tensor add_broadcast(const Tensor& x, const Tensor& m) {
    if (x.rank() != 3 || m.rank() != 2 || x.dim(1) != m.dim(0) || x.dim(2) != m.dim(1))
        throw ShapeError("add_broadcast: " + shape_str(x.shape()) + " + " + shape_str(m.shape()));
    const int bs = x.dim(0);
    const std::int64_t sz = std::int64_t(x.dim(1)) * x.dim(2);
    Tensor out = Tensor::zeros(x.shape());
    for (int i = 0; i < bs; ++i)
        for (std::int64_t j = 0; j < sz; ++j) out.ptr()[i * sz + j] = x.ptr()[i * sz + j] + m.ptr()[j];
    if (any_requires({&x, &m})) {
        record({x, m}, out, [x, m, out, bs, sz]() mutable {
            const real_t* go = out.grad().data();
            accum(x, go);
            if (m.requires_grad()) {
                real_t* gm = m.grad_ptr();
                for (int i = 0; i < bs; ++i)
                    for (std::int64_t j = 0; j < sz; ++j) gm[j] += go[i * sz + j];
            }
        });
    }
    return out;
}

Tensor scale_rows(const Tensor& x, const Tensor& s) {
    if (x.rank() != 2 || s.rank() != 1 || s.dim(0) != x.dim(0))
        throw ShapeError("scale_rows: " + shape_str(x.shape()) + " with gains " + shape_str(s.shape()));
    const int r = x.dim(0), c = x.dim(1);
    Tensor out = Tensor::zeros(x.shape());
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out.ptr()[std::int64_t(i) * c + j] = x.ptr()[std::int64_t(i) * c + j] * s.ptr()[i];
    if (any_requires({&x, &s})) {
        record({x, s}, out, [x, s, out, r, c]() mutable {
            const real_t* go = out.grad().data();
            if (x.requires_grad()) {
                real_t* gx = x.grad_ptr();
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j) gx[std::int64_t(i) * c + j] += go[std::int64_t(i) * c + j] * s.ptr()[i];
            }
            if (s.requires_grad()) {
                real_t* gs = s.grad_ptr();
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j) gs[i] += go[std::int64_t(i) * c + j] * x.ptr()[std::int64_t(i) * c + j];
            }
        });
    }
    return out;
}

Tensor gather_rows(const Tensor& w, const std::vector<int>& ids) {
    if (w.rank() != 2) throw ShapeError("gather_rows: expects rank-2 source");
    const int v = w.dim(0), d = w.dim(1);
    const int n = static_cast<int>(ids.size());
    for (int id : ids)
        if (id < 0 || id >= v) throw ParamError("gather_rows: index " + std::to_string(id) + " out of range");
    Tensor out = Tensor::zeros({n, d});
    for (int i = 0; i < n; ++i)
        std::memcpy(out.ptr() + std::int64_t(i) * d, w.ptr() + std::int64_t(ids[static_cast<size_t>(i)]) * d,
                    static_cast<size_t>(d) * sizeof(real_t));
    if (any_requires({&w})) {
        record({w}, out, [w, out, ids, d]() mutable {
            const real_t* go = out.grad().data();
            real_t* gw = w.grad_ptr();
            for (size_t i = 0; i < ids.size(); ++i)
                for (int j = 0; j < d; ++j)
                    gw[std::int64_t(ids[i]) * d + j] += go[std::int64_t(i) * d + j];
        });
    }
    return out;
}

Tensor ce_with_logits(const Tensor& logits, const std::vector<int>& targets) {
    if (logits.rank() != 2) throw ShapeError("ce_with_logits: expects rank-2 logits");
    const int n = logits.dim(0), v = logits.dim(1);
    if (static_cast<int>(targets.size()) != n)
        throw ShapeError("ce_with_logits: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(n) + " rows");
    real_t loss = 0;
    std::vector<real_t> probs(static_cast<size_t>(logits.numel()));
    for (int i = 0; i < n; ++i) {
        const real_t* px = logits.ptr() + std::int64_t(i) * v;
        real_t mx = px[0];
        for (int j = 0; j < v; ++j) mx = std::max(mx, px[j]);
        real_t s = 0;
        for (int j = 0; j < v; ++j) {
            probs[std::int64_t(i) * v + j] = std::exp(px[j] - mx);
            s += probs[std::int64_t(i) * v + j];
        }
        for (int j = 0; j < v; ++j) probs[std::int64_t(i) * v + j] /= s;
        loss -= std::log(probs[std::int64_t(i) * v + targets[static_cast<size_t>(i)]]);
    }
    Tensor out = Tensor::scalar(loss / static_cast<real_t>(n));
    if (any_requires({&logits})) {
        record({logits}, out, [logits, out, targets, n, v, probs]() mutable {
            const real_t go = out.grad()[0] / static_cast<real_t>(n);
            real_t* gx = logits.grad_ptr();
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < v; ++j) {
                    real_t p = probs[std::int64_t(i) * v + j];
                    if (j == targets[static_cast<size_t>(i)]) p -= real_t(1);
                    gx[std::int64_t(i) * v + j] += go * p;
                }
        });
    }
    return out;
}

Tensor kl_div(const Tensor& p, const Tensor& q) {
    check_same_shape(p, q, "kl_div");
    const int k = p.dim(p.rank() - 1);
    const std::int64_t rows = rows_of_last(p);
    for (std::int64_t r = 0; r < rows; ++r) {
        real_t sp = 0, sq = 0;
        for (int j = 0; j < k; ++j) {
            const real_t pv = p.ptr()[r * k + j];
            const real_t qv = q.ptr()[r * k + j];
            if (pv < real_t(-1e-9) || qv < real_t(-1e-9))
                throw ContractError("kl_div: negative entry in row " + std::to_string(r));
            sp += pv;
            sq += qv;
        }
        if (std::abs(static_cast<double>(sp) - 1.0) > 1e-6 || std::abs(static_cast<double>(sq) - 1.0) > 1e-6)
            throw ContractError("kl_div: row " + std::to_string(r) + " is not stochastic (sums " +
                                std::to_string(static_cast<double>(sp)) + ", " +
                                std::to_string(static_cast<double>(sq)) + ")");
    }
    real_t total = 0;
    for (std::int64_t r = 0; r < rows; ++r)
        for (int j = 0; j < k; ++j) {
            const real_t pv = p.ptr()[r * k + j];
            if (pv > real_t(0)) total += pv * std::log(pv / q.ptr()[r * k + j]);
        }
    Tensor out = Tensor::scalar(total / static_cast<real_t>(rows));
    if (any_requires({&p, &q})) {
        record({p, q}, out, [p, q, out, rows, k]() mutable {
            const real_t go = out.grad()[0] / static_cast<real_t>(rows);
            if (p.requires_grad()) {
                real_t* gp = p.grad_ptr();
                for (std::int64_t r = 0; r < rows; ++r)
                    for (int j = 0; j < k; ++j) {
                        const real_t pv = p.ptr()[r * k + j];
                        if (pv > real_t(0))
                            gp[r * k + j] += go * (std::log(pv / q.ptr()[r * k + j]) + real_t(1));
                    }
            }
            if (q.requires_grad()) {
                real_t* gq = q.grad_ptr();
                for (std::int64_t r = 0; r < rows; ++r)
                    for (int j = 0; j < k; ++j) {
                        const real_t pv = p.ptr()[r * k + j];
                        if (pv > real_t(0)) gq[r * k + j] += -go * pv / q.ptr()[r * k + j];
                    }
            }
        });
    }
    return out;
}

Tensor xavier_uniform(int fan_in, int fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    return Tensor::uniform({fan_in, fan_out}, rng, -limit, limit);
}

}  // namespace csipred
