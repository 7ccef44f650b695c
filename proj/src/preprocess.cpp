#include "csipred/preprocess.hpp"

#include <cmath>

namespace csipred {

Tensor to_real(const cplx* h, int f, int t) {
    Tensor out = Tensor::zeros({2 * f, t});
    for (int i = 0; i < f; ++i)
        for (int j = 0; j < t; ++j) {
            out.ptr()[static_cast<std::int64_t>(i) * t + j] =
                static_cast<real_t>(h[static_cast<size_t>(i) * t + j].real());
            out.ptr()[static_cast<std::int64_t>(i + f) * t + j] =
                static_cast<real_t>(h[static_cast<size_t>(i) * t + j].imag());
        }
    return out;
}

std::vector<cplx> from_real(const Tensor& x) {
    if (x.rank() != 2 || x.dim(0) % 2 != 0) throw ShapeError("from_real: expects [2F x T]");
    const int f = x.dim(0) / 2, t = x.dim(1);
    std::vector<cplx> out(static_cast<size_t>(f) * t);
    for (int i = 0; i < f; ++i)
        for (int j = 0; j < t; ++j)
            out[static_cast<size_t>(i) * t + j] =
                cplx(x.ptr()[static_cast<std::int64_t>(i) * t + j],
                     x.ptr()[static_cast<std::int64_t>(i + f) * t + j]);
    return out;
}

NormStats Normalizer::observe(const std::vector<Tensor>& batch) {
    double sum = 0.0, sq = 0.0;
    std::int64_t n = 0;
    for (const auto& t : batch) {
        for (const real_t v : t.data()) {
            sum += v;
            sq += static_cast<double>(v) * v;
        }
        n += t.numel();
    }
    if (n == 0) throw ParamError("normalize: empty batch");
    const double mean = sum / static_cast<double>(n);
    const double var = std::max(sq / static_cast<double>(n) - mean * mean, 0.0);
    const NormStats stats{mean, std::sqrt(var)};
    if (!initialized_) {
        running_mean_ = stats.mean;
        running_std_ = stats.std;
        initialized_ = true;
    } else {
        running_mean_ = 0.99 * running_mean_ + 0.01 * stats.mean;
        running_std_ = 0.99 * running_std_ + 0.01 * stats.std;
    }
    return stats;
}

Tensor apply_norm(const Tensor& x, const NormStats& stats) {
    const real_t inv = static_cast<real_t>(1.0 / (stats.std + 1e-8));
    return mul_scalar(add_scalar(x, static_cast<real_t>(-stats.mean)), inv);
}

Tensor invert_norm(const Tensor& y, const NormStats& stats) {
    return add_scalar(mul_scalar(y, static_cast<real_t>(stats.std + 1e-8)),
                      static_cast<real_t>(stats.mean));
}

PatchedTensor patch(const Tensor& x, int n) {
    if (x.rank() != 2) throw ShapeError("patch: expects [2F x T]");
    if (n < 1) throw ParamError("patch: patch size must be >= 1");
    const int rows = x.dim(0), t = x.dim(1);
    const int t_patches = (t + n - 1) / n;
    const int pad = t_patches * n - t;
    // [2F x T] -> [2F x N x T']: entry (r, i, j) = x(r, j*N + i), zero padded.
    Tensor padded = pad == 0 ? x : concat({x, Tensor::zeros({rows, pad})}, 1);
    // Row-major [2F x T'*N] reinterpreted as [2F x T' x N] has patch index
    // before intra-patch offset; transpose the last two axes to reach the
    // [2F x N x T'] layout.
    Tensor v3 = reshape(padded, {rows, t_patches, n});
    std::vector<Tensor> per_offset;
    per_offset.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i)
        per_offset.push_back(reshape(slice(v3, 2, i, 1), {rows, 1, t_patches}));
    PatchedTensor out;
    out.values = concat(per_offset, 1);  // [2F x N x T']
    out.patch_size = n;
    out.t_orig = t;
    out.pad = pad;
    return out;
}

Tensor unpatch(const PatchedTensor& p) {
    const int rows = p.values.dim(0);
    const int n = p.values.dim(1);
    const int t_patches = p.values.dim(2);
    // values(r, i, j) -> x(r, j*N + i); drop the trailing pad.
    std::vector<Tensor> per_offset;
    per_offset.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i)
        per_offset.push_back(reshape(slice(p.values, 1, i, 1), {rows, t_patches, 1}));
    Tensor inter = concat(per_offset, 2);                  // [2F x T' x N], (r,j,i)
    Tensor flat = reshape(inter, {rows, t_patches * n});   // row-major: j*N + i
    if (p.pad == 0) return flat;
    return slice(flat, 1, 0, p.t_orig);
}

void CssaParams::init(ParamRegistry& reg, const std::string& prefix, int e, Rng& rng) {
    lift_w = reg.add(prefix + ".lift_w", xavier_uniform(1, e, rng), true);
    lift_b = reg.add(prefix + ".lift_b", Tensor::zeros({e}), true);
    wq = reg.add(prefix + ".wq", xavier_uniform(e, e, rng), true);
    bq = reg.add(prefix + ".bq", Tensor::zeros({e}), true);
    wk = reg.add(prefix + ".wk", xavier_uniform(e, e, rng), true);
    bk = reg.add(prefix + ".bk", Tensor::zeros({e}), true);
    wv = reg.add(prefix + ".wv", xavier_uniform(e, e, rng), true);
    bv = reg.add(prefix + ".bv", Tensor::zeros({e}), true);
    out_w = reg.add(prefix + ".out_w", xavier_uniform(e, 1, rng), true);
    out_b = reg.add(prefix + ".out_b", Tensor::zeros({1}), true);
}

Tensor cssa(const PatchedTensor& y, const CssaParams& params) {
    const int channels = y.values.dim(0);
    const int n = y.values.dim(1);
    const int t_patches = y.values.dim(2);
    const int e = params.token_dim();

    Tensor flat = reshape(y.values, {channels, n * t_patches});
    Tensor desc = mean_last(flat);                                   // [2F]
    Tensor tokens = add_bias(matmul(reshape(desc, {channels, 1}), params.lift_w), params.lift_b);
    Tensor q = add_bias(matmul(tokens, params.wq), params.bq);       // [2F x e]
    Tensor k = add_bias(matmul(tokens, params.wk), params.bk);
    Tensor v = add_bias(matmul(tokens, params.wv), params.bv);
    Tensor scores = mul_scalar(matmul(q, transpose(k)), static_cast<real_t>(1.0 / std::sqrt(double(e))));
    Tensor ctx = matmul(softmax_last(scores), v);                    // [2F x e]
    Tensor gains = sigmoid(reshape(add_bias(matmul(ctx, params.out_w), params.out_b), {channels}));
    Tensor modulated = scale_rows(flat, gains);
    PatchedTensor scaled{reshape(modulated, {channels, n, t_patches}), y.patch_size, y.t_orig, y.pad};
    return unpatch(scaled);
}

}  // namespace csipred
