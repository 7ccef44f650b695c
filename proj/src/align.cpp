#include "csipred/align.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace csipred {

namespace {

// W [in x out] applied per column of x [in x T]: out = W^T x + b.
Tensor linear_cols(const Tensor& w, const Tensor& b, const Tensor& x) {
    return transpose(add_bias(matmul(transpose(x), w), b));
}

}  // namespace

void AlignParams::init(ParamRegistry& reg, const std::string& prefix, int in_dim, int model_dim,
                       int heads_, int dict_d, int anchors_m, int k, Rng& rng) {
    if (model_dim % heads_ != 0)
        throw ParamError("align: model dim " + std::to_string(model_dim) + " not divisible by " +
                         std::to_string(heads_) + " heads");
    heads = heads_;
    prompt_count = k;
    embed_w = reg.add(prefix + ".embed_w", xavier_uniform(in_dim, model_dim, rng), true);
    embed_b = reg.add(prefix + ".embed_b", Tensor::zeros({model_dim}), true);
    ln_g = reg.add(prefix + ".ln_g", Tensor::full({model_dim}, 1), true);
    ln_b = reg.add(prefix + ".ln_b", Tensor::zeros({model_dim}), true);
    mh_wq = reg.add(prefix + ".mh_wq", xavier_uniform(model_dim, model_dim, rng), true);
    mh_bq = reg.add(prefix + ".mh_bq", Tensor::zeros({model_dim}), true);
    mh_wk = reg.add(prefix + ".mh_wk", xavier_uniform(model_dim, model_dim, rng), true);
    mh_bk = reg.add(prefix + ".mh_bk", Tensor::zeros({model_dim}), true);
    mh_wv = reg.add(prefix + ".mh_wv", xavier_uniform(model_dim, model_dim, rng), true);
    mh_bv = reg.add(prefix + ".mh_bv", Tensor::zeros({model_dim}), true);
    mh_wo = reg.add(prefix + ".mh_wo", xavier_uniform(model_dim, model_dim, rng), true);
    mh_bo = reg.add(prefix + ".mh_bo", Tensor::zeros({model_dim}), true);
    w_q = reg.add(prefix + ".w_q", xavier_uniform(model_dim, model_dim, rng), true);
    w_k = reg.add(prefix + ".w_k", xavier_uniform(model_dim, model_dim, rng), true);
    w_v = reg.add(prefix + ".w_v", xavier_uniform(model_dim, model_dim, rng), true);
    w_gate = reg.add(prefix + ".w_gate", xavier_uniform(2 * model_dim, model_dim, rng), true);
    anchor_w = reg.add(prefix + ".anchor_w", xavier_uniform(anchors_m, dict_d, rng), true);
    anchor_b = reg.add(prefix + ".anchor_b", Tensor::zeros({anchors_m}), true);
}

Tensor embed_csi(const Tensor& y, const AlignParams& p) {
    if (y.dim(0) != p.embed_w.dim(0))
        throw ShapeError("embed_csi: input rows " + shape_str(y.shape()) + " vs embed " +
                         shape_str(p.embed_w.shape()));
    return linear_cols(p.embed_w, p.embed_b, y);
}

Tensor temporal_mhsa(const Tensor& y_hat, const AlignParams& p) {
    const int d = y_hat.dim(0);
    const int heads = p.heads;
    const int dh = d / heads;
    Tensor x = transpose(y_hat);                        // [T x D]
    Tensor h = layer_norm_last(x, p.ln_g, p.ln_b);
    Tensor q = add_bias(matmul(h, p.mh_wq), p.mh_bq);
    Tensor k = add_bias(matmul(h, p.mh_wk), p.mh_bk);
    Tensor v = add_bias(matmul(h, p.mh_wv), p.mh_bv);
    std::vector<Tensor> ctx;
    ctx.reserve(static_cast<size_t>(heads));
    const real_t scale = static_cast<real_t>(1.0 / std::sqrt(double(dh)));
    for (int i = 0; i < heads; ++i) {
        Tensor qi = slice(q, 1, i * dh, dh);
        Tensor ki = slice(k, 1, i * dh, dh);
        Tensor vi = slice(v, 1, i * dh, dh);
        Tensor att = softmax_last(mul_scalar(matmul(qi, transpose(ki)), scale));
        ctx.push_back(matmul(att, vi));
    }
    Tensor o = add_bias(matmul(concat(ctx, 1), p.mh_wo), p.mh_bo);
    return transpose(add(x, o));
}

Tensor cross_attend_with_kv(const Tensor& y_time, const Tensor& w_q, const Tensor& k,
                            const Tensor& v, int scale_dim) {
    Tensor q = matmul(transpose(y_time), w_q);  // [T x D]
    const real_t scale = static_cast<real_t>(1.0 / std::sqrt(double(scale_dim)));
    Tensor att = softmax_last(mul_scalar(matmul(q, transpose(k)), scale));
    return transpose(matmul(att, v));
}

Tensor cross_modal_attend(const Tensor& y_time, const Tensor& d_hat, const AlignParams& p) {
    Tensor k = matmul(d_hat, p.w_k);
    Tensor v = matmul(d_hat, p.w_v);
    return cross_attend_with_kv(y_time, p.w_q, k, v, y_time.dim(0));
}

Tensor gated_fuse(const Tensor& y_cross, const Tensor& y_time, const Tensor& w_gate) {
    if (y_cross.shape() != y_time.shape())
        throw ShapeError("gated_fuse: " + shape_str(y_cross.shape()) + " vs " + shape_str(y_time.shape()));
    Tensor cat = concat({y_cross, y_time}, 0);               // [2D x T]
    Tensor g = sigmoid(matmul(transpose(w_gate), cat));      // [D x T]
    // y_time + (y_cross - y_time) . g  ==  y_cross . g + y_time . (1 - g)
    return add(y_time, mul(sub(y_cross, y_time), g));
}

Tensor make_anchors(const Tensor& d_hat, const AlignParams& p) {
    if (p.anchor_w.dim(1) != d_hat.dim(0))
        throw ShapeError("make_anchors: anchor map " + shape_str(p.anchor_w.shape()) +
                         " vs dictionary " + shape_str(d_hat.shape()));
    // Bias adds a per-anchor offset uniformly across the embedding axis.
    return transpose(add_bias(transpose(matmul(p.anchor_w, d_hat)), p.anchor_b));
}

PromptSelection retrieve_prompts(const Tensor& y_text, const Tensor& anchors, int k) {
    const int m = anchors.dim(0);
    const int d = anchors.dim(1);
    if (k < 1 || k > m) throw ParamError("retrieve_prompts: K=" + std::to_string(k) + " with m=" + std::to_string(m));
    Tensor pooled = mean_last(y_text);  // [D]
    if (pooled.numel() != d) throw ShapeError("retrieve_prompts: pooled dim != anchor dim");

    double pn = 0;
    for (const real_t x : pooled.data()) pn += static_cast<double>(x) * x;
    pn = std::sqrt(pn);

    std::vector<double> scores(static_cast<size_t>(m), 0.0);
    for (int i = 0; i < m; ++i) {
        double an = 0, num = 0;
        for (int j = 0; j < d; ++j) {
            const double a = anchors.ptr()[static_cast<std::int64_t>(i) * d + j];
            an += a * a;
            num += a * pooled.ptr()[j];
        }
        an = std::sqrt(an);
        scores[static_cast<size_t>(i)] = (pn < 1e-12 || an < 1e-12) ? 0.0 : num / (pn * an);
    }

    std::vector<int> order(static_cast<size_t>(m));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        if (scores[static_cast<size_t>(a)] != scores[static_cast<size_t>(b)])
            return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)];
        return a < b;
    });

    PromptSelection sel;
    sel.indices.assign(order.begin(), order.begin() + k);
    sel.scores.reserve(static_cast<size_t>(k));
    for (int idx : sel.indices) sel.scores.push_back(scores[static_cast<size_t>(idx)]);
    // Straight-through selection: indices are fixed for the step, gradients
    // flow into the selected anchor rows.
    sel.prompts = gather_rows(anchors, sel.indices);
    return sel;
}

Tensor prefix_prompts(const Tensor& prompts, const Tensor& y_text) {
    if (!prompts.defined() || prompts.numel() == 0) return y_text;
    if (prompts.dim(1) != y_text.dim(0))
        throw ShapeError("prefix_prompts: prompt dim " + shape_str(prompts.shape()) +
                         " vs sequence " + shape_str(y_text.shape()));
    return concat({transpose(prompts), y_text}, 1);
}

Tensor alignment_loss(const Tensor& y_text, const Tensor& prompts) {
    const int k = prompts.dim(0);
    const int d = prompts.dim(1);
    if (k < 1) throw ParamError("alignment_loss: needs at least one prompt");
    if (y_text.dim(0) != d) throw ShapeError("alignment_loss: dim mismatch");
    Tensor pooled = mean_last(y_text);  // [D]
    Tensor pooled_sq = dot(pooled, pooled);
    Tensor total;
    for (int i = 0; i < k; ++i) {
        Tensor p = reshape(slice(prompts, 0, i, 1), {d});
        Tensor denom = add_scalar(sqrt(mul(pooled_sq, dot(p, p))), real_t(1e-12));
        Tensor cos = div(dot(pooled, p), denom);
        total = total.defined() ? add(total, cos) : cos;
    }
    return mul_scalar(total, static_cast<real_t>(1.0 / k));
}

}  // namespace csipred
