#include "csipred/distill.hpp"

#include <cmath>

namespace csipred {

std::vector<Tensor> resplit(const Tensor& a, int relation_heads) {
    const int d = a.dim(a.rank() - 1);
    if (relation_heads < 1 || d % relation_heads != 0)
        throw ParamError("resplit: width " + std::to_string(d) + " not divisible by " +
                         std::to_string(relation_heads) + " relation heads");
    return split(a, relation_heads, a.rank() - 1);
}

std::vector<Tensor> relations(const Tensor& a_x, const Tensor& a_y, int relation_heads) {
    if (a_x.shape() != a_y.shape())
        throw ShapeError("relations: " + shape_str(a_x.shape()) + " vs " + shape_str(a_y.shape()));
    const int d = a_x.dim(a_x.rank() - 1);
    if (d % relation_heads != 0)
        throw ParamError("relations: width " + std::to_string(d) + " not divisible by " +
                         std::to_string(relation_heads) + " relation heads");
    const int dr = d / relation_heads;
    const real_t scale = static_cast<real_t>(1.0 / std::sqrt(double(dr)));
    const auto hx = resplit(a_x, relation_heads);
    const auto hy = resplit(a_y, relation_heads);
    std::vector<Tensor> out;
    out.reserve(static_cast<size_t>(relation_heads));
    for (int a = 0; a < relation_heads; ++a) {
        Tensor logits = a_x.rank() == 3
                            ? bmm_nt(hx[static_cast<size_t>(a)], hy[static_cast<size_t>(a)])
                            : matmul(hx[static_cast<size_t>(a)], transpose(hy[static_cast<size_t>(a)]));
        out.push_back(softmax_last(mul_scalar(logits, scale)));
    }
    return out;
}

namespace {

// Trailing-window slice along the token axis for [n x D] or [B x n x D].
Tensor tail_window(const Tensor& t, int window) {
    if (window <= 0) return t;
    const int axis = t.rank() == 3 ? 1 : 0;
    const int n = t.dim(axis);
    if (window > n)
        throw ContractError("kd_loss: window " + std::to_string(window) + " exceeds " +
                            std::to_string(n) + " tokens");
    if (t.rank() == 3) return slice(t, 1, n - window, window);
    // rank-2 [n x D]: slice rows via transpose-free copy
    return slice(reshape(t, {1, n, t.dim(1)}), 1, n - window, window);
}

int token_count(const Tensor& t) { return t.rank() == 3 ? t.dim(1) : t.dim(0); }

}  // namespace

Tensor kd_loss(const LayerTrace& teacher, const LayerTrace& student, const RelationConfig& cfg) {
    cfg.validate();
    const Tensor t_parts[3] = {teacher.q, teacher.k, teacher.v};
    const Tensor s_parts[3] = {student.q, student.k, student.v};

    const int t_window = cfg.window > 0 ? cfg.window : token_count(teacher.q);
    const int s_window = cfg.window > 0 ? cfg.window : token_count(student.q);
    if (t_window != s_window)
        throw ContractError("kd_loss: teacher window " + std::to_string(t_window) +
                            " != student window " + std::to_string(s_window));

    Tensor total = Tensor::scalar(0);
    for (int x = 0; x < 3; ++x) {
        for (int y = 0; y < 3; ++y) {
            if (cfg.alpha[static_cast<size_t>(x)][static_cast<size_t>(y)] == 0) continue;
            const Tensor tx = tail_window(t_parts[x], cfg.window);
            const Tensor ty = tail_window(t_parts[y], cfg.window);
            const Tensor sx = tail_window(s_parts[x], cfg.window);
            const Tensor sy = tail_window(s_parts[y], cfg.window);
            const auto rt = relations(tx, ty, cfg.relation_heads);
            const auto rs = relations(sx, sy, cfg.relation_heads);
            Tensor pair_loss = Tensor::scalar(0);
            for (int a = 0; a < cfg.relation_heads; ++a)
                pair_loss = add(pair_loss, kl_div(rt[static_cast<size_t>(a)], rs[static_cast<size_t>(a)]));
            total = add(total, mul_scalar(pair_loss, static_cast<real_t>(1.0 / cfg.relation_heads)));
        }
    }
    return total;
}

}  // namespace csipred
