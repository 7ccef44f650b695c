#include <cmath>

#include "doctest.h"

#include "csipred/align.hpp"
#include "support/gradcheck.hpp"

using namespace csipred;
using csipred::testing::gradcheck;

namespace {

struct Fixture {
    ParamRegistry reg;
    AlignParams p;
    Rng rng{31};

    Fixture(int in_dim = 8, int d = 16, int heads = 4, int dict_d = 6, int m = 3, int k = 2) {
        p.init(reg, "align", in_dim, d, heads, dict_d, m, k, rng);
    }
};

}  // namespace

TEST_CASE("embed_csi is columnwise") {
    Fixture fx;
    Tensor zero = Tensor::zeros({8, 5});
    Tensor out = embed_csi(zero, fx.p);
    REQUIRE(out.shape() == Shape{16, 5});
    for (std::int64_t i = 0; i < out.numel(); ++i) CHECK(out.ptr()[i] == real_t(0));  // zero bias init

    // Perturbation locality: changing column t changes only output column t.
    Tensor x = Tensor::randn({8, 5}, fx.rng);
    Tensor base = embed_csi(x, fx.p);
    Tensor x2 = x.clone_detached();
    x2.ptr()[2 * 5 + 3] += real_t(1);  // row 2, column 3
    Tensor bumped = embed_csi(x2, fx.p);
    for (int r = 0; r < 16; ++r)
        for (int c = 0; c < 5; ++c) {
            if (c == 3) continue;
            CHECK(bumped.ptr()[r * 5 + c] == base.ptr()[r * 5 + c]);
        }

    Tensor probe = Tensor::randn({16, 5}, fx.rng);
    CHECK(gradcheck([&]() { return sum_all(mul(embed_csi(x, fx.p), probe)); },
                    {x, fx.p.embed_w, fx.p.embed_b}) < 1e-6);
}

TEST_CASE("temporal_mhsa single token and permutation equivariance") {
    Fixture fx;
    Tensor x1 = Tensor::randn({16, 1}, fx.rng);
    Tensor out1 = temporal_mhsa(x1, fx.p);
    REQUIRE(out1.shape() == Shape{16, 1});
    // Single token: attention weight is the scalar 1, so the output is the
    // value path of that token plus the residual. Recompute by hand.
    {
        Tensor col = transpose(x1);
        Tensor h = layer_norm_last(col, fx.p.ln_g, fx.p.ln_b);
        Tensor v = add_bias(matmul(h, fx.p.mh_wv), fx.p.mh_bv);
        Tensor o = add_bias(matmul(v, fx.p.mh_wo), fx.p.mh_bo);
        Tensor expect = transpose(add(col, o));
        for (std::int64_t i = 0; i < out1.numel(); ++i)
            CHECK(out1.ptr()[i] == doctest::Approx(expect.ptr()[i]).epsilon(1e-9));
    }

    // Permuting time positions permutes outputs identically.
    Tensor x = Tensor::randn({16, 6}, fx.rng);
    Tensor out = temporal_mhsa(x, fx.p);
    const std::vector<int> perm = {4, 0, 5, 2, 1, 3};
    Tensor xp = Tensor::zeros({16, 6});
    for (int r = 0; r < 16; ++r)
        for (int c = 0; c < 6; ++c) xp.ptr()[r * 6 + c] = x.ptr()[r * 6 + perm[c]];
    Tensor outp = temporal_mhsa(xp, fx.p);
    for (int r = 0; r < 16; ++r)
        for (int c = 0; c < 6; ++c)
            CHECK(outp.ptr()[r * 6 + c] == doctest::Approx(out.ptr()[r * 6 + perm[c]]).epsilon(1e-9));
}

TEST_CASE("reduce_dictionary caching and errors") {
    Rng rng(37);
    Tensor d_full = Tensor::randn({64, 8}, rng);
    VocabDictionary dict(d_full, 6, 3);
    Tensor a = dict.reduced();  // handle copies share the node
    Tensor b = dict.reduced();
    CHECK(a.same_storage(b));  // cached object, not a recomputation

    dict.set_full(Tensor::randn({64, 8}, rng));
    Tensor c = dict.reduced();
    CHECK(!c.same_storage(a));

    CHECK_THROWS_AS(VocabDictionary::reduce_dictionary(d_full, 64), ParamError);
    CHECK_THROWS_AS(VocabDictionary(d_full, 60, 3), ParamError);  // d > |A|/4

    // Rank-1 dictionary: trailing components negligible.
    Tensor ones = Tensor::zeros({64, 8});
    Rng r2(5);
    std::vector<real_t> dir(8);
    for (auto& v : dir) v = static_cast<real_t>(r2.normal());
    for (int i = 0; i < 64; ++i) {
        const real_t s = static_cast<real_t>(r2.normal());
        for (int j = 0; j < 8; ++j) ones.ptr()[i * 8 + j] = s * dir[static_cast<size_t>(j)];
    }
    Tensor red = VocabDictionary::reduce_dictionary(ones, 4);
    for (int r = 1; r < 4; ++r) {
        double n = 0;
        for (int j = 0; j < 8; ++j) n += red.ptr()[r * 8 + j] * red.ptr()[r * 8 + j];
        CHECK(std::sqrt(n) < 1e-8);
    }
}

TEST_CASE("cross_modal_attend one-key case and convexity") {
    Fixture fx;
    Rng rng(41);
    Tensor y_time = Tensor::randn({16, 4}, rng);

    // d = 1: every output column equals the single V row regardless of Q.
    Tensor d1 = Tensor::randn({1, 16}, rng);
    Tensor out1 = cross_modal_attend(y_time, d1, fx.p);
    Tensor v_row = matmul(d1, fx.p.w_v);  // [1 x 16]
    for (int r = 0; r < 16; ++r)
        for (int c = 0; c < 4; ++c)
            CHECK(out1.ptr()[r * 4 + c] == doctest::Approx(v_row.ptr()[r]).epsilon(1e-9));

    // Convexity: outputs bounded by per-dimension extremes of V rows.
    Tensor dh = Tensor::randn({6, 16}, rng);
    Tensor v = matmul(dh, fx.p.w_v);  // [6 x 16]
    Tensor out = cross_modal_attend(y_time, dh, fx.p);
    for (int r = 0; r < 16; ++r) {
        real_t vmin = v.ptr()[r], vmax = v.ptr()[r];
        for (int i = 0; i < 6; ++i) {
            vmin = std::min(vmin, v.ptr()[i * 16 + r]);
            vmax = std::max(vmax, v.ptr()[i * 16 + r]);
        }
        for (int c = 0; c < 4; ++c) {
            CHECK(out.ptr()[r * 4 + c] >= vmin - real_t(1e-6));
            CHECK(out.ptr()[r * 4 + c] <= vmax + real_t(1e-6));
        }
    }
}

TEST_CASE("cross_modal_attend matches a dense loop oracle") {
    // T=2, d=3, D=4 hand-rolled attention.
    ParamRegistry reg;
    AlignParams p;
    Rng rng(43);
    p.init(reg, "a", 8, 4, 2, 3, 2, 1, rng);
    Tensor y_time = Tensor::randn({4, 2}, rng);
    Tensor d_hat = Tensor::randn({3, 4}, rng);
    Tensor out = cross_modal_attend(y_time, d_hat, p);

    const int t = 2, d = 3, dim = 4;
    auto mm = [&](const Tensor& a, const Tensor& b, int m, int k, int n) {
        std::vector<double> r(static_cast<size_t>(m) * n, 0);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                for (int kk = 0; kk < k; ++kk)
                    r[static_cast<size_t>(i) * n + j] += static_cast<double>(a.ptr()[i * k + kk]) * b.ptr()[kk * n + j];
        return r;
    };
    // Q = y_time^T W_Q, K = d_hat W_K, V = d_hat W_V
    Tensor yt = transpose(y_time);
    const auto q = mm(yt, p.w_q, t, dim, dim);
    const auto k = mm(d_hat, p.w_k, d, dim, dim);
    const auto v = mm(d_hat, p.w_v, d, dim, dim);
    for (int i = 0; i < t; ++i) {
        std::vector<double> logits(static_cast<size_t>(d), 0);
        for (int j = 0; j < d; ++j)
            for (int kk = 0; kk < dim; ++kk)
                logits[static_cast<size_t>(j)] += q[static_cast<size_t>(i) * dim + kk] * k[static_cast<size_t>(j) * dim + kk];
        double mx = logits[0];
        for (double l : logits) mx = std::max(mx, l / std::sqrt(4.0));
        std::vector<double> w(static_cast<size_t>(d));
        double s = 0;
        for (int j = 0; j < d; ++j) {
            w[static_cast<size_t>(j)] = std::exp(logits[static_cast<size_t>(j)] / std::sqrt(4.0) - mx);
            s += w[static_cast<size_t>(j)];
        }
        for (int j = 0; j < d; ++j) w[static_cast<size_t>(j)] /= s;
        for (int c = 0; c < dim; ++c) {
            double expect = 0;
            for (int j = 0; j < d; ++j) expect += w[static_cast<size_t>(j)] * v[static_cast<size_t>(j) * dim + c];
            CHECK(out.ptr()[c * t + i] == doctest::Approx(expect).epsilon(1e-6));
        }
    }
}

TEST_CASE("attention rows unchanged by a per-row constant logit shift") {
    // softmax shift invariance along a row.
    Rng rng(47);
    Tensor logits = Tensor::randn({3, 5}, rng);
    Tensor shifted = add_scalar(logits, real_t(7.25));
    Tensor a = softmax_last(logits);
    Tensor b = softmax_last(shifted);
    for (std::int64_t i = 0; i < a.numel(); ++i)
        CHECK(a.ptr()[i] == doctest::Approx(b.ptr()[i]).epsilon(1e-9));
}

TEST_CASE("gated_fuse saturation and equal-input identity") {
    Fixture fx;
    Rng rng(53);
    Tensor yc = Tensor::randn({16, 3}, rng);
    Tensor yt = Tensor::randn({16, 3}, rng);

    Tensor big_gate = Tensor::full({32, 16}, real_t(50));   // saturates g -> 1 for positive sum
    // Saturation checked with an explicit gate matrix driving g to 1:
    // replace the learned gate by a constant-positive one via a direct call.
    Tensor out_sat = gated_fuse(yc, yt, Tensor::zeros({32, 16}));
    // zero gate -> g = 0.5 everywhere: midpoint of the two inputs
    for (std::int64_t i = 0; i < out_sat.numel(); ++i)
        CHECK(out_sat.ptr()[i] ==
              doctest::Approx(0.5 * (yc.ptr()[i] + yt.ptr()[i])).epsilon(1e-9));

    // Equal inputs: output equals them regardless of the gate.
    Tensor out_eq = gated_fuse(yc, yc, fx.p.w_gate);
    for (std::int64_t i = 0; i < out_eq.numel(); ++i) CHECK(out_eq.ptr()[i] == yc.ptr()[i]);
    (void)big_gate;
}

TEST_CASE("gate saturates toward each input") {
    // Drive g to ~1 (picks y_cross) and ~0 (picks y_time) by building inputs
    // with known sign structure: all-ones concatenation times +-large gate.
    Tensor yc = Tensor::full({4, 2}, real_t(2));
    Tensor yt = Tensor::full({4, 2}, real_t(-1));
    Tensor w_pos = Tensor::full({8, 4}, real_t(50));
    Tensor w_neg = Tensor::full({8, 4}, real_t(-50));
    // cat column sums: 4*2 + 4*(-1) = 4 > 0, so +-50 saturates the sigmoid.
    Tensor toward_cross = gated_fuse(yc, yt, w_pos);
    Tensor toward_time = gated_fuse(yc, yt, w_neg);
    for (std::int64_t i = 0; i < toward_cross.numel(); ++i) {
        CHECK(toward_cross.ptr()[i] == doctest::Approx(2.0).epsilon(1e-9));
        CHECK(toward_time.ptr()[i] == doctest::Approx(-1.0).epsilon(1e-9));
    }
}

TEST_CASE("make_anchors identity case and gradient reachability") {
    ParamRegistry reg;
    AlignParams p;
    Rng rng(59);
    p.init(reg, "a", 8, 6, 2, 4, 3, 2, rng);
    Tensor d_hat = Tensor::randn({4, 6}, rng);

    // Square identity-initialized map reproduces the dictionary.
    AlignParams pid = p;
    ParamRegistry reg2;
    pid.anchor_w = reg2.add("aw", Tensor::zeros({4, 4}), true);
    pid.anchor_b = reg2.add("ab", Tensor::zeros({4}), true);
    for (int i = 0; i < 4; ++i) pid.anchor_w.ptr()[i * 4 + i] = real_t(1);
    Tensor same = make_anchors(d_hat, pid);
    for (std::int64_t i = 0; i < d_hat.numel(); ++i)
        CHECK(same.ptr()[i] == doctest::Approx(d_hat.ptr()[i]).epsilon(1e-9));

    Tensor anchors = make_anchors(d_hat, p);
    REQUIRE(anchors.shape() == Shape{3, 6});

    // Gradient flows into the anchor map through a loss touching the output.
    tape().clear();
    p.anchor_w.zero_grad();
    Tensor loss = sum_all(make_anchors(d_hat, p));
    tape().backward(loss);
    bool nonzero = false;
    for (const real_t g : p.anchor_w.grad())
        if (g != 0) nonzero = true;
    CHECK(nonzero);
    tape().clear();
}

TEST_CASE("retrieve_prompts exact match, full sort, oracle") {
    Tensor anchors = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor y_text = Tensor::from_data({2, 1}, {1, 0});  // pooled = [1, 0]
    PromptSelection sel = retrieve_prompts(y_text, anchors, 1);
    CHECK(sel.indices == std::vector<int>{0});
    CHECK(sel.scores[0] == doctest::Approx(1.0));

    // K = m returns all anchors sorted by score; matches a full-sort oracle.
    Rng rng(61);
    for (int rep = 0; rep < 20; ++rep) {
        Tensor a = Tensor::randn({7, 5}, rng);
        Tensor y = Tensor::randn({5, 3}, rng);
        PromptSelection s = retrieve_prompts(y, a, 7);
        // Oracle: brute-force cosine + stable full sort.
        std::vector<double> pooled(5, 0);
        for (int r = 0; r < 5; ++r) {
            for (int c = 0; c < 3; ++c) pooled[static_cast<size_t>(r)] += y.ptr()[r * 3 + c];
            pooled[static_cast<size_t>(r)] /= 3;
        }
        double pn = 0;
        for (double v : pooled) pn += v * v;
        pn = std::sqrt(pn);
        std::vector<std::pair<double, int>> scored;
        for (int i = 0; i < 7; ++i) {
            double an = 0, num = 0;
            for (int j = 0; j < 5; ++j) {
                an += static_cast<double>(a.ptr()[i * 5 + j]) * a.ptr()[i * 5 + j];
                num += a.ptr()[i * 5 + j] * pooled[static_cast<size_t>(j)];
            }
            scored.push_back({num / (pn * std::sqrt(an)), i});
        }
        std::stable_sort(scored.begin(), scored.end(), [](auto& x, auto& y2) {
            if (x.first != y2.first) return x.first > y2.first;
            return x.second < y2.second;
        });
        for (int i = 0; i < 7; ++i) CHECK(s.indices[static_cast<size_t>(i)] == scored[static_cast<size_t>(i)].second);
    }
}

TEST_CASE("retrieval is scale invariant and guards zero norms") {
    Rng rng(67);
    Tensor anchors = Tensor::randn({5, 4}, rng);
    Tensor y = Tensor::randn({4, 3}, rng);
    PromptSelection s1 = retrieve_prompts(y, anchors, 3);
    PromptSelection s2 = retrieve_prompts(mul_scalar(y, real_t(2)), anchors, 3);
    CHECK(s1.indices == s2.indices);

    Tensor zero = Tensor::zeros({4, 3});
    PromptSelection sz = retrieve_prompts(zero, anchors, 2);
    for (double sc : sz.scores) CHECK(sc == 0.0);
}

TEST_CASE("prefix_prompts layout") {
    Rng rng(71);
    Tensor y = Tensor::randn({4, 3}, rng);
    Tensor prompts = Tensor::randn({2, 4}, rng);
    Tensor z = prefix_prompts(prompts, y);
    REQUIRE(z.shape() == Shape{4, 5});
    for (int r = 0; r < 4; ++r) {
        for (int c = 0; c < 2; ++c) CHECK(z.ptr()[r * 5 + c] == prompts.ptr()[c * 4 + r]);
        for (int c = 0; c < 3; ++c) CHECK(z.ptr()[r * 5 + 2 + c] == y.ptr()[r * 3 + c]);
    }
    // K = 0 leaves the sequence unchanged.
    Tensor z0 = prefix_prompts(Tensor(), y);
    CHECK(z0.node() == y.node());
}

TEST_CASE("alignment_loss identities") {
    Tensor y = Tensor::from_data({2, 2}, {1, 1, 0, 0});  // pooled = [1, 0]
    Tensor same = Tensor::from_data({1, 2}, {2, 0});     // parallel to pooled
    CHECK(alignment_loss(y, same).item() == doctest::Approx(1.0).epsilon(1e-9));
    Tensor ortho = Tensor::from_data({1, 2}, {0, 3});
    CHECK(alignment_loss(y, ortho).item() == doctest::Approx(0.0).epsilon(1e-9));
    Tensor scaled = mul_scalar(y, real_t(3));
    Tensor both = Tensor::from_data({2, 2}, {2, 0, 0, 3});
    CHECK(alignment_loss(y, both).item() == doctest::Approx(alignment_loss(scaled, both).item()).epsilon(1e-9));
}

TEST_CASE("end-to-end alignment block gradient on a tiny config") {
    // D=8, T=4, d=6, m=3, K=2 against finite differences.
    ParamRegistry reg;
    AlignParams p;
    Rng rng(73);
    p.init(reg, "a", 6, 8, 2, 6, 3, 2, rng);
    Tensor d_full = Tensor::randn({32, 8}, rng);
    VocabDictionary dict(d_full, 6, 3);
    Tensor x = Tensor::randn({6, 4}, rng);
    Tensor probe = Tensor::randn({8, 6}, rng);

    std::vector<Tensor> leaves = {x};
    for (auto& [name, t] : reg.items()) leaves.push_back(t);

    auto f = [&]() {
        Tensor y_hat = embed_csi(x, p);
        Tensor y_time = temporal_mhsa(y_hat, p);
        Tensor y_cross = cross_modal_attend(y_time, dict.reduced(), p);
        Tensor y_text = gated_fuse(y_cross, y_time, p.w_gate);
        Tensor anchors = make_anchors(dict.reduced(), p);
        PromptSelection sel = retrieve_prompts(y_text, anchors, 2);
        Tensor z = prefix_prompts(sel.prompts, y_text);
        Tensor score = alignment_loss(y_text, sel.prompts);
        return add(sum_all(mul(z, probe)), score);
    };
    CHECK(gradcheck(f, leaves) < 1e-3);
}
