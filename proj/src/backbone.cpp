#include "csipred/backbone.hpp"

#include <cmath>

namespace csipred {

Tensor lora_apply(const Tensor& base, const Tensor& a, const Tensor& b, double alpha, int rank) {
    if (rank < 1 || rank > std::min(base.dim(0), base.dim(1)))
        throw ParamError("lora_apply: rank " + std::to_string(rank) + " out of range for " +
                         shape_str(base.shape()));
    if (b.dim(0) != base.dim(0) || a.dim(1) != base.dim(1) || b.dim(1) != rank || a.dim(0) != rank)
        throw ShapeError("lora_apply: A " + shape_str(a.shape()) + " / B " + shape_str(b.shape()) +
                         " incompatible with " + shape_str(base.shape()));
    return add(base, mul_scalar(matmul(b, a), static_cast<real_t>(alpha / rank)));
}

void TransformerBackbone::init(const BackboneConfig& cfg, ParamRegistry& reg,
                               const std::string& prefix, Rng& rng) {
    cfg.validate();
    cfg_ = cfg;
    const int d = cfg.hidden;
    const bool base_trainable = !cfg.frozen_base;
    if (cfg.vocab > 0)
        wte_ = reg.add(prefix + ".wte", Tensor::randn({cfg.vocab, d}, rng, 0.0, 0.02), base_trainable);
    wpe_ = reg.add(prefix + ".wpe", Tensor::randn({cfg.max_positions, d}, rng, 0.0, 0.02), base_trainable);
    layers_.clear();
    layers_.resize(static_cast<size_t>(cfg.layers));
    for (int l = 0; l < cfg.layers; ++l) {
        const std::string lp = prefix + ".h" + std::to_string(l);
        Layer& ly = layers_[static_cast<size_t>(l)];
        ly.ln1_g = reg.add(lp + ".ln1_g", Tensor::full({d}, 1), base_trainable);
        ly.ln1_b = reg.add(lp + ".ln1_b", Tensor::zeros({d}), base_trainable);
        ly.wq = reg.add(lp + ".wq", xavier_uniform(d, d, rng), base_trainable);
        ly.bq = reg.add(lp + ".bq", Tensor::zeros({d}), base_trainable);
        ly.wk = reg.add(lp + ".wk", xavier_uniform(d, d, rng), base_trainable);
        ly.bk = reg.add(lp + ".bk", Tensor::zeros({d}), base_trainable);
        ly.wv = reg.add(lp + ".wv", xavier_uniform(d, d, rng), base_trainable);
        ly.bv = reg.add(lp + ".bv", Tensor::zeros({d}), base_trainable);
        ly.wo = reg.add(lp + ".wo", xavier_uniform(d, d, rng), base_trainable);
        ly.bo = reg.add(lp + ".bo", Tensor::zeros({d}), base_trainable);
        if (cfg.lora.enabled) {
            ly.lora_aq = reg.add(lp + ".lora_aq", Tensor::randn({cfg.lora.rank, d}, rng, 0.0, 0.02), true);
            ly.lora_bq = reg.add(lp + ".lora_bq", Tensor::zeros({d, cfg.lora.rank}), true);
            ly.lora_av = reg.add(lp + ".lora_av", Tensor::randn({cfg.lora.rank, d}, rng, 0.0, 0.02), true);
            ly.lora_bv = reg.add(lp + ".lora_bv", Tensor::zeros({d, cfg.lora.rank}), true);
        }
        ly.ln2_g = reg.add(lp + ".ln2_g", Tensor::full({d}, 1), base_trainable);
        ly.ln2_b = reg.add(lp + ".ln2_b", Tensor::zeros({d}), base_trainable);
        ly.fc1 = reg.add(lp + ".fc1", xavier_uniform(d, cfg.ffn_mult * d, rng), base_trainable);
        ly.fb1 = reg.add(lp + ".fb1", Tensor::zeros({cfg.ffn_mult * d}), base_trainable);
        ly.fc2 = reg.add(lp + ".fc2", xavier_uniform(cfg.ffn_mult * d, d, rng), base_trainable);
        ly.fb2 = reg.add(lp + ".fb2", Tensor::zeros({d}), base_trainable);
    }
}

namespace {

// Additive causal mask: 0 at or below the diagonal, -1e9 above. Exp of the
// masked logits underflows to exactly zero after max subtraction, so masked
// positions contribute nothing at all.
Tensor causal_mask(int n) {
    Tensor m = Tensor::zeros({n, n});
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) m.ptr()[static_cast<std::int64_t>(i) * n + j] = real_t(-1e9);
    return m;
}

}  // namespace

Tensor TransformerBackbone::forward(const Tensor& z, bool trace,
                                    std::vector<LayerTrace>* traces) const {
    if (z.rank() != 3 || z.dim(2) != cfg_.hidden)
        throw ShapeError("backbone: expects [B x n x D], got " + shape_str(z.shape()));
    const int n = z.dim(1);
    if (n > cfg_.max_positions)
        throw ParamError("backbone: sequence length " + std::to_string(n) + " exceeds max positions " +
                         std::to_string(cfg_.max_positions));
    const int d = cfg_.hidden;
    const int heads = cfg_.heads;
    const int dh = d / heads;
    if (trace && traces) traces->clear();

    Tensor x = add_broadcast(z, slice(wpe_, 0, 0, n));
    Tensor mask = cfg_.causal ? causal_mask(n) : Tensor::zeros({n, n});
    const real_t scale = static_cast<real_t>(1.0 / std::sqrt(double(dh)));

    for (const Layer& ly : layers_) {
        Tensor h = layer_norm_last(x, ly.ln1_g, ly.ln1_b);
        Tensor wq_eff = ly.lora_aq.defined()
                            ? lora_apply(ly.wq, ly.lora_aq, ly.lora_bq, cfg_.lora.alpha, cfg_.lora.rank)
                            : ly.wq;
        Tensor wv_eff = ly.lora_av.defined()
                            ? lora_apply(ly.wv, ly.lora_av, ly.lora_bv, cfg_.lora.alpha, cfg_.lora.rank)
                            : ly.wv;
        Tensor q = add_bias(matmul(h, wq_eff), ly.bq);
        Tensor k = add_bias(matmul(h, ly.wk), ly.bk);
        Tensor v = add_bias(matmul(h, wv_eff), ly.bv);
        if (trace && traces) traces->push_back({q, k, v});

        std::vector<Tensor> ctx;
        ctx.reserve(static_cast<size_t>(heads));
        for (int i = 0; i < heads; ++i) {
            Tensor qi = slice(q, 2, i * dh, dh);
            Tensor ki = slice(k, 2, i * dh, dh);
            Tensor vi = slice(v, 2, i * dh, dh);
            Tensor att = softmax_last(add_broadcast(mul_scalar(bmm_nt(qi, ki), scale), mask));
            ctx.push_back(bmm(att, vi));
        }
        Tensor o = add_bias(matmul(concat(ctx, 2), ly.wo), ly.bo);
        x = add(x, o);

        Tensor h2 = layer_norm_last(x, ly.ln2_g, ly.ln2_b);
        Tensor f = add_bias(matmul(gelu(add_bias(matmul(h2, ly.fc1), ly.fb1)), ly.fc2), ly.fb2);
        x = add(x, f);
    }
    return x;
}

Tensor project_out(const Tensor& hidden, int k_prompts, const Tensor& proj_w, const Tensor& proj_b) {
    if (hidden.rank() != 2) throw ShapeError("project_out: expects [D x n]");
    const int n = hidden.dim(1);
    if (n <= k_prompts)
        throw ParamError("project_out: sequence length " + std::to_string(n) +
                         " must exceed prompt count " + std::to_string(k_prompts));
    Tensor last = reshape(slice(hidden, 1, n - 1, 1), {1, hidden.dim(0)});
    return reshape(add_bias(matmul(last, proj_w), proj_b), {proj_w.dim(1)});
}

std::vector<double> surrogate_pretrain(TransformerBackbone& backbone, ParamRegistry& reg,
                                       const PretrainConfig& cfg) {
    const BackboneConfig& bc = backbone.config();
    if (bc.vocab < 64) throw ParamError("surrogate_pretrain: vocab must be >= 64");
    if (cfg.seq_len + 1 > bc.max_positions)
        throw ParamError("surrogate_pretrain: sequence length exceeds max positions");
    Rng rng(cfg.seed);

    // Zipf sampling table and a planted bigram successor map.
    std::vector<double> cum(static_cast<size_t>(bc.vocab));
    double z = 0.0;
    for (int i = 0; i < bc.vocab; ++i) {
        z += 1.0 / std::pow(static_cast<double>(i + 1), cfg.zipf_s);
        cum[static_cast<size_t>(i)] = z;
    }
    std::vector<int> successor(static_cast<size_t>(bc.vocab));
    for (int i = 0; i < bc.vocab; ++i) successor[static_cast<size_t>(i)] = i;
    rng.shuffle(successor.begin(), successor.end());

    auto draw_zipf = [&]() {
        const double u = rng.uniform() * z;
        const auto it = std::lower_bound(cum.begin(), cum.end(), u);
        return static_cast<int>(it - cum.begin());
    };

    std::vector<Tensor> params = reg.trainable();
    AdamState opt;
    opt.lr = cfg.lr;
    std::vector<double> ce_log;
    ce_log.reserve(static_cast<size_t>(cfg.steps));

    for (int step = 0; step < cfg.steps; ++step) {
        // One batch of token streams: Zipf unigrams with bigram continuation.
        std::vector<std::vector<int>> streams(static_cast<size_t>(cfg.batch));
        for (auto& s : streams) {
            s.resize(static_cast<size_t>(cfg.seq_len + 1));
            s[0] = draw_zipf();
            for (int t = 1; t <= cfg.seq_len; ++t)
                s[static_cast<size_t>(t)] = rng.uniform() < cfg.bigram_prob
                                                ? successor[static_cast<size_t>(s[static_cast<size_t>(t - 1)])]
                                                : draw_zipf();
        }

        tape().clear();
        reg.zero_grads();
        std::vector<Tensor> embedded;
        std::vector<int> targets;
        embedded.reserve(streams.size());
        for (const auto& s : streams) {
            std::vector<int> input(s.begin(), s.end() - 1);
            embedded.push_back(gather_rows(backbone.token_embeddings(), input));
            targets.insert(targets.end(), s.begin() + 1, s.end());
        }
        Tensor x = stack_rows(embedded);  // [B x L x D]
        Tensor h = backbone.forward(x, false, nullptr);
        Tensor flat = reshape(h, {cfg.batch * cfg.seq_len, bc.hidden});
        Tensor logits = matmul(flat, transpose(backbone.token_embeddings()));  // weight tying
        Tensor loss = ce_with_logits(logits, targets);
        ce_log.push_back(loss.item());
        tape().backward(loss);
        adam_step(params, opt);
    }
    tape().clear();
    return ce_log;
}

StudentModel::StudentModel(const StudentConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(init_seed);
    BackboneConfig bc;
    bc.layers = cfg.layers;
    bc.hidden = cfg.hidden;
    bc.heads = cfg.heads;
    bc.ffn_mult = cfg.ffn_mult;
    bc.max_positions = cfg.max_positions;
    bc.vocab = 0;
    bc.causal = true;
    bc.lora.enabled = false;
    bc.frozen_base = false;
    const int f2 = 2 * cfg.subcarriers;
    embed_w = registry_.add("student.embed_w", xavier_uniform(f2, cfg.hidden, rng), true);
    embed_b = registry_.add("student.embed_b", Tensor::zeros({cfg.hidden}), true);
    soft_prompts_ = registry_.add("student.soft_prompts",
                                  Tensor::randn({cfg.prompt_len, cfg.hidden}, rng, 0.0, 0.02), true);
    backbone_.init(bc, registry_, "student.backbone", rng);
    proj_w = registry_.add("student.proj_w", xavier_uniform(cfg.hidden, f2, rng), true);
    proj_b = registry_.add("student.proj_b", Tensor::zeros({f2}), true);
}

StudentModel::Forward StudentModel::forward_batch(const std::vector<const cplx*>& histories,
                                                  bool train_mode, bool trace) {
    const int f = cfg_.subcarriers;
    const int t = cfg_.t_history;
    std::vector<Tensor> reals;
    reals.reserve(histories.size());
    for (const cplx* h : histories) reals.push_back(to_real(h, f, t));
    const NormStats stats = train_mode ? norm_.observe(reals) : norm_.frozen();

    std::vector<Tensor> seqs;
    seqs.reserve(histories.size());
    for (const auto& r : reals) {
        Tensor x = apply_norm(r, stats);                     // [2F x T]
        Tensor emb = add_bias(matmul(transpose(x), embed_w), embed_b);  // [T x D]
        Tensor with_prompts =
            cfg_.prompt_len > 0 ? concat({soft_prompts_, emb}, 0) : emb;  // [(S+T) x D]
        seqs.push_back(with_prompts);
    }
    Tensor z = stack_rows(seqs);
    Forward out;
    Tensor h = backbone_.forward(z, trace, &out.traces);
    const int n = h.dim(1);
    Tensor last = reshape(slice(h, 1, n - 1, 1), {static_cast<int>(histories.size()), cfg_.hidden});
    Tensor preds_norm = add_bias(matmul(last, proj_w), proj_b);
    out.preds_raw = invert_norm(preds_norm, stats);
    return out;
}

Tensor StudentModel::forward_one(const cplx* history, bool trace, std::vector<LayerTrace>* traces) {
    Forward fw = forward_batch({history}, false, trace);
    if (traces) *traces = fw.traces;
    return reshape(fw.preds_raw, {2 * cfg_.subcarriers});
}

}  // namespace csipred
