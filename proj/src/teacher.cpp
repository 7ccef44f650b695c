#include "csipred/teacher.hpp"

namespace csipred {

TeacherModel::TeacherModel(const TeacherConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(init_seed);
    const int f2 = 2 * cfg.subcarriers;
    const int d = cfg.backbone.hidden;
    cssa_.init(registry_, "teacher.cssa", cfg.cssa_dim, rng);
    align_.init(registry_, "teacher.align", f2, d, cfg.align_heads, cfg.dict_d, cfg.anchors_m,
                cfg.prompts_k, rng);
    backbone_.init(cfg.backbone, registry_, "teacher.backbone", rng);
    proj_w = registry_.add("teacher.proj_w", xavier_uniform(d, f2, rng), true);
    proj_b = registry_.add("teacher.proj_b", Tensor::zeros({f2}), true);
    dict_ = VocabDictionary(backbone_.token_embeddings(), cfg.dict_d, cfg.anchors_m);
}

TeacherModel::Forward TeacherModel::forward_batch(const std::vector<const cplx*>& histories,
                                                  bool train_mode, bool trace) {
    const int f = cfg_.subcarriers;
    const int t = cfg_.t_history;
    const int d = cfg_.backbone.hidden;

    std::vector<Tensor> reals;
    reals.reserve(histories.size());
    for (const cplx* h : histories) reals.push_back(to_real(h, f, t));
    const NormStats stats = train_mode ? norm_.observe(reals) : norm_.frozen();

    // Dictionary projections and anchors are shared across the batch.
    Tensor k_dict, v_dict, anchors;
    if (cfg_.cross_modal || cfg_.prompts) {
        const Tensor& d_hat = dict_.reduced();
        if (cfg_.cross_modal) {
            k_dict = matmul(d_hat, align_.w_k);
            v_dict = matmul(d_hat, align_.w_v);
        }
        if (cfg_.prompts) anchors = make_anchors(d_hat, align_);
    }

    std::vector<Tensor> seqs;
    seqs.reserve(histories.size());
    Tensor align_sum;
    for (const auto& r : reals) {
        Tensor y_text = row_to_ytext(apply_norm(r, stats), k_dict, v_dict);
        Tensor z = y_text;
        if (cfg_.prompts) {
            PromptSelection sel = retrieve_prompts(y_text, anchors, cfg_.prompts_k);
            z = prefix_prompts(sel.prompts, y_text);
            Tensor score = alignment_loss(y_text, sel.prompts);
            align_sum = align_sum.defined() ? add(align_sum, score) : score;
        }
        seqs.push_back(transpose(z));  // [n x D]
    }

    Forward out;
    Tensor stacked = stack_rows(seqs);
    Tensor h = backbone_.forward(stacked, trace, &out.traces);
    const int n = h.dim(1);
    Tensor last = reshape(slice(h, 1, n - 1, 1), {static_cast<int>(histories.size()), d});
    Tensor preds_norm = add_bias(matmul(last, proj_w), proj_b);
    out.preds_raw = invert_norm(preds_norm, stats);
    out.align_score = cfg_.prompts
                          ? mul_scalar(align_sum, static_cast<real_t>(1.0 / histories.size()))
                          : Tensor::scalar(0);
    return out;
}

Tensor TeacherModel::forward_one(const cplx* history, bool trace, std::vector<LayerTrace>* traces) {
    Forward fw = forward_batch({history}, false, trace);
    if (traces) *traces = fw.traces;
    return reshape(fw.preds_raw, {2 * cfg_.subcarriers});
}

Tensor TeacherModel::row_to_ytext(const Tensor& normed, const Tensor& k_dict, const Tensor& v_dict) {
    Tensor x = normed;
    if (cfg_.use_cssa) x = cssa(patch(x, cfg_.patch_size), cssa_);
    Tensor y_hat = embed_csi(x, align_);
    Tensor y_time = cfg_.temporal_attention ? temporal_mhsa(y_hat, align_) : y_hat;
    if (!cfg_.cross_modal) return y_time;
    Tensor y_cross = cross_attend_with_kv(y_time, align_.w_q, k_dict, v_dict, cfg_.backbone.hidden);
    return gated_fuse(y_cross, y_time, align_.w_gate);
}

std::vector<double> TeacherModel::pooled_features(const cplx* history) {
    NoGradGuard ng;
    Tensor r = to_real(history, cfg_.subcarriers, cfg_.t_history);
    Tensor k_dict, v_dict;
    if (cfg_.cross_modal) {
        const Tensor& d_hat = dict_.reduced();
        k_dict = matmul(d_hat, align_.w_k);
        v_dict = matmul(d_hat, align_.w_v);
    }
    Tensor y_text = row_to_ytext(apply_norm(r, norm_.frozen()), k_dict, v_dict);
    Tensor pooled = mean_last(y_text);
    return std::vector<double>(pooled.data().begin(), pooled.data().end());
}

std::vector<double> TeacherModel::anchor_values() {
    NoGradGuard ng;
    Tensor anchors = make_anchors(dict_.reduced(), align_);
    return std::vector<double>(anchors.data().begin(), anchors.data().end());
}

}  // namespace csipred
