#pragma once

#include "csipred/ops.hpp"
#include "csipred/optim.hpp"
#include "csipred/pca.hpp"

namespace csipred {

// Token-embedding dictionary with its reduced form. The reduction is
// computed once and cached until the full dictionary changes.
class VocabDictionary {
public:
    VocabDictionary() = default;

    VocabDictionary(Tensor d_full, int d, int m) : d_(d), m_(m) { set_full(std::move(d_full)); }

    void set_full(Tensor d_full) {
        const int vocab = d_full.dim(0);
        if (d_ > vocab / 4)
            throw ParamError("dictionary: d=" + std::to_string(d_) + " must be <= |A|/4 = " +
                             std::to_string(vocab / 4));
        if (m_ >= d_) throw ParamError("dictionary: m must be < d");
        d_full_ = std::move(d_full);
        cached_ = Tensor();
    }

    const Tensor& full() const { return d_full_; }
    int reduced_size() const { return d_; }
    int anchor_count() const { return m_; }

    // PCA-reduced dictionary [d x D]; the same object is returned until the
    // full dictionary is replaced.
    const Tensor& reduced() const {
        if (!cached_.defined()) cached_ = reduce_dictionary(d_full_, d_);
        return cached_;
    }

    static Tensor reduce_dictionary(const Tensor& d_full, int d) {
        if (d >= d_full.dim(0))
            throw ParamError("reduce_dictionary: d=" + std::to_string(d) + " must be < |A|=" +
                             std::to_string(d_full.dim(0)));
        return pca_reduce(d_full, d);
    }

private:
    Tensor d_full_;
    int d_ = 0;
    int m_ = 0;
    mutable Tensor cached_;
};

// Parameters of the alignment block. W_Q/W_K/W_V follow the single-head
// cross-attention formulas (scale c = D); the gate concatenates the two
// operands along the feature axis, so W_gate is [2D x D].
struct AlignParams {
    Tensor embed_w, embed_b;                      // [2F -> D] per time step
    Tensor ln_g, ln_b;                            // pre-norm for the temporal MHSA
    Tensor mh_wq, mh_bq, mh_wk, mh_bk, mh_wv, mh_bv, mh_wo, mh_bo;
    int heads = 8;
    Tensor w_q, w_k, w_v;                         // cross attention, [D x D], no bias
    Tensor w_gate;                                // [2D x D]
    Tensor anchor_w, anchor_b;                    // [m x d] linear over the dictionary axis
    int prompt_count = 4;                         // K

    void init(ParamRegistry& reg, const std::string& prefix, int in_dim, int model_dim, int heads_,
              int dict_d, int anchors_m, int k, Rng& rng);
};

// Per-time-step linear embedding: [2F x T] -> [D x T]; no mixing across time.
Tensor embed_csi(const Tensor& y, const AlignParams& p);

// Pre-norm multi-head self-attention over the time axis with a residual
// connection. No positional encoding here; order information enters via the
// backbone's positional embeddings.
Tensor temporal_mhsa(const Tensor& y_hat, const AlignParams& p);

// Cross-modal attention: queries from the CSI sequence, keys/values from the
// reduced dictionary. Every output column is a convex combination of V rows.
Tensor cross_modal_attend(const Tensor& y_time, const Tensor& d_hat, const AlignParams& p);
// Same, with precomputed K = d_hat * W_K and V = d_hat * W_V (shared across
// a batch so the dictionary projections are done once per step).
Tensor cross_attend_with_kv(const Tensor& y_time, const Tensor& w_q, const Tensor& k,
                            const Tensor& v, int scale_dim);

// g = sigmoid(W_gate^T [y_cross ; y_time]); out = y_cross . g + y_time . (1-g).
Tensor gated_fuse(const Tensor& y_cross, const Tensor& y_time, const Tensor& w_gate);

// Learnable linear reduction of the dictionary to m semantic anchors.
Tensor make_anchors(const Tensor& d_hat, const AlignParams& p);

struct PromptSelection {
    Tensor prompts;             // [K x D], rows in descending-score order
    std::vector<int> indices;   // anchor indices
    std::vector<double> scores; // cosine scores
};

// Cosine retrieval of the top-K anchors against the time-pooled sequence.
// Ties break toward the lower anchor index; zero-norm vectors score 0.
PromptSelection retrieve_prompts(const Tensor& y_text, const Tensor& anchors, int k);

// Z = [prompts ; y_text]: prompts occupy positions 0..K-1, CSI tokens after.
Tensor prefix_prompts(const Tensor& prompts, const Tensor& y_text);

// Mean cosine similarity between the time-pooled sequence and each selected
// prompt; lies in [-1, 1] and is scale-invariant in y_text. Enters the
// teacher objective with a minus sign (it is maximized).
Tensor alignment_loss(const Tensor& y_text, const Tensor& prompts);

}  // namespace csipred
