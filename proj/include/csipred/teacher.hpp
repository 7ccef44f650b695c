#pragma once

#include "csipred/align.hpp"
#include "csipred/backbone.hpp"
#include "csipred/preprocess.hpp"

namespace csipred {

struct TeacherConfig {
    int subcarriers = 16;  // F
    int t_history = 16;    // T
    int patch_size = 4;
    int cssa_dim = 8;
    int dict_d = 64;       // reduced dictionary size
    int anchors_m = 32;    // semantic anchors
    int prompts_k = 4;     // retrieved prompts
    int align_heads = 8;
    BackboneConfig backbone;
    bool use_cssa = true;            // channel-feature modulation stage
    bool temporal_attention = true;  // temporal MHSA stage
    bool cross_modal = true;         // ablation switch: cross-attention + gated fusion
    bool prompts = true;             // ablation switch: semantic prompt prefix

    void validate() const {
        backbone.validate();
        if (prompts_k < 1 || prompts_k > anchors_m)
            throw ParamError("teacher: prompt count must be in [1, m]");
        if (anchors_m >= dict_d) throw ParamError("teacher: anchors m must be < reduced size d");
        if (patch_size < 1) throw ParamError("teacher: patch size must be >= 1");
    }
};

// Full prediction pipeline: CSSA preprocessing, alignment block, prompt
// retrieval, causal backbone, final-position projection.
class TeacherModel {
public:
    TeacherModel(const TeacherConfig& cfg, std::uint64_t init_seed);

    struct Forward {
        Tensor preds_raw;    // [B x 2F]
        Tensor align_score;  // mean cosine between pooled features and prompts
        std::vector<LayerTrace> traces;
    };

    Forward forward_batch(const std::vector<const cplx*>& histories, bool train_mode, bool trace);
    Tensor forward_one(const cplx* history, bool trace, std::vector<LayerTrace>* traces);

    // Time-pooled aligned features of one history (eval mode, no recording).
    std::vector<double> pooled_features(const cplx* history);
    // Current semantic anchors (eval mode values).
    std::vector<double> anchor_values();

    // Re-derive the reduced dictionary from the current token embeddings.
    // Must be called after loading pretrained backbone weights.
    void refresh_dictionary() { dict_.set_full(backbone_.token_embeddings()); }

    ParamRegistry& registry() { return registry_; }
    const ParamRegistry& registry() const { return registry_; }
    const TeacherConfig& config() const { return cfg_; }
    Normalizer& normalizer() { return norm_; }
    const TransformerBackbone& backbone() const { return backbone_; }
    VocabDictionary& dictionary() { return dict_; }
    const AlignParams& align_params() const { return align_; }

private:
    Tensor row_to_ytext(const Tensor& normed, const Tensor& k_dict, const Tensor& v_dict);

    TeacherConfig cfg_;
    ParamRegistry registry_;
    CssaParams cssa_;
    Normalizer norm_;
    AlignParams align_;
    TransformerBackbone backbone_;
    VocabDictionary dict_;
    Tensor proj_w, proj_b;
};

}  // namespace csipred
