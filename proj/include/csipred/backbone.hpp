#pragma once

#include "csipred/channel.hpp"
#include "csipred/ops.hpp"
#include "csipred/optim.hpp"
#include "csipred/preprocess.hpp"

namespace csipred {

struct LoraConfig {
    bool enabled = true;
    int rank = 8;
    double alpha = 16.0;
};

struct BackboneConfig {
    int layers = 6;
    int hidden = 128;
    int heads = 8;
    int ffn_mult = 4;
    int max_positions = 64;
    int vocab = 512;  // 0 disables the token-embedding table
    bool causal = true;
    LoraConfig lora;
    bool frozen_base = true;

    void validate() const {
        if (hidden % heads != 0)
            throw ParamError("backbone: hidden " + std::to_string(hidden) + " not divisible by " +
                             std::to_string(heads) + " heads");
        if (lora.enabled && lora.rank < 1) throw ParamError("backbone: LoRA rank must be >= 1");
        if (layers < 0 || hidden < 1 || max_positions < 1)
            throw ParamError("backbone: bad layer/hidden/position counts");
    }
};

// Per-layer Q/K/V activations [B x tokens x D], captured before head
// splitting when tracing is enabled.
struct LayerTrace {
    Tensor q, k, v;
};

// W_eff = W_base + (alpha/r) B A. With a frozen base only A and B receive
// gradients; B starts at zero so W_eff == W_base at step 0.
Tensor lora_apply(const Tensor& base, const Tensor& a, const Tensor& b, double alpha, int rank);

// Pre-norm causal decoder. Learned positional embeddings are added at the
// input; there is no final layer norm, so a zero-layer stack is exactly
// input + positions.
class TransformerBackbone {
public:
    struct Layer {
        Tensor ln1_g, ln1_b;
        Tensor wq, bq, wk, bk, wv, bv, wo, bo;
        Tensor lora_aq, lora_bq, lora_av, lora_bv;
        Tensor ln2_g, ln2_b;
        Tensor fc1, fb1, fc2, fb2;
    };

    void init(const BackboneConfig& cfg, ParamRegistry& reg, const std::string& prefix, Rng& rng);

    // z: [B x n x D] -> [B x n x D]. Fills traces when requested; tracing
    // never changes the hidden states.
    Tensor forward(const Tensor& z, bool trace, std::vector<LayerTrace>* traces) const;

    const BackboneConfig& config() const { return cfg_; }
    const Tensor& token_embeddings() const { return wte_; }
    const Tensor& position_embeddings() const { return wpe_; }
    const std::vector<Layer>& layers() const { return layers_; }

private:
    BackboneConfig cfg_;
    Tensor wte_, wpe_;
    std::vector<Layer> layers_;
};

// Final-position readout mapped to 2F outputs. The hidden matrix is
// [D x n] with n > k_prompts so at least one CSI token feeds the head.
Tensor project_out(const Tensor& hidden, int k_prompts, const Tensor& proj_w, const Tensor& proj_b);

struct PretrainConfig {
    int steps = 800;
    int batch = 8;
    int seq_len = 32;
    double lr = 1e-3;
    double zipf_s = 1.1;
    double bigram_prob = 0.35;  // chance the next token follows the planted bigram map
    std::uint64_t seed = 99;
};

// Next-token pretraining on synthetic Zipf streams with planted bigram
// structure. Returns the per-step cross-entropy curve; the learned token
// embeddings double as the alignment dictionary.
std::vector<double> surrogate_pretrain(TransformerBackbone& backbone, ParamRegistry& reg,
                                       const PretrainConfig& cfg);

struct StudentConfig {
    int layers = 3;
    int hidden = 128;
    int heads = 8;
    int prompt_len = 4;   // soft prompts
    int max_positions = 64;
    int ffn_mult = 4;
    int subcarriers = 16;  // F
    int t_history = 16;

    void validate() const {
        if (hidden % heads != 0) throw ParamError("student: hidden not divisible by heads");
        if (prompt_len < 0) throw ParamError("student: prompt length must be >= 0");
    }
};

// CSI-embedding + soft prompts + causal decoder + last-position projection.
class StudentModel {
public:
    explicit StudentModel(const StudentConfig& cfg, std::uint64_t init_seed);

    struct Forward {
        Tensor preds_raw;  // [B x 2F]
        std::vector<LayerTrace> traces;
    };

    // histories: per row a complex [F x T] matrix (row-major).
    Forward forward_batch(const std::vector<const cplx*>& histories, bool train_mode, bool trace);
    // Single-sequence wrapper matching the per-pair contract.
    Tensor forward_one(const cplx* history, bool trace, std::vector<LayerTrace>* traces);

    ParamRegistry& registry() { return registry_; }
    const ParamRegistry& registry() const { return registry_; }
    const StudentConfig& config() const { return cfg_; }
    Normalizer& normalizer() { return norm_; }
    const TransformerBackbone& backbone() const { return backbone_; }

private:
    StudentConfig cfg_;
    ParamRegistry registry_;
    TransformerBackbone backbone_;
    Tensor embed_w, embed_b;
    Tensor soft_prompts_;  // [S x D]
    Tensor proj_w, proj_b;
    Normalizer norm_;
};

}  // namespace csipred
