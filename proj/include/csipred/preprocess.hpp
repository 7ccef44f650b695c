#pragma once

#include "csipred/channel.hpp"
#include "csipred/ops.hpp"
#include "csipred/optim.hpp"

namespace csipred {

// Complex [F x T] (row-major) to real [2F x T]: rows 0..F-1 hold real parts,
// rows F..2F-1 imaginary parts. Lossless; from_real inverts it.
Tensor to_real(const cplx* h, int f, int t);
std::vector<cplx> from_real(const Tensor& x);

struct NormStats {
    double mean = 0.0;
    double std = 1.0;
};

// Scalar batch normalization over the whole real-valued batch. Training mode
// computes per-batch stats and blends them into running stats (momentum
// 0.99); eval mode applies the stored running stats, which makes
// single-sample inference well-defined.
class Normalizer {
public:
    // Compute batch stats from the given tensors, update running stats, and
    // return the stats to apply for this step.
    NormStats observe(const std::vector<Tensor>& batch);
    NormStats frozen() const { return {running_mean_, running_std_}; }

    void load(double mean, double std) {
        running_mean_ = mean;
        running_std_ = std;
        initialized_ = true;
    }
    bool initialized() const { return initialized_; }

private:
    double running_mean_ = 0.0;
    double running_std_ = 1.0;
    bool initialized_ = false;
};

// (x - mu) / (sigma + 1e-8), stats treated as constants on the tape.
Tensor apply_norm(const Tensor& x, const NormStats& stats);
// y * (sigma + 1e-8) + mu: maps normalized-space predictions back to raw CSI.
Tensor invert_norm(const Tensor& y, const NormStats& stats);

// Non-overlapping temporal patches with zero-padding of the final patch.
struct PatchedTensor {
    Tensor values;  // [2F x N x T'], T' = ceil(T / N)
    int patch_size = 0;
    int t_orig = 0;
    int pad = 0;
};

PatchedTensor patch(const Tensor& x, int n);
Tensor unpatch(const PatchedTensor& p);  // back to [2F x T], dropping pad

// Channel-feature modulation: pool each of the 2F channels to a descriptor,
// run single-head self-attention across the 2F descriptors, squash to
// per-channel gains in (0,1) and rescale the channels.
struct CssaParams {
    Tensor lift_w, lift_b;        // scalar descriptor -> e-dim token
    Tensor wq, bq, wk, bk, wv, bv;  // [e x e] attention projections
    Tensor out_w, out_b;          // e-dim context -> scalar gain logit

    void init(ParamRegistry& reg, const std::string& prefix, int e, Rng& rng);
    int token_dim() const { return lift_w.dim(1); }
};

Tensor cssa(const PatchedTensor& y, const CssaParams& params);

}  // namespace csipred
