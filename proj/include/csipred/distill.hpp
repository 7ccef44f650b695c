#pragma once

#include <array>

#include "csipred/backbone.hpp"

namespace csipred {

// Attention-relation transfer configuration. alpha[x][y] in {0,1} selects
// which of the nine Q/K/V pairings enter the loss; the default transfers the
// diagonal (Q-Q, K-K, V-V). window > 0 restricts relations to that many
// trailing token positions so teacher and student matrices share shape even
// when their prompt lengths differ.
struct RelationConfig {
    int relation_heads = 8;
    std::array<std::array<int, 3>, 3> alpha = {{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
    int window = 0;  // 0 = use all positions

    void validate() const {
        if (relation_heads < 1) throw ParamError("relations: head count must be >= 1");
        for (const auto& row : alpha)
            for (int v : row)
                if (v != 0 && v != 1) throw ParamError("relations: alpha entries must be 0 or 1");
    }
};

// Split [n x D] (or [B x n x D]) into relation heads of contiguous column
// blocks; concatenating the heads restores the input.
std::vector<Tensor> resplit(const Tensor& a, int relation_heads);

// Per relation head a: softmax(head_a(A_x) head_a(A_y)^T / sqrt(D/A_r)).
// No causal mask is applied. Accepts [n x D] or batched [B x n x D].
std::vector<Tensor> relations(const Tensor& a_x, const Tensor& a_y, int relation_heads);

// KL(teacher || student) averaged over rows and relation heads, summed over
// the selected (x,y) pairs. Zero iff the matched relations are identical.
Tensor kd_loss(const LayerTrace& teacher, const LayerTrace& student, const RelationConfig& cfg);

}  // namespace csipred
