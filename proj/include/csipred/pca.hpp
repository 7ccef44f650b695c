#pragma once

#include "csipred/tensor.hpp"

namespace csipred {

// Symmetric eigendecomposition by cyclic Jacobi rotations, in double
// regardless of the build scalar. `a` is n x n row-major and is destroyed.
// Eigenvalues come back sorted descending; eigvecs holds the matching
// eigenvectors as rows.
void jacobi_eigh(std::vector<double> a, int n, std::vector<double>& eigvals,
                 std::vector<double>& eigvecs);

// Top-d principal directions of the rows of m [v x D], scaled by the
// singular values of the column-centered matrix. Output is [d x D]; each
// direction's first nonzero coordinate is made positive so results are
// deterministic.
Tensor pca_reduce(const Tensor& m, int d);

}  // namespace csipred
