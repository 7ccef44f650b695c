#include "csipred/pca.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace csipred {

void jacobi_eigh(std::vector<double> a, int n, std::vector<double>& eigvals,
                 std::vector<double>& eigvecs) {
    std::vector<double> vmat(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i) vmat[static_cast<size_t>(i) * n + i] = 1.0;

    auto at = [&](int i, int j) -> double& { return a[static_cast<size_t>(i) * n + j]; };
    auto vt = [&](int i, int j) -> double& { return vmat[static_cast<size_t>(i) * n + j]; };

    const int max_sweeps = 64;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j) off += at(i, j) * at(i, j);
        if (off < 1e-26) break;
        for (int p = 0; p < n - 1; ++p) {
            for (int q = p + 1; q < n; ++q) {
                const double apq = at(p, q);
                if (std::abs(apq) < 1e-300) continue;
                const double app = at(p, p), aqq = at(q, q);
                const double tau = (aqq - app) / (2.0 * apq);
                const double t = (tau >= 0 ? 1.0 : -1.0) / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = t * c;
                for (int k = 0; k < n; ++k) {
                    const double akp = at(k, p), akq = at(k, q);
                    at(k, p) = c * akp - s * akq;
                    at(k, q) = s * akp + c * akq;
                }
                for (int k = 0; k < n; ++k) {
                    const double apk = at(p, k), aqk = at(q, k);
                    at(p, k) = c * apk - s * aqk;
                    at(q, k) = s * apk + c * aqk;
                }
                for (int k = 0; k < n; ++k) {
                    const double vkp = vt(k, p), vkq = vt(k, q);
                    vt(k, p) = c * vkp - s * vkq;
                    vt(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }

    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> diag(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) diag[static_cast<size_t>(i)] = at(i, i);
    std::stable_sort(order.begin(), order.end(),
                     [&](int x, int y) { return diag[static_cast<size_t>(x)] > diag[static_cast<size_t>(y)]; });

    eigvals.assign(static_cast<size_t>(n), 0.0);
    eigvecs.assign(static_cast<size_t>(n) * n, 0.0);
    for (int r = 0; r < n; ++r) {
        const int src = order[static_cast<size_t>(r)];
        eigvals[static_cast<size_t>(r)] = diag[static_cast<size_t>(src)];
        for (int k = 0; k < n; ++k) eigvecs[static_cast<size_t>(r) * n + k] = vt(k, src);
    }
}

Tensor pca_reduce(const Tensor& m, int d) {
    if (m.rank() != 2) throw ShapeError("pca_reduce: expects rank-2 input");
    const int v = m.dim(0), dim = m.dim(1);
    if (d < 1 || d > std::min(v, dim))
        throw ParamError("pca_reduce: d=" + std::to_string(d) + " outside [1, min(" + std::to_string(v) +
                         "," + std::to_string(dim) + ")]");

    // Column-centered Gram matrix in double.
    std::vector<double> centered(static_cast<size_t>(v) * dim);
    for (int j = 0; j < dim; ++j) {
        double mu = 0.0;
        for (int i = 0; i < v; ++i) mu += static_cast<double>(m.ptr()[std::int64_t(i) * dim + j]);
        mu /= v;
        for (int i = 0; i < v; ++i)
            centered[static_cast<size_t>(i) * dim + j] =
                static_cast<double>(m.ptr()[std::int64_t(i) * dim + j]) - mu;
    }
    std::vector<double> cov(static_cast<size_t>(dim) * dim, 0.0);
    for (int i = 0; i < v; ++i)
        for (int a = 0; a < dim; ++a) {
            const double xa = centered[static_cast<size_t>(i) * dim + a];
            if (xa == 0.0) continue;
            for (int b = 0; b < dim; ++b)
                cov[static_cast<size_t>(a) * dim + b] += xa * centered[static_cast<size_t>(i) * dim + b];
        }

    std::vector<double> eigvals, eigvecs;
    jacobi_eigh(std::move(cov), dim, eigvals, eigvecs);

    // Eigenvalues at the numerical noise floor of the Gram matrix are exact
    // zeros of the underlying rank; without the floor, sqrt() would inflate
    // them to ~1e-8-scale ghost components.
    const double lam_floor = std::max(eigvals[0], 0.0) * dim * 1e-15;

    Tensor out = Tensor::zeros({d, dim});
    for (int r = 0; r < d; ++r) {
        double lambda = std::max(eigvals[static_cast<size_t>(r)], 0.0);
        if (lambda <= lam_floor) lambda = 0.0;
        const double sigma = std::sqrt(lambda);
        const double* u = eigvecs.data() + static_cast<size_t>(r) * dim;
        double sign = 1.0;
        for (int k = 0; k < dim; ++k) {
            if (std::abs(u[k]) > 1e-12) {
                sign = u[k] > 0 ? 1.0 : -1.0;
                break;
            }
        }
        for (int k = 0; k < dim; ++k)
            out.ptr()[std::int64_t(r) * dim + k] = static_cast<real_t>(sigma * sign * u[k]);
    }
    return out;
}

}  // namespace csipred
