// Small dense helpers outside the autodiff tape: orthogonal sampling for
// initialization and Gram-Schmidt bases for the probes.

#pragma once

#include <vector>

#include "clozelab/rng.hpp"
#include "clozelab/tensor.hpp"

namespace clozelab {

// Orthonormalize the rows of `rows` in place (modified Gram-Schmidt, two
// passes). Rows below `tol` in norm after projection are dropped.
inline std::vector<std::vector<double>> orthonormal_rows(std::vector<std::vector<double>> rows,
                                                         double tol = 1e-10) {
    std::vector<std::vector<double>> basis;
    for (auto& r : rows) {
        for (int pass = 0; pass < 2; ++pass)
            for (const auto& b : basis) {
                double proj = dot(r, b);
                for (std::size_t i = 0; i < r.size(); ++i) r[i] -= proj * b[i];
            }
        double nrm = l2_norm(r);
        if (nrm <= tol) continue;
        for (double& v : r) v /= nrm;
        basis.push_back(std::move(r));
    }
    return basis;
}

// Random matrix with orthonormal columns if rows >= cols, orthonormal rows
// otherwise (QR of a seeded Gaussian).
inline TensorValue random_orthogonal(int rows, int cols, Rng& rng) {
    const bool tall = rows >= cols;
    const int outer = tall ? cols : rows; // number of orthonormal vectors
    const int inner = tall ? rows : cols; // their dimension
    std::vector<std::vector<double>> vecs(outer, std::vector<double>(inner));
    for (auto& v : vecs)
        for (double& x : v) x = rng.gaussian();
    auto basis = orthonormal_rows(std::move(vecs));
    while (static_cast<int>(basis.size()) < outer) {
        // rank deficiency is vanishingly rare for Gaussian draws; refill
        std::vector<double> v(inner);
        for (double& x : v) x = rng.gaussian();
        auto extended = basis;
        extended.push_back(std::move(v));
        basis = orthonormal_rows(std::move(extended));
    }
    TensorValue out = TensorValue::zeros({rows, cols});
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j)
            out.at(i, j) = tall ? basis[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)]
                                : basis[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    return out;
}

} // namespace clozelab
