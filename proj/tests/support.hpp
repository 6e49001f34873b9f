#pragma once

#include <random>
#include <vector>

#include "bgformer/tensor.hpp"

namespace testsupport {

using bgformer::Tensor2;

inline Tensor2 random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double lo = -1.0,
                             double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor2 a(r, c);
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = u(rng);
    return a;
}

// Triple-loop product in long double.
inline Tensor2 naive_matmul(const Tensor2& a, const Tensor2& b) {
    Tensor2 out(a.rows(), b.cols());
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        for (Eigen::Index j = 0; j < b.cols(); ++j) {
            long double s = 0;
            for (Eigen::Index k = 0; k < a.cols(); ++k) s += static_cast<long double>(a(i, k)) * b(k, j);
            out(i, j) = static_cast<double>(s);
        }
    }
    return out;
}

inline Tensor2 naive_softmax(const Tensor2& s) {
    Tensor2 out(s.rows(), s.cols());
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
        long double total = 0;
        for (Eigen::Index j = 0; j < s.cols(); ++j) total += std::exp(static_cast<long double>(s(i, j)));
        for (Eigen::Index j = 0; j < s.cols(); ++j) {
            out(i, j) = static_cast<double>(std::exp(static_cast<long double>(s(i, j))) / total);
        }
    }
    return out;
}

inline double max_abs_diff(const Tensor2& a, const Tensor2& b) { return (a - b).cwiseAbs().maxCoeff(); }

}  // namespace testsupport
