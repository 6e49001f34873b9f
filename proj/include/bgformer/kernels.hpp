#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "bgformer/tensor.hpp"

// Differentiable primitives. Every forward kernel has a matching backward
// that maps the upstream gradient onto its inputs; composite model code
// chains these by hand.
namespace bgformer::kernels {

// out[i,:] = x[i,:] * w + bias
Tensor2 affine(const Tensor2& x, const Tensor2& w, const Tensor2& bias);

struct AffineGrads {
    Tensor2 dx;
    Tensor2 dw;
    Tensor2 dbias;
};

AffineGrads affine_backward(const Tensor2& x, const Tensor2& w, const Tensor2& dout,
                            bool want_dx = true);

/// Row-wise softmax with per-row max subtraction.
Tensor2 row_softmax(const Tensor2& s);

/// Gradient w.r.t. the scores given the softmax output `y` and upstream `dy`.
Tensor2 row_softmax_backward(const Tensor2& y, const Tensor2& dy);

enum class Elementwise { Sigmoid, Softplus, Exp, Log1p };

double sigmoid(double x);
/// log(1 + e^x), returning x itself once x > 30.
double softplus(double x);

Tensor2 elementwise(Elementwise kind, const Tensor2& x);

/// `y` is the forward output for `x`.
Tensor2 elementwise_backward(Elementwise kind, const Tensor2& x, const Tensor2& y,
                             const Tensor2& dy);

/// Column-wise concatenation in argument order.
Tensor2 concat_cols(const std::vector<Tensor2>& parts);

/// Squared L2 norm of each row.
Vector row_sq_norms(const Tensor2& x);

}  // namespace bgformer::kernels

namespace bgformer {

struct Param {
    std::string name;
    Tensor2 value;
    Tensor2 grad;
};

/// Named learnable tensors, each with a gradient buffer of identical shape.
class ParamStore {
public:
    explicit ParamStore(std::uint64_t seed = 0) : seed_(seed) {}

    std::size_t add(std::string name, Tensor2 value);

    /// Uniform(-sqrt(6/(a+b)), +sqrt(6/(a+b))) for an a x b matrix.
    std::size_t add_glorot(std::string name, Eigen::Index rows, Eigen::Index cols,
                           std::mt19937_64& rng);
    std::size_t add_zeros(std::string name, Eigen::Index rows, Eigen::Index cols);

    Param& operator[](std::size_t i) { return params_[i]; }
    const Param& operator[](std::size_t i) const { return params_[i]; }

    /// Throws InvalidArgument when absent.
    std::size_t index_of(std::string_view name) const;
    bool contains(std::string_view name) const;

    std::size_t size() const { return params_.size(); }
    std::size_t num_scalars() const;
    std::uint64_t seed() const { return seed_; }

    void zero_grad();

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

private:
    std::vector<Param> params_;
    std::uint64_t seed_;
};

/// Scalar objective over a parameter store. When `accumulate_grad` is set the
/// function must add d(value)/d(param) into each Param::grad.
using Objective = std::function<double(ParamStore&, bool accumulate_grad)>;

/// Max over all parameter entries of |g_ad - g_fd| / max(1, |g_ad|, |g_fd|),
/// with g_fd the central difference at step `h`.
double grad_check(const Objective& f, ParamStore& params, double h = 1e-6);

// Checkpoint container: "BGF1", then per parameter
//   u32 name_len, name bytes, u64 rows, u64 cols, rows*cols f64 (little-endian).
void save_checkpoint(const std::string& path, const ParamStore& params);
ParamStore load_checkpoint(const std::string& path);

}  // namespace bgformer
