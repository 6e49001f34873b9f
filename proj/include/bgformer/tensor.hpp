#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace bgformer {

/// Dense row-major matrix of 64-bit reals. Carrier for every model matrix.
using Tensor2 = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using IndexVector = std::vector<std::int64_t>;

enum class ErrorKind {
    ParseError,
    NegativeCount,
    EmptyMatrix,
    InsufficientGenes,
    ZeroLibrary,
    ShapeMismatch,
    NonFinite,
    ZeroVector,
    LabelOutOfRange,
    DegenerateCluster,
    InsufficientCells,
    ConstructionError,
    InvalidArgument,
    IoError,
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

inline void require_shape(bool ok, const std::string& what) {
    if (!ok) throw Error(ErrorKind::ShapeMismatch, what);
}

std::string shape_str(const Tensor2& t);

bool all_finite(const Tensor2& t);

// -----------------------------------------------------------------------------
// Operation counting
//
// Kernels add their exact floating-point operation counts here. Counts are
// integer functions of the operand shapes only, so they are identical on every
// platform. The counter is thread-local; parallel lanes count separately.
// -----------------------------------------------------------------------------

struct FlopCounter {
    std::uint64_t flops = 0;
};

FlopCounter& flop_counter();

class ScopedFlopCount {
public:
    ScopedFlopCount() : start_(flop_counter().flops) {}
    std::uint64_t elapsed() const { return flop_counter().flops - start_; }

private:
    std::uint64_t start_;
};

/// A * B with shape check and 2*m*k*n flops counted.
Tensor2 matmul(const Tensor2& a, const Tensor2& b);
/// A * B^T.
Tensor2 matmul_nt(const Tensor2& a, const Tensor2& b);
/// A^T * B.
Tensor2 matmul_tn(const Tensor2& a, const Tensor2& b);

/// Gather rows of `src` in the order given by `rows`.
Tensor2 gather_rows(const Tensor2& src, const IndexVector& rows);

}  // namespace bgformer
