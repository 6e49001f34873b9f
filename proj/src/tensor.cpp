#include "bgformer/tensor.hpp"

#include <cmath>
#include <sstream>

namespace bgformer {

const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::ParseError: return "ParseError";
        case ErrorKind::NegativeCount: return "NegativeCount";
        case ErrorKind::EmptyMatrix: return "EmptyMatrix";
        case ErrorKind::InsufficientGenes: return "InsufficientGenes";
        case ErrorKind::ZeroLibrary: return "ZeroLibrary";
        case ErrorKind::ShapeMismatch: return "ShapeMismatch";
        case ErrorKind::NonFinite: return "NonFinite";
        case ErrorKind::ZeroVector: return "ZeroVector";
        case ErrorKind::LabelOutOfRange: return "LabelOutOfRange";
        case ErrorKind::DegenerateCluster: return "DegenerateCluster";
        case ErrorKind::InsufficientCells: return "InsufficientCells";
        case ErrorKind::ConstructionError: return "ConstructionError";
        case ErrorKind::InvalidArgument: return "InvalidArgument";
        case ErrorKind::IoError: return "IoError";
    }
    return "Unknown";
}

std::string shape_str(const Tensor2& t) {
    std::ostringstream os;
    os << t.rows() << "x" << t.cols();
    return os.str();
}

bool all_finite(const Tensor2& t) {
    const double* p = t.data();
    for (Eigen::Index i = 0; i < t.size(); ++i) {
        if (!std::isfinite(p[i])) return false;
    }
    return true;
}

FlopCounter& flop_counter() {
    thread_local FlopCounter counter;
    return counter;
}

Tensor2 matmul(const Tensor2& a, const Tensor2& b) {
    require_shape(a.cols() == b.rows(), "matmul " + shape_str(a) + " * " + shape_str(b));
    flop_counter().flops += 2ull * a.rows() * a.cols() * b.cols();
    Tensor2 out(a.rows(), b.cols());
    out.noalias() = a * b;
    return out;
}

Tensor2 matmul_nt(const Tensor2& a, const Tensor2& b) {
    require_shape(a.cols() == b.cols(), "matmul_nt " + shape_str(a) + " * " + shape_str(b) + "^T");
    flop_counter().flops += 2ull * a.rows() * a.cols() * b.rows();
    Tensor2 out(a.rows(), b.rows());
    out.noalias() = a * b.transpose();
    return out;
}

Tensor2 matmul_tn(const Tensor2& a, const Tensor2& b) {
    require_shape(a.rows() == b.rows(), "matmul_tn " + shape_str(a) + "^T * " + shape_str(b));
    flop_counter().flops += 2ull * a.cols() * a.rows() * b.cols();
    Tensor2 out(a.cols(), b.cols());
    out.noalias() = a.transpose() * b;
    return out;
}

Tensor2 gather_rows(const Tensor2& src, const IndexVector& rows) {
    Tensor2 out(static_cast<Eigen::Index>(rows.size()), src.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        require_shape(rows[i] >= 0 && rows[i] < src.rows(), "gather_rows index out of range");
        out.row(static_cast<Eigen::Index>(i)) = src.row(rows[i]);
    }
    return out;
}

}  // namespace bgformer
