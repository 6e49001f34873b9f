#include "bgformer/kernels.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace bgformer::kernels {

Tensor2 affine(const Tensor2& x, const Tensor2& w, const Tensor2& bias) {
    require_shape(bias.rows() == 1 && bias.cols() == w.cols(),
                  "affine bias " + shape_str(bias) + " for weight " + shape_str(w));
    Tensor2 out = matmul(x, w);
    out.rowwise() += bias.row(0);
    flop_counter().flops += static_cast<std::uint64_t>(out.size());
    return out;
}

AffineGrads affine_backward(const Tensor2& x, const Tensor2& w, const Tensor2& dout,
                            bool want_dx) {
    require_shape(dout.rows() == x.rows() && dout.cols() == w.cols(), "affine_backward dout");
    AffineGrads g;
    if (want_dx) g.dx = matmul_nt(dout, w);
    g.dw = matmul_tn(x, dout);
    g.dbias = dout.colwise().sum();
    return g;
}

Tensor2 row_softmax(const Tensor2& s) {
    Tensor2 out(s.rows(), s.cols());
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
        const double mx = s.row(i).maxCoeff();
        double total = 0.0;
        for (Eigen::Index j = 0; j < s.cols(); ++j) {
            const double e = std::exp(s(i, j) - mx);
            out(i, j) = e;
            total += e;
        }
        out.row(i) /= total;
    }
    flop_counter().flops += 4ull * static_cast<std::uint64_t>(s.size());
    return out;
}

Tensor2 row_softmax_backward(const Tensor2& y, const Tensor2& dy) {
    require_shape(y.rows() == dy.rows() && y.cols() == dy.cols(), "row_softmax_backward");
    Tensor2 ds(y.rows(), y.cols());
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
        const double inner = y.row(i).dot(dy.row(i));
        ds.row(i) = y.row(i).array() * (dy.row(i).array() - inner);
    }
    return ds;
}

double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double softplus(double x) {
    if (x > 30.0) return x;
    return std::log1p(std::exp(x));
}

namespace {

double apply(Elementwise kind, double x) {
    switch (kind) {
        case Elementwise::Sigmoid: return sigmoid(x);
        case Elementwise::Softplus: return softplus(x);
        case Elementwise::Exp: return std::exp(x);
        case Elementwise::Log1p: return std::log1p(x);
    }
    return x;
}

double derivative(Elementwise kind, double x, double y) {
    switch (kind) {
        case Elementwise::Sigmoid: return y * (1.0 - y);
        case Elementwise::Softplus: return x > 30.0 ? 1.0 : sigmoid(x);
        case Elementwise::Exp: return y;
        case Elementwise::Log1p: return 1.0 / (1.0 + x);
    }
    return 1.0;
}

}  // namespace

Tensor2 elementwise(Elementwise kind, const Tensor2& x) {
    Tensor2 out(x.rows(), x.cols());
    const double* src = x.data();
    double* dst = out.data();
    for (Eigen::Index i = 0; i < x.size(); ++i) dst[i] = apply(kind, src[i]);
    flop_counter().flops += static_cast<std::uint64_t>(x.size());
    return out;
}

Tensor2 elementwise_backward(Elementwise kind, const Tensor2& x, const Tensor2& y,
                             const Tensor2& dy) {
    require_shape(x.rows() == dy.rows() && x.cols() == dy.cols(), "elementwise_backward");
    Tensor2 dx(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        dx.data()[i] = dy.data()[i] * derivative(kind, x.data()[i], y.data()[i]);
    }
    return dx;
}

Tensor2 concat_cols(const std::vector<Tensor2>& parts) {
    require_shape(!parts.empty(), "concat_cols of nothing");
    Eigen::Index cols = 0;
    for (const auto& p : parts) {
        require_shape(p.rows() == parts.front().rows(), "concat_cols row mismatch");
        cols += p.cols();
    }
    Tensor2 out(parts.front().rows(), cols);
    Eigen::Index at = 0;
    for (const auto& p : parts) {
        out.middleCols(at, p.cols()) = p;
        at += p.cols();
    }
    return out;
}

Vector row_sq_norms(const Tensor2& x) { return x.rowwise().squaredNorm(); }

}  // namespace bgformer::kernels

namespace bgformer {

std::size_t ParamStore::add(std::string name, Tensor2 value) {
    if (contains(name)) throw Error(ErrorKind::InvalidArgument, "duplicate parameter " + name);
    Tensor2 grad = Tensor2::Zero(value.rows(), value.cols());
    params_.push_back(Param{std::move(name), std::move(value), std::move(grad)});
    return params_.size() - 1;
}

std::size_t ParamStore::add_glorot(std::string name, Eigen::Index rows, Eigen::Index cols,
                                   std::mt19937_64& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
    std::uniform_real_distribution<double> dist(-limit, limit);
    Tensor2 w(rows, cols);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = dist(rng);
    return add(std::move(name), std::move(w));
}

std::size_t ParamStore::add_zeros(std::string name, Eigen::Index rows, Eigen::Index cols) {
    return add(std::move(name), Tensor2::Zero(rows, cols));
}

std::size_t ParamStore::index_of(std::string_view name) const {
    for (std::size_t i = 0; i < params_.size(); ++i) {
        if (params_[i].name == name) return i;
    }
    throw Error(ErrorKind::InvalidArgument, "no parameter named " + std::string(name));
}

bool ParamStore::contains(std::string_view name) const {
    return std::any_of(params_.begin(), params_.end(),
                       [&](const Param& p) { return p.name == name; });
}

std::size_t ParamStore::num_scalars() const {
    std::size_t total = 0;
    for (const auto& p : params_) total += static_cast<std::size_t>(p.value.size());
    return total;
}

void ParamStore::zero_grad() {
    for (auto& p : params_) p.grad.setZero();
}

double grad_check(const Objective& f, ParamStore& params, double h) {
    if (!(h >= 1e-7 && h <= 1e-4)) {
        throw Error(ErrorKind::InvalidArgument, "grad_check step must lie in [1e-7, 1e-4]");
    }
    params.zero_grad();
    const double base = f(params, true);
    if (!std::isfinite(base)) throw Error(ErrorKind::NonFinite, "objective at base point");

    std::vector<Tensor2> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params) analytic.push_back(p.grad);

    double worst = 0.0;
    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor2& value = params[k].value;
        for (Eigen::Index i = 0; i < value.size(); ++i) {
            const double saved = value.data()[i];
            value.data()[i] = saved + h;
            const double up = f(params, false);
            value.data()[i] = saved - h;
            const double down = f(params, false);
            value.data()[i] = saved;
            if (!std::isfinite(up) || !std::isfinite(down)) {
                throw Error(ErrorKind::NonFinite, "objective at probe of " + params[k].name);
            }
            const double fd = (up - down) / (2.0 * h);
            const double ad = analytic[k].data()[i];
            const double denom = std::max({1.0, std::abs(ad), std::abs(fd)});
            worst = std::max(worst, std::abs(ad - fd) / denom);
        }
    }
    return worst;
}

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint IO assumes a little-endian host");

template <typename T>
void write_pod(std::ofstream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
bool read_pod(std::ifstream& is, T& v) {
    return static_cast<bool>(is.read(reinterpret_cast<char*>(&v), sizeof(T)));
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamStore& params) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw Error(ErrorKind::IoError, "cannot write " + path);
    os.write("BGF1", 4);
    for (const auto& p : params) {
        write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(p.name.size()));
        os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(p.value.rows()));
        write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(p.value.cols()));
        os.write(reinterpret_cast<const char*>(p.value.data()),
                 static_cast<std::streamsize>(p.value.size() * sizeof(double)));
    }
    if (!os) throw Error(ErrorKind::IoError, "short write to " + path);
}

ParamStore load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error(ErrorKind::IoError, "cannot open " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "BGF1", 4) != 0) {
        throw Error(ErrorKind::ParseError, path + " is not a BGF1 checkpoint");
    }
    ParamStore store;
    std::uint32_t name_len = 0;
    while (read_pod(is, name_len)) {
        std::string name(name_len, '\0');
        std::uint64_t rows = 0, cols = 0;
        if (!is.read(name.data(), name_len) || !read_pod(is, rows) || !read_pod(is, cols)) {
            throw Error(ErrorKind::ParseError, "truncated record header in " + path);
        }
        Tensor2 value(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
        if (!is.read(reinterpret_cast<char*>(value.data()),
                     static_cast<std::streamsize>(value.size() * sizeof(double)))) {
            throw Error(ErrorKind::ParseError, "truncated values for " + name + " in " + path);
        }
        store.add(std::move(name), std::move(value));
    }
    return store;
}

}  // namespace bgformer
