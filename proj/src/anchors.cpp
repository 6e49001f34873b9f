#include "bgformer/anchors.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include <boost/math/special_functions/digamma.hpp>

#include "bgformer/kernels.hpp"

namespace bgformer::anchors {

namespace {

using kernels::sigmoid;
using kernels::softplus;

// Poles and overflow come back as non-finite values for the loss checks to catch.
using QuietPolicy = boost::math::policies::policy<boost::math::policies::overflow_error<boost::math::policies::ignore_error>,
                                                  boost::math::policies::pole_error<boost::math::policies::ignore_error>,
                                                  boost::math::policies::evaluation_error<boost::math::policies::ignore_error>>;

constexpr int kSmallCount = 16;
constexpr int kLogFactorialTable = 4096;

const std::array<double, kLogFactorialTable>& log_factorials() {
    static const auto table = [] {
        std::array<double, kLogFactorialTable> t{};
        for (int k = 0; k < kLogFactorialTable; ++k) t[static_cast<std::size_t>(k)] = std::lgamma(k + 1.0);
        return t;
    }();
    return table;
}

double log_factorial(double x) {
    if (x < kLogFactorialTable) return log_factorials()[static_cast<std::size_t>(x)];
    return std::lgamma(x + 1.0);
}

// lgamma(x + theta) - lgamma(theta) for integer x >= 1.
double log_rising(double x, double theta) {
    if (x <= kSmallCount && theta < 1e10) {
        double prod = 1.0;
        for (int k = 0; k < static_cast<int>(x); ++k) prod *= theta + k;
        return std::log(prod);
    }
    return std::lgamma(x + theta) - std::lgamma(theta);
}

// digamma(x + theta) - digamma(theta) for integer x >= 1.
double digamma_rising(double x, double theta) {
    if (x <= kSmallCount) {
        double s = 0.0;
        for (int k = 0; k < static_cast<int>(x); ++k) s += 1.0 / (theta + k);
        return s;
    }
    return boost::math::digamma(x + theta, QuietPolicy()) - boost::math::digamma(theta, QuietPolicy());
}

double log_add_exp(double a, double b) {
    const double hi = std::max(a, b);
    return hi + std::log1p(std::exp(-std::abs(a - b)));
}

struct EntryResult {
    double ll;       // log ZINB(x)
    double d_pi;     // d ll / d pre-activation of pi
    double d_theta;  // d ll / d theta
    double d_mu;     // d ll / d mu
};

// All derivatives are of the log-likelihood; log_mu is the log of the mean.
EntryResult zinb_entry(double x, double a_pi, double theta, double log_mu) {
    const double mu = std::exp(log_mu);
    const double log_theta = std::log(theta);
    const double log_theta_mu = log_add_exp(log_theta, log_mu);
    const double inv_theta_mu = 1.0 / (theta + mu);
    const double log_one_minus_pi = -softplus(a_pi);
    const double pi = sigmoid(a_pi);
    EntryResult r{};
    if (x == 0.0) {
        const double log_nb0 = theta * (log_theta - log_theta_mu);
        const double log_pi = -softplus(-a_pi);
        const double nb_branch = log_one_minus_pi + log_nb0;
        r.ll = log_add_exp(log_pi, nb_branch);
        const double w = std::exp(nb_branch - r.ll);  // posterior weight of the NB branch
        r.d_pi = (1.0 - w) * (1.0 - pi) - w * pi;
        r.d_theta = w * (log_theta - log_theta_mu + mu * inv_theta_mu);
        r.d_mu = -w * theta * inv_theta_mu;
        return r;
    }
    r.ll = log_one_minus_pi + log_rising(x, theta) - log_factorial(x) +
           theta * (log_theta - log_theta_mu) + x * (log_mu - log_theta_mu);
    r.d_pi = -pi;
    r.d_theta = digamma_rising(x, theta) + log_theta - log_theta_mu + (mu - x) * inv_theta_mu;
    r.d_mu = x / mu - (x + theta) * inv_theta_mu;
    return r;
}

void check_heads(const Tensor2& input, const ZinbHeadsView& h) {
    require_shape(h.W_pi.rows() == input.cols() && h.W_theta.rows() == input.cols() &&
                      h.W_mu.rows() == input.cols(),
                  "ZINB head weights must have " + std::to_string(input.cols()) + " rows");
    require_shape(h.W_pi.cols() == h.W_theta.cols() && h.W_pi.cols() == h.W_mu.cols(),
                  "ZINB heads disagree on gene width");
}

}  // namespace

Tensor2 encode(const Tensor2& X, const Tensor2& W_e, const Tensor2& b_e) {
    return kernels::affine(X, W_e, b_e);
}

Assignment assign(const Tensor2& H, const Tensor2& U) {
    require_shape(H.cols() == U.cols(), "assign: H " + shape_str(H) + " vs U " + shape_str(U));
    require_shape(U.rows() >= 1, "assign needs at least one anchor");
    const Vector h_norm = H.rowwise().norm();
    const Vector u_norm = U.rowwise().norm();
    for (Eigen::Index i = 0; i < h_norm.size(); ++i) {
        if (h_norm(i) == 0.0) throw Error(ErrorKind::ZeroVector, "cell embedding " + std::to_string(i) + " is zero");
    }
    for (Eigen::Index j = 0; j < u_norm.size(); ++j) {
        if (u_norm(j) == 0.0) throw Error(ErrorKind::ZeroVector, "anchor " + std::to_string(j) + " is zero");
    }
    const Tensor2 h_unit = H.array().colwise() / h_norm.array();
    const Tensor2 u_unit = U.array().colwise() / u_norm.array();
    const Tensor2 cosine = matmul_nt(h_unit, u_unit);

    Assignment a;
    a.indices.resize(static_cast<std::size_t>(H.rows()));
    for (Eigen::Index i = 0; i < H.rows(); ++i) {
        Eigen::Index best = 0;
        for (Eigen::Index j = 1; j < cosine.cols(); ++j) {
            if (cosine(i, j) > cosine(i, best)) best = j;
        }
        a.indices[static_cast<std::size_t>(i)] = best;
    }
    a.U_star = gather_rows(U, a.indices);
    return a;
}

ZinbPreActivations zinb_pre_activations(const Tensor2& input, const ZinbHeadsView& heads) {
    check_heads(input, heads);
    return ZinbPreActivations{kernels::affine(input, heads.W_pi, heads.b_pi),
                              kernels::affine(input, heads.W_theta, heads.b_theta),
                              kernels::affine(input, heads.W_mu, heads.b_mu)};
}

ZinbParams zinb_from_pre(const ZinbPreActivations& pre, const std::vector<double>* log_size_factors) {
    ZinbParams zp;
    zp.pi = kernels::elementwise(kernels::Elementwise::Sigmoid, pre.pi);
    zp.theta = kernels::elementwise(kernels::Elementwise::Softplus, pre.theta);
    Tensor2 log_mu = pre.mu.cwiseMin(kMaxLogMean);
    if (log_size_factors) {
        for (Eigen::Index i = 0; i < log_mu.rows(); ++i) log_mu.row(i).array() += (*log_size_factors)[static_cast<std::size_t>(i)];
    }
    zp.mu = kernels::elementwise(kernels::Elementwise::Exp, log_mu);
    return zp;
}

ZinbParams zinb_heads(const Tensor2& U_star, const ZinbHeadsView& heads) {
    return zinb_from_pre(zinb_pre_activations(U_star, heads));
}

double nb_log_pmf(double x, double mu, double theta) {
    const double log_theta_mu = std::log(theta + mu);
    double out = theta * (std::log(theta) - log_theta_mu);
    if (x > 0.0) out += log_rising(x, theta) - log_factorial(x) + x * (std::log(mu) - log_theta_mu);
    return out;
}

double zinb_log_pmf(double x, double pi, double mu, double theta) {
    const double log_nb = nb_log_pmf(x, mu, theta);
    if (x == 0.0) {
        if (pi <= 0.0) return log_nb;
        return log_add_exp(std::log(pi), std::log1p(-pi) + log_nb);
    }
    return std::log1p(-pi) + log_nb;
}

double zinb_nll(const Tensor2& x_raw, const ZinbParams& zp) {
    require_shape(x_raw.rows() == zp.pi.rows() && x_raw.cols() == zp.pi.cols() &&
                      zp.mu.rows() == x_raw.rows() && zp.mu.cols() == x_raw.cols() &&
                      zp.theta.rows() == x_raw.rows() && zp.theta.cols() == x_raw.cols(),
                  "zinb_nll: counts " + shape_str(x_raw) + " vs params " + shape_str(zp.pi));
    double total = 0.0;
    for (Eigen::Index i = 0; i < x_raw.rows(); ++i) {
        for (Eigen::Index g = 0; g < x_raw.cols(); ++g) {
            total += zinb_log_pmf(x_raw(i, g), zp.pi(i, g), zp.mu(i, g), zp.theta(i, g));
        }
    }
    const double nll = -total / static_cast<double>(x_raw.rows());
    if (!std::isfinite(nll)) throw Error(ErrorKind::NonFinite, "ZINB negative log-likelihood");
    return nll;
}

ZinbHeadEval zinb_head_loss(const Tensor2& input, const Tensor2& x_raw, const ZinbHeadsView& heads,
                            bool want_grad, const std::vector<double>* log_size_factors) {
    const ZinbPreActivations pre = zinb_pre_activations(input, heads);
    require_shape(x_raw.rows() == input.rows() && x_raw.cols() == pre.pi.cols(),
                  "ZINB counts " + shape_str(x_raw) + " vs heads output " + shape_str(pre.pi));
    const Eigen::Index n = x_raw.rows();
    const Eigen::Index d = x_raw.cols();
    const double inv_n = 1.0 / static_cast<double>(n);

    Tensor2 g_pi, g_theta, g_mu;
    if (want_grad) {
        g_pi.resize(n, d);
        g_theta.resize(n, d);
        g_mu.resize(n, d);
    }
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double shift = log_size_factors ? (*log_size_factors)[static_cast<std::size_t>(i)] : 0.0;
        for (Eigen::Index g = 0; g < d; ++g) {
            const double a_theta = pre.theta(i, g);
            const double theta = softplus(a_theta);
            const double a_mu = pre.mu(i, g);
            const bool clamped = a_mu > kMaxLogMean;
            const double log_mu = (clamped ? kMaxLogMean : a_mu) + shift;
            const EntryResult r = zinb_entry(x_raw(i, g), pre.pi(i, g), theta, log_mu);
            total += r.ll;
            if (want_grad) {
                const double dtheta_da = a_theta > 30.0 ? 1.0 : sigmoid(a_theta);
                g_pi(i, g) = -r.d_pi * inv_n;
                g_theta(i, g) = -r.d_theta * dtheta_da * inv_n;
                g_mu(i, g) = clamped ? 0.0 : -r.d_mu * std::exp(log_mu) * inv_n;
            }
        }
    }
    flop_counter().flops += 40ull * static_cast<std::uint64_t>(n * d);

    ZinbHeadEval out;
    out.nll = -total * inv_n;
    if (!std::isfinite(out.nll)) throw Error(ErrorKind::NonFinite, "ZINB negative log-likelihood");
    if (!want_grad) return out;

    auto gp = kernels::affine_backward(input, heads.W_pi, g_pi);
    auto gt = kernels::affine_backward(input, heads.W_theta, g_theta);
    auto gm = kernels::affine_backward(input, heads.W_mu, g_mu);
    out.d_input = gp.dx + gt.dx + gm.dx;
    out.dW_pi = std::move(gp.dw);
    out.db_pi = std::move(gp.dbias);
    out.dW_theta = std::move(gt.dw);
    out.db_theta = std::move(gt.dbias);
    out.dW_mu = std::move(gm.dw);
    out.db_mu = std::move(gm.dbias);
    return out;
}

double commitment_loss(const Tensor2& H, const Tensor2& U_star) {
    require_shape(H.rows() == U_star.rows() && H.cols() == U_star.cols(),
                  "commitment_loss: H " + shape_str(H) + " vs U* " + shape_str(U_star));
    return (H - U_star).squaredNorm() / static_cast<double>(H.rows());
}

AnchorLossEval anchor_loss_eval(const Tensor2& x_raw, const Tensor2& H, const Tensor2& U,
                                const AnchorEncoderDecoder& enc_dec, bool want_grad,
                                const Routing* frozen, const std::vector<double>* log_size_factors) {
    AnchorLossEval out;
    Tensor2 head_input;
    if (frozen) {
        require_shape(frozen->H_snapshot.rows() == H.rows() && frozen->H_snapshot.cols() == H.cols(),
                      "frozen routing does not match batch");
        out.routing = *frozen;
        head_input = gather_rows(U, out.routing.indices) + (H - out.routing.H_snapshot);
    } else {
        Assignment a = assign(H, U);
        out.routing.indices = std::move(a.indices);
        out.routing.H_snapshot = H;
        head_input = std::move(a.U_star);
    }
    const Tensor2 U_star = gather_rows(U, out.routing.indices);

    Tensor2 decoded;
    if (enc_dec.use_decoder) decoded = kernels::affine(head_input, enc_dec.W_d, enc_dec.b_d);
    const Tensor2& zinb_input = enc_dec.use_decoder ? decoded : head_input;

    out.heads = zinb_head_loss(zinb_input, x_raw, enc_dec.heads.view(), want_grad, log_size_factors);
    out.parts.L_d = out.heads.nll;
    out.parts.L_com = commitment_loss(H, U_star);
    out.parts.L_a = out.parts.L_d + out.parts.L_com;
    if (!want_grad) return out;

    Tensor2 d_head_input;
    if (enc_dec.use_decoder) {
        auto gd = kernels::affine_backward(head_input, enc_dec.W_d, out.heads.d_input);
        out.dW_d = std::move(gd.dw);
        out.db_d = std::move(gd.dbias);
        d_head_input = std::move(gd.dx);
    } else {
        d_head_input = out.heads.d_input;
    }

    const double inv_n = 1.0 / static_cast<double>(H.rows());
    const Tensor2 d_commit = 2.0 * inv_n * (H - U_star);
    out.dH = d_head_input + d_commit;
    out.dU = Tensor2::Zero(U.rows(), U.cols());
    for (std::size_t i = 0; i < out.routing.indices.size(); ++i) {
        const auto row = static_cast<Eigen::Index>(i);
        out.dU.row(out.routing.indices[i]) += d_head_input.row(row) - d_commit.row(row);
    }
    return out;
}

AnchorLossParts anchor_loss(const Tensor2& x_raw, const Tensor2& H, const AnchorCodebook& cb,
                            const AnchorEncoderDecoder& enc_dec) {
    return anchor_loss_eval(x_raw, H, cb.U, enc_dec, false).parts;
}

std::vector<std::int64_t> anchor_usage(const IndexVector& indices, Eigen::Index m) {
    std::vector<std::int64_t> usage(static_cast<std::size_t>(m), 0);
    for (auto j : indices) ++usage[static_cast<std::size_t>(j)];
    return usage;
}

}  // namespace bgformer::anchors
