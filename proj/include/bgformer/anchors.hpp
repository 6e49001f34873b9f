#pragma once

#include <optional>
#include <vector>

#include "bgformer/tensor.hpp"

namespace bgformer::anchors {

/// Learnable anchor tokens shared by every mini-batch.
struct AnchorCodebook {
    Tensor2 U;  // m x d_u

    Eigen::Index m() const { return U.rows(); }
    Eigen::Index d_u() const { return U.cols(); }
};

/// Non-owning view of the three ZINB output heads (input width -> d genes).
struct ZinbHeadsView {
    const Tensor2& W_pi;
    const Tensor2& b_pi;
    const Tensor2& W_theta;
    const Tensor2& b_theta;
    const Tensor2& W_mu;
    const Tensor2& b_mu;
};

struct ZinbHeads {
    Tensor2 W_pi, b_pi, W_theta, b_theta, W_mu, b_mu;

    ZinbHeadsView view() const { return {W_pi, b_pi, W_theta, b_theta, W_mu, b_mu}; }
};

/// Encoder into anchor space, optional decoder, and the anchor ZINB heads.
struct AnchorEncoderDecoder {
    Tensor2 W_e;  // d x d_u
    Tensor2 b_e;  // 1 x d_u
    Tensor2 W_d;  // d_u x d_z (read only when use_decoder)
    Tensor2 b_d;  // 1 x d_z
    ZinbHeads heads;
    bool use_decoder = false;
};

/// Pre-activation ceiling for the mean head's exp.
inline constexpr double kMaxLogMean = 30.0;

/// H = X W_e + b_e
Tensor2 encode(const Tensor2& X, const Tensor2& W_e, const Tensor2& b_e);

struct Assignment {
    IndexVector indices;  // nearest anchor per cell by cosine similarity
    Tensor2 U_star;       // n x d_u, the selected anchor rows
};

/// Ties go to the smallest anchor index. Throws ZeroVector on a zero row.
Assignment assign(const Tensor2& H, const Tensor2& U);

struct ZinbParams {
    Tensor2 pi;     // (0, 1)
    Tensor2 mu;     // > 0, mean
    Tensor2 theta;  // > 0, dispersion
};

struct ZinbPreActivations {
    Tensor2 pi, theta, mu;
};

ZinbPreActivations zinb_pre_activations(const Tensor2& input, const ZinbHeadsView& heads);
ZinbParams zinb_from_pre(const ZinbPreActivations& pre,
                         const std::vector<double>* log_size_factors = nullptr);
ZinbParams zinb_heads(const Tensor2& U_star, const ZinbHeadsView& heads);

/// log NB(x | mu, theta).
double nb_log_pmf(double x, double mu, double theta);
/// log of pi*[x=0] + (1-pi)*NB(x | mu, theta).
double zinb_log_pmf(double x, double pi, double mu, double theta);

/// -(1/N) sum_i sum_g log ZINB(x_ig).
double zinb_nll(const Tensor2& x_raw, const ZinbParams& zp);

/// ZINB head evaluation with gradients w.r.t. the head input and head weights.
struct ZinbHeadEval {
    double nll = 0.0;
    Tensor2 d_input;
    Tensor2 dW_pi, db_pi, dW_theta, db_theta, dW_mu, db_mu;
};

/// Runs the heads on `input` and scores `x_raw`. `log_size_factors`, when
/// given, shifts the mean head by log s_i (mu_i <- s_i * mu_i).
ZinbHeadEval zinb_head_loss(const Tensor2& input, const Tensor2& x_raw, const ZinbHeadsView& heads,
                            bool want_grad, const std::vector<double>* log_size_factors = nullptr);

/// (1/N) sum_i ||h_i - u*_i||^2
double commitment_loss(const Tensor2& H, const Tensor2& U_star);

/// Cell-to-anchor routing. Gradient routing is straight-through: the heads see
/// U_star + (H - H_snapshot), which equals U_star in value while passing the
/// head gradient to both the selected anchors and H. Freezing a routing lets
/// finite differences probe exactly the routed graph.
struct Routing {
    IndexVector indices;
    Tensor2 H_snapshot;
};

struct AnchorLossParts {
    double L_a = 0.0;
    double L_d = 0.0;
    double L_com = 0.0;
};

struct AnchorLossEval {
    AnchorLossParts parts;
    Routing routing;
    Tensor2 dH;
    Tensor2 dU;
    Tensor2 dW_d, db_d;
    ZinbHeadEval heads;  // head weight gradients
};

AnchorLossEval anchor_loss_eval(const Tensor2& x_raw, const Tensor2& H, const Tensor2& U,
                                const AnchorEncoderDecoder& enc_dec, bool want_grad,
                                const Routing* frozen = nullptr,
                                const std::vector<double>* log_size_factors = nullptr);

/// L_a = L_d + L_com for one batch.
AnchorLossParts anchor_loss(const Tensor2& x_raw, const Tensor2& H, const AnchorCodebook& cb,
                            const AnchorEncoderDecoder& enc_dec);

/// Per-anchor selection counts.
std::vector<std::int64_t> anchor_usage(const IndexVector& indices, Eigen::Index m);

}  // namespace bgformer::anchors
