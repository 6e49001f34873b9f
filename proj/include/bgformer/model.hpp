#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "bgformer/anchors.hpp"
#include "bgformer/attention.hpp"
#include "bgformer/clustering.hpp"
#include "bgformer/kernels.hpp"

namespace bgformer {

/// Every field is addressable by name in the key=value config file.
struct TrainConfig {
    std::int64_t epochs = 100;
    std::int64_t batch_size = 256;
    double learning_rate = 1e-3;
    std::uint64_t seed = 0;
    std::int64_t m = 256;  // anchors
    std::int64_t l = 4;    // heads
    std::int64_t d_k = 64;
    std::int64_t d_u = 64;
    std::int64_t d_h = 64;
    std::int64_t K = 0;  // clusters, must be set
    std::int64_t warmup_epochs = 20;
    double w_s = 1.0;
    double w_c = 1.0;
    double w_a = 1.0;
    bool disable_L_a = false;
    bool disable_L_s = false;
    bool scale_scores = false;
    std::int64_t update_target_every = 0;  // optimizer steps; 0 = once per epoch

    double alpha = 1.0;            // Student-t degrees of freedom
    bool use_decoder = false;      // route anchor ZINB heads through the decoder
    std::int64_t d_z = 64;         // decoder width
    bool size_factor_mean = false; // mu_i <- s_i * mu_i in both ZINB terms
    double anchor_reset_noise = 0.01;

    /// Throws InvalidArgument on any violated constraint.
    void validate() const;
};

TrainConfig parse_config(const std::string& text, TrainConfig base = {});
TrainConfig load_config(const std::string& path, TrainConfig base = {});
/// Writes every field as key=value, one per line, in a fixed order.
std::string format_config(const TrainConfig& cfg);

/// Parameter layout and forward computation of the bipartite-attention
/// clustering model. All learnable state lives in `params`.
class Model {
public:
    /// Fresh model with seeded initialization. The codebook and centroids are
    /// placeholders until init_codebook / set_centroids.
    Model(const TrainConfig& cfg, Eigen::Index n_genes);
    /// Wraps a loaded checkpoint; validates every shape against `cfg`.
    Model(ParamStore params, const TrainConfig& cfg);

    const TrainConfig& config() const { return cfg_; }
    Eigen::Index n_genes() const { return d_; }
    Eigen::Index embed_dim() const { return cfg_.l * cfg_.d_h; }

    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    const Tensor2& U() const { return params_[u_].value; }
    Tensor2& U() { return params_[u_].value; }
    std::size_t U_index() const { return u_; }
    std::size_t centroids_index() const { return centroids_; }
    const Tensor2& centroids() const { return params_[centroids_].value; }
    void set_centroids(const Tensor2& c);
    clustering::ClusterState cluster_state() const;

    /// Codebook rows drawn from encoded cells of `x_batch`; with replacement
    /// only when m exceeds the batch.
    void init_codebook(const Tensor2& x_batch, std::mt19937_64& rng);

    attention::BipartiteAttentionParams attention_params() const;
    anchors::AnchorEncoderDecoder anchor_enc_dec() const;

    struct Embedding {
        Tensor2 Z;                      // n x (l * d_h)
        std::vector<Tensor2> attention; // per head, only when requested
    };

    /// Z = concat_i(B_i U W_v_i) + X W_c. Row i depends only on X row i.
    Embedding embed(const Tensor2& x, bool keep_attention = false) const;

    Tensor2 encode(const Tensor2& x) const;

    struct Indices {
        std::vector<std::size_t> W_p, W_k, W_v;
        std::size_t W_c, W_e, b_e, W_d, b_d;
        std::size_t a_W_pi, a_b_pi, a_W_theta, a_b_theta, a_W_mu, a_b_mu;
        std::size_t s_W_pi, s_b_pi, s_W_theta, s_b_theta, s_W_mu, s_b_mu;
    };
    const Indices& indices() const { return idx_; }

private:
    void bind_indices();
    void check_shapes() const;

    TrainConfig cfg_;
    Eigen::Index d_;
    ParamStore params_;
    Indices idx_{};
    std::size_t u_ = 0;
    std::size_t centroids_ = 0;
};

struct LossParts {
    double L = 0.0;
    double L_s = 0.0;
    double L_c = 0.0;
    double L_a = 0.0;
    double L_d = 0.0;
    double L_com = 0.0;
};

/// One mini-batch. `target` holds the fixed DEC target rows for these cells;
/// when null the clustering term is skipped (warm-up).
struct Batch {
    const Tensor2& x;
    const Tensor2& counts;
    const Tensor2* target = nullptr;
    const std::vector<double>* log_size_factors = nullptr;
};

struct LossEval {
    LossParts parts;
    anchors::Routing routing;  // empty when the anchor term is inactive
    Tensor2 Z;
};

/// L = w_s L_s + w_c L_c + w_a L_a. Disabled or zero-weighted terms are not
/// evaluated and report 0. With `accumulate_grad`, adds dL/dparam into the
/// model's gradient buffers. A non-null `frozen` routing replays the anchor
/// assignment of an earlier evaluation.
LossEval total_loss(Model& model, const Batch& batch, bool accumulate_grad,
                    const anchors::Routing* frozen = nullptr);

}  // namespace bgformer
