#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "bgformer/ingest.hpp"
#include "bgformer/model.hpp"

namespace bgformer {

using ingest::Dataset;

/// Adaptive-moment optimizer over every parameter in a store.
class Adam {
public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

    void step(ParamStore& params);
    /// Clears both moment estimates for the given rows of parameter `index`.
    void reset_rows(std::size_t index, const std::vector<Eigen::Index>& rows);
    std::int64_t steps() const { return t_; }

private:
    double lr_, b1_, b2_, eps_;
    std::int64_t t_ = 0;
    std::vector<Tensor2> m_, v_;
};

struct Metrics {
    std::int64_t n = 0;
    std::int64_t K = 0;
    std::vector<std::int64_t> cluster_sizes;
    std::optional<double> acc;
    std::optional<double> ari;
};

Metrics compute_metrics(const std::vector<int>& labels, std::int64_t K, const std::vector<int>* truth);

struct EpochRecord {
    std::int64_t epoch = 0;
    LossParts parts;  // step means
};

struct TrainOptions {
    const std::vector<int>* truth = nullptr;
    /// Written with the last-good parameters when training hits NonFinite.
    std::string checkpoint_on_failure;
    std::function<void(const EpochRecord&)> on_epoch;
    int eval_threads = 1;
};

struct TrainResult {
    Model model;
    std::vector<int> labels;
    Metrics metrics;
    std::vector<EpochRecord> history;
    std::vector<std::int64_t> anchor_usage;  // selections over the final epoch
    int centroid_reinits = 0;
};

TrainResult train(const Dataset& ds, const TrainConfig& cfg, const TrainOptions& opts = {});

struct EvalResult {
    Tensor2 Z;
    Tensor2 Q;
    std::vector<int> labels;
};

/// Full-data Z, Q and labels computed in row batches of `batch_size`
/// (0 = a single batch), spread over up to `threads` lanes.
EvalResult evaluate(const Model& model, const Tensor2& x, Eigen::Index batch_size = 1024, int threads = 1);

/// Lanes allowed by BGF_THREADS (default 1, at least 1).
int threads_from_env();

// Exporters. Machine-readable outputs carry full precision.
void write_labels_csv(const std::string& path, const std::vector<std::string>& cell_ids,
                      const std::vector<int>& labels);
void write_metrics_json(const std::string& path, const Metrics& m);
void write_loss_history_csv(const std::string& path, const std::vector<EpochRecord>& history);
void write_matrix_csv(const std::string& path, const Tensor2& a, const std::string& column_prefix);
void write_codebook(const std::string& dir, const Tensor2& U, const std::vector<std::int64_t>& usage);
/// Per head: the full n x m attention matrix and its per-class mean rows
/// (when labels are given).
void write_attention(const std::string& dir, const std::vector<Tensor2>& B, const std::vector<int>* labels,
                     std::int64_t K);

}  // namespace bgformer
