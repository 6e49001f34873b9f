#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "bgformer/ingest.hpp"

namespace bgformer::theory {

// ---------------------------------------------------------------------------
// Random-projection (JL) check of the low-rank attention claim
// ---------------------------------------------------------------------------

/// Distribution of the probe vector omega. Both are normalized to unit length.
enum class ProbeKind {
    Isotropic,    // Normal(0, 1) entries
    NonNegative,  // |Normal(0, 1)| entries
};

struct JlTrialConfig {
    std::int64_t n = 1024;        // total tokens
    std::int64_t n_prime = 256;   // batch rows
    double epsilon = 0.5;
    std::int64_t trials = 1000;
    std::uint64_t seed = 0;
    std::int64_t m_override = 0;  // 0 = use jl_dimension
    ProbeKind probe = ProbeKind::Isotropic;
    double score_scale = 1.0;     // std of the random attention scores
};

/// ceil(5 ln(n') / (eps^2 - eps^3)).
std::int64_t jl_dimension(std::int64_t n_prime, double epsilon);

struct JlResult {
    double success_rate = 0.0;
    std::int64_t m_jl = 0;
    double median_ratio = 0.0;  // median of |A R^T R w - A w| / |A w|
};

/// Per trial: A = row_softmax(scores), unit probe w, R with Normal(0, 1/m)
/// entries; success iff |A R^T R w - A w| <= eps |A w|.
JlResult jl_experiment(const JlTrialConfig& cfg);

// ---------------------------------------------------------------------------
// Bipartite versus full attention without softmax
// ---------------------------------------------------------------------------

struct EquivalenceConfig {
    std::int64_t n = 64;
    std::int64_t m = 8;
    std::int64_t d = 16;
    std::int64_t d_k = 8;
    std::int64_t d_u = 0;  // 0 = min(m, d)
    double delta = 0.0;    // Frobenius norm of the noise added to X
    std::uint64_t seed = 0;
};

struct EquivalenceResult {
    double max_abs_diff = 0.0;
    double softmax_gap = 0.0;  // same comparison with softmax kept; reported only
    int resamples = 0;
};

/// X = C U D with a row-stochastic C (identity when n == m). Full path:
/// (X W_Q)(X W_K)^T (X W_V). Anchor path: (X W_Q) W_k^T A^T A W_v with
/// W_k = D W_K, W_v = D W_V and anchors A = R U, where C = Q R is a thin QR,
/// so that A^T A = U^T C^T C U holds exactly.
EquivalenceResult equivalence_experiment(const EquivalenceConfig& cfg);

// ---------------------------------------------------------------------------
// Scaling benchmark
// ---------------------------------------------------------------------------

struct BenchConfig {
    std::vector<std::int64_t> sizes;
    std::int64_t d = 64;
    std::int64_t m = 256;
    std::int64_t l = 4;
    std::int64_t d_k = 64;
    std::int64_t d_h = 64;
    int reps = 5;
    std::int64_t full_cap = 8192;    // full attention skipped above this n
    std::int64_t batch_rows = 1024;  // bipartite mini-batch size
    std::uint64_t seed = 0;
};

struct BenchRow {
    std::int64_t n = 0;
    std::string method;  // "bipartite" or "full"
    bool skipped = false;
    double mean_ms = 0.0;
    double std_ms = 0.0;
    double min_ms = 0.0;  // fastest rep; the slope fits use this
    std::uint64_t flops = 0;
};

struct BenchReport {
    std::vector<BenchRow> rows;
    std::optional<double> slope_bipartite;
    std::optional<double> slope_full;
};

BenchReport scaling_benchmark(const BenchConfig& cfg);

/// Least-squares slope of log(y) on log(x); empty with fewer than two points.
std::optional<double> loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

void write_bench_csv(const std::string& path, const BenchReport& r);
void write_bench_json(const std::string& path, const BenchReport& r, const BenchConfig& cfg);

// ---------------------------------------------------------------------------
// Synthetic counts
// ---------------------------------------------------------------------------

struct SynthConfig {
    std::int64_t n = 1000;
    std::int64_t K = 2;
    std::int64_t d = 200;
    std::int64_t de_genes = 20;  // upregulated genes per cluster
    double fold_change = 8.0;
    double dropout = 0.3;
    double theta = 2.0;
    std::uint64_t seed = 0;
};

struct SynthData {
    ingest::ExpressionMatrix em;  // raw counts only
    std::vector<int> labels;      // cell i belongs to cluster i mod K
    bgformer::Tensor2 log_means;  // K x d noiseless log-mean profiles
};

/// Cluster k upregulates its own disjoint block of `de_genes` genes over a
/// log-normal baseline; counts are ZINB(dropout, mean, theta).
SynthData synth_generate(const SynthConfig& cfg);

/// One ZINB draw through the gamma-Poisson mixture.
std::int64_t sample_zinb(double pi, double mu, double theta, std::mt19937_64& rng);

}  // namespace bgformer::theory
