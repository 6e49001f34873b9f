#include "bgformer/theory.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>

#include <Eigen/QR>
#if defined(__GLIBC__)
#include <malloc.h>
#endif
#include <nlohmann/json.hpp>

#include "bgformer/attention.hpp"
#include "bgformer/kernels.hpp"

namespace bgformer::theory {

namespace {

Tensor2 gaussian(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> g(0.0, stddev);
    Tensor2 a(rows, cols);
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = g(rng);
    return a;
}

double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
    std::nth_element(v.begin(), mid, v.end());
    if (v.size() % 2 == 1) return *mid;
    const double hi = *mid;
    const double lo = *std::max_element(v.begin(), mid);
    return 0.5 * (lo + hi);
}

}  // namespace

// ---------------------------------------------------------------------------
// JL
// ---------------------------------------------------------------------------

std::int64_t jl_dimension(std::int64_t n_prime, double epsilon) {
    if (!(epsilon > 0.0 && epsilon < 1.0)) throw Error(ErrorKind::InvalidArgument, "epsilon must lie in (0, 1)");
    if (n_prime < 1) throw Error(ErrorKind::InvalidArgument, "n' must be >= 1");
    const double e2 = epsilon * epsilon;
    const double m = std::ceil(5.0 * std::log(static_cast<double>(n_prime)) / (e2 - e2 * epsilon));
    return std::max<std::int64_t>(1, static_cast<std::int64_t>(m));
}

JlResult jl_experiment(const JlTrialConfig& cfg) {
    if (cfg.n < 1 || cfg.trials < 1) throw Error(ErrorKind::InvalidArgument, "n and trials must be >= 1");
    JlResult r;
    r.m_jl = cfg.m_override > 0 ? cfg.m_override : jl_dimension(cfg.n_prime, cfg.epsilon);
    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<double> ratios;
    ratios.reserve(static_cast<std::size_t>(cfg.trials));
    std::int64_t ok = 0;
    const double r_std = 1.0 / std::sqrt(static_cast<double>(r.m_jl));
    for (std::int64_t t = 0; t < cfg.trials; ++t) {
        const Tensor2 A = kernels::row_softmax(gaussian(cfg.n_prime, cfg.n, cfg.score_scale, rng));
        Vector w(cfg.n);
        for (Eigen::Index i = 0; i < w.size(); ++i) {
            w(i) = cfg.probe == ProbeKind::NonNegative ? std::abs(g(rng)) : g(rng);
        }
        w /= w.norm();
        const Tensor2 R = gaussian(r.m_jl, cfg.n, r_std, rng);
        const Vector exact = A * w;
        const Vector projected = A * (R.transpose() * (R * w));
        const double ratio = (projected - exact).norm() / exact.norm();
        ratios.push_back(ratio);
        if (ratio <= cfg.epsilon) ++ok;
    }
    r.success_rate = static_cast<double>(ok) / static_cast<double>(cfg.trials);
    r.median_ratio = median(ratios);
    return r;
}

// ---------------------------------------------------------------------------
// Equivalence
// ---------------------------------------------------------------------------

EquivalenceResult equivalence_experiment(const EquivalenceConfig& cfg) {
    if (cfg.m < 1 || cfg.n < cfg.m || cfg.d < 1 || cfg.d_k < 1) {
        throw Error(ErrorKind::InvalidArgument, "equivalence needs 1 <= m <= n and positive d, d_k");
    }
    const Eigen::Index d_u = cfg.d_u > 0 ? cfg.d_u : std::min(cfg.m, cfg.d);
    std::mt19937_64 rng(cfg.seed);
    EquivalenceResult res;

    // Anchors must span their full row space for D to be recoverable.
    Tensor2 U;
    constexpr int kMaxResamples = 10;
    for (;; ++res.resamples) {
        U = gaussian(cfg.m, d_u, 1.0, rng);
        Eigen::ColPivHouseholderQR<Tensor2> qr(U);
        if (qr.rank() == std::min<Eigen::Index>(cfg.m, d_u)) break;
        if (res.resamples + 1 >= kMaxResamples) {
            throw Error(ErrorKind::ConstructionError, "anchor matrix stayed rank deficient after resampling");
        }
    }
    const Tensor2 D = gaussian(d_u, cfg.d, 1.0 / std::sqrt(static_cast<double>(d_u)), rng);

    Tensor2 C;
    if (cfg.n == cfg.m) {
        C = Tensor2::Identity(cfg.m, cfg.m);
    } else {
        std::uniform_real_distribution<double> unif(0.0, 1.0);
        C.resize(cfg.n, cfg.m);
        for (Eigen::Index i = 0; i < C.size(); ++i) C.data()[i] = unif(rng);
        for (Eigen::Index i = 0; i < C.rows(); ++i) C.row(i) /= C.row(i).sum();
    }
    Tensor2 X = C * U * D;
    if (cfg.delta > 0.0) {
        const Tensor2 noise = gaussian(cfg.n, cfg.d, 1.0, rng);
        X += cfg.delta * noise / noise.norm();
    }

    const double wstd = 1.0 / std::sqrt(static_cast<double>(cfg.d));
    const Tensor2 W_Q = gaussian(cfg.d, cfg.d_k, wstd, rng);
    const Tensor2 W_K = gaussian(cfg.d, cfg.d_k, wstd, rng);
    const Tensor2 W_V = gaussian(cfg.d, cfg.d_k, wstd, rng);

    // C^T C = R^T R, so R U reproduces the cell Gram matrix in anchor space.
    Eigen::HouseholderQR<Tensor2> qr(C);
    const Tensor2 Rc = qr.matrixQR().topRows(cfg.m).triangularView<Eigen::Upper>();
    const Tensor2 A = Rc * U;
    const Tensor2 W_k = D * W_K;
    const Tensor2 W_v = D * W_V;

    const Tensor2 Q = X * W_Q;
    const Tensor2 K = X * W_K;
    const Tensor2 V = X * W_V;
    const Tensor2 full = Q * (K.transpose() * V);
    const Tensor2 anchored = Q * (W_k.transpose() * (A.transpose() * (A * W_v)));
    res.max_abs_diff = (full - anchored).cwiseAbs().maxCoeff();

    const Tensor2 full_sm = kernels::row_softmax(Q * K.transpose()) * V;
    const Tensor2 anchored_sm = kernels::row_softmax(Q * (A * W_k).transpose()) * (A * W_v);
    res.softmax_gap = (full_sm - anchored_sm).cwiseAbs().maxCoeff();
    return res;
}

// ---------------------------------------------------------------------------
// Scaling benchmark
// ---------------------------------------------------------------------------

std::optional<double> loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) return std::nullopt;
    const double k = static_cast<double>(x.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double lx = std::log(x[i]);
        const double ly = std::log(y[i]);
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    const double den = k * sxx - sx * sx;
    if (den == 0.0) return std::nullopt;
    return (k * sxy - sx * sy) / den;
}

namespace {

struct Timing {
    double mean_ms = 0.0;
    double std_ms = 0.0;
    double min_ms = 0.0;
    std::uint64_t flops = 0;
};

template <typename F>
Timing time_reps(int reps, F&& run) {
    Timing t;
    {
        // Warm-up run also fixes the flop count, which does not vary by rep.
        ScopedFlopCount fc;
        run();
        t.flops = fc.elapsed();
    }
    std::vector<double> ms;
    for (int r = 0; r < reps; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        run();
        const auto t1 = std::chrono::steady_clock::now();
        ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    t.mean_ms = std::accumulate(ms.begin(), ms.end(), 0.0) / static_cast<double>(ms.size());
    t.min_ms = *std::min_element(ms.begin(), ms.end());
    double var = 0.0;
    for (double v : ms) var += (v - t.mean_ms) * (v - t.mean_ms);
    t.std_ms = ms.size() > 1 ? std::sqrt(var / static_cast<double>(ms.size() - 1)) : 0.0;
    return t;
}

}  // namespace

BenchReport scaling_benchmark(const BenchConfig& cfg) {
    if (cfg.sizes.empty()) throw Error(ErrorKind::InvalidArgument, "benchmark needs at least one size");
    if (!std::is_sorted(cfg.sizes.begin(), cfg.sizes.end()) || cfg.sizes.front() < 1) {
        throw Error(ErrorKind::InvalidArgument, "benchmark sizes must be positive and ascending");
    }
    if (cfg.reps < 1) throw Error(ErrorKind::InvalidArgument, "reps must be >= 1");
#if defined(__GLIBC__)
    // Keep freed batch temporaries in the heap. Otherwise glibc returns them to
    // the OS and the page faults on reallocation depend on which sizes ran before.
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
#endif
    std::mt19937_64 rng(cfg.seed);

    attention::BipartiteAttentionParams bp;
    for (std::int64_t h = 0; h < cfg.l; ++h) {
        bp.heads.push_back({gaussian(cfg.d, cfg.d_k, 0.1, rng), gaussian(cfg.d, cfg.d_k, 0.1, rng),
                            gaussian(cfg.d, cfg.d_h, 0.1, rng)});
    }
    bp.W_c = gaussian(cfg.d, cfg.l * cfg.d_h, 0.1, rng);
    const Tensor2 U = gaussian(cfg.m, cfg.d, 1.0, rng);
    const attention::FullAttentionParams fp{gaussian(cfg.d, cfg.d_k, 0.1, rng), gaussian(cfg.d, cfg.d_k, 0.1, rng),
                                            gaussian(cfg.d, cfg.d_h, 0.1, rng)};
    const Tensor2 X_all = gaussian(cfg.sizes.back(), cfg.d, 1.0, rng);

    // All bipartite sizes first: interleaving the large full-attention
    // allocations measurably slows the bipartite timings that follow them.
    BenchReport rep;
    std::vector<double> nb, tb, nf, tf;
    for (std::int64_t n : cfg.sizes) {
        const Tensor2 X = X_all.topRows(n);
        const Timing b = time_reps(cfg.reps, [&] {
            for (Eigen::Index r0 = 0; r0 < n; r0 += cfg.batch_rows) {
                const Eigen::Index rows = std::min<Eigen::Index>(cfg.batch_rows, n - r0);
                const Tensor2 xb = X.middleRows(r0, rows);
                const auto mh = attention::multi_head_bipartite(xb, U, bp);
                const Tensor2 z = attention::residual_embed(xb, mh.Z_out, bp.W_c);
                (void)z;
            }
        });
        rep.rows.push_back({n, "bipartite", false, b.mean_ms, b.std_ms, b.min_ms, b.flops});
        nb.push_back(static_cast<double>(n));
        tb.push_back(b.min_ms);
    }
    for (std::int64_t n : cfg.sizes) {
        if (n > cfg.full_cap) {
            rep.rows.push_back({n, "full", true, 0.0, 0.0, 0.0, 0});
            continue;
        }
        const Tensor2 X = X_all.topRows(n);
        // Cap each score block at 2^18 entries so it stays cache resident.
        const Eigen::Index block = std::clamp<Eigen::Index>((Eigen::Index{1} << 18) / n, 16, 256);
        const Timing f = time_reps(cfg.reps, [&] {
            const Tensor2 z = attention::full_self_attention_streamed(X, fp, block);
            (void)z;
        });
        rep.rows.push_back({n, "full", false, f.mean_ms, f.std_ms, f.min_ms, f.flops});
        nf.push_back(static_cast<double>(n));
        tf.push_back(f.min_ms);
    }
    std::stable_sort(rep.rows.begin(), rep.rows.end(),
                     [](const BenchRow& a, const BenchRow& b) { return a.n < b.n; });
    rep.slope_bipartite = loglog_slope(nb, tb);
    rep.slope_full = loglog_slope(nf, tf);
    return rep;
}

void write_bench_csv(const std::string& path, const BenchReport& r) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw Error(ErrorKind::IoError, "cannot write " + path);
    os << std::setprecision(17) << "n,method,mean_ms,std_ms,flops\n";
    for (const auto& row : r.rows) {
        os << row.n << ',' << row.method << ',';
        if (row.skipped) {
            os << "skipped,skipped,skipped\n";
        } else {
            os << row.mean_ms << ',' << row.std_ms << ',' << row.flops << '\n';
        }
    }
    if (!os) throw Error(ErrorKind::IoError, "write failed for " + path);
}

void write_bench_json(const std::string& path, const BenchReport& r, const BenchConfig& cfg) {
    nlohmann::ordered_json j;
    j["sizes"] = cfg.sizes;
    j["d"] = cfg.d;
    j["m"] = cfg.m;
    j["l"] = cfg.l;
    j["d_k"] = cfg.d_k;
    j["reps"] = cfg.reps;
    j["full_cap"] = cfg.full_cap;
    j["timing_fit"] = "least squares of log(min_ms) on log(n)";
    if (r.slope_bipartite) j["slope_bipartite"] = *r.slope_bipartite;
    if (r.slope_full) j["slope_full"] = *r.slope_full;
    j["min_ms"] = nlohmann::ordered_json::object();
    for (const auto& row : r.rows) {
        if (!row.skipped) j["min_ms"][row.method + "_" + std::to_string(row.n)] = row.min_ms;
    }
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw Error(ErrorKind::IoError, "cannot write " + path);
    os << std::setprecision(17) << j.dump(2) << '\n';
    if (!os) throw Error(ErrorKind::IoError, "write failed for " + path);
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

std::int64_t sample_zinb(double pi, double mu, double theta, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    if (u(rng) < pi) return 0;
    std::gamma_distribution<double> gam(theta, mu / theta);
    std::poisson_distribution<std::int64_t> pois(gam(rng));
    return pois(rng);
}

SynthData synth_generate(const SynthConfig& cfg) {
    if (cfg.n < 1 || cfg.K < 1 || cfg.d < 1 || cfg.de_genes < 0) {
        throw Error(ErrorKind::InvalidArgument, "synthetic data needs n, K, d >= 1");
    }
    if (cfg.de_genes * cfg.K > cfg.d) {
        throw Error(ErrorKind::InvalidArgument, "de_genes * K exceeds d");
    }
    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> g(0.0, 0.5);

    SynthData out;
    Vector base(cfg.d);
    for (Eigen::Index j = 0; j < base.size(); ++j) base(j) = g(rng);
    out.log_means.resize(cfg.K, cfg.d);
    const double up = std::log(cfg.fold_change);
    for (Eigen::Index k = 0; k < cfg.K; ++k) {
        out.log_means.row(k) = base.transpose();
        for (Eigen::Index j = k * cfg.de_genes; j < (k + 1) * cfg.de_genes; ++j) out.log_means(k, j) += up;
    }

    std::vector<Eigen::Triplet<double, std::int64_t>> trip;
    out.labels.resize(static_cast<std::size_t>(cfg.n));
    for (std::int64_t i = 0; i < cfg.n; ++i) {
        const int k = static_cast<int>(i % cfg.K);
        out.labels[static_cast<std::size_t>(i)] = k;
        for (std::int64_t j = 0; j < cfg.d; ++j) {
            const auto c = sample_zinb(cfg.dropout, std::exp(out.log_means(k, j)), cfg.theta, rng);
            if (c != 0) trip.emplace_back(i, j, static_cast<double>(c));
        }
    }
    out.em.raw_counts.resize(cfg.n, cfg.d);
    out.em.raw_counts.setFromTriplets(trip.begin(), trip.end());
    out.em.raw_counts.makeCompressed();
    for (std::int64_t i = 0; i < cfg.n; ++i) out.em.cell_ids.push_back("cell_" + std::to_string(i));
    for (std::int64_t j = 0; j < cfg.d; ++j) out.em.gene_names.push_back("gene_" + std::to_string(j));
    return out;
}

}  // namespace bgformer::theory
