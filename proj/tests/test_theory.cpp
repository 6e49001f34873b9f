#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "bgformer/attention.hpp"
#include "bgformer/clustering.hpp"
#include "bgformer/theory.hpp"
#include "support.hpp"

using namespace bgformer;
using namespace bgformer::theory;
using testsupport::random_matrix;

namespace {

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t h = v.size() / 2;
    return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

std::string read_file(const std::string& path) {
    std::ifstream is(path);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("JL dimension formula") {
    // ceil(5 ln 256 / (0.25 - 0.125)) = ceil(221.807...) = 222
    CHECK(jl_dimension(256, 0.5) == 222);
    CHECK(jl_dimension(1, 0.5) == 1);  // floored at one row
    CHECK_THROWS_AS(jl_dimension(256, 1.0), Error);
    CHECK_THROWS_AS(jl_dimension(256, 0.0), Error);
}

TEST_CASE("JL trials") {
    JlTrialConfig lenient;
    lenient.epsilon = 0.99;
    lenient.trials = 100;
    lenient.seed = 1;
    lenient.probe = ProbeKind::NonNegative;
    CHECK(jl_experiment(lenient).success_rate == 1.0);

    JlTrialConfig square;
    square.trials = 100;
    square.m_override = square.n;
    square.seed = 2;
    square.probe = ProbeKind::NonNegative;
    const auto sq = jl_experiment(square);
    CHECK(sq.m_jl == 1024);
    CHECK(sq.success_rate >= 0.99);

    // A mean-zero probe nearly cancels inside the averaging rows of A, so the
    // relative error is far larger than for a one-signed probe.
    JlTrialConfig iso = square;
    iso.probe = ProbeKind::Isotropic;
    const auto is = jl_experiment(iso);
    MESSAGE("isotropic success " << is.success_rate << " median ratio " << is.median_ratio << " vs one-signed "
                                 << sq.median_ratio);
    CHECK(is.median_ratio > 10 * sq.median_ratio);

    JlTrialConfig again = square;
    CHECK(jl_experiment(again).success_rate == sq.success_rate);
}

TEST_CASE("JL success is non-decreasing in m") {
    std::vector<double> med;
    for (std::int64_t m : {16, 128, 1024}) {
        std::vector<double> rates;
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            JlTrialConfig c;
            c.n = 256;
            c.n_prime = 64;
            c.trials = 40;
            c.m_override = m;
            c.seed = seed;
            c.probe = ProbeKind::NonNegative;
            rates.push_back(jl_experiment(c).success_rate);
        }
        med.push_back(median(rates));
    }
    MESSAGE("median success " << med[0] << " " << med[1] << " " << med[2]);
    CHECK(med[0] <= med[1]);
    CHECK(med[1] <= med[2]);
}

TEST_CASE("softmax-free equivalence") {
    EquivalenceConfig id;
    id.n = 8;
    id.m = 8;
    id.seed = 3;
    CHECK(equivalence_experiment(id).max_abs_diff < 1e-9);

    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        EquivalenceConfig c;
        c.seed = seed;
        const auto r = equivalence_experiment(c);
        CHECK(r.max_abs_diff < 1e-8);
        CHECK(std::isfinite(r.softmax_gap));
    }
    for (auto [n, m, d] : {std::array<std::int64_t, 3>{32, 4, 8}, {100, 16, 16}, {50, 10, 40}}) {
        EquivalenceConfig c;
        c.n = n;
        c.m = m;
        c.d = d;
        c.seed = 9;
        CHECK(equivalence_experiment(c).max_abs_diff < 1e-8);
    }

    std::vector<double> med;
    for (double delta : {0.0, 1e-3, 1e-2}) {
        std::vector<double> diffs;
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            EquivalenceConfig c;
            c.delta = delta;
            c.seed = seed;
            diffs.push_back(equivalence_experiment(c).max_abs_diff);
        }
        med.push_back(median(diffs));
    }
    CHECK(med[0] < med[1]);
    CHECK(med[1] < med[2]);

    EquivalenceConfig bad;
    bad.m = bad.n + 1;
    CHECK_THROWS_AS(equivalence_experiment(bad), Error);
}

TEST_CASE("benchmark flop counts are exact") {
    BenchConfig c;
    c.sizes = {256, 512, 1024};
    c.d = 16;
    c.m = 16;
    c.l = 2;
    c.d_k = 8;
    c.d_h = 8;
    c.reps = 1;
    c.batch_rows = 256;
    c.full_cap = 512;
    const auto r = scaling_benchmark(c);
    REQUIRE(r.rows.size() == 6);
    CHECK(r.rows[2].flops == 2 * r.rows[0].flops);
    CHECK(r.rows[4].flops == 2 * r.rows[2].flops);
    CHECK(r.rows[5].skipped);
    CHECK_FALSE(r.rows[3].skipped);
    CHECK(r.slope_bipartite.has_value());
    CHECK(r.slope_full.has_value());

    // Full attention counts a*n + b*n^2; the quadratic part alone must quadruple.
    std::mt19937_64 rng(4);
    const attention::FullAttentionParams fp{random_matrix(16, 8, rng), random_matrix(16, 8, rng),
                                            random_matrix(16, 8, rng)};
    std::vector<std::uint64_t> T;
    for (Eigen::Index n : {64, 128, 256}) {
        const Tensor2 X = random_matrix(n, 16, rng);
        ScopedFlopCount fc;
        (void)attention::full_self_attention(X, fp);
        T.push_back(fc.elapsed());
    }
    const std::uint64_t q1 = T[1] - 2 * T[0];
    const std::uint64_t q2 = T[2] - 2 * T[1];
    CHECK(q2 == 4 * q1);
    // At n = 64: 2 n^2 d_k for the scores, n^2 for their scaling, 4 n^2 for
    // the softmax, and 2 n^2 d_v for A V.
    CHECK(q1 / 2 == 2u * 64 * 64 * 8 + 64u * 64 + 4u * 64 * 64 + 2u * 64 * 64 * 8);

    const auto path = (std::filesystem::temp_directory_path() / "bgf_bench.csv").string();
    write_bench_csv(path, r);
    const std::string csv = read_file(path);
    CHECK(csv.rfind("n,method,mean_ms,std_ms,flops\n", 0) == 0);
    CHECK(csv.find("1024,full,skipped,skipped,skipped") != std::string::npos);

    BenchConfig one = c;
    one.sizes = {256};
    const auto single = scaling_benchmark(one);
    CHECK_FALSE(single.slope_bipartite.has_value());
    write_bench_json(path, single, one);
    CHECK(read_file(path).find("slope") == std::string::npos);
    std::filesystem::remove(path);

    CHECK_THROWS_AS(scaling_benchmark(BenchConfig{}), Error);
    BenchConfig desc = c;
    desc.sizes = {512, 256};
    CHECK_THROWS_AS(scaling_benchmark(desc), Error);
}

TEST_CASE("log-log slope") {
    CHECK(*loglog_slope({1, 2, 4, 8}, {3, 12, 48, 192}) == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(*loglog_slope({10, 100}, {5, 50}) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK_FALSE(loglog_slope({10}, {5}).has_value());
}

TEST_CASE("synthetic generator") {
    SynthConfig one;
    one.K = 1;
    one.n = 50;
    const auto s1 = synth_generate(one);
    CHECK(std::all_of(s1.labels.begin(), s1.labels.end(), [](int v) { return v == 0; }));

    std::mt19937_64 rng(5);
    int zeros = 0;
    const int draws = 100000;
    for (int i = 0; i < draws; ++i) zeros += sample_zinb(0.3, 1.0, 2.0, rng) == 0;
    const double expected = 0.3 + 0.7 * (2.0 / 3.0) * (2.0 / 3.0);
    CHECK(std::abs(static_cast<double>(zeros) / draws - expected) < 0.01);

    // Mean of the non-inflated part.
    double total = 0.0;
    for (int i = 0; i < draws; ++i) total += static_cast<double>(sample_zinb(0.0, 4.0, 2.0, rng));
    CHECK(std::abs(total / draws - 4.0) < 0.05);

    SynthConfig sc;
    sc.K = 4;
    sc.seed = 6;
    const auto s = synth_generate(sc);
    CHECK(s.em.n_cells() == 1000);
    CHECK(s.em.n_genes() == 200);
    CHECK(s.log_means.rows() == 4);
    // Nearest noiseless profile per cell, on log1p of library-normalized counts.
    const Tensor2 raw = s.em.raw_counts.toDense();
    Tensor2 profiles = s.log_means.array().exp();
    std::vector<int> nearest(static_cast<std::size_t>(raw.rows()));
    for (Eigen::Index i = 0; i < raw.rows(); ++i) {
        double best = 1e300;
        for (Eigen::Index k = 0; k < 4; ++k) {
            const Eigen::RowVectorXd p = profiles.row(k) * (raw.row(i).sum() / profiles.row(k).sum());
            const double dist = ((raw.row(i).array() + 1).log() - (p.array() + 1).log()).matrix().squaredNorm();
            if (dist < best) {
                best = dist;
                nearest[static_cast<std::size_t>(i)] = static_cast<int>(k);
            }
        }
    }
    CHECK(clustering::metric_ari(nearest, s.labels) >= 0.95);

    const auto again = synth_generate(sc);
    CHECK(Tensor2(again.em.raw_counts.toDense()) == raw);

    SynthConfig bad;
    bad.de_genes = 150;
    CHECK_THROWS_AS(synth_generate(bad), Error);
}
