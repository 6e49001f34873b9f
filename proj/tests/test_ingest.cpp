#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>

#include "bgformer/ingest.hpp"
#include "support.hpp"

using namespace bgformer;
using namespace bgformer::ingest;

namespace {

Tensor2 dense(const CountMatrix& m) { return Tensor2(m.toDense()); }

ExpressionMatrix from_dense(const Tensor2& a) {
    std::ostringstream os;
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        for (Eigen::Index j = 0; j < a.cols(); ++j) os << (j ? "," : "") << a(i, j);
        os << "\n";
    }
    return parse_dense_csv(os.str());
}

ErrorKind kind_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.kind();
    }
    FAIL("no error raised");
    return ErrorKind::InvalidArgument;
}

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("dense CSV and MatrixMarket parsing") {
    const auto em = parse_dense_csv("1,0,2\n0,5,0");
    Tensor2 want(2, 3);
    want << 1, 0, 2, 0, 5, 0;
    CHECK(dense(em.raw_counts) == want);
    CHECK(em.n_cells() == 2);
    CHECK(em.n_genes() == 3);
    CHECK(em.processed.size() == 0);

    const auto mm = parse_matrix_market("%%MatrixMarket matrix coordinate integer general\n2 2 1\n1 1 7\n");
    Tensor2 want2(2, 2);
    want2 << 7, 0, 0, 0;
    CHECK(dense(mm.raw_counts) == want2);

    CHECK(kind_of([] { parse_dense_csv("1,0\n-1,2"); }) == ErrorKind::NegativeCount);
    CHECK(kind_of([] { parse_dense_csv("1,0\n1.5,2"); }) == ErrorKind::ParseError);
    CHECK(kind_of([] { parse_dense_csv("1,0\n1,2,3"); }) == ErrorKind::ParseError);
    CHECK(kind_of([] { parse_dense_csv(""); }) == ErrorKind::EmptyMatrix);
    CHECK(kind_of([] { parse_matrix_market("%%MatrixMarket matrix coordinate integer general\n0 3 0\n"); }) ==
          ErrorKind::EmptyMatrix);
    CHECK(kind_of([] { parse_matrix_market("%%MatrixMarket matrix coordinate integer general\n2 2 2\n1 1 3\n"); }) ==
          ErrorKind::ParseError);
    CHECK(kind_of([] { load_counts("/nonexistent/counts.mtx", CountFormat::MatrixMarket); }) == ErrorKind::IoError);
}

TEST_CASE("CSV header and cell id column") {
    const auto em = parse_dense_csv("id,g1,g2\nc1,3,0\nc2,0,4\n");
    CHECK(em.gene_names == std::vector<std::string>{"g1", "g2"});
    CHECK(em.cell_ids == std::vector<std::string>{"c1", "c2"});
    CHECK(em.raw_counts.coeff(1, 1) == 4.0);
    const auto noid = parse_dense_csv("a,b\n1,2\n");
    CHECK(noid.gene_names == std::vector<std::string>{"a", "b"});
    CHECK(noid.cell_ids.size() == 1);
}

TEST_CASE("MatrixMarket writer round trip") {
    std::mt19937_64 rng(4);
    std::poisson_distribution<int> pois(0.7);
    Tensor2 a(6, 5);
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = pois(rng);
    const auto em = from_dense(a);
    const auto path = temp_path("bgf_mm_test.mtx");
    write_matrix_market(path, em.raw_counts);
    const auto back = load_counts(path, CountFormat::MatrixMarket);
    CHECK(dense(back.raw_counts) == a);
    std::filesystem::remove(path);
}

TEST_CASE("filter_qc examples") {
    Tensor2 a(2, 2);
    a << 1, 0, 0, 0;
    CHECK(dense(filter_qc(from_dense(a), 0, 0).raw_counts) == a);
    const auto f = filter_qc(from_dense(a), 1, 0);
    CHECK(f.n_cells() == 1);
    CHECK(f.cell_ids.size() == 1);

    // Brute-force mask oracle on random 5x5 matrices.
    for (int seed = 0; seed < 20; ++seed) {
        std::mt19937_64 rng(seed);
        std::bernoulli_distribution nz(0.45);
        Tensor2 m(5, 5);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = nz(rng) ? 1 + (rng() % 4) : 0;
        std::vector<int> keep_r, keep_c;
        for (int i = 0; i < 5; ++i) {
            if ((m.row(i).array() != 0).count() >= 2) keep_r.push_back(i);
        }
        for (int j = 0; j < 5; ++j) {
            int c = 0;
            for (int i : keep_r) c += m(i, j) != 0;
            if (c >= 2) keep_c.push_back(j);
        }
        if (keep_r.empty() || keep_c.empty()) {
            CHECK(kind_of([&] { filter_qc(from_dense(m), 2, 2); }) == ErrorKind::EmptyMatrix);
            continue;
        }
        Tensor2 want(keep_r.size(), keep_c.size());
        for (std::size_t i = 0; i < keep_r.size(); ++i) {
            for (std::size_t j = 0; j < keep_c.size(); ++j) want(i, j) = m(keep_r[i], keep_c[j]);
        }
        CHECK(dense(filter_qc(from_dense(m), 2, 2).raw_counts) == want);
    }
}

TEST_CASE("select_hvg examples") {
    Tensor2 a(3, 4);
    a << 1, 5, 0, 2, 2, 0, 0, 2, 3, 9, 0, 2;
    const auto all = select_hvg(from_dense(a), 4);
    CHECK(all.selected_genes == std::vector<std::int64_t>{0, 1, 2, 3});

    Tensor2 b(3, 2);
    b << 4, 1, 4, 7, 4, 2;
    CHECK(select_hvg(from_dense(b), 1).selected_genes == std::vector<std::int64_t>{1});

    // Six hand-built genes; oracle sorts explicit variance/mean.
    Tensor2 c(4, 6);
    c << 0, 1, 5, 2, 9, 3,  //
        1, 1, 0, 2, 0, 3,   //
        0, 1, 7, 2, 1, 4,   //
        3, 1, 1, 2, 0, 2;
    std::vector<double> disp(6);
    for (int j = 0; j < 6; ++j) {
        const double mean = c.col(j).mean();
        const double var = (c.col(j).array() - mean).square().mean();
        disp[j] = var / mean;
    }
    std::vector<std::int64_t> order(6);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto x, auto y) { return disp[x] > disp[y]; });
    std::vector<std::int64_t> top(order.begin(), order.begin() + 3);
    std::sort(top.begin(), top.end());
    CHECK(select_hvg(from_dense(c), 3).selected_genes == top);

    CHECK(kind_of([&] { select_hvg(from_dense(c), 7); }) == ErrorKind::InsufficientGenes);
}

TEST_CASE("normalize_log examples") {
    const auto single = normalize_log(select_hvg(parse_dense_csv("1,1\n"), 2));
    CHECK(single.size_factors[0] == 1.0);
    CHECK(single.processed.cwiseAbs().maxCoeff() == 0.0);

    // Zero-variance columns freeze at 0.
    const auto flat = normalize_log(select_hvg(parse_dense_csv("1,0,3\n2,0,6\n"), 3));
    CHECK(flat.processed.col(1).cwiseAbs().maxCoeff() == 0.0);

    CHECK(kind_of([] { normalize_log(select_hvg(parse_dense_csv("1,2\n0,0\n"), 2)); }) == ErrorKind::ZeroLibrary);

    // 3x2 step-by-step oracle.
    Tensor2 a(3, 2);
    a << 2, 4, 1, 1, 6, 3;
    const auto out = normalize_log(select_hvg(from_dense(a), 2));
    const double tot[3] = {6, 2, 9};
    const double med = 6;
    Tensor2 want(3, 2);
    for (int i = 0; i < 3; ++i) {
        CHECK(out.size_factors[i] == doctest::Approx(tot[i] / med).epsilon(1e-15));
        for (int j = 0; j < 2; ++j) want(i, j) = std::log1p(a(i, j) / (tot[i] / med));
    }
    for (int j = 0; j < 2; ++j) {
        const double mean = want.col(j).mean();
        const double sd = std::sqrt((want.col(j).array() - mean).square().mean());
        want.col(j) = (want.col(j).array() - mean) / sd;
    }
    CHECK(testsupport::max_abs_diff(out.processed, want) < 1e-12);
}

TEST_CASE("pipeline determinism, standardization and permutation") {
    std::mt19937_64 rng(8);
    std::poisson_distribution<int> pois(2.0);
    Tensor2 a(30, 12);
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = pois(rng);
    const auto p1 = preprocess(from_dense(a), 8);
    const auto p2 = preprocess(from_dense(a), 8);
    CHECK(testsupport::max_abs_diff(p1.processed, p2.processed) == 0.0);
    CHECK(p1.processed.allFinite());
    for (Eigen::Index j = 0; j < p1.processed.cols(); ++j) {
        const auto col = p1.processed.col(j).array();
        const double mean = col.mean();
        const double var = (col - mean).square().mean();
        if (var == 0.0) continue;
        CHECK(std::abs(mean) < 1e-9);
        CHECK(std::abs(var - 1.0) < 1e-6);
    }

    std::vector<int> perm(30);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor2 b(30, 12);
    for (int i = 0; i < 30; ++i) b.row(i) = a.row(perm[i]);
    const auto pp = preprocess(from_dense(b), 8);
    REQUIRE(pp.selected_genes == p1.selected_genes);
    double worst = 0.0;
    for (int i = 0; i < 30; ++i) worst = std::max(worst, (pp.processed.row(i) - p1.processed.row(perm[i])).cwiseAbs().maxCoeff());
    CHECK(worst < 1e-12);
}

TEST_CASE("labels and bundle round trip") {
    const auto ls = encode_labels({"b", "a", "b", "c"});
    CHECK(ls.codes == std::vector<int>{0, 1, 0, 2});
    CHECK(ls.num_classes() == 3);

    const auto lpath = temp_path("bgf_labels_test.csv");
    {
        std::ofstream os(lpath);
        os << "cell_id,label\nc0,x\nc1,y\nc2,x\n";
    }
    CHECK(load_labels(lpath).codes == std::vector<int>{0, 1, 0});
    std::filesystem::remove(lpath);

    const auto pre = preprocess(parse_dense_csv("id,g0,g1,g2\nc0,1,0,3\nc1,4,2,0\nc2,0,5,1\n"), 2);
    const auto ds = to_dataset(pre);
    const auto path = temp_path("bgf_bundle_test.bgd");
    save_bundle(path, ds);
    const auto back = load_bundle(path);
    CHECK(back.processed == ds.processed);
    CHECK(back.hvg_counts == ds.hvg_counts);
    CHECK(back.size_factors == ds.size_factors);
    CHECK(back.selected_genes == ds.selected_genes);
    CHECK(back.cell_ids == ds.cell_ids);
    CHECK(back.gene_names == ds.gene_names);
    CHECK(back.total_genes == 3);
    std::filesystem::remove(path);
}
