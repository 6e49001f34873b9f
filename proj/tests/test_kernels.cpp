#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "bgformer/kernels.hpp"
#include "support.hpp"

using namespace bgformer;
using namespace bgformer::kernels;
using testsupport::max_abs_diff;
using testsupport::naive_matmul;
using testsupport::random_matrix;

TEST_CASE("affine examples") {
    std::mt19937_64 rng(1);
    const Tensor2 x = random_matrix(4, 3, rng);
    const Tensor2 bias = Tensor2::Zero(1, 3);
    CHECK(max_abs_diff(affine(x, Tensor2::Identity(3, 3), bias), x) == 0.0);

    const Tensor2 b = random_matrix(1, 2, rng);
    const Tensor2 z = affine(Tensor2::Zero(5, 3), random_matrix(3, 2, rng), b);
    for (Eigen::Index i = 0; i < 5; ++i) CHECK(max_abs_diff(z.row(i), b) == 0.0);

    const Tensor2 x2 = random_matrix(2, 3, rng);
    const Tensor2 w2 = random_matrix(3, 2, rng);
    const Tensor2 b2 = random_matrix(1, 2, rng);
    Tensor2 oracle = naive_matmul(x2, w2);
    oracle.rowwise() += b2.row(0);
    CHECK(max_abs_diff(affine(x2, w2, b2), oracle) < 1e-15);

    CHECK_THROWS_AS(affine(x2, random_matrix(2, 2, rng), b2), Error);
}

TEST_CASE("row_softmax examples and invariants") {
    Tensor2 s(1, 2);
    s << 0.0, 0.0;
    CHECK(max_abs_diff(row_softmax(s), Tensor2::Constant(1, 2, 0.5)) == 0.0);

    for (double c : {-50.0, 0.0, 3.5, 700.0}) {
        s << c, c + std::log(3.0);
        const Tensor2 y = row_softmax(s);
        CHECK(y(0, 0) == doctest::Approx(0.25).epsilon(1e-14));
        CHECK(y(0, 1) == doctest::Approx(0.75).epsilon(1e-14));
    }

    Tensor2 t(1, 3);
    t << 1.0, 2.0, 3.0;
    CHECK(max_abs_diff(row_softmax(t), testsupport::naive_softmax(t)) < 1e-15);

    std::mt19937_64 rng(2);
    for (int rep = 0; rep < 50; ++rep) {
        const Tensor2 a = random_matrix(6, 9, rng, -20, 20);
        const Tensor2 y = row_softmax(a);
        CHECK((y.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);
        CHECK(y.minCoeff() >= 0.0);
        Tensor2 shifted = a;
        shifted.array() += 17.25;
        CHECK(max_abs_diff(row_softmax(shifted), y) < 1e-12);
    }
}

TEST_CASE("elementwise examples") {
    CHECK(sigmoid(0.0) == 0.5);
    const Tensor2 zero = Tensor2::Zero(1, 1);
    CHECK(elementwise(Elementwise::Exp, zero)(0, 0) == 1.0);
    CHECK(elementwise(Elementwise::Log1p, zero)(0, 0) == 0.0);
    // log(1 + e^1.5) evaluated in long double.
    const long double oracle = std::log1p(std::exp(1.5L));
    CHECK(std::abs(softplus(1.5) - static_cast<double>(oracle)) < 1e-15);
    CHECK(softplus(31.0) == 31.0);
    CHECK(softplus(-800.0) >= 0.0);
    CHECK(std::isfinite(sigmoid(-1000.0)));
}

namespace {

// Weighted sum of a kernel output; the weights make every output entry count.
struct Probe {
    Tensor2 G;
    double dot(const Tensor2& y) const { return (G.array() * y.array()).sum(); }
};

}  // namespace

TEST_CASE("grad_check contract examples") {
    std::mt19937_64 rng(3);
    ParamStore ps(3);
    ps.add("W", random_matrix(3, 2, rng));
    const Tensor2 x = random_matrix(4, 3, rng);
    const Tensor2 b = random_matrix(1, 2, rng);
    Objective sum_affine = [&](ParamStore& p, bool acc) {
        const Tensor2 y = affine(x, p[0].value, b);
        if (acc) p[0].grad += affine_backward(x, p[0].value, Tensor2::Ones(4, 2), false).dw;
        return y.sum();
    };
    // Linear in W, so the largest allowed step only shrinks rounding error.
    CHECK(grad_check(sum_affine, ps, 1e-4) < 1e-10);

    ParamStore ss(4);
    ss.add("S", random_matrix(5, 4, rng, -3, 3));
    Objective sum_softmax = [&](ParamStore& p, bool acc) {
        const Tensor2 y = row_softmax(p[0].value);
        if (acc) p[0].grad += row_softmax_backward(y, Tensor2::Ones(5, 4));
        return y.sum();
    };
    CHECK(grad_check(sum_softmax, ss) < 1e-8);
    ss.zero_grad();
    sum_softmax(ss, true);
    CHECK(ss[0].grad.cwiseAbs().maxCoeff() < 1e-8);

    CHECK_THROWS_AS(grad_check(sum_affine, ps, 1e-3), Error);
    Objective nan_f = [](ParamStore& p, bool) { return std::sqrt(-1.0 - p[0].value.squaredNorm()); };
    try {
        grad_check(nan_f, ps);
        FAIL("expected NonFinite");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::NonFinite);
    }
}

TEST_CASE("every kernel passes grad_check at 100 seeded points") {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        std::mt19937_64 rng(1000 + seed);

        {  // affine: x, w and bias together
            ParamStore ps(seed);
            ps.add("x", random_matrix(3, 4, rng));
            ps.add("w", random_matrix(4, 2, rng));
            ps.add("b", random_matrix(1, 2, rng));
            const Probe pr{random_matrix(3, 2, rng)};
            Objective f = [&](ParamStore& p, bool acc) {
                const double v = pr.dot(affine(p[0].value, p[1].value, p[2].value));
                if (acc) {
                    auto g = affine_backward(p[0].value, p[1].value, pr.G);
                    p[0].grad += g.dx;
                    p[1].grad += g.dw;
                    p[2].grad += g.dbias;
                }
                return v;
            };
            worst = std::max(worst, grad_check(f, ps));
        }
        {  // row softmax
            ParamStore ps(seed);
            ps.add("s", random_matrix(3, 5, rng, -4, 4));
            const Probe pr{random_matrix(3, 5, rng)};
            Objective f = [&](ParamStore& p, bool acc) {
                const Tensor2 y = row_softmax(p[0].value);
                if (acc) p[0].grad += row_softmax_backward(y, pr.G);
                return pr.dot(y);
            };
            worst = std::max(worst, grad_check(f, ps));
        }
        for (auto kind : {Elementwise::Sigmoid, Elementwise::Softplus, Elementwise::Exp, Elementwise::Log1p}) {
            ParamStore ps(seed);
            const double lo = kind == Elementwise::Log1p ? -0.5 : -3.0;
            ps.add("x", random_matrix(2, 3, rng, lo, 3.0));
            const Probe pr{random_matrix(2, 3, rng)};
            Objective f = [&](ParamStore& p, bool acc) {
                const Tensor2 y = elementwise(kind, p[0].value);
                if (acc) p[0].grad += elementwise_backward(kind, p[0].value, y, pr.G);
                return pr.dot(y);
            };
            worst = std::max(worst, grad_check(f, ps));
        }
        {  // matrix product, concatenation and row norms
            ParamStore ps(seed);
            ps.add("a", random_matrix(3, 4, rng));
            ps.add("b", random_matrix(4, 2, rng));
            ps.add("c", random_matrix(3, 1, rng));
            const Probe pr{random_matrix(3, 3, rng)};
            const Vector g = random_matrix(3, 1, rng).col(0);
            Objective f = [&](ParamStore& p, bool acc) {
                const Tensor2 ab = matmul(p[0].value, p[1].value);
                const Tensor2 cat = concat_cols({ab, p[2].value});
                const double v = pr.dot(cat) + g.dot(row_sq_norms(p[0].value));
                if (acc) {
                    const Tensor2 d_ab = pr.G.leftCols(2);
                    p[0].grad += matmul_nt(d_ab, p[1].value);
                    p[0].grad += 2.0 * (g.asDiagonal() * p[0].value);
                    p[1].grad += matmul_tn(p[0].value, d_ab);
                    p[2].grad += pr.G.rightCols(1);
                }
                return v;
            };
            worst = std::max(worst, grad_check(f, ps));
        }
    }
    MESSAGE("worst kernel relative error " << worst);
    CHECK(worst < 1e-6);
}

TEST_CASE("flop counter is exact") {
    std::mt19937_64 rng(5);
    const Tensor2 a = random_matrix(7, 5, rng);
    const Tensor2 b = random_matrix(5, 3, rng);
    ScopedFlopCount fc;
    (void)matmul(a, b);
    CHECK(fc.elapsed() == 2u * 7 * 5 * 3);
    ScopedFlopCount fc2;
    (void)matmul_nt(a, a);
    CHECK(fc2.elapsed() == 2u * 7 * 5 * 7);
}

TEST_CASE("Glorot init bounds and determinism") {
    std::mt19937_64 r1(9), r2(9);
    ParamStore a(9), b(9);
    a.add_glorot("w", 30, 20, r1);
    b.add_glorot("w", 30, 20, r2);
    CHECK(max_abs_diff(a[0].value, b[0].value) == 0.0);
    CHECK(a[0].value.cwiseAbs().maxCoeff() <= std::sqrt(6.0 / 50.0));
    CHECK(a[0].grad.rows() == 30);
    CHECK(a[0].grad.cwiseAbs().maxCoeff() == 0.0);
    a.add_zeros("b", 1, 20);
    CHECK(a.num_scalars() == 620);
    CHECK(a.index_of("b") == 1);
    CHECK_THROWS_AS(a.index_of("missing"), Error);
}

TEST_CASE("checkpoint round trip") {
    std::mt19937_64 rng(11);
    ParamStore ps(11);
    ps.add("alpha.w", random_matrix(3, 4, rng));
    ps.add("beta", random_matrix(1, 7, rng));
    const auto path = (std::filesystem::temp_directory_path() / "bgf_ckpt_test.bgf").string();
    save_checkpoint(path, ps);
    const ParamStore back = load_checkpoint(path);
    REQUIRE(back.size() == 2);
    CHECK(back[0].name == "alpha.w");
    CHECK(max_abs_diff(back[0].value, ps[0].value) == 0.0);
    CHECK(max_abs_diff(back[1].value, ps[1].value) == 0.0);
    {
        std::FILE* f = std::fopen(path.c_str(), "r+b");
        std::fputc('X', f);
        std::fclose(f);
    }
    CHECK_THROWS_AS(load_checkpoint(path), Error);
    std::filesystem::remove(path);
}
