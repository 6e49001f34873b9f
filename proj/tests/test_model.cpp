#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "bgformer/model.hpp"
#include "support.hpp"

using namespace bgformer;
using testsupport::max_abs_diff;
using testsupport::naive_matmul;
using testsupport::naive_softmax;
using testsupport::random_matrix;

namespace {

TrainConfig toy_config() {
    TrainConfig c;
    c.m = 4;
    c.l = 2;
    c.d_k = 3;
    c.d_u = 3;
    c.d_h = 3;
    c.d_z = 3;
    c.K = 2;
    c.seed = 5;
    c.batch_size = 16;
    return c;
}

struct Toy {
    Tensor2 x, counts, target;
    std::vector<double> log_sf;
};

Toy toy_data(std::uint64_t seed, Eigen::Index n = 16, Eigen::Index d = 8) {
    std::mt19937_64 rng(seed);
    Toy t;
    t.x = random_matrix(n, d, rng, -1.5, 1.5);
    std::poisson_distribution<int> pois(1.5);
    t.counts.resize(n, d);
    for (Eigen::Index i = 0; i < t.counts.size(); ++i) t.counts.data()[i] = pois(rng);
    Tensor2 raw = random_matrix(n, 2, rng, 0.1, 1.0);
    for (Eigen::Index i = 0; i < n; ++i) raw.row(i) /= raw.row(i).sum();
    t.target = raw;
    for (Eigen::Index i = 0; i < n; ++i) t.log_sf.push_back(std::log(0.5 + 0.1 * static_cast<double>(i % 5)));
    return t;
}

Model toy_model(const TrainConfig& cfg, const Toy& t) {
    Model model(cfg, t.x.cols());
    std::mt19937_64 rng(cfg.seed);
    model.init_codebook(t.x, rng);
    model.set_centroids(random_matrix(cfg.K, model.embed_dim(), rng));
    return model;
}

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }
double softplus(double v) { return std::log1p(std::exp(v)); }

// Mean over cells of the summed ZINB negative log-likelihood, from raw head weights.
double oracle_zinb(const Tensor2& in, const Tensor2& counts, const ParamStore& ps, std::size_t W_pi, std::size_t b_pi,
                   std::size_t W_th, std::size_t b_th, std::size_t W_mu, std::size_t b_mu) {
    const Tensor2 a = naive_matmul(in, ps[W_pi].value);
    const Tensor2 b = naive_matmul(in, ps[W_th].value);
    const Tensor2 c = naive_matmul(in, ps[W_mu].value);
    double total = 0.0;
    for (Eigen::Index i = 0; i < counts.rows(); ++i) {
        for (Eigen::Index g = 0; g < counts.cols(); ++g) {
            const double pi = sigmoid(a(i, g) + ps[b_pi].value(0, g));
            const double theta = softplus(b(i, g) + ps[b_th].value(0, g));
            const double mu = std::exp(c(i, g) + ps[b_mu].value(0, g));
            total += anchors::zinb_log_pmf(counts(i, g), pi, mu, theta);
        }
    }
    return -total / static_cast<double>(counts.rows());
}

}  // namespace

TEST_CASE("config parse and format round trip") {
    TrainConfig c = toy_config();
    c.learning_rate = 0.123456789012345678;
    c.disable_L_s = true;
    c.update_target_every = 7;
    const TrainConfig back = parse_config(format_config(c));
    CHECK(format_config(back) == format_config(c));
    CHECK(back.learning_rate == c.learning_rate);

    const TrainConfig p = parse_config("# comment\nepochs = 12\n tau=9\nuse_decoder=yes\nK=3\n");
    CHECK(p.epochs == 9);
    CHECK(p.use_decoder);
    CHECK(p.K == 3);
    CHECK_THROWS_AS(parse_config("bogus=1\n"), Error);
    CHECK_THROWS_AS(parse_config("epochs=abc\n"), Error);

    TrainConfig bad = toy_config();
    bad.K = 1;
    CHECK_THROWS_AS(bad.validate(), Error);
    bad = toy_config();
    bad.warmup_epochs = bad.epochs + 1;
    CHECK_THROWS_AS(bad.validate(), Error);
    CHECK_NOTHROW(toy_config().validate());
}

TEST_CASE("total loss parts match an independent forward pass") {
    for (bool decoder : {false, true}) {
        TrainConfig cfg = toy_config();
        cfg.use_decoder = decoder;
        cfg.w_s = 0.7;
        cfg.w_c = 1.3;
        cfg.w_a = 0.4;
        const Toy t = toy_data(21);
        Model model = toy_model(cfg, t);
        const ParamStore& ps = model.params();
        const auto& ix = model.indices();

        // Z from scratch.
        Tensor2 Z(t.x.rows(), model.embed_dim());
        for (int h = 0; h < cfg.l; ++h) {
            const Tensor2 q = naive_matmul(t.x, ps[ix.W_p[h]].value);
            const Tensor2 k = naive_matmul(model.U(), ps[ix.W_k[h]].value);
            const Tensor2 v = naive_matmul(model.U(), ps[ix.W_v[h]].value);
            const Tensor2 B = naive_softmax(naive_matmul(q, k.transpose()));
            Z.middleCols(h * cfg.d_h, cfg.d_h) = naive_matmul(B, v);
        }
        Z += naive_matmul(t.x, ps[ix.W_c].value);

        const double L_s = oracle_zinb(Z, t.counts, ps, ix.s_W_pi, ix.s_b_pi, ix.s_W_theta, ix.s_b_theta, ix.s_W_mu,
                                       ix.s_b_mu);

        double L_c = 0.0;
        for (Eigen::Index i = 0; i < Z.rows(); ++i) {
            double w[2], s = 0;
            for (int k = 0; k < 2; ++k) {
                w[k] = 1.0 / (1.0 + (Z.row(i) - model.centroids().row(k)).squaredNorm());
                s += w[k];
            }
            for (int k = 0; k < 2; ++k) L_c += t.target(i, k) * std::log(t.target(i, k) / (w[k] / s));
        }

        Tensor2 H = naive_matmul(t.x, ps[ix.W_e].value);
        H.rowwise() += ps[ix.b_e].value.row(0);
        Tensor2 U_star(H.rows(), H.cols());
        for (Eigen::Index i = 0; i < H.rows(); ++i) {
            Eigen::Index best = 0;
            double best_cos = -2;
            for (Eigen::Index j = 0; j < model.U().rows(); ++j) {
                const double cs = H.row(i).dot(model.U().row(j)) / (H.row(i).norm() * model.U().row(j).norm());
                if (cs > best_cos) {
                    best_cos = cs;
                    best = j;
                }
            }
            U_star.row(i) = model.U().row(best);
        }
        Tensor2 dec_in = U_star;
        if (decoder) {
            dec_in = naive_matmul(U_star, ps[ix.W_d].value);
            dec_in.rowwise() += ps[ix.b_d].value.row(0);
        }
        const double L_d = oracle_zinb(dec_in, t.counts, ps, ix.a_W_pi, ix.a_b_pi, ix.a_W_theta, ix.a_b_theta,
                                       ix.a_W_mu, ix.a_b_mu);
        const double L_com = (H - U_star).squaredNorm() / static_cast<double>(H.rows());

        const Batch batch{t.x, t.counts, &t.target};
        const auto ev = total_loss(model, batch, false);
        CHECK(ev.parts.L_s == doctest::Approx(L_s).epsilon(1e-12));
        CHECK(ev.parts.L_c == doctest::Approx(L_c).epsilon(1e-12));
        CHECK(ev.parts.L_d == doctest::Approx(L_d).epsilon(1e-12));
        CHECK(ev.parts.L_com == doctest::Approx(L_com).epsilon(1e-12));
        CHECK(ev.parts.L_a == doctest::Approx(L_d + L_com).epsilon(1e-12));
        CHECK(ev.parts.L == doctest::Approx(0.7 * L_s + 1.3 * L_c + 0.4 * (L_d + L_com)).epsilon(1e-12));
        CHECK(max_abs_diff(ev.Z, Z) < 1e-12);
    }
}

TEST_CASE("zero weights and disabled terms") {
    const Toy t = toy_data(3);
    TrainConfig cfg = toy_config();
    cfg.w_s = cfg.w_c = cfg.w_a = 0.0;
    Model zero = toy_model(cfg, t);
    const Batch batch{t.x, t.counts, &t.target};
    const auto ev = total_loss(zero, batch, true);
    CHECK(ev.parts.L == 0.0);
    double gsum = 0.0;
    for (std::size_t i = 0; i < zero.params().size(); ++i) gsum += zero.params()[i].grad.cwiseAbs().sum();
    CHECK(gsum == 0.0);

    TrainConfig na = toy_config();
    na.disable_L_a = true;
    na.w_s = 0.0;
    na.w_c = 0.0;
    Model m2 = toy_model(na, t);
    const auto e2 = total_loss(m2, batch, true);
    CHECK(e2.parts.L_a == 0.0);
    CHECK(m2.params()[m2.U_index()].grad.cwiseAbs().maxCoeff() == 0.0);
    CHECK(e2.routing.indices.size() == 0);

    // Warm-up batches carry no target, so L_c is skipped.
    Model m3 = toy_model(toy_config(), t);
    const Batch warm{t.x, t.counts};
    CHECK(total_loss(m3, warm, false).parts.L_c == 0.0);
}

TEST_CASE("full model gradient passes grad_check") {
    for (bool decoder : {false, true}) {
        for (bool with_sf : {false, true}) {
            TrainConfig cfg = toy_config();
            cfg.use_decoder = decoder;
            cfg.scale_scores = decoder;
            cfg.size_factor_mean = with_sf;
            cfg.w_a = 0.5;
            const Toy t = toy_data(40 + decoder + 2 * with_sf, 10, 6);
            Model model = toy_model(cfg, t);
            const Batch batch{t.x, t.counts, &t.target, with_sf ? &t.log_sf : nullptr};
            const anchors::Routing routing = total_loss(model, batch, false).routing;
            Objective f = [&](ParamStore&, bool acc) { return total_loss(model, batch, acc, &routing).parts.L; };
            const double err = grad_check(f, model.params());
            MESSAGE("decoder=" << decoder << " size factors=" << with_sf << " worst " << err);
            CHECK(err < 1e-4);
        }
    }
}

TEST_CASE("non-finite loss names the offending part") {
    const Toy t = toy_data(8);
    Model model = toy_model(toy_config(), t);
    model.params()[model.indices().s_b_pi].value.setConstant(std::nan(""));
    const Batch batch{t.x, t.counts};
    try {
        total_loss(model, batch, false);
        FAIL("expected NonFinite");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::NonFinite);
    }
}

TEST_CASE("embedding is row-local and checkpoint reload checks shapes") {
    const Toy t = toy_data(12);
    const TrainConfig cfg = toy_config();
    Model model = toy_model(cfg, t);
    const Tensor2 all = model.embed(t.x).Z;
    const Tensor2 part = model.embed(t.x.topRows(5)).Z;
    CHECK(max_abs_diff(all.topRows(5), part) < 1e-14);
    CHECK(max_abs_diff(model.embed(t.x, true).attention[1].rowwise().sum(), Tensor2::Ones(16, 1)) < 1e-14);

    const auto path = (std::filesystem::temp_directory_path() / "bgf_model_ckpt.bgf").string();
    save_checkpoint(path, model.params());
    Model back(load_checkpoint(path), cfg);
    CHECK(max_abs_diff(back.embed(t.x).Z, all) == 0.0);
    CHECK(max_abs_diff(back.centroids(), model.centroids()) == 0.0);

    TrainConfig wrong = cfg;
    wrong.m = 5;
    CHECK_THROWS_AS(Model(load_checkpoint(path), wrong), Error);
    wrong = cfg;
    wrong.l = 3;
    CHECK_THROWS_AS(Model(load_checkpoint(path), wrong), Error);
    std::filesystem::remove(path);
}
