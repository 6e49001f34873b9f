#include "bgformer/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <thread>

#include <nlohmann/json.hpp>

namespace bgformer {

// -----------------------------------------------------------------------------
// Adam
// -----------------------------------------------------------------------------

void Adam::step(ParamStore& params) {
    if (m_.empty()) {
        for (const auto& p : params) {
            m_.push_back(Tensor2::Zero(p.value.rows(), p.value.cols()));
            v_.push_back(Tensor2::Zero(p.value.rows(), p.value.cols()));
        }
    }
    if (m_.size() != params.size()) throw Error(ErrorKind::ShapeMismatch, "optimizer bound to a different store");
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Param& p = params[i];
        m_[i] = b1_ * m_[i] + (1.0 - b1_) * p.grad;
        v_[i] = b2_ * v_[i] + (1.0 - b2_) * p.grad.cwiseAbs2();
        p.value.array() -= lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
    }
}

void Adam::reset_rows(std::size_t index, const std::vector<Eigen::Index>& rows) {
    if (index >= m_.size()) return;
    for (Eigen::Index r : rows) {
        m_[index].row(r).setZero();
        v_[index].row(r).setZero();
    }
}

// -----------------------------------------------------------------------------
// Metrics and evaluation
// -----------------------------------------------------------------------------

Metrics compute_metrics(const std::vector<int>& labels, std::int64_t K, const std::vector<int>* truth) {
    Metrics m;
    m.n = static_cast<std::int64_t>(labels.size());
    m.K = K;
    m.cluster_sizes.assign(static_cast<std::size_t>(K), 0);
    for (int l : labels) {
        if (l < 0 || l >= K) throw Error(ErrorKind::LabelOutOfRange, "label " + std::to_string(l));
        ++m.cluster_sizes[static_cast<std::size_t>(l)];
    }
    if (truth != nullptr) {
        if (truth->size() != labels.size()) {
            throw Error(ErrorKind::ShapeMismatch, std::to_string(truth->size()) + " truth labels for " +
                                                      std::to_string(labels.size()) + " cells");
        }
        m.acc = clustering::metric_acc(labels, *truth);
        m.ari = clustering::metric_ari(labels, *truth);
    }
    return m;
}

int threads_from_env() {
    const char* s = std::getenv("BGF_THREADS");
    if (s == nullptr) return 1;
    const int v = std::atoi(s);
    return std::max(1, v);
}

EvalResult evaluate(const Model& model, const Tensor2& x, Eigen::Index batch_size, int threads) {
    require_shape(x.cols() == model.n_genes(), "model expects " + std::to_string(model.n_genes()) +
                                                   " genes, data has " + std::to_string(x.cols()));
    const Eigen::Index n = x.rows();
    if (batch_size <= 0 || batch_size > n) batch_size = std::max<Eigen::Index>(n, 1);
    const Eigen::Index n_batches = (n + batch_size - 1) / batch_size;

    EvalResult r;
    r.Z.resize(n, model.embed_dim());
    const auto cs = model.cluster_state();
    r.Q.resize(n, cs.K());

    // Batches write disjoint row ranges, so lanes need no coordination.
    auto run = [&](Eigen::Index lane, Eigen::Index lanes) {
        for (Eigen::Index b = lane; b < n_batches; b += lanes) {
            const Eigen::Index r0 = b * batch_size;
            const Eigen::Index rows = std::min(batch_size, n - r0);
            const Tensor2 xb = x.middleRows(r0, rows);
            Tensor2 z = model.embed(xb).Z;
            r.Q.middleRows(r0, rows) = clustering::soft_assign(z, cs);
            r.Z.middleRows(r0, rows) = std::move(z);
        }
    };
    const Eigen::Index lanes = std::clamp<Eigen::Index>(threads, 1, n_batches);
    if (lanes == 1) {
        run(0, 1);
    } else {
        std::vector<std::thread> pool;
        for (Eigen::Index t = 0; t < lanes; ++t) pool.emplace_back(run, t, lanes);
        for (auto& t : pool) t.join();
    }
    r.labels = clustering::predict_labels(r.Q);
    return r;
}

// -----------------------------------------------------------------------------
// Training
// -----------------------------------------------------------------------------

namespace {

constexpr Eigen::Index kEvalBatch = 1024;

LossParts& operator+=(LossParts& a, const LossParts& b) {
    a.L += b.L;
    a.L_s += b.L_s;
    a.L_c += b.L_c;
    a.L_a += b.L_a;
    a.L_d += b.L_d;
    a.L_com += b.L_com;
    return a;
}

LossParts scaled(LossParts a, double s) {
    a.L *= s;
    a.L_s *= s;
    a.L_c *= s;
    a.L_a *= s;
    a.L_d *= s;
    a.L_com *= s;
    return a;
}

std::vector<double> log_of(const std::vector<double>& v, const IndexVector& idx) {
    std::vector<double> out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) out[i] = std::log(v[static_cast<std::size_t>(idx[i])]);
    return out;
}

}  // namespace

TrainResult train(const Dataset& ds, const TrainConfig& cfg_in, const TrainOptions& opts) {
    TrainConfig cfg = cfg_in;
    cfg.validate();
    const Eigen::Index n = ds.n_cells();
    if (n < cfg.K) {
        throw Error(ErrorKind::InsufficientCells, std::to_string(n) + " cells for K=" + std::to_string(cfg.K));
    }
    require_shape(ds.hvg_counts.rows() == n && ds.hvg_counts.cols() == ds.n_genes(), "dataset counts shape");
    if (cfg.size_factor_mean && static_cast<Eigen::Index>(ds.size_factors.size()) != n) {
        throw Error(ErrorKind::ShapeMismatch, "size factors missing from dataset");
    }

    Model model(cfg, ds.n_genes());
    Adam adam(cfg.learning_rate);
    std::mt19937_64 rng(cfg.seed);
    const int threads = std::max(1, opts.eval_threads);
    const bool anchors_on = !cfg.disable_L_a && cfg.w_a > 0.0;

    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    const Eigen::Index bs = std::min<Eigen::Index>(cfg.batch_size, n);

    // Codebook from encodings of the first shuffled batch.
    {
        std::vector<Eigen::Index> first = order;
        std::shuffle(first.begin(), first.end(), std::mt19937_64(cfg.seed ^ 0x9e3779b97f4a7c15ULL));
        IndexVector idx(first.begin(), first.begin() + bs);
        model.init_codebook(gather_rows(ds.processed, idx), rng);
    }

    TrainResult out{model, {}, {}, {}, {}, 0};
    std::vector<int> kmeans_labels;

    auto start_clustering = [&](std::uint64_t salt) {
        const EvalResult e = evaluate(model, ds.processed, kEvalBatch, threads);
        auto km = clustering::kmeans(e.Z, static_cast<int>(cfg.K), cfg.seed + salt);
        model.set_centroids(km.centroids);
        kmeans_labels = std::move(km.labels);
    };

    Tensor2 P;
    auto refresh_target = [&]() {
        const EvalResult e = evaluate(model, ds.processed, kEvalBatch, threads);
        try {
            P = clustering::target_distribution(e.Q);
        } catch (const Error& err) {
            if (err.kind() != ErrorKind::DegenerateCluster || out.centroid_reinits > 0) throw;
            ++out.centroid_reinits;
            start_clustering(0x51ed);
            P = clustering::target_distribution(evaluate(model, ds.processed, kEvalBatch, threads).Q);
        }
    };

    ParamStore last_good = model.params();
    auto fail_non_finite = [&](const Error& err) -> void {
        model.params() = last_good;
        if (!opts.checkpoint_on_failure.empty()) save_checkpoint(opts.checkpoint_on_failure, last_good);
        throw Error(ErrorKind::NonFinite, std::string(err.what()) + "; parameters restored to the last finite epoch");
    };

    if (cfg.warmup_epochs == 0) start_clustering(0);

    std::int64_t step = 0;
    std::vector<std::int64_t> usage(static_cast<std::size_t>(cfg.m), 0);
    for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const bool joint = epoch >= cfg.warmup_epochs;
        if (joint && cfg.update_target_every == 0) refresh_target();

        std::shuffle(order.begin(), order.end(), rng);
        std::fill(usage.begin(), usage.end(), 0);
        LossParts sum;
        std::int64_t n_steps = 0;
        Tensor2 last_x;

        for (Eigen::Index b0 = 0; b0 < n; b0 += bs) {
            const Eigen::Index rows = std::min(bs, n - b0);
            const IndexVector idx(order.begin() + b0, order.begin() + b0 + rows);
            if (joint && cfg.update_target_every > 0 && (step % cfg.update_target_every == 0 || P.size() == 0)) {
                refresh_target();
            }
            const Tensor2 x = gather_rows(ds.processed, idx);
            const Tensor2 counts = gather_rows(ds.hvg_counts, idx);
            Tensor2 target;
            if (joint) target = gather_rows(P, idx);
            std::vector<double> log_sf;
            if (cfg.size_factor_mean) log_sf = log_of(ds.size_factors, idx);

            // Warm-up drops the clustering term by omitting the target.
            const Batch batch{x, counts, joint ? &target : nullptr, cfg.size_factor_mean ? &log_sf : nullptr};
            model.params().zero_grad();
            LossEval le;
            try {
                le = total_loss(model, batch, true);
            } catch (const Error& err) {
                if (err.kind() != ErrorKind::NonFinite) throw;
                fail_non_finite(err);
            }
            adam.step(model.params());
            ++step;
            sum += le.parts;
            ++n_steps;
            for (auto j : le.routing.indices) ++usage[static_cast<std::size_t>(j)];
            last_x = x;
        }

        for (const auto& p : model.params()) {
            if (!all_finite(p.value)) fail_non_finite(Error(ErrorKind::NonFinite, "parameter " + p.name));
        }

        // Dead anchors restart at an encoded cell of the last batch.
        if (anchors_on && last_x.rows() > 0) {
            std::vector<Eigen::Index> dead;
            for (std::size_t j = 0; j < usage.size(); ++j) {
                if (usage[j] == 0) dead.push_back(static_cast<Eigen::Index>(j));
            }
            if (!dead.empty()) {
                const Tensor2 h = model.encode(last_x);
                std::uniform_int_distribution<Eigen::Index> pick(0, h.rows() - 1);
                std::normal_distribution<double> noise(0.0, cfg.anchor_reset_noise);
                for (Eigen::Index j : dead) {
                    auto row = model.U().row(j);
                    row = h.row(pick(rng));
                    for (Eigen::Index c = 0; c < row.size(); ++c) row(c) += noise(rng);
                }
                adam.reset_rows(model.U_index(), dead);
            }
        }

        last_good = model.params();
        EpochRecord rec{epoch + 1, scaled(sum, n_steps > 0 ? 1.0 / static_cast<double>(n_steps) : 0.0)};
        out.history.push_back(rec);
        if (opts.on_epoch) opts.on_epoch(rec);

        if (epoch + 1 == cfg.warmup_epochs) start_clustering(0);
    }

    out.anchor_usage = usage;
    if (cfg.warmup_epochs == cfg.epochs) {
        out.labels = kmeans_labels;
    } else {
        out.labels = evaluate(model, ds.processed, kEvalBatch, threads).labels;
    }
    out.metrics = compute_metrics(out.labels, cfg.K, opts.truth);
    out.model = std::move(model);
    return out;
}

// -----------------------------------------------------------------------------
// Exporters
// -----------------------------------------------------------------------------

namespace {

std::ofstream open_out(const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw Error(ErrorKind::IoError, "cannot write " + path);
    os << std::setprecision(17);
    return os;
}

void close_out(std::ofstream& os, const std::string& path) {
    os.flush();
    if (!os) throw Error(ErrorKind::IoError, "write failed for " + path);
}

}  // namespace

void write_labels_csv(const std::string& path, const std::vector<std::string>& cell_ids,
                      const std::vector<int>& labels) {
    if (!cell_ids.empty() && cell_ids.size() != labels.size()) {
        throw Error(ErrorKind::ShapeMismatch, "cell id count differs from label count");
    }
    auto os = open_out(path);
    os << "cell_id,label\n";
    for (std::size_t i = 0; i < labels.size(); ++i) {
        os << (cell_ids.empty() ? "cell_" + std::to_string(i) : cell_ids[i]) << ',' << labels[i] << '\n';
    }
    close_out(os, path);
}

void write_metrics_json(const std::string& path, const Metrics& m) {
    nlohmann::ordered_json j;
    if (m.acc) j["acc"] = *m.acc;
    if (m.ari) j["ari"] = *m.ari;
    j["n"] = m.n;
    j["K"] = m.K;
    j["cluster_sizes"] = m.cluster_sizes;
    auto os = open_out(path);
    os << j.dump(2) << '\n';
    close_out(os, path);
}

void write_loss_history_csv(const std::string& path, const std::vector<EpochRecord>& history) {
    auto os = open_out(path);
    os << "epoch,L,L_s,L_c,L_a\n";
    for (const auto& r : history) {
        os << r.epoch << ',' << r.parts.L << ',' << r.parts.L_s << ',' << r.parts.L_c << ',' << r.parts.L_a << '\n';
    }
    close_out(os, path);
}

void write_matrix_csv(const std::string& path, const Tensor2& a, const std::string& column_prefix) {
    auto os = open_out(path);
    for (Eigen::Index c = 0; c < a.cols(); ++c) os << (c ? "," : "") << column_prefix << c;
    os << '\n';
    for (Eigen::Index r = 0; r < a.rows(); ++r) {
        for (Eigen::Index c = 0; c < a.cols(); ++c) os << (c ? "," : "") << a(r, c);
        os << '\n';
    }
    close_out(os, path);
}

void write_codebook(const std::string& dir, const Tensor2& U, const std::vector<std::int64_t>& usage) {
    const std::filesystem::path d(dir);
    write_matrix_csv((d / "codebook.csv").string(), U, "u");
    nlohmann::ordered_json j;
    j["m"] = U.rows();
    j["d_u"] = U.cols();
    j["usage_counts"] = usage;
    const std::string path = (d / "codebook.json").string();
    auto os = open_out(path);
    os << j.dump(2) << '\n';
    close_out(os, path);
}

void write_attention(const std::string& dir, const std::vector<Tensor2>& B, const std::vector<int>* labels,
                     std::int64_t K) {
    const std::filesystem::path d(dir);
    for (std::size_t h = 0; h < B.size(); ++h) {
        write_matrix_csv((d / ("attention_head" + std::to_string(h) + ".csv")).string(), B[h], "anchor");
        if (labels != nullptr) {
            const Tensor2 s = attention::class_attention_summary(B[h], *labels, static_cast<int>(K));
            write_matrix_csv((d / ("attention_head" + std::to_string(h) + "_by_cluster.csv")).string(), s, "anchor");
        }
    }
}

}  // namespace bgformer
