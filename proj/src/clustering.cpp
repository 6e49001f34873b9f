#include "bgformer/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <random>

namespace bgformer::clustering {

namespace {

// Squared Euclidean distances, n x K, clamped at zero.
Tensor2 sq_distances(const Tensor2& Z, const Tensor2& C) {
    const Vector zn = Z.rowwise().squaredNorm();
    const Vector cn = C.rowwise().squaredNorm();
    Tensor2 d = matmul_nt(Z, C);
    d *= -2.0;
    d.colwise() += zn;
    d.rowwise() += cn.transpose();
    return d.cwiseMax(0.0);
}

double kernel_exponent(double alpha) { return (alpha + 1.0) / 2.0; }

Tensor2 soft_assign_from_distances(const Tensor2& D, double alpha) {
    const double c = kernel_exponent(alpha);
    Tensor2 Q(D.rows(), D.cols());
    for (Eigen::Index i = 0; i < D.rows(); ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < D.cols(); ++j) {
            Q(i, j) = -c * std::log1p(D(i, j) / alpha);
            mx = std::max(mx, Q(i, j));
        }
        double total = 0.0;
        for (Eigen::Index j = 0; j < D.cols(); ++j) {
            Q(i, j) = std::exp(Q(i, j) - mx);
            total += Q(i, j);
        }
        Q.row(i) /= total;
    }
    return Q;
}

std::vector<int> compact(const std::vector<int>& labels, int& count) {
    std::map<int, int> code;
    for (int l : labels) code.emplace(l, 0);
    int next = 0;
    for (auto& [label, c] : code) c = next++;
    count = next;
    std::vector<int> out(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) out[i] = code[labels[i]];
    return out;
}

double choose2(double x) { return x * (x - 1.0) / 2.0; }

}  // namespace

Tensor2 soft_assign(const Tensor2& Z, const ClusterState& cs) {
    require_shape(Z.cols() == cs.centroids.cols(),
                  "soft_assign: Z " + shape_str(Z) + " vs centroids " + shape_str(cs.centroids));
    return soft_assign_from_distances(sq_distances(Z, cs.centroids), cs.alpha);
}

Tensor2 target_distribution(const Tensor2& Q) {
    const Eigen::RowVectorXd f = Q.colwise().sum();
    for (Eigen::Index j = 0; j < f.size(); ++j) {
        if (f(j) <= 0.0) {
            throw Error(ErrorKind::DegenerateCluster, "cluster " + std::to_string(j) + " has zero total assignment");
        }
    }
    Tensor2 P = Q.array().square().rowwise() / f.array();
    const Vector row_sum = P.rowwise().sum();
    P.array().colwise() /= row_sum.array();
    return P;
}

double dec_loss(const Tensor2& P, const Tensor2& Q) {
    require_shape(P.rows() == Q.rows() && P.cols() == Q.cols(), "dec_loss: P and Q shapes differ");
    double total = 0.0;
    for (Eigen::Index i = 0; i < P.rows(); ++i) {
        for (Eigen::Index j = 0; j < P.cols(); ++j) {
            const double p = P(i, j);
            if (p == 0.0) continue;
            if (Q(i, j) <= 0.0) {
                throw Error(ErrorKind::NonFinite, "q is zero where p is positive");
            }
            total += p * (std::log(p) - std::log(Q(i, j)));
        }
    }
    return total;
}

DecGrads dec_loss_backward(const Tensor2& Z, const ClusterState& cs, const Tensor2& P) {
    require_shape(P.rows() == Z.rows() && P.cols() == cs.K(), "dec_loss_backward: P shape");
    const Tensor2 D = sq_distances(Z, cs.centroids);
    DecGrads g;
    g.Q = soft_assign_from_distances(D, cs.alpha);
    g.loss = dec_loss(P, g.Q);

    const double c = kernel_exponent(cs.alpha);
    const Vector p_rows = P.rowwise().sum();
    Tensor2 coef(D.rows(), D.cols());
    for (Eigen::Index i = 0; i < D.rows(); ++i) {
        for (Eigen::Index j = 0; j < D.cols(); ++j) {
            const double dr = g.Q(i, j) * p_rows(i) - P(i, j);
            coef(i, j) = -2.0 * c * dr / (cs.alpha + D(i, j));
        }
    }
    const Vector coef_rows = coef.rowwise().sum();
    const Eigen::RowVectorXd coef_cols = coef.colwise().sum();
    g.dZ = Z.array().colwise() * coef_rows.array();
    g.dZ -= matmul(coef, cs.centroids);
    g.dcentroids = cs.centroids.array().colwise() * coef_cols.transpose().array();
    g.dcentroids -= matmul_tn(coef, Z);
    return g;
}

namespace {

KMeansResult lloyd_from(const Tensor2& Z, int K, Eigen::Index first, int max_iter) {
    const Eigen::Index n = Z.rows();
    Tensor2 C(K, Z.cols());
    C.row(0) = Z.row(first);
    Vector nearest = (Z.rowwise() - C.row(0)).rowwise().squaredNorm();
    for (int k = 1; k < K; ++k) {
        Eigen::Index far = 0;
        nearest.maxCoeff(&far);
        C.row(k) = Z.row(far);
        nearest = nearest.cwiseMin((Z.rowwise() - C.row(k)).rowwise().squaredNorm());
    }

    KMeansResult r;
    r.labels.assign(static_cast<std::size_t>(n), -1);
    for (r.iterations = 0; r.iterations < max_iter; ++r.iterations) {
        const Tensor2 D = sq_distances(Z, C);
        bool changed = false;
        for (Eigen::Index i = 0; i < n; ++i) {
            Eigen::Index best = 0;
            for (Eigen::Index k = 1; k < K; ++k) {
                if (D(i, k) < D(i, best)) best = k;
            }
            if (r.labels[static_cast<std::size_t>(i)] != static_cast<int>(best)) {
                r.labels[static_cast<std::size_t>(i)] = static_cast<int>(best);
                changed = true;
            }
        }
        if (!changed) {
            r.converged = true;
            break;
        }
        Tensor2 sum = Tensor2::Zero(K, Z.cols());
        std::vector<std::int64_t> count(static_cast<std::size_t>(K), 0);
        for (Eigen::Index i = 0; i < n; ++i) {
            sum.row(r.labels[static_cast<std::size_t>(i)]) += Z.row(i);
            ++count[static_cast<std::size_t>(r.labels[static_cast<std::size_t>(i)])];
        }
        for (int k = 0; k < K; ++k) {
            if (count[static_cast<std::size_t>(k)] > 0) {
                C.row(k) = sum.row(k) / static_cast<double>(count[static_cast<std::size_t>(k)]);
                continue;
            }
            // Empty cluster: take the point farthest from its own centroid.
            Eigen::Index far = 0;
            double far_d = -1.0;
            for (Eigen::Index i = 0; i < n; ++i) {
                const double dist = D(i, r.labels[static_cast<std::size_t>(i)]);
                if (dist > far_d) {
                    far_d = dist;
                    far = i;
                }
            }
            C.row(k) = Z.row(far);
            r.labels[static_cast<std::size_t>(far)] = k;
        }
    }
    r.centroids = std::move(C);
    const Tensor2 D = sq_distances(Z, r.centroids);
    for (Eigen::Index i = 0; i < n; ++i) r.inertia += D(i, r.labels[static_cast<std::size_t>(i)]);
    return r;
}

}  // namespace

KMeansResult kmeans(const Tensor2& Z, int K, std::uint64_t seed, int max_iter, int restarts) {
    const Eigen::Index n = Z.rows();
    if (K < 1) throw Error(ErrorKind::InvalidArgument, "k-means needs K >= 1");
    if (restarts < 1) throw Error(ErrorKind::InvalidArgument, "k-means needs at least one start");
    if (n < K) {
        throw Error(ErrorKind::InsufficientCells, std::to_string(n) + " cells for " + std::to_string(K) + " clusters");
    }
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
    KMeansResult best;
    for (int s = 0; s < restarts; ++s) {
        KMeansResult r = lloyd_from(Z, K, pick(rng), max_iter);
        if (s == 0 || r.inertia < best.inertia) best = std::move(r);
    }
    return best;
}

ClusterState init_centroids(const Tensor2& Z, int K, std::uint64_t seed, double alpha) {
    ClusterState cs;
    cs.centroids = kmeans(Z, K, seed).centroids;
    cs.alpha = alpha;
    return cs;
}

std::vector<int> predict_labels(const Tensor2& Q) {
    std::vector<int> labels(static_cast<std::size_t>(Q.rows()));
    for (Eigen::Index i = 0; i < Q.rows(); ++i) {
        Eigen::Index best = 0;
        for (Eigen::Index j = 1; j < Q.cols(); ++j) {
            if (Q(i, j) > Q(i, best)) best = j;
        }
        labels[static_cast<std::size_t>(i)] = static_cast<int>(best);
    }
    return labels;
}

std::vector<int> hungarian_min_cost(const std::vector<std::vector<double>>& cost) {
    // Shortest augmenting path with row/column potentials, 1-based internally.
    const int n = static_cast<int>(cost.size());
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
    std::vector<int> p(n + 1, 0), way(n + 1, 0);
    std::vector<char> used(n + 1);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::fill(minv.begin(), minv.end(), inf);
        std::fill(used.begin(), used.end(), 0);
        do {
            used[j0] = 1;
            const int i0 = p[j0];
            double delta = inf;
            int j1 = 0;
            for (int j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<int> assignment(static_cast<std::size_t>(n), -1);
    for (int j = 1; j <= n; ++j) {
        if (p[j] != 0) assignment[static_cast<std::size_t>(p[j] - 1)] = j - 1;
    }
    return assignment;
}

double metric_acc(const std::vector<int>& pred, const std::vector<int>& truth) {
    require_shape(pred.size() == truth.size(), "metric_acc: label vectors differ in length");
    if (pred.empty()) throw Error(ErrorKind::InvalidArgument, "metric_acc of no cells");
    int kp = 0, kt = 0;
    const auto p = compact(pred, kp);
    const auto t = compact(truth, kt);
    const int size = std::max(kp, kt);
    std::vector<std::vector<double>> cost(static_cast<std::size_t>(size), std::vector<double>(static_cast<std::size_t>(size), 0.0));
    for (std::size_t i = 0; i < p.size(); ++i) cost[static_cast<std::size_t>(p[i])][static_cast<std::size_t>(t[i])] -= 1.0;
    const auto match = hungarian_min_cost(cost);
    double hits = 0.0;
    for (int r = 0; r < size; ++r) hits -= cost[static_cast<std::size_t>(r)][static_cast<std::size_t>(match[static_cast<std::size_t>(r)])];
    return hits / static_cast<double>(pred.size());
}

double metric_ari(const std::vector<int>& pred, const std::vector<int>& truth) {
    require_shape(pred.size() == truth.size(), "metric_ari: label vectors differ in length");
    if (pred.empty()) throw Error(ErrorKind::InvalidArgument, "metric_ari of no cells");
    if (pred.size() < 2) return 1.0;
    int kp = 0, kt = 0;
    const auto p = compact(pred, kp);
    const auto t = compact(truth, kt);
    std::vector<double> table(static_cast<std::size_t>(kp * kt), 0.0);
    std::vector<double> a(static_cast<std::size_t>(kp), 0.0), b(static_cast<std::size_t>(kt), 0.0);
    for (std::size_t i = 0; i < p.size(); ++i) {
        table[static_cast<std::size_t>(p[i] * kt + t[i])] += 1.0;
        a[static_cast<std::size_t>(p[i])] += 1.0;
        b[static_cast<std::size_t>(t[i])] += 1.0;
    }
    double index = 0.0, sum_a = 0.0, sum_b = 0.0;
    for (double c : table) index += choose2(c);
    for (double c : a) sum_a += choose2(c);
    for (double c : b) sum_b += choose2(c);
    const double expected = sum_a * sum_b / choose2(static_cast<double>(pred.size()));
    const double max_index = 0.5 * (sum_a + sum_b);
    if (max_index == expected) return 1.0;
    return (index - expected) / (max_index - expected);
}

}  // namespace bgformer::clustering
