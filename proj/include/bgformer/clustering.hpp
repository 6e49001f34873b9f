#pragma once

#include <cstdint>
#include <vector>

#include "bgformer/tensor.hpp"

namespace bgformer::clustering {

struct ClusterState {
    Tensor2 centroids;  // K x d_z
    double alpha = 1.0;

    Eigen::Index K() const { return centroids.rows(); }
};

/// Student-t kernel soft assignment, rows sum to one.
Tensor2 soft_assign(const Tensor2& Z, const ClusterState& cs);

/// Sharpened target p_ij proportional to q_ij^2 / f_j, f_j = sum_i q_ij.
Tensor2 target_distribution(const Tensor2& Q);

/// KL(P || Q) summed over all rows, with 0 log 0 = 0.
double dec_loss(const Tensor2& P, const Tensor2& Q);

struct DecGrads {
    double loss = 0.0;
    Tensor2 Q;
    Tensor2 dZ;
    Tensor2 dcentroids;
};

/// KL(P || soft_assign(Z)) and its gradient w.r.t. Z and the centroids, with P held fixed.
DecGrads dec_loss_backward(const Tensor2& Z, const ClusterState& cs, const Tensor2& P);

struct KMeansResult {
    Tensor2 centroids;
    std::vector<int> labels;
    int iterations = 0;
    bool converged = false;
    double inertia = 0.0;  // sum of squared distances to the assigned centroid
};

/// Lloyd iterations from farthest-first seeding. Each start draws its first
/// seed point from `seed`; the start with the lowest inertia wins. An emptied
/// cluster takes the point farthest from its current centroid.
KMeansResult kmeans(const Tensor2& Z, int K, std::uint64_t seed, int max_iter = 100, int restarts = 10);

ClusterState init_centroids(const Tensor2& Z, int K, std::uint64_t seed, double alpha = 1.0);

/// Row argmax with ties to the smallest index.
std::vector<int> predict_labels(const Tensor2& Q);

/// Accuracy under the best one-to-one mapping from predicted to true labels.
double metric_acc(const std::vector<int>& pred, const std::vector<int>& truth);

double metric_ari(const std::vector<int>& pred, const std::vector<int>& truth);

/// Minimum-cost perfect matching on a square cost matrix; returns the column
/// assigned to each row.
std::vector<int> hungarian_min_cost(const std::vector<std::vector<double>>& cost);

}  // namespace bgformer::clustering
