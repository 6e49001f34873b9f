#pragma once

#include <vector>

#include "bgformer/tensor.hpp"

namespace bgformer::attention {

/// Quadratic cell-to-cell attention baseline.
struct FullAttentionParams {
    Tensor2 W_Q;  // d x d_k
    Tensor2 W_K;  // d x d_k
    Tensor2 W_V;  // d x d_v
};

struct FullAttentionResult {
    Tensor2 A;      // n x n, row-stochastic
    Tensor2 Z_hat;  // n x d_v
};

FullAttentionResult full_self_attention(const Tensor2& X, const FullAttentionParams& p);

/// Same output as full_self_attention but streamed over row blocks so the
/// n x n matrix is never held in memory. Flop count is identical.
Tensor2 full_self_attention_streamed(const Tensor2& X, const FullAttentionParams& p,
                                     Eigen::Index block_rows = 256);

/// One cell-to-anchor head. Query projection acts on cells, key/value on anchors.
struct BipartiteHead {
    Tensor2 W_p;  // d   x d_k
    Tensor2 W_k;  // d_u x d_k
    Tensor2 W_v;  // d_u x d_h
};

struct BipartiteAttentionParams {
    std::vector<BipartiteHead> heads;
    Tensor2 W_c;  // d x (l * d_h)
    bool scale_scores = false;
};

/// Intermediates kept for the backward pass of one head.
struct HeadCache {
    Tensor2 queries;  // X W_p,   n x d_k
    Tensor2 keys;     // U W_k,   m x d_k
    Tensor2 values;   // U W_v,   m x d_h
    Tensor2 B;        // n x m
    Tensor2 Z;        // n x d_h
    double scale = 1.0;
};

HeadCache bipartite_head_forward(const Tensor2& X, const Tensor2& U, const Tensor2& W_p,
                                 const Tensor2& W_k, const Tensor2& W_v, bool scale_scores);

struct HeadResult {
    Tensor2 B;       // n x m
    Tensor2 Z_head;  // n x d_h
};

HeadResult bipartite_head(const Tensor2& X, const Tensor2& U, const BipartiteHead& head,
                          bool scale_scores);

struct HeadGrads {
    Tensor2 dX;
    Tensor2 dU;
    Tensor2 dW_p;
    Tensor2 dW_k;
    Tensor2 dW_v;
};

HeadGrads bipartite_head_backward(const Tensor2& X, const Tensor2& U, const Tensor2& W_p,
                                  const Tensor2& W_k, const Tensor2& W_v, const HeadCache& cache,
                                  const Tensor2& dZ, bool want_dX = false);

struct MultiHeadResult {
    std::vector<Tensor2> B_list;
    Tensor2 Z_out;  // n x (l * d_h), heads concatenated in order
};

MultiHeadResult multi_head_bipartite(const Tensor2& X, const Tensor2& U,
                                     const BipartiteAttentionParams& p);

/// Z = Z_out + X W_c
Tensor2 residual_embed(const Tensor2& X, const Tensor2& Z_out, const Tensor2& W_c);

/// Row k = mean attention row over cells labelled k; empty classes stay zero.
Tensor2 class_attention_summary(const Tensor2& B, const std::vector<int>& labels, int K);

}  // namespace bgformer::attention
