#include "bgformer/attention.hpp"

#include <cmath>

#include "bgformer/kernels.hpp"

namespace bgformer::attention {

FullAttentionResult full_self_attention(const Tensor2& X, const FullAttentionParams& p) {
    require_shape(X.rows() >= 1, "full_self_attention needs at least one cell");
    require_shape(p.W_Q.rows() == X.cols() && p.W_K.rows() == X.cols() && p.W_V.rows() == X.cols(),
                  "full attention projections must have " + std::to_string(X.cols()) + " rows");
    require_shape(p.W_Q.cols() == p.W_K.cols() && p.W_Q.cols() > 0, "W_Q and W_K widths differ");
    const Tensor2 q = matmul(X, p.W_Q);
    const Tensor2 k = matmul(X, p.W_K);
    const Tensor2 v = matmul(X, p.W_V);
    Tensor2 scores = matmul_nt(q, k);
    scores *= 1.0 / std::sqrt(static_cast<double>(p.W_Q.cols()));
    flop_counter().flops += static_cast<std::uint64_t>(scores.size());
    FullAttentionResult r;
    r.A = kernels::row_softmax(scores);
    r.Z_hat = matmul(r.A, v);
    return r;
}

Tensor2 full_self_attention_streamed(const Tensor2& X, const FullAttentionParams& p,
                                     Eigen::Index block_rows) {
    require_shape(X.rows() >= 1, "full_self_attention needs at least one cell");
    require_shape(p.W_Q.cols() == p.W_K.cols() && p.W_Q.cols() > 0, "W_Q and W_K widths differ");
    const Tensor2 q = matmul(X, p.W_Q);
    const Tensor2 k = matmul(X, p.W_K);
    const Tensor2 v = matmul(X, p.W_V);
    const double scale = 1.0 / std::sqrt(static_cast<double>(p.W_Q.cols()));
    Tensor2 out(X.rows(), v.cols());
    for (Eigen::Index r0 = 0; r0 < X.rows(); r0 += block_rows) {
        const Eigen::Index rows = std::min(block_rows, X.rows() - r0);
        Tensor2 scores = matmul_nt(q.middleRows(r0, rows), k);
        scores *= scale;
        flop_counter().flops += static_cast<std::uint64_t>(scores.size());
        out.middleRows(r0, rows) = matmul(kernels::row_softmax(scores), v);
    }
    return out;
}

HeadCache bipartite_head_forward(const Tensor2& X, const Tensor2& U, const Tensor2& W_p,
                                 const Tensor2& W_k, const Tensor2& W_v, bool scale_scores) {
    require_shape(U.rows() >= 1, "bipartite attention needs at least one anchor");
    require_shape(W_p.rows() == X.cols(), "W_p " + shape_str(W_p) + " vs X " + shape_str(X));
    require_shape(W_k.rows() == U.cols() && W_v.rows() == U.cols(),
                  "W_k/W_v rows must match anchor width " + std::to_string(U.cols()));
    require_shape(W_p.cols() == W_k.cols(), "W_p and W_k widths differ");
    HeadCache c;
    c.queries = matmul(X, W_p);
    c.keys = matmul(U, W_k);
    c.values = matmul(U, W_v);
    Tensor2 scores = matmul_nt(c.queries, c.keys);
    if (scale_scores) {
        c.scale = 1.0 / std::sqrt(static_cast<double>(W_p.cols()));
        scores *= c.scale;
        flop_counter().flops += static_cast<std::uint64_t>(scores.size());
    }
    c.B = kernels::row_softmax(scores);
    c.Z = matmul(c.B, c.values);
    return c;
}

HeadResult bipartite_head(const Tensor2& X, const Tensor2& U, const BipartiteHead& head,
                          bool scale_scores) {
    HeadCache c = bipartite_head_forward(X, U, head.W_p, head.W_k, head.W_v, scale_scores);
    return HeadResult{std::move(c.B), std::move(c.Z)};
}

HeadGrads bipartite_head_backward(const Tensor2& X, const Tensor2& U, const Tensor2& W_p,
                                  const Tensor2& W_k, const Tensor2& W_v, const HeadCache& cache,
                                  const Tensor2& dZ, bool want_dX) {
    require_shape(dZ.rows() == cache.Z.rows() && dZ.cols() == cache.Z.cols(), "head dZ shape");
    HeadGrads g;
    const Tensor2 dB = matmul_nt(dZ, cache.values);
    const Tensor2 dvalues = matmul_tn(cache.B, dZ);
    Tensor2 dscores = kernels::row_softmax_backward(cache.B, dB);
    if (cache.scale != 1.0) dscores *= cache.scale;
    const Tensor2 dqueries = matmul(dscores, cache.keys);
    const Tensor2 dkeys = matmul_tn(dscores, cache.queries);
    g.dW_p = matmul_tn(X, dqueries);
    g.dW_k = matmul_tn(U, dkeys);
    g.dW_v = matmul_tn(U, dvalues);
    g.dU = matmul_nt(dkeys, W_k) + matmul_nt(dvalues, W_v);
    if (want_dX) g.dX = matmul_nt(dqueries, W_p);
    return g;
}

MultiHeadResult multi_head_bipartite(const Tensor2& X, const Tensor2& U,
                                     const BipartiteAttentionParams& p) {
    require_shape(!p.heads.empty(), "multi_head_bipartite needs at least one head");
    MultiHeadResult r;
    std::vector<Tensor2> parts;
    for (const auto& head : p.heads) {
        require_shape(head.W_v.cols() == p.heads.front().W_v.cols() &&
                          head.W_p.cols() == p.heads.front().W_p.cols(),
                      "all heads must share d_k and d_h");
        HeadResult h = bipartite_head(X, U, head, p.scale_scores);
        r.B_list.push_back(std::move(h.B));
        parts.push_back(std::move(h.Z_head));
    }
    r.Z_out = kernels::concat_cols(parts);
    return r;
}

Tensor2 residual_embed(const Tensor2& X, const Tensor2& Z_out, const Tensor2& W_c) {
    require_shape(W_c.rows() == X.cols(), "W_c " + shape_str(W_c) + " vs X " + shape_str(X));
    require_shape(W_c.cols() == Z_out.cols() && Z_out.rows() == X.rows(),
                  "W_c " + shape_str(W_c) + " vs Z_out " + shape_str(Z_out));
    Tensor2 z = matmul(X, W_c);
    z += Z_out;
    flop_counter().flops += static_cast<std::uint64_t>(z.size());
    return z;
}

Tensor2 class_attention_summary(const Tensor2& B, const std::vector<int>& labels, int K) {
    require_shape(static_cast<Eigen::Index>(labels.size()) == B.rows(), "one label per attention row");
    if (K < 1) throw Error(ErrorKind::InvalidArgument, "class count must be >= 1");
    Tensor2 sum = Tensor2::Zero(K, B.cols());
    std::vector<std::int64_t> count(static_cast<std::size_t>(K), 0);
    for (Eigen::Index i = 0; i < B.rows(); ++i) {
        const int k = labels[static_cast<std::size_t>(i)];
        if (k < 0 || k >= K) {
            throw Error(ErrorKind::LabelOutOfRange, "label " + std::to_string(k) + " outside [0, " +
                                                        std::to_string(K) + ")");
        }
        sum.row(k) += B.row(i);
        ++count[static_cast<std::size_t>(k)];
    }
    for (int k = 0; k < K; ++k) {
        if (count[static_cast<std::size_t>(k)] > 0) sum.row(k) /= static_cast<double>(count[static_cast<std::size_t>(k)]);
    }
    return sum;
}

}  // namespace bgformer::attention
