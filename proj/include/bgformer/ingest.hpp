#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/SparseCore>

#include "bgformer/tensor.hpp"

namespace bgformer::ingest {

using CountMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor, std::int64_t>;

/// Raw counts (cells x genes) plus everything derived from them by the
/// preprocessing chain. `processed` stays empty until normalize_log runs.
struct ExpressionMatrix {
    CountMatrix raw_counts;
    Tensor2 processed;
    std::vector<std::string> gene_names;
    std::vector<std::int64_t> selected_genes;
    std::vector<std::string> cell_ids;
    std::vector<double> size_factors;

    Eigen::Index n_cells() const { return raw_counts.rows(); }
    Eigen::Index n_genes() const { return raw_counts.cols(); }

    /// Dense raw counts restricted to `selected_genes`, in selection order.
    Tensor2 hvg_counts() const;
};

enum class CountFormat { MatrixMarket, DenseCsv };

CountFormat parse_format(const std::string& name);

ExpressionMatrix load_counts(const std::string& path, CountFormat format);
ExpressionMatrix parse_dense_csv(const std::string& text);
ExpressionMatrix parse_matrix_market(const std::string& text);

/// Coordinate/integer/general MatrixMarket, one-based, row-major entry order.
void write_matrix_market(const std::string& path, const CountMatrix& counts);

/// Drops cells with fewer than `min_genes_per_cell` detected genes, then genes
/// detected in fewer than `min_cells_per_gene` of the surviving cells.
ExpressionMatrix filter_qc(const ExpressionMatrix& em, std::int64_t min_genes_per_cell,
                           std::int64_t min_cells_per_gene);

/// Per-gene variance/mean of raw counts (population variance). Zero-mean genes get -inf.
std::vector<double> gene_dispersion(const CountMatrix& counts);

/// Keeps the `d` most dispersed genes; ties go to the lower gene index and the
/// result lists indices in ascending (original column) order.
ExpressionMatrix select_hvg(const ExpressionMatrix& em, std::int64_t d);

/// Library-size normalization by median total, log1p, then per-gene z-scoring.
ExpressionMatrix normalize_log(const ExpressionMatrix& em);

/// filter_qc, select_hvg and normalize_log in sequence.
ExpressionMatrix preprocess(const ExpressionMatrix& em, std::int64_t d, std::int64_t min_genes_per_cell = 1,
                            std::int64_t min_cells_per_gene = 1);

/// Integer or string labels, one per line, encoded to 0..K-1 by first appearance.
struct LabelSet {
    std::vector<int> codes;
    std::vector<std::string> names;
    int num_classes() const { return static_cast<int>(names.size()); }
};

LabelSet load_labels(const std::string& path);
LabelSet encode_labels(const std::vector<std::string>& raw);

/// Model-facing view of a preprocessed matrix: everything training and
/// evaluation need, and exactly what the BGD1 bundle stores.
struct Dataset {
    Tensor2 processed;    // n x d
    Tensor2 hvg_counts;   // n x d raw counts of the selected genes
    std::vector<double> size_factors;
    std::vector<std::int64_t> selected_genes;
    std::vector<std::string> gene_names;  // names of the selected genes
    std::vector<std::string> cell_ids;
    std::int64_t total_genes = 0;         // d' after QC

    Eigen::Index n_cells() const { return processed.rows(); }
    Eigen::Index n_genes() const { return processed.cols(); }
};

Dataset to_dataset(const ExpressionMatrix& em);

// BGD1 bundle, little-endian:
//   "BGD1", u64 n, u64 d, u64 d_prime,
//   d x u64 selected gene indices, n x f64 size factors,
//   n*d f64 processed (row-major), n*d f64 raw HVG counts (row-major),
//   then n cell ids and d gene names, each as u32 length + bytes.
void save_bundle(const std::string& path, const Dataset& ds);
Dataset load_bundle(const std::string& path);

}  // namespace bgformer::ingest
