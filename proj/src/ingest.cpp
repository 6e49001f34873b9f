#include "bgformer/ingest.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_map>

namespace bgformer::ingest {

namespace {

std::string read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error(ErrorKind::IoError, "cannot open " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

std::vector<std::string_view> split(std::string_view line, char sep) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = line.find(sep, start);
        if (pos == std::string_view::npos) {
            out.push_back(trim(line.substr(start)));
            break;
        }
        out.push_back(trim(line.substr(start, pos - start)));
        start = pos + 1;
    }
    return out;
}

std::vector<std::string_view> split_ws(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
        const std::size_t start = i;
        while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
        if (i > start) out.push_back(line.substr(start, i - start));
    }
    return out;
}

std::vector<std::string_view> lines_of(std::string_view text) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (start < text.size()) {
        std::size_t pos = text.find('\n', start);
        if (pos == std::string_view::npos) pos = text.size();
        std::string_view line = trim(text.substr(start, pos - start));
        if (!line.empty()) out.push_back(line);
        start = pos + 1;
    }
    return out;
}

bool parse_number(std::string_view tok, double& value) {
    if (tok.empty()) return false;
    if (tok.front() == '+') tok.remove_prefix(1);
    const char* end = tok.data() + tok.size();
    auto [ptr, ec] = std::from_chars(tok.data(), end, value);
    return ec == std::errc() && ptr == end;
}

double parse_count(std::string_view tok, std::size_t line_no) {
    double v = 0.0;
    if (!parse_number(tok, v) || !std::isfinite(v)) {
        throw Error(ErrorKind::ParseError,
                    "line " + std::to_string(line_no) + ": '" + std::string(tok) + "' is not a number");
    }
    if (v < 0.0) {
        throw Error(ErrorKind::NegativeCount,
                    "line " + std::to_string(line_no) + ": negative count " + std::string(tok));
    }
    if (v != std::floor(v)) {
        throw Error(ErrorKind::ParseError,
                    "line " + std::to_string(line_no) + ": count " + std::string(tok) + " is not integral");
    }
    return v;
}

std::vector<std::string> default_names(const char* prefix, Eigen::Index n) {
    std::vector<std::string> out;
    out.reserve(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) out.push_back(prefix + std::to_string(i));
    return out;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    if (n % 2 == 1) return v[n / 2];
    return 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Per-row nonzero counts and per-column nonzero counts.
std::pair<std::vector<std::int64_t>, std::vector<std::int64_t>> detection_counts(const CountMatrix& m) {
    std::vector<std::int64_t> per_row(static_cast<std::size_t>(m.rows()), 0);
    std::vector<std::int64_t> per_col(static_cast<std::size_t>(m.cols()), 0);
    for (Eigen::Index i = 0; i < m.outerSize(); ++i) {
        for (CountMatrix::InnerIterator it(m, i); it; ++it) {
            if (it.value() != 0.0) {
                ++per_row[static_cast<std::size_t>(it.row())];
                ++per_col[static_cast<std::size_t>(it.col())];
            }
        }
    }
    return {per_row, per_col};
}

}  // namespace

Tensor2 ExpressionMatrix::hvg_counts() const {
    Tensor2 out = Tensor2::Zero(raw_counts.rows(), static_cast<Eigen::Index>(selected_genes.size()));
    std::vector<std::int64_t> column_of(static_cast<std::size_t>(raw_counts.cols()), -1);
    for (std::size_t j = 0; j < selected_genes.size(); ++j) {
        column_of[static_cast<std::size_t>(selected_genes[j])] = static_cast<std::int64_t>(j);
    }
    for (Eigen::Index i = 0; i < raw_counts.outerSize(); ++i) {
        for (CountMatrix::InnerIterator it(raw_counts, i); it; ++it) {
            const auto j = column_of[static_cast<std::size_t>(it.col())];
            if (j >= 0) out(it.row(), j) = it.value();
        }
    }
    return out;
}

CountFormat parse_format(const std::string& name) {
    if (name == "mtx" || name == "matrix-market") return CountFormat::MatrixMarket;
    if (name == "csv" || name == "dense-csv") return CountFormat::DenseCsv;
    throw Error(ErrorKind::InvalidArgument, "unknown count format '" + name + "'");
}

ExpressionMatrix load_counts(const std::string& path, CountFormat format) {
    const std::string text = read_file(path);
    return format == CountFormat::MatrixMarket ? parse_matrix_market(text) : parse_dense_csv(text);
}

ExpressionMatrix parse_dense_csv(const std::string& text) {
    const auto lines = lines_of(text);
    if (lines.empty()) throw Error(ErrorKind::EmptyMatrix, "CSV has no rows");

    std::size_t first_data = 0;
    std::vector<std::string_view> header;
    {
        const auto tokens = split(lines[0], ',');
        double v = 0.0;
        const bool has_text = std::any_of(tokens.begin(), tokens.end(),
                                          [&](std::string_view t) { return !parse_number(t, v); });
        if (has_text) {
            header = tokens;
            first_data = 1;
        }
    }
    if (first_data >= lines.size()) throw Error(ErrorKind::EmptyMatrix, "CSV has a header but no cells");

    // A non-numeric leading token on the first data row marks a cell-id column.
    bool id_column = false;
    {
        const auto tokens = split(lines[first_data], ',');
        double v = 0.0;
        id_column = !tokens.empty() && !tokens[0].empty() && !parse_number(tokens[0], v);
    }

    std::vector<Eigen::Triplet<double, std::int64_t>> triplets;
    std::vector<std::string> cell_ids;
    std::int64_t n_cols = -1;
    std::int64_t row = 0;
    for (std::size_t li = first_data; li < lines.size(); ++li, ++row) {
        auto tokens = split(lines[li], ',');
        if (id_column) {
            cell_ids.emplace_back(tokens.front());
            tokens.erase(tokens.begin());
        }
        if (n_cols < 0) n_cols = static_cast<std::int64_t>(tokens.size());
        if (static_cast<std::int64_t>(tokens.size()) != n_cols) {
            throw Error(ErrorKind::ParseError, "line " + std::to_string(li + 1) + ": expected " +
                                                   std::to_string(n_cols) + " values, got " +
                                                   std::to_string(tokens.size()));
        }
        for (std::int64_t j = 0; j < n_cols; ++j) {
            const double v = parse_count(tokens[static_cast<std::size_t>(j)], li + 1);
            if (v != 0.0) triplets.emplace_back(row, j, v);
        }
    }
    if (n_cols <= 0 || row == 0) throw Error(ErrorKind::EmptyMatrix, "CSV has no genes or cells");

    ExpressionMatrix em;
    em.raw_counts.resize(row, n_cols);
    em.raw_counts.setFromTriplets(triplets.begin(), triplets.end());
    em.raw_counts.makeCompressed();

    if (!header.empty()) {
        if (static_cast<std::int64_t>(header.size()) == n_cols + 1) header.erase(header.begin());
        if (static_cast<std::int64_t>(header.size()) != n_cols) {
            throw Error(ErrorKind::ParseError, "header has " + std::to_string(header.size()) +
                                                   " names for " + std::to_string(n_cols) + " genes");
        }
        for (auto h : header) em.gene_names.emplace_back(h);
    } else {
        em.gene_names = default_names("gene_", n_cols);
    }
    em.cell_ids = id_column ? std::move(cell_ids) : default_names("cell_", row);
    return em;
}

ExpressionMatrix parse_matrix_market(const std::string& text) {
    const auto lines = lines_of(text);
    if (lines.empty()) throw Error(ErrorKind::ParseError, "empty matrix-market file");
    {
        auto banner = split_ws(lines[0]);
        auto lower = [](std::string_view s) {
            std::string out(s);
            for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
            return out;
        };
        if (banner.size() < 5 || banner[0] != "%%MatrixMarket" || lower(banner[1]) != "matrix" ||
            lower(banner[2]) != "coordinate") {
            throw Error(ErrorKind::ParseError, "expected '%%MatrixMarket matrix coordinate' banner");
        }
        const std::string field = lower(banner[3]);
        if (field != "integer" && field != "real") {
            throw Error(ErrorKind::ParseError, "unsupported matrix-market field '" + field + "'");
        }
        if (lower(banner[4]) != "general") {
            throw Error(ErrorKind::ParseError, "only 'general' matrix-market symmetry is supported");
        }
    }
    std::size_t li = 1;
    while (li < lines.size() && lines[li].front() == '%') ++li;
    if (li >= lines.size()) throw Error(ErrorKind::ParseError, "missing size line");

    const auto size_tokens = split_ws(lines[li]);
    double dims[3] = {0, 0, 0};
    if (size_tokens.size() != 3) throw Error(ErrorKind::ParseError, "size line needs rows cols nnz");
    for (int k = 0; k < 3; ++k) {
        if (!parse_number(size_tokens[static_cast<std::size_t>(k)], dims[k]) || dims[k] < 0 ||
            dims[k] != std::floor(dims[k])) {
            throw Error(ErrorKind::ParseError, "bad size line '" + std::string(lines[li]) + "'");
        }
    }
    const auto rows = static_cast<std::int64_t>(dims[0]);
    const auto cols = static_cast<std::int64_t>(dims[1]);
    const auto nnz = static_cast<std::int64_t>(dims[2]);
    if (rows == 0 || cols == 0) throw Error(ErrorKind::EmptyMatrix, "declared shape has a zero dimension");

    std::vector<Eigen::Triplet<double, std::int64_t>> triplets;
    triplets.reserve(static_cast<std::size_t>(nnz));
    std::int64_t seen = 0;
    for (++li; li < lines.size(); ++li) {
        if (lines[li].front() == '%') continue;
        const auto tok = split_ws(lines[li]);
        if (tok.size() != 3) {
            throw Error(ErrorKind::ParseError, "line " + std::to_string(li + 1) + ": expected 'i j value'");
        }
        double i = 0, j = 0;
        if (!parse_number(tok[0], i) || !parse_number(tok[1], j) || i < 1 || j < 1 || i > rows ||
            j > cols || i != std::floor(i) || j != std::floor(j)) {
            throw Error(ErrorKind::ParseError, "line " + std::to_string(li + 1) + ": index out of range");
        }
        const double v = parse_count(tok[2], li + 1);
        if (v != 0.0) triplets.emplace_back(static_cast<std::int64_t>(i) - 1, static_cast<std::int64_t>(j) - 1, v);
        ++seen;
    }
    if (seen != nnz) {
        throw Error(ErrorKind::ParseError, "declared " + std::to_string(nnz) + " entries, found " +
                                               std::to_string(seen));
    }

    ExpressionMatrix em;
    em.raw_counts.resize(rows, cols);
    em.raw_counts.setFromTriplets(triplets.begin(), triplets.end());
    em.raw_counts.makeCompressed();
    em.gene_names = default_names("gene_", cols);
    em.cell_ids = default_names("cell_", rows);
    return em;
}

ExpressionMatrix filter_qc(const ExpressionMatrix& em, std::int64_t min_genes_per_cell,
                           std::int64_t min_cells_per_gene) {
    if (min_genes_per_cell < 0 || min_cells_per_gene < 0) {
        throw Error(ErrorKind::InvalidArgument, "QC thresholds must be non-negative");
    }
    const auto [genes_per_cell, unused] = detection_counts(em.raw_counts);
    (void)unused;
    std::vector<std::int64_t> keep_cells;
    for (Eigen::Index i = 0; i < em.n_cells(); ++i) {
        if (genes_per_cell[static_cast<std::size_t>(i)] >= min_genes_per_cell) keep_cells.push_back(i);
    }
    if (keep_cells.empty()) throw Error(ErrorKind::EmptyMatrix, "QC removed every cell");

    // Gene detection is counted over the surviving cells only.
    std::vector<std::int64_t> cells_per_gene(static_cast<std::size_t>(em.n_genes()), 0);
    for (auto i : keep_cells) {
        for (CountMatrix::InnerIterator it(em.raw_counts, i); it; ++it) {
            if (it.value() != 0.0) ++cells_per_gene[static_cast<std::size_t>(it.col())];
        }
    }
    std::vector<std::int64_t> new_col(static_cast<std::size_t>(em.n_genes()), -1);
    std::vector<std::string> gene_names;
    std::int64_t kept_genes = 0;
    for (Eigen::Index j = 0; j < em.n_genes(); ++j) {
        if (cells_per_gene[static_cast<std::size_t>(j)] >= min_cells_per_gene) {
            new_col[static_cast<std::size_t>(j)] = kept_genes++;
            gene_names.push_back(em.gene_names[static_cast<std::size_t>(j)]);
        }
    }
    if (kept_genes == 0) throw Error(ErrorKind::EmptyMatrix, "QC removed every gene");

    std::vector<Eigen::Triplet<double, std::int64_t>> triplets;
    std::vector<std::string> cell_ids;
    for (std::size_t r = 0; r < keep_cells.size(); ++r) {
        cell_ids.push_back(em.cell_ids[static_cast<std::size_t>(keep_cells[r])]);
        for (CountMatrix::InnerIterator it(em.raw_counts, keep_cells[r]); it; ++it) {
            const auto c = new_col[static_cast<std::size_t>(it.col())];
            if (c >= 0) triplets.emplace_back(static_cast<std::int64_t>(r), c, it.value());
        }
    }
    ExpressionMatrix out;
    out.raw_counts.resize(static_cast<std::int64_t>(keep_cells.size()), kept_genes);
    out.raw_counts.setFromTriplets(triplets.begin(), triplets.end());
    out.raw_counts.makeCompressed();
    out.gene_names = std::move(gene_names);
    out.cell_ids = std::move(cell_ids);
    return out;
}

std::vector<double> gene_dispersion(const CountMatrix& counts) {
    const auto n = static_cast<double>(counts.rows());
    std::vector<double> sum(static_cast<std::size_t>(counts.cols()), 0.0);
    std::vector<double> sumsq(sum.size(), 0.0);
    for (Eigen::Index i = 0; i < counts.outerSize(); ++i) {
        for (CountMatrix::InnerIterator it(counts, i); it; ++it) {
            sum[static_cast<std::size_t>(it.col())] += it.value();
            sumsq[static_cast<std::size_t>(it.col())] += it.value() * it.value();
        }
    }
    std::vector<double> out(sum.size());
    for (std::size_t j = 0; j < sum.size(); ++j) {
        const double mean = sum[j] / n;
        if (mean <= 0.0) {
            out[j] = -std::numeric_limits<double>::infinity();
            continue;
        }
        const double var = std::max(0.0, sumsq[j] / n - mean * mean);
        out[j] = var / mean;
    }
    return out;
}

ExpressionMatrix select_hvg(const ExpressionMatrix& em, std::int64_t d) {
    if (d < 1) throw Error(ErrorKind::InvalidArgument, "HVG count must be >= 1");
    if (d > em.n_genes()) {
        throw Error(ErrorKind::InsufficientGenes, "requested " + std::to_string(d) + " genes but only " +
                                                      std::to_string(em.n_genes()) + " remain");
    }
    const auto disp = gene_dispersion(em.raw_counts);
    std::vector<std::int64_t> order(disp.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
        return disp[static_cast<std::size_t>(a)] > disp[static_cast<std::size_t>(b)];
    });
    order.resize(static_cast<std::size_t>(d));
    std::sort(order.begin(), order.end());

    ExpressionMatrix out = em;
    out.selected_genes = std::move(order);
    out.processed.resize(0, 0);
    out.size_factors.clear();
    return out;
}

ExpressionMatrix normalize_log(const ExpressionMatrix& em) {
    if (em.selected_genes.empty()) {
        throw Error(ErrorKind::InvalidArgument, "normalize_log needs selected genes (run select_hvg)");
    }
    const Eigen::Index n = em.n_cells();
    std::vector<double> totals(static_cast<std::size_t>(n), 0.0);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (CountMatrix::InnerIterator it(em.raw_counts, i); it; ++it) {
            totals[static_cast<std::size_t>(i)] += it.value();
        }
        if (totals[static_cast<std::size_t>(i)] <= 0.0) {
            throw Error(ErrorKind::ZeroLibrary, "cell " + em.cell_ids[static_cast<std::size_t>(i)] +
                                                    " has no counts; filter it with QC first");
        }
    }
    const double med = median(totals);

    ExpressionMatrix out = em;
    out.size_factors.resize(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        out.size_factors[static_cast<std::size_t>(i)] = totals[static_cast<std::size_t>(i)] / med;
    }

    Tensor2 x = em.hvg_counts();
    for (Eigen::Index i = 0; i < n; ++i) {
        const double sf = out.size_factors[static_cast<std::size_t>(i)];
        for (Eigen::Index j = 0; j < x.cols(); ++j) x(i, j) = std::log1p(x(i, j) / sf);
    }
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
        const double mean = x.col(j).mean();
        x.col(j).array() -= mean;
        const double var = x.col(j).squaredNorm() / static_cast<double>(n);
        if (var > 0.0) {
            x.col(j) /= std::sqrt(var);
        } else {
            x.col(j).setZero();
        }
    }
    out.processed = std::move(x);
    return out;
}

LabelSet encode_labels(const std::vector<std::string>& raw) {
    LabelSet out;
    std::unordered_map<std::string, int> code_of;
    out.codes.reserve(raw.size());
    for (const auto& r : raw) {
        auto [it, inserted] = code_of.emplace(r, static_cast<int>(out.names.size()));
        if (inserted) out.names.push_back(r);
        out.codes.push_back(it->second);
    }
    return out;
}

LabelSet load_labels(const std::string& path) {
    const std::string text = read_file(path);
    std::vector<std::string> raw;
    for (auto line : lines_of(text)) {
        // Accept "cell_id,label" as written by the train command as well as bare labels.
        const auto comma = line.rfind(',');
        raw.emplace_back(comma == std::string_view::npos ? line : trim(line.substr(comma + 1)));
    }
    if (!raw.empty() && raw.front() == "label") raw.erase(raw.begin());
    return encode_labels(raw);
}

Dataset to_dataset(const ExpressionMatrix& em) {
    if (em.processed.size() == 0) throw Error(ErrorKind::InvalidArgument, "matrix has not been normalized");
    Dataset ds;
    ds.processed = em.processed;
    ds.hvg_counts = em.hvg_counts();
    ds.size_factors = em.size_factors;
    ds.selected_genes = em.selected_genes;
    for (auto g : em.selected_genes) ds.gene_names.push_back(em.gene_names[static_cast<std::size_t>(g)]);
    ds.cell_ids = em.cell_ids;
    ds.total_genes = em.n_genes();
    return ds;
}

namespace {

template <typename T>
void put(std::ofstream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& is, const std::string& path) {
    T v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) {
        throw Error(ErrorKind::ParseError, "truncated bundle " + path);
    }
    return v;
}

void put_string(std::ofstream& os, const std::string& s) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::ifstream& is, const std::string& path) {
    const auto len = get<std::uint32_t>(is, path);
    std::string s(len, '\0');
    if (!is.read(s.data(), len)) throw Error(ErrorKind::ParseError, "truncated bundle " + path);
    return s;
}

void put_doubles(std::ofstream& os, const double* p, std::size_t n) {
    os.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * sizeof(double)));
}

void get_doubles(std::ifstream& is, double* p, std::size_t n, const std::string& path) {
    if (!is.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n * sizeof(double)))) {
        throw Error(ErrorKind::ParseError, "truncated bundle " + path);
    }
}

}  // namespace

void save_bundle(const std::string& path, const Dataset& ds) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw Error(ErrorKind::IoError, "cannot write " + path);
    const auto n = static_cast<std::uint64_t>(ds.n_cells());
    const auto d = static_cast<std::uint64_t>(ds.n_genes());
    os.write("BGD1", 4);
    put<std::uint64_t>(os, n);
    put<std::uint64_t>(os, d);
    put<std::uint64_t>(os, static_cast<std::uint64_t>(ds.total_genes));
    for (auto g : ds.selected_genes) put<std::uint64_t>(os, static_cast<std::uint64_t>(g));
    put_doubles(os, ds.size_factors.data(), ds.size_factors.size());
    put_doubles(os, ds.processed.data(), static_cast<std::size_t>(ds.processed.size()));
    put_doubles(os, ds.hvg_counts.data(), static_cast<std::size_t>(ds.hvg_counts.size()));
    for (const auto& c : ds.cell_ids) put_string(os, c);
    for (const auto& g : ds.gene_names) put_string(os, g);
    if (!os) throw Error(ErrorKind::IoError, "short write to " + path);
}

Dataset load_bundle(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error(ErrorKind::IoError, "cannot open " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "BGD1", 4) != 0) {
        throw Error(ErrorKind::ParseError, path + " is not a BGD1 bundle");
    }
    Dataset ds;
    const auto n = static_cast<Eigen::Index>(get<std::uint64_t>(is, path));
    const auto d = static_cast<Eigen::Index>(get<std::uint64_t>(is, path));
    ds.total_genes = static_cast<std::int64_t>(get<std::uint64_t>(is, path));
    for (Eigen::Index j = 0; j < d; ++j) {
        ds.selected_genes.push_back(static_cast<std::int64_t>(get<std::uint64_t>(is, path)));
    }
    ds.size_factors.resize(static_cast<std::size_t>(n));
    get_doubles(is, ds.size_factors.data(), ds.size_factors.size(), path);
    ds.processed.resize(n, d);
    get_doubles(is, ds.processed.data(), static_cast<std::size_t>(n * d), path);
    ds.hvg_counts.resize(n, d);
    get_doubles(is, ds.hvg_counts.data(), static_cast<std::size_t>(n * d), path);
    for (Eigen::Index i = 0; i < n; ++i) ds.cell_ids.push_back(get_string(is, path));
    for (Eigen::Index j = 0; j < d; ++j) ds.gene_names.push_back(get_string(is, path));
    return ds;
}

ExpressionMatrix preprocess(const ExpressionMatrix& em, std::int64_t d, std::int64_t min_genes_per_cell,
                            std::int64_t min_cells_per_gene) {
    return normalize_log(select_hvg(filter_qc(em, min_genes_per_cell, min_cells_per_gene), d));
}

void write_matrix_market(const std::string& path, const CountMatrix& counts) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw Error(ErrorKind::IoError, "cannot write " + path);
    os << "%%MatrixMarket matrix coordinate integer general\n";
    os << counts.rows() << ' ' << counts.cols() << ' ' << counts.nonZeros() << '\n';
    for (Eigen::Index i = 0; i < counts.outerSize(); ++i) {
        for (CountMatrix::InnerIterator it(counts, i); it; ++it) {
            os << it.row() + 1 << ' ' << it.col() + 1 << ' ' << static_cast<std::int64_t>(it.value()) << '\n';
        }
    }
    if (!os) throw Error(ErrorKind::IoError, "write failed for " + path);
}

}  // namespace bgformer::ingest
