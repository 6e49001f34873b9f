// Command-line front end: preprocess, train, evaluate, export-attention,
// bench, theory and synth subcommands.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "bgformer/ingest.hpp"
#include "bgformer/theory.hpp"
#include "bgformer/trainer.hpp"
#include "manifest.hpp"

namespace fs = std::filesystem;
using namespace bgformer;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitMissingFile = 2;
constexpr int kExitInsufficientGenes = 3;

void require_file(const std::string& path) {
    if (path.empty() || !fs::is_regular_file(path)) throw Error(ErrorKind::IoError, "file not found: " + path);
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw Error(ErrorKind::IoError, "cannot create directory " + dir);
}

std::string join(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

std::vector<int> load_truth(const std::string& path, std::size_t n_cells) {
    require_file(path);
    const auto ls = ingest::load_labels(path);
    if (ls.codes.size() != n_cells) {
        throw Error(ErrorKind::ShapeMismatch, path + " has " + std::to_string(ls.codes.size()) + " labels for " +
                                                  std::to_string(n_cells) + " cells");
    }
    return ls.codes;
}

// ----------------------------------------------------------------------------

struct PreprocessArgs {
    std::string input, format = "mtx", out;
    std::int64_t hvg = 2000;
    std::int64_t min_genes = 1;
    std::int64_t min_cells = 1;
};

int cmd_preprocess(const PreprocessArgs& a) {
    require_file(a.input);
    ensure_dir(a.out);
    const std::string bundle = join(a.out, "data.bgd");
    cli::write_manifest(a.out, {"preprocess", 0,
                                "hvg=" + std::to_string(a.hvg) + "\nmin_genes=" + std::to_string(a.min_genes) +
                                    "\nmin_cells=" + std::to_string(a.min_cells) + "\n",
                                {a.input},
                                {"data.bgd"}});
    const auto em = ingest::load_counts(a.input, ingest::parse_format(a.format));
    const auto pre = ingest::preprocess(em, a.hvg, a.min_genes, a.min_cells);
    const auto ds = ingest::to_dataset(pre);
    ingest::save_bundle(bundle, ds);
    std::cout << "cells " << ds.n_cells() << ", genes " << ds.total_genes << " after QC, " << ds.n_genes()
              << " selected -> " << bundle << "\n";
    return 0;
}

// ----------------------------------------------------------------------------

struct TrainArgs {
    std::string input, config, out, labels;
    std::optional<std::uint64_t> seed;
    std::optional<std::int64_t> anchors, heads, clusters, epochs;
    bool disable_L_a = false, disable_L_s = false;
    bool quiet = false;
};

TrainConfig resolve_config(const TrainArgs& a, const std::vector<int>* truth) {
    TrainConfig cfg;
    if (!a.config.empty()) {
        require_file(a.config);
        cfg = load_config(a.config, cfg);
    }
    if (a.seed) cfg.seed = *a.seed;
    if (a.anchors) cfg.m = *a.anchors;
    if (a.heads) cfg.l = *a.heads;
    if (a.clusters) cfg.K = *a.clusters;
    if (a.epochs) cfg.epochs = *a.epochs;
    if (a.disable_L_a) cfg.disable_L_a = true;
    if (a.disable_L_s) cfg.disable_L_s = true;
    if (cfg.K == 0 && truth != nullptr) {
        cfg.K = 1 + *std::max_element(truth->begin(), truth->end());
    }
    if (cfg.K == 0) throw Error(ErrorKind::InvalidArgument, "cluster count unset: pass --clusters or K= in the config");
    cfg.warmup_epochs = std::min(cfg.warmup_epochs, cfg.epochs);
    return cfg;
}

void write_model(const std::string& dir, const Model& model) {
    save_checkpoint(join(dir, "checkpoint.bgf"), model.params());
    std::ofstream os(join(dir, "config.txt"), std::ios::trunc);
    os << format_config(model.config());
    if (!os) throw Error(ErrorKind::IoError, "write failed for " + join(dir, "config.txt"));
}

Model read_model(const std::string& dir) {
    require_file(join(dir, "checkpoint.bgf"));
    require_file(join(dir, "config.txt"));
    return Model(load_checkpoint(join(dir, "checkpoint.bgf")), load_config(join(dir, "config.txt")));
}

void print_metrics(const Metrics& m) {
    std::cout << std::setprecision(6);
    if (m.acc) std::cout << "acc " << *m.acc << "  ari " << *m.ari << "\n";
    std::cout << "cluster sizes";
    for (auto s : m.cluster_sizes) std::cout << ' ' << s;
    std::cout << "\n";
}

int cmd_train(const TrainArgs& a) {
    require_file(a.input);
    ensure_dir(a.out);
    const auto ds = ingest::load_bundle(a.input);
    std::vector<int> truth;
    if (!a.labels.empty()) truth = load_truth(a.labels, static_cast<std::size_t>(ds.n_cells()));
    const TrainConfig cfg = resolve_config(a, truth.empty() ? nullptr : &truth);
    cfg.validate();

    std::vector<std::string> inputs{a.input};
    if (!a.config.empty()) inputs.push_back(a.config);
    if (!a.labels.empty()) inputs.push_back(a.labels);
    cli::write_manifest(a.out, {"train", cfg.seed, format_config(cfg), inputs,
                                {"checkpoint.bgf", "config.txt", "labels.csv", "metrics.json", "loss_history.csv",
                                 "embeddings.csv", "codebook.csv", "codebook.json"}});

    TrainOptions opts;
    opts.truth = truth.empty() ? nullptr : &truth;
    opts.checkpoint_on_failure = join(a.out, "checkpoint.bgf");
    opts.eval_threads = threads_from_env();
    if (!a.quiet) {
        opts.on_epoch = [&](const EpochRecord& r) {
            std::cout << std::setprecision(6) << "epoch " << r.epoch << "  L " << r.parts.L << "  L_s " << r.parts.L_s
                      << "  L_c " << r.parts.L_c << "  L_a " << r.parts.L_a << "\n"
                      << std::flush;
        };
    }
    const TrainResult res = train(ds, cfg, opts);

    write_model(a.out, res.model);
    write_labels_csv(join(a.out, "labels.csv"), ds.cell_ids, res.labels);
    write_metrics_json(join(a.out, "metrics.json"), res.metrics);
    write_loss_history_csv(join(a.out, "loss_history.csv"), res.history);
    const auto ev = evaluate(res.model, ds.processed, 1024, opts.eval_threads);
    write_matrix_csv(join(a.out, "embeddings.csv"), ev.Z, "z");
    write_codebook(a.out, res.model.U(), res.anchor_usage);
    print_metrics(res.metrics);
    return 0;
}

// ----------------------------------------------------------------------------

struct EvalArgs {
    std::string model, input, labels, out;
    bool attention = false;
    std::int64_t batch = 1024;
};

int cmd_evaluate(const EvalArgs& a, bool attention_only) {
    require_file(a.input);
    ensure_dir(a.out);
    const Model model = read_model(a.model);
    const auto ds = ingest::load_bundle(a.input);
    std::vector<int> truth;
    if (!a.labels.empty()) truth = load_truth(a.labels, static_cast<std::size_t>(ds.n_cells()));

    std::vector<std::string> inputs{a.input, join(a.model, "checkpoint.bgf"), join(a.model, "config.txt")};
    if (!a.labels.empty()) inputs.push_back(a.labels);
    std::vector<std::string> outputs;
    if (!attention_only) outputs = {"labels.csv", "metrics.json", "embeddings.csv"};
    if (attention_only || a.attention) outputs.push_back("attention_head*.csv");
    cli::write_manifest(a.out, {attention_only ? "export-attention" : "evaluate", model.config().seed,
                                format_config(model.config()), inputs, outputs});

    const auto ev = evaluate(model, ds.processed, a.batch, threads_from_env());
    if (!attention_only) {
        const Metrics m = compute_metrics(ev.labels, model.config().K, truth.empty() ? nullptr : &truth);
        write_labels_csv(join(a.out, "labels.csv"), ds.cell_ids, ev.labels);
        write_metrics_json(join(a.out, "metrics.json"), m);
        write_matrix_csv(join(a.out, "embeddings.csv"), ev.Z, "z");
        print_metrics(m);
    }
    if (attention_only || a.attention) {
        const auto emb = model.embed(ds.processed, true);
        write_attention(a.out, emb.attention, &ev.labels, model.config().K);
        std::cout << "wrote " << emb.attention.size() << " attention heads to " << a.out << "\n";
    }
    return 0;
}

// ----------------------------------------------------------------------------

struct BenchArgs {
    std::vector<std::int64_t> sizes{1024, 2048, 4096, 8192, 16384, 32768, 65536};
    std::string out;
    int reps = 5;
    std::int64_t full_cap = 8192;
    std::int64_t anchors = 256, heads = 4, genes = 64;
    std::uint64_t seed = 0;
};

int cmd_bench(const BenchArgs& a) {
    ensure_dir(a.out);
    theory::BenchConfig cfg;
    cfg.sizes = a.sizes;
    std::sort(cfg.sizes.begin(), cfg.sizes.end());
    cfg.reps = a.reps;
    cfg.full_cap = a.full_cap;
    cfg.m = a.anchors;
    cfg.l = a.heads;
    cfg.d = a.genes;
    cfg.seed = a.seed;
    cli::write_manifest(a.out, {"bench", a.seed, "", {}, {"bench.csv", "bench.json"}});
    const auto rep = theory::scaling_benchmark(cfg);
    theory::write_bench_csv(join(a.out, "bench.csv"), rep);
    theory::write_bench_json(join(a.out, "bench.json"), rep, cfg);
    std::cout << std::setprecision(6);
    for (const auto& r : rep.rows) {
        std::cout << std::setw(8) << r.n << "  " << std::setw(9) << r.method << "  ";
        if (r.skipped) {
            std::cout << "skipped\n";
        } else {
            std::cout << r.mean_ms << " ms  " << r.flops << " flops\n";
        }
    }
    if (rep.slope_bipartite) std::cout << "slope bipartite " << *rep.slope_bipartite << "\n";
    if (rep.slope_full) std::cout << "slope full " << *rep.slope_full << "\n";
    return 0;
}

// ----------------------------------------------------------------------------

struct TheoryArgs {
    std::string which, out, probe = "isotropic";
    double epsilon = 0.5;
    std::int64_t trials = 1000;
    std::int64_t n = 0, n_prime = 256, m = 8, d = 16, d_k = 8, m_jl = 0;
    double delta = 0.0;
    std::uint64_t seed = 0;
};

int cmd_theory(const TheoryArgs& a) {
    if (!a.out.empty()) ensure_dir(a.out);
    nlohmann::ordered_json j;
    int code = 0;
    std::cout << std::setprecision(6);
    if (a.which == "jl") {
        theory::JlTrialConfig c;
        c.n = a.n > 0 ? a.n : 1024;
        c.n_prime = a.n_prime;
        c.epsilon = a.epsilon;
        c.trials = a.trials;
        c.seed = a.seed;
        c.m_override = a.m_jl;
        if (a.probe == "nonnegative") {
            c.probe = theory::ProbeKind::NonNegative;
        } else if (a.probe != "isotropic") {
            throw Error(ErrorKind::InvalidArgument, "probe must be isotropic or nonnegative");
        }
        const auto r = theory::jl_experiment(c);
        std::cout << "m_jl " << r.m_jl << "  success_rate " << r.success_rate << "  median_ratio " << r.median_ratio
                  << "\n";
        j = {{"experiment", "jl"}, {"n", c.n},         {"n_prime", c.n_prime},           {"epsilon", c.epsilon},
             {"trials", c.trials}, {"seed", c.seed},   {"probe", a.probe},               {"m_jl", r.m_jl},
             {"success_rate", r.success_rate},         {"median_ratio", r.median_ratio}};
    } else {
        theory::EquivalenceConfig c;
        c.n = a.n > 0 ? a.n : 64;
        c.m = a.m;
        c.d = a.d;
        c.d_k = a.d_k;
        c.delta = a.delta;
        c.seed = a.seed;
        const auto r = theory::equivalence_experiment(c);
        std::cout << "max_abs_diff " << r.max_abs_diff << "  softmax_gap " << r.softmax_gap << "\n";
        j = {{"experiment", "equivalence"}, {"n", c.n},          {"m", c.m},
             {"d", c.d},                    {"d_k", c.d_k},      {"delta", c.delta},
             {"seed", c.seed},              {"max_abs_diff", r.max_abs_diff}, {"softmax_gap", r.softmax_gap}};
        if (c.delta == 0.0 && !(r.max_abs_diff < 1e-8)) code = kExitFailure;
    }
    if (!a.out.empty()) {
        cli::write_manifest(a.out, {"theory " + a.which, a.seed, "", {}, {"theory.json"}});
        std::ofstream os(join(a.out, "theory.json"), std::ios::trunc);
        os << std::setprecision(17) << j.dump(2) << '\n';
        if (!os) throw Error(ErrorKind::IoError, "write failed for " + join(a.out, "theory.json"));
    }
    return code;
}

// ----------------------------------------------------------------------------

struct SynthArgs {
    std::string out;
    theory::SynthConfig cfg;
};

int cmd_synth(const SynthArgs& a) {
    ensure_dir(a.out);
    cli::write_manifest(a.out, {"synth", a.cfg.seed,
                                "n=" + std::to_string(a.cfg.n) + "\nK=" + std::to_string(a.cfg.K) +
                                    "\nd=" + std::to_string(a.cfg.d) + "\nde_genes=" + std::to_string(a.cfg.de_genes) +
                                    "\n",
                                {},
                                {"counts.mtx", "truth.csv"}});
    const auto s = theory::synth_generate(a.cfg);
    ingest::write_matrix_market(join(a.out, "counts.mtx"), s.em.raw_counts);
    std::ofstream os(join(a.out, "truth.csv"), std::ios::trunc);
    os << "cell_id,label\n";
    for (std::size_t i = 0; i < s.labels.size(); ++i) os << s.em.cell_ids[i] << ',' << s.labels[i] << '\n';
    if (!os) throw Error(ErrorKind::IoError, "write failed for " + join(a.out, "truth.csv"));
    std::cout << "wrote " << s.labels.size() << " cells x " << a.cfg.d << " genes to " << a.out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Bipartite anchor-attention clustering for single-cell counts"};
    app.require_subcommand(1);

    PreprocessArgs pa;
    auto* pre = app.add_subcommand("preprocess", "QC, HVG selection and normalization into a BGD1 bundle");
    pre->add_option("--input", pa.input, "count matrix")->required();
    pre->add_option("--format", pa.format, "mtx or csv")->check(CLI::IsMember({"mtx", "csv"}));
    pre->add_option("--hvg", pa.hvg, "number of highly variable genes")->capture_default_str();
    pre->add_option("--min-genes", pa.min_genes, "QC: genes detected per cell")->capture_default_str();
    pre->add_option("--min-cells", pa.min_cells, "QC: cells detected per gene")->capture_default_str();
    pre->add_option("--out", pa.out, "output directory")->required();

    TrainArgs ta;
    auto* tr = app.add_subcommand("train", "train on a bundle and write model, labels and metrics");
    tr->add_option("--input", ta.input, "BGD1 bundle")->required();
    tr->add_option("--config", ta.config, "key=value config file");
    tr->add_option("--out", ta.out, "output directory")->required();
    tr->add_option("--seed", ta.seed);
    tr->add_option("--labels", ta.labels, "truth labels, one per cell");
    tr->add_option("--anchors", ta.anchors, "anchor count m");
    tr->add_option("--heads", ta.heads, "head count l");
    tr->add_option("--clusters", ta.clusters, "cluster count K");
    tr->add_option("--epochs", ta.epochs);
    tr->add_flag("--disable-L-a", ta.disable_L_a, "drop the anchor reconstruction term");
    tr->add_flag("--disable-L-s", ta.disable_L_s, "drop the self-supervised term");
    tr->add_flag("--quiet", ta.quiet, "no per-epoch lines");

    EvalArgs ea;
    auto* ev = app.add_subcommand("evaluate", "embed, cluster and score with a trained model");
    auto* xa = app.add_subcommand("export-attention", "write per-head cell-to-anchor attention");
    for (auto* sc : {ev, xa}) {
        sc->add_option("--model", ea.model, "directory written by train")->required();
        sc->add_option("--input", ea.input, "BGD1 bundle")->required();
        sc->add_option("--labels", ea.labels, "truth labels, one per cell");
        sc->add_option("--out", ea.out, "output directory")->required();
        sc->add_option("--batch", ea.batch, "evaluation batch rows (0 = all)")->capture_default_str();
    }
    ev->add_flag("--attention", ea.attention, "also export attention");

    BenchArgs ba;
    auto* be = app.add_subcommand("bench", "bipartite versus full attention scaling");
    be->add_option("--sizes", ba.sizes, "cell counts")->delimiter(',');
    be->add_option("--out", ba.out, "output directory")->required();
    be->add_option("--reps", ba.reps)->capture_default_str();
    be->add_option("--full-cap", ba.full_cap, "largest n for full attention")->capture_default_str();
    be->add_option("--anchors", ba.anchors)->capture_default_str();
    be->add_option("--heads", ba.heads)->capture_default_str();
    be->add_option("--genes", ba.genes)->capture_default_str();
    be->add_option("--seed", ba.seed);

    TheoryArgs th;
    auto* to = app.add_subcommand("theory", "random-projection and equivalence checks");
    to->add_option("which", th.which, "jl or equivalence")->required()->check(CLI::IsMember({"jl", "equivalence"}));
    to->add_option("--out", th.out, "output directory for theory.json");
    to->add_option("--epsilon", th.epsilon)->capture_default_str();
    to->add_option("--trials", th.trials)->capture_default_str();
    to->add_option("--seed", th.seed);
    to->add_option("--n", th.n, "tokens (jl, default 1024) or cells (equivalence, default 64)");
    to->add_option("--n-prime", th.n_prime)->capture_default_str();
    to->add_option("--m-jl", th.m_jl, "projection rows (0 = from epsilon)");
    to->add_option("--probe", th.probe, "isotropic or nonnegative")->capture_default_str();
    to->add_option("--anchors", th.m)->capture_default_str();
    to->add_option("--genes", th.d)->capture_default_str();
    to->add_option("--d-k", th.d_k)->capture_default_str();
    to->add_option("--delta", th.delta)->capture_default_str();

    SynthArgs sa;
    auto* sy = app.add_subcommand("synth", "seeded ZINB cluster data");
    sy->add_option("--out", sa.out, "output directory")->required();
    sy->add_option("--cells", sa.cfg.n)->capture_default_str();
    sy->add_option("--clusters", sa.cfg.K)->capture_default_str();
    sy->add_option("--genes", sa.cfg.d)->capture_default_str();
    sy->add_option("--de-genes", sa.cfg.de_genes)->capture_default_str();
    sy->add_option("--seed", sa.cfg.seed);

    CLI11_PARSE(app, argc, argv);

    try {
        if (pre->parsed()) return cmd_preprocess(pa);
        if (tr->parsed()) return cmd_train(ta);
        if (ev->parsed()) return cmd_evaluate(ea, false);
        if (xa->parsed()) return cmd_evaluate(ea, true);
        if (be->parsed()) return cmd_bench(ba);
        if (to->parsed()) return cmd_theory(th);
        if (sy->parsed()) return cmd_synth(sa);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        if (e.kind() == ErrorKind::IoError) return kExitMissingFile;
        if (e.kind() == ErrorKind::InsufficientGenes) return kExitInsufficientGenes;
        return kExitFailure;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    return kExitFailure;
}
