#include "bgformer/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>

namespace bgformer {

// -----------------------------------------------------------------------------
// Config
// -----------------------------------------------------------------------------

void TrainConfig::validate() const {
    auto fail = [](const std::string& what) { throw Error(ErrorKind::InvalidArgument, what); };
    if (epochs < 1) fail("epochs must be >= 1");
    if (batch_size < 2) fail("batch_size must be >= 2");
    if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
    if (m < 1) fail("m (anchor count) must be >= 1");
    if (l < 1) fail("l (head count) must be >= 1");
    if (d_k < 1 || d_u < 1 || d_h < 1 || d_z < 1) fail("dimensions must be >= 1");
    if (K < 2) fail("K (cluster count) must be >= 2");
    if (warmup_epochs < 0 || warmup_epochs > epochs) fail("warmup_epochs must lie in [0, epochs]");
    if (w_s < 0.0 || w_c < 0.0 || w_a < 0.0) fail("loss weights must be >= 0");
    if (update_target_every < 0) fail("update_target_every must be >= 0");
    if (!(alpha > 0.0)) fail("alpha must be positive");
}

namespace {

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw Error(ErrorKind::ParseError, "config key " + key + ": '" + v + "' is not a boolean");
}

template <typename T>
T parse_num(const std::string& key, const std::string& v) {
    std::istringstream is(v);
    T out{};
    is >> out;
    if (!is || !is.eof()) throw Error(ErrorKind::ParseError, "config key " + key + ": bad value '" + v + "'");
    return out;
}

using Setter = std::function<void(TrainConfig&, const std::string&, const std::string&)>;

template <typename T>
Setter num_field(T TrainConfig::*field) {
    return [field](TrainConfig& c, const std::string& k, const std::string& v) { c.*field = parse_num<T>(k, v); };
}

Setter bool_field(bool TrainConfig::*field) {
    return [field](TrainConfig& c, const std::string& k, const std::string& v) { c.*field = parse_bool(k, v); };
}

const std::map<std::string, Setter>& setters() {
    static const std::map<std::string, Setter> table = {
        {"epochs", num_field(&TrainConfig::epochs)},
        {"batch_size", num_field(&TrainConfig::batch_size)},
        {"learning_rate", num_field(&TrainConfig::learning_rate)},
        {"seed", num_field(&TrainConfig::seed)},
        {"m", num_field(&TrainConfig::m)},
        {"l", num_field(&TrainConfig::l)},
        {"d_k", num_field(&TrainConfig::d_k)},
        {"d_u", num_field(&TrainConfig::d_u)},
        {"d_h", num_field(&TrainConfig::d_h)},
        {"K", num_field(&TrainConfig::K)},
        {"warmup_epochs", num_field(&TrainConfig::warmup_epochs)},
        {"w_s", num_field(&TrainConfig::w_s)},
        {"w_c", num_field(&TrainConfig::w_c)},
        {"w_a", num_field(&TrainConfig::w_a)},
        {"disable_L_a", bool_field(&TrainConfig::disable_L_a)},
        {"disable_L_s", bool_field(&TrainConfig::disable_L_s)},
        {"scale_scores", bool_field(&TrainConfig::scale_scores)},
        {"update_target_every", num_field(&TrainConfig::update_target_every)},
        {"alpha", num_field(&TrainConfig::alpha)},
        {"use_decoder", bool_field(&TrainConfig::use_decoder)},
        {"d_z", num_field(&TrainConfig::d_z)},
        {"size_factor_mean", bool_field(&TrainConfig::size_factor_mean)},
        {"anchor_reset_noise", num_field(&TrainConfig::anchor_reset_noise)},
    };
    return table;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

TrainConfig parse_config(const std::string& text, TrainConfig base) {
    std::istringstream is(text);
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw Error(ErrorKind::ParseError, "config line " + std::to_string(line_no) + ": expected key=value");
        }
        // "tau" is accepted as an alias of epochs.
        std::string key = trim(line.substr(0, eq));
        if (key == "tau") key = "epochs";
        const std::string value = trim(line.substr(eq + 1));
        const auto it = setters().find(key);
        if (it == setters().end()) {
            throw Error(ErrorKind::ParseError, "config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
        }
        it->second(base, key, value);
    }
    return base;
}

TrainConfig load_config(const std::string& path, TrainConfig base) {
    std::ifstream is(path);
    if (!is) throw Error(ErrorKind::IoError, "cannot open config " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return parse_config(ss.str(), base);
}

std::string format_config(const TrainConfig& c) {
    std::ostringstream os;
    os.precision(17);
    auto b = [](bool v) { return v ? "true" : "false"; };
    os << "epochs=" << c.epochs << "\n"
       << "batch_size=" << c.batch_size << "\n"
       << "learning_rate=" << c.learning_rate << "\n"
       << "seed=" << c.seed << "\n"
       << "m=" << c.m << "\n"
       << "l=" << c.l << "\n"
       << "d_k=" << c.d_k << "\n"
       << "d_u=" << c.d_u << "\n"
       << "d_h=" << c.d_h << "\n"
       << "K=" << c.K << "\n"
       << "warmup_epochs=" << c.warmup_epochs << "\n"
       << "w_s=" << c.w_s << "\n"
       << "w_c=" << c.w_c << "\n"
       << "w_a=" << c.w_a << "\n"
       << "disable_L_a=" << b(c.disable_L_a) << "\n"
       << "disable_L_s=" << b(c.disable_L_s) << "\n"
       << "scale_scores=" << b(c.scale_scores) << "\n"
       << "update_target_every=" << c.update_target_every << "\n"
       << "alpha=" << c.alpha << "\n"
       << "use_decoder=" << b(c.use_decoder) << "\n"
       << "d_z=" << c.d_z << "\n"
       << "size_factor_mean=" << b(c.size_factor_mean) << "\n"
       << "anchor_reset_noise=" << c.anchor_reset_noise << "\n";
    return os.str();
}

// -----------------------------------------------------------------------------
// Model
// -----------------------------------------------------------------------------

Model::Model(const TrainConfig& cfg, Eigen::Index n_genes) : cfg_(cfg), d_(n_genes), params_(cfg.seed) {
    cfg_.validate();
    if (d_ < 1) throw Error(ErrorKind::InvalidArgument, "model needs at least one gene");
    std::mt19937_64 rng(cfg_.seed);
    const Eigen::Index width = embed_dim();
    for (std::int64_t h = 0; h < cfg_.l; ++h) {
        const std::string p = "attn.head" + std::to_string(h);
        params_.add_glorot(p + ".W_p", d_, cfg_.d_k, rng);
        params_.add_glorot(p + ".W_k", cfg_.d_u, cfg_.d_k, rng);
        params_.add_glorot(p + ".W_v", cfg_.d_u, cfg_.d_h, rng);
    }
    params_.add_glorot("attn.W_c", d_, width, rng);
    params_.add_glorot("enc.W_e", d_, cfg_.d_u, rng);
    params_.add_zeros("enc.b_e", 1, cfg_.d_u);
    params_.add_glorot("dec.W_d", cfg_.d_u, cfg_.d_z, rng);
    params_.add_zeros("dec.b_d", 1, cfg_.d_z);
    const Eigen::Index head_in = cfg_.use_decoder ? cfg_.d_z : cfg_.d_u;
    for (const char* which : {"anchor_zinb", "self_zinb"}) {
        const Eigen::Index in = std::string(which) == "anchor_zinb" ? head_in : width;
        const std::string p = which;
        params_.add_glorot(p + ".W_pi", in, d_, rng);
        params_.add_zeros(p + ".b_pi", 1, d_);
        params_.add_glorot(p + ".W_theta", in, d_, rng);
        params_.add_zeros(p + ".b_theta", 1, d_);
        params_.add_glorot(p + ".W_mu", in, d_, rng);
        params_.add_zeros(p + ".b_mu", 1, d_);
    }
    params_.add_glorot("anchors.U", cfg_.m, cfg_.d_u, rng);
    params_.add_zeros("cluster.centroids", cfg_.K, width);
    bind_indices();
}

Model::Model(ParamStore params, const TrainConfig& cfg) : cfg_(cfg), d_(0), params_(std::move(params)) {
    cfg_.validate();
    d_ = params_[params_.index_of("enc.W_e")].value.rows();
    bind_indices();
    check_shapes();
}

void Model::bind_indices() {
    idx_.W_p.clear();
    idx_.W_k.clear();
    idx_.W_v.clear();
    for (std::int64_t h = 0; h < cfg_.l; ++h) {
        const std::string p = "attn.head" + std::to_string(h);
        idx_.W_p.push_back(params_.index_of(p + ".W_p"));
        idx_.W_k.push_back(params_.index_of(p + ".W_k"));
        idx_.W_v.push_back(params_.index_of(p + ".W_v"));
    }
    idx_.W_c = params_.index_of("attn.W_c");
    idx_.W_e = params_.index_of("enc.W_e");
    idx_.b_e = params_.index_of("enc.b_e");
    idx_.W_d = params_.index_of("dec.W_d");
    idx_.b_d = params_.index_of("dec.b_d");
    idx_.a_W_pi = params_.index_of("anchor_zinb.W_pi");
    idx_.a_b_pi = params_.index_of("anchor_zinb.b_pi");
    idx_.a_W_theta = params_.index_of("anchor_zinb.W_theta");
    idx_.a_b_theta = params_.index_of("anchor_zinb.b_theta");
    idx_.a_W_mu = params_.index_of("anchor_zinb.W_mu");
    idx_.a_b_mu = params_.index_of("anchor_zinb.b_mu");
    idx_.s_W_pi = params_.index_of("self_zinb.W_pi");
    idx_.s_b_pi = params_.index_of("self_zinb.b_pi");
    idx_.s_W_theta = params_.index_of("self_zinb.W_theta");
    idx_.s_b_theta = params_.index_of("self_zinb.b_theta");
    idx_.s_W_mu = params_.index_of("self_zinb.W_mu");
    idx_.s_b_mu = params_.index_of("self_zinb.b_mu");
    u_ = params_.index_of("anchors.U");
    centroids_ = params_.index_of("cluster.centroids");
}

void Model::check_shapes() const {
    auto expect = [&](std::size_t i, Eigen::Index r, Eigen::Index c) {
        const Tensor2& v = params_[i].value;
        require_shape(v.rows() == r && v.cols() == c, "checkpoint parameter " + params_[i].name + " is " +
                                                          shape_str(v) + ", config expects " +
                                                          std::to_string(r) + "x" + std::to_string(c));
    };
    const Eigen::Index width = embed_dim();
    for (std::size_t h = 0; h < idx_.W_p.size(); ++h) {
        expect(idx_.W_p[h], d_, cfg_.d_k);
        expect(idx_.W_k[h], cfg_.d_u, cfg_.d_k);
        expect(idx_.W_v[h], cfg_.d_u, cfg_.d_h);
    }
    expect(idx_.W_c, d_, width);
    expect(idx_.W_e, d_, cfg_.d_u);
    expect(idx_.b_e, 1, cfg_.d_u);
    expect(idx_.W_d, cfg_.d_u, cfg_.d_z);
    const Eigen::Index head_in = cfg_.use_decoder ? cfg_.d_z : cfg_.d_u;
    for (auto i : {idx_.a_W_pi, idx_.a_W_theta, idx_.a_W_mu}) expect(i, head_in, d_);
    for (auto i : {idx_.s_W_pi, idx_.s_W_theta, idx_.s_W_mu}) expect(i, width, d_);
    expect(u_, cfg_.m, cfg_.d_u);
    expect(centroids_, cfg_.K, width);
}

void Model::set_centroids(const Tensor2& c) {
    require_shape(c.rows() == cfg_.K && c.cols() == embed_dim(), "centroids " + shape_str(c));
    params_[centroids_].value = c;
}

clustering::ClusterState Model::cluster_state() const {
    return clustering::ClusterState{centroids(), cfg_.alpha};
}

void Model::init_codebook(const Tensor2& x_batch, std::mt19937_64& rng) {
    const Tensor2 h = encode(x_batch);
    const Eigen::Index rows = h.rows();
    IndexVector pick(static_cast<std::size_t>(cfg_.m));
    if (cfg_.m <= rows) {
        IndexVector all(static_cast<std::size_t>(rows));
        std::iota(all.begin(), all.end(), 0);
        std::shuffle(all.begin(), all.end(), rng);
        std::copy_n(all.begin(), cfg_.m, pick.begin());
    } else {
        std::uniform_int_distribution<std::int64_t> any(0, rows - 1);
        for (auto& p : pick) p = any(rng);
    }
    U() = gather_rows(h, pick);
}

attention::BipartiteAttentionParams Model::attention_params() const {
    attention::BipartiteAttentionParams p;
    for (std::size_t h = 0; h < idx_.W_p.size(); ++h) {
        p.heads.push_back({params_[idx_.W_p[h]].value, params_[idx_.W_k[h]].value, params_[idx_.W_v[h]].value});
    }
    p.W_c = params_[idx_.W_c].value;
    p.scale_scores = cfg_.scale_scores;
    return p;
}

anchors::AnchorEncoderDecoder Model::anchor_enc_dec() const {
    anchors::AnchorEncoderDecoder e;
    e.W_e = params_[idx_.W_e].value;
    e.b_e = params_[idx_.b_e].value;
    e.W_d = params_[idx_.W_d].value;
    e.b_d = params_[idx_.b_d].value;
    e.heads = {params_[idx_.a_W_pi].value,    params_[idx_.a_b_pi].value, params_[idx_.a_W_theta].value,
               params_[idx_.a_b_theta].value, params_[idx_.a_W_mu].value, params_[idx_.a_b_mu].value};
    e.use_decoder = cfg_.use_decoder;
    return e;
}

Tensor2 Model::encode(const Tensor2& x) const {
    return anchors::encode(x, params_[idx_.W_e].value, params_[idx_.b_e].value);
}

Model::Embedding Model::embed(const Tensor2& x, bool keep_attention) const {
    require_shape(x.cols() == d_, "model expects " + std::to_string(d_) + " genes, got " + std::to_string(x.cols()));
    std::vector<Tensor2> parts;
    Embedding e;
    for (std::size_t h = 0; h < idx_.W_p.size(); ++h) {
        auto c = attention::bipartite_head_forward(x, U(), params_[idx_.W_p[h]].value, params_[idx_.W_k[h]].value,
                                                   params_[idx_.W_v[h]].value, cfg_.scale_scores);
        parts.push_back(std::move(c.Z));
        if (keep_attention) e.attention.push_back(std::move(c.B));
    }
    e.Z = attention::residual_embed(x, kernels::concat_cols(parts), params_[idx_.W_c].value);
    return e;
}

// -----------------------------------------------------------------------------
// Loss
// -----------------------------------------------------------------------------

LossEval total_loss(Model& model, const Batch& batch, bool accumulate_grad, const anchors::Routing* frozen) {
    const TrainConfig& cfg = model.config();
    ParamStore& ps = model.params();
    const auto& ix = model.indices();
    require_shape(batch.x.rows() >= 1 && batch.x.rows() == batch.counts.rows(), "batch x/counts rows differ");
    require_shape(batch.counts.cols() == model.n_genes(), "batch counts width");

    const bool use_s = !cfg.disable_L_s && cfg.w_s > 0.0;
    const bool use_a = !cfg.disable_L_a && cfg.w_a > 0.0;
    const bool use_c = batch.target != nullptr && cfg.w_c > 0.0;

    LossEval out;

    // Multi-head bipartite embedding, then the residual map.
    std::vector<attention::HeadCache> caches;
    std::vector<Tensor2> parts;
    for (std::size_t h = 0; h < ix.W_p.size(); ++h) {
        caches.push_back(attention::bipartite_head_forward(batch.x, model.U(), ps[ix.W_p[h]].value,
                                                           ps[ix.W_k[h]].value, ps[ix.W_v[h]].value,
                                                           cfg.scale_scores));
        parts.push_back(caches.back().Z);
    }
    out.Z = attention::residual_embed(batch.x, kernels::concat_cols(parts), ps[ix.W_c].value);

    // Anchor branch: encode, assign, reconstruct.
    Tensor2 H;
    anchors::AnchorLossEval anchor_eval;
    if (use_a) {
        H = model.encode(batch.x);
        anchor_eval = anchors::anchor_loss_eval(batch.counts, H, model.U(), model.anchor_enc_dec(), accumulate_grad,
                                                frozen, batch.log_size_factors);
        out.parts.L_a = anchor_eval.parts.L_a;
        out.parts.L_d = anchor_eval.parts.L_d;
        out.parts.L_com = anchor_eval.parts.L_com;
        out.routing = anchor_eval.routing;
    }

    anchors::ZinbHeadEval self_eval;
    if (use_s) {
        const anchors::ZinbHeadsView heads{ps[ix.s_W_pi].value,    ps[ix.s_b_pi].value, ps[ix.s_W_theta].value,
                                           ps[ix.s_b_theta].value, ps[ix.s_W_mu].value, ps[ix.s_b_mu].value};
        self_eval = anchors::zinb_head_loss(out.Z, batch.counts, heads, accumulate_grad, batch.log_size_factors);
        out.parts.L_s = self_eval.nll;
    }

    clustering::DecGrads dec;
    if (use_c) {
        dec = clustering::dec_loss_backward(out.Z, model.cluster_state(), *batch.target);
        out.parts.L_c = dec.loss;
    }

    out.parts.L = cfg.w_s * out.parts.L_s + cfg.w_c * out.parts.L_c + cfg.w_a * out.parts.L_a;
    if (!std::isfinite(out.parts.L)) {
        const char* part = !std::isfinite(out.parts.L_s) ? "L_s" : !std::isfinite(out.parts.L_c) ? "L_c" : "L_a";
        throw Error(ErrorKind::NonFinite, std::string("total loss (offending part ") + part + ")");
    }
    if (!accumulate_grad) return out;

    // Backward through Z.
    Tensor2 dZ = Tensor2::Zero(out.Z.rows(), out.Z.cols());
    if (use_s) {
        dZ += cfg.w_s * self_eval.d_input;
        ps[ix.s_W_pi].grad += cfg.w_s * self_eval.dW_pi;
        ps[ix.s_b_pi].grad += cfg.w_s * self_eval.db_pi;
        ps[ix.s_W_theta].grad += cfg.w_s * self_eval.dW_theta;
        ps[ix.s_b_theta].grad += cfg.w_s * self_eval.db_theta;
        ps[ix.s_W_mu].grad += cfg.w_s * self_eval.dW_mu;
        ps[ix.s_b_mu].grad += cfg.w_s * self_eval.db_mu;
    }
    if (use_c) {
        dZ += cfg.w_c * dec.dZ;
        ps[model.centroids_index()].grad += cfg.w_c * dec.dcentroids;
    }
    if (use_s || use_c) {
        ps[ix.W_c].grad += matmul_tn(batch.x, dZ);
        const Eigen::Index d_h = cfg.d_h;
        for (std::size_t h = 0; h < ix.W_p.size(); ++h) {
            const Tensor2 dZ_head = dZ.middleCols(static_cast<Eigen::Index>(h) * d_h, d_h);
            auto g = attention::bipartite_head_backward(batch.x, model.U(), ps[ix.W_p[h]].value, ps[ix.W_k[h]].value,
                                                        ps[ix.W_v[h]].value, caches[h], dZ_head);
            ps[ix.W_p[h]].grad += g.dW_p;
            ps[ix.W_k[h]].grad += g.dW_k;
            ps[ix.W_v[h]].grad += g.dW_v;
            ps[model.U_index()].grad += g.dU;
        }
    }
    if (use_a) {
        const double w = cfg.w_a;
        ps[model.U_index()].grad += w * anchor_eval.dU;
        auto ge = kernels::affine_backward(batch.x, ps[ix.W_e].value, anchor_eval.dH, false);
        ps[ix.W_e].grad += w * ge.dw;
        ps[ix.b_e].grad += w * ge.dbias;
        if (cfg.use_decoder) {
            ps[ix.W_d].grad += w * anchor_eval.dW_d;
            ps[ix.b_d].grad += w * anchor_eval.db_d;
        }
        const auto& hz = anchor_eval.heads;
        ps[ix.a_W_pi].grad += w * hz.dW_pi;
        ps[ix.a_b_pi].grad += w * hz.db_pi;
        ps[ix.a_W_theta].grad += w * hz.dW_theta;
        ps[ix.a_b_theta].grad += w * hz.db_theta;
        ps[ix.a_W_mu].grad += w * hz.dW_mu;
        ps[ix.a_b_mu].grad += w * hz.db_mu;
    }
    return out;
}

}  // namespace bgformer
