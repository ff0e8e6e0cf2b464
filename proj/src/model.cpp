#include "sttis/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace sttis {

void ModelConfig::check() const {
    if (n < 2) throw std::invalid_argument("config: n must be >= 2");
    if (p > w) throw std::invalid_argument("config: conv kernel p must not exceed window w");
    if (d == 0 || f == 0 || w == 0 || heads_dli == 0 || heads_dlm == 0 || alpha == 0)
        throw std::invalid_argument("config: counts must be >= 1");
    if (q_recipe.total() == 0) throw std::invalid_argument("config: empty context recipe");
    if (dropout < 0.0 || dropout >= 1.0)
        throw std::invalid_argument("config: dropout must be in [0,1)");
}

std::string ModelConfig::to_json() const {
    nlohmann::ordered_json j;
    j["n"] = n;
    j["o"] = o;
    j["d"] = d;
    j["w"] = w;
    j["p"] = p;
    j["f"] = f;
    j["alpha"] = alpha;
    j["heads_dli"] = heads_dli;
    j["heads_dlm"] = heads_dlm;
    j["dropout"] = dropout;
    j["q_recent"] = q_recipe.recent;
    j["q_daily"] = q_recipe.daily;
    j["q_weekly"] = q_recipe.weekly;
    j["ffn_mult"] = ffn_mult;
    j["layer_norm"] = layer_norm;
    return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
    auto j = nlohmann::json::parse(text);
    ModelConfig c;
    c.n = j.at("n").get<std::size_t>();
    c.o = j.at("o").get<std::size_t>();
    c.d = j.at("d").get<std::size_t>();
    c.w = j.at("w").get<std::size_t>();
    c.p = j.at("p").get<std::size_t>();
    c.f = j.at("f").get<std::size_t>();
    c.alpha = j.at("alpha").get<std::size_t>();
    c.heads_dli = j.at("heads_dli").get<std::size_t>();
    c.heads_dlm = j.at("heads_dlm").get<std::size_t>();
    c.dropout = j.at("dropout").get<double>();
    c.q_recipe.recent = j.at("q_recent").get<std::size_t>();
    c.q_recipe.daily = j.at("q_daily").get<std::size_t>();
    c.q_recipe.weekly = j.at("q_weekly").get<std::size_t>();
    c.ffn_mult = j.at("ffn_mult").get<std::size_t>();
    c.layer_norm = j.at("layer_norm").get<bool>();
    return c;
}

Model::Model(ModelConfig cfg, std::uint64_t init_seed) : cfg_(std::move(cfg)), drop_rng_(1) {
    cfg_.check();
    build_params(init_seed);
}

void Model::build_params(std::uint64_t init_seed) {
    std::mt19937_64 rng(init_seed);
    const std::size_t n = cfg_.n, d = cfg_.d, o = cfg_.o, f = cfg_.f, p = cfg_.p;
    const std::size_t hid = cfg_.ffn_mult * d;
    auto mat = [&](const std::string& name, std::size_t r, std::size_t c) {
        store_.init_uniform(store_.add(name, {r, c}), rng);
    };
    auto vec = [&](const std::string& name, std::size_t len) {
        store_.init_uniform(store_.add(name, {len}), rng);
    };
    auto ln = [&](const std::string& prefix) {
        store_.add(prefix + ".g", {d}).value.fill(1.0);
        store_.add(prefix + ".b", {d});
    };
    auto ffn = [&](const std::string& prefix) {
        mat(prefix + ".w1", d, hid);
        vec(prefix + ".b1", hid);
        mat(prefix + ".w2", hid, d);
        vec(prefix + ".b2", d);
    };

    mat("stf.ws", n, d);
    vec("stf.bs", d);
    mat("stf.wt", o, d);
    vec("stf.bt", d);
    mat("stf.conv_in.k", f, p);
    vec("stf.conv_in.b", f);
    mat("stf.conv_out.k", f, p);
    vec("stf.conv_out.b", f);
    mat("stf.wf", cfg_.conv_flat(), d);
    vec("stf.bf", d);
    mat("stf.wl", d, d);
    vec("stf.bl", d);

    for (std::size_t l = 0; l < cfg_.alpha; ++l) {
        const std::string pre = "dli" + std::to_string(l);
        for (std::size_t m = 0; m < cfg_.heads_dli; ++m) {
            mat(pre + ".wq" + std::to_string(m), d, d);
            mat(pre + ".wk" + std::to_string(m), d, d);
        }
        mat(pre + ".wo", cfg_.heads_dli * d, d);
        ln(pre + ".ln1");
        ffn(pre + ".ffn");
        ln(pre + ".ln2");
    }

    for (std::size_t z = 0; z < cfg_.heads_dlm; ++z) {
        mat("dlm.wq" + std::to_string(z), d, d);
        mat("dlm.wk" + std::to_string(z), d, d);
        mat("dlm.wv" + std::to_string(z), d, d);
    }
    mat("dlm.wt", cfg_.heads_dlm * d, d);
    ln("dlm.ln1");
    ffn("dlm.ffn");
    ln("dlm.ln2");

    mat("pred.w", d, 2);
    vec("pred.b", 2);
}

Var Model::stf_embed(Tape& tape, const SlotInput& slot) const {
    return stf_embed_batch(tape, {&slot});
}

Var Model::stf_embed_batch(Tape& tape, const std::vector<const SlotInput*>& slots) const {
    const std::size_t n = cfg_.n;
    const std::size_t B = slots.size();
    if (B == 0) throw std::invalid_argument("stf_embed_batch: empty slot list");
    const std::size_t rows = B * n;
    ParameterStore& s = const_cast<ParameterStore&>(store_);

    // Spatial: each block's one-hot just selects the rows of W^S in order.
    // Temporal: each block broadcasts its slot-of-day row of W^T.
    std::vector<std::size_t> region_idx(rows), slot_idx(rows);
    Tensor in_win({rows, cfg_.w});
    Tensor out_win({rows, cfg_.w});
    for (std::size_t b = 0; b < B; ++b) {
        const SlotInput& slot = *slots[b];
        if (slot.in_window.rows() != n || slot.in_window.cols() != cfg_.w)
            throw std::invalid_argument("stf_embed: bad window shape " + slot.in_window.shape_str());
        for (std::size_t i = 0; i < n; ++i) {
            region_idx[b * n + i] = i;
            slot_idx[b * n + i] = slot.slot_of_day;
            for (std::size_t j = 0; j < cfg_.w; ++j) {
                in_win.at(b * n + i, j) = slot.in_window.at(i, j);
                out_win.at(b * n + i, j) = slot.out_window.at(i, j);
            }
        }
    }
    Var s_hat = tape.add_rowvec(tape.rows_select(tape.param(s, "stf.ws"), std::move(region_idx)),
                                tape.param(s, "stf.bs"));
    Var t_hat = tape.add_rowvec(tape.rows_select(tape.param(s, "stf.wt"), std::move(slot_idx)),
                                tape.param(s, "stf.bt"));

    Var ci = tape.conv1d(tape.input(std::move(in_win)), tape.param(s, "stf.conv_in.k"),
                         tape.param(s, "stf.conv_in.b"));
    Var co = tape.conv1d(tape.input(std::move(out_win)), tape.param(s, "stf.conv_out.k"),
                         tape.param(s, "stf.conv_out.b"));
    Var flow = tape.linear(tape.concat_cols({ci, co}), tape.param(s, "stf.wf"),
                           tape.param(s, "stf.bf"));

    Var fused = tape.add(tape.add(s_hat, t_hat), flow);
    return tape.linear(fused, tape.param(s, "stf.wl"), tape.param(s, "stf.bl"));
}

Var Model::dli_layer(Tape& tape, Var emb, const RegionGraph& graph, int layer,
                     const ForwardOptions& opt, bool capture_this, std::size_t blocks,
                     std::size_t capture_block) const {
    ParameterStore& s = const_cast<ParameterStore&>(store_);
    const std::string pre = "dli" + std::to_string(layer);
    AttentionCapture* cap = capture_this ? opt.capture : nullptr;

    std::vector<Var> wqs, wks;
    wqs.reserve(cfg_.heads_dli);
    wks.reserve(cfg_.heads_dli);
    for (std::size_t m = 0; m < cfg_.heads_dli; ++m) {
        wqs.push_back(tape.param(s, pre + ".wq" + std::to_string(m)));
        wks.push_back(tape.param(s, pre + ".wk" + std::to_string(m)));
    }
    Var qall = tape.matmul(emb, tape.concat_cols(wqs));
    Var kall = tape.matmul(emb, tape.concat_cols(wks));
    Var heads = tape.multihead_neighbor_attention(qall, kall, emb, graph, cfg_.heads_dli,
                                                  cfg_.dropout, opt.rng ? opt.rng : &drop_rng_,
                                                  opt.training, opt.counter, cap, layer, blocks,
                                                  capture_block);
    Var att = tape.matmul(heads, tape.param(s, pre + ".wo"));
    Var x = tape.add(emb, att);
    if (cfg_.layer_norm)
        x = tape.layer_norm(x, tape.param(s, pre + ".ln1.g"), tape.param(s, pre + ".ln1.b"));

    Var h = tape.linear_relu(x, tape.param(s, pre + ".ffn.w1"), tape.param(s, pre + ".ffn.b1"));
    Var ffn = tape.linear(h, tape.param(s, pre + ".ffn.w2"), tape.param(s, pre + ".ffn.b2"));
    Var y = tape.dropout_add(ffn, x, cfg_.dropout, opt.rng ? *opt.rng : drop_rng_, opt.training);
    if (cfg_.layer_norm)
        y = tape.layer_norm(y, tape.param(s, pre + ".ln2.g"), tape.param(s, pre + ".ln2.b"));
    return y;
}

Var Model::dli_stack(Tape& tape, const SlotInput& slot, const RegionGraph& graph,
                     const ForwardOptions& opt, bool capture_this) const {
    Var x = stf_embed(tape, slot);
    for (std::size_t l = 0; l < cfg_.alpha; ++l)
        x = dli_layer(tape, x, graph, static_cast<int>(l), opt, capture_this);
    return x;
}

Var Model::dlm(Tape& tape, Var r_target, const std::vector<Var>& r_context,
               const ForwardOptions& opt) const {
    if (r_context.empty()) throw std::invalid_argument("dlm: empty context set Q");
    ParameterStore& s = const_cast<ParameterStore&>(store_);

    std::vector<Var> wqs, wks, wvs;
    wqs.reserve(cfg_.heads_dlm);
    wks.reserve(cfg_.heads_dlm);
    wvs.reserve(cfg_.heads_dlm);
    for (std::size_t z = 0; z < cfg_.heads_dlm; ++z) {
        wqs.push_back(tape.param(s, "dlm.wq" + std::to_string(z)));
        wks.push_back(tape.param(s, "dlm.wk" + std::to_string(z)));
        wvs.push_back(tape.param(s, "dlm.wv" + std::to_string(z)));
    }
    Var qall = tape.matmul(r_target, tape.concat_cols(wqs));
    Var wkall = tape.concat_cols(wks);
    std::vector<Var> keys;
    keys.reserve(r_context.size());
    for (Var rc : r_context) keys.push_back(tape.matmul(rc, wkall));
    // Aggregate raw context embeddings first, then project by W_V.
    // Projecting the head-concatenated aggregate by blockdiag(W_V) is the
    // same map, and it folds into W_T as one small matrix product.
    Var agg = tape.multihead_temporal_attention(qall, keys, r_context, cfg_.heads_dlm,
                                                cfg_.dropout, opt.rng ? opt.rng : &drop_rng_,
                                                opt.training, opt.capture);
    Var merged = tape.matmul(agg, tape.matmul(tape.blockdiag(wvs), tape.param(s, "dlm.wt")));
    Var x = tape.add(r_target, merged);  // residual path carries the query
    if (cfg_.layer_norm)
        x = tape.layer_norm(x, tape.param(s, "dlm.ln1.g"), tape.param(s, "dlm.ln1.b"));

    Var h = tape.linear_relu(x, tape.param(s, "dlm.ffn.w1"), tape.param(s, "dlm.ffn.b1"));
    Var ffn = tape.linear(h, tape.param(s, "dlm.ffn.w2"), tape.param(s, "dlm.ffn.b2"));
    Var y = tape.dropout_add(ffn, x, cfg_.dropout, opt.rng ? *opt.rng : drop_rng_, opt.training);
    if (cfg_.layer_norm)
        y = tape.layer_norm(y, tape.param(s, "dlm.ln2.g"), tape.param(s, "dlm.ln2.b"));
    return y;
}

Var Model::predict_head(Tape& tape, Var omega) const {
    ParameterStore& s = const_cast<ParameterStore&>(store_);
    return tape.relu(tape.linear(omega, tape.param(s, "pred.w"), tape.param(s, "pred.b")));
}

Var Model::loss(Tape& tape, Var pred, const Tensor& truth) const {
    const Tensor& P = tape.value(pred);
    if (!P.same_shape(truth))
        throw std::invalid_argument("loss: prediction/truth shape mismatch");
    Var diff = tape.sub(pred, tape.input(truth));
    Var ss = tape.sum_squares(diff);
    return tape.sqrt_scalar(tape.scale(ss, 1.0 / (2.0 * static_cast<double>(cfg_.n))));
}

Var Model::forward(Tape& tape, const TemporalContext& ctx, const RegionGraph& graph,
                   const ForwardOptions& opt) const {
    return forward_many(tape, {&ctx}, graph, opt)[0];
}

std::vector<Var> Model::forward_many(Tape& tape, const std::vector<const TemporalContext*>& ctxs,
                                     const RegionGraph& graph, const ForwardOptions& opt) const {
    if (ctxs.empty()) throw std::invalid_argument("forward: no samples");
    if (opt.capture && ctxs.size() > 1)
        throw std::invalid_argument("forward: attention capture needs a single sample");
    // One batched pass through the spatial stack covers every context slot and
    // target of every sample; the per-slot views are then sliced back out for
    // each sample's temporal attention. Attention weights, when captured, come
    // from the target block.
    std::vector<const SlotInput*> slots;
    for (const TemporalContext* ctx : ctxs) {
        if (ctx->context.empty()) throw std::invalid_argument("forward: empty context");
        for (const auto& c : ctx->context)
            if (c.slot >= ctx->target_slot)
                throw std::invalid_argument("forward: context slot not before target");
        for (const auto& c : ctx->context) slots.push_back(&c);
        slots.push_back(&ctx->target);
    }
    const std::size_t B = slots.size();
    const std::size_t n = cfg_.n;

    Var x = stf_embed_batch(tape, slots);
    for (std::size_t l = 0; l < cfg_.alpha; ++l)
        x = dli_layer(tape, x, graph, static_cast<int>(l), opt, opt.capture != nullptr, B, B - 1);

    std::vector<Var> preds;
    preds.reserve(ctxs.size());
    std::size_t b = 0;
    for (const TemporalContext* ctx : ctxs) {
        std::vector<Var> r_ctx;
        r_ctx.reserve(ctx->context.size());
        for (std::size_t s = 0; s < ctx->context.size(); ++s, ++b)
            r_ctx.push_back(tape.slice_rows(x, b * n, (b + 1) * n));
        Var r_t = tape.slice_rows(x, b * n, (b + 1) * n);
        ++b;
        Var omega = dlm(tape, r_t, r_ctx, opt);
        preds.push_back(predict_head(tape, omega));
    }
    return preds;
}

Tensor Model::predict(const TemporalContext& ctx, const RegionGraph& graph,
                      const ForwardOptions& opt) const {
    Tape tape;
    Var p = forward(tape, ctx, graph, opt);
    return tape.value(p);
}

double rmse_loss(const Tensor& pred, const Tensor& truth) {
    if (!pred.same_shape(truth)) throw std::invalid_argument("rmse_loss: shape mismatch");
    double ss = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = pred.data[i] - truth.data[i];
        ss += d * d;
    }
    return std::sqrt(ss / static_cast<double>(pred.rows() * 2));
}

namespace {

constexpr char kMagic[6] = {'S', 'T', 'T', 'I', 'S', '\0'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw std::runtime_error("checkpoint: truncated");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& model) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
    out.write(kMagic, sizeof(kMagic));
    write_u32(out, kVersion);
    const std::string cfg = model.config().to_json();
    write_u32(out, static_cast<std::uint32_t>(cfg.size()));
    out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    for (const auto& p : model.store().params()) {
        write_u32(out, static_cast<std::uint32_t>(p.name.size()));
        out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        write_u32(out, static_cast<std::uint32_t>(p.value.shape.size()));
        for (auto dim : p.value.shape) write_u32(out, static_cast<std::uint32_t>(dim));
        static_assert(sizeof(double) == 8);
        out.write(reinterpret_cast<const char*>(p.value.data.data()),
                  static_cast<std::streamsize>(p.value.data.size() * 8));
    }
    if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

Model load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read checkpoint: " + path);
    char magic[6];
    in.read(magic, 6);
    if (!in || std::memcmp(magic, kMagic, 6) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    const std::uint32_t version = read_u32(in);
    if (version != kVersion)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    const std::uint32_t cfg_len = read_u32(in);
    std::string cfg_json(cfg_len, '\0');
    in.read(cfg_json.data(), cfg_len);
    if (!in) throw std::runtime_error("checkpoint: truncated config");

    Model model(ModelConfig::from_json(cfg_json), 0);
    auto& params = model.store().params();
    for (auto& p : params) {
        const std::uint32_t name_len = read_u32(in);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        if (name != p.name)
            throw std::runtime_error("checkpoint: parameter order mismatch, expected " + p.name +
                                     " got " + name);
        const std::uint32_t ndim = read_u32(in);
        std::vector<std::size_t> dims(ndim);
        for (auto& dim : dims) dim = read_u32(in);
        if (dims != p.value.shape)
            throw std::runtime_error("checkpoint: shape mismatch for " + p.name);
        in.read(reinterpret_cast<char*>(p.value.data.data()),
                static_cast<std::streamsize>(p.value.data.size() * 8));
        if (!in) throw std::runtime_error("checkpoint: truncated values for " + p.name);
    }
    return model;
}

}  // namespace sttis
