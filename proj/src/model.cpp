#include "mudd/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace mudd {

std::string variant_name(ModelVariant v) {
    switch (v) {
        case ModelVariant::baseline: return "baseline";
        case ModelVariant::static_dense: return "static_dense";
        case ModelVariant::dynamic_dense: return "dynamic_dense";
        case ModelVariant::multiway_static: return "multiway_static";
        case ModelVariant::multiway_dynamic: return "multiway_dynamic";
    }
    return "?";
}

ModelVariant parse_variant(const std::string& s) {
    if (s == "baseline") return ModelVariant::baseline;
    if (s == "static_dense") return ModelVariant::static_dense;
    if (s == "dynamic_dense") return ModelVariant::dynamic_dense;
    if (s == "multiway_static") return ModelVariant::multiway_static;
    if (s == "multiway_dynamic") return ModelVariant::multiway_dynamic;
    throw std::invalid_argument("unknown variant '" + s + "'");
}

std::vector<int64_t> ModelConfig::ffn_dims() const {
    if (realloc) return realloc_ffn_dims(L, ffn_base());
    return std::vector<int64_t>(static_cast<size_t>(L), ffn_base());
}

void ModelConfig::validate() const {
    auto fail = [](const std::string& msg) { throw std::invalid_argument("ModelConfig: " + msg); };
    if (L < 0) fail("L must be >= 0, got " + std::to_string(L));
    if (realloc && L < 1) fail("FFN re-allocation needs at least one layer");
    if (D < 2) fail("D must be >= 2");
    if (H < 1 || D % H != 0) fail("H must divide D (D=" + std::to_string(D) + ", H=" + std::to_string(H) + ")");
    if ((D / H) % 2 != 0) fail("head dim D/H must be even for rotary, got " + std::to_string(D / H));
    if (V < 2) fail("V must be >= 2");
    if (T_max < 1) fail("T_max must be >= 1");
    if (Dff < 0) fail("Dff must be >= 0 (0 selects the default)");
    const bool all_ways = way_q && way_k && way_v && way_r;
    if (!is_multiway() && !all_ways) fail("ways_enabled only applies to multiway variants");
    if (prepost && !uses_da()) fail("prepost_danorm requires a DA-bearing variant");
    if (schedule.mode != ConnectionSchedule::Mode::dense && !uses_da())
        fail("sparse schedules require a DA-bearing variant");
    if (schedule.mode == ConnectionSchedule::Mode::dilated && schedule.p > L)
        fail("dilated period p exceeds depth L: no DA module would ever run");
}

ModelConfig ablation_variant(const ModelConfig& base, const std::string& name_in) {
    ModelConfig c = base;
    c.variant = ModelVariant::baseline;
    c.realloc = false;
    c.prepost = false;
    c.way_q = c.way_k = c.way_v = c.way_r = true;
    c.schedule = ConnectionSchedule::make_dense();

    std::string name = name_in;
    // accept the typographic minus as an alias for '-'
    const std::string minus = "−";
    if (name.rfind(minus, 0) == 0) name = "-" + name.substr(minus.size());

    auto mudd_full = [&]() {
        c.variant = ModelVariant::multiway_dynamic;
        c.realloc = true;
    };
    if (name == "baseline") {
    } else if (name == "+static") {
        c.variant = ModelVariant::static_dense;
    } else if (name == "+dynamic") {
        c.variant = ModelVariant::dynamic_dense;
    } else if (name == "+mw_static") {
        c.variant = ModelVariant::multiway_static;
    } else if (name == "+mw_dynamic") {
        c.variant = ModelVariant::multiway_dynamic;
    } else if (name == "+mw_dynamic+realloc") {
        mudd_full();
    } else if (name == "+realloc") {
        c.realloc = true;
    } else if (name == "-Q") {
        mudd_full();
        c.way_q = false;
    } else if (name == "-K") {
        mudd_full();
        c.way_k = false;
    } else if (name == "-V") {
        mudd_full();
        c.way_v = false;
    } else if (name == "-R") {
        mudd_full();
        c.way_r = false;
    } else if (name.rfind("dilated(", 0) == 0 || name.rfind("sw(", 0) == 0) {
        mudd_full();
        c.schedule = ConnectionSchedule::parse(name);
    } else {
        throw std::invalid_argument("unknown ablation name '" + name_in + "'");
    }
    c.validate();
    return c;
}

std::vector<std::string> ablation_suite() {
    return {"baseline",    "+static", "+dynamic", "+mw_static", "+mw_dynamic",
            "+mw_dynamic+realloc", "+realloc", "-Q",       "-K",         "-V",
            "-R"};
}

ParamCounts model_param_counts(const ModelConfig& cfg) {
    cfg.validate();
    ParamCounts pc;
    pc.embed = cfg.V * cfg.D;
    pc.unembed = cfg.D * cfg.V;
    pc.final_norm = cfg.D;
    const auto dff = cfg.ffn_dims();
    for (int64_t i = 1; i <= cfg.L; ++i) {
        const int64_t f = dff[static_cast<size_t>(i - 1)];
        pc.blocks += 4 * cfg.D * cfg.D + 3 * cfg.D * f + 2 * cfg.D;
    }
    if (cfg.uses_da()) {
        const int64_t C = cfg.is_multiway() ? 4 : 1;
        for (int64_t i = 1; i <= cfg.L; ++i) {
            if (!cfg.schedule.has_da(i)) continue;
            const int64_t n = static_cast<int64_t>(cfg.schedule.set_for(i).size());
            const int64_t K = C * n;
            if (cfg.is_dynamic()) pc.da += cfg.D * K + K * K;
            pc.da += C * n;
            if (cfg.prepost) pc.da += n * cfg.D + cfg.D;
        }
    }
    return pc;
}

template <typename S>
Model<S> build_model(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Model<S> m;
    m.cfg = cfg;
    m.seed = seed;
    m.embed_table = Parameter<S>("embed", xavier_init<S>(seed, "embed", {cfg.V, cfg.D}),
                                 "xavier_normal", true);
    m.unembed = Parameter<S>("unembed", xavier_init<S>(seed, "unembed", {cfg.D, cfg.V}),
                             "xavier_normal", true);
    m.final_norm = Parameter<S>("final_norm", Array<S>({cfg.D}, S(1)), "ones", false);
    const auto dff = cfg.ffn_dims();
    for (int64_t i = 1; i <= cfg.L; ++i)
        m.blocks.push_back(init_block_params<S>(seed, "layer" + std::to_string(i), cfg.D, cfg.H,
                                                dff[static_cast<size_t>(i - 1)]));
    if (cfg.uses_da()) {
        const int64_t C = cfg.is_multiway() ? 4 : 1;
        const DAInitMode mode = cfg.prepost ? DAInitMode::prepost : DAInitMode::standard;
        for (int64_t i = 1; i <= cfg.L; ++i) {
            if (!cfg.schedule.has_da(i)) continue;
            m.das.emplace(i, init_da_params<S>(seed, "layer" + std::to_string(i), cfg.D, i, C,
                                               cfg.is_dynamic(), mode, cfg.schedule.set_for(i)));
        }
    }
    return m;
}

template <typename S>
std::vector<Parameter<S>*> Model<S>::parameters() {
    std::vector<Parameter<S>*> ps;
    ps.push_back(&embed_table);
    for (auto& b : blocks) {
        ps.push_back(&b.wq);
        ps.push_back(&b.wk);
        ps.push_back(&b.wv);
        ps.push_back(&b.wo);
        ps.push_back(&b.w_gate);
        ps.push_back(&b.w_up);
        ps.push_back(&b.w_down);
        ps.push_back(&b.attn_norm);
        ps.push_back(&b.ffn_norm);
    }
    for (auto& [i, d] : das) {
        if (d.dynamic_weights) {
            ps.push_back(&d.w1);
            ps.push_back(&d.w2);
        }
        ps.push_back(&d.a);
        for (auto& pre : d.pre_scales) ps.push_back(&pre);
        if (d.prepost) ps.push_back(&d.post_scale);
    }
    ps.push_back(&final_norm);
    ps.push_back(&unembed);
    return ps;
}

template <typename S>
int64_t Model<S>::param_count() {
    int64_t n = 0;
    for (auto* p : parameters()) n += p->value.size();
    return n;
}

template <typename S>
int64_t Model<S>::da_param_count() {
    int64_t n = 0;
    for (auto& [i, d] : das) {
        if (d.dynamic_weights) n += d.w1.value.size() + d.w2.value.size();
        n += d.a.value.size();
        for (auto& pre : d.pre_scales) n += pre.value.size();
        if (d.prepost) n += d.post_scale.value.size();
    }
    return n;
}

template <typename S>
int64_t Model<S>::nonembedding_param_count() {
    return param_count() - embed_table.value.size() - unembed.value.size() -
           final_norm.value.size();
}

template <typename S>
void Model<S>::zero_grads() {
    for (auto* p : parameters()) p->zero_grad();
}

template <typename S>
ForwardRun<S> model_forward(Model<S>& m, std::span<const int32_t> tokens, int64_t B, int64_t T,
                            std::span<const int32_t> targets, LayerTrace<S>* trace) {
    const ModelConfig& cfg = m.cfg;
    if (T < 1 || T > cfg.T_max)
        throw std::invalid_argument("model_forward: T=" + std::to_string(T) +
                                    " outside [1, T_max=" + std::to_string(cfg.T_max) + "]");
    if (static_cast<int64_t>(tokens.size()) != B * T)
        throw std::invalid_argument("model_forward: token count mismatch");
    if (!targets.empty() && targets.size() != tokens.size())
        throw std::invalid_argument("model_forward: target count mismatch");

    ForwardRun<S> run;
    Tape<S>& t = run.tape;
    using Val = typename Tape<S>::Val;

    auto x0 = t.embedding(tokens, t.param(m.embed_table), B, T);
    std::vector<Val> hist = {x0};
    StreamVals<S> s{x0, x0, x0, x0};
    if (trace) {
        *trace = LayerTrace<S>{};
        trace->embedding = t.val(x0);
    }

    for (int64_t i = 1; i <= cfg.L; ++i) {
        BlockParams<S>& bp = m.blocks[static_cast<size_t>(i - 1)];
        if (trace)
            trace->inputs.push_back({t.val(s.q), t.val(s.k), t.val(s.v), t.val(s.r)});
        Val attn{};
        Val xi = multi_input_block_forward(t, s.q, s.k, s.v, s.r, bp, trace ? &attn : nullptr);
        hist.push_back(xi);
        if (trace) {
            trace->block_out.push_back(t.val(xi));
            trace->attn.push_back(t.val(attn));
        }

        Val dw{};
        bool have_dw = false;
        auto it = m.das.find(i);
        if (it != m.das.end()) {
            DAParams<S>& dp = it->second;
            std::vector<Val> sub;
            for (int64_t j : dp.sources) sub.push_back(hist[static_cast<size_t>(j)]);
            std::span<const Val> sub_span(sub);
            if (cfg.prepost) {
                s = prepost_danorm(t, sub_span, dp, &dw);
                have_dw = dp.dynamic_weights;
            } else if (cfg.is_multiway()) {
                s = da_multiway(t, sub_span, dp, &dw);
                have_dw = dp.dynamic_weights;
            } else if (dp.dynamic_weights) {
                dw = generate_dynamic_weights(t, sub.back(), dp);
                have_dw = true;
                Val agg = da_dynamic(t, sub_span, dw);
                s = StreamVals<S>{agg, agg, agg, agg};
            } else {
                Val a_flat = t.reshape(t.param(dp.a), {dp.n()});
                Val agg = da_static(t, sub_span, a_flat);
                s = StreamVals<S>{agg, agg, agg, agg};
            }
            if (!cfg.way_q) s.q = xi;
            if (!cfg.way_k) s.k = xi;
            if (!cfg.way_v) s.v = xi;
            if (!cfg.way_r) s.r = xi;
            if (trace) {
                trace->sources.push_back(dp.sources);
                trace->ways.push_back(dp.C);
                trace->dyn_weights.push_back(have_dw ? t.val(dw) : Array<S>());
            }
        } else {
            s = StreamVals<S>{xi, xi, xi, xi};
            if (trace) {
                trace->sources.push_back({});
                trace->ways.push_back(0);
                trace->dyn_weights.push_back(Array<S>());
            }
        }
    }

    auto fin = t.rmsnorm(s.r, t.param(m.final_norm));
    run.logits = t.matmul(fin, t.param(m.unembed));
    if (!targets.empty()) {
        run.loss = t.cross_entropy(run.logits, targets);
        run.has_loss = true;
    }
    return run;
}

template <typename S>
Array<S> forward_logits(Model<S>& m, std::span<const int32_t> tokens, int64_t B, int64_t T) {
    auto run = model_forward(m, tokens, B, T);
    return run.tape.val(run.logits);
}

// ---------------------------------------------------------------------------
// Incremental decoding (plain kernels, no tape). Arithmetic mirrors the tape
// ops element-for-element so full-sequence and incremental paths agree.

namespace {

template <typename S>
void vec_matmul(const Array<S>& x, const Array<S>& w, Array<S>& out) {
    kern::matmul_nn(x.ptr(), w.ptr(), out.ptr(), 1, w.shape[0], w.shape[1], false);
}

template <typename S>
Array<S> rmsnorm_copy(const Array<S>& x, const S* scale) {
    Array<S> y(x.shape);
    kern::rmsnorm_vec(x.ptr(), scale, y.ptr(), x.size(), static_cast<S>(1e-6));
    return y;
}

}  // namespace

template <typename S>
DecodeCache<S> make_decode_cache(const Model<S>& m) {
    DecodeCache<S> c;
    const int64_t d = m.cfg.D / m.cfg.H;
    for (int64_t i = 0; i < m.cfg.L; ++i) {
        c.k_cache.push_back(Array<S>({m.cfg.H, m.cfg.T_max, d}));
        c.v_cache.push_back(Array<S>({m.cfg.H, m.cfg.T_max, d}));
    }
    return c;
}

template <typename S>
Array<S> decode_step(Model<S>& m, DecodeCache<S>& cache, int32_t token) {
    const ModelConfig& cfg = m.cfg;
    if (static_cast<int64_t>(cache.k_cache.size()) != cfg.L)
        throw std::invalid_argument("decode_step: cache was built for a different model");
    const int64_t pos = cache.pos;
    if (pos >= cfg.T_max)
        throw std::invalid_argument("decode_step: position " + std::to_string(pos) +
                                    " exceeds T_max " + std::to_string(cfg.T_max));
    if (token < 0 || token >= cfg.V)
        throw std::out_of_range("decode_step: token id " + std::to_string(token) +
                                " out of range [0," + std::to_string(cfg.V) + ")");
    const int64_t D = cfg.D, H = cfg.H, d = D / H;
    const S inv_sqrt_d = static_cast<S>(1.0 / std::sqrt(double(d)));

    Array<S> x0({D});
    std::copy(m.embed_table.value.ptr() + int64_t(token) * D,
              m.embed_table.value.ptr() + int64_t(token) * D + D, x0.ptr());
    std::vector<Array<S>> hist;
    hist.push_back(x0);
    Array<S> sq = x0, sk = x0, sv = x0, sr = x0;

    for (int64_t i = 1; i <= cfg.L; ++i) {
        BlockParams<S>& bp = m.blocks[static_cast<size_t>(i - 1)];
        Array<S>& kc = cache.k_cache[static_cast<size_t>(i - 1)];
        Array<S>& vc = cache.v_cache[static_cast<size_t>(i - 1)];

        // attention sublayer
        Array<S> nq = rmsnorm_copy(sq, bp.attn_norm.value.ptr());
        Array<S> nk = rmsnorm_copy(sk, bp.attn_norm.value.ptr());
        Array<S> nv = rmsnorm_copy(sv, bp.attn_norm.value.ptr());
        Array<S> q({D}), k({D}), v({D});
        vec_matmul(nq, bp.wq.value, q);
        vec_matmul(nk, bp.wk.value, k);
        vec_matmul(nv, bp.wv.value, v);
        Array<S> ctx({D});
        std::vector<S> scores(static_cast<size_t>(pos + 1));
        for (int64_t h = 0; h < H; ++h) {
            S* kq = kc.ptr() + (h * cfg.T_max + pos) * d;
            S* vq = vc.ptr() + (h * cfg.T_max + pos) * d;
            Array<S> qr({d});
            kern::rotary_vec(q.ptr() + h * d, qr.ptr(), d, pos, kRopeBase);
            kern::rotary_vec(k.ptr() + h * d, kq, d, pos, kRopeBase);
            std::copy(v.ptr() + h * d, v.ptr() + h * d + d, vq);
            for (int64_t j = 0; j <= pos; ++j) {
                const S* kj = kc.ptr() + (h * cfg.T_max + j) * d;
                S dot = S(0);
                for (int64_t c = 0; c < d; ++c) dot += qr.data[c] * kj[c];
                scores[static_cast<size_t>(j)] = dot * inv_sqrt_d;
            }
            kern::softmax_row(scores.data(), pos + 1, pos + 1);
            S* ch = ctx.ptr() + h * d;
            for (int64_t j = 0; j <= pos; ++j) {
                const S* vj = vc.ptr() + (h * cfg.T_max + j) * d;
                const S pj = scores[static_cast<size_t>(j)];
                if (j == 0)
                    for (int64_t c = 0; c < d; ++c) ch[c] = pj * vj[c];
                else
                    for (int64_t c = 0; c < d; ++c) ch[c] += pj * vj[c];
            }
        }
        Array<S> attn_out({D});
        vec_matmul(ctx, bp.wo.value, attn_out);
        Array<S> xa({D});
        for (int64_t c = 0; c < D; ++c) xa.data[c] = attn_out.data[c] + sr.data[c];

        // FFN sublayer
        Array<S> fn = rmsnorm_copy(xa, bp.ffn_norm.value.ptr());
        Array<S> gate({bp.Dff}), up({bp.Dff});
        vec_matmul(fn, bp.w_gate.value, gate);
        vec_matmul(fn, bp.w_up.value, up);
        for (int64_t c = 0; c < bp.Dff; ++c)
            gate.data[c] = kern::silu_scalar(gate.data[c]) * up.data[c];
        Array<S> ffn_out({D});
        vec_matmul(gate, bp.w_down.value, ffn_out);
        Array<S> xi({D});
        for (int64_t c = 0; c < D; ++c) xi.data[c] = ffn_out.data[c] + xa.data[c];
        hist.push_back(xi);

        auto it = m.das.find(i);
        if (it != m.das.end()) {
            DAParams<S>& dp = it->second;
            const int64_t n = dp.n();
            std::vector<const Array<S>*> sub;
            for (int64_t j : dp.sources) sub.push_back(&hist[static_cast<size_t>(j)]);
            std::vector<Array<S>> prenormed;
            if (dp.prepost)
                for (int64_t j = 0; j < n; ++j)
                    prenormed.push_back(rmsnorm_copy(
                        *sub[static_cast<size_t>(j)],
                        dp.pre_scales[static_cast<size_t>(j)].value.ptr()));

            std::vector<S> dw(static_cast<size_t>(dp.K()));
            if (dp.dynamic_weights) {
                Array<S> normed = rmsnorm_copy(xi, static_cast<const S*>(nullptr));
                Array<S> hidden({dp.K()});
                vec_matmul(normed, dp.w1.value, hidden);
                for (int64_t c = 0; c < dp.K(); ++c)
                    hidden.data[c] = kern::gelu_scalar(hidden.data[c]);
                Array<S> raw({dp.K()});
                vec_matmul(hidden, dp.w2.value, raw);
                for (int64_t c = 0; c < dp.K(); ++c) raw.data[c] += dp.a.value.data[c];
                std::copy(raw.data.begin(), raw.data.end(), dw.begin());
            } else {
                std::copy(dp.a.value.data.begin(), dp.a.value.data.end(), dw.begin());
            }

            auto aggregate = [&](int64_t way, Array<S>& out) {
                out = Array<S>({D});
                for (int64_t j = 0; j < n; ++j) {
                    const S wj = dw[static_cast<size_t>(way * n + j)];
                    const S* hj = dp.prepost ? prenormed[static_cast<size_t>(j)].ptr()
                                             : sub[static_cast<size_t>(j)]->ptr();
                    if (j == 0)
                        for (int64_t c = 0; c < D; ++c) out.data[c] = wj * hj[c];
                    else
                        for (int64_t c = 0; c < D; ++c) out.data[c] += wj * hj[c];
                }
                if (dp.prepost) {
                    Array<S> post = rmsnorm_copy(out, dp.post_scale.value.ptr());
                    for (int64_t c = 0; c < D; ++c) out.data[c] = post.data[c] + xi.data[c];
                }
            };
            if (dp.C == 4) {
                aggregate(0, sq);
                aggregate(1, sk);
                aggregate(2, sv);
                aggregate(3, sr);
            } else {
                Array<S> agg;
                aggregate(0, agg);
                sq = agg;
                sk = agg;
                sv = agg;
                sr = agg;
            }
            if (!cfg.way_q) sq = xi;
            if (!cfg.way_k) sk = xi;
            if (!cfg.way_v) sv = xi;
            if (!cfg.way_r) sr = xi;
        } else {
            sq = xi;
            sk = xi;
            sv = xi;
            sr = xi;
        }
    }

    Array<S> fin = rmsnorm_copy(sr, m.final_norm.value.ptr());
    Array<S> logits({cfg.V});
    vec_matmul(fin, m.unembed.value, logits);
    cache.pos++;
    return logits;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

nlohmann::json config_to_json(const ModelConfig& c) {
    return nlohmann::json{{"L", c.L},
                          {"D", c.D},
                          {"H", c.H},
                          {"V", c.V},
                          {"T_max", c.T_max},
                          {"Dff", c.Dff},
                          {"variant", variant_name(c.variant)},
                          {"way_q", c.way_q},
                          {"way_k", c.way_k},
                          {"way_v", c.way_v},
                          {"way_r", c.way_r},
                          {"realloc", c.realloc},
                          {"prepost", c.prepost},
                          {"schedule", c.schedule.name()}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.L = j.at("L").get<int64_t>();
    c.D = j.at("D").get<int64_t>();
    c.H = j.at("H").get<int64_t>();
    c.V = j.at("V").get<int64_t>();
    c.T_max = j.at("T_max").get<int64_t>();
    c.Dff = j.at("Dff").get<int64_t>();
    c.variant = parse_variant(j.at("variant").get<std::string>());
    c.way_q = j.at("way_q").get<bool>();
    c.way_k = j.at("way_k").get<bool>();
    c.way_v = j.at("way_v").get<bool>();
    c.way_r = j.at("way_r").get<bool>();
    c.realloc = j.at("realloc").get<bool>();
    c.prepost = j.at("prepost").get<bool>();
    c.schedule = ConnectionSchedule::parse(j.at("schedule").get<std::string>());
    return c;
}

template <typename S>
constexpr const char* dtype_name() {
    if constexpr (std::is_same_v<S, float>) return "f32";
    else return "f64";
}

}  // namespace

template <typename S>
void save_checkpoint(Model<S>& m, const std::string& prefix) {
    nlohmann::json manifest;
    manifest["format"] = "mudd-checkpoint";
    manifest["version"] = 1;
    manifest["dtype"] = dtype_name<S>();
    manifest["byte_order"] = "little";
    manifest["seed"] = m.seed;
    manifest["config"] = config_to_json(m.cfg);
    nlohmann::json tensors = nlohmann::json::array();
    int64_t offset = 0;
    auto ps = m.parameters();
    for (auto* p : ps) {
        tensors.push_back({{"name", p->name},
                           {"shape", p->value.shape},
                           {"offset", offset},
                           {"elements", p->value.size()}});
        offset += p->value.size() * static_cast<int64_t>(sizeof(S));
    }
    manifest["tensors"] = tensors;
    manifest["blob_bytes"] = offset;

    std::ofstream jf(prefix + ".json");
    if (!jf) throw std::runtime_error("cannot write " + prefix + ".json");
    jf << manifest.dump(2) << "\n";
    jf.close();

    std::ofstream bf(prefix + ".bin", std::ios::binary);
    if (!bf) throw std::runtime_error("cannot write " + prefix + ".bin");
    for (auto* p : ps)
        bf.write(reinterpret_cast<const char*>(p->value.ptr()),
                 static_cast<std::streamsize>(p->value.size() * sizeof(S)));
    bf.close();
    if (!bf) throw std::runtime_error("write failed for " + prefix + ".bin");
}

namespace {

nlohmann::json read_manifest(const std::string& prefix) {
    std::ifstream jf(prefix + ".json");
    if (!jf) throw std::runtime_error("cannot read " + prefix + ".json");
    nlohmann::json manifest;
    jf >> manifest;
    if (manifest.value("format", "") != "mudd-checkpoint")
        throw std::runtime_error(prefix + ".json is not a model checkpoint manifest");
    return manifest;
}

}  // namespace

std::string checkpoint_dtype(const std::string& prefix) {
    return read_manifest(prefix).at("dtype").get<std::string>();
}

template <typename S>
Model<S> load_checkpoint(const std::string& prefix) {
    nlohmann::json manifest = read_manifest(prefix);
    if (manifest.at("dtype").get<std::string>() != dtype_name<S>())
        throw std::runtime_error("checkpoint dtype " + manifest.at("dtype").get<std::string>() +
                                 " does not match requested " + dtype_name<S>());
    ModelConfig cfg = config_from_json(manifest.at("config"));
    Model<S> m = build_model<S>(cfg, manifest.at("seed").get<uint64_t>());

    std::ifstream bf(prefix + ".bin", std::ios::binary);
    if (!bf) throw std::runtime_error("cannot read " + prefix + ".bin");
    auto ps = m.parameters();
    const auto& tensors = manifest.at("tensors");
    if (tensors.size() != ps.size())
        throw std::runtime_error("checkpoint manifest lists " + std::to_string(tensors.size()) +
                                 " tensors, model has " + std::to_string(ps.size()));
    for (size_t i = 0; i < ps.size(); ++i) {
        const auto& tj = tensors[i];
        if (tj.at("name").get<std::string>() != ps[i]->name)
            throw std::runtime_error("checkpoint tensor order mismatch at '" + ps[i]->name + "'");
        const auto shape = tj.at("shape").get<std::vector<int64_t>>();
        if (shape != ps[i]->value.shape)
            throw std::runtime_error("checkpoint shape mismatch for '" + ps[i]->name + "'");
        bf.seekg(tj.at("offset").get<int64_t>());
        bf.read(reinterpret_cast<char*>(ps[i]->value.ptr()),
                static_cast<std::streamsize>(ps[i]->value.size() * sizeof(S)));
        if (!bf) throw std::runtime_error("short read in " + prefix + ".bin");
    }
    return m;
}

#define MUDD_INSTANTIATE_MODEL(S)                                                               \
    template struct Model<S>;                                                                   \
    template Model<S> build_model<S>(const ModelConfig&, uint64_t);                             \
    template ForwardRun<S> model_forward<S>(Model<S>&, std::span<const int32_t>, int64_t,       \
                                            int64_t, std::span<const int32_t>, LayerTrace<S>*); \
    template Array<S> forward_logits<S>(Model<S>&, std::span<const int32_t>, int64_t, int64_t); \
    template DecodeCache<S> make_decode_cache<S>(const Model<S>&);                              \
    template Array<S> decode_step<S>(Model<S>&, DecodeCache<S>&, int32_t);                      \
    template void save_checkpoint<S>(Model<S>&, const std::string&);                            \
    template Model<S> load_checkpoint<S>(const std::string&);

MUDD_INSTANTIATE_MODEL(float)
MUDD_INSTANTIATE_MODEL(double)

}  // namespace mudd
