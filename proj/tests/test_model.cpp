#include <cmath>
#include <cstring>
#include <filesystem>
#include <numbers>
#include <vector>

#include "doctest.h"
#include "mudd/model.hpp"

using namespace mudd;

namespace {

ModelConfig small_cfg(ModelVariant v, int64_t L = 3, int64_t D = 16) {
    ModelConfig c;
    c.L = L;
    c.D = D;
    c.H = 2;
    c.V = 32;
    c.T_max = 40;
    c.variant = v;
    return c;
}

std::vector<int32_t> ramp_tokens(int64_t n, int64_t V) {
    std::vector<int32_t> t(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) t[static_cast<size_t>(i)] = static_cast<int32_t>((i * 7 + 3) % V);
    return t;
}

void perturb_params(Model<double>& m, uint64_t seed, double scale) {
    for (auto* p : m.parameters()) {
        RngState r = RngState(seed).stream(p->name);
        for (int64_t i = 0; i < p->value.size(); ++i)
            p->value.data[i] += scale * r.next_normal();
    }
}

bool logits_bitwise_equal(Model<double>& a, Model<double>& b, std::span<const int32_t> toks,
                          int64_t B, int64_t T) {
    auto la = forward_logits(a, toks, B, T);
    auto lb = forward_logits(b, toks, B, T);
    return std::memcmp(la.ptr(), lb.ptr(), sizeof(double) * la.size()) == 0;
}

double max_logit_diff(const Array<double>& a, const Array<double>& b) {
    double m = 0;
    for (int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

// ---- straight-line reference implementation (scalar loops only) ----

double ref_gelu(double x) {
    const double c = std::sqrt(2.0 / std::numbers::pi);
    return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}
double ref_silu(double x) { return x / (1.0 + std::exp(-x)); }

std::vector<double> ref_norm(const std::vector<double>& x, const double* g) {
    const int64_t D = static_cast<int64_t>(x.size());
    double ss = 0;
    for (double v : x) ss += v * v;
    const double inv = 1.0 / std::sqrt(ss / double(D) + 1e-6);
    std::vector<double> y(x.size());
    for (int64_t j = 0; j < D; ++j) y[static_cast<size_t>(j)] = x[static_cast<size_t>(j)] * inv * (g ? g[j] : 1.0);
    return y;
}

std::vector<double> ref_vecmat(const std::vector<double>& x, const Array<double>& w) {
    const int64_t M = w.shape[0], N = w.shape[1];
    std::vector<double> y(static_cast<size_t>(N), 0.0);
    for (int64_t n = 0; n < N; ++n)
        for (int64_t m = 0; m < M; ++m)
            y[static_cast<size_t>(n)] += x[static_cast<size_t>(m)] * w.data[m * N + n];
    return y;
}

void ref_rotary(std::vector<double>& v, int64_t pos, int64_t d, int64_t h0) {
    for (int64_t m = 0; m < d / 2; ++m) {
        const double theta = double(pos) * std::pow(10000.0, -2.0 * double(m) / double(d));
        const double c = std::cos(theta), s = std::sin(theta);
        const double a = v[static_cast<size_t>(h0 + 2 * m)], b = v[static_cast<size_t>(h0 + 2 * m + 1)];
        v[static_cast<size_t>(h0 + 2 * m)] = a * c - b * s;
        v[static_cast<size_t>(h0 + 2 * m + 1)] = a * s + b * c;
    }
}

// Full forward of a (possibly multiway-dynamic, dense-schedule) model for one
// sequence, written as per-position scalar loops.
std::vector<double> ref_model_forward(Model<double>& m, const std::vector<int32_t>& toks) {
    const ModelConfig& cfg = m.cfg;
    const int64_t T = static_cast<int64_t>(toks.size());
    const int64_t D = cfg.D, H = cfg.H, d = D / H;
    using Seq = std::vector<std::vector<double>>;  // [T][D]
    auto zero_seq = [&]() { return Seq(static_cast<size_t>(T), std::vector<double>(static_cast<size_t>(D), 0.0)); };

    Seq x0 = zero_seq();
    for (int64_t t = 0; t < T; ++t)
        for (int64_t c = 0; c < D; ++c)
            x0[static_cast<size_t>(t)][static_cast<size_t>(c)] =
                m.embed_table.value.data[int64_t(toks[static_cast<size_t>(t)]) * D + c];
    std::vector<Seq> hist = {x0};
    Seq sq = x0, sk = x0, sv = x0, sr = x0;

    for (int64_t i = 1; i <= cfg.L; ++i) {
        BlockParams<double>& bp = m.blocks[static_cast<size_t>(i - 1)];
        Seq xi = zero_seq();
        for (int64_t t = 0; t < T; ++t) {
            auto nq = ref_norm(sq[static_cast<size_t>(t)], bp.attn_norm.value.ptr());
            auto q = ref_vecmat(nq, bp.wq.value);
            std::vector<double> ctx(static_cast<size_t>(D), 0.0);
            for (int64_t h = 0; h < H; ++h) {
                ref_rotary(q, t, d, h * d);
                std::vector<double> scores(static_cast<size_t>(t + 1));
                for (int64_t j = 0; j <= t; ++j) {
                    auto nk = ref_norm(sk[static_cast<size_t>(j)], bp.attn_norm.value.ptr());
                    auto k = ref_vecmat(nk, bp.wk.value);
                    ref_rotary(k, j, d, h * d);
                    double dot = 0;
                    for (int64_t c = 0; c < d; ++c)
                        dot += q[static_cast<size_t>(h * d + c)] * k[static_cast<size_t>(h * d + c)];
                    scores[static_cast<size_t>(j)] = dot / std::sqrt(double(d));
                }
                double mx = scores[0];
                for (double s : scores) mx = std::max(mx, s);
                double z = 0;
                for (double& s : scores) {
                    s = std::exp(s - mx);
                    z += s;
                }
                for (int64_t j = 0; j <= t; ++j) {
                    auto nv = ref_norm(sv[static_cast<size_t>(j)], bp.attn_norm.value.ptr());
                    auto v = ref_vecmat(nv, bp.wv.value);
                    for (int64_t c = 0; c < d; ++c)
                        ctx[static_cast<size_t>(h * d + c)] +=
                            scores[static_cast<size_t>(j)] / z * v[static_cast<size_t>(h * d + c)];
                }
            }
            auto attn = ref_vecmat(ctx, bp.wo.value);
            std::vector<double> xa(static_cast<size_t>(D));
            for (int64_t c = 0; c < D; ++c)
                xa[static_cast<size_t>(c)] = attn[static_cast<size_t>(c)] + sr[static_cast<size_t>(t)][static_cast<size_t>(c)];
            auto fn = ref_norm(xa, bp.ffn_norm.value.ptr());
            auto g = ref_vecmat(fn, bp.w_gate.value);
            auto u = ref_vecmat(fn, bp.w_up.value);
            std::vector<double> hdn(static_cast<size_t>(bp.Dff));
            for (int64_t c = 0; c < bp.Dff; ++c)
                hdn[static_cast<size_t>(c)] = ref_silu(g[static_cast<size_t>(c)]) * u[static_cast<size_t>(c)];
            auto down = ref_vecmat(hdn, bp.w_down.value);
            for (int64_t c = 0; c < D; ++c)
                xi[static_cast<size_t>(t)][static_cast<size_t>(c)] = down[static_cast<size_t>(c)] + xa[static_cast<size_t>(c)];
        }
        hist.push_back(xi);

        auto it = m.das.find(i);
        if (it != m.das.end()) {
            DAParams<double>& dp = it->second;
            const int64_t n = dp.n();
            Seq outs[4] = {zero_seq(), zero_seq(), zero_seq(), zero_seq()};
            for (int64_t t = 0; t < T; ++t) {
                std::vector<double> dw(static_cast<size_t>(dp.K()), 0.0);
                if (dp.dynamic_weights) {
                    auto nx = ref_norm(xi[static_cast<size_t>(t)], nullptr);
                    auto hid = ref_vecmat(nx, dp.w1.value);
                    for (auto& v : hid) v = ref_gelu(v);
                    auto raw = ref_vecmat(hid, dp.w2.value);
                    for (int64_t k = 0; k < dp.K(); ++k)
                        dw[static_cast<size_t>(k)] = raw[static_cast<size_t>(k)] + dp.a.value.data[k];
                } else {
                    for (int64_t k = 0; k < dp.K(); ++k) dw[static_cast<size_t>(k)] = dp.a.value.data[k];
                }
                for (int64_t c = 0; c < dp.C; ++c)
                    for (int64_t j = 0; j < n; ++j) {
                        const auto& hj = hist[static_cast<size_t>(dp.sources[static_cast<size_t>(j)])];
                        for (int64_t col = 0; col < D; ++col)
                            outs[c][static_cast<size_t>(t)][static_cast<size_t>(col)] +=
                                dw[static_cast<size_t>(c * n + j)] * hj[static_cast<size_t>(t)][static_cast<size_t>(col)];
                    }
            }
            if (dp.C == 4) {
                sq = outs[0];
                sk = outs[1];
                sv = outs[2];
                sr = outs[3];
            } else {
                sq = sk = sv = sr = outs[0];
            }
            if (!cfg.way_q) sq = xi;
            if (!cfg.way_k) sk = xi;
            if (!cfg.way_v) sv = xi;
            if (!cfg.way_r) sr = xi;
        } else {
            sq = sk = sv = sr = xi;
        }
    }

    std::vector<double> logits(static_cast<size_t>(T * cfg.V));
    for (int64_t t = 0; t < T; ++t) {
        auto fin = ref_norm(sr[static_cast<size_t>(t)], m.final_norm.value.ptr());
        auto row = ref_vecmat(fin, m.unembed.value);
        for (int64_t v = 0; v < cfg.V; ++v) logits[static_cast<size_t>(t * cfg.V + v)] = row[static_cast<size_t>(v)];
    }
    return logits;
}

}  // namespace

TEST_CASE("config: ffn dims, defaults, validation") {
    ModelConfig c = small_cfg(ModelVariant::baseline, 4, 16);
    CHECK(c.ffn_base() == 40);
    CHECK(c.ffn_dims() == std::vector<int64_t>(4, 40));
    c.realloc = true;
    auto dims = c.ffn_dims();
    int64_t sum = 0;
    for (auto v : dims) sum += v;
    CHECK(sum == 4 * 40);

    CHECK_THROWS_AS(
        [] {
            ModelConfig bad = small_cfg(ModelVariant::baseline);
            bad.H = 3;
            bad.validate();
        }(),
        std::invalid_argument);
    CHECK_THROWS_AS(
        [] {
            ModelConfig bad = small_cfg(ModelVariant::baseline);
            bad.prepost = true;
            bad.validate();
        }(),
        std::invalid_argument);
    CHECK_THROWS_AS(
        [] {
            ModelConfig bad = small_cfg(ModelVariant::dynamic_dense);
            bad.way_v = false;  // ways only make sense for multiway variants
            bad.validate();
        }(),
        std::invalid_argument);
    CHECK_THROWS_AS(
        [] {
            ModelConfig bad = small_cfg(ModelVariant::multiway_dynamic, 3);
            bad.schedule = ConnectionSchedule::make_dilated(2, 5);  // p > L: DA never runs
            bad.validate();
        }(),
        std::invalid_argument);
    // multiway with only the residual way enabled is a valid reduced model
    ModelConfig r_only = small_cfg(ModelVariant::multiway_dynamic);
    r_only.way_q = r_only.way_k = r_only.way_v = false;
    r_only.validate();
    auto m = build_model<double>(r_only, 1);
    auto toks = ramp_tokens(6, r_only.V);
    CHECK(forward_logits(m, toks, 1, 6).size() == 6 * r_only.V);
}

TEST_CASE("ablation_variant maps names onto configs") {
    ModelConfig base = small_cfg(ModelVariant::baseline, 6, 16);
    auto chk = [&](const std::string& name, ModelVariant v, bool realloc) {
        auto c = ablation_variant(base, name);
        CHECK(c.variant == v);
        CHECK(c.realloc == realloc);
        return c;
    };
    chk("baseline", ModelVariant::baseline, false);
    chk("+static", ModelVariant::static_dense, false);
    chk("+dynamic", ModelVariant::dynamic_dense, false);
    chk("+mw_static", ModelVariant::multiway_static, false);
    chk("+mw_dynamic", ModelVariant::multiway_dynamic, false);
    chk("+mw_dynamic+realloc", ModelVariant::multiway_dynamic, true);
    chk("+realloc", ModelVariant::baseline, true);
    auto mv = chk("-V", ModelVariant::multiway_dynamic, true);
    CHECK(mv.way_q);
    CHECK(mv.way_k);
    CHECK_FALSE(mv.way_v);
    CHECK(mv.way_r);
    auto mq = chk("−Q", ModelVariant::multiway_dynamic, true);  // typographic minus accepted
    CHECK_FALSE(mq.way_q);
    auto dil = chk("dilated(2,2)", ModelVariant::multiway_dynamic, true);
    CHECK(dil.schedule == ConnectionSchedule::make_dilated(2, 2));
    auto sw = chk("sw(4)", ModelVariant::multiway_dynamic, true);
    CHECK(sw.schedule == ConnectionSchedule::make_sliding(4));
    CHECK_THROWS_AS(ablation_variant(base, "+everything"), std::invalid_argument);
    CHECK(ablation_suite().size() == 11);
    for (const auto& name : ablation_suite()) ablation_variant(base, name);
}

TEST_CASE("parameter counting: built models match shape-only accounting") {
    for (auto v : {ModelVariant::baseline, ModelVariant::static_dense, ModelVariant::dynamic_dense,
                   ModelVariant::multiway_static, ModelVariant::multiway_dynamic}) {
        for (bool realloc : {false, true}) {
            ModelConfig c = small_cfg(v, 4, 16);
            c.realloc = realloc;
            auto m = build_model<double>(c, 3);
            auto pc = model_param_counts(c);
            CHECK(m.param_count() == pc.total());
            CHECK(m.da_param_count() == pc.da);
            CHECK(m.nonembedding_param_count() == pc.nonembedding());
        }
    }
    ModelConfig pp = small_cfg(ModelVariant::multiway_dynamic, 4, 16);
    pp.prepost = true;
    auto m = build_model<double>(pp, 3);
    CHECK(m.param_count() == model_param_counts(pp).total());
    ModelConfig dil = small_cfg(ModelVariant::multiway_dynamic, 6, 16);
    dil.schedule = ConnectionSchedule::make_dilated(2, 2);
    auto md = build_model<double>(dil, 3);
    CHECK(md.param_count() == model_param_counts(dil).total());
}

TEST_CASE("parameter counting: paper-scale formulas") {
    SUBCASE("baseline L=24 D=2048 nonembedding ~ 12 L D^2 within 2%") {
        ModelConfig c;
        c.L = 24;
        c.D = 2048;
        c.H = 16;
        c.V = 50000;
        c.T_max = 4096;
        auto pc = model_param_counts(c);
        const double expect = 12.0 * double(c.L) * double(c.D) * double(c.D);
        CHECK(std::abs(double(pc.nonembedding()) - expect) / expect < 0.02);
    }
    SUBCASE("multiway_dynamic extra params == sum(D K_i + K_i^2) + sum C(i+1)") {
        for (int64_t L : {3, 6, 24}) {
            ModelConfig b = small_cfg(ModelVariant::baseline, L, 16);
            ModelConfig m = small_cfg(ModelVariant::multiway_dynamic, L, 16);
            int64_t expect = 0;
            for (int64_t i = 1; i <= L; ++i) {
                const int64_t K = 4 * (i + 1);
                expect += 16 * K + K * K + 4 * (i + 1);
            }
            CHECK(model_param_counts(m).total() - model_param_counts(b).total() == expect);
        }
    }
    SUBCASE("monotone accounting across the variant ladder") {
        const int64_t L = 5;
        auto count = [&](ModelVariant v) {
            return model_param_counts(small_cfg(v, L, 16)).total();
        };
        int64_t sum_n = 0;
        for (int64_t i = 1; i <= L; ++i) sum_n += i + 1;
        CHECK(count(ModelVariant::static_dense) == count(ModelVariant::baseline) + sum_n);
        CHECK(count(ModelVariant::dynamic_dense) > count(ModelVariant::static_dense));
        CHECK(count(ModelVariant::multiway_dynamic) > count(ModelVariant::dynamic_dense));
        CHECK(count(ModelVariant::multiway_static) == count(ModelVariant::baseline) + 4 * sum_n);
    }
}

TEST_CASE("init-reduction: every standard-init DA variant matches baseline bitwise") {
    const uint64_t seed = 17;
    auto toks = ramp_tokens(20, 32);
    ModelConfig bc = small_cfg(ModelVariant::baseline);
    auto base = build_model<double>(bc, seed);
    for (auto v : {ModelVariant::static_dense, ModelVariant::dynamic_dense,
                   ModelVariant::multiway_static, ModelVariant::multiway_dynamic}) {
        ModelConfig c = small_cfg(v);
        auto m = build_model<double>(c, seed);
        CHECK(logits_bitwise_equal(base, m, toks, 2, 10));
    }
    SUBCASE("sparse schedules also reduce at init") {
        for (const char* s : {"dilated(2,2)", "sw(2)"}) {
            ModelConfig c = small_cfg(ModelVariant::multiway_dynamic, 4);
            c.schedule = ConnectionSchedule::parse(s);
            ModelConfig b4 = small_cfg(ModelVariant::baseline, 4);
            auto base4 = build_model<double>(b4, seed);
            auto m = build_model<double>(c, seed);
            CHECK(logits_bitwise_equal(base4, m, toks, 2, 10));
        }
    }
    SUBCASE("prepost init also reduces: its aggregate is exactly zero") {
        ModelConfig c = small_cfg(ModelVariant::multiway_dynamic);
        c.prepost = true;
        auto m = build_model<double>(c, seed);
        CHECK(logits_bitwise_equal(base, m, toks, 2, 10));
    }
    SUBCASE("realloc variants reduce to the realloc baseline") {
        ModelConfig br = small_cfg(ModelVariant::baseline);
        br.realloc = true;
        ModelConfig mr = small_cfg(ModelVariant::multiway_dynamic);
        mr.realloc = true;
        auto a = build_model<double>(br, seed);
        auto b = build_model<double>(mr, seed);
        CHECK(logits_bitwise_equal(a, b, toks, 2, 10));
    }
}

TEST_CASE("full forward vs straight-line scalar reference") {
    auto run = [&](ModelConfig c) {
        auto m = build_model<double>(c, 23);
        perturb_params(m, 24, 0.05);
        auto toks = ramp_tokens(5, c.V);
        auto logits = forward_logits(m, toks, 1, 5);
        auto expect = ref_model_forward(m, toks);
        double worst = 0;
        for (int64_t k = 0; k < logits.size(); ++k)
            worst = std::max(worst, std::abs(logits.data[k] - expect[static_cast<size_t>(k)]));
        CHECK(worst < 1e-12);
    };
    ModelConfig c = small_cfg(ModelVariant::multiway_dynamic, 2, 8);
    c.V = 17;
    run(c);
    ModelConfig c0 = small_cfg(ModelVariant::baseline, 2, 8);
    c0.V = 17;
    run(c0);
    ModelConfig c1 = small_cfg(ModelVariant::dynamic_dense, 3, 8);
    c1.V = 17;
    run(c1);
    ModelConfig c2 = small_cfg(ModelVariant::multiway_static, 3, 8);
    c2.V = 17;
    run(c2);
}

TEST_CASE("traced forward") {
    ModelConfig c = small_cfg(ModelVariant::multiway_dynamic, 3, 16);
    auto m = build_model<double>(c, 31);
    perturb_params(m, 32, 0.05);
    auto toks = ramp_tokens(12, c.V);

    auto m2 = build_model<double>(c, 31);
    perturb_params(m2, 32, 0.05);
    LayerTrace<double> trace;
    auto run = model_forward(m, toks, 2, 6, {}, &trace);
    auto plain = forward_logits(m2, toks, 2, 6);
    const auto& traced = run.tape.val(run.logits);
    CHECK(std::memcmp(traced.ptr(), plain.ptr(), sizeof(double) * plain.size()) == 0);

    REQUIRE(trace.inputs.size() == 3);
    REQUIRE(trace.block_out.size() == 3);
    REQUIRE(trace.attn.size() == 3);
    REQUIRE(trace.dyn_weights.size() == 3);
    CHECK(trace.embedding.shape == std::vector<int64_t>{2, 6, 16});
    for (int64_t i = 0; i < 3; ++i) {
        CHECK(trace.ways[static_cast<size_t>(i)] == 4);
        CHECK(trace.sources[static_cast<size_t>(i)].size() == static_cast<size_t>(i + 2));
        CHECK(trace.dyn_weights[static_cast<size_t>(i)].shape ==
              std::vector<int64_t>{2, 6, 4 * (i + 2)});
        const auto& at = trace.attn[static_cast<size_t>(i)];
        REQUIRE(at.shape == std::vector<int64_t>{2, 2, 6, 6});
        for (int64_t r = 0; r < 2 * 2 * 6; ++r) {
            double sum = 0;
            for (int64_t j = 0; j < 6; ++j) sum += at.data[r * 6 + j];
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
        }
    }
    // layer-1 streams are the embedding on all four ways
    for (int64_t w = 0; w < 4; ++w)
        CHECK(std::memcmp(trace.inputs[0][static_cast<size_t>(w)].ptr(), trace.embedding.ptr(),
                          sizeof(double) * trace.embedding.size()) == 0);
}

TEST_CASE("causality holds through the full MUDD model") {
    ModelConfig c = small_cfg(ModelVariant::multiway_dynamic, 3, 16);
    c.realloc = true;
    auto ma = build_model<double>(c, 41);
    auto mb = build_model<double>(c, 41);
    perturb_params(ma, 42, 0.05);
    perturb_params(mb, 42, 0.05);
    auto ta = ramp_tokens(8, c.V);
    auto tb = ta;
    tb[5] = (tb[5] + 9) % 32;
    auto la = forward_logits(ma, ta, 1, 8);
    auto lb = forward_logits(mb, tb, 1, 8);
    CHECK(std::memcmp(la.ptr(), lb.ptr(), sizeof(double) * 5 * c.V) == 0);
    bool later = false;
    for (int64_t k = 5 * c.V; k < la.size(); ++k) later |= (la.data[k] != lb.data[k]);
    CHECK(later);
}

TEST_CASE("disabled ways ignore their weight slices") {
    ModelConfig c = small_cfg(ModelVariant::multiway_dynamic, 3, 16);
    c.way_v = false;
    auto toks = ramp_tokens(8, c.V);
    auto base = build_model<double>(c, 51);
    perturb_params(base, 52, 0.05);
    auto l0 = forward_logits(base, toks, 1, 8);

    SUBCASE("perturbing the V-way prior row changes nothing") {
        auto m = build_model<double>(c, 51);
        perturb_params(m, 52, 0.05);
        for (auto& [i, dp] : m.das) {
            const int64_t n = dp.n();
            for (int64_t j = 0; j < n; ++j) dp.a.value.data[2 * n + j] += 0.37;  // way order q,k,v,r
        }
        auto l1 = forward_logits(m, toks, 1, 8);
        CHECK(std::memcmp(l0.ptr(), l1.ptr(), sizeof(double) * l0.size()) == 0);
    }
    SUBCASE("perturbing an enabled way's prior row changes the logits") {
        auto m = build_model<double>(c, 51);
        perturb_params(m, 52, 0.05);
        for (auto& [i, dp] : m.das) dp.a.value.data[0] += 0.37;
        auto l1 = forward_logits(m, toks, 1, 8);
        CHECK(max_logit_diff(l0, l1) > 0.0);
    }
    SUBCASE("W2 columns feeding the disabled way are also inert") {
        auto m = build_model<double>(c, 51);
        perturb_params(m, 52, 0.05);
        for (auto& [i, dp] : m.das) {
            const int64_t n = dp.n(), K = dp.K();
            for (int64_t r = 0; r < K; ++r)
                for (int64_t j = 0; j < n; ++j) dp.w2.value.data[r * K + 2 * n + j] += 0.21;
        }
        auto l1 = forward_logits(m, toks, 1, 8);
        CHECK(std::memcmp(l0.ptr(), l1.ptr(), sizeof(double) * l0.size()) == 0);
    }
}

TEST_CASE("incremental decoding matches full-sequence recomputation") {
    auto decode_suite = [&](ModelConfig c, uint64_t seed) {
        CAPTURE(variant_name(c.variant));
        CAPTURE(c.schedule.name());
        auto m = build_model<double>(c, seed);
        perturb_params(m, seed + 1, 0.05);
        auto cache = make_decode_cache(m);
        std::vector<int32_t> toks = {5};
        const int64_t steps = 12;
        double worst = 0;
        for (int64_t s = 0; s < steps; ++s) {
            auto inc = decode_step(m, cache, toks.back());
            CHECK(cache.pos == static_cast<int64_t>(toks.size()));
            auto full = forward_logits(m, toks, 1, static_cast<int64_t>(toks.size()));
            std::vector<double> last(full.ptr() + (toks.size() - 1) * c.V,
                                     full.ptr() + toks.size() * c.V);
            int64_t am_inc = 0, am_full = 0;
            for (int64_t v = 1; v < c.V; ++v) {
                if (inc.data[v] > inc.data[am_inc]) am_inc = v;
                if (last[static_cast<size_t>(v)] > last[static_cast<size_t>(am_full)]) am_full = v;
            }
            CHECK(am_inc == am_full);
            for (int64_t v = 0; v < c.V; ++v)
                worst = std::max(worst, std::abs(inc.data[v] - last[static_cast<size_t>(v)]));
            toks.push_back(static_cast<int32_t>(am_inc));
        }
        CHECK(worst < 1e-9);
        return worst;
    };

    decode_suite(small_cfg(ModelVariant::baseline), 61);
    {
        ModelConfig c = small_cfg(ModelVariant::multiway_dynamic);
        c.realloc = true;
        decode_suite(c, 62);
    }
    {
        ModelConfig c = small_cfg(ModelVariant::multiway_dynamic, 4);
        c.realloc = true;
        c.schedule = ConnectionSchedule::make_dilated(2, 2);
        decode_suite(c, 63);
    }
    {
        ModelConfig c = small_cfg(ModelVariant::multiway_dynamic, 6);
        c.schedule = ConnectionSchedule::make_sliding(4);
        decode_suite(c, 64);
    }
    {
        ModelConfig c = small_cfg(ModelVariant::multiway_dynamic);
        c.prepost = true;
        decode_suite(c, 65);
    }
    decode_suite(small_cfg(ModelVariant::dynamic_dense), 66);
    {
        ModelConfig c = small_cfg(ModelVariant::multiway_dynamic);
        c.way_k = false;
        decode_suite(c, 67);
    }
}

TEST_CASE("decode: first step equals a length-1 forward") {
    ModelConfig c = small_cfg(ModelVariant::multiway_dynamic);
    auto m = build_model<double>(c, 71);
    perturb_params(m, 72, 0.05);
    auto cache = make_decode_cache(m);
    auto inc = decode_step(m, cache, 9);
    std::vector<int32_t> one = {9};
    auto full = forward_logits(m, one, 1, 1);
    CHECK(max_logit_diff(inc, full) < 1e-12);
}

TEST_CASE("decode: cache growth and rejection paths") {
    ModelConfig c = small_cfg(ModelVariant::multiway_dynamic);
    c.T_max = 4;
    auto m = build_model<double>(c, 81);
    auto cache = make_decode_cache(m);
    CHECK(static_cast<int64_t>(cache.k_cache.size()) == c.L);
    for (int64_t s = 0; s < 4; ++s) {
        decode_step(m, cache, static_cast<int32_t>(s));
        CHECK(cache.pos == s + 1);
    }
    CHECK_THROWS_AS(decode_step(m, cache, 1), std::invalid_argument);  // past T_max
    auto fresh = make_decode_cache(m);
    CHECK_THROWS_AS(decode_step(m, fresh, 99), std::out_of_range);  // token >= V
    ModelConfig c2 = small_cfg(ModelVariant::baseline, 5);
    auto m2 = build_model<double>(c2, 82);
    CHECK_THROWS_AS(decode_step(m2, fresh, 1), std::invalid_argument);  // foreign cache
}

TEST_CASE("forward input validation") {
    ModelConfig c = small_cfg(ModelVariant::baseline);
    auto m = build_model<double>(c, 91);
    auto toks = ramp_tokens(41, c.V);
    CHECK_THROWS_AS(forward_logits(m, toks, 1, 41), std::invalid_argument);  // T > T_max
    std::vector<int32_t> wrong = {1, 2, 3};
    CHECK_THROWS_AS(forward_logits(m, wrong, 2, 2), std::invalid_argument);  // count mismatch
    std::vector<int32_t> oob = {1, 2, 3, 64};
    CHECK_THROWS_AS(forward_logits(m, oob, 1, 4), std::out_of_range);
}

TEST_CASE("checkpoint round-trip is bit-exact") {
    namespace fs = std::filesystem;
    const std::string prefix = (fs::temp_directory_path() / "mudd_test_ckpt").string();
    ModelConfig c = small_cfg(ModelVariant::multiway_dynamic, 3, 16);
    c.realloc = true;
    c.schedule = ConnectionSchedule::make_dilated(1, 1);
    auto m = build_model<double>(c, 101);
    perturb_params(m, 102, 0.05);
    save_checkpoint(m, prefix);
    CHECK(checkpoint_dtype(prefix) == "f64");

    auto loaded = load_checkpoint<double>(prefix);
    CHECK(loaded.cfg == c);
    CHECK(loaded.seed == 101);
    auto pa = m.parameters();
    auto pb = loaded.parameters();
    REQUIRE(pa.size() == pb.size());
    for (size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i]->name == pb[i]->name);
        REQUIRE(pa[i]->value.shape == pb[i]->value.shape);
        CHECK(std::memcmp(pa[i]->value.ptr(), pb[i]->value.ptr(),
                          sizeof(double) * pa[i]->value.size()) == 0);
    }
    auto toks = ramp_tokens(8, c.V);
    CHECK(logits_bitwise_equal(m, loaded, toks, 1, 8));

    CHECK_THROWS_AS(load_checkpoint<float>(prefix), std::runtime_error);  // dtype mismatch
    fs::remove(prefix + ".json");
    fs::remove(prefix + ".bin");
    CHECK_THROWS_AS(load_checkpoint<double>(prefix), std::runtime_error);
}

TEST_CASE("checkpoint round-trip in float32") {
    namespace fs = std::filesystem;
    const std::string prefix = (fs::temp_directory_path() / "mudd_test_ckpt32").string();
    ModelConfig c = small_cfg(ModelVariant::static_dense, 2, 16);
    auto m = build_model<float>(c, 111);
    save_checkpoint(m, prefix);
    CHECK(checkpoint_dtype(prefix) == "f32");
    auto loaded = load_checkpoint<float>(prefix);
    auto pa = m.parameters();
    auto pb = loaded.parameters();
    REQUIRE(pa.size() == pb.size());
    for (size_t i = 0; i < pa.size(); ++i)
        CHECK(std::memcmp(pa[i]->value.ptr(), pb[i]->value.ptr(),
                          sizeof(float) * pa[i]->value.size()) == 0);
    fs::remove(prefix + ".json");
    fs::remove(prefix + ".bin");
}

TEST_CASE("training-style gradients flow end to end") {
    ModelConfig c = small_cfg(ModelVariant::multiway_dynamic, 2, 8);
    c.V = 17;
    auto m = build_model<double>(c, 121);
    perturb_params(m, 122, 0.05);
    auto toks = ramp_tokens(8, c.V);
    std::vector<int32_t> targets(toks.begin(), toks.end());
    std::rotate(targets.begin(), targets.begin() + 1, targets.end());
    auto run = model_forward(m, toks, 2, 4, targets);
    REQUIRE(run.has_loss);
    const double loss = run.tape.val(run.loss).data[0];
    CHECK(loss > 0.0);
    CHECK(loss < 20.0);
    run.tape.backward(run.loss);
    int64_t nonzero = 0, total = 0;
    for (auto* p : m.parameters()) {
        for (int64_t k = 0; k < p->grad.size(); ++k) {
            total++;
            if (p->grad.data[k] != 0.0) nonzero++;
        }
    }
    CHECK(nonzero > total / 4);  // most of the model participates
    m.zero_grads();
    for (auto* p : m.parameters())
        for (int64_t k = 0; k < p->grad.size(); ++k) REQUIRE(p->grad.data[k] == 0.0);
}
