#include "mudd/mudd.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace mudd {

ConnectionSchedule ConnectionSchedule::make_dense() { return ConnectionSchedule{}; }

ConnectionSchedule ConnectionSchedule::make_dilated(int64_t k, int64_t p) {
    if (k < 1 || p < 1)
        throw std::invalid_argument("dilated schedule needs k, p >= 1");
    ConnectionSchedule s;
    s.mode = Mode::dilated;
    s.k = k;
    s.p = p;
    return s;
}

ConnectionSchedule ConnectionSchedule::make_sliding(int64_t n) {
    if (n < 1) throw std::invalid_argument("sliding_window schedule needs n >= 1");
    ConnectionSchedule s;
    s.mode = Mode::sliding_window;
    s.n = n;
    return s;
}

ConnectionSchedule ConnectionSchedule::parse(const std::string& text) {
    if (text == "dense") return make_dense();
    long long a = 0, b = 0;
    if (std::sscanf(text.c_str(), "dilated(%lld,%lld)", &a, &b) == 2) return make_dilated(a, b);
    if (std::sscanf(text.c_str(), "sw(%lld)", &a) == 1) return make_sliding(a);
    throw std::invalid_argument("unknown schedule '" + text +
                                "' (expected dense, dilated(k,p), or sw(n))");
}

std::string ConnectionSchedule::name() const {
    switch (mode) {
        case Mode::dense: return "dense";
        case Mode::dilated:
            return "dilated(" + std::to_string(k) + "," + std::to_string(p) + ")";
        case Mode::sliding_window: return "sw(" + std::to_string(n) + ")";
    }
    return "?";
}

bool ConnectionSchedule::has_da(int64_t i) const {
    if (i < 1) return false;
    if (mode == Mode::dilated) return i % p == 0;
    return true;
}

std::vector<int64_t> ConnectionSchedule::set_for(int64_t i) const {
    if (!has_da(i)) return {};
    std::vector<int64_t> s;
    switch (mode) {
        case Mode::dense:
            for (int64_t j = 0; j <= i; ++j) s.push_back(j);
            break;
        case Mode::dilated: {
            // every k-th block output walking back from i, plus the embedding
            s.push_back(0);
            std::vector<int64_t> back;
            for (int64_t j = i; j >= 1; j -= k) back.push_back(j);
            for (auto it = back.rbegin(); it != back.rend(); ++it) s.push_back(*it);
            break;
        }
        case Mode::sliding_window: {
            s.push_back(0);
            for (int64_t j = std::max<int64_t>(1, i - n + 1); j <= i; ++j) s.push_back(j);
            break;
        }
    }
    return s;
}

template <typename S>
DAParams<S> init_da_params(uint64_t seed, const std::string& prefix, int64_t D,
                           int64_t layer_index, int64_t C, bool dynamic_weights, DAInitMode mode,
                           std::vector<int64_t> sources) {
    if (layer_index < 1) throw std::invalid_argument("init_da_params: layer_index must be >= 1");
    if (C != 1 && C != 4) throw std::invalid_argument("init_da_params: C must be 1 or 4");
    if (sources.empty() || !std::is_sorted(sources.begin(), sources.end()) ||
        sources.back() != layer_index || sources.front() < 0)
        throw std::invalid_argument(
            "init_da_params: sources must ascend and end at the layer's own index");
    DAParams<S> p;
    p.layer_index = layer_index;
    p.C = C;
    p.D = D;
    p.sources = std::move(sources);
    p.dynamic_weights = dynamic_weights;
    p.prepost = (mode == DAInitMode::prepost);
    const int64_t n = p.n();
    const int64_t K = p.K();

    if (dynamic_weights) {
        p.w1 = Parameter<S>(prefix + ".da_w1",
                            normal_init<S>(seed, prefix + ".da_w1", {D, K},
                                           std::sqrt(1.0 / double(D))),
                            "normal(0,1/D)", true);
        p.w2 = Parameter<S>(prefix + ".da_w2", Array<S>({K, K}), "zeros", true);
    }
    Array<S> a({C, n});
    if (mode == DAInitMode::standard) {
        // one-hot at the self entry (the last source) for every way
        for (int64_t c = 0; c < C; ++c) a.data[c * n + (n - 1)] = S(1);
    }
    p.a = Parameter<S>(prefix + ".da_a", std::move(a), p.prepost ? "zeros" : "one_hot_self", true);
    if (p.prepost) {
        for (int64_t j = 0; j < n; ++j)
            p.pre_scales.push_back(Parameter<S>(prefix + ".da_pre" + std::to_string(j),
                                                Array<S>({D}, S(1)), "ones", false));
        p.post_scale =
            Parameter<S>(prefix + ".da_post", Array<S>({D}, static_cast<S>(1e-3)), "1e-3", false);
    }
    return p;
}

template <typename S>
typename Tape<S>::Val da_static(Tape<S>& t, std::span<const typename Tape<S>::Val> history,
                                typename Tape<S>::Val a) {
    return t.weighted_sum_rows(history, a);
}

template <typename S>
typename Tape<S>::Val generate_dynamic_weights(Tape<S>& t, typename Tape<S>::Val x_self,
                                               DAParams<S>& p) {
    if (!p.dynamic_weights)
        throw std::logic_error("generate_dynamic_weights: DA module is static-only");
    auto normed = t.rmsnorm_noscale(x_self);
    auto hidden = t.gelu(t.matmul(normed, t.param(p.w1)));
    auto raw = t.matmul(hidden, t.param(p.w2));
    // (C, n) flattens way-major, so way c owns columns [c*n, (c+1)*n)
    auto prior = t.reshape(t.param(p.a), {p.K()});
    return t.add_rowvec(raw, prior);
}

template <typename S>
typename Tape<S>::Val da_dynamic(Tape<S>& t, std::span<const typename Tape<S>::Val> history,
                                 typename Tape<S>::Val weights) {
    return t.weighted_sum_rows(history, weights);
}

namespace {

// Rank-1 view of row c of the (C, n) static prior: flatten then column-slice.
template <typename S>
typename Tape<S>::Val static_way_weights(Tape<S>& t, typename Tape<S>::Val a_flat, int64_t c,
                                         int64_t n) {
    return t.slice_cols(a_flat, c * n, n);
}

}  // namespace

template <typename S>
StreamVals<S> da_multiway(Tape<S>& t, std::span<const typename Tape<S>::Val> history,
                          DAParams<S>& p, typename Tape<S>::Val* dw_out) {
    const int64_t n = p.n();
    if (static_cast<int64_t>(history.size()) != n)
        throw std::invalid_argument("da_multiway: history length " +
                                    std::to_string(history.size()) + " != expected " +
                                    std::to_string(n));
    if (p.C != 4) throw std::invalid_argument("da_multiway: module has C != 4");
    typename Tape<S>::Val w[4];
    if (p.dynamic_weights) {
        auto dw = generate_dynamic_weights(t, history.back(), p);
        if (dw_out) *dw_out = dw;
        for (int64_t c = 0; c < 4; ++c) w[c] = t.slice_cols(dw, c * n, n);
    } else {
        auto a_flat = t.reshape(t.param(p.a), {4 * n});
        for (int64_t c = 0; c < 4; ++c) w[c] = static_way_weights(t, a_flat, c, n);
    }
    StreamVals<S> s;
    s.q = t.weighted_sum_rows(history, w[0]);
    s.k = t.weighted_sum_rows(history, w[1]);
    s.v = t.weighted_sum_rows(history, w[2]);
    s.r = t.weighted_sum_rows(history, w[3]);
    return s;
}

template <typename S>
StreamVals<S> prepost_danorm(Tape<S>& t, std::span<const typename Tape<S>::Val> history,
                             DAParams<S>& p, typename Tape<S>::Val* dw_out) {
    const int64_t n = p.n();
    if (static_cast<int64_t>(history.size()) != n)
        throw std::invalid_argument("prepost_danorm: history length mismatch");
    if (!p.prepost || static_cast<int64_t>(p.pre_scales.size()) != n ||
        p.post_scale.value.size() != p.D)
        throw std::invalid_argument("prepost_danorm: pre/post norm scales missing");
    auto x_self = history.back();
    std::vector<typename Tape<S>::Val> normed(static_cast<size_t>(n));
    for (int64_t j = 0; j < n; ++j)
        normed[static_cast<size_t>(j)] =
            t.rmsnorm(history[static_cast<size_t>(j)], t.param(p.pre_scales[static_cast<size_t>(j)]));
    auto post = t.param(p.post_scale);

    typename Tape<S>::Val w[4];
    if (p.dynamic_weights) {
        auto dw = generate_dynamic_weights(t, x_self, p);
        if (dw_out) *dw_out = dw;
        for (int64_t c = 0; c < p.C; ++c) w[c] = t.slice_cols(dw, c * n, n);
    } else {
        auto a_flat = t.reshape(t.param(p.a), {p.C * n});
        for (int64_t c = 0; c < p.C; ++c) w[c] = static_way_weights(t, a_flat, c, n);
    }
    auto agg = [&](int64_t c) {
        auto sum = t.weighted_sum_rows(std::span<const typename Tape<S>::Val>(normed), w[c]);
        return t.add(t.rmsnorm(sum, post), x_self);
    };
    StreamVals<S> s;
    if (p.C == 4) {
        s.q = agg(0);
        s.k = agg(1);
        s.v = agg(2);
        s.r = agg(3);
    } else {
        s.q = s.k = s.v = s.r = agg(0);
    }
    return s;
}

namespace {

// Nearest integer to p/q (q > 0) with ties to even.
int64_t round_half_even(int64_t p, int64_t q) {
    const int64_t m = p / q;
    const int64_t r = p % q;
    if (2 * r < q) return m;
    if (2 * r > q) return m + 1;
    return (m % 2 == 0) ? m : m + 1;
}

}  // namespace

std::vector<int64_t> realloc_ffn_dims(int64_t L, int64_t Df) {
    if (L < 1 || Df < 1) throw std::invalid_argument("realloc_ffn_dims: L, Df must be >= 1");
    if (L == 1) return {Df};
    std::vector<int64_t> dims(static_cast<size_t>(L));
    int64_t sum = 0;
    for (int64_t i = 1; i <= L; ++i) {
        // exact ramp: (0.5(L-i) + 1.5(i-1)) / (L-1) * Df == (L + 2i - 3)*Df / (2(L-1))
        const int64_t units = round_half_even((L + 2 * i - 3) * Df, 16 * (L - 1));
        dims[static_cast<size_t>(i - 1)] = 8 * units;
        sum += 8 * units;
    }
    // fold any rounding residue into the middle layer to keep the total exact
    dims[static_cast<size_t>((L + 1) / 2 - 1)] += L * Df - sum;
    return dims;
}

#define MUDD_INSTANTIATE_DA(S)                                                                  \
    template DAParams<S> init_da_params<S>(uint64_t, const std::string&, int64_t, int64_t,      \
                                           int64_t, bool, DAInitMode, std::vector<int64_t>);    \
    template Tape<S>::Val da_static<S>(Tape<S>&, std::span<const Tape<S>::Val>, Tape<S>::Val);  \
    template Tape<S>::Val generate_dynamic_weights<S>(Tape<S>&, Tape<S>::Val, DAParams<S>&);    \
    template Tape<S>::Val da_dynamic<S>(Tape<S>&, std::span<const Tape<S>::Val>, Tape<S>::Val); \
    template StreamVals<S> da_multiway<S>(Tape<S>&, std::span<const Tape<S>::Val>, DAParams<S>&, \
                                          Tape<S>::Val*);                                       \
    template StreamVals<S> prepost_danorm<S>(Tape<S>&, std::span<const Tape<S>::Val>,           \
                                             DAParams<S>&, Tape<S>::Val*);

MUDD_INSTANTIATE_DA(float)
MUDD_INSTANTIATE_DA(double)

}  // namespace mudd
