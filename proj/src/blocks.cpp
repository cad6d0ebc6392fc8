#include "mudd/blocks.hpp"

#include <cmath>

namespace mudd {

int64_t default_ffn_dim(int64_t D) {
    const double exact = 8.0 * double(D) / 3.0;
    int64_t m = static_cast<int64_t>(std::llround(exact / 8.0));
    if (m < 1) m = 1;
    return 8 * m;
}

template <typename S>
Array<S> normal_init(uint64_t seed, std::string_view tag, std::vector<int64_t> shape,
                     double stddev) {
    Array<S> a(std::move(shape));
    RngState rng = RngState(seed).stream(tag);
    for (int64_t i = 0; i < a.size(); ++i)
        a.data[i] = static_cast<S>(stddev * rng.next_normal());
    return a;
}

template <typename S>
Array<S> xavier_init(uint64_t seed, std::string_view tag, std::vector<int64_t> shape) {
    if (shape.size() != 2) throw shape_error("xavier_init", shape_str(shape) + " is not rank-2");
    const double stddev = std::sqrt(2.0 / double(shape[0] + shape[1]));
    return normal_init<S>(seed, tag, std::move(shape), stddev);
}

template <typename S>
BlockParams<S> init_block_params(uint64_t seed, const std::string& prefix, int64_t D, int64_t H,
                                 int64_t Dff) {
    if (D <= 0 || H <= 0 || D % H != 0)
        throw std::invalid_argument("init_block_params: H must divide D (D=" + std::to_string(D) +
                                    ", H=" + std::to_string(H) + ")");
    if (D / H % 2 != 0)
        throw std::invalid_argument("init_block_params: head dim must be even for rotary, got " +
                                    std::to_string(D / H));
    BlockParams<S> p;
    p.D = D;
    p.H = H;
    p.Dff = Dff;
    auto mat = [&](const char* leaf, std::vector<int64_t> shape) {
        const std::string name = prefix + "." + leaf;
        return Parameter<S>(name, xavier_init<S>(seed, name, std::move(shape)), "xavier_normal",
                            true);
    };
    p.wq = mat("wq", {D, D});
    p.wk = mat("wk", {D, D});
    p.wv = mat("wv", {D, D});
    p.wo = mat("wo", {D, D});
    p.w_gate = mat("w_gate", {D, Dff});
    p.w_up = mat("w_up", {D, Dff});
    p.w_down = mat("w_down", {Dff, D});
    p.attn_norm = Parameter<S>(prefix + ".attn_norm", Array<S>({D}, S(1)), "ones", false);
    p.ffn_norm = Parameter<S>(prefix + ".ffn_norm", Array<S>({D}, S(1)), "ones", false);
    return p;
}

template <typename S>
typename Tape<S>::Val mha(Tape<S>& t, typename Tape<S>::Val xq, typename Tape<S>::Val xk,
                          typename Tape<S>::Val xv, BlockParams<S>& p, int64_t pos_offset,
                          typename Tape<S>::Val* attn_probs) {
    const int64_t d = p.head_dim();
    auto q = t.split_heads(t.matmul(xq, t.param(p.wq)), p.H);
    auto k = t.split_heads(t.matmul(xk, t.param(p.wk)), p.H);
    auto v = t.split_heads(t.matmul(xv, t.param(p.wv)), p.H);
    auto qr = t.rotary(q, pos_offset, kRopeBase);
    auto kr = t.rotary(k, pos_offset, kRopeBase);
    auto scores = t.attn_scores(qr, kr, static_cast<S>(1.0 / std::sqrt(double(d))));
    auto probs = t.causal_softmax(scores, 0);
    if (attn_probs) *attn_probs = probs;
    auto ctx = t.merge_heads(t.attn_apply(probs, v));
    return t.matmul(ctx, t.param(p.wo));
}

template <typename S>
typename Tape<S>::Val ffn_swiglu(Tape<S>& t, typename Tape<S>::Val x, BlockParams<S>& p) {
    auto gated = t.silu(t.matmul(x, t.param(p.w_gate)));
    auto up = t.matmul(x, t.param(p.w_up));
    return t.matmul(t.mul(gated, up), t.param(p.w_down));
}

template <typename S>
typename Tape<S>::Val multi_input_block_forward(Tape<S>& t, typename Tape<S>::Val xq,
                                                typename Tape<S>::Val xk, typename Tape<S>::Val xv,
                                                typename Tape<S>::Val xr, BlockParams<S>& p,
                                                typename Tape<S>::Val* attn_probs) {
    auto an = t.param(p.attn_norm);
    auto nq = t.rmsnorm(xq, an);
    auto nk = t.rmsnorm(xk, an);
    auto nv = t.rmsnorm(xv, an);
    auto xa = t.add(mha(t, nq, nk, nv, p, 0, attn_probs), xr);
    auto ffn = ffn_swiglu(t, t.rmsnorm(xa, t.param(p.ffn_norm)), p);
    return t.add(ffn, xa);
}

template <typename S>
typename Tape<S>::Val block_forward(Tape<S>& t, typename Tape<S>::Val x, BlockParams<S>& p,
                                    typename Tape<S>::Val* attn_probs) {
    return multi_input_block_forward(t, x, x, x, x, p, attn_probs);
}

#define MUDD_INSTANTIATE_BLOCKS(S)                                                             \
    template Array<S> normal_init<S>(uint64_t, std::string_view, std::vector<int64_t>, double); \
    template Array<S> xavier_init<S>(uint64_t, std::string_view, std::vector<int64_t>);         \
    template BlockParams<S> init_block_params<S>(uint64_t, const std::string&, int64_t, int64_t, \
                                                 int64_t);                                      \
    template Tape<S>::Val mha<S>(Tape<S>&, Tape<S>::Val, Tape<S>::Val, Tape<S>::Val,            \
                                 BlockParams<S>&, int64_t, Tape<S>::Val*);                      \
    template Tape<S>::Val ffn_swiglu<S>(Tape<S>&, Tape<S>::Val, BlockParams<S>&);               \
    template Tape<S>::Val multi_input_block_forward<S>(Tape<S>&, Tape<S>::Val, Tape<S>::Val,    \
                                                       Tape<S>::Val, Tape<S>::Val,              \
                                                       BlockParams<S>&, Tape<S>::Val*);         \
    template Tape<S>::Val block_forward<S>(Tape<S>&, Tape<S>::Val, BlockParams<S>&, Tape<S>::Val*);

MUDD_INSTANTIATE_BLOCKS(float)
MUDD_INSTANTIATE_BLOCKS(double)

}  // namespace mudd
