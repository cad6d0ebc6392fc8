#pragma once

#include <string>

#include "mudd/autograd.hpp"
#include "mudd/rng.hpp"

namespace mudd {

constexpr double kRopeBase = 10000.0;

// Default SwiGLU hidden dim: 8D/3 rounded to the nearest multiple of 8, which
// matches the parameter count of a two-matrix FFN of width 4D.
int64_t default_ffn_dim(int64_t D);

// Named-stream initializers: the draw for a given (seed, tag) never depends
// on what else was initialized, so models sharing a tag share the values.
template <typename S>
Array<S> normal_init(uint64_t seed, std::string_view tag, std::vector<int64_t> shape, double stddev);
template <typename S>
Array<S> xavier_init(uint64_t seed, std::string_view tag, std::vector<int64_t> shape);

// One Pre-LN block: attention projections, SwiGLU FFN, two norm scales.
template <typename S>
struct BlockParams {
    int64_t D = 0, H = 0, Dff = 0;
    Parameter<S> wq, wk, wv, wo;        // (D, D)
    Parameter<S> w_gate, w_up;          // (D, Dff)
    Parameter<S> w_down;                // (Dff, D)
    Parameter<S> attn_norm, ffn_norm;   // (D), no decay

    int64_t head_dim() const { return D / H; }
};

template <typename S>
BlockParams<S> init_block_params(uint64_t seed, const std::string& prefix, int64_t D, int64_t H,
                                 int64_t Dff);

// Multi-head causal attention with rotary q/k. Streams must already be
// normalized by the caller (the block op owns the Pre-LN sites).
// If attn_probs is non-null it receives the post-softmax weights (B,H,T,T).
template <typename S>
typename Tape<S>::Val mha(Tape<S>& t, typename Tape<S>::Val xq, typename Tape<S>::Val xk,
                          typename Tape<S>::Val xv, BlockParams<S>& p, int64_t pos_offset = 0,
                          typename Tape<S>::Val* attn_probs = nullptr);

template <typename S>
typename Tape<S>::Val ffn_swiglu(Tape<S>& t, typename Tape<S>::Val x, BlockParams<S>& p);

// X'_A = MHA(LN(Xq), LN(Xk), LN(Xv)) + Xr ; out = FFN(LN(X'_A)) + X'_A
template <typename S>
typename Tape<S>::Val multi_input_block_forward(Tape<S>& t, typename Tape<S>::Val xq,
                                                typename Tape<S>::Val xk, typename Tape<S>::Val xv,
                                                typename Tape<S>::Val xr, BlockParams<S>& p,
                                                typename Tape<S>::Val* attn_probs = nullptr);

// The single-stream block is, by definition, the decoupled block fed the same
// value four times, so the two agree bitwise.
template <typename S>
typename Tape<S>::Val block_forward(Tape<S>& t, typename Tape<S>::Val x, BlockParams<S>& p,
                                    typename Tape<S>::Val* attn_probs = nullptr);

}  // namespace mudd
