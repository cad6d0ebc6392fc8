#pragma once

#include <string>
#include <vector>

#include "mudd/blocks.hpp"

namespace mudd {

// Which block outputs each layer's aggregate sees, and where DA modules sit.
struct ConnectionSchedule {
    enum class Mode { dense, dilated, sliding_window };
    Mode mode = Mode::dense;
    int64_t k = 1;  // dilated: aggregate every k-th block output
    int64_t p = 1;  // dilated: DA module after every p-th block
    int64_t n = 1;  // sliding_window: previous n blocks plus the embedding

    static ConnectionSchedule make_dense();
    static ConnectionSchedule make_dilated(int64_t k, int64_t p);
    static ConnectionSchedule make_sliding(int64_t n);
    // "dense" | "dilated(k,p)" | "sw(n)"
    static ConnectionSchedule parse(const std::string& text);
    std::string name() const;

    // Layer indices are 1-based; a DA module after layer i aggregates history
    // indices set_for(i) ⊆ {0..i} (0 is the embedding output).
    bool has_da(int64_t i) const;
    std::vector<int64_t> set_for(int64_t i) const;

    bool operator==(const ConnectionSchedule&) const = default;
};

enum class DAInitMode { standard, prepost };

// Depth-wise Aggregate module parameters for one layer.
template <typename S>
struct DAParams {
    int64_t layer_index = 0;  // i >= 1
    int64_t C = 1;            // ways: 1 (single stream) or 4 (Q,K,V,R)
    int64_t D = 0;
    std::vector<int64_t> sources;  // ascending history indices, last == layer_index
    bool dynamic_weights = true;   // false: static aggregation from `a` alone
    bool prepost = false;

    Parameter<S> w1;  // (D, K), dynamic only
    Parameter<S> w2;  // (K, K), dynamic only
    Parameter<S> a;   // (C, n): static prior / init one-hot
    std::vector<Parameter<S>> pre_scales;  // prepost: one (D) scale per history entry
    Parameter<S> post_scale;               // prepost: (D)

    int64_t n() const { return static_cast<int64_t>(sources.size()); }
    int64_t K() const { return C * n(); }
};

// Standard init: W1 ~ N(0, 1/D), W2 = 0, a one-hot at the self entry, which
// makes every aggregate return X_i exactly. Prepost init: a = 0, pre-scales 1,
// post-scale 1e-3.
template <typename S>
DAParams<S> init_da_params(uint64_t seed, const std::string& prefix, int64_t D,
                           int64_t layer_index, int64_t C, bool dynamic_weights, DAInitMode mode,
                           std::vector<int64_t> sources);

template <typename S>
struct StreamVals {
    typename Tape<S>::Val q, k, v, r;
};

// out = sum_j a[j] * history[j]; a is rank-1 of length |history|.
template <typename S>
typename Tape<S>::Val da_static(Tape<S>& t, std::span<const typename Tape<S>::Val> history,
                                typename Tape<S>::Val a);

// dw = GELU(RMSNorm(x_self) @ W1) @ W2 + a, flattened way-major: way c owns
// columns [c*n, (c+1)*n). Shape (B, T, K).
template <typename S>
typename Tape<S>::Val generate_dynamic_weights(Tape<S>& t, typename Tape<S>::Val x_self,
                                               DAParams<S>& p);

// Per-position aggregation: out[t] = sum_j weights[t, j] * history[j][t].
template <typename S>
typename Tape<S>::Val da_dynamic(Tape<S>& t, std::span<const typename Tape<S>::Val> history,
                                 typename Tape<S>::Val weights);

// Fused four-way DA (way order Q, K, V, R). history must already be the
// restricted, ascending source list whose last entry is X_i.
// dw_out, if given, receives the generated weight tensor for tracing.
template <typename S>
StreamVals<S> da_multiway(Tape<S>& t, std::span<const typename Tape<S>::Val> history,
                          DAParams<S>& p, typename Tape<S>::Val* dw_out = nullptr);

// Pre/post-normalized variant: pre-norm every history entry, aggregate,
// post-norm, then add the raw X_i residual, per way.
template <typename S>
StreamVals<S> prepost_danorm(Tape<S>& t, std::span<const typename Tape<S>::Val> history,
                             DAParams<S>& p, typename Tape<S>::Val* dw_out = nullptr);

// FFN hidden dims ramping 0.5*Df .. 1.5*Df across depth at constant total,
// rounded to multiples of 8 (ties to even) with any residue folded into the
// middle layer.
std::vector<int64_t> realloc_ffn_dims(int64_t L, int64_t Df);

}  // namespace mudd
