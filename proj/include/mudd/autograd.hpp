#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mudd/tensor.hpp"

namespace mudd {

// Trainable tensor with a gradient accumulator of the same shape.
template <typename S>
struct Parameter {
    std::string name;
    Array<S> value;
    Array<S> grad;
    std::string init_spec;
    bool decay = true;  // participates in weight decay

    Parameter() = default;
    Parameter(std::string name_, Array<S> value_, std::string init_spec_, bool decay_ = true)
        : name(std::move(name_)),
          value(std::move(value_)),
          grad(value.shape),
          init_spec(std::move(init_spec_)),
          decay(decay_) {}

    void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), S(0)); }
};

// Define-by-run reverse-mode tape. Ops append nodes in topological order;
// backward() walks them in reverse. One tape records one forward pass.
template <typename S>
class Tape {
  public:
    struct Val {
        int32_t id = -1;
        bool valid() const { return id >= 0; }
    };

    static constexpr S kNormEps = static_cast<S>(1e-6);

    // Leaves.
    Val input(Array<S> v);
    Val param(Parameter<S>& p);

    // Elementwise and broadcast arithmetic.
    Val add(Val a, Val b);
    Val mul(Val a, Val b);
    Val scale(Val a, S s);
    Val add_rowvec(Val x, Val v);  // x: (..,K), v: (K)
    Val mul_rowvec(Val x, Val v);

    // a: (..,M,K) @ b: (K,N); leading axes of a fold into rows.
    Val matmul(Val a, Val b);
    Val transpose(Val a);  // 2-d only

    Val gelu(Val a);
    Val silu(Val a);
    Val rmsnorm(Val x, Val scale);     // x: (..,D), scale: (D)
    Val rmsnorm_noscale(Val x);
    Val layernorm(Val x, Val scale, Val bias);
    Val softmax_rows(Val x);

    // Row t of each (Tq,Tk) tail matrix attends columns j <= t + offset.
    Val causal_softmax(Val x, int64_t offset = 0);

    Val embedding(std::span<const int32_t> tokens, Val table, int64_t B, int64_t T);
    Val split_heads(Val x, int64_t H);  // (B,T,D) -> (B,H,T,D/H)
    Val merge_heads(Val x);             // (B,H,T,d) -> (B,T,H*d)
    Val rotary(Val x, int64_t pos_offset, double base);
    Val attn_scores(Val q, Val k, S scale);  // (B,H,T,d) x (B,H,Tk,d) -> (B,H,T,Tk)
    Val attn_apply(Val p, Val v);            // (B,H,T,Tk) x (B,H,Tk,d) -> (B,H,T,d)

    Val slice_cols(Val x, int64_t start, int64_t len);  // on last axis
    Val reshape(Val x, std::vector<int64_t> shape);     // same element count

    // sum_j w[..,j] * hist[j][..,:]; w may be rank-1 (shared across rows).
    Val weighted_sum_rows(std::span<const Val> hist, Val w);

    Val sum_all(Val a);
    Val mean_all(Val a);

    // Mean next-token cross-entropy over all B*T rows.
    Val cross_entropy(Val logits, std::span<const int32_t> targets);

    // Populates node gradients and flushes into bound Parameter::grad.
    void backward(Val loss);

    const Array<S>& val(Val v) const { return node(v.id).value; }
    // Gradient of a node after backward(); empty if the node was unreachable.
    const Array<S>& grad_of(Val v) const { return node(v.id).grad; }

    size_t num_nodes() const { return nodes_.size(); }

  private:
    struct Node {
        Array<S> value;
        Array<S> grad;
        bool needs_grad = false;
        Parameter<S>* sink = nullptr;
        std::function<void(Tape&, int32_t)> back;
    };

    std::vector<Node> nodes_;
    bool backward_done_ = false;

    Node& node(int32_t id) { return nodes_[static_cast<size_t>(id)]; }
    const Node& node(int32_t id) const { return nodes_[static_cast<size_t>(id)]; }
    Val push(Array<S> value, bool needs_grad, std::function<void(Tape&, int32_t)> back);
    // Gradient accumulator of a node, allocated (zeroed) on first use.
    Array<S>& grad_buf(int32_t id);
    void check(Val v, const char* op) const;
};

using Tape32 = Tape<float>;
using Tape64 = Tape<double>;

}  // namespace mudd
