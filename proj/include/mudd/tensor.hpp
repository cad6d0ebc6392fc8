#pragma once

#include <atomic>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mudd {

int64_t numel(std::span<const int64_t> shape);
std::string shape_str(std::span<const int64_t> shape);
std::invalid_argument shape_error(const std::string& op, const std::string& detail);
std::invalid_argument shape_error(const std::string& op, std::span<const int64_t> a,
                                  std::span<const int64_t> b);

// Dense row-major N-d array. Plain value type; the autograd layer wraps it.
template <typename S>
struct Array {
    std::vector<int64_t> shape;
    std::vector<S> data;

    Array() = default;
    explicit Array(std::vector<int64_t> shape_)
        : shape(std::move(shape_)), data(static_cast<size_t>(numel(shape)), S(0)) {}
    Array(std::vector<int64_t> shape_, S fill)
        : shape(std::move(shape_)), data(static_cast<size_t>(numel(shape)), fill) {}
    Array(std::vector<int64_t> shape_, std::vector<S> data_)
        : shape(std::move(shape_)), data(std::move(data_)) {}

    int64_t size() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }
    // Extent of the last axis.
    int64_t last_dim() const { return shape.empty() ? 1 : shape.back(); }
    // Product of all axes except the last.
    int64_t rows() const { return shape.empty() ? 1 : size() / last_dim(); }

    S* ptr() { return data.data(); }
    const S* ptr() const { return data.data(); }
    S& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    const S& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

    bool same_shape(const Array& o) const { return shape == o.shape; }
    bool all_finite() const;

    template <typename T>
    Array<T> cast() const {
        Array<T> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<T>(data[i]);
        return out;
    }
};

// Matmul FLOP instrumentation (2*m*n*k per product, 2*rows*n per weighted sum).
// Disabled by default; `FlopScope` enables counting for its lifetime.
namespace flops {
extern std::atomic<int64_t> g_count;
extern std::atomic<bool> g_enabled;
inline void add(int64_t n) {
    if (g_enabled.load(std::memory_order_relaxed))
        g_count.fetch_add(n, std::memory_order_relaxed);
}
}  // namespace flops

struct FlopScope {
    FlopScope() {
        flops::g_count.store(0);
        flops::g_enabled.store(true);
    }
    ~FlopScope() { flops::g_enabled.store(false); }
    int64_t count() const { return flops::g_count.load(); }
};

// Raw kernels shared by the autograd ops and the cache-based decode path.
// Every accumulation runs in ascending-k order per output element, so results
// are deterministic and independent of partitioning.
namespace kern {

// c(M,N) = a(M,K) @ b(K,N); accumulate adds into c instead of overwriting.
template <typename S>
void matmul_nn(const S* a, const S* b, S* c, int64_t M, int64_t K, int64_t N,
               bool accumulate = false);
// c(M,N) = a(K,M)^T @ b(K,N)
template <typename S>
void matmul_tn(const S* a, const S* b, S* c, int64_t M, int64_t K, int64_t N,
               bool accumulate = false);

template <typename S>
void transpose(const S* a, S* out, int64_t M, int64_t N);

template <typename S>
S gelu_scalar(S x);
template <typename S>
S gelu_grad_scalar(S x);
template <typename S>
S silu_scalar(S x);
template <typename S>
S silu_grad_scalar(S x);

// In-place softmax of one row of length n over its first `valid` entries;
// entries beyond `valid` are set to zero.
template <typename S>
void softmax_row(S* row, int64_t n, int64_t valid);

// y = x / rms(x) * scale for one vector; scale == nullptr means unit scale.
template <typename S>
void rmsnorm_vec(const S* x, const S* scale, S* y, int64_t D, S eps);

// Rotary rotation of one head vector (length d, d even) at position `pos`.
template <typename S>
void rotary_vec(const S* x, S* y, int64_t d, int64_t pos, double base);

}  // namespace kern

}  // namespace mudd
