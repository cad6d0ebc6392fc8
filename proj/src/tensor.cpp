#include "mudd/tensor.hpp"

#include <cmath>
#include <cstring>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace mudd {

int64_t numel(std::span<const int64_t> shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
        if (d < 0) throw std::invalid_argument("negative extent in shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

std::string shape_str(std::span<const int64_t> shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

std::invalid_argument shape_error(const std::string& op, const std::string& detail) {
    return std::invalid_argument(op + ": " + detail);
}

std::invalid_argument shape_error(const std::string& op, std::span<const int64_t> a,
                                  std::span<const int64_t> b) {
    return shape_error(op, "incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

template <typename S>
bool Array<S>::all_finite() const {
    for (S v : data)
        if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
}

template struct Array<float>;
template struct Array<double>;

namespace flops {
std::atomic<int64_t> g_count{0};
std::atomic<bool> g_enabled{false};
}  // namespace flops

namespace kern {

template <typename S>
void matmul_nn(const S* a, const S* b, S* c, int64_t M, int64_t K, int64_t N, bool accumulate) {
    flops::add(2 * M * K * N);
    for (int64_t i = 0; i < M; ++i) {
        S* ci = c + i * N;
        if (!accumulate)
            for (int64_t j = 0; j < N; ++j) ci[j] = S(0);
        const S* ai = a + i * K;
        for (int64_t k = 0; k < K; ++k) {
            const S aik = ai[k];
            const S* bk = b + k * N;
            for (int64_t j = 0; j < N; ++j) ci[j] += aik * bk[j];
        }
    }
}

template <typename S>
void matmul_tn(const S* a, const S* b, S* c, int64_t M, int64_t K, int64_t N, bool accumulate) {
    flops::add(2 * M * K * N);
    if (!accumulate)
        for (int64_t i = 0; i < M * N; ++i) c[i] = S(0);
    for (int64_t k = 0; k < K; ++k) {
        const S* ak = a + k * M;
        const S* bk = b + k * N;
        for (int64_t i = 0; i < M; ++i) {
            const S aki = ak[i];
            S* ci = c + i * N;
            for (int64_t j = 0; j < N; ++j) ci[j] += aki * bk[j];
        }
    }
}

template <typename S>
void transpose(const S* a, S* out, int64_t M, int64_t N) {
    for (int64_t i = 0; i < M; ++i)
        for (int64_t j = 0; j < N; ++j) out[j * M + i] = a[i * N + j];
}

template <typename S>
S gelu_scalar(S x) {
    const S c = static_cast<S>(std::sqrt(2.0 / std::numbers::pi));
    const S alpha = static_cast<S>(0.044715);
    return S(0.5) * x * (S(1) + std::tanh(c * (x + alpha * x * x * x)));
}

template <typename S>
S gelu_grad_scalar(S x) {
    const S c = static_cast<S>(std::sqrt(2.0 / std::numbers::pi));
    const S alpha = static_cast<S>(0.044715);
    const S t = std::tanh(c * (x + alpha * x * x * x));
    return S(0.5) * (S(1) + t) + S(0.5) * x * (S(1) - t * t) * c * (S(1) + S(3) * alpha * x * x);
}

template <typename S>
S silu_scalar(S x) {
    const S s = S(1) / (S(1) + std::exp(-x));
    return x * s;
}

template <typename S>
S silu_grad_scalar(S x) {
    const S s = S(1) / (S(1) + std::exp(-x));
    return s * (S(1) + x * (S(1) - s));
}

template <typename S>
void softmax_row(S* row, int64_t n, int64_t valid) {
    S mx = row[0];
    for (int64_t j = 1; j < valid; ++j) mx = row[j] > mx ? row[j] : mx;
    S sum = S(0);
    for (int64_t j = 0; j < valid; ++j) {
        row[j] = std::exp(row[j] - mx);
        sum += row[j];
    }
    const S inv = S(1) / sum;
    for (int64_t j = 0; j < valid; ++j) row[j] *= inv;
    for (int64_t j = valid; j < n; ++j) row[j] = S(0);
}

template <typename S>
void rmsnorm_vec(const S* x, const S* scale, S* y, int64_t D, S eps) {
    double ss = 0.0;
    for (int64_t j = 0; j < D; ++j) ss += double(x[j]) * double(x[j]);
    const S inv = static_cast<S>(1.0 / std::sqrt(ss / double(D) + double(eps)));
    if (scale)
        for (int64_t j = 0; j < D; ++j) y[j] = x[j] * inv * scale[j];
    else
        for (int64_t j = 0; j < D; ++j) y[j] = x[j] * inv;
}

template <typename S>
void rotary_vec(const S* x, S* y, int64_t d, int64_t pos, double base) {
    for (int64_t m = 0; m < d / 2; ++m) {
        const double theta = std::pow(base, -2.0 * static_cast<double>(m) / static_cast<double>(d));
        const S c = static_cast<S>(std::cos(static_cast<double>(pos) * theta));
        const S s = static_cast<S>(std::sin(static_cast<double>(pos) * theta));
        const S x0 = x[2 * m], x1 = x[2 * m + 1];
        y[2 * m] = x0 * c - x1 * s;
        y[2 * m + 1] = x0 * s + x1 * c;
    }
}

#define MUDD_INSTANTIATE_KERN(S)                                                              \
    template void matmul_nn<S>(const S*, const S*, S*, int64_t, int64_t, int64_t, bool);      \
    template void matmul_tn<S>(const S*, const S*, S*, int64_t, int64_t, int64_t, bool);      \
    template void transpose<S>(const S*, S*, int64_t, int64_t);                               \
    template S gelu_scalar<S>(S);                                                             \
    template S gelu_grad_scalar<S>(S);                                                        \
    template S silu_scalar<S>(S);                                                             \
    template S silu_grad_scalar<S>(S);                                                        \
    template void softmax_row<S>(S*, int64_t, int64_t);                                       \
    template void rmsnorm_vec<S>(const S*, const S*, S*, int64_t, S);                         \
    template void rotary_vec<S>(const S*, S*, int64_t, int64_t, double);

MUDD_INSTANTIATE_KERN(float)
MUDD_INSTANTIATE_KERN(double)
#undef MUDD_INSTANTIATE_KERN

}  // namespace kern

}  // namespace mudd
