#include "mudd/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

namespace mudd {

namespace {

int64_t fold_rows(const std::vector<int64_t>& shape) {
    int64_t rows = 1;
    for (size_t i = 0; i + 1 < shape.size(); ++i) rows *= shape[i];
    return rows;
}

}  // namespace

template <typename S>
typename Tape<S>::Val Tape<S>::push(Array<S> value, bool needs_grad,
                                    std::function<void(Tape&, int32_t)> back) {
    if (backward_done_)
        throw std::logic_error("tape already consumed by backward(); build a new tape");
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Val{static_cast<int32_t>(nodes_.size() - 1)};
}

template <typename S>
Array<S>& Tape<S>::grad_buf(int32_t id) {
    Node& n = node(id);
    if (n.grad.data.empty() && n.grad.shape.empty()) n.grad = Array<S>(n.value.shape);
    return n.grad;
}

template <typename S>
void Tape<S>::check(Val v, const char* op) const {
    if (!v.valid() || static_cast<size_t>(v.id) >= nodes_.size())
        throw std::invalid_argument(std::string(op) + ": value handle does not belong to this tape");
}

template <typename S>
typename Tape<S>::Val Tape<S>::input(Array<S> v) {
    return push(std::move(v), false, nullptr);
}

template <typename S>
typename Tape<S>::Val Tape<S>::param(Parameter<S>& p) {
    if (p.grad.shape != p.value.shape) p.grad = Array<S>(p.value.shape);
    Parameter<S>* sink = &p;
    Val out = push(p.value, true, nullptr);
    node(out.id).sink = sink;
    return out;
}

template <typename S>
typename Tape<S>::Val Tape<S>::add(Val a, Val b) {
    check(a, "add");
    check(b, "add");
    const Array<S>& av = node(a.id).value;
    const Array<S>& bv = node(b.id).value;
    if (av.shape != bv.shape) throw shape_error("add", shape_str(av.shape) + " vs " + shape_str(bv.shape));
    Array<S> out(av.shape);
    for (int64_t i = 0; i < av.size(); ++i) out.data[i] = av.data[i] + bv.data[i];
    bool ng = node(a.id).needs_grad || node(b.id).needs_grad;
    return push(std::move(out), ng, [a, b](Tape& t, int32_t self) {
        const Array<S>& g = t.node(self).grad;
        if (t.node(a.id).needs_grad) {
            Array<S>& da = t.grad_buf(a.id);
            for (int64_t i = 0; i < g.size(); ++i) da.data[i] += g.data[i];
        }
        if (t.node(b.id).needs_grad) {
            Array<S>& db = t.grad_buf(b.id);
            for (int64_t i = 0; i < g.size(); ++i) db.data[i] += g.data[i];
        }
    });
}

template <typename S>
typename Tape<S>::Val Tape<S>::mul(Val a, Val b) {
    check(a, "mul");
    check(b, "mul");
    const Array<S>& av = node(a.id).value;
    const Array<S>& bv = node(b.id).value;
    if (av.shape != bv.shape) throw shape_error("mul", shape_str(av.shape) + " vs " + shape_str(bv.shape));
    Array<S> out(av.shape);
    for (int64_t i = 0; i < av.size(); ++i) out.data[i] = av.data[i] * bv.data[i];
    bool ng = node(a.id).needs_grad || node(b.id).needs_grad;
    return push(std::move(out), ng, [a, b](Tape& t, int32_t self) {
        const Array<S>& g = t.node(self).grad;
        const Array<S>& av = t.node(a.id).value;
        const Array<S>& bv = t.node(b.id).value;
        if (t.node(a.id).needs_grad) {
            Array<S>& da = t.grad_buf(a.id);
            for (int64_t i = 0; i < g.size(); ++i) da.data[i] += g.data[i] * bv.data[i];
        }
        if (t.node(b.id).needs_grad) {
            Array<S>& db = t.grad_buf(b.id);
            for (int64_t i = 0; i < g.size(); ++i) db.data[i] += g.data[i] * av.data[i];
        }
    });
}

template <typename S>
typename Tape<S>::Val Tape<S>::scale(Val a, S s) {
    check(a, "scale");
    const Array<S>& av = node(a.id).value;
    Array<S> out(av.shape);
    for (int64_t i = 0; i < av.size(); ++i) out.data[i] = av.data[i] * s;
    return push(std::move(out), node(a.id).needs_grad, [a, s](Tape& t, int32_t self) {
        if (!t.node(a.id).needs_grad) return;
        const Array<S>& g = t.node(self).grad;
        Array<S>& da = t.grad_buf(a.id);
        for (int64_t i = 0; i < g.size(); ++i) da.data[i] += g.data[i] * s;
    });
}

template <typename S>
typename Tape<S>::Val Tape<S>::add_rowvec(Val x, Val v) {
    check(x, "add_rowvec");
    check(v, "add_rowvec");
    const Array<S>& xv = node(x.id).value;
    const Array<S>& vv = node(v.id).value;
    if (vv.rank() != 1 || vv.size() != xv.last_dim())
        throw shape_error("add_rowvec", shape_str(xv.shape) + " + " + shape_str(vv.shape));
    const int64_t K = xv.last_dim();
    const int64_t rows = fold_rows(xv.shape);
    Array<S> out(xv.shape);
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < K; ++j) out.data[r * K + j] = xv.data[r * K + j] + vv.data[j];
    bool ng = node(x.id).needs_grad || node(v.id).needs_grad;
    return push(std::move(out), ng, [x, v, rows, K](Tape& t, int32_t self) {
        const Array<S>& g = t.node(self).grad;
        if (t.node(x.id).needs_grad) {
            Array<S>& dx = t.grad_buf(x.id);
            for (int64_t i = 0; i < g.size(); ++i) dx.data[i] += g.data[i];
        }
        if (t.node(v.id).needs_grad) {
            Array<S>& dv = t.grad_buf(v.id);
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < K; ++j) dv.data[j] += g.data[r * K + j];
        }
    });
}

template <typename S>
typename Tape<S>::Val Tape<S>::mul_rowvec(Val x, Val v) {
    check(x, "mul_rowvec");
    check(v, "mul_rowvec");
    const Array<S>& xv = node(x.id).value;
    const Array<S>& vv = node(v.id).value;
    if (vv.rank() != 1 || vv.size() != xv.last_dim())
        throw shape_error("mul_rowvec", shape_str(xv.shape) + " * " + shape_str(vv.shape));
    const int64_t K = xv.last_dim();
    const int64_t rows = fold_rows(xv.shape);
    Array<S> out(xv.shape);
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < K; ++j) out.data[r * K + j] = xv.data[r * K + j] * vv.data[j];
    bool ng = node(x.id).needs_grad || node(v.id).needs_grad;
    return push(std::move(out), ng, [x, v, rows, K](Tape& t, int32_t self) {
        const Array<S>& g = t.node(self).grad;
        const Array<S>& xv = t.node(x.id).value;
        const Array<S>& vv = t.node(v.id).value;
        if (t.node(x.id).needs_grad) {
            Array<S>& dx = t.grad_buf(x.id);
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < K; ++j) dx.data[r * K + j] += g.data[r * K + j] * vv.data[j];
        }
        if (t.node(v.id).needs_grad) {
            Array<S>& dv = t.grad_buf(v.id);
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < K; ++j) dv.data[j] += g.data[r * K + j] * xv.data[r * K + j];
        }
    });
}

template <typename S>
typename Tape<S>::Val Tape<S>::matmul(Val a, Val b) {
    check(a, "matmul");
    check(b, "matmul");
    const Array<S>& av = node(a.id).value;
    const Array<S>& bv = node(b.id).value;
    if (av.rank() < 2 || bv.rank() != 2 || av.last_dim() != bv.shape[0])
        throw shape_error("matmul", shape_str(av.shape) + " @ " + shape_str(bv.shape));
    const int64_t K = av.last_dim();
    const int64_t N = bv.shape[1];
    const int64_t M = fold_rows(av.shape);
    std::vector<int64_t> oshape(av.shape.begin(), av.shape.end() - 1);
    oshape.push_back(N);
    Array<S> out(oshape);
    kern::matmul_nn(av.ptr(), bv.ptr(), out.ptr(), M, K, N, false);
    bool ng = node(a.id).needs_grad || node(b.id).needs_grad;
    return push(std::move(out), ng, [a, b, M, K, N](Tape& t, int32_t self) {
        const Array<S>& g = t.node(self).grad;
        const Array<S>& av = t.node(a.id).value;
        const Array<S>& bv = t.node(b.id).value;
        if (t.node(a.id).needs_grad) {
            // dA = G @ B^T, via explicit transpose then NN for speed.
            Array<S> bt({N, K});
            kern::transpose(bv.ptr(), bt.ptr(), K, N);
            Array<S>& da = t.grad_buf(a.id);
            kern::matmul_nn(g.ptr(), bt.ptr(), da.ptr(), M, N, K, true);
        }
        if (t.node(b.id).needs_grad) {
            // dB = A^T @ G.
            Array<S>& db = t.grad_buf(b.id);
            kern::matmul_tn(av.ptr(), g.ptr(), db.ptr(), K, M, N, true);
        }
    });
}

template <typename S>
typename Tape<S>::Val Tape<S>::transpose(Val a) {
    check(a, "transpose");
    const Array<S>& av = node(a.id).value;
    if (av.rank() != 2) throw shape_error("transpose", shape_str(av.shape));
    const int64_t R = av.shape[0], C = av.shape[1];
    Array<S> out({C, R});
    kern::transpose(av.ptr(), out.ptr(), R, C);
    return push(std::move(out), node(a.id).needs_grad, [a, R, C](Tape& t, int32_t self) {
        if (!t.node(a.id).needs_grad) return;
        const Array<S>& g = t.node(self).grad;
        Array<S>& da = t.grad_buf(a.id);
        for (int64_t i = 0; i < R; ++i)
            for (int64_t j = 0; j < C; ++j) da.data[i * C + j] += g.data[j * R + i];
    });
}

template <typename S>
typename Tape<S>::Val Tape<S>::gelu(Val a) {
    check(a, "gelu");
    const Array<S>& av = node(a.id).value;
    Array<S> out(av.shape);
    for (int64_t i = 0; i < av.size(); ++i) out.data[i] = kern::gelu_scalar(av.data[i]);
    return push(std::move(out), node(a.id).needs_grad, [a](Tape& t, int32_t self) {
        if (!t.node(a.id).needs_grad) return;
        const Array<S>& g = t.node(self).grad;
        const Array<S>& av = t.node(a.id).value;
        Array<S>& da = t.grad_buf(a.id);
        for (int64_t i = 0; i < g.size(); ++i)
            da.data[i] += g.data[i] * kern::gelu_grad_scalar(av.data[i]);
    });
}

template <typename S>
typename Tape<S>::Val Tape<S>::silu(Val a) {
    check(a, "silu");
    const Array<S>& av = node(a.id).value;
    Array<S> out(av.shape);
    for (int64_t i = 0; i < av.size(); ++i) out.data[i] = kern::silu_scalar(av.data[i]);
    return push(std::move(out), node(a.id).needs_grad, [a](Tape& t, int32_t self) {
        if (!t.node(a.id).needs_grad) return;
        const Array<S>& g = t.node(self).grad;
        const Array<S>& av = t.node(a.id).value;
        Array<S>& da = t.grad_buf(a.id);
        for (int64_t i = 0; i < g.size(); ++i)
            da.data[i] += g.data[i] * kern::silu_grad_scalar(av.data[i]);
    });
}

template <typename S>
typename Tape<S>::Val Tape<S>::rmsnorm(Val x, Val sc) {
    check(x, "rmsnorm");
    check(sc, "rmsnorm");
    const Array<S>& xv = node(x.id).value;
    const Array<S>& sv = node(sc.id).value;
    const int64_t D = xv.last_dim();
    if (sv.rank() != 1 || sv.size() != D)
        throw shape_error("rmsnorm", shape_str(xv.shape) + " scale " + shape_str(sv.shape));
    const int64_t rows = fold_rows(xv.shape);
    Array<S> out(xv.shape);
    auto inv = std::make_shared<std::vector<S>>(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const S* xr = xv.ptr() + r * D;
        double ss = 0.0;
        for (int64_t j = 0; j < D; ++j) ss += double(xr[j]) * double(xr[j]);
        S iv = static_cast<S>(1.0 / std::sqrt(ss / double(D) + double(kNormEps)));
        (*inv)[static_cast<size_t>(r)] = iv;
        S* yr = out.ptr() + r * D;
        for (int64_t j = 0; j < D; ++j) yr[j] = xr[j] * iv * sv.data[j];
    }
    bool ng = node(x.id).needs_grad || node(sc.id).needs_grad;
    return push(std::move(out), ng, [x, sc, rows, D, inv](Tape& t, int32_t self) {
        const Array<S>& g = t.node(self).grad;
        const Array<S>& xv = t.node(x.id).value;
        const Array<S>& sv = t.node(sc.id).value;
        const bool need_x = t.node(x.id).needs_grad;
        const bool need_s = t.node(sc.id).needs_grad;
        Array<S>* dx = need_x ? &t.grad_buf(x.id) : nullptr;
        Array<S>* ds = need_s ? &t.grad_buf(sc.id) : nullptr;
        for (int64_t r = 0; r < rows; ++r) {
            const S iv = (*inv)[static_cast<size_t>(r)];
            const S* xr = xv.ptr() + r * D;
            const S* gr = g.ptr() + r * D;
            if (need_s) {
                for (int64_t j = 0; j < D; ++j) ds->data[j] += gr[j] * xr[j] * iv;
            }
            if (need_x) {
                double dot = 0.0;
                for (int64_t j = 0; j < D; ++j)
                    dot += double(gr[j]) * double(sv.data[j]) * double(xr[j]) * double(iv);
                const S m = static_cast<S>(dot / double(D));
                S* dxr = dx->ptr() + r * D;
                for (int64_t j = 0; j < D; ++j) {
                    const S u = gr[j] * sv.data[j];
                    dxr[j] += iv * (u - xr[j] * iv * m);
                }
            }
        }
    });
}

template <typename S>
typename Tape<S>::Val Tape<S>::rmsnorm_noscale(Val x) {
    check(x, "rmsnorm_noscale");
    const Array<S>& xv = node(x.id).value;
    const int64_t D = xv.last_dim();
    const int64_t rows = fold_rows(xv.shape);
    Array<S> out(xv.shape);
    auto inv = std::make_shared<std::vector<S>>(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const S* xr = xv.ptr() + r * D;
        double ss = 0.0;
        for (int64_t j = 0; j < D; ++j) ss += double(xr[j]) * double(xr[j]);
        S iv = static_cast<S>(1.0 / std::sqrt(ss / double(D) + double(kNormEps)));
        (*inv)[static_cast<size_t>(r)] = iv;
        S* yr = out.ptr() + r * D;
        for (int64_t j = 0; j < D; ++j) yr[j] = xr[j] * iv;
    }
    return push(std::move(out), node(x.id).needs_grad, [x, rows, D, inv](Tape& t, int32_t self) {
        if (!t.node(x.id).needs_grad) return;
        const Array<S>& g = t.node(self).grad;
        const Array<S>& xv = t.node(x.id).value;
        Array<S>& dx = t.grad_buf(x.id);
        for (int64_t r = 0; r < rows; ++r) {
            const S iv = (*inv)[static_cast<size_t>(r)];
            const S* xr = xv.ptr() + r * D;
            const S* gr = g.ptr() + r * D;
            double dot = 0.0;
            for (int64_t j = 0; j < D; ++j) dot += double(gr[j]) * double(xr[j]) * double(iv);
            const S m = static_cast<S>(dot / double(D));
            S* dxr = dx.ptr() + r * D;
            for (int64_t j = 0; j < D; ++j) dxr[j] += iv * (gr[j] - xr[j] * iv * m);
        }
    });
}

template <typename S>
typename Tape<S>::Val Tape<S>::layernorm(Val x, Val sc, Val bias) {
    check(x, "layernorm");
    check(sc, "layernorm");
    check(bias, "layernorm");
    const Array<S>& xv = node(x.id).value;
    const Array<S>& sv = node(sc.id).value;
    const Array<S>& bv = node(bias.id).value;
    const int64_t D = xv.last_dim();
    if (D < 2) throw shape_error("layernorm", "feature dim must be >= 2, got " + shape_str(xv.shape));
    if (sv.rank() != 1 || sv.size() != D || bv.rank() != 1 || bv.size() != D)
        throw shape_error("layernorm", shape_str(xv.shape) + " scale " + shape_str(sv.shape) +
                                           " bias " + shape_str(bv.shape));
    const int64_t rows = fold_rows(xv.shape);
    Array<S> out(xv.shape);
    auto mean = std::make_shared<std::vector<S>>(static_cast<size_t>(rows));
    auto inv = std::make_shared<std::vector<S>>(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const S* xr = xv.ptr() + r * D;
        double mu = 0.0;
        for (int64_t j = 0; j < D; ++j) mu += double(xr[j]);
        mu /= double(D);
        double var = 0.0;
        for (int64_t j = 0; j < D; ++j) {
            double d = double(xr[j]) - mu;
            var += d * d;
        }
        var /= double(D);
        S iv = static_cast<S>(1.0 / std::sqrt(var + double(kNormEps)));
        (*mean)[static_cast<size_t>(r)] = static_cast<S>(mu);
        (*inv)[static_cast<size_t>(r)] = iv;
        S* yr = out.ptr() + r * D;
        for (int64_t j = 0; j < D; ++j)
            yr[j] = (xr[j] - static_cast<S>(mu)) * iv * sv.data[j] + bv.data[j];
    }
    bool ng = node(x.id).needs_grad || node(sc.id).needs_grad || node(bias.id).needs_grad;
    return push(std::move(out), ng, [x, sc, bias, rows, D, mean, inv](Tape& t, int32_t self) {
        const Array<S>& g = t.node(self).grad;
        const Array<S>& xv = t.node(x.id).value;
        const Array<S>& sv = t.node(sc.id).value;
        const bool need_x = t.node(x.id).needs_grad;
        const bool need_s = t.node(sc.id).needs_grad;
        const bool need_b = t.node(bias.id).needs_grad;
        Array<S>* dx = need_x ? &t.grad_buf(x.id) : nullptr;
        Array<S>* ds = need_s ? &t.grad_buf(sc.id) : nullptr;
        Array<S>* db = need_b ? &t.grad_buf(bias.id) : nullptr;
        for (int64_t r = 0; r < rows; ++r) {
            const S mu = (*mean)[static_cast<size_t>(r)];
            const S iv = (*inv)[static_cast<size_t>(r)];
            const S* xr = xv.ptr() + r * D;
            const S* gr = g.ptr() + r * D;
            if (need_b)
                for (int64_t j = 0; j < D; ++j) db->data[j] += gr[j];
            if (need_s)
                for (int64_t j = 0; j < D; ++j) ds->data[j] += gr[j] * (xr[j] - mu) * iv;
            if (need_x) {
                double su = 0.0, sux = 0.0;
                for (int64_t j = 0; j < D; ++j) {
                    const double u = double(gr[j]) * double(sv.data[j]);
                    const double xh = (double(xr[j]) - double(mu)) * double(iv);
                    su += u;
                    sux += u * xh;
                }
                const double mu_u = su / double(D);
                const double mu_ux = sux / double(D);
                S* dxr = dx->ptr() + r * D;
                for (int64_t j = 0; j < D; ++j) {
                    const double u = double(gr[j]) * double(sv.data[j]);
                    const double xh = (double(xr[j]) - double(mu)) * double(iv);
                    dxr[j] += static_cast<S>(double(iv) * (u - mu_u - xh * mu_ux));
                }
            }
        }
    });
}

template <typename S>
typename Tape<S>::Val Tape<S>::softmax_rows(Val x) {
    check(x, "softmax_rows");
    const Array<S>& xv = node(x.id).value;
    const int64_t n = xv.last_dim();
    const int64_t rows = fold_rows(xv.shape);
    Array<S> out(xv.shape);
    std::copy(xv.data.begin(), xv.data.end(), out.data.begin());
    for (int64_t r = 0; r < rows; ++r) kern::softmax_row(out.ptr() + r * n, n, n);
    return push(std::move(out), node(x.id).needs_grad, [x, rows, n](Tape& t, int32_t self) {
        if (!t.node(x.id).needs_grad) return;
        const Array<S>& g = t.node(self).grad;
        const Array<S>& p = t.node(self).value;
        Array<S>& dx = t.grad_buf(x.id);
        for (int64_t r = 0; r < rows; ++r) {
            const S* pr = p.ptr() + r * n;
            const S* gr = g.ptr() + r * n;
            double s = 0.0;
            for (int64_t j = 0; j < n; ++j) s += double(gr[j]) * double(pr[j]);
            S* dr = dx.ptr() + r * n;
            for (int64_t j = 0; j < n; ++j) dr[j] += pr[j] * (gr[j] - static_cast<S>(s));
        }
    });
}

template <typename S>
typename Tape<S>::Val Tape<S>::causal_softmax(Val x, int64_t offset) {
    check(x, "causal_softmax");
    const Array<S>& xv = node(x.id).value;
    if (xv.rank() < 2) throw shape_error("causal_softmax", shape_str(xv.shape));
    const int64_t Tk = xv.shape[xv.rank() - 1];
    const int64_t Tq = xv.shape[xv.rank() - 2];
    const int64_t mats = xv.size() / (Tq * Tk);
    Array<S> out(xv.shape);
    std::copy(xv.data.begin(), xv.data.end(), out.data.begin());
    for (int64_t m = 0; m < mats; ++m)
        for (int64_t tq = 0; tq < Tq; ++tq) {
            const int64_t valid = std::min<int64_t>(Tk, tq + offset + 1);
            if (valid < 1)
                throw std::invalid_argument("causal_softmax: row with no visible positions");
            kern::softmax_row(out.ptr() + (m * Tq + tq) * Tk, Tk, valid);
        }
    return push(std::move(out), node(x.id).needs_grad,
                [x, mats, Tq, Tk, offset](Tape& t, int32_t self) {
                    if (!t.node(x.id).needs_grad) return;
                    const Array<S>& g = t.node(self).grad;
                    const Array<S>& p = t.node(self).value;
                    Array<S>& dx = t.grad_buf(x.id);
                    for (int64_t m = 0; m < mats; ++m)
                        for (int64_t tq = 0; tq < Tq; ++tq) {
                            const int64_t valid = std::min<int64_t>(Tk, tq + offset + 1);
                            const int64_t base = (m * Tq + tq) * Tk;
                            const S* pr = p.ptr() + base;
                            const S* gr = g.ptr() + base;
                            double s = 0.0;
                            for (int64_t j = 0; j < valid; ++j) s += double(gr[j]) * double(pr[j]);
                            S* dr = dx.ptr() + base;
                            for (int64_t j = 0; j < valid; ++j)
                                dr[j] += pr[j] * (gr[j] - static_cast<S>(s));
                        }
                });
}

template <typename S>
typename Tape<S>::Val Tape<S>::embedding(std::span<const int32_t> tokens, Val table, int64_t B,
                                         int64_t T) {
    check(table, "embedding");
    const Array<S>& tb = node(table.id).value;
    if (tb.rank() != 2) throw shape_error("embedding", shape_str(tb.shape));
    if (static_cast<int64_t>(tokens.size()) != B * T)
        throw shape_error("embedding", "token count " + std::to_string(tokens.size()) +
                                           " != B*T = " + std::to_string(B * T));
    const int64_t V = tb.shape[0], D = tb.shape[1];
    for (int32_t tok : tokens)
        if (tok < 0 || tok >= V)
            throw std::out_of_range("embedding: token id " + std::to_string(tok) +
                                    " out of range [0," + std::to_string(V) + ")");
    auto toks = std::make_shared<std::vector<int32_t>>(tokens.begin(), tokens.end());
    Array<S> out({B, T, D});
    for (int64_t i = 0; i < B * T; ++i) {
        const S* src = tb.ptr() + int64_t((*toks)[static_cast<size_t>(i)]) * D;
        std::copy(src, src + D, out.ptr() + i * D);
    }
    return push(std::move(out), node(table.id).needs_grad,
                [table, toks, D](Tape& t, int32_t self) {
                    if (!t.node(table.id).needs_grad) return;
                    const Array<S>& g = t.node(self).grad;
                    Array<S>& dt = t.grad_buf(table.id);
                    const int64_t n = g.size() / D;
                    for (int64_t i = 0; i < n; ++i) {
                        S* dst = dt.ptr() + int64_t((*toks)[static_cast<size_t>(i)]) * D;
                        const S* src = g.ptr() + i * D;
                        for (int64_t j = 0; j < D; ++j) dst[j] += src[j];
                    }
                });
}

template <typename S>
typename Tape<S>::Val Tape<S>::split_heads(Val x, int64_t H) {
    check(x, "split_heads");
    const Array<S>& xv = node(x.id).value;
    if (xv.rank() != 3 || xv.shape[2] % H != 0)
        throw shape_error("split_heads", shape_str(xv.shape) + " with H=" + std::to_string(H));
    const int64_t B = xv.shape[0], T = xv.shape[1], D = xv.shape[2], d = D / H;
    Array<S> out({B, H, T, d});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t h = 0; h < H; ++h)
            for (int64_t t = 0; t < T; ++t) {
                const S* src = xv.ptr() + (b * T + t) * D + h * d;
                S* dst = out.ptr() + ((b * H + h) * T + t) * d;
                std::copy(src, src + d, dst);
            }
    return push(std::move(out), node(x.id).needs_grad, [x, B, H, T, d, D](Tape& t, int32_t self) {
        if (!t.node(x.id).needs_grad) return;
        const Array<S>& g = t.node(self).grad;
        Array<S>& dx = t.grad_buf(x.id);
        for (int64_t b = 0; b < B; ++b)
            for (int64_t h = 0; h < H; ++h)
                for (int64_t tt = 0; tt < T; ++tt) {
                    const S* src = g.ptr() + ((b * H + h) * T + tt) * d;
                    S* dst = dx.ptr() + (b * T + tt) * D + h * d;
                    for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
                }
    });
}

template <typename S>
typename Tape<S>::Val Tape<S>::merge_heads(Val x) {
    check(x, "merge_heads");
    const Array<S>& xv = node(x.id).value;
    if (xv.rank() != 4) throw shape_error("merge_heads", shape_str(xv.shape));
    const int64_t B = xv.shape[0], H = xv.shape[1], T = xv.shape[2], d = xv.shape[3];
    const int64_t D = H * d;
    Array<S> out({B, T, D});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t h = 0; h < H; ++h)
            for (int64_t t = 0; t < T; ++t) {
                const S* src = xv.ptr() + ((b * H + h) * T + t) * d;
                S* dst = out.ptr() + (b * T + t) * D + h * d;
                std::copy(src, src + d, dst);
            }
    return push(std::move(out), node(x.id).needs_grad, [x, B, H, T, d, D](Tape& t, int32_t self) {
        if (!t.node(x.id).needs_grad) return;
        const Array<S>& g = t.node(self).grad;
        Array<S>& dx = t.grad_buf(x.id);
        for (int64_t b = 0; b < B; ++b)
            for (int64_t h = 0; h < H; ++h)
                for (int64_t tt = 0; tt < T; ++tt) {
                    const S* src = g.ptr() + (b * T + tt) * D + h * d;
                    S* dst = dx.ptr() + ((b * H + h) * T + tt) * d;
                    for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
                }
    });
}

template <typename S>
typename Tape<S>::Val Tape<S>::rotary(Val x, int64_t pos_offset, double base) {
    check(x, "rotary");
    const Array<S>& xv = node(x.id).value;
    if (xv.rank() != 4) throw shape_error("rotary", shape_str(xv.shape));
    const int64_t B = xv.shape[0], H = xv.shape[1], T = xv.shape[2], d = xv.shape[3];
    if (d % 2 != 0) throw shape_error("rotary", "head dim must be even, got " + std::to_string(d));
    // Precompute cos/sin per (position, pair); shared across batch and heads.
    auto cs = std::make_shared<std::vector<S>>(static_cast<size_t>(T * d));
    for (int64_t t = 0; t < T; ++t)
        for (int64_t m = 0; m < d / 2; ++m) {
            const double theta = double(t + pos_offset) *
                                 std::pow(base, -2.0 * double(m) / double(d));
            (*cs)[static_cast<size_t>(t * d + 2 * m)] = static_cast<S>(std::cos(theta));
            (*cs)[static_cast<size_t>(t * d + 2 * m + 1)] = static_cast<S>(std::sin(theta));
        }
    Array<S> out(xv.shape);
    for (int64_t bh = 0; bh < B * H; ++bh)
        for (int64_t t = 0; t < T; ++t) {
            const S* xr = xv.ptr() + (bh * T + t) * d;
            S* yr = out.ptr() + (bh * T + t) * d;
            for (int64_t m = 0; m < d / 2; ++m) {
                const S c = (*cs)[static_cast<size_t>(t * d + 2 * m)];
                const S s = (*cs)[static_cast<size_t>(t * d + 2 * m + 1)];
                const S x0 = xr[2 * m], x1 = xr[2 * m + 1];
                yr[2 * m] = x0 * c - x1 * s;
                yr[2 * m + 1] = x0 * s + x1 * c;
            }
        }
    return push(std::move(out), node(x.id).needs_grad, [x, B, H, T, d, cs](Tape& t, int32_t self) {
        if (!t.node(x.id).needs_grad) return;
        const Array<S>& g = t.node(self).grad;
        Array<S>& dx = t.grad_buf(x.id);
        // Rotation is orthogonal: the adjoint applies the inverse rotation.
        for (int64_t bh = 0; bh < B * H; ++bh)
            for (int64_t tt = 0; tt < T; ++tt) {
                const S* gr = g.ptr() + (bh * T + tt) * d;
                S* dr = dx.ptr() + (bh * T + tt) * d;
                for (int64_t m = 0; m < d / 2; ++m) {
                    const S c = (*cs)[static_cast<size_t>(tt * d + 2 * m)];
                    const S s = (*cs)[static_cast<size_t>(tt * d + 2 * m + 1)];
                    const S g0 = gr[2 * m], g1 = gr[2 * m + 1];
                    dr[2 * m] += g0 * c + g1 * s;
                    dr[2 * m + 1] += -g0 * s + g1 * c;
                }
            }
    });
}

template <typename S>
typename Tape<S>::Val Tape<S>::attn_scores(Val q, Val k, S scale) {
    check(q, "attn_scores");
    check(k, "attn_scores");
    const Array<S>& qv = node(q.id).value;
    const Array<S>& kv = node(k.id).value;
    if (qv.rank() != 4 || kv.rank() != 4 || qv.shape[0] != kv.shape[0] ||
        qv.shape[1] != kv.shape[1] || qv.shape[3] != kv.shape[3])
        throw shape_error("attn_scores", shape_str(qv.shape) + " vs " + shape_str(kv.shape));
    const int64_t B = qv.shape[0], H = qv.shape[1], T = qv.shape[2], d = qv.shape[3];
    const int64_t Tk = kv.shape[2];
    Array<S> out({B, H, T, Tk});
    Array<S> kt({d, Tk});
    for (int64_t bh = 0; bh < B * H; ++bh) {
        kern::transpose(kv.ptr() + bh * Tk * d, kt.ptr(), Tk, d);
        kern::matmul_nn(qv.ptr() + bh * T * d, kt.ptr(), out.ptr() + bh * T * Tk, T, d, Tk, false);
    }
    for (int64_t i = 0; i < out.size(); ++i) out.data[i] *= scale;
    bool ng = node(q.id).needs_grad || node(k.id).needs_grad;
    return push(std::move(out), ng, [q, k, scale, B, H, T, Tk, d](Tape& t, int32_t self) {
        const Array<S>& g = t.node(self).grad;
        const Array<S>& qv = t.node(q.id).value;
        const Array<S>& kv = t.node(k.id).value;
        Array<S> gs(g.shape);
        for (int64_t i = 0; i < g.size(); ++i) gs.data[i] = g.data[i] * scale;
        if (t.node(q.id).needs_grad) {
            Array<S>& dq = t.grad_buf(q.id);
            for (int64_t bh = 0; bh < B * H; ++bh)
                kern::matmul_nn(gs.ptr() + bh * T * Tk, kv.ptr() + bh * Tk * d,
                                dq.ptr() + bh * T * d, T, Tk, d, true);
        }
        if (t.node(k.id).needs_grad) {
            Array<S>& dk = t.grad_buf(k.id);
            for (int64_t bh = 0; bh < B * H; ++bh)
                kern::matmul_tn(gs.ptr() + bh * T * Tk, qv.ptr() + bh * T * d,
                                dk.ptr() + bh * Tk * d, Tk, T, d, true);
        }
    });
}

template <typename S>
typename Tape<S>::Val Tape<S>::attn_apply(Val p, Val v) {
    check(p, "attn_apply");
    check(v, "attn_apply");
    const Array<S>& pv = node(p.id).value;
    const Array<S>& vv = node(v.id).value;
    if (pv.rank() != 4 || vv.rank() != 4 || pv.shape[0] != vv.shape[0] ||
        pv.shape[1] != vv.shape[1] || pv.shape[3] != vv.shape[2])
        throw shape_error("attn_apply", shape_str(pv.shape) + " vs " + shape_str(vv.shape));
    const int64_t B = pv.shape[0], H = pv.shape[1], T = pv.shape[2], Tk = pv.shape[3];
    const int64_t d = vv.shape[3];
    Array<S> out({B, H, T, d});
    for (int64_t bh = 0; bh < B * H; ++bh)
        kern::matmul_nn(pv.ptr() + bh * T * Tk, vv.ptr() + bh * Tk * d, out.ptr() + bh * T * d, T,
                        Tk, d, false);
    bool ng = node(p.id).needs_grad || node(v.id).needs_grad;
    return push(std::move(out), ng, [p, v, B, H, T, Tk, d](Tape& t, int32_t self) {
        const Array<S>& g = t.node(self).grad;
        const Array<S>& pv = t.node(p.id).value;
        const Array<S>& vv = t.node(v.id).value;
        if (t.node(p.id).needs_grad) {
            Array<S>& dp = t.grad_buf(p.id);
            Array<S> vt({d, Tk});
            for (int64_t bh = 0; bh < B * H; ++bh) {
                kern::transpose(vv.ptr() + bh * Tk * d, vt.ptr(), Tk, d);
                kern::matmul_nn(g.ptr() + bh * T * d, vt.ptr(), dp.ptr() + bh * T * Tk, T, d, Tk,
                                true);
            }
        }
        if (t.node(v.id).needs_grad) {
            Array<S>& dv = t.grad_buf(v.id);
            for (int64_t bh = 0; bh < B * H; ++bh)
                kern::matmul_tn(pv.ptr() + bh * T * Tk, g.ptr() + bh * T * d,
                                dv.ptr() + bh * Tk * d, Tk, T, d, true);
        }
    });
}

template <typename S>
typename Tape<S>::Val Tape<S>::slice_cols(Val x, int64_t start, int64_t len) {
    check(x, "slice_cols");
    const Array<S>& xv = node(x.id).value;
    const int64_t K = xv.last_dim();
    if (start < 0 || len <= 0 || start + len > K)
        throw shape_error("slice_cols", "slice [" + std::to_string(start) + "," +
                                            std::to_string(start + len) + ") of width " +
                                            std::to_string(K));
    const int64_t rows = fold_rows(xv.shape);
    std::vector<int64_t> oshape = xv.shape;
    oshape.back() = len;
    Array<S> out(oshape);
    for (int64_t r = 0; r < rows; ++r)
        std::copy(xv.ptr() + r * K + start, xv.ptr() + r * K + start + len, out.ptr() + r * len);
    return push(std::move(out), node(x.id).needs_grad,
                [x, start, len, rows, K](Tape& t, int32_t self) {
                    if (!t.node(x.id).needs_grad) return;
                    const Array<S>& g = t.node(self).grad;
                    Array<S>& dx = t.grad_buf(x.id);
                    for (int64_t r = 0; r < rows; ++r)
                        for (int64_t j = 0; j < len; ++j)
                            dx.data[r * K + start + j] += g.data[r * len + j];
                });
}

template <typename S>
typename Tape<S>::Val Tape<S>::reshape(Val x, std::vector<int64_t> shape) {
    check(x, "reshape");
    const Array<S>& xv = node(x.id).value;
    if (numel(shape) != xv.size())
        throw shape_error("reshape", shape_str(xv.shape) + " -> " + shape_str(shape));
    Array<S> out(std::move(shape), xv.data);
    return push(std::move(out), node(x.id).needs_grad, [x](Tape& t, int32_t self) {
        if (!t.node(x.id).needs_grad) return;
        const Array<S>& g = t.node(self).grad;
        Array<S>& dx = t.grad_buf(x.id);
        for (int64_t i = 0; i < g.size(); ++i) dx.data[i] += g.data[i];
    });
}

template <typename S>
typename Tape<S>::Val Tape<S>::weighted_sum_rows(std::span<const Val> hist, Val w) {
    if (hist.empty()) throw std::invalid_argument("weighted_sum_rows: empty history");
    for (Val h : hist) check(h, "weighted_sum_rows");
    check(w, "weighted_sum_rows");
    const int64_t n = static_cast<int64_t>(hist.size());
    const Array<S>& h0 = node(hist[0].id).value;
    for (Val h : hist)
        if (node(h.id).value.shape != h0.shape)
            throw shape_error("weighted_sum_rows", "history entries disagree: " +
                                                       shape_str(node(h.id).value.shape) + " vs " +
                                                       shape_str(h0.shape));
    const Array<S>& wv = node(w.id).value;
    const int64_t D = h0.last_dim();
    const int64_t rows = fold_rows(h0.shape);
    const bool shared = wv.rank() == 1;
    if (shared) {
        if (wv.size() != n)
            throw shape_error("weighted_sum_rows", "weights " + shape_str(wv.shape) + " for " +
                                                       std::to_string(n) + " entries");
    } else {
        if (wv.last_dim() != n || fold_rows(wv.shape) != rows)
            throw shape_error("weighted_sum_rows", "weights " + shape_str(wv.shape) +
                                                       " vs history " + shape_str(h0.shape));
    }
    Array<S> out(h0.shape);
    auto ids = std::make_shared<std::vector<int32_t>>();
    for (Val h : hist) ids->push_back(h.id);
    for (int64_t r = 0; r < rows; ++r) {
        S* yr = out.ptr() + r * D;
        for (int64_t j = 0; j < n; ++j) {
            const S wj = shared ? wv.data[j] : wv.data[r * n + j];
            const S* hr = node((*ids)[static_cast<size_t>(j)]).value.ptr() + r * D;
            if (j == 0)
                for (int64_t c = 0; c < D; ++c) yr[c] = wj * hr[c];
            else
                for (int64_t c = 0; c < D; ++c) yr[c] += wj * hr[c];
        }
    }
    flops::add(2 * rows * D * n);
    bool ng = node(w.id).needs_grad;
    for (Val h : hist) ng = ng || node(h.id).needs_grad;
    return push(std::move(out), ng, [ids, w, shared, rows, D, n](Tape& t, int32_t self) {
        const Array<S>& g = t.node(self).grad;
        const Array<S>& wv = t.node(w.id).value;
        const bool need_w = t.node(w.id).needs_grad;
        Array<S>* dw = need_w ? &t.grad_buf(w.id) : nullptr;
        for (int64_t j = 0; j < n; ++j) {
            const int32_t hid = (*ids)[static_cast<size_t>(j)];
            const bool need_h = t.node(hid).needs_grad;
            const Array<S>& hv = t.node(hid).value;
            Array<S>* dh = need_h ? &t.grad_buf(hid) : nullptr;
            for (int64_t r = 0; r < rows; ++r) {
                const S wj = shared ? wv.data[j] : wv.data[r * n + j];
                const S* gr = g.ptr() + r * D;
                const S* hr = hv.ptr() + r * D;
                if (need_h) {
                    S* dhr = dh->ptr() + r * D;
                    for (int64_t c = 0; c < D; ++c) dhr[c] += wj * gr[c];
                }
                if (need_w) {
                    double dot = 0.0;
                    for (int64_t c = 0; c < D; ++c) dot += double(gr[c]) * double(hr[c]);
                    dw->data[shared ? j : r * n + j] += static_cast<S>(dot);
                }
            }
        }
    });
}

template <typename S>
typename Tape<S>::Val Tape<S>::sum_all(Val a) {
    check(a, "sum_all");
    const Array<S>& av = node(a.id).value;
    double s = 0.0;
    for (int64_t i = 0; i < av.size(); ++i) s += double(av.data[i]);
    Array<S> out(std::vector<int64_t>{});
    out.data[0] = static_cast<S>(s);
    return push(std::move(out), node(a.id).needs_grad, [a](Tape& t, int32_t self) {
        if (!t.node(a.id).needs_grad) return;
        const S g = t.node(self).grad.data[0];
        Array<S>& da = t.grad_buf(a.id);
        for (int64_t i = 0; i < da.size(); ++i) da.data[i] += g;
    });
}

template <typename S>
typename Tape<S>::Val Tape<S>::mean_all(Val a) {
    check(a, "mean_all");
    const Array<S>& av = node(a.id).value;
    const int64_t N = av.size();
    double s = 0.0;
    for (int64_t i = 0; i < N; ++i) s += double(av.data[i]);
    Array<S> out(std::vector<int64_t>{});
    out.data[0] = static_cast<S>(s / double(N));
    return push(std::move(out), node(a.id).needs_grad, [a, N](Tape& t, int32_t self) {
        if (!t.node(a.id).needs_grad) return;
        const S g = t.node(self).grad.data[0] / static_cast<S>(N);
        Array<S>& da = t.grad_buf(a.id);
        for (int64_t i = 0; i < da.size(); ++i) da.data[i] += g;
    });
}

template <typename S>
typename Tape<S>::Val Tape<S>::cross_entropy(Val logits, std::span<const int32_t> targets) {
    check(logits, "cross_entropy");
    const Array<S>& lv = node(logits.id).value;
    const int64_t V = lv.last_dim();
    const int64_t rows = fold_rows(lv.shape);
    if (static_cast<int64_t>(targets.size()) != rows)
        throw shape_error("cross_entropy", std::to_string(targets.size()) + " targets for " +
                                               std::to_string(rows) + " rows");
    for (int32_t tgt : targets)
        if (tgt < 0 || tgt >= V)
            throw std::out_of_range("cross_entropy: target id " + std::to_string(tgt) +
                                    " out of range [0," + std::to_string(V) + ")");
    auto tg = std::make_shared<std::vector<int32_t>>(targets.begin(), targets.end());
    // Keep per-row log-sum-exp so backward can rebuild probabilities cheaply.
    auto lse = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
    double total = 0.0;
    for (int64_t r = 0; r < rows; ++r) {
        const S* xr = lv.ptr() + r * V;
        double mx = double(xr[0]);
        for (int64_t j = 1; j < V; ++j) mx = std::max(mx, double(xr[j]));
        double se = 0.0;
        for (int64_t j = 0; j < V; ++j) se += std::exp(double(xr[j]) - mx);
        const double l = mx + std::log(se);
        (*lse)[static_cast<size_t>(r)] = l;
        total += l - double(xr[(*tg)[static_cast<size_t>(r)]]);
    }
    Array<S> out(std::vector<int64_t>{});
    out.data[0] = static_cast<S>(total / double(rows));
    return push(std::move(out), node(logits.id).needs_grad,
                [logits, tg, lse, rows, V](Tape& t, int32_t self) {
                    if (!t.node(logits.id).needs_grad) return;
                    const S g = t.node(self).grad.data[0];
                    const Array<S>& lv = t.node(logits.id).value;
                    Array<S>& dl = t.grad_buf(logits.id);
                    const double gn = double(g) / double(rows);
                    for (int64_t r = 0; r < rows; ++r) {
                        const S* xr = lv.ptr() + r * V;
                        S* dr = dl.ptr() + r * V;
                        const double l = (*lse)[static_cast<size_t>(r)];
                        const int32_t tgt = (*tg)[static_cast<size_t>(r)];
                        for (int64_t j = 0; j < V; ++j) {
                            const double p = std::exp(double(xr[j]) - l);
                            dr[j] += static_cast<S>(gn * (p - (j == tgt ? 1.0 : 0.0)));
                        }
                    }
                });
}

template <typename S>
void Tape<S>::backward(Val loss) {
    if (nodes_.empty()) throw std::logic_error("backward before any forward op was recorded");
    check(loss, "backward");
    if (backward_done_) throw std::logic_error("backward already ran on this tape");
    Node& ln = node(loss.id);
    if (ln.value.size() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                    shape_str(ln.value.shape));
    backward_done_ = true;
    grad_buf(loss.id).data[0] = S(1);
    for (int32_t i = loss.id; i >= 0; --i) {
        Node& n = node(i);
        if (n.grad.data.empty()) continue;  // not on any path to the loss
        if (n.back) n.back(*this, i);
        if (n.sink) {
            Array<S>& pg = n.sink->grad;
            for (int64_t j = 0; j < n.grad.size(); ++j) pg.data[j] += n.grad.data[j];
        }
    }
}

template class Tape<float>;
template class Tape<double>;

}  // namespace mudd
