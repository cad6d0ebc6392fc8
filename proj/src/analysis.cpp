#include "mudd/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mudd {

namespace {

// History entry j of a trace: X_0 is the embedding, X_j (j >= 1) the output
// of block j.
template <typename S>
const Array<S>& history_entry(const LayerTrace<S>& trace, int64_t j) {
    if (j == 0) return trace.embedding;
    return trace.block_out[static_cast<size_t>(j - 1)];
}

}  // namespace

Stream parse_stream(const std::string& name) {
    if (name == "q") return Stream::q;
    if (name == "k") return Stream::k;
    if (name == "v") return Stream::v;
    if (name == "r") return Stream::r;
    throw std::invalid_argument("unknown stream '" + name + "' (expected q, k, v, or r)");
}

std::string stream_name(Stream s) {
    switch (s) {
        case Stream::q: return "q";
        case Stream::k: return "k";
        case Stream::v: return "v";
        case Stream::r: return "r";
    }
    return "?";
}

std::set<int32_t> default_sink_tokens() { return {int32_t('\n'), int32_t('.')}; }

template <typename S>
std::vector<CosinePoint> adjacent_cosine_similarity(const LayerTrace<S>& trace, Stream stream) {
    const size_t si = static_cast<size_t>(stream);
    std::vector<CosinePoint> out;
    if (trace.inputs.size() < 2) return out;
    for (size_t i = 1; i < trace.inputs.size(); ++i) {
        const Array<S>& a = trace.inputs[i][si];
        const Array<S>& b = trace.inputs[i - 1][si];
        if (a.shape != b.shape)
            throw shape_error("adjacent_cosine_similarity",
                              shape_str(a.shape) + " vs " + shape_str(b.shape));
        const int64_t D = a.shape.back();
        const int64_t rows = a.rows();
        CosinePoint p;
        double sum = 0.0;
        int64_t included = 0;
        for (int64_t r = 0; r < rows; ++r) {
            const S* ar = a.ptr() + r * D;
            const S* br = b.ptr() + r * D;
            double aa = 0.0, bb = 0.0, ab = 0.0;
            for (int64_t c = 0; c < D; ++c) {
                aa += double(ar[c]) * double(ar[c]);
                bb += double(br[c]) * double(br[c]);
                ab += double(ar[c]) * double(br[c]);
            }
            if (aa == 0.0 || bb == 0.0) {
                ++p.excluded;
                continue;
            }
            sum += ab / (std::sqrt(aa) * std::sqrt(bb));
            ++included;
        }
        p.mean = included > 0 ? std::clamp(sum / double(included), -1.0, 1.0) : 0.0;
        out.push_back(p);
    }
    return out;
}

template <typename S>
std::vector<double> head_activation_ratio(const LayerTrace<S>& trace,
                                          std::span<const int32_t> tokens,
                                          const std::set<int32_t>& sink_tokens) {
    std::vector<double> out;
    out.reserve(trace.attn.size());
    for (const Array<S>& attn : trace.attn) {
        if (attn.rank() != 4)
            throw shape_error("head_activation_ratio", shape_str(attn.shape) + " is not rank-4");
        const int64_t B = attn.shape[0], H = attn.shape[1], T = attn.shape[2];
        if (attn.shape[3] != T)
            throw shape_error("head_activation_ratio", shape_str(attn.shape) + " is not square");
        if (static_cast<int64_t>(tokens.size()) != B * T)
            throw std::invalid_argument("head_activation_ratio: token count mismatch");
        int64_t active = 0;
        for (int64_t b = 0; b < B; ++b) {
            for (int64_t h = 0; h < H; ++h) {
                const S* rows = attn.ptr() + (b * H + h) * T * T;
                for (int64_t t = 0; t < T; ++t) {
                    const S* row = rows + t * T;
                    int64_t best = 0;
                    for (int64_t j = 1; j < T; ++j)
                        if (row[j] > row[best]) best = j;
                    if (best < 2) continue;
                    if (sink_tokens.count(tokens[static_cast<size_t>(b * T + best)])) continue;
                    ++active;
                }
            }
        }
        out.push_back(double(active) / double(B * H * T));
    }
    return out;
}

template <typename S>
RectifiedStats rectified_weight_stats(std::span<const LayerTrace<S>> traces) {
    if (traces.empty()) throw std::invalid_argument("rectified_weight_stats: no traces");
    const LayerTrace<S>& first = traces.front();
    const size_t L = first.block_out.size();
    for (const LayerTrace<S>& t : traces) {
        if (t.block_out.size() != L || t.sources != first.sources || t.ways != first.ways)
            throw std::invalid_argument("rectified_weight_stats: traces disagree on architecture");
    }

    RectifiedStats stats;
    // Mean Euclidean norm of each history entry over every traced position.
    stats.mean_norms.assign(L + 1, 0.0);
    for (int64_t j = 0; j <= static_cast<int64_t>(L); ++j) {
        double sum = 0.0;
        int64_t count = 0;
        for (const LayerTrace<S>& t : traces) {
            const Array<S>& x = history_entry(t, j);
            const int64_t D = x.shape.back();
            const int64_t rows = x.rows();
            for (int64_t r = 0; r < rows; ++r) {
                const S* xr = x.ptr() + r * D;
                double ss = 0.0;
                for (int64_t c = 0; c < D; ++c) ss += double(xr[c]) * double(xr[c]);
                sum += std::sqrt(ss);
            }
            count += rows;
        }
        stats.mean_norms[static_cast<size_t>(j)] = count > 0 ? sum / double(count) : 0.0;
    }

    for (size_t li = 0; li < L; ++li) {
        if (first.dyn_weights[li].size() == 0) continue;
        RectifiedLayerStats ls;
        ls.layer = static_cast<int64_t>(li) + 1;
        ls.ways = first.ways[li];
        ls.sources = first.sources[li];
        const int64_t C = ls.ways;
        const int64_t n = static_cast<int64_t>(ls.sources.size());
        ls.mean.assign(static_cast<size_t>(C), std::vector<double>(static_cast<size_t>(n), 0.0));
        ls.stddev = ls.mean;
        for (int64_t c = 0; c < C; ++c) {
            for (int64_t s = 0; s < n; ++s) {
                const double scale = stats.mean_norms[static_cast<size_t>(ls.sources[s])];
                // Two passes: the one-shot E[v^2]-E[v]^2 form cancels badly
                // when the weights are (near-)constant, e.g. at init.
                double sum = 0.0;
                int64_t count = 0;
                for (const LayerTrace<S>& t : traces) {
                    const Array<S>& dw = t.dyn_weights[li];
                    if (dw.shape.back() != C * n)
                        throw shape_error("rectified_weight_stats", shape_str(dw.shape));
                    for (int64_t r = 0; r < dw.rows(); ++r)
                        sum += double(dw.ptr()[r * C * n + c * n + s]) * scale;
                    count += dw.rows();
                }
                const double mean = sum / double(count);
                double var = 0.0;
                for (const LayerTrace<S>& t : traces) {
                    const Array<S>& dw = t.dyn_weights[li];
                    for (int64_t r = 0; r < dw.rows(); ++r) {
                        const double d = double(dw.ptr()[r * C * n + c * n + s]) * scale - mean;
                        var += d * d;
                    }
                }
                var /= double(count);
                ls.mean[static_cast<size_t>(c)][static_cast<size_t>(s)] = mean;
                ls.stddev[static_cast<size_t>(c)][static_cast<size_t>(s)] = std::sqrt(var);
            }
        }
        stats.layers.push_back(std::move(ls));
    }
    return stats;
}

template <typename S>
AnalysisReport analyze_traces(std::span<const TracedBatch<S>> batches,
                              const std::set<int32_t>& sink_tokens) {
    if (batches.empty()) throw std::invalid_argument("analyze_traces: no batches");
    AnalysisReport rep;

    for (int si = 0; si < 4; ++si) {
        // Pool adjacent-cosine means weighted by how many positions survived.
        std::vector<double> sums;
        std::vector<int64_t> included, excluded;
        for (const TracedBatch<S>& b : batches) {
            const auto pts = adjacent_cosine_similarity(b.trace, static_cast<Stream>(si));
            if (sums.empty()) {
                sums.assign(pts.size(), 0.0);
                included.assign(pts.size(), 0);
                excluded.assign(pts.size(), 0);
            } else if (pts.size() != sums.size()) {
                throw std::invalid_argument("analyze_traces: traces disagree on depth");
            }
            for (size_t i = 0; i < pts.size(); ++i) {
                const int64_t inc = b.B * b.T - pts[i].excluded;
                sums[i] += pts[i].mean * double(inc);
                included[i] += inc;
                excluded[i] += pts[i].excluded;
            }
        }
        rep.cosine[static_cast<size_t>(si)].resize(sums.size());
        for (size_t i = 0; i < sums.size(); ++i) {
            rep.cosine[static_cast<size_t>(si)][i].mean =
                included[i] > 0 ? sums[i] / double(included[i]) : 0.0;
            rep.cosine[static_cast<size_t>(si)][i].excluded = excluded[i];
        }
    }

    std::vector<double> act_sums;
    std::vector<int64_t> act_counts;
    for (const TracedBatch<S>& b : batches) {
        const auto ratios = head_activation_ratio(b.trace, b.tokens, sink_tokens);
        if (act_sums.empty()) {
            act_sums.assign(ratios.size(), 0.0);
            act_counts.assign(ratios.size(), 0);
        } else if (ratios.size() != act_sums.size()) {
            throw std::invalid_argument("analyze_traces: traces disagree on depth");
        }
        for (size_t i = 0; i < ratios.size(); ++i) {
            const int64_t H = b.trace.attn[i].shape[1];
            act_sums[i] += ratios[i] * double(b.B * H * b.T);
            act_counts[i] += b.B * H * b.T;
        }
    }
    rep.head_activation.resize(act_sums.size());
    for (size_t i = 0; i < act_sums.size(); ++i)
        rep.head_activation[i] = act_counts[i] > 0 ? act_sums[i] / double(act_counts[i]) : 0.0;

    std::vector<LayerTrace<S>> traces;
    traces.reserve(batches.size());
    for (const TracedBatch<S>& b : batches) traces.push_back(b.trace);
    rep.rectified = rectified_weight_stats<S>(traces);
    return rep;
}

#define MUDD_INSTANTIATE_ANALYSIS(S)                                                          \
    template std::vector<CosinePoint> adjacent_cosine_similarity<S>(const LayerTrace<S>&,     \
                                                                    Stream);                 \
    template std::vector<double> head_activation_ratio<S>(const LayerTrace<S>&,               \
                                                          std::span<const int32_t>,          \
                                                          const std::set<int32_t>&);         \
    template RectifiedStats rectified_weight_stats<S>(std::span<const LayerTrace<S>>);       \
    template AnalysisReport analyze_traces<S>(std::span<const TracedBatch<S>>,                \
                                              const std::set<int32_t>&);

MUDD_INSTANTIATE_ANALYSIS(float)
MUDD_INSTANTIATE_ANALYSIS(double)

}  // namespace mudd
