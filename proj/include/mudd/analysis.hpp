#pragma once

// Post-hoc diagnostics over traced forward passes: how similar adjacent layer
// inputs are per stream, how often attention heads look somewhere informative,
// and what the dynamic aggregation weights do once rescaled by the typical
// magnitude of each source layer. Everything here is pure post-processing of
// LayerTrace records; nothing touches model state.

#include <array>
#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "mudd/model.hpp"

namespace mudd {

enum class Stream { q = 0, k = 1, v = 2, r = 3 };
Stream parse_stream(const std::string& name);
std::string stream_name(Stream s);

// Byte-level stand-ins for the usual attention-sink tokens: '.' and newline.
std::set<int32_t> default_sink_tokens();

// Mean cosine between the inputs of consecutive layers for one stream.
struct CosinePoint {
    double mean = 0.0;     // over included positions; 0.0 when none remain
    int64_t excluded = 0;  // positions dropped because either vector was zero
};

// Entry p compares the inputs of layer p+2 against layer p+1 (so the result
// has one value per adjacent pair). Baseline traces carry the same array in
// all four stream slots, so the stream choice is then immaterial.
template <typename S>
std::vector<CosinePoint> adjacent_cosine_similarity(const LayerTrace<S>& trace, Stream stream);

// Fraction of (head, query position) pairs per layer whose attention argmax
// is "active": not key position 0 or 1, and not a position holding a sink
// token. tokens must be the same (B*T) ids the traced forward consumed.
template <typename S>
std::vector<double> head_activation_ratio(const LayerTrace<S>& trace,
                                          std::span<const int32_t> tokens,
                                          const std::set<int32_t>& sink_tokens);

// Dynamic aggregation weights rescaled by the mean hidden-state norm of the
// source layer they read, summarized over every position of a trace corpus.
struct RectifiedLayerStats {
    int64_t layer = 0;                        // 1-based layer whose DA this is
    int64_t ways = 0;                         // C
    std::vector<int64_t> sources;             // history indices, ascending
    std::vector<std::vector<double>> mean;    // (C, n) rectified means
    std::vector<std::vector<double>> stddev;  // (C, n) population std
};

struct RectifiedStats {
    std::vector<double> mean_norms;          // per history index 0..L
    std::vector<RectifiedLayerStats> layers;  // dynamic-DA layers only
};

// All traces must come from the same model (same depth, schedule and ways);
// batch shapes may differ. Layers without recorded dynamic weights (static
// aggregation, or skipped by a sparse schedule) are omitted from `layers`.
template <typename S>
RectifiedStats rectified_weight_stats(std::span<const LayerTrace<S>> traces);

// One traced batch plus what produced it, for corpus-level reports.
template <typename S>
struct TracedBatch {
    LayerTrace<S> trace;
    std::vector<int32_t> tokens;  // (B*T)
    int64_t B = 0;
    int64_t T = 0;
};

struct AnalysisReport {
    std::array<std::vector<CosinePoint>, 4> cosine;  // per stream, pooled
    std::vector<double> head_activation;             // per layer, pooled
    RectifiedStats rectified;
};

// Pools the per-trace measurements position-weighted across batches.
template <typename S>
AnalysisReport analyze_traces(std::span<const TracedBatch<S>> batches,
                              const std::set<int32_t>& sink_tokens);

}  // namespace mudd
