#pragma once

// Closed-form accounting of the overheads the depth aggregation adds on top of
// a standard pre-norm Transformer: extra parameters, extra forward FLOPs, and
// theoretical activation memory during training. All exact quantities are
// integer/rational so reports are reproducible bit-for-bit; the approximate
// forms are the eta/rho expressions they converge to when D dominates the
// aggregate width.

#include <array>
#include <cstdint>
#include <span>
#include <string>

#include "mudd/model.hpp"

namespace mudd {

// Architecture point being analyzed. C is the number of ways fed by each
// aggregate (4 in the full model); the aggregate width at 1-based layer i is
// K_i = C * (i + 1).
struct ArchSpec {
    int64_t L = 24;        // layers
    int64_t D = 2048;      // model dim
    int64_t T = 4096;      // sequence length
    int64_t N_heads = 16;  // attention heads (memory accounting only)
    int64_t B = 1;         // batch size (memory accounting only)
    int64_t C = 4;         // ways per aggregate

    void validate() const;                 // all fields must be >= 1
    double eta() const;                    // (L + 3) / D
    double rho() const;                    // T / D
    int64_t hidden_dim(int64_t i) const;   // K_i = C * (i + 1), i in [1, L]
};

// Exact rational, reduced and with positive denominator on construction.
struct Ratio {
    int64_t num = 0;
    int64_t den = 1;

    Ratio() = default;
    Ratio(int64_t n, int64_t d);
    double value() const { return static_cast<double>(num) / static_cast<double>(den); }
    bool operator==(const Ratio&) const = default;
};

// One overhead measure: the raw extra count, its exact ratio over the
// baseline, and the closed-form approximation of that ratio.
struct Overhead {
    int64_t count = 0;  // extra parameters, or extra FLOPs
    Ratio exact;        // count / baseline
    double approx = 0.0;
};

// Baseline conventions: parameters 12*L*D^2 (attention 4*L*D^2 + FFN 8*L*D^2),
// forward FLOPs 2*L*D*T*(12*D + T). Embeddings and norms are excluded.
int64_t baseline_param_count(const ArchSpec& spec);
int64_t baseline_flop_count(const ArchSpec& spec);

// Extra parameters: sum_i (D*K_i + K_i^2) over 12*L*D^2; approx eta/6.
Overhead extra_params(const ArchSpec& spec);
// Extra FLOPs: sum_i (4*T*D*K_i + 2*T*K_i^2) over 2*L*D*T*(12*D + T);
// approx eta/(3 + rho/4).
Overhead extra_flops(const ArchSpec& spec);

// Theoretical peak activation memory while training in 16-bit floats with
// gradient checkpointing: the baseline holds 2*L*B*T*D elements of hidden
// states plus B*T*D*(34 + 6*N*T/D) for recomputing one layer. Static dense
// connections add hidden-state gradients (2*L*B*T*D); the full model adds
// 6*B*T*D more for the recomputed multiway streams.
enum class MemoryVariant { baseline, static_dense, muddformer };
MemoryVariant parse_memory_variant(const std::string& name);
std::string memory_variant_name(MemoryVariant v);

struct MemoryRow {
    MemoryVariant variant = MemoryVariant::baseline;
    int64_t bytes = 0;  // 2 bytes per element
    Ratio extra_ratio;  // extra over baseline, exact
};
MemoryRow activation_memory(const ArchSpec& spec, MemoryVariant variant);

struct ComplexityReport {
    ArchSpec spec;
    int64_t baseline_params = 0;
    int64_t baseline_flops = 0;
    int64_t extra_params_exact = 0;  // raw extra parameter count
    int64_t extra_flops_exact = 0;   // raw extra FLOP count
    Ratio ratio_params_exact;
    Ratio ratio_flops_exact;
    double ratio_params_approx = 0.0;
    double ratio_flops_approx = 0.0;
    std::array<MemoryRow, 3> memory{};  // baseline, static_dense, muddformer
};
ComplexityReport analyze_arch(const ArchSpec& spec);

// Print helpers shared by the report formats. Percentages round to two
// decimals and drop trailing zeros ("0.8%", not "0.80%"); eta keeps four
// decimals; rho rounds to two decimals and trims ("2", "2.67").
std::string format_percent(double fraction);
std::string format_trimmed(double value, int max_decimals);
std::string format_eta(double eta);

// Renders the report; format is one of "table", "json", "csv".
std::string format_report(const ComplexityReport& report, const std::string& format);

// Measured forward FLOPs of a built model on one batch: counts 2*m*n*k per
// matrix product (projections, attention scores/apply, aggregation, logits).
template <typename S>
int64_t flop_count_model(Model<S>& m, std::span<const int32_t> tokens, int64_t B, int64_t T);

}  // namespace mudd
