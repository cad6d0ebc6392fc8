#include "mudd/complexity.hpp"

#include <cstdio>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace mudd {

namespace {

using i128 = __int128;

i128 gcd128(i128 a, i128 b) {
    if (a < 0) a = -a;
    if (b < 0) b = -b;
    while (b != 0) {
        i128 t = a % b;
        a = b;
        b = t;
    }
    return a;
}

int64_t narrow(i128 v, const char* what) {
    if (v > i128(std::numeric_limits<int64_t>::max()) ||
        v < i128(std::numeric_limits<int64_t>::min()))
        throw std::overflow_error(std::string(what) + ": value exceeds 64-bit range");
    return static_cast<int64_t>(v);
}

Ratio reduce(i128 num, i128 den, const char* what) {
    if (den <= 0) throw std::invalid_argument(std::string(what) + ": denominator must be positive");
    i128 g = gcd128(num, den);
    if (g == 0) g = 1;
    Ratio r;
    r.num = narrow(num / g, what);
    r.den = narrow(den / g, what);
    return r;
}

}  // namespace

void ArchSpec::validate() const {
    auto fail = [](const std::string& msg) { throw std::invalid_argument("ArchSpec: " + msg); };
    if (L < 1) fail("L must be >= 1");
    if (D < 1) fail("D must be >= 1");
    if (T < 1) fail("T must be >= 1");
    if (N_heads < 1) fail("N_heads must be >= 1");
    if (B < 1) fail("B must be >= 1");
    if (C < 1) fail("C must be >= 1");
}

double ArchSpec::eta() const { return static_cast<double>(L + 3) / static_cast<double>(D); }

double ArchSpec::rho() const { return static_cast<double>(T) / static_cast<double>(D); }

int64_t ArchSpec::hidden_dim(int64_t i) const {
    if (i < 1 || i > L) throw std::out_of_range("ArchSpec::hidden_dim: layer index out of range");
    return C * (i + 1);
}

Ratio::Ratio(int64_t n, int64_t d) {
    Ratio r = reduce(i128(n), i128(d), "Ratio");
    num = r.num;
    den = r.den;
}

int64_t baseline_param_count(const ArchSpec& spec) {
    spec.validate();
    return narrow(i128(12) * spec.L * spec.D * spec.D, "baseline_param_count");
}

int64_t baseline_flop_count(const ArchSpec& spec) {
    spec.validate();
    return narrow(i128(2) * spec.L * spec.D * spec.T * (12 * i128(spec.D) + spec.T),
                  "baseline_flop_count");
}

Overhead extra_params(const ArchSpec& spec) {
    spec.validate();
    i128 num = 0;
    for (int64_t i = 1; i <= spec.L; ++i) {
        const i128 K = spec.hidden_dim(i);
        num += i128(spec.D) * K + K * K;
    }
    const i128 den = i128(12) * spec.L * spec.D * spec.D;
    Overhead o;
    o.count = narrow(num, "extra_params");
    o.exact = reduce(num, den, "extra_params");
    o.approx = spec.eta() / 6.0;
    return o;
}

Overhead extra_flops(const ArchSpec& spec) {
    spec.validate();
    i128 num = 0;
    for (int64_t i = 1; i <= spec.L; ++i) {
        const i128 K = spec.hidden_dim(i);
        // 2*T*D*K + 2*T*K^2 to produce the position-wise weights, plus
        // 2*T*D*K for the aggregation itself.
        num += i128(4) * spec.T * spec.D * K + i128(2) * spec.T * K * K;
    }
    const i128 den = i128(2) * spec.L * spec.D * spec.T * (12 * i128(spec.D) + spec.T);
    Overhead o;
    o.count = narrow(num, "extra_flops");
    o.exact = reduce(num, den, "extra_flops");
    o.approx = spec.eta() / (3.0 + spec.rho() / 4.0);
    return o;
}

MemoryVariant parse_memory_variant(const std::string& name) {
    if (name == "baseline") return MemoryVariant::baseline;
    if (name == "static_dense") return MemoryVariant::static_dense;
    if (name == "muddformer") return MemoryVariant::muddformer;
    throw std::invalid_argument("unknown memory variant '" + name +
                                "' (expected baseline, static_dense, or muddformer)");
}

std::string memory_variant_name(MemoryVariant v) {
    switch (v) {
        case MemoryVariant::baseline: return "baseline";
        case MemoryVariant::static_dense: return "static_dense";
        case MemoryVariant::muddformer: return "muddformer";
    }
    return "?";
}

MemoryRow activation_memory(const ArchSpec& spec, MemoryVariant variant) {
    spec.validate();
    const i128 btd = i128(spec.B) * spec.T * spec.D;
    // Baseline elements: 2*L*B*T*D checkpointed hidden states plus
    // B*T*D*(34 + 6*N*T/D) = 34*B*T*D + 6*N*B*T^2 for one recomputed layer.
    const i128 base = i128(2) * spec.L * btd + i128(34) * btd +
                      i128(6) * spec.N_heads * spec.B * spec.T * spec.T;
    i128 extra = 0;
    switch (variant) {
        case MemoryVariant::baseline: break;
        case MemoryVariant::static_dense: extra = i128(2) * spec.L * btd; break;
        case MemoryVariant::muddformer: extra = i128(2) * spec.L * btd + i128(6) * btd; break;
    }
    MemoryRow row;
    row.variant = variant;
    row.bytes = narrow(i128(2) * (base + extra), "activation_memory");
    row.extra_ratio = reduce(extra, base, "activation_memory");
    return row;
}

ComplexityReport analyze_arch(const ArchSpec& spec) {
    spec.validate();
    ComplexityReport r;
    r.spec = spec;
    r.baseline_params = baseline_param_count(spec);
    r.baseline_flops = baseline_flop_count(spec);
    const Overhead p = extra_params(spec);
    const Overhead f = extra_flops(spec);
    r.extra_params_exact = p.count;
    r.extra_flops_exact = f.count;
    r.ratio_params_exact = p.exact;
    r.ratio_flops_exact = f.exact;
    r.ratio_params_approx = p.approx;
    r.ratio_flops_approx = f.approx;
    r.memory = {activation_memory(spec, MemoryVariant::baseline),
                activation_memory(spec, MemoryVariant::static_dense),
                activation_memory(spec, MemoryVariant::muddformer)};
    return r;
}

std::string format_trimmed(double value, int max_decimals) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", max_decimals, value);
    std::string s(buf);
    if (s.find('.') != std::string::npos) {
        while (!s.empty() && s.back() == '0') s.pop_back();
        if (!s.empty() && s.back() == '.') s.pop_back();
    }
    return s;
}

std::string format_percent(double fraction) { return format_trimmed(fraction * 100.0, 2) + "%"; }

std::string format_eta(double eta) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.4f", eta);
    return buf;
}

namespace {

std::string pad(const std::string& s, size_t width) {
    return s.size() >= width ? s : std::string(width - s.size(), ' ') + s;
}

std::string format_table(const ComplexityReport& r) {
    std::ostringstream out;
    const std::vector<std::pair<std::string, std::string>> cols = {
        {"L", std::to_string(r.spec.L)},
        {"D", std::to_string(r.spec.D)},
        {"T", std::to_string(r.spec.T)},
        {"eta", format_eta(r.spec.eta())},
        {"rho", format_trimmed(r.spec.rho(), 2)},
        {"d_params", format_percent(r.ratio_params_approx)},
        {"d_flops", format_percent(r.ratio_flops_approx)},
        {"d_params_exact", format_percent(r.ratio_params_exact.value())},
        {"d_flops_exact", format_percent(r.ratio_flops_exact.value())},
    };
    std::string header, row;
    for (const auto& [name, value] : cols) {
        const size_t w = std::max(name.size(), value.size()) + 2;
        header += pad(name, w);
        row += pad(value, w);
    }
    out << header << "\n" << row << "\n\n";
    out << "activation memory (16-bit, B=" << r.spec.B << ", N=" << r.spec.N_heads << "):\n";
    for (const MemoryRow& m : r.memory) {
        out << pad(memory_variant_name(m.variant), 14) << pad(std::to_string(m.bytes), 18)
            << " bytes  +" << format_percent(m.extra_ratio.value()) << "\n";
    }
    return out.str();
}

nlohmann::json report_json(const ComplexityReport& r) {
    nlohmann::json j;
    j["spec"] = {{"L", r.spec.L},           {"D", r.spec.D}, {"T", r.spec.T},
                 {"N_heads", r.spec.N_heads}, {"B", r.spec.B}, {"C", r.spec.C}};
    j["eta"] = r.spec.eta();
    j["rho"] = r.spec.rho();
    j["eta_printed"] = format_eta(r.spec.eta());
    j["rho_printed"] = format_trimmed(r.spec.rho(), 2);
    j["baseline_params"] = r.baseline_params;
    j["baseline_flops"] = r.baseline_flops;
    j["extra_params"] = {{"count", r.extra_params_exact},
                         {"exact", r.ratio_params_exact.value()},
                         {"exact_num", r.ratio_params_exact.num},
                         {"exact_den", r.ratio_params_exact.den},
                         {"approx", r.ratio_params_approx},
                         {"exact_printed", format_percent(r.ratio_params_exact.value())},
                         {"approx_printed", format_percent(r.ratio_params_approx)}};
    j["extra_flops"] = {{"count", r.extra_flops_exact},
                        {"exact", r.ratio_flops_exact.value()},
                        {"exact_num", r.ratio_flops_exact.num},
                        {"exact_den", r.ratio_flops_exact.den},
                        {"approx", r.ratio_flops_approx},
                        {"exact_printed", format_percent(r.ratio_flops_exact.value())},
                        {"approx_printed", format_percent(r.ratio_flops_approx)}};
    j["memory"] = nlohmann::json::array();
    for (const MemoryRow& m : r.memory) {
        j["memory"].push_back({{"variant", memory_variant_name(m.variant)},
                               {"bytes", m.bytes},
                               {"extra_ratio", m.extra_ratio.value()},
                               {"extra_ratio_num", m.extra_ratio.num},
                               {"extra_ratio_den", m.extra_ratio.den},
                               {"extra_ratio_printed", format_percent(m.extra_ratio.value())}});
    }
    return j;
}

std::string format_csv(const ComplexityReport& r) {
    std::ostringstream out;
    out << "L,D,T,N,B,eta,rho,d_params,d_flops,d_params_exact,d_flops_exact,"
           "extra_params,extra_flops,baseline_params,baseline_flops,"
           "mem_baseline_bytes,mem_static_dense_bytes,mem_muddformer_bytes,"
           "mem_static_dense_ratio,mem_muddformer_ratio\n";
    out << r.spec.L << ',' << r.spec.D << ',' << r.spec.T << ',' << r.spec.N_heads << ','
        << r.spec.B << ',' << format_eta(r.spec.eta()) << ',' << format_trimmed(r.spec.rho(), 2)
        << ',' << format_percent(r.ratio_params_approx) << ','
        << format_percent(r.ratio_flops_approx) << ','
        << format_percent(r.ratio_params_exact.value()) << ','
        << format_percent(r.ratio_flops_exact.value()) << ',' << r.extra_params_exact << ','
        << r.extra_flops_exact << ',' << r.baseline_params << ',' << r.baseline_flops << ','
        << r.memory[0].bytes << ',' << r.memory[1].bytes << ',' << r.memory[2].bytes << ','
        << format_percent(r.memory[1].extra_ratio.value()) << ','
        << format_percent(r.memory[2].extra_ratio.value()) << "\n";
    return out.str();
}

}  // namespace

std::string format_report(const ComplexityReport& r, const std::string& format) {
    if (format == "table") return format_table(r);
    if (format == "json") return report_json(r).dump(2) + "\n";
    if (format == "csv") return format_csv(r);
    throw std::invalid_argument("unknown report format '" + format +
                                "' (expected table, json, or csv)");
}

template <typename S>
int64_t flop_count_model(Model<S>& m, std::span<const int32_t> tokens, int64_t B, int64_t T) {
    FlopScope scope;
    model_forward<S>(m, tokens, B, T);
    return scope.count();
}

template int64_t flop_count_model<float>(Model<float>&, std::span<const int32_t>, int64_t,
                                         int64_t);
template int64_t flop_count_model<double>(Model<double>&, std::span<const int32_t>, int64_t,
                                          int64_t);

}  // namespace mudd
