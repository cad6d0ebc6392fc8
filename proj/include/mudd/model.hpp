#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mudd/mudd.hpp"

namespace mudd {

enum class ModelVariant { baseline, static_dense, dynamic_dense, multiway_static, multiway_dynamic };

std::string variant_name(ModelVariant v);
ModelVariant parse_variant(const std::string& s);

struct ModelConfig {
    int64_t L = 6, D = 128, H = 4, V = 256, T_max = 256;
    int64_t Dff = 0;  // 0 -> default_ffn_dim(D)
    ModelVariant variant = ModelVariant::baseline;
    bool way_q = true, way_k = true, way_v = true, way_r = true;
    bool realloc = false;
    bool prepost = false;
    ConnectionSchedule schedule{};

    int64_t ffn_base() const { return Dff > 0 ? Dff : default_ffn_dim(D); }
    std::vector<int64_t> ffn_dims() const;
    bool uses_da() const { return variant != ModelVariant::baseline; }
    bool is_multiway() const {
        return variant == ModelVariant::multiway_static || variant == ModelVariant::multiway_dynamic;
    }
    bool is_dynamic() const {
        return variant == ModelVariant::dynamic_dense || variant == ModelVariant::multiway_dynamic;
    }
    void validate() const;  // throws std::invalid_argument with a diagnostic
    bool operator==(const ModelConfig&) const = default;
};

// Ablation and sparse-schedule names -> configs. Accepts ASCII '-' for the
// minus-ablation names.
ModelConfig ablation_variant(const ModelConfig& base, const std::string& name);
std::vector<std::string> ablation_suite();

template <typename S>
struct LayerTrace {
    Array<S> embedding;                           // X_0 (B,T,D)
    std::vector<std::array<Array<S>, 4>> inputs;  // streams feeding block i (q,k,v,r)
    std::vector<Array<S>> block_out;              // X_i (B,T,D)
    std::vector<Array<S>> attn;                   // (B,H,T,T)
    std::vector<Array<S>> dyn_weights;            // (B,T,K) per dynamic DA; empty otherwise
    std::vector<std::vector<int64_t>> sources;    // S_i per layer; empty if no DA
    std::vector<int64_t> ways;                    // C per layer; 0 if no DA
};

template <typename S>
struct Model {
    ModelConfig cfg;
    uint64_t seed = 0;
    Parameter<S> embed_table;  // (V, D)
    Parameter<S> unembed;      // (D, V)
    Parameter<S> final_norm;   // (D)
    std::vector<BlockParams<S>> blocks;
    std::map<int64_t, DAParams<S>> das;  // by 1-based layer index

    std::vector<Parameter<S>*> parameters();  // stable order
    int64_t param_count();
    int64_t da_param_count();
    int64_t nonembedding_param_count();
    void zero_grads();
};

template <typename S>
Model<S> build_model(const ModelConfig& cfg, uint64_t seed);

// Parameter accounting from shapes alone (no allocation), so large configs
// can be audited. Totals match a built model's counters exactly.
struct ParamCounts {
    int64_t embed = 0;       // input embedding
    int64_t unembed = 0;     // output projection
    int64_t final_norm = 0;  // pre-unembed norm scale
    int64_t blocks = 0;      // attention + FFN + block norms
    int64_t da = 0;          // all DA modules
    int64_t total() const { return embed + unembed + final_norm + blocks + da; }
    int64_t nonembedding() const { return blocks + da; }
};
ParamCounts model_param_counts(const ModelConfig& cfg);

// A recorded forward pass; keep the tape alive to run backward on the loss.
template <typename S>
struct ForwardRun {
    Tape<S> tape;
    typename Tape<S>::Val logits;  // (B, T, V)
    typename Tape<S>::Val loss;    // mean cross-entropy; only if targets given
    bool has_loss = false;
};

template <typename S>
ForwardRun<S> model_forward(Model<S>& m, std::span<const int32_t> tokens, int64_t B, int64_t T,
                            std::span<const int32_t> targets = {},
                            LayerTrace<S>* trace = nullptr);

template <typename S>
Array<S> forward_logits(Model<S>& m, std::span<const int32_t> tokens, int64_t B, int64_t T);

// Incremental decoding state: per-layer K/V caches plus nothing else — DA
// weights depend only on the current position's history column.
template <typename S>
struct DecodeCache {
    int64_t pos = 0;
    std::vector<Array<S>> k_cache;  // per layer (H, T_max, d); rows [0, pos) valid
    std::vector<Array<S>> v_cache;
};

template <typename S>
DecodeCache<S> make_decode_cache(const Model<S>& m);

// Feeds one token, returns next-token logits (V). Rejects overflow past T_max.
template <typename S>
Array<S> decode_step(Model<S>& m, DecodeCache<S>& cache, int32_t token);

// Checkpoints: <prefix>.json manifest + <prefix>.bin little-endian blob.
template <typename S>
void save_checkpoint(Model<S>& m, const std::string& prefix);
template <typename S>
Model<S> load_checkpoint(const std::string& prefix);
// dtype string ("f32"/"f64") from a manifest, for runtime dispatch.
std::string checkpoint_dtype(const std::string& prefix);

}  // namespace mudd
