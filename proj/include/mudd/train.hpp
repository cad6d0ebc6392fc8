#pragma once

// Byte-level language-model training harness: flat key=value configs, the
// warmup+cosine learning-rate schedule, AdamW with decoupled decay and global
// gradient clipping, a seeded chunk sampler over raw byte corpora, and the
// train/evaluate/generate entry points the CLI wraps.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mudd/model.hpp"

namespace mudd {

struct TrainConfig {
    ModelConfig model;
    int64_t steps = 2000;
    int64_t batch_size = 8;   // sequences per step
    int64_t seq_len = 256;    // tokens per sequence
    double peak_lr = 3e-3;
    double warmup_fraction = 0.01;   // of total steps, linear ramp
    double final_lr_fraction = 0.1;  // cosine decays to this times peak
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.1;
    double grad_clip = 1.0;  // global norm
    uint64_t seed = 0;
    std::string train_corpus;
    std::string val_corpus;  // empty: the last tenth of the train bytes
    int64_t eval_interval = 100;
    int64_t eval_batches = 8;  // batches per validation pass
    std::string out_dir = "out";
    std::string dtype = "f32";  // f32 | f64

    int64_t warmup_steps() const;  // max(1, round(steps * warmup_fraction))
    void validate() const;
};

// Flat `key = value` text: one pair per line, '#' comments, optional quotes
// around strings. Keys mirror the TrainConfig/ModelConfig field names.
TrainConfig parse_train_config_text(const std::string& text);
TrainConfig parse_train_config(const std::string& path);
std::string train_config_text(const TrainConfig& cfg);

// Linear warmup to peak over the first warmup_steps() steps, cosine decay to
// final_lr_fraction * peak at the last step, constant afterwards. step is
// zero-based: lr(0) is one warmup increment above zero.
double lr_schedule(int64_t step, const TrainConfig& cfg);

// AdamW moments, one pair of arrays per parameter in model.parameters() order.
template <typename S>
struct AdamState {
    int64_t t = 0;  // completed updates
    std::vector<Array<S>> m, v;
};

template <typename S>
AdamState<S> init_adam_state(Model<S>& model);

// One update from the gradients stored on the model's parameters: clip to
// grad_clip global norm, bias-corrected moments, decoupled weight decay on
// parameters flagged for it. Returns false — changing nothing — if any
// gradient is non-finite.
template <typename S>
bool adamw_step(Model<S>& model, AdamState<S>& state, double lr, const TrainConfig& cfg);

// --- corpora -----------------------------------------------------------

std::vector<uint8_t> load_corpus(const std::string& path);

// Deterministic pseudo-English filler text: common words under a Zipf-like
// draw, sentence casing, commas, periods and paragraph breaks. Useful where a
// real corpus is not checked in; the byte statistics are learnable.
std::vector<uint8_t> make_synthetic_corpus(uint64_t seed, int64_t bytes);

// Fixed-length chunks of seq_len+1 bytes (input row plus the shifted target)
// on a seq_len stride, drawn in seeded shuffled order; reshuffles on epoch
// end with no other boundary handling. Rejects corpora smaller than a batch.
class CorpusSampler {
  public:
    CorpusSampler(std::span<const uint8_t> bytes, int64_t seq_len, int64_t batch_size,
                  uint64_t seed);

    int64_t num_chunks() const { return num_chunks_; }
    // Fills batch_size*seq_len inputs and their one-ahead targets; optionally
    // reports which chunk each row came from.
    void next_batch(std::vector<int32_t>& inputs, std::vector<int32_t>& targets,
                    std::vector<int64_t>* chunks = nullptr);

  private:
    void reshuffle();

    std::span<const uint8_t> bytes_;
    int64_t seq_len_;
    int64_t batch_size_;
    uint64_t seed_;
    int64_t num_chunks_;
    int64_t epoch_ = 0;
    size_t cursor_ = 0;
    std::vector<int64_t> order_;
};

// --- loops --------------------------------------------------------------

struct MetricsRow {
    int64_t step = 0;       // 1-based
    double train_loss = 0;  // loss of the batch consumed at this step
    double val_loss = 0;    // NaN when this step ran no evaluation
    double lr = 0;
    int64_t tokens_seen = 0;
    int64_t wall_ms = 0;  // since training started
};
std::string metrics_csv_header();
std::string metrics_csv_row(const MetricsRow& row);

struct TrainResult {
    std::vector<MetricsRow> rows;
    double final_val_loss = 0;
    double best_val_loss = 0;
    std::string metrics_path;
    std::string last_prefix;  // checkpoint saved at the end
    std::string best_prefix;  // checkpoint at the best validation loss
};

// Runs the full loop: writes out_dir/metrics.csv and the best/last
// checkpoints; deterministic for a given config and seed (wall_ms aside).
// on_row, when set, sees every metrics row as it is produced.
TrainResult train(const TrainConfig& cfg,
                  const std::function<void(const MetricsRow&)>& on_row = {});

struct EvalResult {
    double loss = 0;  // mean token-level cross-entropy
    double perplexity = 0;
    int64_t tokens = 0;
};

// Evaluates on in-order full chunks of the byte corpus; max_chunks = 0 means
// all of them. Rejects bytes outside the model vocabulary.
template <typename S>
EvalResult evaluate_model(Model<S>& m, std::span<const uint8_t> bytes, int64_t seq_len,
                          int64_t batch_size, int64_t max_chunks = 0);
EvalResult evaluate_checkpoint(const std::string& prefix, const std::string& corpus_path,
                               int64_t batch_size = 8);

// --- generation ----------------------------------------------------------

struct GenerateOptions {
    std::string mode = "greedy";  // greedy | temperature | top_k
    double temperature = 1.0;     // 0 falls back to greedy selection
    int64_t top_k = 0;
    uint64_t seed = 0;
};

// Greedy or sampled continuation of `n` bytes via incremental decoding.
// Requires a non-empty prompt and prompt+n-1 tokens within T_max.
template <typename S>
std::vector<uint8_t> generate_bytes(Model<S>& m, std::span<const uint8_t> prompt, int64_t n,
                                    const GenerateOptions& opt);
std::vector<uint8_t> generate_from_checkpoint(const std::string& prefix,
                                              std::span<const uint8_t> prompt, int64_t n,
                                              const GenerateOptions& opt);

}  // namespace mudd
