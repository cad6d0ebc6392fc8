#include "mudd/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace mudd {

int64_t TrainConfig::warmup_steps() const {
    return std::max<int64_t>(1, std::llround(double(steps) * warmup_fraction));
}

void TrainConfig::validate() const {
    auto fail = [](const std::string& msg) { throw std::invalid_argument("TrainConfig: " + msg); };
    model.validate();
    if (steps < 1) fail("steps must be >= 1");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (seq_len < 1) fail("seq_len must be >= 1");
    if (seq_len > model.T_max) fail("seq_len exceeds the model's T_max");
    if (!(peak_lr > 0)) fail("peak_lr must be positive");
    if (!(warmup_fraction > 0) || warmup_fraction >= 1) fail("warmup_fraction must be in (0, 1)");
    if (final_lr_fraction < 0 || final_lr_fraction > 1)
        fail("final_lr_fraction must be in [0, 1]");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) fail("betas must be in [0, 1)");
    if (!(eps > 0)) fail("eps must be positive");
    if (weight_decay < 0) fail("weight_decay must be >= 0");
    if (!(grad_clip > 0)) fail("grad_clip must be positive");
    if (eval_interval < 1) fail("eval_interval must be >= 1");
    if (eval_batches < 1) fail("eval_batches must be >= 1");
    if (dtype != "f32" && dtype != "f64") fail("dtype must be f32 or f64");
}

double lr_schedule(int64_t step, const TrainConfig& cfg) {
    if (step < 0) throw std::invalid_argument("lr_schedule: negative step");
    const int64_t w = cfg.warmup_steps();
    if (step < w) return cfg.peak_lr * double(step + 1) / double(w);
    const double floor_lr = cfg.final_lr_fraction * cfg.peak_lr;
    if (step >= cfg.steps - 1) return floor_lr;
    const double progress = double(step - w + 1) / double(cfg.steps - w);
    return floor_lr + (cfg.peak_lr - floor_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// --- flat key=value config ------------------------------------------------

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

std::string unquote(std::string v) {
    if (v.size() >= 2 && ((v.front() == '"' && v.back() == '"') ||
                          (v.front() == '\'' && v.back() == '\'')))
        return v.substr(1, v.size() - 2);
    return v;
}

int64_t parse_int(const std::string& key, const std::string& v) {
    size_t used = 0;
    int64_t out = 0;
    try {
        out = std::stoll(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != v.size()) throw std::invalid_argument("config: bad integer for " + key + ": " + v);
    return out;
}

double parse_double(const std::string& key, const std::string& v) {
    size_t used = 0;
    double out = 0;
    try {
        out = std::stod(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != v.size()) throw std::invalid_argument("config: bad number for " + key + ": " + v);
    return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw std::invalid_argument("config: bad boolean for " + key + ": " + v);
}

}  // namespace

TrainConfig parse_train_config_text(const std::string& text) {
    TrainConfig cfg;
    bool saw_t_max = false, saw_seq_len = false;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (size_t hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config: expected key = value, got: " + line);
        const std::string key = trim(line.substr(0, eq));
        const std::string val = unquote(trim(line.substr(eq + 1)));
        if (key.empty() || val.empty())
            throw std::invalid_argument("config: empty key or value in: " + line);

        if (key == "variant") cfg.model.variant = parse_variant(val);
        else if (key == "L") cfg.model.L = parse_int(key, val);
        else if (key == "D") cfg.model.D = parse_int(key, val);
        else if (key == "H") cfg.model.H = parse_int(key, val);
        else if (key == "V") cfg.model.V = parse_int(key, val);
        else if (key == "T_max") { cfg.model.T_max = parse_int(key, val); saw_t_max = true; }
        else if (key == "Dff") cfg.model.Dff = parse_int(key, val);
        else if (key == "realloc") cfg.model.realloc = parse_bool(key, val);
        else if (key == "prepost") cfg.model.prepost = parse_bool(key, val);
        else if (key == "schedule") cfg.model.schedule = ConnectionSchedule::parse(val);
        else if (key == "way_q") cfg.model.way_q = parse_bool(key, val);
        else if (key == "way_k") cfg.model.way_k = parse_bool(key, val);
        else if (key == "way_v") cfg.model.way_v = parse_bool(key, val);
        else if (key == "way_r") cfg.model.way_r = parse_bool(key, val);
        else if (key == "steps") cfg.steps = parse_int(key, val);
        else if (key == "batch_size") cfg.batch_size = parse_int(key, val);
        else if (key == "seq_len") { cfg.seq_len = parse_int(key, val); saw_seq_len = true; }
        else if (key == "peak_lr") cfg.peak_lr = parse_double(key, val);
        else if (key == "warmup_fraction") cfg.warmup_fraction = parse_double(key, val);
        else if (key == "final_lr_fraction") cfg.final_lr_fraction = parse_double(key, val);
        else if (key == "beta1") cfg.beta1 = parse_double(key, val);
        else if (key == "beta2") cfg.beta2 = parse_double(key, val);
        else if (key == "eps") cfg.eps = parse_double(key, val);
        else if (key == "weight_decay") cfg.weight_decay = parse_double(key, val);
        else if (key == "grad_clip") cfg.grad_clip = parse_double(key, val);
        else if (key == "seed") cfg.seed = static_cast<uint64_t>(parse_int(key, val));
        else if (key == "train_corpus") cfg.train_corpus = val;
        else if (key == "val_corpus") cfg.val_corpus = val;
        else if (key == "eval_interval") cfg.eval_interval = parse_int(key, val);
        else if (key == "eval_batches") cfg.eval_batches = parse_int(key, val);
        else if (key == "out_dir") cfg.out_dir = val;
        else if (key == "dtype") cfg.dtype = val;
        else throw std::invalid_argument("config: unknown key '" + key + "'");
    }
    // A context window no one asked for defaults to the training length.
    if (saw_seq_len && !saw_t_max) cfg.model.T_max = cfg.seq_len;
    cfg.validate();
    return cfg;
}

TrainConfig parse_train_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_train_config_text(ss.str());
}

std::string train_config_text(const TrainConfig& cfg) {
    std::ostringstream o;
    auto num = [](double v) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        return std::string(buf);
    };
    o << "variant = " << variant_name(cfg.model.variant) << "\n";
    o << "L = " << cfg.model.L << "\n";
    o << "D = " << cfg.model.D << "\n";
    o << "H = " << cfg.model.H << "\n";
    o << "V = " << cfg.model.V << "\n";
    o << "T_max = " << cfg.model.T_max << "\n";
    o << "Dff = " << cfg.model.Dff << "\n";
    o << "realloc = " << (cfg.model.realloc ? "true" : "false") << "\n";
    o << "prepost = " << (cfg.model.prepost ? "true" : "false") << "\n";
    o << "schedule = " << cfg.model.schedule.name() << "\n";
    o << "way_q = " << (cfg.model.way_q ? "true" : "false") << "\n";
    o << "way_k = " << (cfg.model.way_k ? "true" : "false") << "\n";
    o << "way_v = " << (cfg.model.way_v ? "true" : "false") << "\n";
    o << "way_r = " << (cfg.model.way_r ? "true" : "false") << "\n";
    o << "steps = " << cfg.steps << "\n";
    o << "batch_size = " << cfg.batch_size << "\n";
    o << "seq_len = " << cfg.seq_len << "\n";
    o << "peak_lr = " << num(cfg.peak_lr) << "\n";
    o << "warmup_fraction = " << num(cfg.warmup_fraction) << "\n";
    o << "final_lr_fraction = " << num(cfg.final_lr_fraction) << "\n";
    o << "beta1 = " << num(cfg.beta1) << "\n";
    o << "beta2 = " << num(cfg.beta2) << "\n";
    o << "eps = " << num(cfg.eps) << "\n";
    o << "weight_decay = " << num(cfg.weight_decay) << "\n";
    o << "grad_clip = " << num(cfg.grad_clip) << "\n";
    o << "seed = " << cfg.seed << "\n";
    if (!cfg.train_corpus.empty()) o << "train_corpus = " << cfg.train_corpus << "\n";
    if (!cfg.val_corpus.empty()) o << "val_corpus = " << cfg.val_corpus << "\n";
    o << "eval_interval = " << cfg.eval_interval << "\n";
    o << "eval_batches = " << cfg.eval_batches << "\n";
    o << "out_dir = " << cfg.out_dir << "\n";
    o << "dtype = " << cfg.dtype << "\n";
    return o.str();
}

// --- optimizer --------------------------------------------------------------

template <typename S>
AdamState<S> init_adam_state(Model<S>& model) {
    AdamState<S> st;
    for (Parameter<S>* p : model.parameters()) {
        st.m.emplace_back(p->value.shape);
        st.v.emplace_back(p->value.shape);
    }
    return st;
}

template <typename S>
bool adamw_step(Model<S>& model, AdamState<S>& state, double lr, const TrainConfig& cfg) {
    auto params = model.parameters();
    if (state.m.size() != params.size() || state.v.size() != params.size())
        throw std::invalid_argument("adamw_step: state does not match the model");

    double sq = 0.0;
    for (Parameter<S>* p : params) {
        for (int64_t i = 0; i < p->grad.size(); ++i) {
            const double g = double(p->grad.data[i]);
            if (!std::isfinite(g)) return false;
            sq += g * g;
        }
    }
    const double gnorm = std::sqrt(sq);
    const double scale = gnorm > cfg.grad_clip ? cfg.grad_clip / gnorm : 1.0;

    const int64_t t = state.t + 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, double(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, double(t));
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Parameter<S>& p = *params[pi];
        if (state.m[pi].shape != p.value.shape)
            throw std::invalid_argument("adamw_step: state shape mismatch for " + p.name);
        Array<S>& m = state.m[pi];
        Array<S>& v = state.v[pi];
        for (int64_t i = 0; i < p.value.size(); ++i) {
            const double g = double(p.grad.data[i]) * scale;
            const double mi = cfg.beta1 * double(m.data[i]) + (1.0 - cfg.beta1) * g;
            const double vi = cfg.beta2 * double(v.data[i]) + (1.0 - cfg.beta2) * g * g;
            m.data[i] = static_cast<S>(mi);
            v.data[i] = static_cast<S>(vi);
            const double old = double(p.value.data[i]);
            double next = old - lr * ((mi / bc1) / (std::sqrt(vi / bc2) + cfg.eps));
            if (p.decay) next -= lr * cfg.weight_decay * old;
            p.value.data[i] = static_cast<S>(next);
        }
    }
    state.t = t;
    return true;
}

// --- corpora -----------------------------------------------------------------

std::vector<uint8_t> load_corpus(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("corpus: cannot open " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                               std::istreambuf_iterator<char>());
    return bytes;
}

namespace {

// Roughly the most common English words; enough variety that byte statistics
// have word-, sentence- and paragraph-level structure to learn.
const char* const kWords[] = {
    "the", "of", "and", "a", "to", "in", "is", "you", "that", "it", "he", "was", "for", "on",
    "are", "as", "with", "his", "they", "I", "at", "be", "this", "have", "from", "or", "one",
    "had", "by", "word", "but", "not", "what", "all", "were", "we", "when", "your", "can",
    "said", "there", "use", "an", "each", "which", "she", "do", "how", "their", "if", "will",
    "up", "other", "about", "out", "many", "then", "them", "these", "so", "some", "her",
    "would", "make", "like", "him", "into", "time", "has", "look", "two", "more", "write",
    "go", "see", "number", "no", "way", "could", "people", "my", "than", "first", "water",
    "been", "call", "who", "oil", "its", "now", "find", "long", "down", "day", "did", "get",
    "come", "made", "may", "part", "over", "new", "sound", "take", "only", "little", "work",
    "know", "place", "year", "live", "me", "back", "give", "most", "very", "after", "thing",
    "our", "just", "name", "good", "sentence", "man", "think", "say", "great", "where",
    "help", "through", "much", "before", "line", "right", "too", "mean", "old", "any",
    "same", "tell", "boy", "follow", "came", "want", "show", "also", "around", "form",
    "three", "small", "set", "put", "end", "does", "another", "well", "large", "must",
    "big", "even", "such", "because", "turn", "here", "why", "ask", "went", "men", "read",
    "need", "land", "different", "home", "us", "move", "try", "kind", "hand", "picture",
    "again", "change", "off", "play", "spell", "air", "away", "animal", "house", "point",
    "page", "letter", "mother", "answer", "found", "study", "still", "learn", "should",
    "world", "high", "every", "near", "add", "food", "between", "own", "below", "country",
    "plant", "last", "school", "father", "keep", "tree", "never", "start", "city", "earth",
    "eye", "light", "thought", "head", "under", "story", "saw", "left", "few", "while",
    "along", "might", "close", "something", "seem", "next", "hard", "open", "example",
    "begin", "life", "always", "those", "both", "paper", "together", "got", "group",
    "often", "run", "important", "until", "children", "side", "feet", "car", "mile",
    "night", "walk", "white", "sea", "began", "grow", "took", "river", "four", "carry",
    "state", "once", "book", "hear", "stop", "without", "second", "later", "miss", "idea",
    "enough", "eat", "face", "watch", "far", "really", "almost", "let", "above", "girl",
    "sometimes", "mountain", "cut", "young", "talk", "soon", "list", "song", "being",
    "leave", "family", "body", "music", "color", "stand", "sun", "question", "fish",
    "area", "mark", "dog", "horse", "bird", "problem", "complete", "room", "knew",
    "since", "ever", "piece", "told", "usually", "friend", "easy", "heard", "order",
    "red", "door", "sure", "become", "top", "ship", "across", "today", "during", "short",
    "better", "best", "however", "low", "hour", "black", "product", "happen", "measure",
    "remember", "early", "wave", "reach", "listen", "wind", "rock", "space", "covered",
    "fast", "several", "hold", "himself", "toward", "five", "step", "morning", "passed",
    "vowel", "true", "hundred", "against", "pattern", "numeral", "table", "north", "slow",
    "money", "map", "farm", "pull", "draw", "voice", "cold", "cried", "plan", "notice",
    "south", "sing", "war", "ground", "fall", "king", "town", "unit", "figure", "certain",
    "field", "travel", "wood", "fire", "upon",
};
constexpr size_t kWordCount = sizeof(kWords) / sizeof(kWords[0]);

size_t zipf_word(RngState& rng, const std::vector<double>& cumulative) {
    const double u = rng.next_double() * cumulative.back();
    const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
    return std::min(kWordCount - 1,
                    static_cast<size_t>(std::distance(cumulative.begin(), it)));
}

}  // namespace

std::vector<uint8_t> make_synthetic_corpus(uint64_t seed, int64_t bytes) {
    if (bytes < 0) throw std::invalid_argument("make_synthetic_corpus: negative size");
    std::vector<double> cumulative(kWordCount);
    double acc = 0.0;
    for (size_t i = 0; i < kWordCount; ++i) {
        acc += 1.0 / double(i + 1);
        cumulative[i] = acc;
    }
    RngState rng = RngState(seed).stream("corpus");
    std::string text;
    text.reserve(static_cast<size_t>(bytes) + 128);
    while (text.size() < static_cast<size_t>(bytes)) {
        const int sentences = 3 + static_cast<int>(rng.next_below(5));
        for (int s = 0; s < sentences; ++s) {
            const int words = 4 + static_cast<int>(rng.next_below(11));
            for (int w = 0; w < words; ++w) {
                std::string word = kWords[zipf_word(rng, cumulative)];
                if (w == 0) word[0] = static_cast<char>(std::toupper(word[0]));
                text += word;
                if (w + 1 < words) {
                    if (rng.next_double() < 0.12) text += ',';
                    text += ' ';
                }
            }
            text += '.';
            if (s + 1 < sentences) text += ' ';
        }
        text += '\n';
    }
    text.resize(static_cast<size_t>(bytes));
    return std::vector<uint8_t>(text.begin(), text.end());
}

CorpusSampler::CorpusSampler(std::span<const uint8_t> bytes, int64_t seq_len, int64_t batch_size,
                             uint64_t seed)
    : bytes_(bytes), seq_len_(seq_len), batch_size_(batch_size), seed_(seed) {
    if (seq_len < 1 || batch_size < 1)
        throw std::invalid_argument("CorpusSampler: seq_len and batch_size must be >= 1");
    num_chunks_ = bytes.empty() ? 0 : (static_cast<int64_t>(bytes.size()) - 1) / seq_len;
    if (num_chunks_ < batch_size)
        throw std::invalid_argument(
            "CorpusSampler: corpus too small for one batch (" + std::to_string(num_chunks_) +
            " chunks of " + std::to_string(seq_len + 1) + " bytes, need " +
            std::to_string(batch_size) + ")");
    reshuffle();
}

void CorpusSampler::reshuffle() {
    order_.resize(static_cast<size_t>(num_chunks_));
    std::iota(order_.begin(), order_.end(), int64_t(0));
    RngState rng = RngState(seed_).stream("epoch" + std::to_string(epoch_));
    for (int64_t i = num_chunks_ - 1; i > 0; --i)
        std::swap(order_[static_cast<size_t>(i)],
                  order_[static_cast<size_t>(rng.next_below(static_cast<uint64_t>(i + 1)))]);
    ++epoch_;
    cursor_ = 0;
}

void CorpusSampler::next_batch(std::vector<int32_t>& inputs, std::vector<int32_t>& targets,
                               std::vector<int64_t>* chunks) {
    inputs.resize(static_cast<size_t>(batch_size_ * seq_len_));
    targets.resize(static_cast<size_t>(batch_size_ * seq_len_));
    if (chunks) chunks->clear();
    for (int64_t b = 0; b < batch_size_; ++b) {
        if (cursor_ == order_.size()) reshuffle();
        const int64_t chunk = order_[cursor_++];
        if (chunks) chunks->push_back(chunk);
        const int64_t start = chunk * seq_len_;
        for (int64_t t = 0; t < seq_len_; ++t) {
            inputs[static_cast<size_t>(b * seq_len_ + t)] = bytes_[static_cast<size_t>(start + t)];
            targets[static_cast<size_t>(b * seq_len_ + t)] =
                bytes_[static_cast<size_t>(start + t + 1)];
        }
    }
}

// --- metrics ------------------------------------------------------------------

std::string metrics_csv_header() { return "step,train_loss,val_loss,lr,tokens_seen,wall_ms"; }

std::string metrics_csv_row(const MetricsRow& row) {
    char buf[192];
    std::string val;
    if (!std::isnan(row.val_loss)) {
        char vb[32];
        std::snprintf(vb, sizeof(vb), "%.6f", row.val_loss);
        val = vb;
    }
    std::snprintf(buf, sizeof(buf), "%lld,%.6f,%s,%.8g,%lld,%lld",
                  static_cast<long long>(row.step), row.train_loss, val.c_str(), row.lr,
                  static_cast<long long>(row.tokens_seen), static_cast<long long>(row.wall_ms));
    return buf;
}

// --- evaluation -----------------------------------------------------------------

namespace {

template <typename S>
void check_vocab(std::span<const uint8_t> bytes, int64_t V, const char* what) {
    for (uint8_t b : bytes)
        if (static_cast<int64_t>(b) >= V)
            throw std::invalid_argument(std::string(what) + ": corpus byte " + std::to_string(b) +
                                        " outside the model vocabulary of " + std::to_string(V));
}

}  // namespace

template <typename S>
EvalResult evaluate_model(Model<S>& m, std::span<const uint8_t> bytes, int64_t seq_len,
                          int64_t batch_size, int64_t max_chunks) {
    if (seq_len < 1 || seq_len > m.cfg.T_max)
        throw std::invalid_argument("evaluate_model: seq_len outside [1, T_max]");
    if (batch_size < 1) throw std::invalid_argument("evaluate_model: batch_size must be >= 1");
    check_vocab<S>(bytes, m.cfg.V, "evaluate_model");
    int64_t chunks = bytes.empty() ? 0 : (static_cast<int64_t>(bytes.size()) - 1) / seq_len;
    if (max_chunks > 0) chunks = std::min(chunks, max_chunks);
    if (chunks < 1) throw std::invalid_argument("evaluate_model: corpus smaller than one chunk");

    double total = 0.0;
    int64_t tokens = 0;
    std::vector<int32_t> in, tgt;
    for (int64_t c0 = 0; c0 < chunks; c0 += batch_size) {
        const int64_t B = std::min(batch_size, chunks - c0);
        in.resize(static_cast<size_t>(B * seq_len));
        tgt.resize(static_cast<size_t>(B * seq_len));
        for (int64_t b = 0; b < B; ++b) {
            const int64_t start = (c0 + b) * seq_len;
            for (int64_t t = 0; t < seq_len; ++t) {
                in[static_cast<size_t>(b * seq_len + t)] = bytes[static_cast<size_t>(start + t)];
                tgt[static_cast<size_t>(b * seq_len + t)] =
                    bytes[static_cast<size_t>(start + t + 1)];
            }
        }
        auto run = model_forward<S>(m, in, B, seq_len, tgt);
        total += double(run.tape.val(run.loss).data[0]) * double(B * seq_len);
        tokens += B * seq_len;
    }
    EvalResult r;
    r.loss = total / double(tokens);
    r.perplexity = std::exp(r.loss);
    r.tokens = tokens;
    return r;
}

EvalResult evaluate_checkpoint(const std::string& prefix, const std::string& corpus_path,
                               int64_t batch_size) {
    const std::string dtype = checkpoint_dtype(prefix);
    const auto bytes = load_corpus(corpus_path);
    if (dtype == "f64") {
        auto m = load_checkpoint<double>(prefix);
        return evaluate_model<double>(m, bytes, m.cfg.T_max, batch_size);
    }
    auto m = load_checkpoint<float>(prefix);
    return evaluate_model<float>(m, bytes, m.cfg.T_max, batch_size);
}

// --- training loop -----------------------------------------------------------------

namespace {

template <typename S>
TrainResult train_impl(const TrainConfig& cfg, const std::function<void(const MetricsRow&)>& on_row) {
    const auto all_bytes = load_corpus(cfg.train_corpus);
    std::vector<uint8_t> train_bytes, val_bytes;
    if (!cfg.val_corpus.empty()) {
        train_bytes = all_bytes;
        val_bytes = load_corpus(cfg.val_corpus);
    } else {
        // Hold out the trailing tenth for validation.
        const size_t split = all_bytes.size() - all_bytes.size() / 10;
        train_bytes.assign(all_bytes.begin(), all_bytes.begin() + static_cast<int64_t>(split));
        val_bytes.assign(all_bytes.begin() + static_cast<int64_t>(split), all_bytes.end());
    }
    if (static_cast<int64_t>(val_bytes.size()) < cfg.seq_len + 1)
        throw std::invalid_argument("train: validation split smaller than one chunk");
    check_vocab<S>(train_bytes, cfg.model.V, "train");
    check_vocab<S>(val_bytes, cfg.model.V, "train");

    auto m = build_model<S>(cfg.model, cfg.seed);
    auto adam = init_adam_state<S>(m);
    CorpusSampler sampler(train_bytes, cfg.seq_len, cfg.batch_size, cfg.seed);

    std::filesystem::create_directories(cfg.out_dir);
    TrainResult result;
    result.metrics_path = cfg.out_dir + "/metrics.csv";
    result.last_prefix = cfg.out_dir + "/last";
    result.best_prefix = cfg.out_dir + "/best";
    std::ofstream metrics(result.metrics_path, std::ios::binary);
    if (!metrics) throw std::runtime_error("train: cannot write " + result.metrics_path);
    metrics << metrics_csv_header() << "\n";

    result.best_val_loss = std::numeric_limits<double>::infinity();
    result.final_val_loss = std::numeric_limits<double>::quiet_NaN();
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<int32_t> in, tgt;
    for (int64_t step = 1; step <= cfg.steps; ++step) {
        sampler.next_batch(in, tgt);
        auto run = model_forward<S>(m, in, cfg.batch_size, cfg.seq_len, tgt);
        const double loss = double(run.tape.val(run.loss).data[0]);
        m.zero_grads();
        run.tape.backward(run.loss);
        const double lr = lr_schedule(step - 1, cfg);
        adamw_step<S>(m, adam, lr, cfg);

        MetricsRow row;
        row.step = step;
        row.train_loss = loss;
        row.val_loss = std::numeric_limits<double>::quiet_NaN();
        row.lr = lr;
        row.tokens_seen = step * cfg.batch_size * cfg.seq_len;
        if (step % cfg.eval_interval == 0 || step == cfg.steps) {
            const EvalResult ev = evaluate_model<S>(m, val_bytes, cfg.seq_len, cfg.batch_size,
                                                    cfg.eval_batches * cfg.batch_size);
            row.val_loss = ev.loss;
            result.final_val_loss = ev.loss;
            save_checkpoint<S>(m, result.last_prefix);
            if (ev.loss < result.best_val_loss) {
                result.best_val_loss = ev.loss;
                save_checkpoint<S>(m, result.best_prefix);
            }
        }
        row.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                          std::chrono::steady_clock::now() - t0)
                          .count();
        metrics << metrics_csv_row(row) << "\n";
        result.rows.push_back(row);
        if (on_row) on_row(row);
    }
    return result;
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const std::function<void(const MetricsRow&)>& on_row) {
    cfg.validate();
    if (cfg.train_corpus.empty())
        throw std::invalid_argument("train: train_corpus path is required");
    if (cfg.dtype == "f64") return train_impl<double>(cfg, on_row);
    return train_impl<float>(cfg, on_row);
}

// --- generation ----------------------------------------------------------------------

namespace {

template <typename S>
int32_t argmax_token(const Array<S>& logits) {
    int64_t best = 0;
    for (int64_t i = 1; i < logits.size(); ++i)
        if (logits.data[i] > logits.data[best]) best = i;
    return static_cast<int32_t>(best);
}

template <typename S>
int32_t sample_token(const Array<S>& logits, const GenerateOptions& opt, RngState& rng) {
    if (opt.mode != "greedy" && opt.mode != "temperature" && opt.mode != "top_k")
        throw std::invalid_argument("generate: unknown mode '" + opt.mode +
                                    "' (expected greedy, temperature, or top_k)");
    if (opt.mode == "greedy" || opt.temperature == 0.0) return argmax_token(logits);
    if (!(opt.temperature > 0)) throw std::invalid_argument("generate: temperature must be >= 0");

    std::vector<int64_t> idx(static_cast<size_t>(logits.size()));
    std::iota(idx.begin(), idx.end(), int64_t(0));
    if (opt.mode == "top_k") {
        if (opt.top_k < 1) throw std::invalid_argument("generate: top_k must be >= 1");
        const size_t k = static_cast<size_t>(std::min<int64_t>(opt.top_k, logits.size()));
        std::partial_sort(idx.begin(), idx.begin() + static_cast<int64_t>(k), idx.end(),
                          [&](int64_t a, int64_t b) {
                              if (logits.data[a] != logits.data[b])
                                  return logits.data[a] > logits.data[b];
                              return a < b;
                          });
        idx.resize(k);
    }

    double max_l = -std::numeric_limits<double>::infinity();
    for (int64_t i : idx) max_l = std::max(max_l, double(logits.data[i]));
    std::vector<double> probs(idx.size());
    double z = 0.0;
    for (size_t j = 0; j < idx.size(); ++j) {
        probs[j] = std::exp((double(logits.data[idx[j]]) - max_l) / opt.temperature);
        z += probs[j];
    }
    double u = rng.next_double() * z;
    for (size_t j = 0; j < idx.size(); ++j) {
        u -= probs[j];
        if (u <= 0.0) return static_cast<int32_t>(idx[j]);
    }
    return static_cast<int32_t>(idx.back());
}

}  // namespace

template <typename S>
std::vector<uint8_t> generate_bytes(Model<S>& m, std::span<const uint8_t> prompt, int64_t n,
                                    const GenerateOptions& opt) {
    if (prompt.empty()) throw std::invalid_argument("generate: prompt must be non-empty");
    if (n < 0) throw std::invalid_argument("generate: negative continuation length");
    const int64_t fed = static_cast<int64_t>(prompt.size()) + std::max<int64_t>(n - 1, 0);
    if (fed > m.cfg.T_max)
        throw std::invalid_argument("generate: prompt plus continuation exceeds T_max of " +
                                    std::to_string(m.cfg.T_max));
    check_vocab<S>(prompt, m.cfg.V, "generate");
    if (n == 0) return {};

    auto cache = make_decode_cache<S>(m);
    Array<S> logits;
    for (uint8_t b : prompt) logits = decode_step<S>(m, cache, static_cast<int32_t>(b));

    RngState rng = RngState(opt.seed).stream("generate");
    std::vector<uint8_t> out;
    out.reserve(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        const int32_t tok = sample_token(logits, opt, rng);
        out.push_back(static_cast<uint8_t>(tok));
        if (i + 1 < n) logits = decode_step<S>(m, cache, tok);
    }
    return out;
}

std::vector<uint8_t> generate_from_checkpoint(const std::string& prefix,
                                              std::span<const uint8_t> prompt, int64_t n,
                                              const GenerateOptions& opt) {
    const std::string dtype = checkpoint_dtype(prefix);
    if (dtype == "f64") {
        auto m = load_checkpoint<double>(prefix);
        return generate_bytes<double>(m, prompt, n, opt);
    }
    auto m = load_checkpoint<float>(prefix);
    return generate_bytes<float>(m, prompt, n, opt);
}

#define MUDD_INSTANTIATE_TRAIN(S)                                                             \
    template struct AdamState<S>;                                                             \
    template AdamState<S> init_adam_state<S>(Model<S>&);                                      \
    template bool adamw_step<S>(Model<S>&, AdamState<S>&, double, const TrainConfig&);        \
    template EvalResult evaluate_model<S>(Model<S>&, std::span<const uint8_t>, int64_t,       \
                                          int64_t, int64_t);                                  \
    template std::vector<uint8_t> generate_bytes<S>(Model<S>&, std::span<const uint8_t>,      \
                                                    int64_t, const GenerateOptions&);

MUDD_INSTANTIATE_TRAIN(float)
MUDD_INSTANTIATE_TRAIN(double)

}  // namespace mudd
