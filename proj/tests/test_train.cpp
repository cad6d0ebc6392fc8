#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "mudd/train.hpp"

using namespace mudd;
namespace fs = std::filesystem;

namespace {

std::string temp_path(const std::string& name) {
    return (fs::temp_directory_path() / name).string();
}

void write_file(const std::string& path, const std::vector<uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary);
    REQUIRE(out.good());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
}

TrainConfig tiny_cfg(const std::string& run_name) {
    TrainConfig cfg;
    cfg.model.L = 2;
    cfg.model.D = 32;
    cfg.model.H = 2;
    cfg.model.V = 256;
    cfg.model.T_max = 64;
    cfg.steps = 50;
    cfg.batch_size = 4;
    cfg.seq_len = 32;
    cfg.eval_interval = 10;
    cfg.eval_batches = 2;
    cfg.out_dir = temp_path(run_name);
    return cfg;
}

void perturb_params(Model<double>& m, uint64_t seed, double scale) {
    for (auto* p : m.parameters()) {
        RngState r = RngState(seed).stream(p->name);
        for (int64_t i = 0; i < p->value.size(); ++i)
            p->value.data[i] += scale * r.next_normal();
    }
}

void set_grads(Model<double>& m, uint64_t seed, double scale) {
    for (auto* p : m.parameters()) {
        RngState r = RngState(seed).stream("g" + p->name);
        for (int64_t i = 0; i < p->grad.size(); ++i)
            p->grad.data[i] = scale * r.next_normal();
    }
}

std::vector<std::vector<double>> snapshot(Model<double>& m) {
    std::vector<std::vector<double>> out;
    for (auto* p : m.parameters())
        out.emplace_back(p->value.data.begin(), p->value.data.end());
    return out;
}

// Straight-line AdamW reference: same contract, scalar loops only.
struct RefAdam {
    int64_t t = 0;
    std::vector<std::vector<double>> m, v;
};

bool ref_adamw(std::vector<std::vector<double>>& params,
               const std::vector<std::vector<double>>& grads, const std::vector<bool>& decay,
               RefAdam& st, double lr, const TrainConfig& cfg) {
    if (st.m.empty()) {
        for (auto& p : params) {
            st.m.emplace_back(p.size(), 0.0);
            st.v.emplace_back(p.size(), 0.0);
        }
    }
    double sq = 0;
    for (auto& g : grads)
        for (double x : g) {
            if (!std::isfinite(x)) return false;
            sq += x * x;
        }
    const double gnorm = std::sqrt(sq);
    const double scale = gnorm > cfg.grad_clip ? cfg.grad_clip / gnorm : 1.0;
    const int64_t t = st.t + 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, double(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, double(t));
    for (size_t pi = 0; pi < params.size(); ++pi) {
        for (size_t i = 0; i < params[pi].size(); ++i) {
            const double g = grads[pi][i] * scale;
            st.m[pi][i] = cfg.beta1 * st.m[pi][i] + (1 - cfg.beta1) * g;
            st.v[pi][i] = cfg.beta2 * st.v[pi][i] + (1 - cfg.beta2) * g * g;
            const double old = params[pi][i];
            double next = old - lr * ((st.m[pi][i] / bc1) / (std::sqrt(st.v[pi][i] / bc2) + cfg.eps));
            if (decay[pi]) next -= lr * cfg.weight_decay * old;
            params[pi][i] = next;
        }
    }
    st.t = t;
    return true;
}

std::vector<std::string> split_lines(const std::string& text) {
    std::vector<std::string> lines;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
    return lines;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.push_back("");
    return cells;
}

}  // namespace

TEST_CASE("learning-rate schedule hits its pinned points") {
    TrainConfig cfg;
    cfg.steps = 2000;
    cfg.peak_lr = 3e-3;
    cfg.warmup_fraction = 0.01;
    cfg.final_lr_fraction = 0.1;
    REQUIRE(cfg.warmup_steps() == 20);

    CHECK(lr_schedule(0, cfg) == doctest::Approx(cfg.peak_lr / 20.0).epsilon(1e-14));
    CHECK(lr_schedule(9, cfg) == doctest::Approx(cfg.peak_lr * 10.0 / 20.0).epsilon(1e-14));
    CHECK(lr_schedule(19, cfg) == doctest::Approx(cfg.peak_lr).epsilon(1e-14));

    // Cosine oracle at an arbitrary interior step and at the exact midpoint.
    const double floor_lr = 0.1 * cfg.peak_lr;
    auto cosine = [&](int64_t step) {
        const double progress = double(step - 20 + 1) / double(2000 - 20);
        return floor_lr + (cfg.peak_lr - floor_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
    };
    CHECK(lr_schedule(20, cfg) == doctest::Approx(cosine(20)).epsilon(1e-14));
    CHECK(lr_schedule(777, cfg) == doctest::Approx(cosine(777)).epsilon(1e-14));
    // step 1009: progress = 990/1980 = 1/2, so lr = floor + 0.5*(peak-floor) = 0.55*peak.
    CHECK(lr_schedule(1009, cfg) == doctest::Approx(0.55 * cfg.peak_lr).epsilon(1e-12));
    CHECK(lr_schedule(1999, cfg) == doctest::Approx(floor_lr).epsilon(1e-12));
    CHECK(lr_schedule(2500, cfg) == doctest::Approx(floor_lr).epsilon(1e-12));

    SUBCASE("never increases after the warmup peak") {
        double prev = lr_schedule(19, cfg);
        for (int64_t s = 20; s < 2005; ++s) {
            const double cur = lr_schedule(s, cfg);
            CHECK(cur <= prev + 1e-15);
            prev = cur;
        }
    }
    SUBCASE("three-step run still has a full shape") {
        TrainConfig c3;
        c3.steps = 3;
        c3.peak_lr = 1.0;
        c3.final_lr_fraction = 0.25;
        REQUIRE(c3.warmup_steps() == 1);
        CHECK(lr_schedule(0, c3) == doctest::Approx(1.0));
        // progress = 1/2 -> midpoint of the cosine between floor and peak.
        CHECK(lr_schedule(1, c3) == doctest::Approx(0.25 + 0.75 * 0.5).epsilon(1e-12));
        CHECK(lr_schedule(2, c3) == doctest::Approx(0.25).epsilon(1e-12));
    }
    SUBCASE("negative step is rejected") {
        CHECK_THROWS_AS(lr_schedule(-1, cfg), std::invalid_argument);
    }
}

TEST_CASE("train config text round-trips every field") {
    TrainConfig cfg;
    cfg.model.variant = ModelVariant::multiway_dynamic;
    cfg.model.L = 3;
    cfg.model.D = 16;
    cfg.model.H = 2;
    cfg.model.V = 64;
    cfg.model.T_max = 48;
    cfg.model.Dff = 40;
    cfg.model.realloc = true;
    cfg.model.prepost = true;
    cfg.model.schedule = ConnectionSchedule::make_dilated(2, 1);
    cfg.model.way_k = false;
    cfg.steps = 123;
    cfg.batch_size = 3;
    cfg.seq_len = 24;
    cfg.peak_lr = 1.5e-3;
    cfg.warmup_fraction = 0.02;
    cfg.final_lr_fraction = 0.2;
    cfg.beta1 = 0.85;
    cfg.beta2 = 0.97;
    cfg.eps = 1e-9;
    cfg.weight_decay = 0.05;
    cfg.grad_clip = 0.5;
    cfg.seed = 7;
    cfg.train_corpus = "data/train.bin";
    cfg.val_corpus = "data/val.bin";
    cfg.eval_interval = 5;
    cfg.eval_batches = 2;
    cfg.out_dir = "runs/a";
    cfg.dtype = "f64";

    const TrainConfig back = parse_train_config_text(train_config_text(cfg));
    CHECK(back.model == cfg.model);
    CHECK(back.steps == cfg.steps);
    CHECK(back.batch_size == cfg.batch_size);
    CHECK(back.seq_len == cfg.seq_len);
    CHECK(back.peak_lr == cfg.peak_lr);
    CHECK(back.warmup_fraction == cfg.warmup_fraction);
    CHECK(back.final_lr_fraction == cfg.final_lr_fraction);
    CHECK(back.beta1 == cfg.beta1);
    CHECK(back.beta2 == cfg.beta2);
    CHECK(back.eps == cfg.eps);
    CHECK(back.weight_decay == cfg.weight_decay);
    CHECK(back.grad_clip == cfg.grad_clip);
    CHECK(back.seed == cfg.seed);
    CHECK(back.train_corpus == cfg.train_corpus);
    CHECK(back.val_corpus == cfg.val_corpus);
    CHECK(back.eval_interval == cfg.eval_interval);
    CHECK(back.eval_batches == cfg.eval_batches);
    CHECK(back.out_dir == cfg.out_dir);
    CHECK(back.dtype == cfg.dtype);
}

TEST_CASE("train config parsing: comments, quotes, defaults and rejection") {
    SUBCASE("comments, blank lines and quoted strings") {
        const TrainConfig cfg = parse_train_config_text(
            "# run settings\n"
            "steps = 12   # twelve\n"
            "\n"
            "out_dir = \"runs/a b\"\n"
            "train_corpus = 'corpus.bin'\n");
        CHECK(cfg.steps == 12);
        CHECK(cfg.out_dir == "runs/a b");
        CHECK(cfg.train_corpus == "corpus.bin");
    }
    SUBCASE("the context window follows seq_len unless given") {
        CHECK(parse_train_config_text("seq_len = 32\n").model.T_max == 32);
        const TrainConfig cfg = parse_train_config_text("seq_len = 32\nT_max = 128\n");
        CHECK(cfg.model.T_max == 128);
        CHECK(cfg.seq_len == 32);
    }
    SUBCASE("a config file on disk parses the same") {
        const std::string path = temp_path("mudd_train_cfg.txt");
        std::ofstream(path) << "steps = 9\nD = 64\n";
        const TrainConfig cfg = parse_train_config(path);
        CHECK(cfg.steps == 9);
        CHECK(cfg.model.D == 64);
        fs::remove(path);
        CHECK_THROWS_AS(parse_train_config(path), std::runtime_error);
    }
    SUBCASE("junk is rejected") {
        CHECK_THROWS_AS(parse_train_config_text("stepz = 12\n"), std::invalid_argument);
        CHECK_THROWS_AS(parse_train_config_text("steps = twelve\n"), std::invalid_argument);
        CHECK_THROWS_AS(parse_train_config_text("L = 2.5\n"), std::invalid_argument);
        CHECK_THROWS_AS(parse_train_config_text("steps 12\n"), std::invalid_argument);
        CHECK_THROWS_AS(parse_train_config_text("steps =\n"), std::invalid_argument);
        CHECK_THROWS_AS(parse_train_config_text("realloc = maybe\n"), std::invalid_argument);
    }
    SUBCASE("validation catches contradictions") {
        CHECK_THROWS_AS(parse_train_config_text("seq_len = 32\nT_max = 16\n"),
                        std::invalid_argument);
        CHECK_THROWS_AS(parse_train_config_text("warmup_fraction = 0\n"), std::invalid_argument);
        CHECK_THROWS_AS(parse_train_config_text("dtype = f16\n"), std::invalid_argument);
        CHECK_THROWS_AS(parse_train_config_text("beta2 = 1\n"), std::invalid_argument);
        CHECK_THROWS_AS(parse_train_config_text("grad_clip = 0\n"), std::invalid_argument);
        CHECK_THROWS_AS(parse_train_config_text("final_lr_fraction = 1.5\n"),
                        std::invalid_argument);
    }
}

TEST_CASE("adamw matches a straight-line reference") {
    ModelConfig mc;
    mc.L = 1;
    mc.D = 8;
    mc.H = 2;
    mc.V = 16;
    mc.T_max = 8;
    mc.variant = ModelVariant::multiway_dynamic;
    TrainConfig cfg;
    cfg.model = mc;
    cfg.seq_len = 8;
    cfg.weight_decay = 0.1;
    cfg.grad_clip = 1.0;

    auto m = build_model<double>(mc, 31);
    auto adam = init_adam_state(m);
    auto params = m.parameters();

    SUBCASE("zero gradients with no decay change nothing") {
        TrainConfig nd = cfg;
        nd.weight_decay = 0.0;
        const auto before = snapshot(m);
        REQUIRE(adamw_step(m, adam, 0.1, nd));
        CHECK(adam.t == 1);
        const auto after = snapshot(m);
        for (size_t pi = 0; pi < before.size(); ++pi)
            for (size_t i = 0; i < before[pi].size(); ++i)
                CHECK(after[pi][i] == before[pi][i]);
    }
    SUBCASE("zero gradients apply pure decoupled decay") {
        const double lr = 0.05;
        const auto before = snapshot(m);
        REQUIRE(adamw_step(m, adam, lr, cfg));
        const auto after = snapshot(m);
        for (size_t pi = 0; pi < before.size(); ++pi) {
            for (size_t i = 0; i < before[pi].size(); ++i) {
                const double expect = params[pi]->decay
                                          ? before[pi][i] - lr * cfg.weight_decay * before[pi][i]
                                          : before[pi][i];
                CHECK(after[pi][i] == expect);
            }
        }
        // The model mixes decayed and undecayed parameters, so both branches ran.
        bool any_decay = false, any_plain = false;
        for (auto* p : params) (p->decay ? any_decay : any_plain) = true;
        CHECK(any_decay);
        CHECK(any_plain);
    }
    SUBCASE("two steps track the reference implementation exactly") {
        auto ref_params = snapshot(m);
        std::vector<bool> decay;
        for (auto* p : params) decay.push_back(p->decay);
        RefAdam ref;
        for (int step = 0; step < 2; ++step) {
            set_grads(m, 900 + static_cast<uint64_t>(step), step == 0 ? 0.2 : 3.0);
            std::vector<std::vector<double>> grads;
            for (auto* p : params) grads.emplace_back(p->grad.data.begin(), p->grad.data.end());
            const double lr = step == 0 ? 1e-3 : 5e-4;
            REQUIRE(adamw_step(m, adam, lr, cfg));
            REQUIRE(ref_adamw(ref_params, grads, decay, ref, lr, cfg));
            const auto got = snapshot(m);
            double worst = 0;
            for (size_t pi = 0; pi < got.size(); ++pi)
                for (size_t i = 0; i < got[pi].size(); ++i)
                    worst = std::max(worst, std::abs(got[pi][i] - ref_params[pi][i]));
            CHECK(worst <= 1e-15);
        }
        CHECK(adam.t == 2);
    }
    SUBCASE("clipping makes oversized gradients scale-invariant") {
        auto m2 = build_model<double>(mc, 31);
        auto adam2 = init_adam_state(m2);
        set_grads(m, 77, 10.0);
        set_grads(m2, 77, 1000.0);
        REQUIRE(adamw_step(m, adam, 2e-3, cfg));
        REQUIRE(adamw_step(m2, adam2, 2e-3, cfg));
        const auto a = snapshot(m);
        const auto b = snapshot(m2);
        for (size_t pi = 0; pi < a.size(); ++pi)
            for (size_t i = 0; i < a[pi].size(); ++i)
                CHECK(a[pi][i] == doctest::Approx(b[pi][i]).epsilon(1e-12));
    }
    SUBCASE("a non-finite gradient aborts the step untouched") {
        set_grads(m, 5, 0.1);
        params.back()->grad.data[0] = std::numeric_limits<double>::quiet_NaN();
        const auto before = snapshot(m);
        CHECK_FALSE(adamw_step(m, adam, 0.1, cfg));
        CHECK(adam.t == 0);
        const auto after = snapshot(m);
        for (size_t pi = 0; pi < before.size(); ++pi)
            for (size_t i = 0; i < before[pi].size(); ++i)
                CHECK(after[pi][i] == before[pi][i]);
        params.back()->grad.data[0] = std::numeric_limits<double>::infinity();
        CHECK_FALSE(adamw_step(m, adam, 0.1, cfg));
        CHECK(adam.t == 0);
    }
    SUBCASE("state from a different model is rejected") {
        ModelConfig other = mc;
        other.L = 2;
        auto m3 = build_model<double>(other, 31);
        CHECK_THROWS_AS(adamw_step(m3, adam, 0.1, cfg), std::invalid_argument);
    }
}

TEST_CASE("synthetic corpus is deterministic pseudo-text") {
    const auto a = make_synthetic_corpus(5, 4096);
    const auto b = make_synthetic_corpus(5, 4096);
    CHECK(a == b);
    CHECK(a.size() == 4096);
    const auto c = make_synthetic_corpus(6, 4096);
    CHECK(a != c);

    auto count = [&](uint8_t ch) { return std::count(a.begin(), a.end(), ch); };
    CHECK(count(' ') > 400);
    CHECK(count('.') > 10);
    CHECK(count('\n') > 2);
    CHECK(count(',') > 2);
    CHECK(std::isupper(a[0]));
    for (uint8_t byte : a) CHECK(byte < 128);

    CHECK(make_synthetic_corpus(5, 0).empty());
    CHECK(make_synthetic_corpus(5, 10).size() == 10);
    CHECK_THROWS_AS(make_synthetic_corpus(5, -1), std::invalid_argument);
}

TEST_CASE("corpus sampler slices, shifts, covers and reproduces") {
    // 65 bytes -> exactly 8 chunks of seq_len 8 (the final byte is a target only).
    std::vector<uint8_t> bytes(65);
    for (size_t i = 0; i < bytes.size(); ++i) bytes[i] = static_cast<uint8_t>((i * 3 + 1) % 251);

    CorpusSampler sampler(bytes, 8, 4, 99);
    REQUIRE(sampler.num_chunks() == 8);

    std::vector<int32_t> in, tgt;
    std::vector<int64_t> chunks;
    std::vector<int64_t> first_epoch, second_epoch;
    for (int batch = 0; batch < 4; ++batch) {
        sampler.next_batch(in, tgt, &chunks);
        REQUIRE(in.size() == 32);
        REQUIRE(tgt.size() == 32);
        REQUIRE(chunks.size() == 4);
        for (int64_t b = 0; b < 4; ++b) {
            const int64_t start = chunks[static_cast<size_t>(b)] * 8;
            for (int64_t t = 0; t < 8; ++t) {
                CHECK(in[static_cast<size_t>(b * 8 + t)] == bytes[static_cast<size_t>(start + t)]);
                CHECK(tgt[static_cast<size_t>(b * 8 + t)] ==
                      bytes[static_cast<size_t>(start + t + 1)]);
                if (t + 1 < 8)
                    CHECK(in[static_cast<size_t>(b * 8 + t + 1)] ==
                          tgt[static_cast<size_t>(b * 8 + t)]);
            }
        }
        auto& epoch = batch < 2 ? first_epoch : second_epoch;
        epoch.insert(epoch.end(), chunks.begin(), chunks.end());
    }
    // Each epoch visits every chunk exactly once, in a fresh order.
    auto sorted = [](std::vector<int64_t> v) { std::sort(v.begin(), v.end()); return v; };
    const std::vector<int64_t> all = {0, 1, 2, 3, 4, 5, 6, 7};
    CHECK(sorted(first_epoch) == all);
    CHECK(sorted(second_epoch) == all);
    CHECK(first_epoch != second_epoch);

    SUBCASE("identical construction replays the identical stream") {
        CorpusSampler s1(bytes, 8, 3, 12), s2(bytes, 8, 3, 12);
        std::vector<int64_t> c1, c2;
        std::vector<int64_t> seen;
        for (int i = 0; i < 5; ++i) {
            s1.next_batch(in, tgt, &c1);
            s2.next_batch(in, tgt, &c2);
            CHECK(c1 == c2);
            seen.insert(seen.end(), c1.begin(), c1.end());
        }
        // batch 3 straddles the epoch boundary; the first 8 draws are still a permutation.
        CHECK(sorted({seen.begin(), seen.begin() + 8}) == all);
        for (int64_t c : seen) CHECK((c >= 0 && c < 8));
    }
    SUBCASE("a corpus smaller than one batch is rejected") {
        std::vector<uint8_t> small(33);  // 4 chunks of 8
        CHECK_NOTHROW(CorpusSampler(small, 8, 4, 0));
        CHECK_THROWS_AS(CorpusSampler(small, 8, 5, 0), std::invalid_argument);
        CHECK_THROWS_AS(CorpusSampler({}, 8, 1, 0), std::invalid_argument);
    }
}

TEST_CASE("a short training run learns and logs") {
    const std::string corpus_path = temp_path("mudd_train_corpus.bin");
    write_file(corpus_path, make_synthetic_corpus(11, 64 * 1024));

    TrainConfig cfg = tiny_cfg("mudd_train_run");
    cfg.train_corpus = corpus_path;
    cfg.seed = 3;
    const TrainResult res = train(cfg);

    REQUIRE(res.rows.size() == 50);
    for (size_t i = 0; i < res.rows.size(); ++i) {
        CHECK(res.rows[i].step == static_cast<int64_t>(i) + 1);
        CHECK(res.rows[i].tokens_seen == res.rows[i].step * 4 * 32);
        CHECK(std::isfinite(res.rows[i].train_loss));
    }
    // Before the first update the model is an untrained prior over 256 bytes.
    CHECK(res.rows[0].train_loss == doctest::Approx(std::log(256.0)).epsilon(0.05));
    double tail = 0;
    for (size_t i = 40; i < 50; ++i) tail += res.rows[i].train_loss;
    tail /= 10;
    CHECK(tail < res.rows[0].train_loss - 0.5);  // clearly below the uniform prior
    CHECK(std::isfinite(res.final_val_loss));
    CHECK(res.final_val_loss < std::log(256.0));
    CHECK(res.best_val_loss <= res.final_val_loss + 1e-12);

    SUBCASE("metrics file matches the returned rows") {
        const auto lines = split_lines(read_file(res.metrics_path));
        REQUIRE(lines.size() == 51);
        CHECK(lines[0] == "step,train_loss,val_loss,lr,tokens_seen,wall_ms");
        for (size_t i = 1; i < lines.size(); ++i) {
            const auto cells = split_csv(lines[i]);
            REQUIRE(cells.size() == 6);
            const int64_t step = std::stoll(cells[0]);
            CHECK(step == static_cast<int64_t>(i));
            const bool eval_step = step % cfg.eval_interval == 0 || step == cfg.steps;
            CHECK(cells[2].empty() == !eval_step);
            if (eval_step) CHECK(std::stod(cells[2]) > 0);
            CHECK(std::stod(cells[1]) == doctest::Approx(res.rows[i - 1].train_loss));
            CHECK(std::stoll(cells[4]) == res.rows[i - 1].tokens_seen);
        }
    }
    SUBCASE("checkpoints exist and reproduce the final validation loss") {
        CHECK(fs::exists(res.last_prefix + ".json"));
        CHECK(fs::exists(res.last_prefix + ".bin"));
        CHECK(fs::exists(res.best_prefix + ".json"));
        CHECK(checkpoint_dtype(res.last_prefix) == "f32");
        auto m = load_checkpoint<float>(res.last_prefix);
        CHECK(m.cfg == cfg.model);

        // Rebuild the held-out tail split the trainer used.
        const auto all = load_corpus(corpus_path);
        const size_t split = all.size() - all.size() / 10;
        const std::vector<uint8_t> val(all.begin() + static_cast<int64_t>(split), all.end());
        const EvalResult ev = evaluate_model(m, val, cfg.seq_len, cfg.batch_size,
                                             cfg.eval_batches * cfg.batch_size);
        CHECK(ev.loss == res.final_val_loss);
        CHECK(ev.perplexity == doctest::Approx(std::exp(ev.loss)));
        const EvalResult again = evaluate_model(m, val, cfg.seq_len, cfg.batch_size,
                                                cfg.eval_batches * cfg.batch_size);
        CHECK(again.loss == ev.loss);
    }
}

TEST_CASE("training is deterministic for a fixed seed") {
    const std::string corpus_path = temp_path("mudd_det_corpus.bin");
    write_file(corpus_path, make_synthetic_corpus(21, 32 * 1024));

    TrainConfig cfg = tiny_cfg("mudd_det_a");
    cfg.train_corpus = corpus_path;
    cfg.steps = 12;
    cfg.eval_interval = 5;
    cfg.seed = 9;
    const TrainResult a = train(cfg);
    cfg.out_dir = temp_path("mudd_det_b");
    const TrainResult b = train(cfg);

    REQUIRE(a.rows.size() == b.rows.size());
    for (size_t i = 0; i < a.rows.size(); ++i) {
        CHECK(a.rows[i].train_loss == b.rows[i].train_loss);
        CHECK(a.rows[i].lr == b.rows[i].lr);
        CHECK(std::isnan(a.rows[i].val_loss) == std::isnan(b.rows[i].val_loss));
        if (!std::isnan(a.rows[i].val_loss)) CHECK(a.rows[i].val_loss == b.rows[i].val_loss);
    }
    CHECK(a.final_val_loss == b.final_val_loss);

    // The CSVs agree column-for-column once the wall clock is dropped.
    const auto la = split_lines(read_file(a.metrics_path));
    const auto lb = split_lines(read_file(b.metrics_path));
    REQUIRE(la.size() == lb.size());
    for (size_t i = 0; i < la.size(); ++i) {
        auto ca = split_csv(la[i]), cb = split_csv(lb[i]);
        REQUIRE(ca.size() == cb.size());
        for (size_t j = 0; j + 1 < ca.size(); ++j) CHECK(ca[j] == cb[j]);
    }

    cfg.out_dir = temp_path("mudd_det_c");
    cfg.seed = 10;
    const TrainResult c = train(cfg);
    CHECK(c.rows[0].train_loss != a.rows[0].train_loss);
}

TEST_CASE("multiway model starts from the baseline's exact loss") {
    const std::string corpus_path = temp_path("mudd_equiv_corpus.bin");
    write_file(corpus_path, make_synthetic_corpus(31, 32 * 1024));

    TrainConfig cfg = tiny_cfg("mudd_equiv_base");
    cfg.train_corpus = corpus_path;
    cfg.steps = 3;
    cfg.eval_interval = 3;
    cfg.seed = 5;
    cfg.model.variant = ModelVariant::baseline;
    const TrainResult base = train(cfg);

    cfg.model.variant = ModelVariant::multiway_dynamic;
    cfg.out_dir = temp_path("mudd_equiv_mudd");
    const TrainResult mudd = train(cfg);

    // At initialization the dense connections reduce to the residual stream,
    // so the first batch's loss agrees bit for bit.
    CHECK(mudd.rows[0].train_loss == base.rows[0].train_loss);
    const auto first_base = split_csv(split_lines(read_file(base.metrics_path))[1]);
    const auto first_mudd = split_csv(split_lines(read_file(mudd.metrics_path))[1]);
    CHECK(first_base[1] == first_mudd[1]);
}

TEST_CASE("evaluation pins the uniform prior and rejects bad input") {
    ModelConfig mc;
    mc.L = 2;
    mc.D = 16;
    mc.H = 2;
    mc.V = 32;
    mc.T_max = 16;
    auto m = build_model<double>(mc, 41);

    SUBCASE("zeroed unembedding scores exactly the uniform prior") {
        bool found = false;
        for (auto* p : m.parameters()) {
            if (p->name.find("unembed") != std::string::npos) {
                std::fill(p->value.data.begin(), p->value.data.end(), 0.0);
                found = true;
            }
        }
        REQUIRE(found);
        std::vector<uint8_t> bytes(1 + 16 * 3);
        for (size_t i = 0; i < bytes.size(); ++i) bytes[i] = static_cast<uint8_t>(i % 32);
        const EvalResult ev = evaluate_model(m, bytes, 16, 2);
        CHECK(ev.loss == doctest::Approx(std::log(32.0)).epsilon(1e-9));
        CHECK(ev.perplexity == doctest::Approx(32.0).epsilon(1e-6));
        CHECK(ev.tokens == 48);
    }
    SUBCASE("token accounting follows chunking and max_chunks") {
        std::vector<uint8_t> bytes(1 + 16 * 3 + 7, 1);  // trailing partial chunk is dropped
        CHECK(evaluate_model(m, bytes, 16, 2).tokens == 48);
        CHECK(evaluate_model(m, bytes, 16, 2, 2).tokens == 32);
        CHECK(evaluate_model(m, bytes, 8, 2).tokens == 8 * ((static_cast<int64_t>(bytes.size()) - 1) / 8));
    }
    SUBCASE("batching does not change the score") {
        perturb_params(m, 42, 0.05);
        std::vector<uint8_t> bytes(1 + 16 * 5);
        for (size_t i = 0; i < bytes.size(); ++i) bytes[i] = static_cast<uint8_t>((i * 7 + 3) % 32);
        const double l1 = evaluate_model(m, bytes, 16, 1).loss;
        const double l2 = evaluate_model(m, bytes, 16, 2).loss;
        const double l5 = evaluate_model(m, bytes, 16, 5).loss;
        CHECK(l1 == doctest::Approx(l2).epsilon(1e-9));
        CHECK(l1 == doctest::Approx(l5).epsilon(1e-9));
    }
    SUBCASE("out-of-vocabulary bytes and empty corpora are rejected") {
        std::vector<uint8_t> bad(1 + 16 * 2, 1);
        bad[5] = 200;
        CHECK_THROWS_AS(evaluate_model(m, bad, 16, 2), std::invalid_argument);
        const std::vector<uint8_t> tiny(10, 1);
        CHECK_THROWS_AS(evaluate_model(m, tiny, 16, 2), std::invalid_argument);
        CHECK_THROWS_AS(evaluate_model(m, tiny, 0, 2), std::invalid_argument);
        CHECK_THROWS_AS(evaluate_model(m, tiny, 32, 2), std::invalid_argument);  // > T_max
    }
}

TEST_CASE("a periodic corpus is memorized to near-zero loss") {
    const std::string motif = "the cat sat on the mat.\n";
    auto repeat_to = [&](size_t n) {
        std::vector<uint8_t> bytes;
        while (bytes.size() < n) bytes.insert(bytes.end(), motif.begin(), motif.end());
        bytes.resize(n);
        return bytes;
    };
    const std::string corpus_path = temp_path("mudd_overfit_corpus.bin");
    const std::string val_path = temp_path("mudd_overfit_val.bin");
    write_file(corpus_path, repeat_to(4096));
    write_file(val_path, repeat_to(1024));

    TrainConfig cfg = tiny_cfg("mudd_overfit_run");
    cfg.train_corpus = corpus_path;
    cfg.val_corpus = val_path;
    cfg.steps = 250;
    cfg.eval_interval = 50;
    cfg.peak_lr = 3e-3;
    cfg.seed = 1;
    const TrainResult res = train(cfg);
    CHECK(res.final_val_loss < 0.1);

    // The trained model continues the motif verbatim.
    auto m = load_checkpoint<float>(res.last_prefix);
    const std::vector<uint8_t> prompt(motif.begin(), motif.end());
    const auto out = generate_bytes(m, prompt, 24, GenerateOptions{});
    CHECK(std::string(out.begin(), out.end()) == motif);
}

TEST_CASE("evaluate_checkpoint dispatches on the stored dtype") {
    const std::string corpus_path = temp_path("mudd_evalckpt_corpus.bin");
    const auto corpus = make_synthetic_corpus(51, 8 * 1024);
    write_file(corpus_path, corpus);

    ModelConfig mc;
    mc.L = 1;
    mc.D = 16;
    mc.H = 2;
    mc.V = 256;
    mc.T_max = 32;
    const std::string prefix = temp_path("mudd_evalckpt");
    auto m = build_model<double>(mc, 61);
    perturb_params(m, 62, 0.02);
    save_checkpoint(m, prefix);

    const EvalResult direct = evaluate_model(m, corpus, mc.T_max, 4);
    const EvalResult via = evaluate_checkpoint(prefix, corpus_path, 4);
    CHECK(via.loss == direct.loss);
    CHECK(via.tokens == direct.tokens);

    const EvalResult again = evaluate_checkpoint(prefix, corpus_path, 4);
    CHECK(again.loss == via.loss);
}

TEST_CASE("generation replays the model's own predictions") {
    ModelConfig mc;
    mc.L = 2;
    mc.D = 16;
    mc.H = 2;
    mc.V = 32;
    mc.T_max = 40;
    mc.variant = ModelVariant::multiway_dynamic;
    auto m = build_model<double>(mc, 71);
    perturb_params(m, 72, 0.05);

    std::vector<uint8_t> prompt;
    for (int i = 0; i < 8; ++i) prompt.push_back(static_cast<uint8_t>((i * 7 + 3) % 32));

    // Oracle: grow the sequence with full forward passes, taking the first
    // maximal logit of the final position each time.
    auto full_forward_argmax = [&](const std::vector<uint8_t>& seq) {
        std::vector<int32_t> toks(seq.begin(), seq.end());
        const auto logits = forward_logits(m, toks, 1, static_cast<int64_t>(toks.size()));
        const int64_t T = static_cast<int64_t>(toks.size());
        const double* row = logits.ptr() + (T - 1) * mc.V;
        int64_t best = 0;
        for (int64_t v = 1; v < mc.V; ++v)
            if (row[v] > row[best]) best = v;
        return static_cast<uint8_t>(best);
    };
    std::vector<uint8_t> expect;
    std::vector<uint8_t> seq = prompt;
    for (int i = 0; i < 10; ++i) {
        expect.push_back(full_forward_argmax(seq));
        seq.push_back(expect.back());
    }

    const auto greedy = generate_bytes(m, prompt, 10, GenerateOptions{});
    CHECK(greedy == expect);

    SUBCASE("temperature zero and top-1 reduce to greedy") {
        GenerateOptions t0;
        t0.mode = "temperature";
        t0.temperature = 0.0;
        CHECK(generate_bytes(m, prompt, 10, t0) == greedy);
        GenerateOptions k1;
        k1.mode = "top_k";
        k1.top_k = 1;
        k1.temperature = 0.7;
        k1.seed = 123;
        CHECK(generate_bytes(m, prompt, 10, k1) == greedy);
    }
    SUBCASE("sampling is seed-reproducible and seed-sensitive") {
        GenerateOptions t;
        t.mode = "temperature";
        t.temperature = 1.2;
        t.seed = 1;
        const auto s1 = generate_bytes(m, prompt, 16, t);
        CHECK(generate_bytes(m, prompt, 16, t) == s1);
        t.seed = 2;
        const auto s2 = generate_bytes(m, prompt, 16, t);
        CHECK(s1 != s2);
        for (uint8_t byte : s1) CHECK(byte < 32);
    }
    SUBCASE("top-k sampling stays inside the k best logits") {
        GenerateOptions tk;
        tk.mode = "top_k";
        tk.top_k = 3;
        tk.temperature = 1.5;
        tk.seed = 7;
        const auto out = generate_bytes(m, prompt, 12, tk);
        std::vector<uint8_t> grown = prompt;
        for (uint8_t byte : out) {
            std::vector<int32_t> toks(grown.begin(), grown.end());
            const auto logits = forward_logits(m, toks, 1, static_cast<int64_t>(toks.size()));
            const double* row = logits.ptr() + (static_cast<int64_t>(toks.size()) - 1) * mc.V;
            std::vector<int64_t> idx(static_cast<size_t>(mc.V));
            for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int64_t>(i);
            std::partial_sort(idx.begin(), idx.begin() + 3, idx.end(), [&](int64_t a, int64_t b) {
                if (row[a] != row[b]) return row[a] > row[b];
                return a < b;
            });
            CHECK((byte == idx[0] || byte == idx[1] || byte == idx[2]));
            grown.push_back(byte);
        }
    }
    SUBCASE("a saved checkpoint generates the same bytes") {
        const std::string prefix = temp_path("mudd_gen_ckpt");
        save_checkpoint(m, prefix);
        CHECK(generate_from_checkpoint(prefix, prompt, 10, GenerateOptions{}) == greedy);
    }
    SUBCASE("bad requests are rejected") {
        CHECK_THROWS_AS(generate_bytes(m, {}, 4, GenerateOptions{}), std::invalid_argument);
        CHECK_THROWS_AS(generate_bytes(m, prompt, 40, GenerateOptions{}), std::invalid_argument);
        CHECK(generate_bytes(m, prompt, 33, GenerateOptions{}).size() == 33);  // exactly T_max
        GenerateOptions bad;
        bad.mode = "nucleus";
        CHECK_THROWS_AS(generate_bytes(m, prompt, 4, bad), std::invalid_argument);
        GenerateOptions k0;
        k0.mode = "top_k";
        k0.top_k = 0;
        CHECK_THROWS_AS(generate_bytes(m, prompt, 4, k0), std::invalid_argument);
        GenerateOptions neg;
        neg.mode = "temperature";
        neg.temperature = -1.0;
        CHECK_THROWS_AS(generate_bytes(m, prompt, 4, neg), std::invalid_argument);
        std::vector<uint8_t> oov = {200};
        CHECK_THROWS_AS(generate_bytes(m, oov, 4, GenerateOptions{}), std::invalid_argument);
        CHECK(generate_bytes(m, prompt, 0, GenerateOptions{}).empty());
    }
}
