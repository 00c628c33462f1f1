#pragma once

#include "card/checkpoint.hpp"
#include "card/common.hpp"
#include "card/corpus.hpp"
#include "card/objectives.hpp"
#include "card/optimizer.hpp"
#include "card/parallel.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace card {

enum class LrSchedule { constant_after_warmup, cosine };

inline const char * to_string(LrSchedule s) {
    return s == LrSchedule::cosine ? "cosine" : "constant_after_warmup";
}

inline LrSchedule lr_schedule_from(const std::string & s) {
    if (s == "cosine") return LrSchedule::cosine;
    if (s == "constant_after_warmup" || s == "constant") return LrSchedule::constant_after_warmup;
    throw usage_error("unknown lr schedule '" + s + "'");
}

struct TrainConfig {
    ObjectiveConfig obj{};
    ModelConfig model{};

    int steps = 2000;
    int batch_size = 32;
    int seq_len = 64;
    double peak_lr = 3e-4;
    int warmup_steps = 100;
    LrSchedule lr_schedule = LrSchedule::cosine;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double weight_decay = 0.01;
    double grad_clip = 1.0;
    double ema_decay = 0.0;  // 0 disables EMA
    uint64_t seed = 42;
    int eval_every = 100;
    int eval_seqs = 128;     // validation subset size per eval
    int threads = 0;         // 0 = hardware concurrency
    int epochs = 0;          // > 0 switches to epoch mode over a fixed dataset
    bool log_wall_time = false;  // keep the metrics CSV byte-reproducible by default
    std::string resume;      // train-state checkpoint to continue from

    void validate() const {
        CARD_CHECK(steps >= 0 && batch_size >= 1 && seq_len >= 2, "bad train config");
        CARD_CHECK(warmup_steps >= 0 && warmup_steps <= std::max(steps, 1), "warmup_steps must be <= steps");
        CARD_CHECK(peak_lr > 0.0, "peak_lr must be > 0");
        CARD_CHECK(ema_decay >= 0.0 && ema_decay <= 1.0, "ema_decay must be in [0, 1]");
        CARD_CHECK(seq_len + 1 <= model.max_len, "seq_len + 1 must fit max_len");
        model.validate();
    }
};

// Linear ramp 0 -> peak over `warmup` steps, then either constant or a cosine
// decay that lands on 10% of peak at the final step.
inline double lr_at(int64_t step, const TrainConfig & cfg) {
    if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
        return cfg.peak_lr * double(step) / double(cfg.warmup_steps);
    if (cfg.lr_schedule == LrSchedule::constant_after_warmup) return cfg.peak_lr;
    const double min_lr = 0.1 * cfg.peak_lr;
    const int64_t total = std::max<int64_t>(cfg.steps, cfg.warmup_steps + 1);
    if (total <= cfg.warmup_steps) return cfg.peak_lr;
    double prog = double(step - cfg.warmup_steps) / double(total - cfg.warmup_steps);
    prog = std::clamp(prog, 0.0, 1.0);
    return min_lr + (cfg.peak_lr - min_lr) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * prog));
}

struct MetricRow {
    int64_t step;
    std::string split;
    std::string objective;
    double loss;
    double lr;
    double wall_ms;
};

struct TrainState {
    TrainConfig cfg;
    Params<float> params;
    AdamW opt;
    std::optional<Params<float>> ema;
    int64_t step = 0;
};

struct TrainResult {
    std::shared_ptr<TrainState> state;
    std::vector<MetricRow> metrics;
    double best_val = 0.0;
    std::string best_path, final_path, metrics_path;
};

namespace detail {

inline std::string format_metric_row(const MetricRow & r) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%lld,%s,%s,%.9g,%.9g,%.3f\n", (long long) r.step, r.split.c_str(),
                  r.objective.c_str(), r.loss, r.lr, r.wall_ms);
    return buf;
}

}  // namespace detail

// Scratch owned by one training run: per-worker workspaces, per-sample
// gradient slots (summed in sample order so results do not depend on the
// thread count), and one reduced gradient buffer.
struct TrainScratch {
    std::vector<Workspace<float>> ws;
    std::vector<Params<float>> slots;
    std::vector<double> losses;
    Params<float> grad;
    int threads;

    TrainScratch(const ModelConfig & cfg, int batch, int threads_)
        : grad(cfg), threads(threads_ <= 0 ? default_threads() : threads_) {
        for (int i = 0; i < std::min(threads, batch); ++i) ws.emplace_back(cfg);
        if (ws.empty()) ws.emplace_back(cfg);
        for (int i = 0; i < batch; ++i) slots.emplace_back(cfg);
        losses.assign(size_t(batch), 0.0);
    }
};

// One optimizer step over a prepared batch. Returns the mean loss; a
// non-finite loss aborts the update and leaves the state untouched.
inline std::pair<double, bool> train_step(TrainState & st, const std::vector<std::vector<TrainingExample>> & batch,
                                          TrainScratch & scratch) {
    const int B = int(batch.size());
    CARD_CHECK(B >= 1 && B <= int(scratch.slots.size()), "batch does not fit scratch");
    parallel_for_workers(B, int(scratch.ws.size()), [&](int64_t k, int w) {
        scratch.losses[size_t(k)] = sequence_loss_and_grad(batch[size_t(k)], st.params, st.cfg.obj.normalize,
                                                           scratch.ws[size_t(w)], scratch.slots[size_t(k)]);
    });
    double loss = 0.0;
    for (int k = 0; k < B; ++k) loss += scratch.losses[size_t(k)];
    loss /= B;

    if (!std::isfinite(loss)) return {loss, false};

    scratch.grad.zero_all();
    for (int k = 0; k < B; ++k) scratch.grad.add_scaled(scratch.slots[size_t(k)], 1.0f / float(B));
    clip_global_norm(scratch.grad, st.cfg.grad_clip);
    st.opt.step(st.params, scratch.grad, lr_at(st.step, st.cfg));
    if (st.ema) ema_update(*st.ema, st.params, st.cfg.ema_decay);
    ++st.step;
    return {loss, true};
}

// Validation metric. Causal objectives (arm, card) use the clean causal
// cross-entropy so the two are directly comparable; mdlm and bd3lm use their
// own objective loss under a fixed corruption stream.
inline double validation_loss(const Params<float> & params, const TrainConfig & cfg, const Dataset & val,
                              TrainScratch & scratch) {
    CARD_CHECK(!val.empty(), "empty validation set");
    const int n = int(std::min<size_t>(val.size(), size_t(std::max(1, cfg.eval_seqs))));
    std::vector<double> losses(size_t(n), 0.0);
    parallel_for_workers(n, int(scratch.ws.size()), [&](int64_t i, int w) {
        const auto & x0 = val.seqs[size_t(i)];
        std::vector<TrainingExample> exs;
        if (cfg.obj.objective == Objective::arm || cfg.obj.objective == Objective::card) {
            exs = {build_arm(x0)};
        } else {
            Rng rng(cfg.seed, streams::val_corrupt, uint64_t(i));
            exs = build_examples(cfg.obj, x0, rng);
        }
        losses[size_t(i)] = sequence_loss(exs, params, cfg.obj.normalize, scratch.ws[size_t(w)]);
    });
    double total = 0.0;
    for (double l : losses) total += l;
    return total / n;
}

// ---- train-state checkpointing ---------------------------------------------

inline void save_train_state(const std::string & path, const TrainState & st,
                             std::map<std::string, std::string> extra_kv = {}) {
    auto kv = model_config_kv(st.params.cfg);
    kv["train.step"] = std::to_string(st.step);
    kv["train.seed"] = std::to_string(st.cfg.seed);
    kv["train.objective"] = to_string(st.cfg.obj.objective);
    kv["train.has_ema"] = st.ema ? "true" : "false";
    for (auto & [k, v] : extra_kv) kv[k] = v;
    std::vector<NamedArray> arrays;
    append_params(arrays, st.params);
    append_params(arrays, st.opt.m, "adam_m.");
    append_params(arrays, st.opt.v, "adam_v.");
    if (st.ema) append_params(arrays, *st.ema, "ema.");
    write_checkpoint_raw(path, serialize_kv(kv), arrays);
}

inline void load_train_state(const std::string & path, TrainState & st) {
    CheckpointData ck = read_checkpoint_raw(path);
    auto kv = ck.blob_kv();
    ModelConfig saved = model_config_from_kv(kv);
    const auto want = model_config_kv(st.params.cfg), got = model_config_kv(saved);
    CARD_CHECK(want == got, "resume checkpoint model config does not match the run config");
    extract_params(ck, st.params);
    extract_params(ck, st.opt.m, "adam_m.");
    extract_params(ck, st.opt.v, "adam_v.");
    auto it = kv.find("train.step");
    CARD_CHECK(it != kv.end(), "resume checkpoint has no train.step");
    st.step = parse_int(it->second, "train.step");
    st.opt.t = st.step;
    if (st.ema) {
        CARD_CHECK(kv.count("train.has_ema") && kv.at("train.has_ema") == "true",
                   "resume checkpoint has no EMA arrays but ema_decay is enabled");
        extract_params(ck, *st.ema, "ema.");
    }
}

// ---- the training loop -------------------------------------------------------

inline TrainResult train(const TrainConfig & cfg_in, const Dataset & train_ds, const Dataset & val_ds,
                         const std::string & out_dir) {
    TrainConfig cfg = cfg_in;
    cfg.validate();
    CARD_CHECK(!train_ds.empty(), "empty training set");
    CARD_CHECK(train_ds.seq_len == cfg.seq_len, "dataset seq_len does not match config");

    std::filesystem::create_directories(out_dir);
    const std::string metrics_path = out_dir + "/metrics.csv";
    std::ofstream metrics_out(metrics_path, std::ios::trunc);
    CARD_CHECK(bool(metrics_out), "cannot open '" + metrics_path + "'");
    metrics_out << "step,split,objective,loss,lr,wall_ms\n";

    // attention mode follows the objective
    switch (cfg.obj.objective) {
        case Objective::arm:
        case Objective::card:  cfg.model.attn_mode = AttnMode::causal; break;
        case Objective::mdlm:  cfg.model.attn_mode = AttnMode::full; break;
        case Objective::bd3lm:
            cfg.model.attn_mode = AttnMode::block_causal;
            cfg.model.block_k = cfg.obj.bd3lm_block;
            CARD_CHECK(cfg.seq_len % cfg.obj.bd3lm_block == 0, "bd3lm block must divide seq_len");
            break;
    }

    const size_t n_train = train_ds.size();
    int64_t total_steps = cfg.steps;
    if (cfg.epochs > 0)
        total_steps = int64_t(cfg.epochs) * int64_t((n_train + size_t(cfg.batch_size) - 1) / size_t(cfg.batch_size));

    TrainResult res;
    res.state = std::make_shared<TrainState>(TrainState{
        cfg, init_params<float>(cfg.model, cfg.seed),
        AdamW(cfg.model, cfg.beta1, cfg.beta2, cfg.weight_decay),
        cfg.ema_decay > 0.0 ? std::optional<Params<float>>(init_params<float>(cfg.model, cfg.seed))
                            : std::nullopt,
        0});
    TrainState & st = *res.state;
    if (!cfg.resume.empty()) load_train_state(cfg.resume, st);

    TrainScratch scratch(cfg.model, cfg.batch_size, cfg.threads);
    res.metrics_path = metrics_path;
    res.best_path = out_dir + "/best.ckpt";
    res.final_path = out_dir + "/final.ckpt";
    res.best_val = std::numeric_limits<double>::infinity();

    const int64_t steps_per_epoch = cfg.epochs > 0
        ? int64_t((n_train + size_t(cfg.batch_size) - 1) / size_t(cfg.batch_size)) : 0;
    std::vector<size_t> perm;
    int64_t perm_epoch = -1;

    auto emit = [&](MetricRow r) {
        metrics_out << detail::format_metric_row(r);
        res.metrics.push_back(std::move(r));
    };

    int64_t last_eval_step = -1;
    auto run_eval = [&](int64_t at_step) {
        if (val_ds.empty()) return;
        last_eval_step = at_step;
        double vl = validation_loss(st.params, cfg, val_ds, scratch);
        emit({at_step, "validation", to_string(cfg.obj.objective), vl, lr_at(at_step, cfg), 0.0});
        if (st.ema) {
            Params<float> shadow = *st.ema;
            shadow.cfg = st.params.cfg;
            double vle = validation_loss(shadow, cfg, val_ds, scratch);
            emit({at_step, "validation_ema", to_string(cfg.obj.objective), vle, lr_at(at_step, cfg), 0.0});
        }
        CARD_CHECK(st.params.all_finite(), "non-finite parameters at eval");
        if (vl < res.best_val) {
            res.best_val = vl;
            save_model(res.best_path, st.params,
                       {{"train.step", std::to_string(at_step)}, {"train.val_loss", std::to_string(vl)}});
        }
    };

    std::vector<std::vector<TrainingExample>> batch(size_t(cfg.batch_size));
    while (st.step < total_steps) {
        const int64_t s = st.step;
        // pick sequences: pure function of (seed, step) in both modes
        if (cfg.epochs > 0) {
            int64_t epoch = s / steps_per_epoch;
            if (epoch != perm_epoch) {
                perm.resize(n_train);
                std::iota(perm.begin(), perm.end(), size_t(0));
                Rng r(cfg.seed, streams::perm, uint64_t(epoch));
                for (size_t i = n_train; i > 1; --i) std::swap(perm[i - 1], perm[size_t(r.below(i))]);
                perm_epoch = epoch;
            }
        }
        auto wall0 = std::chrono::steady_clock::now();
        parallel_for_workers(cfg.batch_size, int(scratch.ws.size()), [&](int64_t k, int) {
            size_t idx;
            if (cfg.epochs > 0) {
                int64_t within = (s % steps_per_epoch) * cfg.batch_size + k;
                idx = perm[size_t(within % int64_t(n_train))];
            } else {
                Rng pick(cfg.seed, streams::data, uint64_t(s), uint64_t(k));
                idx = size_t(pick.below(n_train));
            }
            Rng rng(cfg.seed, streams::corrupt, uint64_t(s) * uint64_t(cfg.batch_size) + uint64_t(k));
            batch[size_t(k)] = build_examples(cfg.obj, train_ds.seqs[idx], rng);
        });
        auto [loss, applied] = train_step(st, batch, scratch);
        double wall_ms = 0.0;
        if (cfg.log_wall_time)
            wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - wall0).count();
        emit({s, "train", to_string(cfg.obj.objective), loss, lr_at(s, cfg), wall_ms});
        if (!applied) {
            std::fprintf(stderr, "[train] step %lld: non-finite loss, update skipped\n", (long long) s);
            ++st.step;  // move on without touching params/moments
            continue;
        }
        if (cfg.eval_every > 0 && st.step % cfg.eval_every == 0) run_eval(st.step);
    }
    if (total_steps > 0 && last_eval_step != st.step) run_eval(st.step);
    save_train_state(res.final_path, st);
    metrics_out.flush();
    CARD_CHECK(bool(metrics_out), "failed writing metrics to '" + metrics_path + "'");
    return res;
}

// ---- step-cost benchmark -----------------------------------------------------

struct BenchRow {
    Objective objective;
    double ms_per_step = 0.0;   // median over measured steps
    double ratio_vs_arm = 0.0;
    double forwards_per_seq = 0.0;
};

// Wall time per optimizer step for each objective at an identical model
// config. Timing is real elapsed time, so the output is a report, not a
// reproducible metrics CSV.
inline std::vector<BenchRow> bench_step_cost(TrainConfig base, const Dataset & ds,
                                             const std::vector<Objective> & objectives, int warmup_steps,
                                             int measure_steps) {
    std::vector<BenchRow> rows;
    for (Objective obj : objectives) {
        TrainConfig cfg = base;
        cfg.obj.objective = obj;
        cfg.steps = warmup_steps + measure_steps;
        cfg.eval_every = 0;
        switch (obj) {
            case Objective::arm:
            case Objective::card:  cfg.model.attn_mode = AttnMode::causal; break;
            case Objective::mdlm:  cfg.model.attn_mode = AttnMode::full; break;
            case Objective::bd3lm:
                cfg.model.attn_mode = AttnMode::block_causal;
                cfg.model.block_k = cfg.obj.bd3lm_block;
                break;
        }
        cfg.validate();
        TrainState st{cfg, init_params<float>(cfg.model, cfg.seed),
                      AdamW(cfg.model, cfg.beta1, cfg.beta2, cfg.weight_decay), std::nullopt, 0};
        TrainScratch scratch(cfg.model, cfg.batch_size, cfg.threads);
        std::vector<std::vector<TrainingExample>> batch(size_t(cfg.batch_size));
        std::vector<double> times;
        for (int s = 0; s < cfg.steps; ++s) {
            parallel_for_workers(cfg.batch_size, int(scratch.ws.size()), [&](int64_t k, int) {
                Rng pick(cfg.seed, streams::data, uint64_t(s), uint64_t(k));
                Rng rng(cfg.seed, streams::corrupt, uint64_t(s) * uint64_t(cfg.batch_size) + uint64_t(k));
                batch[size_t(k)] = build_examples(cfg.obj, ds.seqs[pick.below(ds.size())], rng);
            });
            auto t0 = std::chrono::steady_clock::now();
            train_step(st, batch, scratch);
            auto t1 = std::chrono::steady_clock::now();
            if (s >= warmup_steps) times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
        }
        std::sort(times.begin(), times.end());
        BenchRow row;
        row.objective = obj;
        row.ms_per_step = times[times.size() / 2];
        row.forwards_per_seq = obj == Objective::bd3lm ? double(cfg.seq_len) / cfg.obj.bd3lm_block : 1.0;
        rows.push_back(row);
    }
    double arm_ms = 0.0;
    for (const auto & r : rows)
        if (r.objective == Objective::arm) arm_ms = r.ms_per_step;
    for (auto & r : rows) r.ratio_vs_arm = arm_ms > 0.0 ? r.ms_per_step / arm_ms : 0.0;
    return rows;
}

}  // namespace card
