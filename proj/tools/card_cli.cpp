// card: a desk-scale lab for causal autoregressive diffusion language models.
// One binary, subcommand style; every run resolves its configuration from
// built-in defaults, an optional "key = value" config file, repeatable
// --set overrides, and a few convenience flags, then writes the resolved
// snapshot next to its outputs so any run can be replayed exactly.

#include "card/analysis.hpp"
#include "card/checkpoint.hpp"
#include "card/configfile.hpp"
#include "card/corpus.hpp"
#include "card/inference.hpp"
#include "card/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

using namespace card;
using nlohmann::json;

namespace {

// ---- key table ---------------------------------------------------------------

struct KeyTable {
    struct Entry {
        std::string def;
        std::string help;
    };
    std::map<std::string, Entry> spec;
    std::map<std::string, std::string> values;

    void add(const std::string & key, const std::string & def, const std::string & help) {
        spec[key] = {def, help};
        values[key] = def;
    }

    void set(const std::string & key, const std::string & value) {
        if (!spec.count(key)) throw usage_error("unknown config key '" + key + "'");
        values[key] = value;
    }

    void apply(const KvPairs & kv) {
        for (const auto & [k, v] : kv) set(k, v);
    }

    const std::string & get(const std::string & key) const { return values.at(key); }
    int64_t get_int(const std::string & key) const { return parse_int(values.at(key), key); }
    double get_double(const std::string & key) const { return parse_double(values.at(key), key); }
    bool get_bool(const std::string & key) const { return parse_bool(values.at(key), key); }

    std::string help_text() const {
        std::string out = "Config keys (config file / --set):\n";
        for (const auto & [k, e] : spec)
            out += "  " + k + " = " + (e.def.empty() ? "''" : e.def) + "\n      " + e.help + "\n";
        return out;
    }

    std::string snapshot(const std::string & subcommand) const {
        std::map<std::string, std::string> kv = values;
        kv["subcommand"] = subcommand;
        return serialize_kv(kv);
    }
};

// per-subcommand boilerplate: --config, --set, --seed, --out
struct CommonArgs {
    std::string config_path;
    std::vector<std::string> sets;
    std::string out_dir;
    int64_t seed = -1;  // -1: keep the key default

    void attach(CLI::App * app, const std::string & default_out) {
        out_dir = default_out;
        app->add_option("--config", config_path, "config file with 'key = value' lines");
        app->add_option("--set", sets, "override a config key, repeatable: --set key=value");
        app->add_option("--seed", seed, "random seed (overrides the 'seed' key)");
        app->add_option("--out", out_dir, "output directory")->capture_default_str();
    }

    void resolve(KeyTable & table) const {
        if (!config_path.empty()) table.apply(load_kv_file(config_path));
        for (const auto & s : sets) {
            auto [k, v] = parse_override(s);
            table.set(k, v);
        }
        if (seed >= 0) table.set("seed", std::to_string(seed));
    }
};

void write_snapshot(const KeyTable & table, const std::string & out_dir, const std::string & sub) {
    std::filesystem::create_directories(out_dir);
    std::ofstream out(out_dir + "/resolved.cfg", std::ios::trunc);
    CARD_CHECK(bool(out), "cannot write resolved config to '" + out_dir + "'");
    out << table.snapshot(sub);
}

// ---- shared key groups ---------------------------------------------------------

void add_model_keys(KeyTable & t) {
    t.add("n_layers", "2", "transformer layers");
    t.add("n_heads", "4", "attention heads");
    t.add("d_model", "64", "model width");
    t.add("d_ff", "256", "feed-forward width");
    t.add("max_len", "128", "maximum model input length (sequence-start token included)");
}

ModelConfig model_from(const KeyTable & t) {
    ModelConfig m;
    m.n_layers = int(t.get_int("n_layers"));
    m.n_heads = int(t.get_int("n_heads"));
    m.d_model = int(t.get_int("d_model"));
    m.d_ff = int(t.get_int("d_ff"));
    m.max_len = int(t.get_int("max_len"));
    return m;
}

void add_corpus_keys(KeyTable & t) {
    t.add("corpus", "markov", "'markov' for the built-in synthetic source, else a UTF-8 text file path");
    t.add("n_tokens", "2000000", "tokens to synthesize when corpus = markov");
    t.add("seq_len", "64", "packed sequence length L");
    t.add("val_fraction", "0.1", "fraction of sequences assigned to validation");
    t.add("dataset_cache", "", "optional dataset cache file (written if missing, loaded if present)");
}

std::pair<Dataset, Dataset> load_corpus(const KeyTable & t, uint64_t seed) {
    const std::string spec = t.get("corpus");
    const int seq_len = int(t.get_int("seq_len"));
    const std::string cache = t.get("dataset_cache");
    Dataset all;
    if (!cache.empty() && std::filesystem::exists(cache)) {
        all = load_dataset(cache, seed);
        CARD_CHECK(all.seq_len == seq_len, "dataset cache seq_len mismatch");
    } else {
        std::vector<token_t> stream;
        if (spec == "markov") {
            stream = synth_markov(default_toy_chain(), size_t(t.get_int("n_tokens")), seed);
        } else {
            stream = tokenize(read_text_file(spec));
        }
        all = pack(stream, seq_len, seed);
        if (!cache.empty()) save_dataset(all, cache);
    }
    CARD_CHECK(!all.empty(), "corpus produced no sequences");
    return split_dataset(all, t.get_double("val_fraction"));
}

void add_objective_keys(KeyTable & t) {
    t.add("objective", "card", "arm | card | mdlm | bd3lm");
    t.add("strategy", "soft_tail", "card corruption: soft_tail | strict_tail | uniform | block | none");
    t.add("tail_lambda", "2", "soft-tail window factor (>= 1)");
    t.add("block_size", "8", "block size K for bd3lm and the block strategy");
    t.add("weight_p", "0.5", "ambiguity decay p in (0,1)");
    t.add("weight_beta", "1", "weight smoothing beta (> 0)");
    t.add("weight_variant", "strict_prefix",
          "strict_prefix | strict_prefix_decayed | include_current | include_current_boosted");
    t.add("mdlm_eps", "0.01", "noise-time floor for the 1/t weights");
    t.add("normalize", "count", "loss normalization: count | weight_sum");
}

ObjectiveConfig objective_config_from(const KeyTable & t) {
    ObjectiveConfig o;
    o.objective = card::objective_from(t.get("objective"));
    o.corruption.strategy = mask_strategy_from(t.get("strategy"));
    o.corruption.tail_lambda = t.get_double("tail_lambda");
    o.corruption.block_size = int(t.get_int("block_size"));
    o.weighting.decay_p = t.get_double("weight_p");
    o.weighting.base_beta = t.get_double("weight_beta");
    o.weighting.variant = score_variant_from(t.get("weight_variant"));
    o.mdlm_eps = t.get_double("mdlm_eps");
    o.bd3lm_block = int(t.get_int("block_size"));
    o.normalize = t.get("normalize") == "weight_sum" ? Normalize::weight_sum : Normalize::count;
    if (t.get("normalize") != "count" && t.get("normalize") != "weight_sum")
        throw usage_error("key 'normalize': expected count or weight_sum");
    return o;
}

std::vector<double> parse_double_list(const std::string & s, const std::string & key) {
    std::vector<double> out;
    size_t pos = 0;
    while (pos < s.size()) {
        size_t comma = s.find(',', pos);
        if (comma == std::string::npos) comma = s.size();
        out.push_back(parse_double(trim(s.substr(pos, comma - pos)), key));
        pos = comma + 1;
    }
    CARD_CHECK(!out.empty(), "key '" + key + "' needs at least one value");
    return out;
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

// ---- subcommand handlers ---------------------------------------------------------

int cmd_train(const KeyTable & t, const std::string & out_dir) {
    TrainConfig cfg;
    cfg.obj = objective_config_from(t);
    cfg.model = model_from(t);
    cfg.steps = int(t.get_int("steps"));
    cfg.batch_size = int(t.get_int("batch_size"));
    cfg.seq_len = int(t.get_int("seq_len"));
    cfg.peak_lr = t.get_double("peak_lr");
    cfg.warmup_steps = int(t.get_int("warmup_steps"));
    cfg.lr_schedule = lr_schedule_from(t.get("lr_schedule"));
    cfg.beta1 = t.get_double("beta1");
    cfg.beta2 = t.get_double("beta2");
    cfg.weight_decay = t.get_double("weight_decay");
    cfg.grad_clip = t.get_double("grad_clip");
    cfg.ema_decay = t.get_double("ema_decay");
    cfg.seed = uint64_t(t.get_int("seed"));
    cfg.eval_every = int(t.get_int("eval_every"));
    cfg.eval_seqs = int(t.get_int("eval_seqs"));
    cfg.threads = int(t.get_int("threads"));
    cfg.epochs = int(t.get_int("epochs"));
    cfg.log_wall_time = t.get_bool("log_wall_time");
    cfg.resume = t.get("resume");
    cfg.warmup_steps = std::min(cfg.warmup_steps, std::max(cfg.steps, 1));

    auto [tr, va] = load_corpus(t, cfg.seed);
    TrainResult res = train(cfg, tr, va, out_dir);
    std::printf("trained %s for %lld steps; metrics: %s\n", to_string(cfg.obj.objective),
                (long long) res.state->step, res.metrics_path.c_str());
    if (std::isfinite(res.best_val)) std::printf("best validation loss: %s (%s)\n", fmt(res.best_val).c_str(),
                                                 res.best_path.c_str());
    std::printf("final checkpoint: %s\n", res.final_path.c_str());
    return 0;
}

int cmd_eval_ppl(const KeyTable & t, const std::string & out_dir) {
    const std::string ckpt = t.get("ckpt");
    if (ckpt.empty())
        throw usage_error("eval-ppl needs --set ckpt=<path> (a causal checkpoint from 'card train')");
    std::map<std::string, std::string> kv;
    Params<float> params = load_model(ckpt, &kv);
    std::string mode = t.get("mode");
    if (mode.empty()) mode = kv.count("train.objective") ? kv.at("train.objective") : "arm";
    Objective obj = objective_from(mode);

    auto [tr, va] = load_corpus(t, uint64_t(t.get_int("seed")));
    const Dataset & ds = t.get("split") == "train" ? tr : va;
    CARD_CHECK(t.get("split") == "train" || t.get("split") == "validation",
               "key 'split': expected train or validation");
    double ppl = eval_ppl(params, ds, obj, int(t.get_int("threads")));
    std::printf("ppl %s over %zu %s sequences (seq_len %d): %s\n", mode.c_str(), ds.size(),
                t.get("split").c_str(), ds.seq_len, fmt(ppl).c_str());
    std::ofstream out(out_dir + "/ppl.csv", std::ios::trunc);
    out << "mode,split,sequences,seq_len,ppl\n"
        << mode << ',' << t.get("split") << ',' << ds.size() << ',' << ds.seq_len << ',' << fmt(ppl) << "\n";
    return 0;
}

int cmd_generate(const KeyTable & t, const std::string & out_dir) {
    const std::string ckpt = t.get("ckpt");
    if (ckpt.empty()) throw usage_error("generate needs --set ckpt=<path> (train one with 'card train')");
    Params<float> params = load_model(ckpt);

    DecodeConfig cfg;
    cfg.block_k = int(t.get_int("K"));
    cfg.tau = t.get_double("tau");
    cfg.t_max = int(t.get_int("t_max"));
    cfg.max_new_tokens = int(t.get_int("max_new_tokens"));
    cfg.temperature = t.get_double("temperature");
    cfg.seed = uint64_t(t.get_int("seed"));

    std::vector<token_t> prompt = tokenize(t.get("prompt"));
    DecodeResult res;
    if (t.get_bool("arm")) {
        res = decode_arm(params, prompt, cfg.max_new_tokens, cfg.temperature, cfg.seed);
    } else {
        res = generate(params, prompt, cfg);
    }
    std::string text = detokenize(res.tokens);
    std::fwrite(text.data(), 1, text.size(), stdout);
    std::fputc('\n', stdout);

    const std::string trace_to = t.get("trace");
    if (!trace_to.empty()) {
        std::ostringstream lines;
        for (const auto & bt : res.trace.blocks) {
            json j{{"block_index", bt.index},
                   {"iterations", bt.iterations},
                   {"committed_per_iter", bt.committed_per_iter},
                   {"forwards", bt.iterations + bt.refresh_forwards}};
            lines << j.dump() << "\n";
        }
        if (trace_to == "-") {
            std::fputs(lines.str().c_str(), stdout);
        } else {
            std::ofstream out(trace_to, std::ios::trunc);
            CARD_CHECK(bool(out), "cannot write trace to '" + trace_to + "'");
            out << lines.str();
        }
    }
    std::ofstream summary(out_dir + "/generate.csv", std::ios::trunc);
    summary << "tokens,decode_forwards,tokens_per_forward,truncated\n"
            << res.trace.tokens << ',' << res.trace.decode_forwards << ','
            << fmt(res.trace.tokens_per_forward()) << ',' << (res.trace.truncated ? 1 : 0) << "\n";
    return 0;
}

int cmd_bench_train(const KeyTable & t, const std::string & out_dir) {
    TrainConfig cfg;
    cfg.obj = objective_config_from(t);
    cfg.model = model_from(t);
    cfg.steps = 0;
    cfg.batch_size = int(t.get_int("batch_size"));
    cfg.seq_len = int(t.get_int("seq_len"));
    cfg.seed = uint64_t(t.get_int("seed"));
    cfg.threads = int(t.get_int("threads"));
    cfg.eval_every = 0;
    auto [tr, va] = load_corpus(t, cfg.seed);
    (void) va;

    auto rows = bench_step_cost(cfg, tr, {Objective::arm, Objective::card, Objective::mdlm, Objective::bd3lm},
                                int(t.get_int("warmup")), int(t.get_int("measure_steps")));
    std::ofstream out(out_dir + "/bench_train.csv", std::ios::trunc);
    out << "objective,ms_per_step,ratio_vs_arm,forwards_per_seq\n";
    std::printf("%-8s %14s %14s %18s\n", "obj", "ms/step", "vs arm", "forwards/seq");
    for (const auto & r : rows) {
        out << to_string(r.objective) << ',' << fmt(r.ms_per_step) << ',' << fmt(r.ratio_vs_arm) << ','
            << fmt(r.forwards_per_seq) << "\n";
        std::printf("%-8s %14.3f %14.2f %18.2f\n", to_string(r.objective), r.ms_per_step, r.ratio_vs_arm,
                    r.forwards_per_seq);
    }
    return 0;
}

int cmd_bench_decode(const KeyTable & t, const std::string & out_dir) {
    const std::string ckpt = t.get("ckpt");
    if (ckpt.empty()) throw usage_error("bench-decode needs --set ckpt=<path> (train one with 'card train')");
    Params<float> params = load_model(ckpt);
    const uint64_t seed = uint64_t(t.get_int("seed"));

    auto [tr, va] = load_corpus(t, seed);
    (void) tr;
    const int n_prompts = int(t.get_int("n_prompts"));
    const int prompt_len = int(t.get_int("prompt_len"));
    const int gen_tokens = int(t.get_int("gen_tokens"));
    CARD_CHECK(int(va.size()) >= n_prompts, "not enough validation sequences for prompts");

    // grid entries "K:T", e.g. 16:16,16:8,32:8
    std::vector<std::pair<int, int>> grid;
    {
        const std::string g = t.get("grid");
        size_t pos = 0;
        while (pos < g.size()) {
            size_t comma = g.find(',', pos);
            if (comma == std::string::npos) comma = g.size();
            std::string item = trim(g.substr(pos, comma - pos));
            size_t colon = item.find(':');
            CARD_CHECK(colon != std::string::npos, "grid entries must be K:T pairs");
            grid.emplace_back(int(parse_int(item.substr(0, colon), "grid")),
                              int(parse_int(item.substr(colon + 1), "grid")));
            pos = comma + 1;
        }
    }

    Workspace<float> ws(params.cfg);
    std::ofstream out(out_dir + "/bench_decode.csv", std::ios::trunc);
    out << "K,T_max,tau,tokens,decode_forwards,tokens_per_forward,mean_iterations,gen_ppl_self\n";
    std::printf("%-5s %-6s %-5s %12s %12s %12s\n", "K", "T_max", "tau", "tok/fwd", "iters/blk", "gen-ppl");
    for (auto [K, T] : grid) {
        DecodeConfig dcfg;
        dcfg.block_k = K;
        dcfg.t_max = T;
        dcfg.tau = t.get_double("tau");
        dcfg.max_new_tokens = gen_tokens;
        dcfg.seed = seed;

        int64_t tokens = 0, forwards = 0, iters = 0, blocks = 0;
        double nll = 0.0;
        int64_t nll_count = 0;
        for (int q = 0; q < n_prompts; ++q) {
            std::vector<token_t> prompt(va.seqs[size_t(q)].begin(), va.seqs[size_t(q)].begin() + prompt_len);
            DecodeResult res = generate(params, prompt, dcfg);
            tokens += res.trace.tokens;
            forwards += res.trace.decode_forwards;
            for (const auto & bt : res.trace.blocks) {
                iters += bt.iterations;
                ++blocks;
            }
            // teacher-forced self-evaluation of the generated continuation
            std::vector<token_t> full;
            full.push_back(Vocab::bos_id);
            full.insert(full.end(), prompt.begin(), prompt.end());
            full.insert(full.end(), res.tokens.begin(), res.tokens.end());
            Tensor<float> & logits = forward(params, std::span<const token_t>(full), AttnMode::causal, 0, ws);
            for (size_t i = prompt.size(); i + 1 < full.size(); ++i) {
                const float * row = logits.row(int(i));
                nll += double(logsumexp(row, params.cfg.vocab_size) - row[full[i + 1]]);
                ++nll_count;
            }
        }
        double tpf = forwards ? double(tokens) / double(forwards) : 0.0;
        double mean_iters = blocks ? double(iters) / double(blocks) : 0.0;
        double gen_ppl = nll_count ? std::exp(nll / double(nll_count)) : 0.0;
        out << K << ',' << T << ',' << fmt(dcfg.tau) << ',' << tokens << ',' << forwards << ',' << fmt(tpf)
            << ',' << fmt(mean_iters) << ',' << fmt(gen_ppl) << "\n";
        std::printf("%-5d %-6d %-5.2f %12.3f %12.2f %12.3f\n", K, T, dcfg.tau, tpf, mean_iters, gen_ppl);
    }
    return 0;
}

int cmd_analyze_complexity(const KeyTable & t, const std::string & out_dir) {
    ComplexityReport r = complexity(int(t.get_int("L")), int(t.get_int("K")));
    std::printf("L=%d K=%d: ARM=%s CARD=%s BD3LM=%s MDLM=%s\n", r.L, r.K, r.n_arm.str().c_str(),
                r.n_card.str().c_str(), r.n_bd3lm.str().c_str(), r.n_mdlm.str().c_str());
    std::ofstream out(out_dir + "/complexity.csv", std::ios::trunc);
    out << "L,K,n_arm,n_card,n_bd3lm,n_mdlm\n"
        << r.L << ',' << r.K << ',' << r.n_arm.str() << ',' << r.n_card.str() << ',' << r.n_bd3lm.str() << ','
        << r.n_mdlm.str() << "\n";
    return 0;
}

int cmd_analyze_mi(const KeyTable & t, const std::string & out_dir) {
    double stay = t.get_double("stay");
    MarkovChain chain(2, {stay, 1 - stay, 1 - stay, stay});
    auto rows = mi_retention(chain, int(t.get_int("L")), parse_double_list(t.get("t"), "t"),
                             int(t.get_int("samples")), t.get_double("tail_lambda"), uint64_t(t.get_int("seed")));
    std::ofstream out(out_dir + "/mi_retention.csv", std::ios::trunc);
    out << "t,soft_mean,soft_se,unif_mean,unif_se,margin,margin_se,full_info\n";
    std::printf("%-6s %12s %12s %12s %12s\n", "t", "soft", "uniform", "margin", "margin/se");
    for (const auto & r : rows) {
        out << fmt(r.t) << ',' << fmt(r.soft_mean) << ',' << fmt(r.soft_se) << ',' << fmt(r.unif_mean) << ','
            << fmt(r.unif_se) << ',' << fmt(r.margin) << ',' << fmt(r.margin_se) << ',' << fmt(r.full_info)
            << "\n";
        std::printf("%-6.2f %12.4f %12.4f %12.4f %12.2f\n", r.t, r.soft_mean, r.unif_mean, r.margin,
                    r.margin_se > 0 ? r.margin / r.margin_se : 0.0);
    }
    return 0;
}

int cmd_analyze_continuity(const KeyTable & t, const std::string & out_dir) {
    CorruptionConfig cfg;
    cfg.strategy = mask_strategy_from(t.get("strategy"));
    cfg.tail_lambda = t.get_double("tail_lambda");
    cfg.block_size = int(t.get_int("block_size"));
    ProfileReport r = continuity_profile(cfg, int(t.get_int("L")), int(t.get_int("samples")),
                                         uint64_t(t.get_int("seed")), t.get_double("t"),
                                         int(t.get_int("block_index")));
    std::ofstream out(out_dir + "/continuity.csv", std::ios::trunc);
    out << "position,marginal,adj_diff,adj_se\n";
    for (int i = 0; i < r.L; ++i) {
        out << i + 1 << ',' << fmt(r.marginal[size_t(i)]) << ','
            << (i + 1 < r.L ? fmt(r.adj_diff[size_t(i)]) : "") << ','
            << (i + 1 < r.L ? fmt(r.adj_se[size_t(i)]) : "") << "\n";
    }
    std::printf("strategy=%s L=%d samples=%d max|adjacent diff|=%s\n", to_string(cfg.strategy), r.L,
                r.n_samples, fmt(r.max_abs_adj_diff).c_str());
    if (cfg.strategy == MaskStrategy::block)
        std::printf("block %d boundary jump: %s (se %s)\n", r.block_index, fmt(r.block_jump).c_str(),
                    fmt(r.block_jump_se).c_str());
    return 0;
}

int cmd_analyze_weights(const KeyTable & t, const std::string & out_dir) {
    WeightConfig wcfg;
    wcfg.decay_p = t.get_double("weight_p");
    wcfg.base_beta = t.get_double("weight_beta");
    wcfg.variant = score_variant_from(t.get("weight_variant"));
    ModelConfig mc;
    mc.n_layers = 1;
    mc.n_heads = 2;
    mc.d_model = 32;
    mc.d_ff = 64;
    mc.max_len = int(t.get_int("L")) + 1;
    WeightSweepReport r = weight_bound_sweep(wcfg, int(t.get_int("L")), int(t.get_int("patterns")),
                                             int(t.get_int("grad_seqs")), mc, uint64_t(t.get_int("seed")));
    std::ofstream out(out_dir + "/weight_sweep.csv", std::ios::trunc);
    out << "s_lo,s_hi,count,mean_w,mean_grad_weighted,mean_grad_unweighted\n";
    std::printf("max w*S over %lld positions: %s (< 1)\n", (long long) r.positions, fmt(r.max_ws).c_str());
    std::printf("%-14s %10s %10s %14s %14s\n", "S bin", "count", "mean w", "|grad| wtd", "|grad| unwtd");
    for (const auto & b : r.bins) {
        out << fmt(b.s_lo) << ',' << fmt(b.s_hi) << ',' << b.count << ',' << fmt(b.mean_w) << ','
            << fmt(b.mean_grad_weighted) << ',' << fmt(b.mean_grad_unweighted) << "\n";
        std::printf("[%5.2f,%5.2f) %10lld %10.4f %14.5f %14.5f\n", b.s_lo, std::min(b.s_hi, 99.99),
                    (long long) b.count, b.mean_w, b.mean_grad_weighted, b.mean_grad_unweighted);
    }
    return 0;
}

int cmd_inspect_mask(const KeyTable & t, const std::string &) {
    CorruptionConfig cfg;
    cfg.strategy = mask_strategy_from(t.get("strategy"));
    cfg.tail_lambda = t.get_double("tail_lambda");
    cfg.block_size = int(t.get_int("block_size"));
    WeightConfig wcfg;
    wcfg.decay_p = t.get_double("weight_p");
    wcfg.base_beta = t.get_double("weight_beta");
    wcfg.variant = score_variant_from(t.get("weight_variant"));

    const int L = int(t.get_int("L"));
    const int n = int(t.get_int("n"));
    const double fixed_t = t.get_double("t");
    const bool with_weights = t.get_bool("weights");
    const uint64_t seed = uint64_t(t.get_int("seed"));

    for (int k = 0; k < n; ++k) {
        Rng rng(seed, streams::corrupt, uint64_t(k));
        double tt = fixed_t >= 0.0 ? fixed_t : sample_t(rng);
        MaskPattern p = draw_mask(cfg, L, tt, rng, int(t.get_int("block_index")));
        int N = p.count();
        int W = L;
        if (cfg.strategy == MaskStrategy::soft_tail || cfg.strategy == MaskStrategy::strict_tail) {
            int nn = std::max(1, int(std::floor(L * tt)));
            W = cfg.strategy == MaskStrategy::strict_tail
                    ? nn
                    : std::min(L, int(std::floor(nn * cfg.tail_lambda)));
        }
        std::printf("t=%.6f N=%d W=%d mask=%s", tt, N, W, mask_bitstring(p).c_str());
        if (with_weights) {
            WeightVector wv = compute_weights(p, wcfg);
            std::string s = " S=", w = " w=";
            for (int i = 0; i < L; ++i) {
                char buf[32];
                std::snprintf(buf, sizeof(buf), "%s%.4g", i ? "," : "", wv.S[size_t(i)]);
                s += buf;
                std::snprintf(buf, sizeof(buf), "%s%.4g", i ? "," : "", wv.w[size_t(i)]);
                w += buf;
            }
            std::fputs(s.c_str(), stdout);
            std::fputs(w.c_str(), stdout);
        }
        std::fputc('\n', stdout);
    }
    return 0;
}

}  // namespace

int main(int argc, char ** argv) {
    CLI::App app{"card: causal autoregressive diffusion language modeling lab"};
    app.require_subcommand(1);

    // --- train ---
    KeyTable t_train;
    add_objective_keys(t_train);
    add_model_keys(t_train);
    add_corpus_keys(t_train);
    t_train.add("steps", "2000", "optimizer steps (ignored when epochs > 0)");
    t_train.add("batch_size", "32", "sequences per step");
    t_train.add("peak_lr", "0.0003", "peak learning rate");
    t_train.add("warmup_steps", "100", "linear warmup steps");
    t_train.add("lr_schedule", "cosine", "cosine | constant_after_warmup");
    t_train.add("beta1", "0.9", "adam beta1");
    t_train.add("beta2", "0.95", "adam beta2");
    t_train.add("weight_decay", "0.01", "decoupled weight decay");
    t_train.add("grad_clip", "1", "global gradient-norm clip (0 disables)");
    t_train.add("ema_decay", "0", "parameter EMA decay (0 disables)");
    t_train.add("eval_every", "100", "validation interval in steps");
    t_train.add("eval_seqs", "128", "validation sequences per eval");
    t_train.add("threads", "0", "worker threads (0 = hardware)");
    t_train.add("epochs", "0", "epoch mode: sweep the dataset this many times");
    t_train.add("log_wall_time", "false", "record wall time in metrics.csv (breaks byte-reproducibility)");
    t_train.add("resume", "", "train-state checkpoint to resume from");
    t_train.add("seed", "42", "random seed");
    CommonArgs a_train;
    std::string flag_objective;
    int64_t flag_steps = -1;
    CLI::App * s_train = app.add_subcommand("train", "train a model");
    a_train.attach(s_train, "runs/train");
    s_train->add_option("--objective", flag_objective, "shortcut for --set objective=...");
    s_train->add_option("--steps", flag_steps, "shortcut for --set steps=...");
    s_train->footer(t_train.help_text());

    // --- eval-ppl ---
    KeyTable t_eval;
    add_corpus_keys(t_eval);
    t_eval.add("ckpt", "", "checkpoint to evaluate (required)");
    t_eval.add("mode", "", "arm | card (default: the checkpoint's objective)");
    t_eval.add("split", "validation", "train | validation");
    t_eval.add("threads", "0", "worker threads (0 = hardware)");
    t_eval.add("seed", "42", "random seed");
    CommonArgs a_eval;
    std::string flag_ckpt_eval;
    CLI::App * s_eval = app.add_subcommand("eval-ppl", "perplexity on held-out data");
    a_eval.attach(s_eval, "runs/eval-ppl");
    s_eval->add_option("--ckpt", flag_ckpt_eval, "shortcut for --set ckpt=...");
    s_eval->footer(t_eval.help_text());

    // --- generate ---
    KeyTable t_gen;
    t_gen.add("ckpt", "", "causal checkpoint to decode from (required)");
    t_gen.add("prompt", "", "UTF-8 prompt text");
    t_gen.add("max_new_tokens", "64", "token budget");
    t_gen.add("K", "16", "block size");
    t_gen.add("tau", "0.9", "confidence threshold");
    t_gen.add("t_max", "16", "max denoise iterations per block");
    t_gen.add("temperature", "0", "sampling temperature (0 = greedy)");
    t_gen.add("trace", "", "JSON-lines decode trace: file path or '-' for stdout");
    t_gen.add("arm", "false", "use plain autoregressive decoding instead of block decoding");
    t_gen.add("seed", "42", "random seed");
    CommonArgs a_gen;
    std::string flag_ckpt_gen, flag_prompt;
    int64_t flag_K = -1;
    CLI::App * s_gen = app.add_subcommand("generate", "generate text from a checkpoint");
    a_gen.attach(s_gen, "runs/generate");
    s_gen->add_option("--ckpt", flag_ckpt_gen, "shortcut for --set ckpt=...");
    s_gen->add_option("--prompt", flag_prompt, "shortcut for --set prompt=...");
    s_gen->add_option("--K", flag_K, "shortcut for --set K=...");
    s_gen->footer(t_gen.help_text());

    // --- bench-train ---
    KeyTable t_bt;
    add_objective_keys(t_bt);
    add_model_keys(t_bt);
    add_corpus_keys(t_bt);
    t_bt.add("batch_size", "32", "sequences per step");
    t_bt.add("warmup", "3", "untimed warmup steps per objective");
    t_bt.add("measure_steps", "15", "timed steps per objective");
    t_bt.add("threads", "0", "worker threads (0 = hardware)");
    t_bt.add("seed", "42", "random seed");
    CommonArgs a_bt;
    CLI::App * s_bt = app.add_subcommand("bench-train", "per-step training cost across objectives");
    a_bt.attach(s_bt, "runs/bench-train");
    s_bt->footer(t_bt.help_text());

    // --- bench-decode ---
    KeyTable t_bd;
    add_corpus_keys(t_bd);
    t_bd.add("ckpt", "", "causal checkpoint (required)");
    t_bd.add("grid", "16:16,16:8,32:8", "comma-separated K:T_max settings");
    t_bd.add("tau", "0.9", "confidence threshold");
    t_bd.add("n_prompts", "16", "held-out prompts");
    t_bd.add("prompt_len", "8", "prompt tokens per prompt");
    t_bd.add("gen_tokens", "64", "tokens generated per prompt");
    t_bd.add("seed", "42", "random seed");
    CommonArgs a_bd;
    std::string flag_ckpt_bd;
    CLI::App * s_bd = app.add_subcommand("bench-decode", "speed-vs-quality grid for block decoding");
    a_bd.attach(s_bd, "runs/bench-decode");
    s_bd->add_option("--ckpt", flag_ckpt_bd, "shortcut for --set ckpt=...");
    s_bd->footer(t_bd.help_text());

    // --- analyze ---
    CLI::App * s_an = app.add_subcommand("analyze", "numerical verification reports");
    s_an->require_subcommand(1);

    KeyTable t_cx;
    t_cx.add("L", "8", "sequence length");
    t_cx.add("K", "1", "block size (must divide L)");
    t_cx.add("seed", "42", "unused; kept for uniform invocation");
    CommonArgs a_cx;
    int64_t flag_cx_L = -1, flag_cx_K = -1;
    CLI::App * s_cx = s_an->add_subcommand("complexity", "learnable-context counts");
    a_cx.attach(s_cx, "runs/analyze-complexity");
    s_cx->add_option("--L", flag_cx_L, "shortcut for --set L=...");
    s_cx->add_option("--K", flag_cx_K, "shortcut for --set K=...");
    s_cx->footer(t_cx.help_text());

    KeyTable t_mi;
    t_mi.add("L", "16", "sequence length (<= 32)");
    t_mi.add("samples", "10000", "mask draws per strategy and t");
    t_mi.add("stay", "0.9", "2-state chain stay probability");
    t_mi.add("t", "0.25,0.5,0.75", "noise times, comma separated");
    t_mi.add("tail_lambda", "1.25", "soft-tail window factor for the comparison");
    t_mi.add("seed", "42", "random seed");
    CommonArgs a_mi;
    CLI::App * s_mi = s_an->add_subcommand("mi", "retained mutual information: soft tail vs uniform");
    a_mi.attach(s_mi, "runs/analyze-mi");
    s_mi->footer(t_mi.help_text());

    KeyTable t_ct;
    t_ct.add("strategy", "soft_tail", "soft_tail | strict_tail | uniform | block");
    t_ct.add("L", "64", "sequence length");
    t_ct.add("samples", "100000", "mask draws");
    t_ct.add("tail_lambda", "2", "soft-tail window factor");
    t_ct.add("block_size", "16", "block size (block strategy)");
    t_ct.add("block_index", "2", "profiled block (block strategy)");
    t_ct.add("t", "-1", "fixed noise time; negative samples t ~ U[0,1]");
    t_ct.add("seed", "42", "random seed");
    CommonArgs a_ct;
    CLI::App * s_ct = s_an->add_subcommand("continuity", "per-position mask-marginal profile");
    a_ct.attach(s_ct, "runs/analyze-continuity");
    s_ct->footer(t_ct.help_text());

    KeyTable t_wt;
    t_wt.add("L", "32", "sequence length");
    t_wt.add("patterns", "2000", "mask patterns for the bound check");
    t_wt.add("grad_seqs", "8", "sequences for the gradient-norm measurement");
    t_wt.add("weight_p", "0.5", "ambiguity decay p");
    t_wt.add("weight_beta", "1", "weight smoothing beta");
    t_wt.add("weight_variant", "strict_prefix", "score variant");
    t_wt.add("seed", "42", "random seed");
    CommonArgs a_wt;
    CLI::App * s_wt = s_an->add_subcommand("weights", "weight bound and gradient damping report");
    a_wt.attach(s_wt, "runs/analyze-weights");
    s_wt->footer(t_wt.help_text());

    // --- inspect-mask ---
    KeyTable t_im;
    t_im.add("strategy", "soft_tail", "soft_tail | strict_tail | uniform | block | none");
    t_im.add("L", "16", "sequence length");
    t_im.add("n", "10", "samples to print");
    t_im.add("tail_lambda", "2", "soft-tail window factor");
    t_im.add("block_size", "4", "block size (block strategy)");
    t_im.add("block_index", "1", "masked block (block strategy)");
    t_im.add("t", "-1", "fixed noise time; negative samples t per line");
    t_im.add("weights", "false", "append S=... w=... columns");
    t_im.add("weight_p", "0.5", "ambiguity decay p");
    t_im.add("weight_beta", "1", "weight smoothing beta");
    t_im.add("weight_variant", "strict_prefix", "score variant");
    t_im.add("seed", "42", "random seed");
    CommonArgs a_im;
    int64_t flag_im_L = -1, flag_im_n = -1;
    CLI::App * s_im = app.add_subcommand("inspect-mask", "dump corruption samples");
    a_im.attach(s_im, "runs/inspect-mask");
    s_im->add_option("--L", flag_im_L, "shortcut for --set L=...");
    s_im->add_option("--n", flag_im_n, "shortcut for --set n=...");
    s_im->footer(t_im.help_text());

    try {
        app.parse(argc, argv);

        auto finish = [](KeyTable & table, const CommonArgs & args, const std::string & sub,
                         auto && handler) -> int {
            args.resolve(table);
            write_snapshot(table, args.out_dir, sub);
            return handler(table, args.out_dir);
        };

        if (s_train->parsed()) {
            a_train.resolve(t_train);
            if (!flag_objective.empty()) t_train.set("objective", flag_objective);
            if (flag_steps >= 0) t_train.set("steps", std::to_string(flag_steps));
            write_snapshot(t_train, a_train.out_dir, "train");
            return cmd_train(t_train, a_train.out_dir);
        }
        if (s_eval->parsed()) {
            a_eval.resolve(t_eval);
            if (!flag_ckpt_eval.empty()) t_eval.set("ckpt", flag_ckpt_eval);
            write_snapshot(t_eval, a_eval.out_dir, "eval-ppl");
            return cmd_eval_ppl(t_eval, a_eval.out_dir);
        }
        if (s_gen->parsed()) {
            a_gen.resolve(t_gen);
            if (!flag_ckpt_gen.empty()) t_gen.set("ckpt", flag_ckpt_gen);
            if (s_gen->count("--prompt")) t_gen.set("prompt", flag_prompt);
            if (flag_K >= 0) t_gen.set("K", std::to_string(flag_K));
            write_snapshot(t_gen, a_gen.out_dir, "generate");
            return cmd_generate(t_gen, a_gen.out_dir);
        }
        if (s_bt->parsed()) return finish(t_bt, a_bt, "bench-train", cmd_bench_train);
        if (s_bd->parsed()) {
            a_bd.resolve(t_bd);
            if (!flag_ckpt_bd.empty()) t_bd.set("ckpt", flag_ckpt_bd);
            write_snapshot(t_bd, a_bd.out_dir, "bench-decode");
            return cmd_bench_decode(t_bd, a_bd.out_dir);
        }
        if (s_cx->parsed()) {
            a_cx.resolve(t_cx);
            if (flag_cx_L >= 0) t_cx.set("L", std::to_string(flag_cx_L));
            if (flag_cx_K >= 0) t_cx.set("K", std::to_string(flag_cx_K));
            write_snapshot(t_cx, a_cx.out_dir, "analyze complexity");
            return cmd_analyze_complexity(t_cx, a_cx.out_dir);
        }
        if (s_mi->parsed()) return finish(t_mi, a_mi, "analyze mi", cmd_analyze_mi);
        if (s_ct->parsed()) return finish(t_ct, a_ct, "analyze continuity", cmd_analyze_continuity);
        if (s_wt->parsed()) return finish(t_wt, a_wt, "analyze weights", cmd_analyze_weights);
        if (s_im->parsed()) {
            a_im.resolve(t_im);
            if (flag_im_L >= 0) t_im.set("L", std::to_string(flag_im_L));
            if (flag_im_n >= 0) t_im.set("n", std::to_string(flag_im_n));
            write_snapshot(t_im, a_im.out_dir, "inspect-mask");
            return cmd_inspect_mask(t_im, a_im.out_dir);
        }
        return 0;
    } catch (const CLI::ParseError & e) {
        return app.exit(e) == 0 ? 0 : 1;
    } catch (const usage_error & e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 1;
    } catch (const std::exception & e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}
