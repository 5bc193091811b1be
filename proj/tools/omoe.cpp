#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "omoe/analysis.hpp"
#include "omoe/config.hpp"
#include "omoe/errors.hpp"
#include "omoe/training.hpp"

namespace fs = std::filesystem;
using namespace omoe;
using nlohmann::json;

namespace {

enum ExitCode { kOk = 0, kConfig = 2, kRuntime = 3, kNumeric = 4 };

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out || !(out << text) || !out.flush()) throw IoError("cannot write " + path.string());
}

void emit_effective(const json& j) { std::cout << j.dump() << std::endl; }

std::string checkpoint_name(std::size_t step) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "checkpoint_%06zu.omoe", step);
    return buf;
}

// ---- corpus-gen ----------------------------------------------------------------

struct CorpusGenArgs {
    std::string domain;
    std::size_t docs = 1000;
    std::uint64_t seed = 1;
    std::string out;
};

int run_corpus_gen(const CorpusGenArgs& a) {
    emit_effective({{"command", "corpus-gen"}, {"domain", a.domain}, {"docs", a.docs}, {"seed", a.seed}, {"out", a.out}});
    write_corpus(a.out, generate_corpus(a.domain, a.docs, a.seed));
    return kOk;
}

// ---- train ---------------------------------------------------------------------

struct TrainArgs {
    std::string config;
    std::string out_dir;
    std::string resume;
};

int run_train(const TrainArgs& a) {
    std::string out_dir = a.out_dir;
    if (out_dir.empty()) {
        const char* env = std::getenv("OMOE_OUT_DIR");
        if (!env || !*env) throw ConfigError("train: --out-dir not given and OMOE_OUT_DIR unset");
        out_dir = env;
    }
    std::optional<Checkpoint> ckpt;
    if (!a.resume.empty()) ckpt = load_checkpoint(a.resume);

    RunConfig cfg;
    if (!a.config.empty()) {
        cfg = load_run_config(a.config);
    } else if (ckpt) {
        cfg = parse_run_config(ckpt->config_json);
        cfg.validate(true);
    } else {
        throw ConfigError("train: --config is required unless resuming");
    }
    if (cfg.model.vocab < static_cast<std::size_t>(kVocabSize))
        throw ConfigError("model.vocab must be at least " + std::to_string(kVocabSize) + " for the byte tokenizer");

    const std::string effective = dump_run_config(cfg);
    fs::create_directories(out_dir);
    write_text(fs::path(out_dir) / "effective_config.json", effective);
    std::cout << effective << std::flush;

    const CorpusSet corpora = load_corpora(cfg);
    TrainSession session = ckpt ? restore_session(cfg.model, *ckpt) : new_session(cfg.model, cfg.train);
    MetricsWriter metrics(fs::path(out_dir) / "metrics.csv",
                          ckpt ? std::optional<std::size_t>(ckpt->step) : std::optional<std::size_t>(0));

    auto save = [&](const TrainSession& s, const std::string& name) {
        save_checkpoint(fs::path(out_dir) / name, make_checkpoint(s, effective));
    };
    TrainHooks hooks;
    hooks.on_step = [&](const StepMetrics& m) {
        metrics.write(m);
        if (m.step % 100 == 0 || m.step == cfg.train.steps) {
            std::fprintf(stderr, "step %zu ce %.4f acc %.3f drop %.3f lr %.2e\n", m.step, m.loss_ce, m.acc, m.drop_frac,
                         m.lr);
            metrics.flush();
        }
    };
    hooks.on_checkpoint = [&](const TrainSession& s) {
        metrics.flush();
        save(s, checkpoint_name(s.step));
    };
    try {
        train(session, cfg.train, {corpora, cfg.mixture}, hooks);
    } catch (const NumericError&) {
        metrics.flush();
        save(session, "nan_snapshot.omoe");
        throw;
    }
    metrics.flush();
    return kOk;
}

// ---- trace / eval -----------------------------------------------------------------

struct TraceArgs {
    std::string checkpoint;
    std::string corpus;
    std::optional<std::size_t> layer;
    std::optional<double> capacity_factor;
    std::size_t max_seqs = 512;
    std::size_t batch = 8;
    std::string out;
};

struct LoadedModel {
    RunConfig cfg;
    Model model;
};

LoadedModel load_model(const std::string& path) {
    Checkpoint ckpt = load_checkpoint(path);
    RunConfig cfg = parse_run_config(ckpt.config_json);
    cfg.model.validate();
    return {cfg, Model(cfg.model, std::move(ckpt.params))};
}

int run_trace(const TraceArgs& a) {
    LoadedModel lm = load_model(a.checkpoint);
    const ModelConfig& mc = lm.cfg.model;
    const std::size_t layer = a.layer.value_or(mc.default_trace_layer());
    const auto moe = mc.moe_layers();
    if (std::find(moe.begin(), moe.end(), layer) == moe.end()) {
        std::string valid;
        for (std::size_t l : moe) valid += (valid.empty() ? "" : ", ") + std::to_string(l);
        throw ConfigError("layer " + std::to_string(layer) + " is not an MoE layer (valid: " + valid + ")");
    }
    const double cf = a.capacity_factor.value_or(mc.router.capacity_factor);
    emit_effective({{"command", "trace"},
                    {"checkpoint", a.checkpoint},
                    {"corpus", a.corpus},
                    {"layer", layer},
                    {"capacity_factor", cf},
                    {"max_seqs", a.max_seqs},
                    {"seq_len", lm.cfg.train.seq_len},
                    {"out", a.out}});
    const Corpus corpus = read_corpus(a.corpus);
    const auto windows = eval_windows(corpus, lm.cfg.train.seq_len, a.max_seqs);
    if (windows.empty()) throw ConfigError("trace: corpus " + a.corpus + " yields no sequences");
    EvalResult r = evaluate(lm.model, windows, lm.cfg.train.seq_len, a.batch, {cf, true});
    RoutingTrace trace;
    for (TraceRow& row : r.trace)
        if (row.layer == layer) trace.push_back(std::move(row));
    write_trace_csv(fs::path(a.out), trace);
    std::fprintf(stderr, "%zu rows, accuracy %.4f\n", trace.size(), r.accuracy.value());
    return kOk;
}

int run_eval(const TraceArgs& a) {
    LoadedModel lm = load_model(a.checkpoint);
    const double cf = a.capacity_factor.value_or(lm.cfg.model.router.capacity_factor);
    const Corpus corpus = read_corpus(a.corpus);
    const auto windows = eval_windows(corpus, lm.cfg.train.seq_len, a.max_seqs);
    const EvalResult r = evaluate(lm.model, windows, lm.cfg.train.seq_len, a.batch, {cf, false});
    const double drop = r.routed_assignments ? static_cast<double>(r.dropped_assignments) / r.routed_assignments : 0.0;
    emit_effective({{"command", "eval"},
                    {"checkpoint", a.checkpoint},
                    {"corpus", a.corpus},
                    {"capacity_factor", cf},
                    {"max_seqs", a.max_seqs},
                    {"accuracy", r.accuracy.value()},
                    {"predicted_tokens", r.accuracy.total},
                    {"drop_fraction", drop}});
    return kOk;
}

// ---- analyze -------------------------------------------------------------------

struct AnalyzeArgs {
    std::vector<std::string> traces;
    std::vector<std::string> corpora;
    std::string report;
    std::string group_by = "token_id";
    std::optional<std::size_t> layer;
    std::optional<std::size_t> experts;
    std::size_t min_support = 128;
    std::size_t overlap_support = 1;
    std::size_t bucket = 8;
    std::size_t top = 10;
    bool include_dropped = false;
    bool all_ranks = false;
    std::string out;
    std::string svg;
};

std::size_t pick_layer(const RoutingTrace& trace, std::optional<std::size_t> requested) {
    const auto layers = trace_layers(trace);
    if (requested) {
        if (std::find(layers.begin(), layers.end(), *requested) == layers.end())
            throw ConfigError("analyze: trace has no rows for layer " + std::to_string(*requested));
        return *requested;
    }
    if (layers.size() != 1) throw ConfigError("analyze: trace covers several layers; pass --layer");
    return layers.front();
}

int run_analyze(const AnalyzeArgs& a) {
    const std::map<std::string, std::size_t> arity = {{"ratios", 1}, {"std", 1},     {"top-tokens", 1},
                                                      {"drop-curve", 1}, {"overlap", 2}, {"token-stats", 0}};
    auto it = arity.find(a.report);
    if (it == arity.end()) throw ConfigError("analyze: unknown report '" + a.report + "'");
    if (a.traces.size() != it->second)
        throw ConfigError("analyze: report '" + a.report + "' takes " + std::to_string(it->second) + " trace(s), got " +
                          std::to_string(a.traces.size()));
    if (a.report == "token-stats" && a.corpora.empty()) throw ConfigError("analyze: token-stats needs --corpus");

    std::vector<RoutingTrace> traces;
    for (const auto& t : a.traces) traces.push_back(read_trace_csv(fs::path(t)));

    json eff = {{"command", "analyze"}, {"report", a.report}, {"traces", a.traces}, {"out", a.out}};
    std::string csv, svg;
    if (a.report == "token-stats") {
        std::map<std::string, TokenStats> stats;
        for (const auto& path : a.corpora) {
            const Corpus c = read_corpus(path);
            stats[c.domain] = corpus_token_stats(c);
        }
        eff["corpora"] = a.corpora;
        csv = token_stats_csv(stats);
    } else {
        const RoutingTrace& t = traces.front();
        const std::size_t layer = pick_layer(t, a.layer);
        const std::size_t E = a.experts.value_or(infer_num_experts(t));
        validate_trace(t, E);
        eff["layer"] = layer;
        eff["experts"] = E;
        if (a.report == "ratios" || a.report == "std") {
            const GroupBy g = parse_group_by(a.group_by);
            const auto report = expert_ratios(t, g, layer, E, {a.include_dropped, a.all_ranks});
            for (const auto& w : report.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
            eff["group_by"] = group_by_name(g);
            eff["include_dropped"] = a.include_dropped;
            eff["all_ranks"] = a.all_ranks;
            if (a.report == "ratios") {
                csv = ratios_csv(report);
                svg = ratios_svg(report);
            } else {
                eff["min_support"] = a.min_support;
                const auto stds = routing_std(report, a.min_support);
                csv = std_csv(stds);
                std::fprintf(stderr, "mean std %.6f over %zu groups\n", mean_std(stds), stds.size());
            }
        } else if (a.report == "top-tokens") {
            std::map<std::size_t, std::vector<TokenCount>> per;
            for (std::size_t e = 0; e < E; ++e) per[e] = top_tokens(t, e, layer, a.top);
            eff["top"] = a.top;
            csv = top_tokens_csv(per);
        } else if (a.report == "drop-curve") {
            const auto curves = drop_curve(t, a.bucket, layer);
            eff["bucket_size"] = a.bucket;
            csv = drop_curve_csv(curves);
            svg = drop_curve_svg(curves);
        } else {
            eff["min_support"] = a.overlap_support;
            csv = overlap_csv(layer, routing_overlap(t, traces[1], layer, a.overlap_support));
        }
    }
    emit_effective(eff);
    write_text(a.out, csv);
    if (!a.svg.empty()) {
        if (svg.empty()) throw ConfigError("analyze: report '" + a.report + "' has no chart");
        write_text(a.svg, svg);
    }
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Mixture-of-experts toy transformer: corpora, training, routing traces and analyses"};
    app.require_subcommand(1);

    CorpusGenArgs gen;
    auto* c_gen = app.add_subcommand("corpus-gen", "Generate a synthetic corpus file");
    c_gen->add_option("--domain", gen.domain, "text | code | multilingual | chat")->required();
    c_gen->add_option("--docs", gen.docs, "Number of documents");
    c_gen->add_option("--seed", gen.seed, "Generator seed");
    c_gen->add_option("--out", gen.out, "Output corpus file")->required();

    TrainArgs tr;
    auto* c_train = app.add_subcommand("train", "Train a model from a JSON run config");
    c_train->add_option("--config", tr.config, "Run config (JSON)");
    c_train->add_option("--out-dir", tr.out_dir, "Output directory (default: $OMOE_OUT_DIR)");
    c_train->add_option("--resume", tr.resume, "Checkpoint to resume from");

    TraceArgs ta;
    auto* c_trace = app.add_subcommand("trace", "Record routing decisions of one MoE layer over a corpus");
    auto* c_eval = app.add_subcommand("eval", "Token-prediction accuracy of a checkpoint on a corpus");
    for (auto* c : {c_trace, c_eval}) {
        c->add_option("--checkpoint", ta.checkpoint, "Checkpoint file")->required();
        c->add_option("--corpus", ta.corpus, "Corpus file")->required();
        c->add_option("--capacity-factor", ta.capacity_factor, "Override the trained capacity factor");
        c->add_option("--max-seqs", ta.max_seqs, "Maximum number of sequences");
        c->add_option("--batch", ta.batch, "Sequences per forward pass");
    }
    c_trace->add_option("--layer", ta.layer, "MoE layer index (default: third MoE layer)");
    c_trace->add_option("--out", ta.out, "Trace CSV")->required();

    AnalyzeArgs an;
    auto* c_an = app.add_subcommand("analyze", "Reports over routing traces");
    c_an->add_option("--report", an.report, "ratios | std | top-tokens | drop-curve | overlap | token-stats")->required();
    c_an->add_option("--trace", an.traces, "Trace CSV (twice for overlap)");
    c_an->add_option("--corpus", an.corpora, "Corpus files for token-stats");
    c_an->add_option("--group-by", an.group_by, "domain | token_id | position_id | language");
    c_an->add_option("--layer", an.layer, "Layer to analyse when a trace holds several");
    c_an->add_option("--experts", an.experts, "Number of experts (default: inferred)");
    c_an->add_option("--min-support", an.min_support, "Minimum rows per group for std");
    c_an->add_option("--overlap-support", an.overlap_support, "Minimum rows per token for overlap");
    c_an->add_option("--bucket-size", an.bucket, "Positions per drop-curve bucket");
    c_an->add_option("--top", an.top, "Tokens per expert for top-tokens");
    c_an->add_flag("--include-dropped", an.include_dropped, "Count dropped assignments in ratios");
    c_an->add_flag("--all-ranks", an.all_ranks, "Attribute every choice rank in ratios");
    c_an->add_option("--out", an.out, "Report CSV")->required();
    c_an->add_option("--svg", an.svg, "Optional SVG chart (ratios, drop-curve)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfig;
    }

    try {
        if (*c_gen) return run_corpus_gen(gen);
        if (*c_train) return run_train(tr);
        if (*c_trace) return run_trace(ta);
        if (*c_eval) return run_eval(ta);
        if (*c_an) return run_analyze(an);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kConfig;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return kNumeric;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kRuntime;
    }
    return kOk;
}
