#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <optional>

#include "omoe/analysis.hpp"
#include "omoe/config.hpp"
#include "omoe/data.hpp"
#include "omoe/errors.hpp"
#include "omoe/moe.hpp"
#include "omoe/training.hpp"

namespace py = pybind11;
using namespace omoe;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
    if (a.ndim() != 2) throw DimensionError("expected a 2-D array");
    const auto r = static_cast<std::size_t>(a.shape(0)), c = static_cast<std::size_t>(a.shape(1));
    return Tensor(Shape{r, c}, std::vector<double>(a.data(), a.data() + r * c));
}

Array to_array(const Tensor& t) {
    Array out({t.rows(), t.cols()});
    std::copy(t.data().begin(), t.data().end(), out.mutable_data());
    return out;
}

template <class T>
py::array_t<T> grid(const std::vector<T>& flat, std::size_t rows, std::size_t cols) {
    py::array_t<T> out({rows, cols});
    std::copy(flat.begin(), flat.end(), out.mutable_data());
    return out;
}

py::dict metrics_dict(const StepMetrics& m) {
    py::dict d;
    d["step"] = m.step;
    d["loss_ce"] = m.loss_ce;
    d["loss_b"] = m.loss_b;
    d["loss_zr"] = m.loss_zr;
    d["loss_zl"] = m.loss_zl;
    d["acc"] = m.acc;
    d["drop_frac"] = m.drop_frac;
    d["lr"] = m.lr;
    return d;
}

// Owns the corpora and mixture that TrainData only references.
class PySession {
public:
    PySession(RunConfig cfg, std::optional<CorpusSet> corpora, const std::optional<Checkpoint>& ckpt)
        : cfg_(checked(std::move(cfg), corpora ? &*corpora : nullptr)),
          corpora_(corpora ? std::move(*corpora) : load_corpora(cfg_)),
          session_(ckpt ? restore_session(cfg_.model, *ckpt) : new_session(cfg_.model, cfg_.train)) {}

    py::dict step() { return metrics_dict(train_step(session_, cfg_.train, {corpora_, cfg_.mixture})); }

    py::list run(std::size_t steps) {
        py::list rows;
        for (std::size_t i = 0; i < steps; ++i) rows.append(step());
        return rows;
    }

    void save(const std::filesystem::path& path) const {
        save_checkpoint(path, make_checkpoint(session_, dump_run_config(cfg_)));
    }

    EvalResult eval(const Corpus& corpus, std::size_t max_windows, std::optional<double> cf, std::size_t batch) const {
        const auto windows = eval_windows(corpus, cfg_.train.seq_len, max_windows);
        return evaluate(session_.model, windows, cfg_.train.seq_len, batch, {cf, true});
    }

    std::size_t completed() const { return session_.step; }
    std::size_t num_params() const { return session_.model.params().num_scalars(); }
    const RunConfig& config() const { return cfg_; }

private:
    // In-memory corpora stand in for the configured files.
    static RunConfig checked(RunConfig cfg, const CorpusSet* corpora) {
        if (!corpora) {
            cfg.validate(true);
            return cfg;
        }
        RunConfig probe = cfg;
        for (const auto& [domain, c] : *corpora) probe.corpora.try_emplace(domain);
        probe.validate(false);
        return cfg;
    }

    RunConfig cfg_;
    CorpusSet corpora_;
    TrainSession session_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
    auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
    py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
    py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
    py::register_exception<NumericError>(m, "NumericError", base.ptr());
    py::register_exception<ContractError>(m, "ContractError", base.ptr());
    py::register_exception<DecodeError>(m, "DecodeError", base.ptr());
    py::register_exception<IoError>(m, "IoError", base.ptr());

    m.attr("VOCAB_SIZE") = kVocabSize;
    m.attr("BYTE_OFFSET") = kByteOffset;
    m.attr("EOS_ID") = kEosId;
    m.attr("PAD_ID") = kPadId;

    // tokenizer and objectives
    m.def("tokenize", [](py::bytes b) { return tokenize(std::string(b)); });
    m.def("detokenize", [](const std::vector<int>& ids) { return py::bytes(detokenize(ids)); });
    m.def("sentinel_id", &sentinel_id);

    py::enum_<ObjectiveKind>(m, "ObjectiveKind")
        .value("causal_lm", ObjectiveKind::causal_lm)
        .value("prefix_lm", ObjectiveKind::prefix_lm)
        .value("span_corrupt", ObjectiveKind::span_corrupt);
    py::class_<DenoiserSpec>(m, "DenoiserSpec")
        .def(py::init([](ObjectiveKind k, double mu, double r, double w) {
                 DenoiserSpec s{k, mu, r, w};
                 s.validate();
                 return s;
             }),
             py::arg("kind"), py::arg("mean_span") = 0.0, py::arg("mask_ratio") = 0.5, py::arg("mix_weight") = 1.0)
        .def_readonly("kind", &DenoiserSpec::kind)
        .def_readonly("mean_span", &DenoiserSpec::mean_span)
        .def_readonly("mask_ratio", &DenoiserSpec::mask_ratio)
        .def_readonly("mix_weight", &DenoiserSpec::mix_weight)
        .def_property_readonly("tag", &DenoiserSpec::tag);
    m.def("ul2_mixture", &ul2_mixture);

    py::class_<Span>(m, "Span").def_readonly("start", &Span::start).def_readonly("length", &Span::length);
    py::class_<SpanCorruption>(m, "SpanCorruption")
        .def_readonly("inputs", &SpanCorruption::inputs)
        .def_readonly("targets", &SpanCorruption::targets)
        .def_readonly("spans", &SpanCorruption::spans);
    m.def(
        "span_corrupt",
        [](const std::vector<int>& tokens, double mu, double r, std::uint64_t seed) {
            std::mt19937_64 rng(seed);
            return draw_span_corruption(tokens, mu, r, rng);
        },
        py::arg("tokens"), py::arg("mean_span"), py::arg("mask_ratio"), py::arg("seed"));
    m.def("splice_back",
          [](const std::vector<int>& inputs, const std::vector<int>& targets) { return splice_back(inputs, targets); });

    // corpora
    py::class_<Corpus>(m, "Corpus")
        .def(py::init<std::string, std::vector<std::string>>(), py::arg("domain"), py::arg("documents"))
        .def_readwrite("domain", &Corpus::domain)
        .def_readwrite("documents", &Corpus::documents);
    m.def("generate_corpus", &generate_corpus, py::arg("domain"), py::arg("docs"), py::arg("seed"));
    m.def("corpus_domains", &corpus_domains);
    m.def("read_corpus", &read_corpus);
    m.def("write_corpus", &write_corpus);

    // MoE layer
    py::class_<RouterConfig>(m, "RouterConfig")
        .def(py::init([](std::size_t e, std::size_t k, double cf) {
                 RouterConfig c{e, k, cf, DropPolicy::position_priority};
                 c.validate();
                 return c;
             }),
             py::arg("num_experts") = 8, py::arg("top_k") = 2, py::arg("capacity_factor") = 1.25)
        .def_readonly("num_experts", &RouterConfig::num_experts)
        .def_readonly("top_k", &RouterConfig::top_k)
        .def_readonly("capacity_factor", &RouterConfig::capacity_factor)
        .def("capacity", &RouterConfig::capacity);

    m.def(
        "route",
        [](const Array& x, const Array& w, const RouterConfig& cfg) {
            const RouterOutput r = route(to_tensor(x), to_tensor(w), cfg);
            py::dict d;
            d["logits"] = to_array(r.logits);
            d["probs"] = to_array(r.probs);
            d["experts"] = grid(r.topk_idx, r.tokens, r.top_k);
            d["gates"] = grid(r.gate_vals, r.tokens, r.top_k);
            d["kept"] = grid(r.kept, r.tokens, r.top_k).attr("astype")("bool");
            d["capacity"] = cfg.capacity(r.tokens);
            return d;
        },
        py::arg("x"), py::arg("router_weights"), py::arg("config"));
    m.def(
        "apply_capacity",
        [](py::array_t<std::size_t, py::array::c_style | py::array::forcecast> experts, std::size_t num_experts,
           std::size_t capacity) {
            if (experts.ndim() != 2) throw DimensionError("expected a [tokens x k] index array");
            const std::vector<std::size_t> flat(experts.data(), experts.data() + experts.size());
            const auto rows = static_cast<std::size_t>(experts.shape(0)), k = static_cast<std::size_t>(experts.shape(1));
            return grid(apply_capacity(flat, k, num_experts, capacity), rows, k).attr("astype")("bool");
        },
        py::arg("experts"), py::arg("num_experts"), py::arg("capacity"));
    m.def(
        "balance_loss",
        [](const Array& probs, py::array_t<std::size_t, py::array::c_style | py::array::forcecast> experts) {
            if (experts.ndim() != 2) throw DimensionError("expected a [tokens x k] index array");
            const std::vector<std::size_t> flat(experts.data(), experts.data() + experts.size());
            return balance_loss_value(to_tensor(probs), flat, static_cast<std::size_t>(experts.shape(1)));
        },
        py::arg("probs"), py::arg("experts"));
    m.def("router_z_loss", [](const Array& logits) { return router_z_loss_value(to_tensor(logits)); });

    // training
    py::class_<RunConfig>(m, "RunConfig")
        .def(py::init<>())
        .def_static("from_json", &parse_run_config, py::arg("text"), py::arg("base_dir") = std::filesystem::path{})
        .def_static("load", &load_run_config)
        .def("to_json", &dump_run_config)
        .def_property_readonly("moe_layers", [](const RunConfig& c) { return c.model.moe_layers(); })
        .def_property_readonly("default_trace_layer", [](const RunConfig& c) { return c.model.default_trace_layer(); })
        .def_property_readonly("num_experts", [](const RunConfig& c) { return c.model.router.num_experts; });

    py::class_<AccuracyStats>(m, "AccuracyStats")
        .def_readonly("correct", &AccuracyStats::correct)
        .def_readonly("total", &AccuracyStats::total)
        .def_property_readonly("value", &AccuracyStats::value);
    py::class_<EvalResult>(m, "EvalResult")
        .def_readonly("accuracy", &EvalResult::accuracy)
        .def_readonly("trace", &EvalResult::trace)
        .def_readonly("routed", &EvalResult::routed_assignments)
        .def_readonly("dropped", &EvalResult::dropped_assignments);

    py::class_<PySession>(m, "Session")
        .def(py::init([](const RunConfig& cfg, std::optional<CorpusSet> corpora) {
                 return PySession(cfg, std::move(corpora), std::nullopt);
             }),
             py::arg("config"), py::arg("corpora") = py::none())
        .def_static(
            "load",
            [](const std::filesystem::path& path, std::optional<CorpusSet> corpora) {
                Checkpoint ckpt = load_checkpoint(path);
                return PySession(parse_run_config(ckpt.config_json), std::move(corpora), ckpt);
            },
            py::arg("path"), py::arg("corpora") = py::none())
        .def("step", &PySession::step)
        .def("run", &PySession::run, py::arg("steps"))
        .def("save", &PySession::save)
        .def("evaluate", &PySession::eval, py::arg("corpus"), py::arg("max_windows") = 512,
             py::arg("capacity_factor") = py::none(), py::arg("batch") = 8)
        .def_property_readonly("steps_done", &PySession::completed)
        .def_property_readonly("num_params", &PySession::num_params)
        .def_property_readonly("config", &PySession::config);

    // routing analysis
    py::class_<TraceRow>(m, "TraceRow")
        .def_readonly("seq_id", &TraceRow::seq_id)
        .def_readonly("position", &TraceRow::position)
        .def_readonly("token_id", &TraceRow::token_id)
        .def_readwrite("domain", &TraceRow::domain)
        .def_readonly("layer", &TraceRow::layer)
        .def_readonly("experts", &TraceRow::experts)
        .def_property_readonly("kept", [](const TraceRow& r) { return std::vector<bool>(r.kept.begin(), r.kept.end()); });
    m.def("read_trace_csv", py::overload_cast<const std::filesystem::path&>(&read_trace_csv));
    m.def("write_trace_csv", py::overload_cast<const std::filesystem::path&, const RoutingTrace&>(&write_trace_csv));

    py::class_<GroupRatios>(m, "GroupRatios")
        .def_readonly("key", &GroupRatios::key)
        .def_readonly("support", &GroupRatios::support)
        .def_readonly("ratios", &GroupRatios::ratios);
    py::class_<SpecializationReport>(m, "SpecializationReport")
        .def_readonly("layer", &SpecializationReport::layer)
        .def_readonly("num_experts", &SpecializationReport::num_experts)
        .def_readonly("groups", &SpecializationReport::groups)
        .def_readonly("warnings", &SpecializationReport::warnings)
        .def("csv", &ratios_csv)
        .def("svg", &ratios_svg);
    m.def(
        "expert_ratios",
        [](const RoutingTrace& t, const std::string& by, std::size_t layer, std::size_t experts, bool dropped,
           bool ranks) { return expert_ratios(t, parse_group_by(by), layer, experts, {dropped, ranks}); },
        py::arg("trace"), py::arg("group_by"), py::arg("layer"), py::arg("num_experts"),
        py::arg("include_dropped") = false, py::arg("all_ranks") = false);

    py::class_<GroupStd>(m, "GroupStd")
        .def_readonly("key", &GroupStd::key)
        .def_readonly("support", &GroupStd::support)
        .def_readonly("std", &GroupStd::std);
    m.def("routing_std", &routing_std, py::arg("report"), py::arg("min_support") = 128);
    m.def("mean_std", [](const std::vector<GroupStd>& s) { return mean_std(s); });

    m.def(
        "top_tokens",
        [](const RoutingTrace& t, std::size_t expert, std::size_t layer, std::size_t n) {
            std::vector<std::pair<int, std::size_t>> out;
            for (const TokenCount& c : top_tokens(t, expert, layer, n)) out.emplace_back(c.token_id, c.count);
            return out;
        },
        py::arg("trace"), py::arg("expert"), py::arg("layer"), py::arg("n") = 10);

    m.def(
        "drop_curve",
        [](const RoutingTrace& t, std::size_t bucket, std::optional<std::size_t> layer) {
            std::map<std::string, std::vector<double>> out;
            for (const auto& [dom, curve] : drop_curve(t, bucket, layer))
                for (const DropBucket& b : curve) out[dom].push_back(b.ratio());
            return out;
        },
        py::arg("trace"), py::arg("bucket_size"), py::arg("layer") = py::none());

    py::class_<OverlapResult>(m, "OverlapResult")
        .def_readonly("common_tokens", &OverlapResult::common_tokens)
        .def_readonly("matching", &OverlapResult::matching)
        .def_readonly("overlap", &OverlapResult::overlap);
    m.def("routing_overlap", &routing_overlap, py::arg("a"), py::arg("b"), py::arg("layer"),
          py::arg("min_support") = 1);

    m.def("corpus_token_stats", [](const Corpus& c) {
        const TokenStats s = corpus_token_stats(c);
        return std::make_pair(s.num_tokens, s.vocab_used);
    });
}
