#include "omoe/training.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <sstream>

#include "omoe/errors.hpp"

namespace omoe {

void TrainConfig::validate() const {
    if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
    if (seq_len < 2) throw ConfigError("train: seq_len must be at least 2");
    if (steps == 0) throw ConfigError("train: steps must be positive");
    if (!(peak_lr > 0.0)) throw ConfigError("train: peak_lr must be positive");
    if (warmup_steps == 0 || warmup_steps >= steps)
        throw ConfigError("train: warmup_steps must be positive and below steps");
    if (!(clip_norm > 0.0)) throw ConfigError("train: clip_norm must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train: betas must lie in [0,1)");
    if (!(eps > 0.0)) throw ConfigError("train: eps must be positive");
}

double lr_at(std::size_t step, const TrainConfig& cfg) {
    const auto s = static_cast<double>(step), w = static_cast<double>(cfg.warmup_steps);
    if (step < cfg.warmup_steps) return cfg.peak_lr * s / w;
    return cfg.peak_lr * std::sqrt(w / s);
}

double clip_global_norm(ParameterStore& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& [name, g] : grads)
        for (double v : g.data()) sq += v * v;
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const double factor = max_norm / norm;
        for (auto& [name, g] : grads)
            for (double& v : g.data()) v *= factor;
    }
    return norm;
}

void adam_update(ParameterStore& params, const ParameterStore& grads, AdamState& state, double lr,
                 const TrainConfig& cfg) {
    ++state.t;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    for (auto& [name, p] : params) {
        if (!grads.contains(name)) continue;
        const Tensor& g = grads.get(name);
        if (!state.m.contains(name)) {
            state.m.set(name, Tensor(p.shape(), 0.0));
            state.v.set(name, Tensor(p.shape(), 0.0));
        }
        auto m = state.m.get(name).data();
        auto v = state.v.get(name).data();
        auto w = p.data();
        const auto gd = g.data();
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gd[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gd[i] * gd[i];
            w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.eps);
        }
    }
}

// ---- checkpoints ---------------------------------------------------------------

namespace {

class ByteWriter {
public:
    void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void str(const std::string& s) {
        u64(s.size());
        buf_ += s;
    }
    void raw(const char* p, std::size_t n) { buf_.append(p, n); }
    const std::string& bytes() const { return buf_; }

private:
    std::string buf_;
};

class ByteReader {
public:
    explicit ByteReader(std::string data) : data_(std::move(data)) {}
    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(data_[pos_++]);
    }
    std::uint32_t u32() {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string str() {
        const std::uint64_t n = u64();
        need(n);
        std::string s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == data_.size(); }

private:
    void need(std::uint64_t n) const {
        if (n > data_.size() - pos_) throw DecodeError("checkpoint: truncated file");
    }
    std::string data_;
    std::size_t pos_ = 0;
};

constexpr std::uint8_t kDtypeF64 = 1;

void write_tensors(ByteWriter& w, const ParameterStore& store) {
    w.u64(store.size());
    for (const auto& [name, t] : store) {
        w.str(name);
        w.u8(kDtypeF64);
        w.u32(static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape()) w.u64(d);
        for (double v : t.data()) w.f64(v);
    }
}

ParameterStore read_tensors(ByteReader& r) {
    ParameterStore store;
    const std::uint64_t count = r.u64();
    for (std::uint64_t i = 0; i < count; ++i) {
        std::string name = r.str();
        if (r.u8() != kDtypeF64) throw DecodeError("checkpoint: tensor '" + name + "' has an unsupported dtype");
        const std::uint32_t rank = r.u32();
        Shape shape(rank);
        for (auto& d : shape) d = r.u64();
        std::vector<double> data(shape_numel(shape));
        for (double& v : data) v = r.f64();
        store.set(std::move(name), Tensor(std::move(shape), std::move(data)));
    }
    return store;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    ByteWriter w;
    w.raw("OMOE", 4);
    w.u32(kCheckpointVersion);
    w.str(ckpt.config_json);
    w.u64(ckpt.step);
    write_tensors(w, ckpt.params);
    w.u64(ckpt.optimizer.t);
    write_tensors(w, ckpt.optimizer.m);
    write_tensors(w, ckpt.optimizer.v);

    // Write-then-rename so a crash never leaves a half-written checkpoint behind.
    const auto tmp = std::filesystem::path(path).concat(".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write checkpoint " + path.string());
        out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
        if (!out.flush()) throw IoError("failed writing checkpoint " + path.string());
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read checkpoint " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    ByteReader r(ss.str());
    std::string magic;
    for (int i = 0; i < 4; ++i) magic.push_back(static_cast<char>(r.u8()));
    if (magic != "OMOE") throw DecodeError("checkpoint " + path.string() + ": bad magic");
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw DecodeError("checkpoint " + path.string() + ": unsupported format version " + std::to_string(version));
    Checkpoint ckpt;
    ckpt.config_json = r.str();
    ckpt.step = r.u64();
    ckpt.params = read_tensors(r);
    ckpt.optimizer.t = r.u64();
    ckpt.optimizer.m = read_tensors(r);
    ckpt.optimizer.v = read_tensors(r);
    if (!r.done()) throw DecodeError("checkpoint " + path.string() + ": trailing bytes");
    return ckpt;
}

// ---- training ------------------------------------------------------------------

TrainSession new_session(const ModelConfig& model_cfg, const TrainConfig& cfg) {
    cfg.validate();
    if (cfg.seq_len > model_cfg.max_seq_len)
        throw ConfigError("train: seq_len " + std::to_string(cfg.seq_len) + " exceeds model max_seq_len " +
                          std::to_string(model_cfg.max_seq_len));
    TrainSession s{Model::initialize(model_cfg, cfg.seed), {}, 0};
    for (const auto& [name, p] : s.model.params()) {
        s.optimizer.m.set(name, Tensor(p.shape(), 0.0));
        s.optimizer.v.set(name, Tensor(p.shape(), 0.0));
    }
    return s;
}

TrainSession restore_session(const ModelConfig& model_cfg, const Checkpoint& ckpt) {
    return TrainSession{Model(model_cfg, ckpt.params), ckpt.optimizer, ckpt.step};
}

Checkpoint make_checkpoint(const TrainSession& session, std::string config_json) {
    return Checkpoint{std::move(config_json), session.step, session.model.params(), session.optimizer};
}

namespace {

bool all_finite(const Tensor& t) {
    for (double v : t.data())
        if (!std::isfinite(v)) return false;
    return true;
}

}  // namespace

StepMetrics train_step(TrainSession& session, const TrainConfig& cfg, const TrainData& data) {
    const std::size_t step = session.step + 1;
    Model& model = session.model;
    const auto examples = sample_batch(data.corpora, data.mixture, step, cfg.batch_size, cfg.seq_len, cfg.seed);
    const Batch batch = make_batch(examples, cfg.seq_len, model.config().prefix_bidirectional,
                                   (step - 1) * cfg.batch_size);

    StepMetrics m;
    m.step = step;
    m.lr = lr_at(step, cfg);
    ad::Tape tape;
    const BoundParams bound = model.bind(tape);
    ParameterStore grads;
    try {
        ForwardResult fr = model.forward(bound, batch);
        LossParts lp = total_loss(fr.logits, batch.labels, fr.aux, model.config().weights);
        m.loss_ce = lp.ce;
        m.loss_b = lp.balance;
        m.loss_zr = lp.z_router;
        m.loss_zl = lp.z_logits;
        m.acc = token_accuracy(fr.logits.value(), batch.labels).value();
        m.drop_frac = fr.routed_assignments
                          ? static_cast<double>(fr.dropped_assignments) / static_cast<double>(fr.routed_assignments)
                          : 0.0;
        if (!std::isfinite(lp.total.value().item()))
            throw NumericError("non-finite loss");
        const ad::GradientMap g = tape.backward(lp.total);
        for (const auto& [name, var] : bound) {
            Tensor t = g.contains(var.id()) ? g.at(var) : Tensor(var.shape(), 0.0);
            if (!all_finite(t)) throw NumericError("non-finite gradient for " + name);
            grads.set(name, std::move(t));
        }
    } catch (const NumericError& e) {
        char buf[256];
        std::snprintf(buf, sizeof buf, "step %zu: %s (ce=%g balance=%g z_router=%g z_logits=%g lr=%g)", step, e.what(),
                      m.loss_ce, m.loss_b, m.loss_zr, m.loss_zl, m.lr);
        throw NumericError(buf);
    }
    clip_global_norm(grads, cfg.clip_norm);
    adam_update(model.params(), grads, session.optimizer, m.lr, cfg);
    session.step = step;
    return m;
}

void train(TrainSession& session, const TrainConfig& cfg, const TrainData& data, const TrainHooks& hooks) {
    cfg.validate();
    data.mixture.validate();
    while (session.step < cfg.steps) {
        const StepMetrics m = train_step(session, cfg, data);
        if (hooks.on_step) hooks.on_step(m);
        const bool due = cfg.checkpoint_every > 0 && session.step % cfg.checkpoint_every == 0;
        if (hooks.on_checkpoint && (due || session.step == cfg.steps)) hooks.on_checkpoint(session);
    }
}

// ---- metrics ---------------------------------------------------------------------

std::string format_metrics_row(const StepMetrics& m) {
    char buf[512];
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", m.step, m.loss_ce, m.loss_b,
                  m.loss_zr, m.loss_zl, m.acc, m.drop_frac, m.lr);
    return buf;
}

namespace {

StepMetrics parse_metrics_row(const std::string& line) {
    StepMetrics m;
    std::istringstream ss(line);
    std::string field;
    std::vector<std::string> f;
    while (std::getline(ss, field, ',')) f.push_back(field);
    if (f.size() != 8) throw DecodeError("metrics: malformed row '" + line + "'");
    try {
        m.step = std::stoull(f[0]);
        double* slots[] = {&m.loss_ce, &m.loss_b, &m.loss_zr, &m.loss_zl, &m.acc, &m.drop_frac, &m.lr};
        for (std::size_t i = 0; i < 7; ++i) *slots[i] = std::strtod(f[i + 1].c_str(), nullptr);
    } catch (const std::exception&) {
        throw DecodeError("metrics: malformed row '" + line + "'");
    }
    return m;
}

}  // namespace

MetricsWriter::MetricsWriter(const std::filesystem::path& path, std::optional<std::size_t> resume_after) {
    std::vector<std::string> kept;
    if (resume_after && std::filesystem::exists(path)) {
        for (const StepMetrics& m : read_metrics(path))
            if (m.step <= *resume_after) kept.push_back(format_metrics_row(m));
    }
    out_.open(path, std::ios::binary | std::ios::trunc);
    if (!out_) throw IoError("cannot write metrics " + path.string());
    out_ << kHeader << '\n';
    for (const auto& row : kept) out_ << row << '\n';
}

void MetricsWriter::write(const StepMetrics& m) { out_ << format_metrics_row(m) << '\n'; }

void MetricsWriter::flush() {
    if (!out_.flush()) throw IoError("failed writing metrics");
}

std::vector<StepMetrics> read_metrics(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read metrics " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != MetricsWriter::kHeader)
        throw DecodeError("metrics " + path.string() + ": unexpected header");
    std::vector<StepMetrics> rows;
    while (std::getline(in, line))
        if (!line.empty()) rows.push_back(parse_metrics_row(line));
    return rows;
}

// ---- evaluation ----------------------------------------------------------------

EvalResult evaluate(const Model& model, std::span<const TrainingExample> examples, std::size_t seq_len,
                    std::size_t batch_size, const ForwardOptions& options) {
    if (batch_size == 0) throw ConfigError("evaluate: batch_size must be positive");
    EvalResult out;
    for (std::size_t start = 0; start < examples.size(); start += batch_size) {
        const auto chunk = examples.subspan(start, std::min(batch_size, examples.size() - start));
        const Batch batch = make_batch(chunk, seq_len, model.config().prefix_bidirectional, start);
        ad::Tape tape;
        ForwardResult fr = model.forward(model.bind(tape, false), batch, options);
        const AccuracyStats acc = token_accuracy(fr.logits.value(), batch.labels);
        out.accuracy.correct += acc.correct;
        out.accuracy.total += acc.total;
        out.routed_assignments += fr.routed_assignments;
        out.dropped_assignments += fr.dropped_assignments;
        std::move(fr.trace.begin(), fr.trace.end(), std::back_inserter(out.trace));
    }
    return out;
}

}  // namespace omoe
