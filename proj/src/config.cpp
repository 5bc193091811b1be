#include "omoe/config.hpp"

#include <fstream>
#include <initializer_list>
#include <sstream>

#include <json.hpp>

#include "omoe/errors.hpp"

namespace omoe {

using nlohmann::json;

namespace {

void check_keys(const json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
    if (!obj.is_object()) throw ConfigError(where + ": expected an object");
    for (const auto& [key, value] : obj.items()) {
        bool known = false;
        for (const char* a : allowed) known = known || key == a;
        if (!known) throw ConfigError(where + ": unknown key '" + key + "'");
    }
}

template <typename T>
void read(const json& obj, const char* key, T& out) {
    if (obj.contains(key)) out = obj.at(key).get<T>();
}

json objectives_to_json(const std::vector<DenoiserSpec>& specs) {
    json arr = json::array();
    for (const auto& s : specs) {
        json o;
        switch (s.kind) {
            case ObjectiveKind::causal_lm: o["kind"] = "causal_lm"; break;
            case ObjectiveKind::prefix_lm:
                o["kind"] = "prefix_lm";
                o["r"] = s.mask_ratio;
                break;
            case ObjectiveKind::span_corrupt:
                o["kind"] = "span_corrupt";
                o["mu"] = s.mean_span;
                o["r"] = s.mask_ratio;
                break;
        }
        o["weight"] = s.mix_weight;
        arr.push_back(o);
    }
    return arr;
}

std::vector<DenoiserSpec> objectives_from_json(const json& j, const std::string& where) {
    if (j.is_string()) {
        const auto name = j.get<std::string>();
        if (name == "ul2") return ul2_mixture();
        if (name == "causal_lm") return causal_mixture();
        throw ConfigError(where + ": unknown objective preset '" + name + "' (ul2, causal_lm)");
    }
    if (!j.is_array()) throw ConfigError(where + ": objectives must be a preset name or a list");
    std::vector<DenoiserSpec> specs;
    for (const auto& o : j) {
        check_keys(o, {"kind", "mu", "r", "weight"}, where);
        DenoiserSpec s;
        const auto kind = o.at("kind").get<std::string>();
        if (kind == "causal_lm") s.kind = ObjectiveKind::causal_lm;
        else if (kind == "prefix_lm") s.kind = ObjectiveKind::prefix_lm;
        else if (kind == "span_corrupt") s.kind = ObjectiveKind::span_corrupt;
        else throw ConfigError(where + ": unknown objective kind '" + kind + "'");
        read(o, "mu", s.mean_span);
        read(o, "r", s.mask_ratio);
        read(o, "weight", s.mix_weight);
        specs.push_back(s);
    }
    return specs;
}

void parse_model(const json& j, ModelConfig& m) {
    check_keys(j,
               {"hidden", "ffn_hidden", "heads", "head_dim", "layers", "vocab", "moe_every", "max_seq_len", "rope_base",
                "prefix_bidirectional", "router", "loss_weights"},
               "model");
    read(j, "hidden", m.hidden);
    read(j, "ffn_hidden", m.ffn_hidden);
    read(j, "heads", m.heads);
    read(j, "head_dim", m.head_dim);
    read(j, "layers", m.layers);
    read(j, "vocab", m.vocab);
    read(j, "moe_every", m.moe_every);
    read(j, "max_seq_len", m.max_seq_len);
    read(j, "rope_base", m.rope_base);
    read(j, "prefix_bidirectional", m.prefix_bidirectional);
    if (j.contains("router")) {
        const json& r = j.at("router");
        check_keys(r, {"num_experts", "top_k", "capacity_factor", "drop_policy"}, "model.router");
        read(r, "num_experts", m.router.num_experts);
        read(r, "top_k", m.router.top_k);
        read(r, "capacity_factor", m.router.capacity_factor);
        if (r.contains("drop_policy") && r.at("drop_policy").get<std::string>() != "position_priority")
            throw ConfigError("model.router: unsupported drop_policy '" + r.at("drop_policy").get<std::string>() + "'");
    }
    if (j.contains("loss_weights")) {
        const json& w = j.at("loss_weights");
        check_keys(w, {"balance", "z_logits", "z_router"}, "model.loss_weights");
        read(w, "balance", m.weights.balance);
        read(w, "z_logits", m.weights.z_logits);
        read(w, "z_router", m.weights.z_router);
    }
}

void parse_train(const json& j, TrainConfig& t) {
    check_keys(j,
               {"batch_size", "seq_len", "steps", "peak_lr", "warmup_steps", "checkpoint_every", "seed", "clip_norm",
                "beta1", "beta2", "eps"},
               "train");
    read(j, "batch_size", t.batch_size);
    read(j, "seq_len", t.seq_len);
    read(j, "steps", t.steps);
    read(j, "peak_lr", t.peak_lr);
    read(j, "warmup_steps", t.warmup_steps);
    read(j, "checkpoint_every", t.checkpoint_every);
    read(j, "seed", t.seed);
    read(j, "clip_norm", t.clip_norm);
    read(j, "beta1", t.beta1);
    read(j, "beta2", t.beta2);
    read(j, "eps", t.eps);
}

}  // namespace

void RunConfig::validate(bool check_paths) const {
    model.validate();
    train.validate();
    if (train.seq_len > model.max_seq_len)
        throw ConfigError("train.seq_len " + std::to_string(train.seq_len) + " exceeds model.max_seq_len " +
                          std::to_string(model.max_seq_len));
    mixture.validate();
    for (const auto& phase : mixture.phases)
        for (const auto& d : phase.domains)
            if (!corpora.contains(d.domain)) throw ConfigError("data: no corpus file for domain '" + d.domain + "'");
    if (check_paths)
        for (const auto& [domain, path] : corpora)
            if (!std::filesystem::exists(path))
                throw ConfigError("data.corpora: file for '" + domain + "' does not exist: " + path.string());
}

RunConfig parse_run_config(std::string_view json_text, const std::filesystem::path& base_dir) {
    RunConfig cfg;
    try {
        const json root = json::parse(json_text);
        check_keys(root, {"model", "train", "data"}, "config");
        if (root.contains("model")) parse_model(root.at("model"), cfg.model);
        if (root.contains("train")) parse_train(root.at("train"), cfg.train);
        if (root.contains("data")) {
            const json& d = root.at("data");
            check_keys(d, {"corpora", "schedule"}, "data");
            if (d.contains("corpora")) {
                if (!d.at("corpora").is_object()) throw ConfigError("data.corpora: expected an object");
                for (const auto& [domain, path] : d.at("corpora").items()) {
                    std::filesystem::path p = path.get<std::string>();
                    cfg.corpora[domain] = p.is_absolute() || base_dir.empty() ? p : base_dir / p;
                }
            }
            if (d.contains("schedule")) {
                if (!d.at("schedule").is_array()) throw ConfigError("data.schedule: expected a list of phases");
                for (const auto& ph : d.at("schedule")) {
                    check_keys(ph, {"start_step", "domains", "objectives"}, "data.schedule");
                    MixturePhase phase;
                    read(ph, "start_step", phase.start_step);
                    if (!ph.contains("domains") || !ph.at("domains").is_object())
                        throw ConfigError("data.schedule: each phase needs a domains object");
                    for (const auto& [domain, ratio] : ph.at("domains").items())
                        phase.domains.push_back({domain, ratio.get<double>()});
                    phase.objectives = ph.contains("objectives")
                                           ? objectives_from_json(ph.at("objectives"), "data.schedule.objectives")
                                           : causal_mixture();
                    cfg.mixture.phases.push_back(std::move(phase));
                }
            }
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read config " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    RunConfig cfg = parse_run_config(ss.str(), std::filesystem::absolute(path).parent_path());
    cfg.validate(true);
    return cfg;
}

std::string dump_run_config(const RunConfig& cfg) {
    const ModelConfig& m = cfg.model;
    const TrainConfig& t = cfg.train;
    json root;
    root["model"] = {
        {"hidden", m.hidden},
        {"ffn_hidden", m.ffn_hidden},
        {"heads", m.heads},
        {"head_dim", m.head_dim},
        {"layers", m.layers},
        {"vocab", m.vocab},
        {"moe_every", m.moe_every},
        {"max_seq_len", m.max_seq_len},
        {"rope_base", m.rope_base},
        {"prefix_bidirectional", m.prefix_bidirectional},
        {"router",
         {{"num_experts", m.router.num_experts},
          {"top_k", m.router.top_k},
          {"capacity_factor", m.router.capacity_factor},
          {"drop_policy", "position_priority"}}},
        {"loss_weights", {{"balance", m.weights.balance}, {"z_logits", m.weights.z_logits}, {"z_router", m.weights.z_router}}},
    };
    root["train"] = {
        {"batch_size", t.batch_size}, {"seq_len", t.seq_len},     {"steps", t.steps},
        {"peak_lr", t.peak_lr},       {"warmup_steps", t.warmup_steps}, {"checkpoint_every", t.checkpoint_every},
        {"seed", t.seed},             {"clip_norm", t.clip_norm}, {"beta1", t.beta1},
        {"beta2", t.beta2},           {"eps", t.eps},
    };
    json corpora = json::object();
    for (const auto& [domain, path] : cfg.corpora) corpora[domain] = path.string();
    json schedule = json::array();
    for (const auto& ph : cfg.mixture.phases) {
        json domains = json::object();
        for (const auto& d : ph.domains) domains[d.domain] = d.ratio;
        schedule.push_back({{"start_step", ph.start_step}, {"domains", domains}, {"objectives", objectives_to_json(ph.objectives)}});
    }
    root["data"] = {{"corpora", corpora}, {"schedule", schedule}};
    return root.dump(2) + "\n";
}

CorpusSet load_corpora(const RunConfig& cfg) {
    CorpusSet set;
    for (const auto& [domain, path] : cfg.corpora) {
        Corpus c = read_corpus(path);
        if (c.domain != domain)
            throw ConfigError("corpus " + path.string() + " is tagged '" + c.domain + "', configured as '" + domain + "'");
        set.emplace(domain, std::move(c));
    }
    return set;
}

}  // namespace omoe
