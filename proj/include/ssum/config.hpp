#pragma once

#include <fstream>
#include <initializer_list>
#include <string>

#include <json.hpp>

#include "ssum/datasynth.hpp"
#include "ssum/losses.hpp"
#include "ssum/model.hpp"
#include "ssum/rollout.hpp"

namespace ssum {

struct TeacherSpec {
    enum class Kind { Scripted, Model, Remote, Self };
    Kind kind = Kind::Scripted;
    double epsilon = 1e-3;      // scripted
    std::string checkpoint;     // model backend
    std::string address;        // remote backend, HOST:PORT
};

struct StageHparams {
    int steps = 100;
    int batch_size = 8;
    double lr = 0.01;

    void validate(const char* stage) const {
        if (steps < 0) throw ConfigError(std::string(stage) + ": steps must be >= 0");
        if (batch_size < 1) throw ConfigError(std::string(stage) + ": batch_size must be >= 1");
        if (!(lr > 0.0)) throw ConfigError(std::string(stage) + ": learning rate must be > 0");
    }
};

// Whole-run configuration; stage seeds come from the command line, data
// seeds live here so every stage trains and evaluates on the same task.
struct RunConfig {
    ModelConfig model;
    SynthConfig data;

    int n_sft = 64;
    int n_kd = 48;
    int n_pairs = 48;
    int n_eval = 32;
    u64 sft_data_seed = 101;
    u64 kd_data_seed = 202;
    u64 dpo_data_seed = 303;
    u64 eval_data_seed = 909;

    StageHparams sft{300, 8, 0.01};
    StageHparams kd{200, 8, 0.005};
    StageHparams dpo{150, 8, 0.003};

    int kd_top_k = 20;
    KdConfig::Reduction kd_reduction = KdConfig::Reduction::Sum;
    DecodeConfig kd_decode{1.0, 40, 0};
    TeacherSpec teacher;

    double dpo_beta = 0.1;
    DecodeConfig dpo_decode{1.0, 40, 0};

    DecodeConfig eval_decode{0.0, 40, 0};

    void validate() const {
        model.validate();
        data.validate();
        if (n_sft < 0 || n_kd < 0 || n_pairs < 0 || n_eval < 0)
            throw ConfigError("dataset sizes must be >= 0");
        sft.validate("sft");
        kd.validate("kd");
        dpo.validate("dpo");
        if (kd_top_k < 1 || kd_top_k > model.vocab.size) throw ConfigError("kd top_k out of range");
        if (!(dpo_beta > 0.0)) throw ConfigError("dpo beta must be > 0");
        kd_decode.validate();
        dpo_decode.validate();
        eval_decode.validate();
        if (!(kd_decode.temperature > 0.0)) throw ConfigError("kd decoding must sample");
        if (!(dpo_decode.temperature > 0.0)) throw ConfigError("dpo decoding must sample");
        if (eval_data_seed == sft_data_seed || eval_data_seed == kd_data_seed ||
            eval_data_seed == dpo_data_seed)
            throw ConfigError("eval data seed must differ from training data seeds");
        if (data.d_audio != model.d_audio) throw ConfigError("data/model audio dims disagree");
        if (teacher.kind == TeacherSpec::Kind::Model && teacher.checkpoint.empty())
            throw ConfigError("model teacher needs a checkpoint path");
        if (teacher.kind == TeacherSpec::Kind::Remote && teacher.address.empty())
            throw ConfigError("remote teacher needs an address");
    }
};

namespace cfgdetail {

inline void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                       const char* where) {
    if (!j.is_object()) throw ConfigError(std::string(where) + " must be an object");
    for (const auto& [k, _] : j.items()) {
        bool ok = false;
        for (const char* a : allowed)
            if (k == a) {
                ok = true;
                break;
            }
        if (!ok) throw ConfigError(std::string("unknown key '") + k + "' in " + where);
    }
}

inline DecodeConfig decode_from_json(const nlohmann::json& j, const char* where,
                                     DecodeConfig base) {
    check_keys(j, {"temperature", "max_new_tokens"}, where);
    if (j.contains("temperature")) base.temperature = j["temperature"].get<double>();
    if (j.contains("max_new_tokens")) base.max_new_tokens = j["max_new_tokens"].get<int>();
    return base;
}

inline void stage_from_json(const nlohmann::json& j, const char* where, StageHparams* s) {
    check_keys(j, {"steps", "batch_size", "lr"}, where);
    if (j.contains("steps")) s->steps = j["steps"].get<int>();
    if (j.contains("batch_size")) s->batch_size = j["batch_size"].get<int>();
    if (j.contains("lr")) s->lr = j["lr"].get<double>();
}

}  // namespace cfgdetail

inline RunConfig parse_config(const nlohmann::json& j) {
    using cfgdetail::check_keys;
    RunConfig cfg;
    cfg.model.vocab = synth_vocab().vocab;
    check_keys(j, {"model", "data", "sft", "kd", "dpo", "eval"}, "config");

    if (j.contains("model")) {
        const auto& m = j["model"];
        check_keys(m,
                   {"d_audio", "d_model", "n_layers", "n_heads", "max_ctx", "lora_rank",
                    "lora_alpha", "init_seed"},
                   "model");
        if (m.contains("d_audio")) cfg.model.d_audio = m["d_audio"].get<int>();
        if (m.contains("d_model")) cfg.model.d_model = m["d_model"].get<int>();
        if (m.contains("n_layers")) cfg.model.n_layers = m["n_layers"].get<int>();
        if (m.contains("n_heads")) cfg.model.n_heads = m["n_heads"].get<int>();
        if (m.contains("max_ctx")) cfg.model.max_ctx = m["max_ctx"].get<int>();
        if (m.contains("lora_rank")) cfg.model.lora_rank = m["lora_rank"].get<int>();
        if (m.contains("lora_alpha")) cfg.model.lora_alpha = m["lora_alpha"].get<double>();
        if (m.contains("init_seed")) cfg.model.init_seed = m["init_seed"].get<u64>();
    }

    if (j.contains("data")) {
        const auto& d = j["data"];
        check_keys(d,
                   {"n_sft", "n_kd", "n_pairs", "n_eval", "sft_seed", "kd_seed", "dpo_seed",
                    "eval_seed", "min_facts", "max_facts", "max_filler_run", "n_query_candidates",
                    "query_threshold", "importance_threshold", "encoder_table_seed", "noise_sigma"},
                   "data");
        if (d.contains("n_sft")) cfg.n_sft = d["n_sft"].get<int>();
        if (d.contains("n_kd")) cfg.n_kd = d["n_kd"].get<int>();
        if (d.contains("n_pairs")) cfg.n_pairs = d["n_pairs"].get<int>();
        if (d.contains("n_eval")) cfg.n_eval = d["n_eval"].get<int>();
        if (d.contains("sft_seed")) cfg.sft_data_seed = d["sft_seed"].get<u64>();
        if (d.contains("kd_seed")) cfg.kd_data_seed = d["kd_seed"].get<u64>();
        if (d.contains("dpo_seed")) cfg.dpo_data_seed = d["dpo_seed"].get<u64>();
        if (d.contains("eval_seed")) cfg.eval_data_seed = d["eval_seed"].get<u64>();
        if (d.contains("min_facts")) cfg.data.min_facts = d["min_facts"].get<int>();
        if (d.contains("max_facts")) cfg.data.max_facts = d["max_facts"].get<int>();
        if (d.contains("max_filler_run")) cfg.data.max_filler_run = d["max_filler_run"].get<int>();
        if (d.contains("n_query_candidates"))
            cfg.data.n_query_candidates = d["n_query_candidates"].get<int>();
        if (d.contains("query_threshold")) cfg.data.query_threshold = d["query_threshold"].get<double>();
        if (d.contains("importance_threshold"))
            cfg.data.importance_threshold = d["importance_threshold"].get<double>();
        if (d.contains("encoder_table_seed"))
            cfg.data.encoder_table_seed = d["encoder_table_seed"].get<u64>();
        if (d.contains("noise_sigma")) cfg.data.noise_sigma = d["noise_sigma"].get<double>();
    }
    cfg.data.d_audio = cfg.model.d_audio;

    if (j.contains("sft")) cfgdetail::stage_from_json(j["sft"], "sft", &cfg.sft);

    if (j.contains("kd")) {
        const auto& k = j["kd"];
        check_keys(k, {"steps", "batch_size", "lr", "top_k", "position_reduction", "decode", "teacher"},
                   "kd");
        cfgdetail::stage_from_json(
            nlohmann::json{{"steps", k.value("steps", cfg.kd.steps)},
                           {"batch_size", k.value("batch_size", cfg.kd.batch_size)},
                           {"lr", k.value("lr", cfg.kd.lr)}},
            "kd", &cfg.kd);
        if (k.contains("top_k")) cfg.kd_top_k = k["top_k"].get<int>();
        if (k.contains("position_reduction")) {
            const std::string r = k["position_reduction"].get<std::string>();
            if (r == "sum")
                cfg.kd_reduction = KdConfig::Reduction::Sum;
            else if (r == "mean")
                cfg.kd_reduction = KdConfig::Reduction::Mean;
            else
                throw ConfigError("position_reduction must be sum or mean");
        }
        if (k.contains("decode")) cfg.kd_decode = cfgdetail::decode_from_json(k["decode"], "kd.decode", cfg.kd_decode);
        if (k.contains("teacher")) {
            const auto& t = k["teacher"];
            check_keys(t, {"backend", "epsilon", "checkpoint", "address"}, "kd.teacher");
            const std::string b = t.value("backend", "scripted");
            if (b == "scripted")
                cfg.teacher.kind = TeacherSpec::Kind::Scripted;
            else if (b == "model")
                cfg.teacher.kind = TeacherSpec::Kind::Model;
            else if (b == "remote")
                cfg.teacher.kind = TeacherSpec::Kind::Remote;
            else if (b == "self")
                cfg.teacher.kind = TeacherSpec::Kind::Self;
            else
                throw ConfigError("teacher backend must be scripted|model|remote|self");
            if (t.contains("epsilon")) cfg.teacher.epsilon = t["epsilon"].get<double>();
            if (t.contains("checkpoint")) cfg.teacher.checkpoint = t["checkpoint"].get<std::string>();
            if (t.contains("address")) cfg.teacher.address = t["address"].get<std::string>();
        }
    }

    if (j.contains("dpo")) {
        const auto& d = j["dpo"];
        check_keys(d, {"steps", "batch_size", "lr", "beta", "decode"}, "dpo");
        cfgdetail::stage_from_json(
            nlohmann::json{{"steps", d.value("steps", cfg.dpo.steps)},
                           {"batch_size", d.value("batch_size", cfg.dpo.batch_size)},
                           {"lr", d.value("lr", cfg.dpo.lr)}},
            "dpo", &cfg.dpo);
        if (d.contains("beta")) cfg.dpo_beta = d["beta"].get<double>();
        if (d.contains("decode")) cfg.dpo_decode = cfgdetail::decode_from_json(d["decode"], "dpo.decode", cfg.dpo_decode);
    }

    if (j.contains("eval")) {
        const auto& e = j["eval"];
        check_keys(e, {"decode"}, "eval");
        if (e.contains("decode")) cfg.eval_decode = cfgdetail::decode_from_json(e["decode"], "eval.decode", cfg.eval_decode);
    }

    cfg.validate();
    return cfg;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config: " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
    return parse_config(j);
}

}  // namespace ssum
