#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "ssum/checkpoint.hpp"
#include "ssum/config.hpp"
#include "ssum/judge.hpp"
#include "ssum/metrics.hpp"
#include "ssum/optimizer.hpp"
#include "ssum/oracle_teacher.hpp"
#include "ssum/teacher_service.hpp"

namespace ssum {

struct StageResult {
    std::string checkpoint_path;
    u64 checkpoint_hash = 0;
    std::string metrics_path;
    std::string lineage_path;
};

namespace pipedetail {

namespace fs = std::filesystem;

inline std::string write_stage_outputs(const ModelParams& params, const std::string& stage_dir,
                                       const std::string& stage,
                                       nlohmann::ordered_json lineage_extra, StageResult* result) {
    fs::create_directories(stage_dir);
    const std::string bytes = checkpoint_bytes(params);
    const u64 hash = fnv1a64(bytes);
    const std::string ckpt_name = "checkpoint-" + hex16(hash) + ".dfck";
    const std::string ckpt_path = stage_dir + "/" + ckpt_name;
    {
        std::ofstream f(ckpt_path, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot write checkpoint: " + ckpt_path);
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    nlohmann::ordered_json lineage;
    lineage["stage"] = stage;
    lineage["checkpoint"] = ckpt_name;
    lineage["checkpoint_hash"] = hex16(hash);
    for (auto& [k, v] : lineage_extra.items()) lineage[k] = v;
    lineage["metrics"] = "metrics.jsonl";
    const std::string lineage_path = stage_dir + "/lineage.json";
    {
        std::ofstream f(lineage_path, std::ios::trunc);
        f << lineage.dump(2) << '\n';
    }
    result->checkpoint_path = ckpt_path;
    result->checkpoint_hash = hash;
    result->lineage_path = lineage_path;
    return ckpt_path;
}

inline void write_timing(const std::string& stage_dir, const std::string& stage, double wall_ms) {
    std::ofstream f(stage_dir + "/timing.json", std::ios::trunc);
    f << nlohmann::ordered_json{{"stage", stage}, {"wall_ms", wall_ms}}.dump() << '\n';
}

class Stopwatch {
  public:
    Stopwatch() : start_(std::chrono::steady_clock::now()) {}
    double ms() const {
        return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_)
            .count();
    }

  private:
    std::chrono::steady_clock::time_point start_;
};

}  // namespace pipedetail

inline u64 file_hash(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for hashing: " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return fnv1a64(bytes);
}

// Accepts either a checkpoint file or a stage lineage.json and yields the
// checkpoint path.
inline std::string resolve_checkpoint(const std::string& path) {
    if (path.size() >= 5 && path.substr(path.size() - 5) == ".json") {
        std::ifstream f(path);
        if (!f) throw IoError("cannot open lineage: " + path);
        nlohmann::json j;
        try {
            f >> j;
        } catch (const nlohmann::json::exception& e) {
            throw IoError(std::string("bad lineage file: ") + e.what());
        }
        const auto dir = std::filesystem::path(path).parent_path();
        return (dir / j.at("checkpoint").get<std::string>()).string();
    }
    return path;
}

// Retries transient transport failures with bounded backoff, then gives up.
class RetryingTeacher : public TeacherBackend {
  public:
    RetryingTeacher(std::unique_ptr<TeacherBackend> inner, int attempts = 3)
        : inner_(std::move(inner)), attempts_(attempts) {}

    TeacherResponse score(const TeacherRequest& req) override {
        int backoff_ms = 50;
        for (int a = 0;; ++a) {
            try {
                return inner_->score(req);
            } catch (const TransportError&) {
                if (a + 1 >= attempts_) throw;
                std::this_thread::sleep_for(std::chrono::milliseconds(backoff_ms));
                backoff_ms *= 2;
            }
        }
    }

  private:
    std::unique_ptr<TeacherBackend> inner_;
    int attempts_;
};

inline std::unique_ptr<TeacherBackend> make_teacher(const TeacherSpec& spec, const RunConfig& cfg,
                                                    const ModelParams* student_at_start) {
    switch (spec.kind) {
        case TeacherSpec::Kind::Scripted:
            return std::make_unique<OracleTeacher>(cfg.data, spec.epsilon);
        case TeacherSpec::Kind::Model:
            return std::make_unique<ModelTeacher>(
                load_checkpoint(resolve_checkpoint(spec.checkpoint)));
        case TeacherSpec::Kind::Remote:
            return std::make_unique<RetryingTeacher>(remote_client(spec.address));
        case TeacherSpec::Kind::Self: {
            if (student_at_start == nullptr)
                throw ConfigError("self teacher needs the student parameters");
            const SynthConfig data = cfg.data;
            SelfTeacher::AudioFn fn = [data](const TokenSeq& transcript) {
                Rng rng(0);  // sigma 0 uses no randomness
                return synth_audio(transcript, data.encoder_table_seed, 0.0, rng, data.d_audio);
            };
            return std::make_unique<SelfTeacher>(*student_at_start, std::move(fn));
        }
    }
    throw ConfigError("unhandled teacher kind");
}

// ---- supervised fine-tuning ----

inline StageResult run_sft(const RunConfig& cfg, u64 seed, const std::string& out_dir,
                           const std::vector<SummarizationExample>* dataset = nullptr,
                           const std::string& checkpoint_in = "") {
    cfg.validate();
    std::vector<SummarizationExample> built;
    if (dataset == nullptr) {
        built = build_sft_dataset(cfg.n_sft, cfg.sft_data_seed, cfg.data);
        dataset = &built;
    }
    if (dataset->empty()) throw InputError("sft: empty dataset");
    for (const SummarizationExample& ex : *dataset)
        if (!ex.has_reference()) throw InputError("sft: dataset example lacks a reference");

    pipedetail::Stopwatch sw;
    ModelConfig mc = cfg.model;
    mc.init_seed = mix_seed(cfg.model.init_seed, seed, 0);
    ModelParams params = checkpoint_in.empty()
                             ? ModelParams::init(mc)
                             : load_checkpoint(resolve_checkpoint(checkpoint_in), cfg.model);
    AdamState adam = AdamState::init(params);

    const std::string stage_dir = out_dir + "/sft";
    std::filesystem::create_directories(stage_dir);
    MetricsWriter metrics(stage_dir + "/metrics.jsonl");

    const std::size_t N = dataset->size();
    for (int step = 0; step < cfg.sft.steps; ++step) {
        Gradients batch_grads = Gradients::zeros_like(params);
        double batch_loss = 0.0;
        for (int b = 0; b < cfg.sft.batch_size; ++b) {
            const SummarizationExample& ex =
                (*dataset)[(static_cast<std::size_t>(step) * cfg.sft.batch_size + b) % N];
            LossGrad lg = sft_loss_grad(params, ex.input, ex.reference);
            batch_loss += lg.loss;
            batch_grads.add(lg.grads);
        }
        const double inv_b = 1.0 / cfg.sft.batch_size;
        batch_loss *= inv_b;
        batch_grads.scale(inv_b);
        if (!std::isfinite(batch_loss))
            throw NumericError("sft: non-finite loss at step " + std::to_string(step));
        optimizer_step(params, batch_grads, adam, cfg.sft.lr);
        metrics.record({{"type", "step"},
                        {"stage", "sft"},
                        {"step", step},
                        {"loss", batch_loss},
                        {"params_version", params.version()}});
    }

    StageResult result;
    result.metrics_path = stage_dir + "/metrics.jsonl";
    pipedetail::write_stage_outputs(params, stage_dir, "sft",
                                    {{"seed", seed}, {"input_checkpoint", checkpoint_in}}, &result);
    pipedetail::write_timing(stage_dir, "sft", sw.ms());
    return result;
}

// ---- on-policy knowledge distillation ----

inline StageResult run_kd(const RunConfig& cfg, u64 seed, const std::string& out_dir,
                          const std::string& checkpoint_in,
                          const std::vector<PairedInput>* inputs = nullptr,
                          TeacherBackend* teacher_override = nullptr) {
    cfg.validate();
    if (checkpoint_in.empty()) throw ConfigError("kd: initial checkpoint required");
    std::vector<PairedInput> built;
    if (inputs == nullptr) {
        built = build_kd_inputs(cfg.n_kd, cfg.kd_data_seed, cfg.data);
        inputs = &built;
    }
    if (inputs->empty()) throw InputError("kd: empty input set");

    pipedetail::Stopwatch sw;
    ModelParams params = load_checkpoint(resolve_checkpoint(checkpoint_in), cfg.model);
    AdamState adam = AdamState::init(params);

    std::unique_ptr<TeacherBackend> owned_teacher;
    TeacherBackend* teacher = teacher_override;
    if (teacher == nullptr) {
        owned_teacher = make_teacher(cfg.teacher, cfg, &params);
        teacher = owned_teacher.get();
    }

    const std::string stage_dir = out_dir + "/kd";
    std::filesystem::create_directories(stage_dir);
    MetricsWriter metrics(stage_dir + "/metrics.jsonl");

    const KdConfig kdcfg{cfg.kd_reduction, cfg.kd_top_k};
    const std::size_t N = inputs->size();
    const int B = cfg.kd.batch_size;
    for (int step = 0; step < cfg.kd.steps; ++step) {
        const ModelParams snapshot = params;  // sampling snapshot
        std::vector<PairedInput> batch;
        batch.reserve(B);
        for (int b = 0; b < B; ++b)
            batch.push_back((*inputs)[(static_cast<std::size_t>(step) * B + b) % N]);
        DecodeConfig dc = cfg.kd_decode;
        dc.seed = mix_seed(seed, static_cast<u64>(step), 0);
        const std::vector<Rollout> rollouts = batch_generate(snapshot, batch, dc);

        std::vector<std::vector<Distribution>> targets;
        targets.reserve(rollouts.size());
        std::size_t gen_tokens = 0;
        for (const Rollout& ro : rollouts) {
            targets.push_back(teacher_targets(*teacher, ro, cfg.kd_top_k, cfg.model.vocab.size));
            gen_tokens += ro.generated.size();
        }

        const LossGrad est = kd_gradient_estimate(params, rollouts, targets, kdcfg);
        if (!std::isfinite(est.loss))
            throw NumericError("kd: non-finite loss at step " + std::to_string(step));
        optimizer_step(params, est.grads, adam, cfg.kd.lr);
        metrics.record({{"type", "step"},
                        {"stage", "kd"},
                        {"step", step},
                        {"loss", est.loss},
                        {"mean_tokens", static_cast<double>(gen_tokens) / rollouts.size()},
                        {"params_version", params.version()}});
    }

    StageResult result;
    result.metrics_path = stage_dir + "/metrics.jsonl";
    pipedetail::write_stage_outputs(
        params, stage_dir, "kd",
        {{"seed", seed},
         {"input_checkpoint", checkpoint_in},
         {"input_checkpoint_hash", hex16(file_hash(resolve_checkpoint(checkpoint_in)))}},
        &result);
    pipedetail::write_timing(stage_dir, "kd", sw.ms());
    return result;
}

// ---- direct preference optimization ----

struct PairRecord {
    PreferencePair pair;
    double ref_lp_plus = 0.0;
    double ref_lp_minus = 0.0;
};

inline StageResult run_dpo(const RunConfig& cfg, u64 seed, const std::string& out_dir,
                           const std::string& ref_checkpoint_in,
                           const std::vector<PreferencePair>* pairs_in = nullptr) {
    cfg.validate();
    if (ref_checkpoint_in.empty()) throw ConfigError("dpo: reference checkpoint required");

    pipedetail::Stopwatch sw;
    const std::string ref_path = resolve_checkpoint(ref_checkpoint_in);
    const ModelParams ref_params = load_checkpoint(ref_path, cfg.model);
    const u64 ref_hash = fnv1a64(checkpoint_bytes(ref_params));
    ModelParams params = ref_params;  // pi initialized from pi_ref

    std::vector<PreferencePair> built_pairs;
    int ties = 0, degenerate = 0;
    if (pairs_in == nullptr) {
        const std::vector<PairedInput> inputs =
            build_kd_inputs(cfg.n_pairs, cfg.dpo_data_seed, cfg.data);
        DecodeConfig dc = cfg.dpo_decode;
        PreferenceBuildResult pb = build_preference_pairs(ref_params, make_rubric_judge(cfg.data),
                                                          inputs, dc, mix_seed(seed, 0, 7));
        built_pairs = std::move(pb.pairs);
        ties = pb.ties;
        degenerate = pb.degenerate;
        pairs_in = &built_pairs;
    }
    if (pairs_in->empty())
        throw InputError("dpo: no preference pairs after tie discard (ties=" +
                         std::to_string(ties) + ", degenerate=" + std::to_string(degenerate) + ")");

    std::vector<PairRecord> records;
    records.reserve(pairs_in->size());
    for (const PreferencePair& pr : *pairs_in) {
        PairRecord rec;
        rec.pair = pr;
        rec.ref_lp_plus = log_prob(ref_params, pr.input, pr.y_plus).total;
        rec.ref_lp_minus = log_prob(ref_params, pr.input, pr.y_minus).total;
        records.push_back(std::move(rec));
    }

    const std::string stage_dir = out_dir + "/dpo";
    std::filesystem::create_directories(stage_dir);
    MetricsWriter metrics(stage_dir + "/metrics.jsonl");
    metrics.record({{"type", "stage"},
                    {"stage", "dpo"},
                    {"step", 0},
                    {"event", "start"},
                    {"ref_checkpoint_hash", hex16(ref_hash)},
                    {"pairs", pairs_in->size()},
                    {"ties_discarded", ties},
                    {"degenerate_inputs", degenerate}});

    const DpoConfig dpocfg{cfg.dpo_beta};
    AdamState adam = AdamState::init(params);
    const std::size_t N = records.size();
    const int B = cfg.dpo.batch_size;
    for (int step = 0; step < cfg.dpo.steps; ++step) {
        Gradients batch_grads = Gradients::zeros_like(params);
        double batch_loss = 0.0, margin_sum = 0.0;
        int positive = 0;
        for (int b = 0; b < B; ++b) {
            const PairRecord& rec = records[(static_cast<std::size_t>(step) * B + b) % N];
            DpoPairGrad pg = dpo_pair_grad(params, rec.pair.input, rec.pair.y_plus,
                                           rec.pair.y_minus, rec.ref_lp_plus, rec.ref_lp_minus,
                                           dpocfg);
            batch_loss += pg.loss;
            margin_sum += pg.margin;
            if (pg.margin > 0.0) ++positive;
            batch_grads.add(pg.grads);
        }
        const double inv_b = 1.0 / B;
        batch_loss *= inv_b;
        batch_grads.scale(inv_b);
        if (!std::isfinite(batch_loss))
            throw NumericError("dpo: non-finite loss at step " + std::to_string(step));
        optimizer_step(params, batch_grads, adam, cfg.dpo.lr);
        metrics.record({{"type", "step"},
                        {"stage", "dpo"},
                        {"step", step},
                        {"loss", batch_loss},
                        {"mean_margin", margin_sum * inv_b},
                        {"implied_acc", static_cast<double>(positive) / B},
                        {"params_version", params.version()}});
    }

    // the reference must not have moved
    const u64 ref_hash_after = fnv1a64(checkpoint_bytes(ref_params));
    metrics.record({{"type", "stage"},
                    {"stage", "dpo"},
                    {"step", cfg.dpo.steps},
                    {"event", "end"},
                    {"ref_checkpoint_hash_after", hex16(ref_hash_after)},
                    {"ref_binding_intact", ref_hash_after == ref_hash}});

    StageResult result;
    result.metrics_path = stage_dir + "/metrics.jsonl";
    pipedetail::write_stage_outputs(params, stage_dir, "dpo",
                                    {{"seed", seed},
                                     {"ref_checkpoint", ref_checkpoint_in},
                                     {"ref_checkpoint_hash", hex16(ref_hash)}},
                                    &result);
    pipedetail::write_timing(stage_dir, "dpo", sw.ms());
    return result;
}

// ---- evaluation ----

struct EvalReport {
    int n = 0;
    double mean_overall = 0.0;
    double mean_repetition = 0.0;
    double mean_recall = 0.0;
    double mean_precision = 0.0;
    std::vector<RubricScores> per_example;
};

inline EvalReport evaluate_outputs(std::span<const SummarizationExample> examples,
                                   std::span<const TokenSeq> outputs, const SynthConfig& data) {
    if (examples.empty()) throw InputError("evaluate: empty eval set");
    if (examples.size() != outputs.size()) throw AlignmentError("evaluate: outputs per example");
    EvalReport rep;
    rep.n = static_cast<int>(examples.size());
    for (std::size_t i = 0; i < examples.size(); ++i) {
        FactDoc doc;
        doc.id = examples[i].doc_id;
        doc.facts = parse_transcript(examples[i].input.transcript).facts;
        const RubricScores rs = score_summary(doc, examples[i].input.query, outputs[i], data);
        rep.mean_overall += rs.overall;
        rep.mean_repetition += rs.repetition_rate;
        rep.mean_recall += rs.fact_recall;
        rep.mean_precision += rs.fact_precision;
        rep.per_example.push_back(rs);
    }
    rep.mean_overall /= rep.n;
    rep.mean_repetition /= rep.n;
    rep.mean_recall /= rep.n;
    rep.mean_precision /= rep.n;
    return rep;
}

// Greedy decode per example, rubric scoring, aggregate means.
inline EvalReport evaluate(const ModelParams& params, std::span<const SummarizationExample> examples,
                           const DecodeConfig& decode, const SynthConfig& data,
                           MetricsWriter* metrics = nullptr) {
    if (examples.empty()) throw InputError("evaluate: empty eval set");
    std::vector<TokenSeq> outputs;
    outputs.reserve(examples.size());
    for (const SummarizationExample& ex : examples) {
        DecodeConfig dc = decode;
        dc.seed = mix_seed(decode.seed, ex.doc_id, 0);
        outputs.push_back(generate(params, ex.input, dc).generated);
    }
    EvalReport rep = evaluate_outputs(examples, outputs, data);
    if (metrics != nullptr) {
        for (std::size_t i = 0; i < examples.size(); ++i) {
            const RubricScores& rs = rep.per_example[i];
            metrics->record({{"type", "eval_example"},
                             {"doc_id", examples[i].doc_id},
                             {"overall", rs.overall},
                             {"fact_recall", rs.fact_recall},
                             {"fact_precision", rs.fact_precision},
                             {"hallucination_count", rs.hallucination_count},
                             {"repetition_rate", rs.repetition_rate},
                             {"format_ok", rs.format_ok}});
        }
        metrics->record({{"type", "eval_summary"},
                         {"n", rep.n},
                         {"mean_overall", rep.mean_overall},
                         {"mean_repetition", rep.mean_repetition},
                         {"mean_recall", rep.mean_recall},
                         {"mean_precision", rep.mean_precision}});
    }
    return rep;
}

// ---- preference pair serialization ----

inline std::string pair_line(const PreferencePair& pr, u64 audio_seed, const SynthConfig& cfg) {
    nlohmann::ordered_json j;
    j["doc_id"] = pr.input.doc_id;
    j["transcript"] = pr.input.transcript;
    j["audio_seed"] = audio_seed;
    j["noise_sigma"] = cfg.noise_sigma;
    j["query"] = pr.input.query;
    j["y_plus"] = pr.y_plus;
    j["y_minus"] = pr.y_minus;
    j["margin"] = pr.verdict.margin;
    j["pair_seed"] = pr.pair_seed;
    return j.dump();
}

inline PreferencePair parse_pair_line(const std::string& line, const SynthConfig& cfg) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("bad pair line: ") + e.what());
    }
    PreferencePair pr;
    try {
        pr.input.doc_id = j.at("doc_id").get<u64>();
        pr.input.transcript = j.at("transcript").get<TokenSeq>();
        pr.input.query = j.at("query").get<TokenSeq>();
        pr.y_plus = j.at("y_plus").get<TokenSeq>();
        pr.y_minus = j.at("y_minus").get<TokenSeq>();
        pr.verdict.choice = 1;
        pr.verdict.margin = j.at("margin").get<double>();
        pr.pair_seed = j.at("pair_seed").get<u64>();
        const u64 audio_seed = j.at("audio_seed").get<u64>();
        const double sigma = j.at("noise_sigma").get<double>();
        Rng arng(audio_seed);
        pr.input.audio = synth_audio(pr.input.transcript, cfg.encoder_table_seed, sigma, arng,
                                     cfg.d_audio);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("pair line missing fields: ") + e.what());
    }
    return pr;
}

}  // namespace ssum
