// ssum — desk-scale three-stage trainer (SFT, on-policy KD, DPO) for a tiny
// audio-conditioned summarization policy over a synthetic oracle task.

#include <csignal>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "ssum/pipeline.hpp"

namespace {

volatile std::sig_atomic_t g_stop = 0;
void handle_signal(int) { g_stop = 1; }

std::vector<ssum::SummarizationExample> load_dataset_file(const std::string& path,
                                                          const ssum::SynthConfig& cfg) {
    std::ifstream f(path);
    if (!f) throw ssum::IoError("cannot open dataset: " + path);
    std::vector<ssum::SummarizationExample> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        out.push_back(ssum::parse_dataset_line(line, cfg).example);
    }
    return out;
}

std::vector<ssum::PreferencePair> load_pairs_file(const std::string& path,
                                                  const ssum::SynthConfig& cfg) {
    std::ifstream f(path);
    if (!f) throw ssum::IoError("cannot open pairs file: " + path);
    std::vector<ssum::PreferencePair> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        out.push_back(ssum::parse_pair_line(line, cfg));
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"ssum: three-stage training for audio-conditioned summarization at desk scale"};
    app.require_subcommand(1);

    std::string config_path, out_path, data_path, checkpoint_in, pairs_path, bind_addr;
    std::string synth_kind = "sft", backend = "scripted";
    ssum::u64 seed = 0;
    int n_override = -1;
    double epsilon = 1e-3;

    auto add_config = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "run config (JSON)")->required();
    };

    CLI::App* c_synth = app.add_subcommand("synth", "generate a dataset file");
    add_config(c_synth);
    c_synth->add_option("--out", out_path, "output JSONL path")->required();
    c_synth->add_option("--kind", synth_kind, "sft|kd (with or without references)")
        ->check(CLI::IsMember({"sft", "kd"}));
    c_synth->add_option("--n", n_override, "override example count");
    c_synth->add_option("--seed", seed, "override the data seed");

    CLI::App* c_sft = app.add_subcommand("sft", "supervised fine-tuning stage");
    add_config(c_sft);
    c_sft->add_option("--seed", seed, "training seed")->required();
    c_sft->add_option("--out", out_path, "output directory")->required();
    c_sft->add_option("--data", data_path, "dataset JSONL (default: built from config seeds)");
    c_sft->add_option("--checkpoint-in", checkpoint_in, "start from this checkpoint");

    CLI::App* c_kd = app.add_subcommand("kd", "on-policy knowledge distillation stage");
    add_config(c_kd);
    c_kd->add_option("--seed", seed, "training seed")->required();
    c_kd->add_option("--out", out_path, "output directory")->required();
    c_kd->add_option("--checkpoint-in", checkpoint_in, "initial checkpoint or lineage.json")
        ->required();

    CLI::App* c_dpo = app.add_subcommand("dpo", "direct preference optimization stage");
    add_config(c_dpo);
    c_dpo->add_option("--seed", seed, "training seed")->required();
    c_dpo->add_option("--out", out_path, "output directory")->required();
    c_dpo->add_option("--checkpoint-in", checkpoint_in, "reference checkpoint (KD output)")
        ->required();
    c_dpo->add_option("--pairs", pairs_path, "preference pairs JSONL (default: built on the fly)");

    CLI::App* c_eval = app.add_subcommand("eval", "judge a checkpoint on the held-out set");
    add_config(c_eval);
    c_eval->add_option("--checkpoint", checkpoint_in, "checkpoint or lineage.json")->required();
    c_eval->add_option("--out", out_path, "metrics JSONL output path");
    c_eval->add_option("--n", n_override, "override eval example count");

    CLI::App* c_serve = app.add_subcommand("serve-teacher", "serve a teacher over TCP");
    c_serve->add_option("--bind", bind_addr, "HOST:PORT")->required();
    c_serve->add_option("--backend", backend, "scripted|model")
        ->check(CLI::IsMember({"scripted", "model"}));
    c_serve->add_option("--checkpoint", checkpoint_in, "checkpoint for the model backend");
    c_serve->add_option("--epsilon", epsilon, "scripted teacher epsilon");
    c_serve->add_option("--config", config_path, "run config (JSON), optional");

    CLI::App* c_pairs = app.add_subcommand("pairs", "build judged preference pairs");
    add_config(c_pairs);
    c_pairs->add_option("--seed", seed, "sampling seed")->required();
    c_pairs->add_option("--checkpoint", checkpoint_in, "policy checkpoint")->required();
    c_pairs->add_option("--out", out_path, "output JSONL path")->required();
    c_pairs->add_option("--n", n_override, "override input count");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (app.got_subcommand(c_synth)) {
            ssum::RunConfig cfg = ssum::load_config(config_path);
            const bool with_ref = synth_kind == "sft";
            const int n = n_override >= 0 ? n_override : (with_ref ? cfg.n_sft : cfg.n_kd);
            ssum::u64 dseed = c_synth->count("--seed") ? seed
                              : (with_ref ? cfg.sft_data_seed : cfg.kd_data_seed);
            const std::vector<ssum::SummarizationExample> examples =
                with_ref ? ssum::build_sft_dataset(n, dseed, cfg.data)
                         : ssum::build_kd_examples(n, dseed, cfg.data);
            std::ofstream f(out_path, std::ios::trunc);
            if (!f) throw ssum::IoError("cannot open output: " + out_path);
            ssum::write_dataset(f, examples, cfg.data);
            std::cout << "wrote " << examples.size() << " examples to " << out_path << "\n";
        } else if (app.got_subcommand(c_sft)) {
            ssum::RunConfig cfg = ssum::load_config(config_path);
            std::vector<ssum::SummarizationExample> ds;
            const std::vector<ssum::SummarizationExample>* dsp = nullptr;
            if (!data_path.empty()) {
                ds = load_dataset_file(data_path, cfg.data);
                dsp = &ds;
            }
            const ssum::StageResult r = ssum::run_sft(cfg, seed, out_path, dsp, checkpoint_in);
            std::cout << "sft checkpoint: " << r.checkpoint_path << "\n";
        } else if (app.got_subcommand(c_kd)) {
            ssum::RunConfig cfg = ssum::load_config(config_path);
            const ssum::StageResult r = ssum::run_kd(cfg, seed, out_path, checkpoint_in);
            std::cout << "kd checkpoint: " << r.checkpoint_path << "\n";
        } else if (app.got_subcommand(c_dpo)) {
            ssum::RunConfig cfg = ssum::load_config(config_path);
            std::vector<ssum::PreferencePair> pairs;
            const std::vector<ssum::PreferencePair>* pp = nullptr;
            if (!pairs_path.empty()) {
                pairs = load_pairs_file(pairs_path, cfg.data);
                pp = &pairs;
            }
            const ssum::StageResult r = ssum::run_dpo(cfg, seed, out_path, checkpoint_in, pp);
            std::cout << "dpo checkpoint: " << r.checkpoint_path << "\n";
        } else if (app.got_subcommand(c_eval)) {
            ssum::RunConfig cfg = ssum::load_config(config_path);
            const int n = n_override >= 0 ? n_override : cfg.n_eval;
            const auto examples = ssum::build_sft_dataset(n, cfg.eval_data_seed, cfg.data);
            const ssum::ModelParams params =
                ssum::load_checkpoint(ssum::resolve_checkpoint(checkpoint_in), cfg.model);
            ssum::MetricsWriter metrics;
            ssum::MetricsWriter* mp = nullptr;
            if (!out_path.empty()) {
                metrics = ssum::MetricsWriter(out_path);
                mp = &metrics;
            }
            const ssum::EvalReport rep =
                ssum::evaluate(params, examples, cfg.eval_decode, cfg.data, mp);
            std::cout << "n=" << rep.n << " mean_overall=" << rep.mean_overall
                      << " mean_repetition=" << rep.mean_repetition
                      << " mean_recall=" << rep.mean_recall
                      << " mean_precision=" << rep.mean_precision << "\n";
        } else if (app.got_subcommand(c_serve)) {
            ssum::SynthConfig data;
            if (!config_path.empty()) data = ssum::load_config(config_path).data;
            std::unique_ptr<ssum::TeacherBackend> be;
            if (backend == "scripted") {
                be = std::make_unique<ssum::OracleTeacher>(data, epsilon);
            } else {
                if (checkpoint_in.empty())
                    throw ssum::ConfigError("model backend needs --checkpoint");
                be = std::make_unique<ssum::ModelTeacher>(
                    ssum::load_checkpoint(ssum::resolve_checkpoint(checkpoint_in)));
            }
            const ssum::net::Address addr = ssum::net::parse_address(bind_addr);
            ssum::TeacherServer server(*be);
            server.start(addr.host, addr.port);
            std::cout << "serving teacher on " << addr.host << ":" << server.port() << "\n";
            std::signal(SIGINT, handle_signal);
            std::signal(SIGTERM, handle_signal);
            while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
            server.stop();
        } else if (app.got_subcommand(c_pairs)) {
            ssum::RunConfig cfg = ssum::load_config(config_path);
            const int n = n_override >= 0 ? n_override : cfg.n_pairs;
            const ssum::ModelParams params =
                ssum::load_checkpoint(ssum::resolve_checkpoint(checkpoint_in), cfg.model);
            const std::vector<ssum::SummarizationExample> examples =
                ssum::build_kd_examples(n, cfg.dpo_data_seed, cfg.data);
            std::vector<ssum::PairedInput> inputs;
            for (const auto& ex : examples) inputs.push_back(ex.input);
            const ssum::PreferenceBuildResult pb = ssum::build_preference_pairs(
                params, ssum::make_rubric_judge(cfg.data), inputs, cfg.dpo_decode,
                ssum::mix_seed(seed, 0, 7));
            std::ofstream f(out_path, std::ios::trunc);
            if (!f) throw ssum::IoError("cannot open output: " + out_path);
            for (const ssum::PreferencePair& pr : pb.pairs)
                f << ssum::pair_line(pr, examples[pr.input.doc_id].audio_seed, cfg.data) << '\n';
            std::cout << "wrote " << pb.pairs.size() << " pairs (" << pb.ties << " ties, "
                      << pb.degenerate << " degenerate) to " << out_path << "\n";
        }
    } catch (const ssum::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
