#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "ssum/pipeline.hpp"

namespace fs = std::filesystem;
using namespace ssum;

namespace {

int run(const std::string& args) {
    const std::string cmd = std::string(SSUM_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    return WEXITSTATUS(rc);
}

std::string workdir() {
    const fs::path p = fs::temp_directory_path() / "ssum_cli_test";
    fs::remove_all(p);
    fs::create_directories(p);
    return p.string();
}

const char* kTinyConfig = R"({
  "model": {"d_audio": 8, "d_model": 8, "n_layers": 1, "n_heads": 2, "max_ctx": 192,
            "lora_rank": 2, "lora_alpha": 4.0, "init_seed": 1},
  "data": {"n_sft": 4, "n_kd": 4, "n_pairs": 4, "n_eval": 4, "max_facts": 6},
  "sft": {"steps": 4, "batch_size": 2, "lr": 0.01},
  "kd": {"steps": 2, "batch_size": 2, "lr": 0.005, "decode": {"max_new_tokens": 8}},
  "dpo": {"steps": 2, "batch_size": 2, "lr": 0.003, "decode": {"max_new_tokens": 8}},
  "eval": {"decode": {"max_new_tokens": 8}}
})";

}  // namespace

TEST_CASE("help exits 0, usage errors exit 2") {
    REQUIRE(run("--help") == 0);
    REQUIRE(run("sft --help") == 0);
    REQUIRE(run("") == 2);                                     // missing subcommand
    REQUIRE(run("sft --seed 1 --out /tmp/x") == 2);            // missing config
    REQUIRE(run("sft --config /does/not/exist --seed 1 --out /tmp/x") == 2);
    REQUIRE(run("sft --config /tmp --seed 1 --out /tmp/x --bogus-flag") == 2);
    REQUIRE(run("synth --kind nonsense --config /tmp/x --out /tmp/y") == 2);
}

TEST_CASE("bad config contents exit 2, runtime failures exit 1") {
    const std::string dir = workdir();
    {
        std::ofstream f(dir + "/bad.json");
        f << R"({"model": {"d_model": -4}})";
    }
    REQUIRE(run("sft --config " + dir + "/bad.json --seed 1 --out " + dir) == 2);
    {
        std::ofstream f(dir + "/unknown.json");
        f << R"({"model": {"not_a_key": 1}})";
    }
    REQUIRE(run("sft --config " + dir + "/unknown.json --seed 1 --out " + dir) == 2);
    {
        std::ofstream f(dir + "/ok.json");
        f << kTinyConfig;
    }
    // kd without a usable checkpoint is a runtime error
    REQUIRE(run("kd --config " + dir + "/ok.json --seed 1 --out " + dir +
                " --checkpoint-in " + dir + "/missing.dfck") == 1);
}

TEST_CASE("full scripted run emits every artifact") {
    const std::string dir = workdir();
    const std::string cfg_path = dir + "/cfg.json";
    {
        std::ofstream f(cfg_path);
        f << kTinyConfig;
    }
    const std::string cfg_arg = " --config " + cfg_path;

    REQUIRE(run("synth" + cfg_arg + " --out " + dir + "/train.jsonl --kind sft") == 0);
    REQUIRE(fs::exists(dir + "/train.jsonl"));

    REQUIRE(run("sft" + cfg_arg + " --seed 5 --out " + dir + " --data " + dir + "/train.jsonl") == 0);
    REQUIRE(fs::exists(dir + "/sft/lineage.json"));
    REQUIRE(fs::exists(dir + "/sft/metrics.jsonl"));
    REQUIRE(fs::exists(dir + "/sft/timing.json"));

    REQUIRE(run("kd" + cfg_arg + " --seed 5 --out " + dir + " --checkpoint-in " + dir +
                "/sft/lineage.json") == 0);
    REQUIRE(fs::exists(dir + "/kd/lineage.json"));

    // constructed pairs file so the tiny policy has usable preferences
    RunConfig rc = load_config(cfg_path);
    const auto examples = build_sft_dataset(3, rc.dpo_data_seed, rc.data);
    {
        std::ofstream f(dir + "/pairs.jsonl");
        for (const SummarizationExample& ex : examples) {
            PreferencePair pr;
            pr.input = ex.input;
            pr.y_plus = ex.reference;
            pr.y_minus = {synth_vocab().hdr, synth_vocab().vocab.eos};
            if (pr.y_plus == pr.y_minus) continue;
            pr.verdict = {1, 1.0};
            f << pair_line(pr, ex.audio_seed, rc.data) << '\n';
        }
    }
    REQUIRE(run("dpo" + cfg_arg + " --seed 5 --out " + dir + " --checkpoint-in " + dir +
                "/kd/lineage.json --pairs " + dir + "/pairs.jsonl") == 0);
    REQUIRE(fs::exists(dir + "/dpo/lineage.json"));

    REQUIRE(run("eval" + cfg_arg + " --checkpoint " + dir + "/dpo/lineage.json --out " + dir +
                "/eval.jsonl") == 0);
    REQUIRE(fs::exists(dir + "/eval.jsonl"));

    // pairs subcommand runs end to end (tie-heavy tiny policies may write none)
    REQUIRE(run("pairs" + cfg_arg + " --seed 5 --checkpoint " + dir +
                "/kd/lineage.json --out " + dir + "/built_pairs.jsonl") == 0);
    REQUIRE(fs::exists(dir + "/built_pairs.jsonl"));

    fs::remove_all(dir);
}

TEST_CASE("the shipped example config is loadable and self-consistent") {
    const RunConfig cfg = load_config(std::string(SSUM_CONFIG_DIR) + "/example.json");
    REQUIRE(cfg.model.lora_alpha == 32.0);
    REQUIRE(cfg.model.lora_rank == 16);
    REQUIRE(cfg.dpo_beta == 0.1);
    REQUIRE(cfg.kd_top_k == 20);
}
