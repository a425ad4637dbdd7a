// Copyright (c) 2026 The fedpeft Authors
// SPDX-License-Identifier: Apache-2.0
//
// fedpeft: federated PEFT simulator front end.
//
//   fedpeft run     --setting federated --strategy flap_sam --rank 4 --out out/
//   fedpeft ablate  --ranks 1,2,4 --out out/
//   fedpeft count   [--model vit_b_paper] [--rank 32] [--num-classes 2]
//   fedpeft comm    [--model vit_b_paper] [--rank 32] [--num-classes 3]
//   fedpeft verify  out/results.txt [--rerun]
//
// Exit codes: 0 ok, 1 verification mismatch or internal error, 2 config
// error, 3 training divergence, 4 I/O error.

#include <cstdio>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "fedpeft/byteio.hpp"
#include "fedpeft/errors.hpp"
#include "fedpeft/experiment.hpp"
#include "fedpeft/hashing.hpp"

using namespace fedpeft;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitMismatch = 1;
constexpr int kExitConfig = 2;
constexpr int kExitDivergence = 3;
constexpr int kExitIo = 4;

// Command-line spelling of every experiment key.
struct FlagBinding {
    const char* flag;
    const char* key;
    const char* help;
    std::string value;
    CLI::Option* option = nullptr;
};

std::vector<FlagBinding> experiment_flags() {
    return {
        {"--setting", "setting", "local | federated | centralized | all", {}},
        {"--strategy", "strategy", "FullFT AttnFT DecFT LoRAFT LoRADecFT PDecFT FLAP-SAM", {}},
        {"--rank", "rank", "LoRA rank", {}},
        {"--sites", "sites", "number of clients / sites", {}},
        {"--rounds", "rounds", "federated rounds", {}},
        {"--local-steps", "local_steps", "optimizer steps per client per round", {}},
        {"--seed", "seed", "single source of all randomness", {}},
        {"--model", "model", "toy (trainable) or vit_b_paper (counting only)", {}},
        {"--out", "out", "output directory", {}},
        {"--train-per-site", "train_per_site", "training samples per site", {}},
        {"--test-per-site", "test_per_site", "test samples per site", {}},
        {"--num-classes", "num_classes", "labels including background", {}},
        {"--lr", "lr", "Adam learning rate", {}},
        {"--batch-size", "batch_size", "batch size cap", {}},
        {"--lora-scale", "lora_scale", "LoRA output multiplier", {}},
        {"--weighting", "weighting", "samples | uniform", {}},
        {"--parallel", "parallel", "train clients on threads (true/false)", {}},
        {"--wire-roundtrip", "wire_roundtrip", "decode every message from float32 (true/false)", {}},
        {"--ranks", "ranks", "comma-separated ablation ranks", {}},
    };
}

struct ExperimentArgs {
    std::vector<FlagBinding> flags = experiment_flags();
    std::string config_path;
    bool quiet = false;

    void attach(CLI::App* app) {
        app->add_option("--config", config_path, "key = value config file");
        app->add_flag("--quiet", quiet, "no progress output");
        for (auto& f : flags) f.option = app->add_option(f.flag, f.value, f.help);
    }

    // defaults < config file < flags; a flag that overrides the file warns.
    ExperimentConfig resolve() const {
        ExperimentConfig cfg;
        std::map<std::string, std::string> from_file;
        if (!config_path.empty()) {
            for (const auto& [k, v] : parse_kv(io::read_text(config_path))) {
                cfg.set(k, v);
                from_file[k] = v;
            }
        }
        for (const auto& f : flags) {
            if (f.option->count() == 0) continue;
            auto it = from_file.find(f.key);
            if (it != from_file.end() && it->second != f.value) {
                std::cerr << "warning: " << f.flag << "=" << f.value << " overrides " << f.key << " = " << it->second
                          << " from " << config_path << "\n";
            }
            cfg.set(f.key, f.value);
        }
        cfg.validate();
        return cfg;
    }

    Progress progress() const {
        if (quiet) return {};
        return [](const std::string& msg) { std::cerr << msg << "\n"; };
    }
};

std::string millions(std::size_t n) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(3) << static_cast<double>(n) / 1e6 << "M";
    return os.str();
}

int cmd_run(const ExperimentArgs& args, bool ablation) {
    const ExperimentConfig cfg = args.resolve();
    const ExperimentResult res = ablation ? run_ablation(cfg, args.progress()) : run_experiment(cfg, args.progress());
    std::cout << format_results_text(res.table);
    write_outputs(cfg, res, ablation ? "ablation" : "results");
    return kExitOk;
}

int cmd_count(const std::string& model, std::size_t rank, std::size_t classes) {
    ModelConfig mc = ModelConfig::by_name(model);
    mc.num_classes = classes;
    mc.validate();
    std::cout << "model " << model << ", rank " << rank << ", num_classes " << classes << "\n";
    std::cout << std::left << std::setw(12) << "strategy" << std::right << std::setw(14) << "trainable" << std::setw(14)
              << "total" << std::setw(12) << "trainable" << std::setw(12) << "total" << "\n";
    for (Strategy s : kAllStrategies) {
        const ParamCounts pc = count_params(mc, mask_for(s), rank, classes);
        std::cout << std::left << std::setw(12) << to_string(s) << std::right << std::setw(14) << pc.trainable
                  << std::setw(14) << pc.total << std::setw(12) << millions(pc.trainable) << std::setw(12)
                  << millions(pc.total) << "\n";
    }
    std::cout << "\ngroup sizes\n";
    for (const auto& [g, n] : group_param_counts(mc))
        std::cout << std::left << std::setw(12) << to_string(g) << std::right << std::setw(14) << n << "\n";
    std::cout << std::left << std::setw(12) << "LoRA" << std::right << std::setw(14) << lora_param_count(mc, rank)
              << "  (" << lora_sites(mc).size() << " attention layers, q and v)\n";
    return kExitOk;
}

int cmd_comm(const std::string& model, std::size_t rank, std::size_t classes) {
    ModelConfig mc = ModelConfig::by_name(model);
    mc.num_classes = classes;
    mc.validate();
    std::cout << "model " << model << ", rank " << rank << ", num_classes " << classes
              << ", float32 wire, bytes per client per direction\n";
    std::cout << std::left << std::setw(12) << "strategy" << std::right << std::setw(14) << "payload" << std::setw(10)
              << "header" << std::setw(14) << "vs FLAP-SAM" << "\n";
    for (Strategy s : kAllStrategies) {
        const StrategyMask m = mask_for(s);
        std::ostringstream ratio;
        ratio << std::fixed << std::setprecision(3) << reduction_ratio(s, Strategy::flap_sam, mc, rank, classes);
        std::cout << std::left << std::setw(12) << to_string(s) << std::right << std::setw(14)
                  << payload_bytes(m, mc, rank, classes) << std::setw(10) << header_overhead(m, mc) << std::setw(14)
                  << ratio.str() << "\n";
    }
    return kExitOk;
}

int cmd_verify(const std::string& path, bool rerun) {
    const std::string text = io::read_text(path);
    const ResultsTable table = parse_results_text(text);
    ExperimentConfig cfg;
    for (const auto& [k, v] : parse_kv(table.config_text)) cfg.set(k, v);
    bool ok = true;
    auto report = [&](const std::string& what, const std::string& want, const std::string& got) {
        const bool same = want == got;
        ok = ok && same;
        std::cout << (same ? "ok       " : "MISMATCH ") << what << ": " << got << (same ? "" : " (file says " + want + ")")
                  << "\n";
    };
    report("config_hash", table.provenance.count("config_hash") ? table.provenance.at("config_hash") : "", cfg.hash());
    report("binary_hash", table.provenance.count("binary_hash") ? table.provenance.at("binary_hash") : "",
           executable_hash());
    if (rerun) {
        cfg.out.clear();
        const ExperimentResult res = table.title == "ablation" ? run_ablation(cfg) : run_experiment(cfg);
        const bool same = format_results_text(res.table) == text;
        ok = ok && same;
        std::cout << (same ? "ok       " : "MISMATCH ") << "rerun reproduces " << path << " byte for byte\n";
    }
    return ok ? kExitOk : kExitMismatch;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Federated parameter-efficient fine-tuning simulator"};
    app.require_subcommand(1);

    ExperimentArgs run_args;
    auto* run = app.add_subcommand("run", "train under one setting (or all) and emit a results table");
    run_args.attach(run);

    ExperimentArgs ablate_args;
    auto* ablate = app.add_subcommand("ablate", "federated FLAP-SAM runs over several LoRA ranks");
    ablate_args.attach(ablate);

    std::string count_model = "vit_b_paper";
    std::size_t count_rank = 32, count_classes = 2;
    auto* count = app.add_subcommand("count", "analytic parameter counts per strategy");
    count->add_option("--model", count_model, "model preset");
    count->add_option("--rank", count_rank, "LoRA rank");
    count->add_option("--num-classes", count_classes, "labels including background");

    std::string comm_model = "vit_b_paper";
    std::size_t comm_rank = 32, comm_classes = 3;
    auto* comm = app.add_subcommand("comm", "payload bytes and reduction ratios per strategy");
    comm->add_option("--model", comm_model, "model preset");
    comm->add_option("--rank", comm_rank, "LoRA rank");
    comm->add_option("--num-classes", comm_classes, "labels including background");

    std::string verify_path;
    bool verify_rerun = false;
    auto* verify = app.add_subcommand("verify", "check the hashes embedded in a results file");
    verify->add_option("results", verify_path, "results.txt or ablation.txt")->required();
    verify->add_flag("--rerun", verify_rerun, "re-run the experiment and compare bytes");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (*run) return cmd_run(run_args, false);
        if (*ablate) return cmd_run(ablate_args, true);
        if (*count) return cmd_count(count_model, count_rank, count_classes);
        if (*comm) return cmd_comm(comm_model, comm_rank, comm_classes);
        if (*verify) return cmd_verify(verify_path, verify_rerun);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const DivergenceError& e) {
        std::cerr << "training diverged: " << e.what() << "\n";
        return kExitDivergence;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return kExitIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitMismatch;
    }
    return kExitOk;
}
