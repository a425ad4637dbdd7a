// Copyright (c) 2026 The fedpeft Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fedpeft/fed.hpp"

namespace fedpeft {

enum class Setting { local, federated, centralized, all };

std::string to_string(Setting s);
Setting setting_from_string(const std::string& s);

// Everything one run depends on. The key=value text form (see parse_kv) is
// what gets hashed and embedded in every output.
struct ExperimentConfig {
    Setting setting = Setting::federated;
    Strategy strategy = Strategy::flap_sam;
    std::size_t rank = 4;
    std::size_t sites = 3;
    std::size_t train_per_site = 8;
    std::size_t test_per_site = 16;
    std::size_t rounds = 30;
    std::size_t local_steps = 10;
    std::uint64_t seed = 0;
    std::string model = "toy";
    std::size_t num_classes = 2;
    double lr = 1e-3;
    std::size_t batch_size = 32;
    double lora_scale = 1.0;
    Weighting weighting = Weighting::sample_proportional;
    bool parallel = false;
    bool wire_roundtrip = false;
    std::vector<std::size_t> ranks = {1, 2, 4};  // ablation only
    std::string out;                             // output directory; empty = no files

    /// Known keys, in canonical order.
    static const std::vector<std::string>& keys();

    /// Sets one key from its text form. Throws ConfigError on unknown keys
    /// or unparsable values.
    void set(const std::string& key, const std::string& value);
    std::string get(const std::string& key) const;

    /// Throws ConfigError on any inconsistency; checked before any compute.
    void validate() const;

    ModelConfig model_config() const;

    /// "key = value" lines in canonical order, without `out`.
    std::string canonical() const;
    std::string hash() const;
};

/// Parses "key = value" lines; '#' starts a comment. Returns the pairs in
/// file order so callers can report conflicts.
std::vector<std::pair<std::string, std::string>> parse_kv(const std::string& text);

struct ResultRow {
    std::string setting;
    std::string strategy;
    std::size_t rank = 0;
    std::vector<double> site_dice;  // test Dice per site
    double mean_dice = 0.0;
    double train_dice = 0.0;  // mean over sites of training-set Dice
    std::size_t trainable = 0;
    std::size_t total = 0;
    std::size_t bytes = 0;  // federated traffic, both directions

    bool operator==(const ResultRow&) const = default;
};

struct ResultsTable {
    std::string title;
    std::map<std::string, std::string> provenance;  // config_hash, seed, binary_hash, ...
    std::string config_text;
    std::vector<ResultRow> rows;

    bool operator==(const ResultsTable&) const = default;
};

struct ExperimentResult {
    ResultsTable table;
    CommLedger ledger;
    std::vector<RoundRecord> rounds;
    std::string transcript;  // JSONL
};

using Progress = std::function<void(const std::string&)>;

ExperimentResult run_experiment(const ExperimentConfig& cfg, const Progress& progress = {});

/// One federated FLAP-SAM run per rank in cfg.ranks.
ExperimentResult run_ablation(const ExperimentConfig& cfg, const Progress& progress = {});

/// Aligned text table with a '#' provenance header and the config block.
std::string format_results_text(const ResultsTable& t);
std::string format_results_csv(const ResultsTable& t);
ResultsTable parse_results_text(const std::string& text);
ResultsTable parse_results_csv(const std::string& text);

/// Writes results.txt, results.csv and (when federated traffic exists)
/// ledger.csv and transcript.jsonl under cfg.out, using `stem` as prefix.
void write_outputs(const ExperimentConfig& cfg, const ExperimentResult& result, const std::string& stem);

/// Shortest decimal that round-trips to the same double.
std::string format_double(double v);
double parse_double(const std::string& s);

}  // namespace fedpeft
