// Copyright (c) 2026 The fedpeft Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "fedpeft/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <sstream>

#include "fedpeft/byteio.hpp"
#include "fedpeft/errors.hpp"
#include "fedpeft/hashing.hpp"

namespace fedpeft {

namespace {

// Stream tags so one --seed feeds independent generators.
constexpr std::uint32_t kModelStream = 0x0001;
constexpr std::uint32_t kAdapterStream = 0x0002;
constexpr std::uint32_t kPooledClient = 0xFFFF;

Rng stream(std::uint64_t seed, std::uint32_t tag) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), tag};
    return Rng(seq);
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::size_t parse_size(const std::string& key, const std::string& v) {
    std::size_t out = 0;
    const auto* end = v.data() + v.size();
    auto [p, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || p != end || v.empty()) throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    const auto* end = v.data() + v.size();
    auto [p, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || p != end || v.empty()) throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    return out;
}

double parse_real(const std::string& key, const std::string& v) {
    try {
        return parse_double(v);
    } catch (const ConfigError&) {
        throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::vector<std::size_t> parse_list(const std::string& key, const std::string& v) {
    std::vector<std::size_t> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_size(key, trim(item)));
    if (out.empty()) throw ConfigError(key + ": empty list");
    return out;
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep)) out.push_back(item);
    if (!s.empty() && s.back() == sep) out.emplace_back();
    return out;
}

std::vector<std::string> split_ws(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream is(s);
    std::string tok;
    while (is >> tok) out.push_back(tok);
    return out;
}

struct World {
    ModelConfig model_cfg;
    BuiltModel base;
    std::vector<SyntheticSite> sites;
};

World make_world(const ExperimentConfig& cfg) {
    ModelConfig mc = cfg.model_config();
    Rng rng = stream(cfg.seed, kModelStream);
    World w{mc, build_model(mc, rng), {}};
    for (std::size_t k = 0; k < cfg.sites; ++k) {
        w.sites.push_back(gen_site(cfg.seed, default_site(k, cfg.sites), cfg.train_per_site, cfg.test_per_site,
                                   mc.image_size, mc.input_slices, mc.num_classes));
    }
    return w;
}

FedOptions fed_options(const ExperimentConfig& cfg) {
    FedOptions o;
    o.weighting = cfg.weighting;
    o.parallel_clients = cfg.parallel;
    o.wire_roundtrip = cfg.wire_roundtrip;
    o.trainer.batch_size = cfg.batch_size;
    o.trainer.adam.lr = cfg.lr;
    return o;
}

LoRAOptions lora_options(const ExperimentConfig& cfg) {
    LoRAOptions o;
    o.scale = cfg.lora_scale;
    return o;
}

// Fresh learner with the same adapter initialization the federated server uses.
LearnerState fresh_learner(const ExperimentConfig& cfg, const World& w, Strategy strategy, std::size_t rank) {
    Rng init = stream(cfg.seed, kAdapterStream);
    return make_learner(w.base, strategy, rank, lora_options(cfg), init);
}

Rng client_rng(const ExperimentConfig& cfg, const World& w, std::uint32_t id) {
    return make_client(id, w.base, Strategy::full_ft, w.sites.front().train, cfg.seed).rng;
}

ResultRow base_row(const ExperimentConfig& cfg, const World& w, const std::string& setting, Strategy strategy,
                   std::size_t rank) {
    ResultRow r;
    r.setting = setting;
    r.strategy = to_string(strategy);
    const StrategyMask mask = mask_for(strategy);
    r.rank = mask.uses_lora ? rank : 0;
    const ParamCounts pc = count_params(w.model_cfg, mask, rank, cfg.num_classes);
    r.trainable = pc.trainable;
    r.total = pc.total;
    return r;
}

void finish_row(ResultRow& r) {
    double s = 0.0;
    for (double d : r.site_dice) s += d;
    r.mean_dice = s / static_cast<double>(r.site_dice.size());
}

ResultRow run_local(const ExperimentConfig& cfg, const World& w, const Progress& progress) {
    ResultRow row = base_row(cfg, w, "local", cfg.strategy, cfg.rank);
    const std::size_t steps = cfg.rounds * cfg.local_steps;
    double train_sum = 0.0;
    const FedOptions opt = fed_options(cfg);
    for (std::size_t k = 0; k < w.sites.size(); ++k) {
        LearnerState learner = fresh_learner(cfg, w, cfg.strategy, cfg.rank);
        Rng rng = client_rng(cfg, w, static_cast<std::uint32_t>(k));
        try {
            train_local(w.base.model, learner, w.sites[k].train, steps, opt.trainer, rng);
        } catch (const DivergenceError& e) {
            throw DivergenceError("local, site " + std::to_string(k) + ": " + e.what());
        }
        row.site_dice.push_back(evaluate_dice(w.base.model, learner, w.sites[k].test));
        train_sum += evaluate_dice(w.base.model, learner, w.sites[k].train);
        if (progress) progress("local site " + std::to_string(k) + " dice " + format_double(row.site_dice.back()));
    }
    row.train_dice = train_sum / static_cast<double>(w.sites.size());
    finish_row(row);
    return row;
}

ResultRow run_centralized(const ExperimentConfig& cfg, const World& w, const Progress& progress) {
    ResultRow row = base_row(cfg, w, "centralized", cfg.strategy, cfg.rank);
    std::vector<Sample> pooled;
    for (const auto& s : w.sites) pooled.insert(pooled.end(), s.train.begin(), s.train.end());
    LearnerState learner = fresh_learner(cfg, w, cfg.strategy, cfg.rank);
    Rng rng = client_rng(cfg, w, kPooledClient);
    try {
        train_local(w.base.model, learner, pooled, cfg.rounds * cfg.local_steps, fed_options(cfg).trainer, rng);
    } catch (const DivergenceError& e) {
        throw DivergenceError(std::string("centralized: ") + e.what());
    }
    double train_sum = 0.0;
    for (const auto& s : w.sites) {
        row.site_dice.push_back(evaluate_dice(w.base.model, learner, s.test));
        train_sum += evaluate_dice(w.base.model, learner, s.train);
    }
    row.train_dice = train_sum / static_cast<double>(w.sites.size());
    finish_row(row);
    if (progress) progress("centralized mean dice " + format_double(row.mean_dice));
    return row;
}

struct FederatedOutcome {
    ResultRow row;
    CommLedger ledger;
    std::vector<RoundRecord> rounds;
    std::string transcript;
};

FederatedOutcome run_federated(const ExperimentConfig& cfg, const World& w, Strategy strategy, std::size_t rank,
                               const Progress& progress) {
    FederatedOutcome out{base_row(cfg, w, "federated", strategy, rank), CommLedger(strategy, rank, cfg.num_classes), {}, {}};
    Rng init = stream(cfg.seed, kAdapterStream);
    ServerState server = init_server(w.base, strategy, rank, lora_options(cfg), init);
    std::vector<ClientState> clients;
    for (std::size_t k = 0; k < w.sites.size(); ++k)
        clients.push_back(make_client(static_cast<std::uint32_t>(k), w.base, strategy, w.sites[k].train, cfg.seed));
    const FedOptions opt = fed_options(cfg);
    for (std::size_t r = 0; r < cfg.rounds; ++r) {
        RoundRecord rec = run_round(server, clients, w.base.model, cfg.local_steps, opt, &out.ledger);
        out.transcript += transcript_line(rec);
        out.transcript += '\n';
        if (progress) {
            double loss = 0.0;
            for (const auto& c : rec.clients) loss += c.loss_last;
            progress("round " + std::to_string(rec.round) + " mean client loss " +
                     format_double(loss / static_cast<double>(rec.clients.size())));
        }
        out.rounds.push_back(std::move(rec));
    }
    LearnerState global;
    global.registry = w.base.registry;
    global.mask = server.mask;
    apply_global(server, global);
    double train_sum = 0.0;
    for (const auto& s : w.sites) {
        out.row.site_dice.push_back(evaluate_dice(w.base.model, global, s.test));
        train_sum += evaluate_dice(w.base.model, global, s.train);
    }
    out.row.train_dice = train_sum / static_cast<double>(w.sites.size());
    out.row.bytes = out.ledger.total_bytes();
    finish_row(out.row);
    return out;
}

ResultsTable empty_table(const ExperimentConfig& cfg, const std::string& title) {
    ResultsTable t;
    t.title = title;
    t.config_text = cfg.canonical();
    t.provenance["config_hash"] = cfg.hash();
    t.provenance["seed"] = std::to_string(cfg.seed);
    t.provenance["binary_hash"] = executable_hash();
    t.provenance["model_hash"] = cfg.model_config().hash();
    return t;
}

std::vector<std::string> columns(std::size_t sites) {
    std::vector<std::string> c{"setting", "strategy", "rank"};
    for (std::size_t k = 0; k < sites; ++k) c.push_back("site" + std::to_string(k));
    for (const char* s : {"mean", "train", "trainable", "total", "bytes"}) c.emplace_back(s);
    return c;
}

std::vector<std::string> row_cells(const ResultRow& r) {
    std::vector<std::string> c{r.setting, r.strategy, std::to_string(r.rank)};
    for (double d : r.site_dice) c.push_back(format_double(d));
    c.push_back(format_double(r.mean_dice));
    c.push_back(format_double(r.train_dice));
    c.push_back(std::to_string(r.trainable));
    c.push_back(std::to_string(r.total));
    c.push_back(std::to_string(r.bytes));
    return c;
}

ResultRow row_from_cells(const std::vector<std::string>& c, std::size_t sites) {
    if (c.size() != sites + 8) throw IoError("results: row has " + std::to_string(c.size()) + " cells");
    ResultRow r;
    r.setting = c[0];
    r.strategy = c[1];
    try {
        r.rank = parse_size("rank", c[2]);
        for (std::size_t k = 0; k < sites; ++k) r.site_dice.push_back(parse_double(c[3 + k]));
        r.mean_dice = parse_double(c[3 + sites]);
        r.train_dice = parse_double(c[4 + sites]);
        r.trainable = parse_size("trainable", c[5 + sites]);
        r.total = parse_size("total", c[6 + sites]);
        r.bytes = parse_size("bytes", c[7 + sites]);
    } catch (const ConfigError& e) {
        throw IoError(std::string("results: ") + e.what());
    }
    return r;
}

std::size_t site_count(const std::vector<std::string>& header) {
    if (header.size() < 8 || header[0] != "setting") throw IoError("results: bad column header");
    return header.size() - 8;
}

}  // namespace

// ---------------------------------------------------------------- enums

std::string to_string(Setting s) {
    switch (s) {
        case Setting::local: return "local";
        case Setting::federated: return "federated";
        case Setting::centralized: return "centralized";
        case Setting::all: return "all";
    }
    return "?";
}

Setting setting_from_string(const std::string& s) {
    for (Setting v : {Setting::local, Setting::federated, Setting::centralized, Setting::all})
        if (to_string(v) == s) return v;
    throw ConfigError("unknown setting '" + s + "' (expected local, federated, centralized or all)");
}

// ---------------------------------------------------------------- numbers

std::string format_double(double v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (ec != std::errc()) throw NumericError("format_double failed");
    return std::string(buf, p);
}

double parse_double(const std::string& s) {
    double out = 0.0;
    const auto* end = s.data() + s.size();
    auto [p, ec] = std::from_chars(s.data(), end, out);
    if (ec != std::errc() || p != end || s.empty()) throw ConfigError("not a number: '" + s + "'");
    return out;
}

// ---------------------------------------------------------------- config

const std::vector<std::string>& ExperimentConfig::keys() {
    static const std::vector<std::string> k{
        "setting",   "strategy", "rank",       "sites", "train_per_site", "test_per_site", "rounds",
        "local_steps", "seed",   "model",      "num_classes", "lr",       "batch_size",    "lora_scale",
        "weighting", "parallel", "wire_roundtrip", "ranks", "out"};
    return k;
}

void ExperimentConfig::set(const std::string& key, const std::string& raw) {
    const std::string v = trim(raw);
    if (key == "setting") setting = setting_from_string(v);
    else if (key == "strategy") strategy = strategy_from_string(v);
    else if (key == "rank") rank = parse_size(key, v);
    else if (key == "sites") sites = parse_size(key, v);
    else if (key == "train_per_site") train_per_site = parse_size(key, v);
    else if (key == "test_per_site") test_per_site = parse_size(key, v);
    else if (key == "rounds") rounds = parse_size(key, v);
    else if (key == "local_steps") local_steps = parse_size(key, v);
    else if (key == "seed") seed = parse_u64(key, v);
    else if (key == "model") model = v;
    else if (key == "num_classes") num_classes = parse_size(key, v);
    else if (key == "lr") lr = parse_real(key, v);
    else if (key == "batch_size") batch_size = parse_size(key, v);
    else if (key == "lora_scale") lora_scale = parse_real(key, v);
    else if (key == "weighting") weighting = weighting_from_string(v);
    else if (key == "parallel") parallel = parse_bool(key, v);
    else if (key == "wire_roundtrip") wire_roundtrip = parse_bool(key, v);
    else if (key == "ranks") ranks = parse_list(key, v);
    else if (key == "out") out = v;
    else throw ConfigError("unknown config key '" + key + "'");
}

std::string ExperimentConfig::get(const std::string& key) const {
    if (key == "setting") return to_string(setting);
    if (key == "strategy") return to_string(strategy);
    if (key == "rank") return std::to_string(rank);
    if (key == "sites") return std::to_string(sites);
    if (key == "train_per_site") return std::to_string(train_per_site);
    if (key == "test_per_site") return std::to_string(test_per_site);
    if (key == "rounds") return std::to_string(rounds);
    if (key == "local_steps") return std::to_string(local_steps);
    if (key == "seed") return std::to_string(seed);
    if (key == "model") return model;
    if (key == "num_classes") return std::to_string(num_classes);
    if (key == "lr") return format_double(lr);
    if (key == "batch_size") return std::to_string(batch_size);
    if (key == "lora_scale") return format_double(lora_scale);
    if (key == "weighting") return to_string(weighting);
    if (key == "parallel") return parallel ? "true" : "false";
    if (key == "wire_roundtrip") return wire_roundtrip ? "true" : "false";
    if (key == "ranks") {
        std::string s;
        for (std::size_t i = 0; i < ranks.size(); ++i) s += (i ? "," : "") + std::to_string(ranks[i]);
        return s;
    }
    if (key == "out") return out;
    throw ConfigError("unknown config key '" + key + "'");
}

ModelConfig ExperimentConfig::model_config() const {
    ModelConfig mc = ModelConfig::by_name(model);
    mc.num_classes = num_classes;
    return mc;
}

void ExperimentConfig::validate() const {
    auto fail = [](const std::string& why) { throw ConfigError("experiment config: " + why); };
    if (sites == 0) fail("sites must be >= 1");
    if (train_per_site == 0 || test_per_site == 0) fail("train_per_site and test_per_site must be >= 1");
    if (rounds == 0) fail("rounds must be >= 1");
    if (local_steps == 0) fail("local_steps must be >= 1");
    if (num_classes < 2 || num_classes > 255) fail("num_classes must be in [2, 255]");
    if (!(lr > 0.0) || !std::isfinite(lr)) fail("lr must be a positive finite number");
    if (batch_size == 0) fail("batch_size must be >= 1");
    if (!std::isfinite(lora_scale) || lora_scale == 0.0) fail("lora_scale must be finite and non-zero");
    const ModelConfig mc = model_config();
    mc.validate();
    if (!mc.runnable()) fail("model '" + model + "' is count-only and cannot be trained (use the count subcommand)");
    const std::size_t cap = max_lora_rank(mc);
    if (mask_for(strategy).uses_lora && (rank == 0 || rank > cap)) {
        fail("rank must be in [1, " + std::to_string(cap) + "] for model '" + model + "'");
    }
    if (ranks.empty()) fail("ranks must not be empty");
    for (std::size_t r : ranks)
        if (r == 0 || r > cap) fail("ablation rank " + std::to_string(r) + " outside [1, " + std::to_string(cap) + "]");
}

std::string ExperimentConfig::canonical() const {
    std::string s;
    for (const auto& k : keys()) {
        if (k == "out") continue;
        s += k + " = " + get(k) + "\n";
    }
    return s;
}

std::string ExperimentConfig::hash() const { return sha256_hex(canonical()); }

std::vector<std::pair<std::string, std::string>> parse_kv(const std::string& text) {
    std::vector<std::pair<std::string, std::string>> out;
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
        out.emplace_back(std::move(key), std::move(value));
    }
    return out;
}

// ---------------------------------------------------------------- runners

ExperimentResult run_experiment(const ExperimentConfig& cfg, const Progress& progress) {
    cfg.validate();
    const World w = make_world(cfg);
    ExperimentResult res;
    res.table = empty_table(cfg, "run");
    res.ledger = CommLedger(cfg.strategy, cfg.rank, cfg.num_classes);
    const bool all = cfg.setting == Setting::all;
    if (all || cfg.setting == Setting::local) res.table.rows.push_back(run_local(cfg, w, progress));
    if (all || cfg.setting == Setting::centralized) res.table.rows.push_back(run_centralized(cfg, w, progress));
    if (all || cfg.setting == Setting::federated) {
        FederatedOutcome f = run_federated(cfg, w, cfg.strategy, cfg.rank, progress);
        res.table.rows.push_back(std::move(f.row));
        res.ledger = std::move(f.ledger);
        res.rounds = std::move(f.rounds);
        res.transcript = std::move(f.transcript);
    }
    return res;
}

ExperimentResult run_ablation(const ExperimentConfig& cfg, const Progress& progress) {
    cfg.validate();
    if (cfg.strategy != Strategy::flap_sam) throw ConfigError("ablation runs FLAP-SAM only");
    const World w = make_world(cfg);
    ExperimentResult res;
    res.table = empty_table(cfg, "ablation");
    res.ledger = CommLedger(cfg.strategy, cfg.rank, cfg.num_classes);
    for (std::size_t r : cfg.ranks) {
        if (progress) progress("rank " + std::to_string(r));
        FederatedOutcome f = run_federated(cfg, w, Strategy::flap_sam, r, progress);
        res.table.rows.push_back(std::move(f.row));
    }
    return res;
}

// ---------------------------------------------------------------- tables

std::string format_results_text(const ResultsTable& t) {
    std::ostringstream os;
    os << "# fedpeft " << t.title << "\n";
    for (const auto& [k, v] : t.provenance) os << "# " << k << ": " << v << "\n";
    os << "# config:\n";
    std::istringstream cfg(t.config_text);
    std::string line;
    while (std::getline(cfg, line)) os << "#   " << line << "\n";

    const std::size_t sites = t.rows.empty() ? 0 : t.rows.front().site_dice.size();
    std::vector<std::vector<std::string>> grid{columns(sites)};
    for (const auto& r : t.rows) {
        if (r.site_dice.size() != sites) throw ConfigError("results: rows disagree on site count");
        grid.push_back(row_cells(r));
    }
    std::vector<std::size_t> width(grid.front().size(), 0);
    for (const auto& row : grid)
        for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
    for (const auto& row : grid) {
        for (std::size_t c = 0; c < row.size(); ++c) {
            os << row[c];
            if (c + 1 < row.size()) os << std::string(width[c] - row[c].size() + 2, ' ');
        }
        os << "\n";
    }
    return os.str();
}

std::string format_results_csv(const ResultsTable& t) {
    std::ostringstream os;
    os << "# fedpeft " << t.title << "\n";
    for (const auto& [k, v] : t.provenance) os << "# " << k << ": " << v << "\n";
    const std::size_t sites = t.rows.empty() ? 0 : t.rows.front().site_dice.size();
    const auto head = columns(sites);
    for (std::size_t c = 0; c < head.size(); ++c) os << (c ? "," : "") << head[c];
    os << "\n";
    for (const auto& r : t.rows) {
        const auto cells = row_cells(r);
        for (std::size_t c = 0; c < cells.size(); ++c) os << (c ? "," : "") << cells[c];
        os << "\n";
    }
    return os.str();
}

namespace {

template <typename SplitFn>
ResultsTable parse_table(const std::string& text, SplitFn split_row, bool with_config) {
    ResultsTable t;
    std::istringstream is(text);
    std::string line;
    bool in_config = false;
    std::optional<std::size_t> sites;
    while (std::getline(is, line)) {
        if (line.rfind("#", 0) == 0) {
            if (line.rfind("# fedpeft ", 0) == 0 && t.title.empty()) {
                t.title = line.substr(10);
            } else if (with_config && line == "# config:") {
                in_config = true;
            } else if (in_config && line.rfind("#   ", 0) == 0) {
                t.config_text += line.substr(4) + "\n";
            } else {
                const auto colon = line.find(": ");
                if (colon == std::string::npos) throw IoError("results: malformed header line '" + line + "'");
                t.provenance[line.substr(2, colon - 2)] = line.substr(colon + 2);
            }
            continue;
        }
        if (trim(line).empty()) continue;
        const auto cells = split_row(line);
        if (!sites) {
            sites = site_count(cells);
            continue;
        }
        t.rows.push_back(row_from_cells(cells, *sites));
    }
    if (!sites) throw IoError("results: missing column header");
    return t;
}

}  // namespace

ResultsTable parse_results_text(const std::string& text) {
    return parse_table(text, [](const std::string& l) { return split_ws(l); }, true);
}

ResultsTable parse_results_csv(const std::string& text) {
    return parse_table(text, [](const std::string& l) { return split(l, ','); }, false);
}

void write_outputs(const ExperimentConfig& cfg, const ExperimentResult& result, const std::string& stem) {
    if (cfg.out.empty()) return;
    std::error_code ec;
    std::filesystem::create_directories(cfg.out, ec);
    if (ec) throw IoError("cannot create output directory " + cfg.out + ": " + ec.message());
    const std::filesystem::path dir(cfg.out);
    io::write_text((dir / (stem + ".txt")).string(), format_results_text(result.table));
    io::write_text((dir / (stem + ".csv")).string(), format_results_csv(result.table));
    if (!result.ledger.entries().empty()) io::write_text((dir / "ledger.csv").string(), result.ledger.to_csv());
    if (!result.transcript.empty()) io::write_text((dir / "transcript.jsonl").string(), result.transcript);
}

}  // namespace fedpeft
