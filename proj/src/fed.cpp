// Copyright (c) 2026 The fedpeft Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "fedpeft/fed.hpp"

#include <chrono>
#include <cmath>
#include <exception>
#include <thread>

#include <json.hpp>

#include "fedpeft/errors.hpp"

namespace fedpeft {

namespace {

constexpr double kWeightSumTolerance = 1e-12;

void check_weights(std::span<const ClientUpdate> updates) {
    if (updates.empty()) throw ProtocolError("aggregate: no client updates");
    double sum = 0.0;
    for (const auto& u : updates) {
        if (!(u.weight >= 0.0)) throw ProtocolError("aggregate: negative weight for client " + std::to_string(u.client_id));
        sum += u.weight;
    }
    if (std::abs(sum - 1.0) > kWeightSumTolerance) {
        throw ProtocolError("aggregate: client weights sum to " + std::to_string(sum));
    }
}

std::vector<double> weights_of(std::span<const ClientUpdate> updates) {
    std::vector<double> w;
    w.reserve(updates.size());
    for (const auto& u : updates) w.push_back(u.weight);
    return w;
}

DenseTensors combine_dense(const DenseTensors& current, std::span<const ClientUpdate> updates) {
    const auto w = weights_of(updates);
    DenseTensors out;
    out.reserve(current.size());
    for (std::size_t t = 0; t < current.size(); ++t) {
        std::vector<Matrix> parts;
        parts.reserve(updates.size());
        for (const auto& u : updates) {
            if (u.payload.dense.size() != current.size() || u.payload.dense[t].first != current[t].first) {
                throw ProtocolError("aggregate_dense: client " + std::to_string(u.client_id) +
                                    " sent a different tensor list");
            }
            const Matrix& m = u.payload.dense[t].second;
            if (!m.same_shape(current[t].second)) {
                throw ShapeError("aggregate_dense: " + current[t].first + " from client " +
                                 std::to_string(u.client_id) + " is " + m.shape_str() + ", expected " +
                                 current[t].second.shape_str());
            }
            parts.push_back(m);
        }
        out.emplace_back(current[t].first, weighted_sum(parts, w));
    }
    return out;
}

std::pair<AdapterSet, std::vector<LayerResidual>> combine_lora(const ServerState& server,
                                                               std::span<const ClientUpdate> updates) {
    if (!server.global.adapters) throw ProtocolError("aggregate_lora: server has no adapters");
    const AdapterSet& current = *server.global.adapters;
    const auto keys = current.keys();
    for (const auto& u : updates) {
        if (!u.payload.adapters) throw ProtocolError("aggregate_lora: client " + std::to_string(u.client_id) + " sent no adapters");
        if (u.payload.adapters->keys() != keys) {
            throw ProtocolError("aggregate_lora: client " + std::to_string(u.client_id) + " adapter keys differ");
        }
        for (const auto& key : keys) {
            if (u.payload.adapters->at(key).rank != server.rank) {
                throw ProtocolError("aggregate_lora: client " + std::to_string(u.client_id) + " rank mismatch at layer " +
                                    std::to_string(key.layer));
            }
        }
    }
    const auto w = weights_of(updates);
    AdapterSet next;
    std::vector<LayerResidual> residuals;
    for (const auto& key : keys) {
        std::vector<Matrix> deltas;
        deltas.reserve(updates.size());
        for (const auto& u : updates) deltas.push_back(merge_delta(u.payload.adapters->at(key)));
        const Matrix agg = weighted_sum(deltas, w);
        const SVDResult s = svd(agg);
        auto [b, a] = truncate_svd(s, server.rank);
        const double residual = frobenius_norm(agg - matmul(b, a));
        residuals.push_back(LayerResidual{key, residual, tail_energy(s, server.rank)});
        next.insert(key, LoRAAdapter{std::move(a), std::move(b), server.rank, current.at(key).scale});
    }
    return {std::move(next), std::move(residuals)};
}

double dense_change(const DenseTensors& before, const DenseTensors& after) {
    double acc = 0.0;
    for (std::size_t t = 0; t < before.size(); ++t) {
        const double n = frobenius_norm(after[t].second - before[t].second);
        acc += n * n;
    }
    return std::sqrt(acc);
}

double lora_change(const AdapterSet& before, const AdapterSet& after) {
    double acc = 0.0;
    for (const auto& [key, ad] : before) {
        const double n = frobenius_norm(merge_delta(after.at(key)) - merge_delta(ad));
        acc += n * n;
    }
    return std::sqrt(acc);
}

MessageHeader header_for(const ServerState& server, Direction dir, std::uint32_t client, std::size_t samples) {
    MessageHeader h;
    h.direction = dir;
    h.round = server.round;
    h.client = client;
    h.strategy = server.mask.strategy;
    h.samples = samples;
    h.config_hash = server.config_hash;
    return h;
}

void load_payload(const Payload& p, LearnerState& learner) {
    for (const auto& [name, m] : p.dense) {
        ParamEntry& e = learner.registry.at(name);
        if (!e.value.same_shape(m)) throw ShapeError("broadcast: " + name + " shape mismatch");
        e.value = m;
    }
    learner.adapters = p.adapters;
}

}  // namespace

std::string to_string(Weighting w) { return w == Weighting::uniform ? "uniform" : "samples"; }

Weighting weighting_from_string(const std::string& s) {
    if (s == "uniform") return Weighting::uniform;
    if (s == "samples" || s == "sample_proportional") return Weighting::sample_proportional;
    throw ConfigError("unknown weighting '" + s + "' (expected samples or uniform)");
}

ServerState init_server(const BuiltModel& base, Strategy strategy, std::size_t rank, const LoRAOptions& lora, Rng& rng) {
    ServerState s;
    s.config_hash = base.model.config().hash();
    s.mask = mask_for(strategy);
    s.rank = rank;
    s.reference = base.registry;
    std::optional<AdapterSet> adapters;
    if (s.mask.uses_lora) {
        adapters = make_adapters(base.model.config(), rank, lora, rng);
        s.lora_scale = adapters->begin()->second.scale;
    }
    s.global = extract_payload(s.reference, s.mask, adapters ? &*adapters : nullptr);
    return s;
}

ClientState make_client(std::uint32_t id, const BuiltModel& base, Strategy strategy, const std::vector<Sample>& data,
                        std::uint64_t seed) {
    if (data.empty()) throw ConfigError("client " + std::to_string(id) + " has no training samples");
    ClientState c;
    c.client_id = id;
    c.config_hash = base.model.config().hash();
    c.learner.registry = base.registry;
    c.learner.mask = mask_for(strategy);
    c.data = &data;
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), id, 0xC11E47u};
    c.rng = Rng(seq);
    return c;
}

std::vector<double> client_weights(std::span<const ClientState> clients, Weighting weighting) {
    if (clients.empty()) throw ProtocolError("client_weights: no clients");
    std::vector<double> w(clients.size());
    if (weighting == Weighting::uniform) {
        for (auto& x : w) x = 1.0 / static_cast<double>(clients.size());
        return w;
    }
    double total = 0.0;
    for (const auto& c : clients) {
        if (c.num_samples() == 0) throw ProtocolError("client " + std::to_string(c.client_id) + " has no samples");
        total += static_cast<double>(c.num_samples());
    }
    for (std::size_t k = 0; k < clients.size(); ++k) w[k] = static_cast<double>(clients[k].num_samples()) / total;
    return w;
}

std::vector<std::size_t> broadcast(const ServerState& server, std::span<ClientState> clients, bool wire_roundtrip) {
    for (const auto& c : clients) {
        if (c.config_hash != server.config_hash) {
            throw ProtocolError("broadcast: client " + std::to_string(c.client_id) + " config hash " +
                                c.config_hash.substr(0, 12) + " != server " + server.config_hash.substr(0, 12));
        }
        if (c.learner.mask.strategy != server.mask.strategy) {
            throw ProtocolError("broadcast: client " + std::to_string(c.client_id) + " runs a different strategy");
        }
    }
    std::vector<std::size_t> bytes;
    bytes.reserve(clients.size());
    for (auto& c : clients) {
        const auto wire = encode_message(header_for(server, Direction::down, c.client_id, 0), server.global);
        bytes.push_back(wire.size());
        if (wire_roundtrip) {
            load_payload(decode_message(wire, server.reference, server.mask, server.lora_scale).payload, c.learner);
        } else {
            load_payload(server.global, c.learner);
        }
        c.round = server.round;
    }
    return bytes;
}

void aggregate_dense(ServerState& server, std::span<const ClientUpdate> updates) {
    check_weights(updates);
    server.global.dense = combine_dense(server.global.dense, updates);
}

std::vector<LayerResidual> aggregate_lora(ServerState& server, std::span<const ClientUpdate> updates) {
    check_weights(updates);
    auto [next, residuals] = combine_lora(server, updates);
    server.global.adapters = std::move(next);
    return residuals;
}

RoundRecord run_round(ServerState& server, std::span<ClientState> clients, const SegmentationModel& model,
                      std::size_t local_steps, const FedOptions& options, CommLedger* ledger) {
    const auto start = std::chrono::steady_clock::now();
    if (clients.empty()) throw ProtocolError("run_round: no clients");
    for (std::size_t k = 1; k < clients.size(); ++k) {
        if (clients[k].client_id <= clients[k - 1].client_id) throw ProtocolError("run_round: clients must be sorted by id");
    }
    server.weights = client_weights(clients, options.weighting);

    RoundRecord rec;
    rec.round = server.round + 1;
    const auto down = broadcast(server, clients, options.wire_roundtrip);

    // Local training; each client touches only its own state.
    std::vector<std::vector<double>> traces(clients.size());
    std::vector<std::exception_ptr> failures(clients.size());
    auto work = [&](std::size_t k) {
        try {
            traces[k] = train_local(model, clients[k].learner, *clients[k].data, local_steps, options.trainer,
                                    clients[k].rng);
        } catch (...) {
            failures[k] = std::current_exception();
        }
    };
    if (options.parallel_clients && clients.size() > 1) {
        std::vector<std::thread> pool;
        pool.reserve(clients.size());
        for (std::size_t k = 0; k < clients.size(); ++k) pool.emplace_back(work, k);
        for (auto& t : pool) t.join();
    } else {
        for (std::size_t k = 0; k < clients.size(); ++k) work(k);
    }
    for (std::size_t k = 0; k < clients.size(); ++k) {
        if (!failures[k]) continue;
        const std::string who = "round " + std::to_string(rec.round) + ", client " + std::to_string(clients[k].client_id);
        try {
            std::rethrow_exception(failures[k]);
        } catch (const DivergenceError& e) {
            throw DivergenceError(who + ": " + e.what());
        } catch (const std::exception& e) {
            throw ProtocolError(who + ": " + e.what());
        }
    }

    // Uplink.
    std::vector<ClientUpdate> updates;
    updates.reserve(clients.size());
    std::vector<std::size_t> up;
    for (std::size_t k = 0; k < clients.size(); ++k) {
        auto& c = clients[k];
        Payload p = extract_payload(c.learner.registry, c.learner.mask, c.learner.adapter_ptr());
        const auto wire = encode_message(header_for(server, Direction::up, c.client_id, c.num_samples()), p);
        up.push_back(wire.size());
        if (options.wire_roundtrip) p = decode_message(wire, server.reference, server.mask, server.lora_scale).payload;
        updates.push_back(ClientUpdate{c.client_id, server.weights[k], std::move(p)});
    }

    // Dense and LoRA parts are computed first and committed together.
    check_weights(updates);
    DenseTensors dense = combine_dense(server.global.dense, updates);
    std::optional<AdapterSet> adapters;
    if (server.mask.uses_lora) {
        auto [next, residuals] = combine_lora(server, updates);
        rec.lora_update_norm = lora_change(*server.global.adapters, next);
        adapters = std::move(next);
        rec.residuals = std::move(residuals);
    }
    rec.dense_update_norm = dense_change(server.global.dense, dense);
    server.global.dense = std::move(dense);
    if (adapters) server.global.adapters = std::move(adapters);
    ++server.round;

    for (std::size_t k = 0; k < clients.size(); ++k) {
        ClientTraffic t;
        t.client_id = clients[k].client_id;
        t.samples = clients[k].num_samples();
        t.bytes_down = down[k];
        t.bytes_up = up[k];
        if (!traces[k].empty()) {
            t.loss_first = traces[k].front();
            t.loss_last = traces[k].back();
        }
        rec.clients.push_back(t);
        if (ledger) {
            ledger->append(LedgerEntry{rec.round, t.client_id, Direction::down, t.bytes_down});
            ledger->append(LedgerEntry{rec.round, t.client_id, Direction::up, t.bytes_up});
        }
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return rec;
}

void apply_global(const ServerState& server, LearnerState& learner) { load_payload(server.global, learner); }

std::string transcript_line(const RoundRecord& r) {
    nlohmann::ordered_json j;
    j["round"] = r.round;
    auto& cl = j["clients"] = nlohmann::ordered_json::array();
    for (const auto& c : r.clients) {
        cl.push_back({{"client", c.client_id},
                      {"samples", c.samples},
                      {"bytes_down", c.bytes_down},
                      {"bytes_up", c.bytes_up},
                      {"loss_first", c.loss_first},
                      {"loss_last", c.loss_last}});
    }
    auto& res = j["svd_residuals"] = nlohmann::ordered_json::array();
    for (const auto& l : r.residuals) {
        res.push_back({{"layer", l.key.layer},
                       {"target", to_string(l.key.target)},
                       {"residual", l.residual},
                       {"tail_energy", l.tail_energy}});
    }
    j["dense_update_norm"] = r.dense_update_norm;
    j["lora_update_norm"] = r.lora_update_norm;
    return j.dump();
}

}  // namespace fedpeft
